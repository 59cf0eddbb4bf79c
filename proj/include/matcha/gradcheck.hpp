#pragma once

#include "matcha/rng.hpp"
#include "matcha/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

namespace matcha {

struct GradCheckReport {
    double max_rel_err = 0.0;
    double eps = 0.0;
    double tol = 0.0;
    bool pass = false;
    std::size_t checked = 0;
    std::string worst;  // "tensor#k[i]" of the largest error
};

// Central finite differences against reverse-mode gradients, always at
// 64-bit. `eval` is a pure forward pass to a scalar, reading the current
// contents of `tensors`; `analytic` runs forward+backward and returns one
// gradient tensor per entry of `tensors`, in order. Elements are perturbed
// in place and restored. When a tensor has more than `max_per_tensor`
// elements a seeded random subset is checked.
inline GradCheckReport grad_check(const std::function<double()>& eval,
                                  const std::function<std::vector<Tensor<double>>()>& analytic,
                                  const std::vector<Tensor<double>*>& tensors,
                                  double eps = 1e-6, double tol = 1e-5,
                                  std::size_t max_per_tensor = 10000,
                                  std::uint64_t seed = 0) {
    if (eps <= 0 || tol <= 0) throw TensorError("grad_check: eps and tol must be positive");
    GradCheckReport rep;
    rep.eps = eps;
    rep.tol = tol;
    std::vector<Tensor<double>> grads = analytic();
    if (grads.size() != tensors.size())
        throw TensorError("grad_check: analytic() returned wrong tensor count");
    Rng rng(seed);
    for (std::size_t k = 0; k < tensors.size(); ++k) {
        Tensor<double>& t = *tensors[k];
        if (!t.same_shape(grads[k]))
            shape_fail("grad_check", t.shape, grads[k].shape);
        std::vector<std::size_t> idx(t.size());
        std::iota(idx.begin(), idx.end(), 0);
        if (t.size() > max_per_tensor) {
            std::shuffle(idx.begin(), idx.end(), rng.engine());
            idx.resize(max_per_tensor);
        }
        for (std::size_t i : idx) {
            double saved = t.data[i];
            t.data[i] = saved + eps;
            double fp = eval();
            t.data[i] = saved - eps;
            double fm = eval();
            t.data[i] = saved;
            if (!std::isfinite(fp) || !std::isfinite(fm))
                throw TensorError("grad_check: non-finite eval at tensor#" +
                                  std::to_string(k) + "[" + std::to_string(i) + "]");
            double num = (fp - fm) / (2.0 * eps);
            double ana = grads[k].data[i];
            if (!std::isfinite(ana))
                throw TensorError("grad_check: non-finite gradient at tensor#" +
                                  std::to_string(k) + "[" + std::to_string(i) + "]");
            double denom = std::max({std::abs(num), std::abs(ana), 1.0});
            double err = std::abs(num - ana) / denom;
            ++rep.checked;
            if (err > rep.max_rel_err) {
                rep.max_rel_err = err;
                rep.worst = "tensor#" + std::to_string(k) + "[" + std::to_string(i) + "]";
            }
        }
    }
    rep.pass = rep.max_rel_err < tol;
    return rep;
}

}  // namespace matcha
