#pragma once

#include "matcha/autodiff.hpp"
#include "matcha/rng.hpp"
#include "matcha/tensor.hpp"

#include <cmath>
#include <functional>

namespace matcha {

struct FlowTime {
    double t;
    explicit FlowTime(double t_) : t(t_) {
        if (!(t >= 0.0 && t <= 1.0))
            throw TensorError("FlowTime: t must be in [0,1], got " + std::to_string(t_));
    }
};

struct OtCfmConfig {
    double sigma_min = 1e-4;
};

// phi_t(x) = (1 - (1 - sigma_min) t) x0 + t x1
template <class S>
Tensor<S> ot_flow_point(const Tensor<S>& x0, const Tensor<S>& x1, FlowTime t,
                        const OtCfmConfig& cfg) {
    if (!x0.same_shape(x1)) shape_fail("ot_flow_point", x0.shape, x1.shape);
    // algebraically 1 - (1 - sigma_min) t, arranged so t=0 and t=1 are exact
    S a = S(1.0 - t.t + cfg.sigma_min * t.t);
    S b = S(t.t);
    Tensor<S> out(x0.shape);
    for (std::size_t i = 0; i < out.size(); ++i)
        out.data[i] = a * x0.data[i] + b * x1.data[i];
    return out;
}

// u_t = x1 - (1 - sigma_min) x0; time-invariant
template <class S>
Tensor<S> ot_target_field(const Tensor<S>& x0, const Tensor<S>& x1,
                          const OtCfmConfig& cfg) {
    if (!x0.same_shape(x1)) shape_fail("ot_target_field", x0.shape, x1.shape);
    S a = S(1.0 - cfg.sigma_min);
    Tensor<S> out(x0.shape);
    for (std::size_t i = 0; i < out.size(); ++i)
        out.data[i] = x1.data[i] - a * x0.data[i];
    return out;
}

// The learnable vector field: given (x_t, mu, t) at one item's true length,
// returns a tape node of x_t's shape (differentiable w.r.t. bound params).
template <class S>
using FieldFn =
    std::function<Var<S>(Tape<S>&, const Tensor<S>& x_t, const Tensor<S>& mu, double t)>;

// Regression of the field onto u_t over a batch. x1/mu: [B x C x Tmax],
// mask: [B x Tmax] with contiguous leading ones per row. One t ~ U[0,1] and
// one x0 ~ N(0,I) per item, from independent streams of `seed`. Reduction is
// the mean over valid masked elements across the whole batch.
template <class S>
Var<S> cfm_loss(Tape<S>& tape, const Tensor<S>& x1_batch, const Tensor<S>& mu_batch,
                const Tensor<S>& mask, const FieldFn<S>& field_fn, std::uint64_t seed,
                const OtCfmConfig& cfg = {}) {
    if (x1_batch.rank() != 3 || !x1_batch.same_shape(mu_batch))
        shape_fail("cfm_loss", x1_batch.shape, mu_batch.shape);
    std::size_t B = x1_batch.dim(0), C = x1_batch.dim(1), Tmax = x1_batch.dim(2);
    if (mask.rank() != 2 || mask.dim(0) != B || mask.dim(1) != Tmax)
        shape_fail("cfm_loss mask", x1_batch.shape, mask.shape);

    Rng root(seed);
    Rng t_rng = root.split(1);
    Rng x0_rng = root.split(2);

    Var<S> sq_sum = nullptr;
    std::size_t n_valid = 0;
    for (std::size_t b = 0; b < B; ++b) {
        std::size_t L = 0;
        while (L < Tmax && mask(b, L) > S(0.5)) ++L;
        for (std::size_t j = L; j < Tmax; ++j)
            if (mask(b, j) > S(0.5))
                throw TensorError("cfm_loss: mask row " + std::to_string(b) +
                                  " is not a contiguous prefix");
        double t = t_rng.uniform();
        Tensor<S> x0({C, L}), x1({C, L}), mu({C, L});
        for (std::size_t i = 0; i < C; ++i)
            for (std::size_t j = 0; j < L; ++j) {
                x0(i, j) = S(x0_rng.normal());
                x1(i, j) = x1_batch(b, i, j);
                mu(i, j) = mu_batch(b, i, j);
            }
        if (L == 0) continue;
        Tensor<S> x_t = ot_flow_point(x0, x1, FlowTime(t), cfg);
        Tensor<S> u_t = ot_target_field(x0, x1, cfg);
        Var<S> v = field_fn(tape, x_t, mu, t);
        if (!v->value.same_shape(x_t)) shape_fail("cfm_loss field", x_t.shape, v->value.shape);
        Var<S> r = sub(constant(tape, std::move(u_t)), v);
        Var<S> s = sum_all(mul(r, r));
        sq_sum = sq_sum ? add(sq_sum, s) : s;
        n_valid += C * L;
    }
    if (n_valid == 0) throw TensorError("cfm_loss: empty mask");
    return mul_scalar(sq_sum, S(1) / S(n_valid));
}

}  // namespace matcha
