#pragma once

#include "matcha/rng.hpp"
#include "matcha/tensor.hpp"

#include <chrono>
#include <functional>

namespace matcha {

template <class S>
struct SolveReport {
    Tensor<S> output;
    std::size_t nfe = 0;
    double wall_time = 0.0;
};

template <class S>
Tensor<S> sample_prior(Shape shape, double temperature, std::uint64_t seed) {
    if (!(temperature > 0.0))
        throw TensorError("sample_prior: temperature must be positive, got " +
                          std::to_string(temperature));
    Rng rng(seed);
    Tensor<S> out(std::move(shape));
    for (auto& v : out.data) v = S(temperature * rng.normal());
    return out;
}

// Inference-time vector field: v(x, t, condition) with x's shape.
template <class S>
using SynthField =
    std::function<Tensor<S>(const Tensor<S>& x, double t, const Tensor<S>& condition)>;

// Fixed-step forward Euler from t=0 to t=1, left-endpoint grid t_k = k/n.
// nfe equals n_steps exactly.
template <class S>
SolveReport<S> euler_solve(const Tensor<S>& x0, const SynthField<S>& field_fn,
                           std::size_t n_steps, const Tensor<S>& condition) {
    if (n_steps < 1) throw TensorError("euler_solve: n_steps must be >= 1");
    auto start = std::chrono::steady_clock::now();
    SolveReport<S> rep;
    Tensor<S> x = x0;
    double h = 1.0 / (double)n_steps;
    for (std::size_t k = 0; k < n_steps; ++k) {
        double t = (double)k * h;
        Tensor<S> v = field_fn(x, t, condition);
        ++rep.nfe;
        if (!v.same_shape(x)) shape_fail("euler_solve field", x.shape, v.shape);
        for (std::size_t i = 0; i < x.size(); ++i) x.data[i] += S(h) * v.data[i];
    }
    rep.output = std::move(x);
    rep.wall_time =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return rep;
}

}  // namespace matcha
