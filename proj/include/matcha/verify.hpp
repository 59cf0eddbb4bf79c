#pragma once

#include "matcha/align.hpp"
#include "matcha/cfm.hpp"
#include "matcha/gradcheck.hpp"
#include "matcha/net.hpp"
#include "matcha/sampler.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

namespace matcha {

// ---------------------------------------------------------------------------
// Exhaustive enumeration of monotonic surjective paths; the independent
// oracle for the MAS dynamic program. Only feasible for small N, T.
// ---------------------------------------------------------------------------

template <class S>
struct BruteForceMas {
    double best = -std::numeric_limits<double>::infinity();
    std::vector<std::size_t> best_path;
};

template <class S>
BruteForceMas<S> brute_force_mas(const Tensor<S>& log_lik) {
    std::size_t N = log_lik.rows(), T = log_lik.cols();
    BruteForceMas<S> r;
    std::vector<std::size_t> path(T);
    std::function<void(std::size_t, std::size_t, double)> rec =
        [&](std::size_t j, std::size_t i, double score) {
            if (j == T) {
                if (i == N - 1 && score > r.best) {
                    r.best = score;
                    r.best_path = path;
                }
                return;
            }
            // stay on token i or advance to i+1
            path[j] = i;
            rec(j + 1, i, score + (double)log_lik(i, j));
            if (i + 1 < N) {
                path[j] = i + 1;
                rec(j + 1, i + 1, score + (double)log_lik(i + 1, j));
            }
        };
    path[0] = 0;
    rec(1, 0, (double)log_lik(0, 0));
    if (T == 1) {
        r.best = (double)log_lik(0, 0);
        r.best_path = {0};
    }
    return r;
}

// ---------------------------------------------------------------------------
// verification suites (shared by tests and the CLI verify command)
// ---------------------------------------------------------------------------

struct VerifyResult {
    bool pass = true;
    std::string message;

    void fail(const std::string& m) {
        pass = false;
        message += (message.empty() ? "" : "; ") + m;
    }
};

inline VerifyResult verify_flow_suite() {
    VerifyResult r;
    Rng rng(7);
    OtCfmConfig cfg{1e-4};
    Tensor<double> x0({5, 3}), x1({5, 3});
    for (auto& v : x0.data) v = rng.normal();
    for (auto& v : x1.data) v = rng.normal();

    Tensor<double> p0 = ot_flow_point(x0, x1, FlowTime(0.0), cfg);
    for (std::size_t i = 0; i < x0.size(); ++i)
        if (p0.data[i] != x0.data[i]) r.fail("phi_0 != x0 at element " + std::to_string(i));
    Tensor<double> p1 = ot_flow_point(x0, x1, FlowTime(1.0), cfg);
    for (std::size_t i = 0; i < x0.size(); ++i)
        if (p1.data[i] != cfg.sigma_min * x0.data[i] + x1.data[i])
            r.fail("phi_1 != sigma_min*x0 + x1 at element " + std::to_string(i));

    // d(phi)/dt against the analytic target field, central differences in t
    Tensor<double> u = ot_target_field(x0, x1, cfg);
    double h = 1e-7;
    for (double t : {0.25, 0.5, 0.75}) {
        Tensor<double> fp = ot_flow_point(x0, x1, FlowTime(t + h), cfg);
        Tensor<double> fm = ot_flow_point(x0, x1, FlowTime(t - h), cfg);
        for (std::size_t i = 0; i < u.size(); ++i) {
            double num = (fp.data[i] - fm.data[i]) / (2 * h);
            double err = std::abs(num - u.data[i]) /
                         std::max({std::abs(num), std::abs(u.data[i]), 1.0});
            if (err >= 1e-6) r.fail("dphi/dt mismatch " + std::to_string(err));
        }
    }
    return r;
}

inline VerifyResult verify_mas_suite(std::size_t trials = 100) {
    VerifyResult r;
    for (std::size_t s = 0; s < trials; ++s) {
        Rng rng(1000 + s);
        std::size_t N = 1 + (std::size_t)rng.uniform_int(0, 4);
        std::size_t T = N + (std::size_t)rng.uniform_int(0, (std::int64_t)(8 - N));
        Tensor<double> ll({N, T});
        for (auto& v : ll.data) v = rng.normal();
        AlignmentPath dp = mas(ll);
        dp.validate();
        double dp_score = 0;
        for (std::size_t j = 0; j < T; ++j) dp_score += ll(dp.frame_to_token[j], j);
        auto bf = brute_force_mas(ll);
        if (std::abs(dp_score - bf.best) > 1e-9)
            r.fail("seed " + std::to_string(s) + ": DP " + std::to_string(dp_score) +
                   " != brute force " + std::to_string(bf.best));
        Durations d = durations_from_path(dp);
        if (d.total() != T) r.fail("seed " + std::to_string(s) + ": durations don't sum to T");
        for (std::size_t v : d.d)
            if (v < 1) r.fail("seed " + std::to_string(s) + ": zero duration");
    }
    return r;
}

inline VerifyResult verify_rope_suite(std::size_t trials = 100) {
    VerifyResult r;
    std::size_t H = 2, L = 6, D = 8;
    for (std::size_t s = 0; s < trials; ++s) {
        Rng rng(500 + s);
        Tensor<double> q({H, L, D}), k({H, L, D});
        for (auto& v : q.data) v = rng.normal();
        for (auto& v : k.data) v = rng.normal();
        double shift = rng.uniform(0.0, 20.0);
        std::vector<double> pos(L), pos_shift(L);
        for (std::size_t l = 0; l < L; ++l) {
            pos[l] = (double)l;
            pos_shift[l] = (double)l + shift;
        }
        Tape<double> tape;
        Var<double> qv = constant(tape, q), kv = constant(tape, k);
        Var<double> q0 = rope_rotate(qv, &pos), k0 = rope_rotate(kv, &pos);
        Var<double> q1 = rope_rotate(qv, &pos_shift), k1 = rope_rotate(kv, &pos_shift);
        Var<double> l0 = bmm(q0, transpose_last2(k0));
        Var<double> l1 = bmm(q1, transpose_last2(k1));
        for (std::size_t i = 0; i < l0->value.size(); ++i) {
            double err = std::abs(l0->value.data[i] - l1->value.data[i]);
            if (err >= 1e-6) {
                r.fail("seed " + std::to_string(s) + ": logit shift error " +
                       std::to_string(err));
                break;
            }
        }
    }
    return r;
}

// ---------------------------------------------------------------------------
// gradient suite: every block's reverse-mode gradients against central
// finite differences at 64-bit
// ---------------------------------------------------------------------------

namespace detail {

// Check d(loss)/d(params) for a forward pass built on a fresh tape each call.
inline GradCheckReport check_params(
    const std::function<Var<double>(Tape<double>&, Ws<double>&)>& build_loss,
    const std::vector<Param<double>*>& params, double tol,
    std::size_t max_per_tensor = 10000) {
    std::vector<Tensor<double>*> tensors;
    for (auto* p : params) tensors.push_back(&p->value);
    auto eval = [&]() {
        Tape<double> tape;
        Ws<double> ws(tape);
        return build_loss(tape, ws)->value.item();
    };
    auto analytic = [&]() {
        Tape<double> tape;
        Ws<double> ws(tape);
        Var<double> loss = build_loss(tape, ws);
        tape.backward(loss);
        std::vector<Tensor<double>> grads;
        for (auto* p : params) grads.push_back(ws.grad_of(*p));
        return grads;
    };
    return grad_check(eval, analytic, tensors, 1e-6, tol, max_per_tensor);
}

inline ModelConfig tiny_config() {
    ModelConfig c;
    c.n_vocab = 36;
    c.n_mel = 4;
    c.encoder = {8, 1, 1, 8, 16, 3, 1, 8, 3, 1};
    c.decoder = {8, 1, 8, 1, 1, 1, 2, 16};
    c.preset = "tiny";
    return c;
}

}  // namespace detail

inline VerifyResult verify_grad_suite(double tol = 1e-4) {
    VerifyResult r;
    Rng rng(42);
    auto report = [&r](const std::string& what, const GradCheckReport& rep) {
        if (!rep.pass)
            r.fail(what + ": max rel err " + std::to_string(rep.max_rel_err) + " at " +
                   rep.worst);
    };

    {  // snake_beta
        Param<double> x, la, lb;
        x.value = Tensor<double>({3, 5});
        la.value = Tensor<double>({3});
        lb.value = Tensor<double>({3});
        for (auto& v : x.value.data) v = rng.uniform(-2, 2);
        for (auto& v : la.value.data) v = rng.uniform(-0.5, 0.5);
        for (auto& v : lb.value.data) v = rng.uniform(-0.5, 0.5);
        report("snake_beta", detail::check_params(
                                 [&](Tape<double>& t, Ws<double>& ws) {
                                     return sum_all(snake_beta(ws(x), ws(la), ws(lb)));
                                 },
                                 {&x, &la, &lb}, tol));
    }
    {  // RoPE attention block
        MultiHeadAttention<double> attn("attn", 8, 2, 4, true);
        attn.init(rng);
        Param<double> x;
        x.value = Tensor<double>({8, 5});
        for (auto& v : x.value.data) v = rng.uniform(-1, 1);
        std::vector<Param<double>*> ps{&x};
        attn.visit([&](Param<double>& p) { ps.push_back(&p); });
        report("rope_attention",
               detail::check_params(
                   [&](Tape<double>& t, Ws<double>& ws) {
                       return sum_all(attn.forward(ws, ws(x)));
                   },
                   ps, tol));
    }
    {  // conv residual block
        ResBlock1d<double> res("res", 4, 4, 6, 2);
        res.init(rng);
        Param<double> x, te;
        x.value = Tensor<double>({4, 6});
        te.value = Tensor<double>({6});
        for (auto& v : x.value.data) v = rng.uniform(-1, 1);
        for (auto& v : te.value.data) v = rng.uniform(-1, 1);
        std::vector<Param<double>*> ps{&x, &te};
        res.visit([&](Param<double>& p) { ps.push_back(&p); });
        report("conv_res_block",
               detail::check_params(
                   [&](Tape<double>& t, Ws<double>& ws) {
                       return sum_all(res.forward(ws, ws(x), ws(te)));
                   },
                   ps, tol));
    }
    ModelConfig tc = detail::tiny_config();
    {  // encoder (mu and duration heads)
        Encoder<double> enc(tc);
        enc.init(rng);
        std::vector<std::size_t> tokens{3, 7, 5};
        // the duration head sits behind a stop-gradient, so finite differences
        // of a joint loss would disagree with backward; check the two heads
        // against their own losses
        std::vector<Param<double>*> ps, dur_ps;
        enc.visit([&](Param<double>& p) {
            ps.push_back(&p);
            if (p.name.rfind("encoder.dur", 0) == 0) dur_ps.push_back(&p);
        });
        report("encoder_mu", detail::check_params(
                                 [&](Tape<double>& t, Ws<double>& ws) {
                                     auto [mu, ld] = enc.forward(ws, tokens);
                                     return sum_all(mu);
                                 },
                                 ps, tol, 40));
        report("encoder_dur", detail::check_params(
                                  [&](Tape<double>& t, Ws<double>& ws) {
                                      auto [mu, ld] = enc.forward(ws, tokens);
                                      return sum_all(ld);
                                  },
                                  dur_ps, tol, 40));
    }
    {  // decoder to a scalar mean
        Decoder<double> dec(tc);
        dec.init(rng);
        Tensor<double> x_t({tc.n_mel, 6}), mu({tc.n_mel, 6});
        for (auto& v : x_t.data) v = rng.uniform(-1, 1);
        for (auto& v : mu.data) v = rng.uniform(-1, 1);
        std::vector<Param<double>*> ps;
        dec.visit([&](Param<double>& p) { ps.push_back(&p); });
        report("decoder", detail::check_params(
                              [&](Tape<double>& t, Ws<double>& ws) {
                                  return mean_all(dec.forward(ws, x_t, mu, 0.3));
                              },
                              ps, tol, 40));
    }
    {  // prior loss w.r.t. aligned means
        Param<double> mu;
        mu.value = Tensor<double>({3, 7});
        Tensor<double> frames({3, 7});
        for (auto& v : mu.value.data) v = rng.uniform(-1, 1);
        for (auto& v : frames.data) v = rng.uniform(-1, 1);
        report("prior_loss", detail::check_params(
                                 [&](Tape<double>& t, Ws<double>& ws) {
                                     return prior_loss(t, frames, ws(mu));
                                 },
                                 {&mu}, tol));
    }
    {  // duration loss
        Param<double> ld;
        ld.value = Tensor<double>({4});
        for (auto& v : ld.value.data) v = rng.uniform(-1, 1);
        Durations target;
        target.d = {2, 5, 1, 3};
        report("duration_loss", detail::check_params(
                                    [&](Tape<double>& t, Ws<double>& ws) {
                                        return duration_loss(t, ws(ld), target);
                                    },
                                    {&ld}, tol));
    }
    {  // cfm loss through the decoder field
        Decoder<double> dec(tc);
        dec.init(rng);
        std::size_t B = 2, C = tc.n_mel, T = 5;
        Tensor<double> x1({B, C, T}), mu({B, C, T}), mask({B, T});
        for (auto& v : x1.data) v = rng.uniform(-1, 1);
        for (auto& v : mu.data) v = rng.uniform(-1, 1);
        std::fill(mask.data.begin(), mask.data.end(), 1.0);
        std::vector<Param<double>*> ps;
        dec.visit([&](Param<double>& p) { ps.push_back(&p); });
        report("cfm_loss", detail::check_params(
                               [&](Tape<double>& t, Ws<double>& ws) {
                                   FieldFn<double> field =
                                       [&](Tape<double>&, const Tensor<double>& x,
                                           const Tensor<double>& m, double tt) {
                                           return dec.forward(ws, x, m, tt);
                                       };
                                   return cfm_loss(t, x1, mu, mask, field, 99,
                                                   OtCfmConfig{1e-4});
                               },
                               ps, tol, 25));
    }
    return r;
}

}  // namespace matcha
