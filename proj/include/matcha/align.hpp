#pragma once

#include "matcha/autodiff.hpp"
#include "matcha/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

namespace matcha {

inline constexpr double kLog2Pi = 1.8378770664093454836;

// Monotonic surjective map frame -> token. Increments are 0 or 1, the first
// frame maps to token 0 and the last to token N-1.
struct AlignmentPath {
    std::vector<std::size_t> frame_to_token;

    std::size_t n_frames() const { return frame_to_token.size(); }
    std::size_t n_tokens() const {
        return frame_to_token.empty() ? 0 : frame_to_token.back() + 1;
    }
    void validate() const {
        if (frame_to_token.empty()) throw TensorError("AlignmentPath: empty");
        if (frame_to_token.front() != 0)
            throw TensorError("AlignmentPath: must start at token 0");
        for (std::size_t j = 1; j < frame_to_token.size(); ++j) {
            std::size_t step = frame_to_token[j] - frame_to_token[j - 1];
            if (frame_to_token[j] < frame_to_token[j - 1] || step > 1)
                throw TensorError("AlignmentPath: non-monotonic at frame " +
                                  std::to_string(j));
        }
    }
};

struct Durations {
    std::vector<std::size_t> d;

    std::size_t total() const {
        std::size_t s = 0;
        for (std::size_t v : d) s += v;
        return s;
    }
};

// log N(frame_j; mu_i, I) for every (token i, frame j) pair.
// frames: [n_mel x T], mu_tokens: [n_mel x N] -> [N x T]
template <class S>
Tensor<S> log_prior_matrix(const Tensor<S>& frames, const Tensor<S>& mu_tokens) {
    if (frames.rank() != 2 || mu_tokens.rank() != 2 || frames.rows() != mu_tokens.rows())
        shape_fail("log_prior_matrix", frames.shape, mu_tokens.shape);
    std::size_t C = frames.rows(), T = frames.cols(), N = mu_tokens.cols();
    Tensor<S> out({N, T});
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = 0; j < T; ++j) {
            S q = 0;
            for (std::size_t c = 0; c < C; ++c) {
                S d = frames(c, j) - mu_tokens(c, i);
                q += d * d;
            }
            out(i, j) = S(-0.5) * (q + S(C) * S(kLog2Pi));
        }
    return out;
}

// Maximum-likelihood monotonic surjective alignment by dynamic programming:
// Q[i][j] = log_lik[i][j] + max(Q[i-1][j-1], Q[i][j-1]), ties prefer the
// diagonal (advance token).
template <class S>
AlignmentPath mas(const Tensor<S>& log_lik) {
    if (log_lik.rank() != 2) throw TensorError("mas: rank-2 expected");
    std::size_t N = log_lik.rows(), T = log_lik.cols();
    if (N < 1 || T < N)
        throw TensorError("mas: need T >= N >= 1, got N=" + std::to_string(N) +
                          " T=" + std::to_string(T));
    for (S v : log_lik.data)
        if (!std::isfinite((double)v)) throw TensorError("mas: non-finite log-likelihood");

    const double NEG = -std::numeric_limits<double>::infinity();
    std::vector<double> Q(N * T, NEG);
    std::vector<std::uint8_t> from_diag(N * T, 0);
    for (std::size_t j = 0; j < T; ++j) {
        for (std::size_t i = 0; i < N; ++i) {
            if (i > j) break;                  // not enough frames consumed yet
            if (N - 1 - i > T - 1 - j) continue;  // not enough frames left
            double best;
            std::uint8_t diag = 0;
            if (j == 0) {
                best = (i == 0) ? 0.0 : NEG;
            } else {
                double stay = (i <= j - 1) ? Q[i * T + (j - 1)] : NEG;
                double adv = (i >= 1) ? Q[(i - 1) * T + (j - 1)] : NEG;
                if (adv >= stay) {
                    best = adv;
                    diag = 1;
                } else {
                    best = stay;
                }
            }
            if (best == NEG) continue;
            Q[i * T + j] = best + (double)log_lik(i, j);
            from_diag[i * T + j] = diag;
        }
    }

    AlignmentPath path;
    path.frame_to_token.resize(T);
    std::size_t i = N - 1;
    for (std::size_t j = T; j-- > 0;) {
        path.frame_to_token[j] = i;
        if (j > 0 && from_diag[i * T + j]) --i;
    }
    path.validate();
    return path;
}

inline Durations durations_from_path(const AlignmentPath& path) {
    path.validate();
    Durations d;
    d.d.assign(path.n_tokens(), 0);
    for (std::size_t tok : path.frame_to_token) ++d.d[tok];
    return d;
}

// Negative mean Gaussian log-density of the frames under the aligned means,
// identity covariance; differentiable w.r.t. mu. mask: [T] of 0/1, optional.
template <class S>
Var<S> prior_loss(Tape<S>& tape, const Tensor<S>& frames, Var<S> mu_aligned,
                  const Tensor<S>* mask = nullptr) {
    if (!frames.same_shape(mu_aligned->value))
        shape_fail("prior_loss", frames.shape, mu_aligned->value.shape);
    std::size_t C = frames.rows(), T = frames.cols();
    std::size_t count = C * T;
    Var<S> r = sub(mu_aligned, constant(tape, frames));
    if (mask) {
        if (mask->rank() != 1 || mask->size() != T)
            shape_fail("prior_loss mask", frames.shape, mask->shape);
        Tensor<S> m({C, T});
        std::size_t valid = 0;
        for (std::size_t j = 0; j < T; ++j) {
            bool on = mask->data[j] > S(0.5);
            valid += on;
            for (std::size_t c = 0; c < C; ++c) m(c, j) = on ? S(1) : S(0);
        }
        if (valid == 0) throw TensorError("prior_loss: empty mask");
        count = C * valid;
        r = mul(r, constant(tape, std::move(m)));
    }
    Var<S> sq = sum_all(mul(r, r));
    return add_scalar(mul_scalar(sq, S(1) / S(2 * count)), S(0.5 * kLog2Pi));
}

// MSE in the log domain against MAS durations. predicted_log_d: [N].
template <class S>
Var<S> duration_loss(Tape<S>& tape, Var<S> predicted_log_d, const Durations& target,
                     const Tensor<S>* mask = nullptr) {
    std::size_t N = predicted_log_d->value.size();
    if (predicted_log_d->value.rank() != 1 || target.d.size() != N)
        throw TensorError("duration_loss: length mismatch, predicted " +
                          shape_str(predicted_log_d->value.shape) + " vs " +
                          std::to_string(target.d.size()) + " targets");
    Tensor<S> log_t({N});
    Tensor<S> m({N});
    std::size_t valid = 0;
    for (std::size_t i = 0; i < N; ++i) {
        if (target.d[i] < 1) throw TensorError("duration_loss: target duration < 1");
        log_t.data[i] = S(std::log((double)target.d[i] + 1e-8));
        bool on = !mask || mask->data[i] > S(0.5);
        m.data[i] = on ? S(1) : S(0);
        valid += on;
    }
    if (valid == 0) throw TensorError("duration_loss: empty mask");
    Var<S> r = sub(predicted_log_d, constant(tape, std::move(log_t)));
    r = mul(r, constant(tape, std::move(m)));
    return mul_scalar(sum_all(mul(r, r)), S(1) / S(valid));
}

// Duplicate column i of [C x N] d[i] times: -> [C x sum(d)].
template <class S>
Tensor<S> upsample_by_durations(const Tensor<S>& token_vectors, const Durations& d) {
    if (token_vectors.rank() != 2 || token_vectors.cols() != d.d.size())
        throw TensorError("upsample_by_durations: " + shape_str(token_vectors.shape) +
                          " vs " + std::to_string(d.d.size()) + " durations");
    for (std::size_t v : d.d)
        if (v < 1) throw TensorError("upsample_by_durations: duration < 1");
    std::size_t C = token_vectors.rows(), T = d.total();
    Tensor<S> out({C, T});
    std::size_t j = 0;
    for (std::size_t i = 0; i < d.d.size(); ++i)
        for (std::size_t k = 0; k < d.d[i]; ++k, ++j)
            for (std::size_t c = 0; c < C; ++c) out(c, j) = token_vectors(c, i);
    return out;
}

// Differentiable column duplication; backward sums each token's frame grads.
template <class S>
Var<S> upsample_by_durations(Var<S> token_vectors, const Durations& d) {
    Tensor<S> out = upsample_by_durations(token_vectors->value, d);
    std::size_t C = token_vectors->value.rows(), N = d.d.size();
    return token_vectors->tape->make(std::move(out), {token_vectors},
                                     [token_vectors, d, C, N](Node<S>& n) {
        std::size_t j = 0;
        for (std::size_t i = 0; i < N; ++i)
            for (std::size_t k = 0; k < d.d[i]; ++k, ++j)
                for (std::size_t c = 0; c < C; ++c)
                    token_vectors->accum_at(c * N + i, n.grad(c, j));
    });
}

// One line per frame: "frame_index token_index".
inline std::string alignment_dump(const AlignmentPath& path) {
    std::ostringstream os;
    for (std::size_t j = 0; j < path.frame_to_token.size(); ++j)
        os << j << " " << path.frame_to_token[j] << "\n";
    return os.str();
}

}  // namespace matcha
