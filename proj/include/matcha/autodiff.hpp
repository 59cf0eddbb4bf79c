#pragma once

#include "matcha/tensor.hpp"

#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace matcha {

// Tape-recorded reverse-mode differentiation. One Tape per forward pass,
// freed after backward. Nodes are owned by the tape; Var is a raw handle.

template <class S>
class Tape;

template <class S>
struct Node {
    Tensor<S> value;
    Tensor<S> grad;  // allocated on first accumulation
    bool requires_grad = false;
    bool grad_alloc = false;
    Tape<S>* tape = nullptr;
    std::function<void(Node<S>&)> backward_fn;  // pushes grad into parents

    void accum(const Tensor<S>& g) {
        if (!grad_alloc) {
            grad = Tensor<S>::zeros(value.shape);
            grad_alloc = true;
        }
        for (std::size_t i = 0; i < g.size(); ++i) grad.data[i] += g.data[i];
    }
    void accum_at(std::size_t i, S g) {
        if (!grad_alloc) {
            grad = Tensor<S>::zeros(value.shape);
            grad_alloc = true;
        }
        grad.data[i] += g;
    }
};

template <class S>
using Var = Node<S>*;

template <class S>
class Tape {
public:
    Var<S> leaf(Tensor<S> v, bool requires_grad = false) {
        auto n = std::make_unique<Node<S>>();
        n->value = std::move(v);
        n->requires_grad = requires_grad;
        n->tape = this;
        nodes_.push_back(std::move(n));
        return nodes_.back().get();
    }

    Var<S> make(Tensor<S> v, std::vector<Var<S>> parents,
                std::function<void(Node<S>&)> bw) {
        auto n = std::make_unique<Node<S>>();
        n->value = std::move(v);
        n->tape = this;
        for (Var<S> p : parents) n->requires_grad |= p->requires_grad;
        if (n->requires_grad) n->backward_fn = std::move(bw);
        nodes_.push_back(std::move(n));
        return nodes_.back().get();
    }

    // Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse order.
    void backward(Var<S> loss) {
        if (!loss->value.is_scalar())
            throw TensorError("backward: loss must be a scalar, got " +
                              shape_str(loss->value.shape));
        loss->accum(Tensor<S>::scalar(S(1)));
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            Node<S>& n = **it;
            if (n.grad_alloc && n.backward_fn) n.backward_fn(n);
        }
    }

    std::size_t num_nodes() const { return nodes_.size(); }

private:
    std::vector<std::unique_ptr<Node<S>>> nodes_;
};

// ---------------------------------------------------------------------------
// primitives
// ---------------------------------------------------------------------------

template <class S>
Var<S> constant(Tape<S>& t, Tensor<S> v) {
    return t.leaf(std::move(v), false);
}

template <class S>
Var<S> add(Var<S> a, Var<S> b) {
    if (!a->value.same_shape(b->value)) shape_fail("add", a->value.shape, b->value.shape);
    Tensor<S> out = a->value;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += b->value.data[i];
    return a->tape->make(std::move(out), {a, b}, [a, b](Node<S>& n) {
        if (a->requires_grad) a->accum(n.grad);
        if (b->requires_grad) b->accum(n.grad);
    });
}

template <class S>
Var<S> sub(Var<S> a, Var<S> b) {
    if (!a->value.same_shape(b->value)) shape_fail("sub", a->value.shape, b->value.shape);
    Tensor<S> out = a->value;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= b->value.data[i];
    return a->tape->make(std::move(out), {a, b}, [a, b](Node<S>& n) {
        if (a->requires_grad) a->accum(n.grad);
        if (b->requires_grad)
            for (std::size_t i = 0; i < n.grad.size(); ++i)
                b->accum_at(i, -n.grad.data[i]);
    });
}

template <class S>
Var<S> mul(Var<S> a, Var<S> b) {
    if (!a->value.same_shape(b->value)) shape_fail("mul", a->value.shape, b->value.shape);
    Tensor<S> out = a->value;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= b->value.data[i];
    return a->tape->make(std::move(out), {a, b}, [a, b](Node<S>& n) {
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
            if (a->requires_grad) a->accum_at(i, n.grad.data[i] * b->value.data[i]);
            if (b->requires_grad) b->accum_at(i, n.grad.data[i] * a->value.data[i]);
        }
    });
}

template <class S>
Var<S> vdiv(Var<S> a, Var<S> b) {
    if (!a->value.same_shape(b->value)) shape_fail("div", a->value.shape, b->value.shape);
    Tensor<S> out = a->value;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] /= b->value.data[i];
    return a->tape->make(std::move(out), {a, b}, [a, b](Node<S>& n) {
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
            S bi = b->value.data[i];
            if (a->requires_grad) a->accum_at(i, n.grad.data[i] / bi);
            if (b->requires_grad)
                b->accum_at(i, -n.grad.data[i] * a->value.data[i] / (bi * bi));
        }
    });
}

template <class S>
Var<S> add_scalar(Var<S> a, S c) {
    Tensor<S> out = a->value;
    for (auto& v : out.data) v += c;
    return a->tape->make(std::move(out), {a}, [a](Node<S>& n) { a->accum(n.grad); });
}

template <class S>
Var<S> mul_scalar(Var<S> a, S c) {
    Tensor<S> out = a->value;
    for (auto& v : out.data) v *= c;
    return a->tape->make(std::move(out), {a}, [a, c](Node<S>& n) {
        for (std::size_t i = 0; i < n.grad.size(); ++i) a->accum_at(i, n.grad.data[i] * c);
    });
}

template <class S>
Var<S> neg(Var<S> a) {
    return mul_scalar(a, S(-1));
}

template <class S>
Var<S> vsin(Var<S> a) {
    Tensor<S> out = a->value;
    for (auto& v : out.data) v = std::sin(v);
    return a->tape->make(std::move(out), {a}, [a](Node<S>& n) {
        for (std::size_t i = 0; i < n.grad.size(); ++i)
            a->accum_at(i, n.grad.data[i] * std::cos(a->value.data[i]));
    });
}

template <class S>
Var<S> vexp(Var<S> a) {
    Tensor<S> out = a->value;
    for (auto& v : out.data) v = std::exp(v);
    return a->tape->make(std::move(out), {a}, [a](Node<S>& n) {
        for (std::size_t i = 0; i < n.grad.size(); ++i)
            a->accum_at(i, n.grad.data[i] * n.value.data[i]);
    });
}

template <class S>
Var<S> vlog(Var<S> a) {
    Tensor<S> out = a->value;
    for (auto& v : out.data) v = std::log(v);
    return a->tape->make(std::move(out), {a}, [a](Node<S>& n) {
        for (std::size_t i = 0; i < n.grad.size(); ++i)
            a->accum_at(i, n.grad.data[i] / a->value.data[i]);
    });
}

template <class S>
Var<S> relu(Var<S> a) {
    Tensor<S> out = a->value;
    for (auto& v : out.data) v = v > S(0) ? v : S(0);
    return a->tape->make(std::move(out), {a}, [a](Node<S>& n) {
        for (std::size_t i = 0; i < n.grad.size(); ++i)
            if (a->value.data[i] > S(0)) a->accum_at(i, n.grad.data[i]);
    });
}

template <class S>
Var<S> sum_all(Var<S> a) {
    S s = 0;
    for (S v : a->value.data) s += v;
    return a->tape->make(Tensor<S>::scalar(s), {a}, [a](Node<S>& n) {
        S g = n.grad.item();
        for (std::size_t i = 0; i < a->value.size(); ++i) a->accum_at(i, g);
    });
}

template <class S>
Var<S> mean_all(Var<S> a) {
    if (a->value.size() == 0) throw TensorError("mean: empty tensor");
    return mul_scalar(sum_all(a), S(1) / S(a->value.size()));
}

template <class S>
Var<S> reshape(Var<S> a, Shape sh) {
    if (shape_numel(sh) != a->value.size()) shape_fail("reshape", a->value.shape, sh);
    Tensor<S> out(std::move(sh), a->value.data);
    return a->tape->make(std::move(out), {a}, [a](Node<S>& n) {
        Tensor<S> g(a->value.shape, n.grad.data);
        a->accum(g);
    });
}

template <class S>
Var<S> detach(Var<S> a) {
    return a->tape->leaf(a->value, false);
}

// matmul: [M x K] * [K x N] -> [M x N]
template <class S>
Var<S> matmul(Var<S> a, Var<S> b) {
    if (a->value.rank() != 2 || b->value.rank() != 2 || a->value.cols() != b->value.rows())
        shape_fail("matmul", a->value.shape, b->value.shape);
    Tensor<S> out({a->value.rows(), b->value.cols()});
    out.mat().noalias() = a->value.mat() * b->value.mat();
    return a->tape->make(std::move(out), {a, b}, [a, b](Node<S>& n) {
        auto g = n.grad.mat();
        if (a->requires_grad) {
            Tensor<S> ga(a->value.shape);
            ga.mat().noalias() = g * b->value.mat().transpose();
            a->accum(ga);
        }
        if (b->requires_grad) {
            Tensor<S> gb(b->value.shape);
            gb.mat().noalias() = a->value.mat().transpose() * g;
            b->accum(gb);
        }
    });
}

// batched matmul over leading dim: [B x M x K] * [B x K x N] -> [B x M x N]
template <class S>
Var<S> bmm(Var<S> a, Var<S> b) {
    const Shape& sa = a->value.shape;
    const Shape& sb = b->value.shape;
    if (sa.size() != 3 || sb.size() != 3 || sa[0] != sb[0] || sa[2] != sb[1])
        shape_fail("bmm", sa, sb);
    std::size_t B = sa[0], M = sa[1], K = sa[2], N = sb[2];
    Tensor<S> out({B, M, N});
    for (std::size_t i = 0; i < B; ++i) {
        typename Tensor<S>::CMapM ma(a->value.data.data() + i * M * K, M, K);
        typename Tensor<S>::CMapM mb(b->value.data.data() + i * K * N, K, N);
        typename Tensor<S>::MapM mo(out.data.data() + i * M * N, M, N);
        mo.noalias() = ma * mb;
    }
    return a->tape->make(std::move(out), {a, b}, [a, b, B, M, K, N](Node<S>& n) {
        for (std::size_t i = 0; i < B; ++i) {
            typename Tensor<S>::CMapM g(n.grad.data.data() + i * M * N, M, N);
            typename Tensor<S>::CMapM ma(a->value.data.data() + i * M * K, M, K);
            typename Tensor<S>::CMapM mb(b->value.data.data() + i * K * N, K, N);
            if (a->requires_grad) {
                Tensor<S> ga({M, K});
                ga.mat().noalias() = g * mb.transpose();
                for (std::size_t j = 0; j < M * K; ++j)
                    a->accum_at(i * M * K + j, ga.data[j]);
            }
            if (b->requires_grad) {
                Tensor<S> gb({K, N});
                gb.mat().noalias() = ma.transpose() * g;
                for (std::size_t j = 0; j < K * N; ++j)
                    b->accum_at(i * K * N + j, gb.data[j]);
            }
        }
    });
}

template <class S>
Var<S> transpose(Var<S> a) {
    if (a->value.rank() != 2) throw TensorError("transpose: rank-2 expected");
    std::size_t R = a->value.rows(), C = a->value.cols();
    Tensor<S> out({C, R});
    out.mat() = a->value.mat().transpose();
    return a->tape->make(std::move(out), {a}, [a, R, C](Node<S>& n) {
        Tensor<S> g({R, C});
        g.mat() = n.grad.mat().transpose();
        a->accum(g);
    });
}

// transpose last two dims of a rank-3 tensor
template <class S>
Var<S> transpose_last2(Var<S> a) {
    const Shape& s = a->value.shape;
    if (s.size() != 3) throw TensorError("transpose_last2: rank-3 expected");
    std::size_t B = s[0], M = s[1], N = s[2];
    Tensor<S> out({B, N, M});
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < M; ++i)
            for (std::size_t j = 0; j < N; ++j)
                out(b, j, i) = a->value(b, i, j);
    return a->tape->make(std::move(out), {a, }, [a, B, M, N](Node<S>& n) {
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t i = 0; i < M; ++i)
                for (std::size_t j = 0; j < N; ++j)
                    a->accum_at((b * M + i) * N + j, n.grad(b, j, i));
    });
}

// concat along rows (axis 0) of rank-2 tensors with equal column counts
template <class S>
Var<S> concat_rows(Var<S> a, Var<S> b) {
    if (a->value.rank() != 2 || b->value.rank() != 2 || a->value.cols() != b->value.cols())
        shape_fail("concat", a->value.shape, b->value.shape);
    std::size_t Ra = a->value.rows(), Rb = b->value.rows(), C = a->value.cols();
    Tensor<S> out({Ra + Rb, C});
    std::copy(a->value.data.begin(), a->value.data.end(), out.data.begin());
    std::copy(b->value.data.begin(), b->value.data.end(), out.data.begin() + Ra * C);
    return a->tape->make(std::move(out), {a, b}, [a, b, Ra, Rb, C](Node<S>& n) {
        if (a->requires_grad)
            for (std::size_t i = 0; i < Ra * C; ++i) a->accum_at(i, n.grad.data[i]);
        if (b->requires_grad)
            for (std::size_t i = 0; i < Rb * C; ++i) b->accum_at(i, n.grad.data[Ra * C + i]);
    });
}

// rows [r0, r1) of a rank-2 tensor
template <class S>
Var<S> slice_rows(Var<S> a, std::size_t r0, std::size_t r1) {
    if (a->value.rank() != 2 || r1 > a->value.rows() || r0 > r1)
        throw TensorError("slice_rows: bad range on " + shape_str(a->value.shape));
    std::size_t C = a->value.cols();
    Tensor<S> out({r1 - r0, C});
    std::copy(a->value.data.begin() + r0 * C, a->value.data.begin() + r1 * C,
              out.data.begin());
    return a->tape->make(std::move(out), {a}, [a, r0, C](Node<S>& n) {
        for (std::size_t i = 0; i < n.grad.size(); ++i)
            a->accum_at(r0 * C + i, n.grad.data[i]);
    });
}

// columns [c0, c1) of a rank-2 tensor
template <class S>
Var<S> slice_cols(Var<S> a, std::size_t c0, std::size_t c1) {
    if (a->value.rank() != 2 || c1 > a->value.cols() || c0 > c1)
        throw TensorError("slice_cols: bad range on " + shape_str(a->value.shape));
    std::size_t R = a->value.rows(), C = a->value.cols(), W = c1 - c0;
    Tensor<S> out({R, W});
    for (std::size_t i = 0; i < R; ++i)
        for (std::size_t j = 0; j < W; ++j) out(i, j) = a->value(i, c0 + j);
    return a->tape->make(std::move(out), {a}, [a, c0, C, W](Node<S>& n) {
        std::size_t R = n.grad.rows();
        for (std::size_t i = 0; i < R; ++i)
            for (std::size_t j = 0; j < W; ++j)
                a->accum_at(i * C + c0 + j, n.grad(i, j));
    });
}

// zero-pad columns of a rank-2 tensor
template <class S>
Var<S> pad_cols(Var<S> a, std::size_t left, std::size_t right) {
    std::size_t R = a->value.rows(), C = a->value.cols();
    Tensor<S> out({R, C + left + right});
    for (std::size_t i = 0; i < R; ++i)
        for (std::size_t j = 0; j < C; ++j) out(i, left + j) = a->value(i, j);
    return a->tape->make(std::move(out), {a}, [a, left, C](Node<S>& n) {
        std::size_t R = n.grad.rows();
        for (std::size_t i = 0; i < R; ++i)
            for (std::size_t j = 0; j < C; ++j)
                a->accum_at(i * C + j, n.grad(i, left + j));
    });
}

// nearest-neighbour column repeat: [C x T] -> [C x rT]
template <class S>
Var<S> repeat_cols(Var<S> a, std::size_t r) {
    std::size_t R = a->value.rows(), C = a->value.cols();
    Tensor<S> out({R, C * r});
    for (std::size_t i = 0; i < R; ++i)
        for (std::size_t j = 0; j < C; ++j)
            for (std::size_t k = 0; k < r; ++k) out(i, j * r + k) = a->value(i, j);
    return a->tape->make(std::move(out), {a}, [a, r, C](Node<S>& n) {
        std::size_t R = n.grad.rows();
        for (std::size_t i = 0; i < R; ++i)
            for (std::size_t j = 0; j < C; ++j) {
                S g = 0;
                for (std::size_t k = 0; k < r; ++k) g += n.grad(i, j * r + k);
                a->accum_at(i * C + j, g);
            }
    });
}

// broadcast a length-C vector across columns: [C] -> [C x T]
template <class S>
Var<S> bcast_cols(Var<S> a, std::size_t T) {
    if (a->value.rank() != 1) throw TensorError("bcast_cols: rank-1 expected");
    std::size_t C = a->value.size();
    Tensor<S> out({C, T});
    for (std::size_t i = 0; i < C; ++i)
        for (std::size_t j = 0; j < T; ++j) out(i, j) = a->value.data[i];
    return a->tape->make(std::move(out), {a}, [a, C, T](Node<S>& n) {
        for (std::size_t i = 0; i < C; ++i) {
            S g = 0;
            for (std::size_t j = 0; j < T; ++j) g += n.grad(i, j);
            a->accum_at(i, g);
        }
    });
}

// broadcast a length-C vector across rows: [C] -> [L x C]
template <class S>
Var<S> bcast_rows(Var<S> a, std::size_t L) {
    if (a->value.rank() != 1) throw TensorError("bcast_rows: rank-1 expected");
    std::size_t C = a->value.size();
    Tensor<S> out({L, C});
    for (std::size_t i = 0; i < L; ++i)
        for (std::size_t j = 0; j < C; ++j) out(i, j) = a->value.data[j];
    return a->tape->make(std::move(out), {a}, [a, C, L](Node<S>& n) {
        for (std::size_t j = 0; j < C; ++j) {
            S g = 0;
            for (std::size_t i = 0; i < L; ++i) g += n.grad(i, j);
            a->accum_at(j, g);
        }
    });
}

// softmax over the last dimension of a rank-2 or rank-3 tensor
template <class S>
Var<S> softmax_lastdim(Var<S> a) {
    const Shape& s = a->value.shape;
    if (s.empty()) throw TensorError("softmax: scalar input");
    std::size_t L = s.back();
    std::size_t Rws = a->value.size() / L;
    Tensor<S> out = a->value;
    for (std::size_t r = 0; r < Rws; ++r) {
        S* p = out.data.data() + r * L;
        S mx = p[0];
        for (std::size_t j = 1; j < L; ++j) mx = std::max(mx, p[j]);
        S z = 0;
        for (std::size_t j = 0; j < L; ++j) {
            p[j] = std::exp(p[j] - mx);
            z += p[j];
        }
        for (std::size_t j = 0; j < L; ++j) p[j] /= z;
    }
    return a->tape->make(std::move(out), {a}, [a, Rws, L](Node<S>& n) {
        for (std::size_t r = 0; r < Rws; ++r) {
            const S* y = n.value.data.data() + r * L;
            const S* g = n.grad.data.data() + r * L;
            S dot = 0;
            for (std::size_t j = 0; j < L; ++j) dot += y[j] * g[j];
            for (std::size_t j = 0; j < L; ++j)
                a->accum_at(r * L + j, y[j] * (g[j] - dot));
        }
    });
}

// layer norm over channels (rows) per column of [C x T]; gamma, beta: [C]
template <class S>
Var<S> layer_norm(Var<S> x, Var<S> gamma, Var<S> beta, S eps = S(1e-5)) {
    if (x->value.rank() != 2) throw TensorError("layer_norm: rank-2 expected");
    std::size_t C = x->value.rows(), T = x->value.cols();
    if (gamma->value.size() != C || beta->value.size() != C)
        shape_fail("layer_norm", x->value.shape, gamma->value.shape);
    Tensor<S> out({C, T});
    Tensor<S> xhat({C, T});
    std::vector<S> istd(T);
    for (std::size_t j = 0; j < T; ++j) {
        S m = 0;
        for (std::size_t i = 0; i < C; ++i) m += x->value(i, j);
        m /= S(C);
        S v = 0;
        for (std::size_t i = 0; i < C; ++i) {
            S d = x->value(i, j) - m;
            v += d * d;
        }
        v /= S(C);
        istd[j] = S(1) / std::sqrt(v + eps);
        for (std::size_t i = 0; i < C; ++i) {
            xhat(i, j) = (x->value(i, j) - m) * istd[j];
            out(i, j) = gamma->value.data[i] * xhat(i, j) + beta->value.data[i];
        }
    }
    return x->tape->make(std::move(out), {x, gamma, beta},
                         [x, gamma, beta, xhat, istd, C, T](Node<S>& n) {
        for (std::size_t j = 0; j < T; ++j) {
            S sum_dh = 0, sum_dhx = 0;
            for (std::size_t i = 0; i < C; ++i) {
                S dh = n.grad(i, j) * gamma->value.data[i];
                sum_dh += dh;
                sum_dhx += dh * xhat(i, j);
            }
            if (x->requires_grad)
                for (std::size_t i = 0; i < C; ++i) {
                    S dh = n.grad(i, j) * gamma->value.data[i];
                    x->accum_at(i * T + j,
                                istd[j] * (dh - sum_dh / S(C) - xhat(i, j) * sum_dhx / S(C)));
                }
            for (std::size_t i = 0; i < C; ++i) {
                if (gamma->requires_grad) gamma->accum_at(i, n.grad(i, j) * xhat(i, j));
                if (beta->requires_grad) beta->accum_at(i, n.grad(i, j));
            }
        }
    });
}

// group norm over (channels-in-group x time) of [C x T]; gamma, beta: [C]
template <class S>
Var<S> group_norm(Var<S> x, std::size_t groups, Var<S> gamma, Var<S> beta,
                  S eps = S(1e-5)) {
    if (x->value.rank() != 2) throw TensorError("group_norm: rank-2 expected");
    std::size_t C = x->value.rows(), T = x->value.cols();
    if (C % groups != 0)
        throw TensorError("group_norm: " + std::to_string(C) + " channels not divisible by " +
                          std::to_string(groups) + " groups");
    std::size_t gc = C / groups;
    Tensor<S> out({C, T});
    Tensor<S> xhat({C, T});
    std::vector<S> istd(groups);
    for (std::size_t g = 0; g < groups; ++g) {
        S m = 0;
        for (std::size_t i = g * gc; i < (g + 1) * gc; ++i)
            for (std::size_t j = 0; j < T; ++j) m += x->value(i, j);
        std::size_t N = gc * T;
        m /= S(N);
        S v = 0;
        for (std::size_t i = g * gc; i < (g + 1) * gc; ++i)
            for (std::size_t j = 0; j < T; ++j) {
                S d = x->value(i, j) - m;
                v += d * d;
            }
        v /= S(N);
        istd[g] = S(1) / std::sqrt(v + eps);
        for (std::size_t i = g * gc; i < (g + 1) * gc; ++i)
            for (std::size_t j = 0; j < T; ++j) {
                xhat(i, j) = (x->value(i, j) - m) * istd[g];
                out(i, j) = gamma->value.data[i] * xhat(i, j) + beta->value.data[i];
            }
    }
    return x->tape->make(std::move(out), {x, gamma, beta},
                         [x, gamma, beta, xhat, istd, groups, gc, T](Node<S>& n) {
        for (std::size_t g = 0; g < groups; ++g) {
            std::size_t N = gc * T;
            S sum_dh = 0, sum_dhx = 0;
            for (std::size_t i = g * gc; i < (g + 1) * gc; ++i)
                for (std::size_t j = 0; j < T; ++j) {
                    S dh = n.grad(i, j) * gamma->value.data[i];
                    sum_dh += dh;
                    sum_dhx += dh * xhat(i, j);
                }
            if (x->requires_grad)
                for (std::size_t i = g * gc; i < (g + 1) * gc; ++i)
                    for (std::size_t j = 0; j < T; ++j) {
                        S dh = n.grad(i, j) * gamma->value.data[i];
                        x->accum_at(i * T + j,
                                    istd[g] * (dh - sum_dh / S(N) - xhat(i, j) * sum_dhx / S(N)));
                    }
            for (std::size_t i = g * gc; i < (g + 1) * gc; ++i)
                for (std::size_t j = 0; j < T; ++j) {
                    if (gamma->requires_grad) gamma->accum_at(i, n.grad(i, j) * xhat(i, j));
                    if (beta->requires_grad) beta->accum_at(i, n.grad(i, j));
                }
        }
    });
}

// conv1d: x [Cin x T], w [Cout x Cin x K], b [Cout]; zero padding
template <class S>
Var<S> conv1d(Var<S> x, Var<S> w, Var<S> b, std::size_t stride = 1,
              std::size_t pad = 0) {
    const Shape& sx = x->value.shape;
    const Shape& sw = w->value.shape;
    if (sx.size() != 2 || sw.size() != 3 || sx[0] != sw[1])
        shape_fail("conv1d", sx, sw);
    std::size_t Cin = sx[0], T = sx[1], Cout = sw[0], K = sw[2];
    if (b->value.size() != Cout) shape_fail("conv1d bias", sw, b->value.shape);
    if (T + 2 * pad < K) throw TensorError("conv1d: input shorter than kernel");
    std::size_t To = (T + 2 * pad - K) / stride + 1;
    Tensor<S> out({Cout, To});
    for (std::size_t co = 0; co < Cout; ++co)
        for (std::size_t to = 0; to < To; ++to) {
            S acc = b->value.data[co];
            for (std::size_t ci = 0; ci < Cin; ++ci)
                for (std::size_t k = 0; k < K; ++k) {
                    std::ptrdiff_t ti = (std::ptrdiff_t)(to * stride + k) - (std::ptrdiff_t)pad;
                    if (ti < 0 || ti >= (std::ptrdiff_t)T) continue;
                    acc += x->value(ci, (std::size_t)ti) * w->value(co, ci, k);
                }
            out(co, to) = acc;
        }
    return x->tape->make(std::move(out), {x, w, b},
                         [x, w, b, Cin, T, Cout, K, To, stride, pad](Node<S>& n) {
        for (std::size_t co = 0; co < Cout; ++co)
            for (std::size_t to = 0; to < To; ++to) {
                S g = n.grad(co, to);
                if (g == S(0)) continue;
                if (b->requires_grad) b->accum_at(co, g);
                for (std::size_t ci = 0; ci < Cin; ++ci)
                    for (std::size_t k = 0; k < K; ++k) {
                        std::ptrdiff_t ti =
                            (std::ptrdiff_t)(to * stride + k) - (std::ptrdiff_t)pad;
                        if (ti < 0 || ti >= (std::ptrdiff_t)T) continue;
                        if (x->requires_grad)
                            x->accum_at(ci * T + (std::size_t)ti, g * w->value(co, ci, k));
                        if (w->requires_grad)
                            w->accum_at((co * Cin + ci) * K + k,
                                        g * x->value(ci, (std::size_t)ti));
                    }
            }
    });
}

// row gather: W [V x C], ids -> [N x C]; backward is scatter-add
template <class S>
Var<S> gather_rows(Var<S> W, const std::vector<std::size_t>& ids) {
    if (W->value.rank() != 2) throw TensorError("gather_rows: rank-2 expected");
    std::size_t V = W->value.rows(), C = W->value.cols(), N = ids.size();
    for (std::size_t id : ids)
        if (id >= V)
            throw TensorError("gather_rows: id " + std::to_string(id) + " out of range " +
                              std::to_string(V));
    Tensor<S> out({N, C});
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = 0; j < C; ++j) out(i, j) = W->value(ids[i], j);
    return W->tape->make(std::move(out), {W}, [W, ids, C](Node<S>& n) {
        std::size_t N = ids.size();
        for (std::size_t i = 0; i < N; ++i)
            for (std::size_t j = 0; j < C; ++j)
                W->accum_at(ids[i] * C + j, n.grad(i, j));
    });
}

// [L x C] -> [H x L x C/H]
template <class S>
Var<S> split_heads(Var<S> a, std::size_t H) {
    if (a->value.rank() != 2 || a->value.cols() % H != 0)
        throw TensorError("split_heads: " + shape_str(a->value.shape) + " with " +
                          std::to_string(H) + " heads");
    std::size_t L = a->value.rows(), C = a->value.cols(), D = C / H;
    Tensor<S> out({H, L, D});
    for (std::size_t h = 0; h < H; ++h)
        for (std::size_t l = 0; l < L; ++l)
            for (std::size_t d = 0; d < D; ++d) out(h, l, d) = a->value(l, h * D + d);
    return a->tape->make(std::move(out), {a}, [a, H, L, C, D](Node<S>& n) {
        for (std::size_t h = 0; h < H; ++h)
            for (std::size_t l = 0; l < L; ++l)
                for (std::size_t d = 0; d < D; ++d)
                    a->accum_at(l * C + h * D + d, n.grad(h, l, d));
    });
}

// [H x L x D] -> [L x H*D]
template <class S>
Var<S> merge_heads(Var<S> a) {
    const Shape& s = a->value.shape;
    if (s.size() != 3) throw TensorError("merge_heads: rank-3 expected");
    std::size_t H = s[0], L = s[1], D = s[2], C = H * D;
    Tensor<S> out({L, C});
    for (std::size_t h = 0; h < H; ++h)
        for (std::size_t l = 0; l < L; ++l)
            for (std::size_t d = 0; d < D; ++d) out(l, h * D + d) = a->value(h, l, d);
    return a->tape->make(std::move(out), {a}, [a, H, L, D, C](Node<S>& n) {
        for (std::size_t h = 0; h < H; ++h)
            for (std::size_t l = 0; l < L; ++l)
                for (std::size_t d = 0; d < D; ++d)
                    a->accum_at((h * L + l) * D + d, n.grad(l, h * D + d));
    });
}

}  // namespace matcha
