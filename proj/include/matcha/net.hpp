#pragma once

#include "matcha/autodiff.hpp"
#include "matcha/rng.hpp"
#include "matcha/tensor.hpp"

#include <cmath>
#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace matcha {

template <class S>
struct Param {
    std::string name;
    Tensor<S> value;
    Tensor<S> adam_m, adam_v;  // allocated on first optimizer step
    bool has_moments = false;
};

template <class S>
using ParamVisit = std::function<void(Param<S>&)>;

// Per-forward binding of persistent parameters to tape leaves. One leaf per
// parameter per tape, so every loss term on the tape shares gradients.
template <class S>
struct Ws {
    Tape<S>& tape;
    std::unordered_map<const Param<S>*, Var<S>> bound;

    explicit Ws(Tape<S>& t) : tape(t) {}

    Var<S> operator()(Param<S>& p) {
        auto it = bound.find(&p);
        if (it != bound.end()) return it->second;
        Var<S> v = tape.leaf(p.value, true);
        bound.emplace(&p, v);
        return v;
    }

    Tensor<S> grad_of(const Param<S>& p) const {
        auto it = bound.find(&p);
        if (it != bound.end() && it->second->grad_alloc) return it->second->grad;
        return Tensor<S>::zeros(p.value.shape);
    }
};

// ---------------------------------------------------------------------------
// rotary position embedding
// ---------------------------------------------------------------------------

// Rotates consecutive (2i, 2i+1) pairs of x [H x L x D] by angle m * theta_i,
// theta_i = base^(-2i/D), m the position of sequence index l (defaults to l).
template <class S>
Var<S> rope_rotate(Var<S> x, const std::vector<double>* positions = nullptr,
                   double base = 10000.0) {
    const Shape& s = x->value.shape;
    if (s.size() != 3) throw TensorError("rope_rotate: rank-3 expected");
    std::size_t H = s[0], L = s[1], D = s[2];
    if (D % 2 != 0) throw TensorError("rope_rotate: head dim must be even");
    if (positions && positions->size() != L)
        throw TensorError("rope_rotate: positions length != sequence length");
    std::vector<double> theta(D / 2);
    for (std::size_t i = 0; i < D / 2; ++i)
        theta[i] = std::pow(base, -2.0 * (double)i / (double)D);
    auto rotate = [H, L, D, theta](const Tensor<S>& in, const std::vector<double>* pos,
                                   double sign) {
        Tensor<S> out(in.shape);
        for (std::size_t h = 0; h < H; ++h)
            for (std::size_t l = 0; l < L; ++l) {
                double m = pos ? (*pos)[l] : (double)l;
                for (std::size_t i = 0; i < D / 2; ++i) {
                    double a = sign * m * theta[i];
                    S c = S(std::cos(a)), sn = S(std::sin(a));
                    S x0 = in(h, l, 2 * i), x1 = in(h, l, 2 * i + 1);
                    out(h, l, 2 * i) = c * x0 - sn * x1;
                    out(h, l, 2 * i + 1) = sn * x0 + c * x1;
                }
            }
        return out;
    };
    std::vector<double> pos_copy;
    if (positions) pos_copy = *positions;
    bool has_pos = positions != nullptr;
    Tensor<S> out = rotate(x->value, positions, 1.0);
    return x->tape->make(std::move(out), {x}, [x, rotate, pos_copy, has_pos](Node<S>& n) {
        // gradient of a rotation is the inverse rotation
        Tensor<S> g = rotate(n.grad, has_pos ? &pos_copy : nullptr, -1.0);
        x->accum(g);
    });
}

// ---------------------------------------------------------------------------
// snake-beta activation: y = x + (1/(beta + eps)) * sin^2(alpha * x),
// alpha = exp(log_alpha), beta = exp(log_beta), per channel of [C x T].
// ---------------------------------------------------------------------------
template <class S>
Var<S> snake_beta(Var<S> x, Var<S> log_alpha, Var<S> log_beta) {
    if (x->value.rank() != 2) throw TensorError("snake_beta: rank-2 expected");
    std::size_t C = x->value.rows(), T = x->value.cols();
    if (log_alpha->value.size() != C || log_beta->value.size() != C)
        shape_fail("snake_beta", x->value.shape, log_alpha->value.shape);
    Tape<S>& tape = *x->tape;
    Var<S> alpha = vexp(log_alpha);
    Var<S> inv_beta = vdiv(constant(tape, Tensor<S>::full({C}, S(1))),
                           add_scalar(vexp(log_beta), S(1e-9)));
    Var<S> s = vsin(mul(x, bcast_cols(alpha, T)));
    return add(x, mul(bcast_cols(inv_beta, T), mul(s, s)));
}

// ---------------------------------------------------------------------------
// layers
// ---------------------------------------------------------------------------

template <class S>
struct Linear {
    Param<S> w, b;
    std::size_t in = 0, out = 0;

    Linear() = default;
    Linear(std::string name, std::size_t in_, std::size_t out_) : in(in_), out(out_) {
        w.name = name + ".w";
        w.value = Tensor<S>({in, out});
        b.name = name + ".b";
        b.value = Tensor<S>({out});
    }
    void init(Rng& rng) {
        double bound = 1.0 / std::sqrt((double)in);
        for (auto& v : w.value.data) v = S(rng.uniform(-bound, bound));
        std::fill(b.value.data.begin(), b.value.data.end(), S(0));
    }
    // x: [L x in] -> [L x out]
    Var<S> forward(Ws<S>& ws, Var<S> x) {
        return add(matmul(x, ws(w)), bcast_rows(ws(b), x->value.rows()));
    }
    void visit(const ParamVisit<S>& f) {
        f(w);
        f(b);
    }
};

template <class S>
struct Conv1dLayer {
    Param<S> w, b;
    std::size_t cin = 0, cout = 0, k = 0, stride = 1, pad = 0;

    Conv1dLayer() = default;
    Conv1dLayer(std::string name, std::size_t cin_, std::size_t cout_, std::size_t k_,
                std::size_t stride_ = 1, std::size_t pad_ = 0)
        : cin(cin_), cout(cout_), k(k_), stride(stride_), pad(pad_) {
        w.name = name + ".w";
        w.value = Tensor<S>({cout, cin, k});
        b.name = name + ".b";
        b.value = Tensor<S>({cout});
    }
    void init(Rng& rng) {
        double bound = 1.0 / std::sqrt((double)(cin * k));
        for (auto& v : w.value.data) v = S(rng.uniform(-bound, bound));
        std::fill(b.value.data.begin(), b.value.data.end(), S(0));
    }
    Var<S> forward(Ws<S>& ws, Var<S> x) { return conv1d(x, ws(w), ws(b), stride, pad); }
    void visit(const ParamVisit<S>& f) {
        f(w);
        f(b);
    }
};

template <class S>
struct LayerNormP {
    Param<S> gamma, beta;

    LayerNormP() = default;
    LayerNormP(std::string name, std::size_t c) {
        gamma.name = name + ".gamma";
        gamma.value = Tensor<S>::full({c}, S(1));
        beta.name = name + ".beta";
        beta.value = Tensor<S>({c});
    }
    Var<S> forward(Ws<S>& ws, Var<S> x) { return layer_norm(x, ws(gamma), ws(beta)); }
    void visit(const ParamVisit<S>& f) {
        f(gamma);
        f(beta);
    }
};

template <class S>
struct GroupNormP {
    Param<S> gamma, beta;
    std::size_t groups = 1;

    GroupNormP() = default;
    GroupNormP(std::string name, std::size_t c, std::size_t groups_) : groups(groups_) {
        gamma.name = name + ".gamma";
        gamma.value = Tensor<S>::full({c}, S(1));
        beta.name = name + ".beta";
        beta.value = Tensor<S>({c});
    }
    Var<S> forward(Ws<S>& ws, Var<S> x) {
        return group_norm(x, groups, ws(gamma), ws(beta));
    }
    void visit(const ParamVisit<S>& f) {
        f(gamma);
        f(beta);
    }
};

template <class S>
struct SnakeP {
    Param<S> log_alpha, log_beta;

    SnakeP() = default;
    SnakeP(std::string name, std::size_t c) {
        log_alpha.name = name + ".log_alpha";
        log_alpha.value = Tensor<S>({c});  // alpha = beta = 1 at init
        log_beta.name = name + ".log_beta";
        log_beta.value = Tensor<S>({c});
    }
    Var<S> forward(Ws<S>& ws, Var<S> x) {
        return snake_beta(x, ws(log_alpha), ws(log_beta));
    }
    void visit(const ParamVisit<S>& f) {
        f(log_alpha);
        f(log_beta);
    }
};

// Multi-head self-attention on channels-first input [C x L]. Inner width is
// heads * head_dim, which may differ from C.
template <class S>
struct MultiHeadAttention {
    Linear<S> wq, wk, wv, wo;
    std::size_t heads = 1, head_dim = 0;
    bool use_rope = false;

    MultiHeadAttention() = default;
    MultiHeadAttention(std::string name, std::size_t channels, std::size_t heads_,
                       std::size_t head_dim_, bool use_rope_)
        : wq(name + ".q", channels, heads_ * head_dim_),
          wk(name + ".k", channels, heads_ * head_dim_),
          wv(name + ".v", channels, heads_ * head_dim_),
          wo(name + ".o", heads_ * head_dim_, channels),
          heads(heads_),
          head_dim(head_dim_),
          use_rope(use_rope_) {}
    void init(Rng& rng) {
        wq.init(rng);
        wk.init(rng);
        wv.init(rng);
        wo.init(rng);
    }
    Var<S> forward(Ws<S>& ws, Var<S> x) {
        Var<S> xt = transpose(x);  // [L x C]
        Var<S> q = split_heads(wq.forward(ws, xt), heads);
        Var<S> k = split_heads(wk.forward(ws, xt), heads);
        Var<S> v = split_heads(wv.forward(ws, xt), heads);
        if (use_rope) {
            q = rope_rotate(q);
            k = rope_rotate(k);
        }
        Var<S> logits = mul_scalar(bmm(q, transpose_last2(k)),
                                   S(1.0 / std::sqrt((double)head_dim)));
        Var<S> att = softmax_lastdim(logits);
        Var<S> out = merge_heads(bmm(att, v));
        return transpose(wo.forward(ws, out));
    }
    void visit(const ParamVisit<S>& f) {
        wq.visit(f);
        wk.visit(f);
        wv.visit(f);
        wo.visit(f);
    }
};

// Pre-norm Transformer block; feedforward is two 1x1 convs with either relu
// (encoder) or snake-beta (decoder) in between.
template <class S>
struct TransformerBlock {
    LayerNormP<S> ln1, ln2;
    MultiHeadAttention<S> attn;
    Conv1dLayer<S> ff1, ff2;
    SnakeP<S> snake;
    bool use_snake = false;

    TransformerBlock() = default;
    TransformerBlock(std::string name, std::size_t channels, std::size_t heads,
                     std::size_t head_dim, std::size_t ffn, bool rope, bool snake_ffn,
                     std::size_t ffn_kernel = 1)
        : ln1(name + ".ln1", channels),
          ln2(name + ".ln2", channels),
          attn(name + ".attn", channels, heads, head_dim, rope),
          ff1(name + ".ff1", channels, ffn, ffn_kernel, 1, (ffn_kernel - 1) / 2),
          ff2(name + ".ff2", ffn, channels, ffn_kernel, 1, (ffn_kernel - 1) / 2),
          snake(name + ".snake", ffn),
          use_snake(snake_ffn) {}
    void init(Rng& rng) {
        attn.init(rng);
        ff1.init(rng);
        ff2.init(rng);
    }
    Var<S> forward(Ws<S>& ws, Var<S> x) {
        Var<S> h = add(x, attn.forward(ws, ln1.forward(ws, x)));
        Var<S> f = ff1.forward(ws, ln2.forward(ws, h));
        f = use_snake ? snake.forward(ws, f) : relu(f);
        return add(h, ff2.forward(ws, f));
    }
    void visit(const ParamVisit<S>& f) {
        ln1.visit(f);
        ln2.visit(f);
        attn.visit(f);
        ff1.visit(f);
        ff2.visit(f);
        if (use_snake) snake.visit(f);
    }
};

// Sinusoidal embedding of the flow time followed by a learned two-layer
// projection. First half sines, second half cosines; t scaled to [0, 1000].
template <class S>
struct TimeEmbed {
    Linear<S> l1, l2;
    std::size_t dim = 0;

    TimeEmbed() = default;
    TimeEmbed(std::string name, std::size_t dim_)
        : l1(name + ".l1", dim_, dim_), l2(name + ".l2", dim_, dim_), dim(dim_) {
        if (dim_ % 2 != 0) throw TensorError("time_embed: dim must be even");
    }
    void init(Rng& rng) {
        l1.init(rng);
        l2.init(rng);
    }
    static Tensor<S> sinusoid(double t, std::size_t dim) {
        if (dim % 2 != 0) throw TensorError("time_embed: dim must be even");
        Tensor<S> e({1, dim});
        std::size_t half = dim / 2;
        for (std::size_t i = 0; i < half; ++i) {
            double freq = std::pow(10000.0, -(double)i / (double)half);
            e(0, i) = S(std::sin(1000.0 * t * freq));
            e(0, half + i) = S(std::cos(1000.0 * t * freq));
        }
        return e;
    }
    Var<S> forward(Ws<S>& ws, double t) {
        Var<S> e = constant(ws.tape, sinusoid(t, dim));
        Var<S> h = relu(l1.forward(ws, e));
        return reshape(l2.forward(ws, h), {dim});  // [dim]
    }
    void visit(const ParamVisit<S>& f) {
        l1.visit(f);
        l2.visit(f);
    }
};

// 1D conv residual block: conv-groupnorm-snake twice, time embedding added
// between the halves, 1x1 skip when channel counts differ.
template <class S>
struct ResBlock1d {
    Conv1dLayer<S> conv1, conv2, skip;
    GroupNormP<S> gn1, gn2;
    SnakeP<S> sb1, sb2;
    Linear<S> temb_proj;
    bool has_skip = false;

    ResBlock1d() = default;
    ResBlock1d(std::string name, std::size_t cin, std::size_t cout, std::size_t temb_dim,
               std::size_t groups)
        : conv1(name + ".conv1", cin, cout, 3, 1, 1),
          conv2(name + ".conv2", cout, cout, 3, 1, 1),
          gn1(name + ".gn1", cout, groups),
          gn2(name + ".gn2", cout, groups),
          sb1(name + ".sb1", cout),
          sb2(name + ".sb2", cout),
          temb_proj(name + ".temb", temb_dim, cout),
          has_skip(cin != cout) {
        if (has_skip) skip = Conv1dLayer<S>(name + ".skip", cin, cout, 1);
    }
    void init(Rng& rng) {
        conv1.init(rng);
        conv2.init(rng);
        temb_proj.init(rng);
        if (has_skip) skip.init(rng);
    }
    Var<S> forward(Ws<S>& ws, Var<S> x, Var<S> temb) {
        std::size_t T = x->value.cols();
        Var<S> h = sb1.forward(ws, gn1.forward(ws, conv1.forward(ws, x)));
        Var<S> tp = reshape(temb_proj.forward(ws, reshape(temb, {1, temb_proj.in})),
                            {temb_proj.out});
        h = add(h, bcast_cols(tp, T));
        h = sb2.forward(ws, gn2.forward(ws, conv2.forward(ws, h)));
        Var<S> res = has_skip ? skip.forward(ws, x) : x;
        return add(res, h);
    }
    void visit(const ParamVisit<S>& f) {
        conv1.visit(f);
        conv2.visit(f);
        gn1.visit(f);
        gn2.visit(f);
        sb1.visit(f);
        sb2.visit(f);
        temb_proj.visit(f);
        if (has_skip) skip.visit(f);
    }
};

// ---------------------------------------------------------------------------
// configs
// ---------------------------------------------------------------------------

struct EncoderConfig {
    std::size_t channels = 64;
    std::size_t layers = 2;
    std::size_t heads = 1;
    std::size_t head_dim = 64;
    std::size_t ffn = 256;
    std::size_t prenet_kernel = 5;
    std::size_t prenet_layers = 2;
    std::size_t dur_channels = 64;
    std::size_t dur_kernel = 3;
    std::size_t dur_layers = 2;
};

struct DecoderConfig {
    std::size_t hidden = 256;
    std::size_t heads = 2;
    std::size_t attention_dim = 64;
    std::size_t n_down = 2;
    std::size_t n_mid = 2;
    std::size_t n_up = 2;
    std::size_t groups = 8;
    std::size_t ffn = 1024;
};

struct ModelConfig {
    std::size_t n_vocab = 40;
    std::size_t n_mel = 80;
    EncoderConfig encoder;
    DecoderConfig decoder;
    double sigma_min = 1e-4;
    std::string preset = "toy";

    void validate() const {
        if (n_vocab < 1 || n_mel < 1 || encoder.channels < 1 || decoder.hidden < 1)
            throw TensorError("ModelConfig: all extents must be >= 1");
        if (decoder.hidden % decoder.groups != 0)
            throw TensorError("ModelConfig: decoder hidden not divisible by norm groups");
    }

    static ModelConfig toy() {
        ModelConfig c;
        c.n_mel = 20;
        c.encoder = {64, 2, 1, 64, 256, 5, 2, 64, 3, 2};
        c.decoder = {64, 1, 64, 1, 1, 1, 8, 128};
        c.preset = "toy";
        return c;
    }
    static ModelConfig paper() {
        ModelConfig c;
        c.n_mel = 80;
        c.encoder = {192, 6, 2, 96, 768, 5, 3, 256, 3, 2};
        c.decoder = {256, 2, 64, 2, 2, 2, 8, 1024};
        c.preset = "paper";
        return c;
    }
};

// ---------------------------------------------------------------------------
// encoder: token embedding + conv prenet + RoPE Transformer layers,
// projection to per-token means, duration predictor on detached features
// ---------------------------------------------------------------------------

template <class S>
struct Encoder {
    Param<S> emb;
    std::vector<Conv1dLayer<S>> prenet_conv;
    std::vector<LayerNormP<S>> prenet_ln;
    std::vector<TransformerBlock<S>> layers;
    Conv1dLayer<S> mu_proj;
    std::vector<Conv1dLayer<S>> dur_conv;
    std::vector<LayerNormP<S>> dur_ln;
    Conv1dLayer<S> dur_proj;
    std::size_t n_vocab = 0;

    Encoder() = default;
    Encoder(const ModelConfig& mc) : n_vocab(mc.n_vocab) {
        const EncoderConfig& c = mc.encoder;
        emb.name = "encoder.emb";
        emb.value = Tensor<S>({mc.n_vocab, c.channels});
        for (std::size_t i = 0; i < c.prenet_layers; ++i) {
            std::string nm = "encoder.prenet" + std::to_string(i);
            prenet_conv.emplace_back(nm + ".conv", c.channels, c.channels, c.prenet_kernel,
                                     1, (c.prenet_kernel - 1) / 2);
            prenet_ln.emplace_back(nm + ".ln", c.channels);
        }
        for (std::size_t i = 0; i < c.layers; ++i)
            layers.emplace_back("encoder.layer" + std::to_string(i), c.channels, c.heads,
                                c.head_dim, c.ffn, /*rope=*/true, /*snake=*/false,
                                /*ffn_kernel=*/3);
        mu_proj = Conv1dLayer<S>("encoder.mu_proj", c.channels, mc.n_mel, 1);
        for (std::size_t i = 0; i < c.dur_layers; ++i) {
            std::string nm = "encoder.dur" + std::to_string(i);
            dur_conv.emplace_back(nm + ".conv", i == 0 ? c.channels : c.dur_channels,
                                  c.dur_channels, c.dur_kernel, 1, (c.dur_kernel - 1) / 2);
            dur_ln.emplace_back(nm + ".ln", c.dur_channels);
        }
        dur_proj = Conv1dLayer<S>("encoder.dur_proj", c.dur_channels, 1, 1);
    }

    void init(Rng& rng) {
        double bound = 1.0 / std::sqrt((double)emb.value.cols());
        for (auto& v : emb.value.data) v = S(rng.uniform(-bound, bound));
        for (auto& l : prenet_conv) l.init(rng);
        for (auto& l : layers) l.init(rng);
        mu_proj.init(rng);
        for (auto& l : dur_conv) l.init(rng);
        dur_proj.init(rng);
    }

    // tokens -> (mu_tokens [n_mel x N], log_durations [N])
    std::pair<Var<S>, Var<S>> forward(Ws<S>& ws, const std::vector<std::size_t>& tokens) {
        for (std::size_t id : tokens)
            if (id >= n_vocab)
                throw TensorError("encoder: token id " + std::to_string(id) +
                                  " out of vocabulary (" + std::to_string(n_vocab) + ")");
        Var<S> h = transpose(gather_rows(ws(emb), tokens));  // [C x N]
        for (std::size_t i = 0; i < prenet_conv.size(); ++i)
            h = add(h, relu(prenet_ln[i].forward(ws, prenet_conv[i].forward(ws, h))));
        for (auto& l : layers) h = l.forward(ws, h);
        Var<S> mu = mu_proj.forward(ws, h);
        // duration predictor sees the encoder output through a stop-gradient
        Var<S> d = detach(h);
        for (std::size_t i = 0; i < dur_conv.size(); ++i)
            d = relu(dur_ln[i].forward(ws, dur_conv[i].forward(ws, d)));
        Var<S> log_d = reshape(dur_proj.forward(ws, d), {tokens.size()});
        return {mu, log_d};
    }

    void visit(const ParamVisit<S>& f) {
        f(emb);
        for (std::size_t i = 0; i < prenet_conv.size(); ++i) {
            prenet_conv[i].visit(f);
            prenet_ln[i].visit(f);
        }
        for (auto& l : layers) l.visit(f);
        mu_proj.visit(f);
        for (std::size_t i = 0; i < dur_conv.size(); ++i) {
            dur_conv[i].visit(f);
            dur_ln[i].visit(f);
        }
        dur_proj.visit(f);
    }
};

// ---------------------------------------------------------------------------
// decoder: 1D U-Net of conv residual blocks, each followed by a Transformer
// block without position embeddings; input is x_t and mu concatenated on the
// channel axis, time enters every residual block
// ---------------------------------------------------------------------------

template <class S>
struct Decoder {
    Conv1dLayer<S> conv_in, conv_out;
    TimeEmbed<S> temb;
    std::vector<ResBlock1d<S>> down_res;
    std::vector<TransformerBlock<S>> down_tf;
    std::vector<Conv1dLayer<S>> down_sample;
    std::vector<ResBlock1d<S>> mid_res;
    std::vector<TransformerBlock<S>> mid_tf;
    std::vector<Conv1dLayer<S>> up_sample;
    std::vector<ResBlock1d<S>> up_res;
    std::vector<TransformerBlock<S>> up_tf;
    std::size_t n_mel = 0, n_down = 0;

    Decoder() = default;
    Decoder(const ModelConfig& mc) : n_mel(mc.n_mel), n_down(mc.decoder.n_down) {
        const DecoderConfig& c = mc.decoder;
        std::size_t H = c.hidden;
        conv_in = Conv1dLayer<S>("decoder.conv_in", 2 * mc.n_mel, H, 1);
        temb = TimeEmbed<S>("decoder.temb", H);
        for (std::size_t i = 0; i < c.n_down; ++i) {
            std::string nm = "decoder.down" + std::to_string(i);
            down_res.emplace_back(nm + ".res", H, H, H, c.groups);
            down_tf.emplace_back(nm + ".tf", H, c.heads, c.attention_dim, c.ffn, false, true);
            down_sample.emplace_back(nm + ".ds", H, H, 3, 2, 1);
        }
        for (std::size_t i = 0; i < c.n_mid; ++i) {
            std::string nm = "decoder.mid" + std::to_string(i);
            mid_res.emplace_back(nm + ".res", H, H, H, c.groups);
            mid_tf.emplace_back(nm + ".tf", H, c.heads, c.attention_dim, c.ffn, false, true);
        }
        for (std::size_t i = 0; i < c.n_up; ++i) {
            std::string nm = "decoder.up" + std::to_string(i);
            up_sample.emplace_back(nm + ".us", H, H, 3, 1, 1);
            bool has_cat = i < c.n_down;  // skip connection available
            up_res.emplace_back(nm + ".res", has_cat ? 2 * H : H, H, H, c.groups);
            up_tf.emplace_back(nm + ".tf", H, c.heads, c.attention_dim, c.ffn, false, true);
        }
        conv_out = Conv1dLayer<S>("decoder.conv_out", H, mc.n_mel, 1);
    }

    void init(Rng& rng) {
        conv_in.init(rng);
        temb.init(rng);
        for (auto& l : down_res) l.init(rng);
        for (auto& l : down_tf) l.init(rng);
        for (auto& l : down_sample) l.init(rng);
        for (auto& l : mid_res) l.init(rng);
        for (auto& l : mid_tf) l.init(rng);
        for (auto& l : up_sample) l.init(rng);
        for (auto& l : up_res) l.init(rng);
        for (auto& l : up_tf) l.init(rng);
        conv_out.init(rng);
    }

    // (x_t [n_mel x T], mu [n_mel x T], t) -> predicted field [n_mel x T]
    Var<S> forward(Ws<S>& ws, const Tensor<S>& x_t, const Tensor<S>& mu, double t) {
        if (x_t.rank() != 2 || !x_t.same_shape(mu) || x_t.rows() != n_mel)
            shape_fail("decoder", x_t.shape, mu.shape);
        std::size_t T = x_t.cols();
        // right-pad to a multiple of the total downsampling factor, crop after
        std::size_t factor = std::size_t(1) << n_down;
        std::size_t Tp = (T + factor - 1) / factor * factor;
        Var<S> h = concat_rows(constant(ws.tape, x_t), constant(ws.tape, mu));
        if (Tp != T) h = pad_cols(h, 0, Tp - T);
        h = conv_in.forward(ws, h);
        Var<S> te = temb.forward(ws, t);
        std::vector<Var<S>> skips;
        for (std::size_t i = 0; i < down_res.size(); ++i) {
            h = down_res[i].forward(ws, h, te);
            h = down_tf[i].forward(ws, h);
            skips.push_back(h);
            h = down_sample[i].forward(ws, h);
        }
        for (std::size_t i = 0; i < mid_res.size(); ++i) {
            h = mid_res[i].forward(ws, h, te);
            h = mid_tf[i].forward(ws, h);
        }
        for (std::size_t i = 0; i < up_res.size(); ++i) {
            h = up_sample[i].forward(ws, repeat_cols(h, 2));
            if (!skips.empty()) {
                h = concat_rows(h, skips.back());
                skips.pop_back();
            }
            h = up_res[i].forward(ws, h, te);
            h = up_tf[i].forward(ws, h);
        }
        h = conv_out.forward(ws, h);
        if (Tp != T) h = slice_cols(h, 0, T);
        return h;
    }

    void visit(const ParamVisit<S>& f) {
        conv_in.visit(f);
        temb.visit(f);
        for (std::size_t i = 0; i < down_res.size(); ++i) {
            down_res[i].visit(f);
            down_tf[i].visit(f);
            down_sample[i].visit(f);
        }
        for (std::size_t i = 0; i < mid_res.size(); ++i) {
            mid_res[i].visit(f);
            mid_tf[i].visit(f);
        }
        for (std::size_t i = 0; i < up_res.size(); ++i) {
            up_sample[i].visit(f);
            up_res[i].visit(f);
            up_tf[i].visit(f);
        }
        conv_out.visit(f);
    }
};

template <class S>
struct Model {
    ModelConfig config;
    Encoder<S> encoder;
    Decoder<S> decoder;

    Model() = default;
    explicit Model(const ModelConfig& c) : config(c), encoder(c), decoder(c) {
        config.validate();
    }

    void init(Rng& rng) {
        encoder.init(rng);
        decoder.init(rng);
    }

    void visit_params(const ParamVisit<S>& f) {
        encoder.visit(f);
        decoder.visit(f);
    }

    std::size_t count_params() {
        std::size_t n = 0;
        visit_params([&](Param<S>& p) { n += p.value.size(); });
        return n;
    }
};

}  // namespace matcha
