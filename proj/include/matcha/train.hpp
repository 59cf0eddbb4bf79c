#pragma once

#include "matcha/align.hpp"
#include "matcha/cfm.hpp"
#include "matcha/data.hpp"
#include "matcha/net.hpp"
#include "matcha/sampler.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

namespace matcha {

struct TrainConfig {
    double learning_rate = 1e-4;
    std::size_t batch_size = 32;
    std::size_t max_updates = 1000;
    std::uint64_t seed = 0;
    double sigma_min = 1e-4;
    std::size_t checkpoint_every = 500;
    double grad_clip = 1.0;

    void validate() const {
        if (!(learning_rate > 0)) throw TensorError("TrainConfig: learning_rate must be > 0");
        if (batch_size < 1) throw TensorError("TrainConfig: batch_size must be >= 1");
    }
};

struct Losses {
    double prior = 0, duration = 0, cfm = 0, total = 0;
};

// ---------------------------------------------------------------------------
// config <-> json
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const ModelConfig& c) {
    return {{"n_vocab", c.n_vocab},
            {"n_mel", c.n_mel},
            {"sigma_min", c.sigma_min},
            {"preset", c.preset},
            {"encoder",
             {{"channels", c.encoder.channels},
              {"layers", c.encoder.layers},
              {"heads", c.encoder.heads},
              {"head_dim", c.encoder.head_dim},
              {"ffn", c.encoder.ffn},
              {"prenet_kernel", c.encoder.prenet_kernel},
              {"prenet_layers", c.encoder.prenet_layers},
              {"dur_channels", c.encoder.dur_channels},
              {"dur_kernel", c.encoder.dur_kernel},
              {"dur_layers", c.encoder.dur_layers}}},
            {"decoder",
             {{"hidden", c.decoder.hidden},
              {"heads", c.decoder.heads},
              {"attention_dim", c.decoder.attention_dim},
              {"n_down", c.decoder.n_down},
              {"n_mid", c.decoder.n_mid},
              {"n_up", c.decoder.n_up},
              {"groups", c.decoder.groups},
              {"ffn", c.decoder.ffn}}}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.n_vocab = j.at("n_vocab");
    c.n_mel = j.at("n_mel");
    c.sigma_min = j.at("sigma_min");
    c.preset = j.at("preset");
    const auto& e = j.at("encoder");
    c.encoder = {e.at("channels"), e.at("layers"),        e.at("heads"),
                 e.at("head_dim"), e.at("ffn"),           e.at("prenet_kernel"),
                 e.at("prenet_layers"), e.at("dur_channels"), e.at("dur_kernel"),
                 e.at("dur_layers")};
    const auto& d = j.at("decoder");
    c.decoder = {d.at("hidden"), d.at("heads"), d.at("attention_dim"), d.at("n_down"),
                 d.at("n_mid"),  d.at("n_up"),  d.at("groups"),        d.at("ffn")};
    return c;
}

inline nlohmann::json to_json(const TrainConfig& c) {
    return {{"learning_rate", c.learning_rate}, {"batch_size", c.batch_size},
            {"max_updates", c.max_updates},     {"seed", c.seed},
            {"sigma_min", c.sigma_min},         {"checkpoint_every", c.checkpoint_every},
            {"grad_clip", c.grad_clip}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.learning_rate = j.at("learning_rate");
    c.batch_size = j.at("batch_size");
    c.max_updates = j.at("max_updates");
    c.seed = j.at("seed");
    c.sigma_min = j.at("sigma_min");
    c.checkpoint_every = j.at("checkpoint_every");
    c.grad_clip = j.at("grad_clip");
    return c;
}

// ---------------------------------------------------------------------------
// one training update
// ---------------------------------------------------------------------------

// Slice item i of a padded batch down to its true [C x T].
template <class S>
Tensor<S> batch_item_frames(const Batch<S>& b, std::size_t i) {
    std::size_t C = b.frames.dim(1), T = b.n_frames[i];
    Tensor<S> out({C, T});
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t j = 0; j < T; ++j) out(c, j) = b.frames(i, c, j);
    return out;
}

template <class S>
struct StepResult {
    Losses losses;
    std::vector<Durations> mas_durations;  // per batch item
};

// encoder -> MAS (alignment held constant) -> prior + duration + OT-CFM
// losses -> one Adam step. Loss reductions are means over valid elements
// across the whole batch; total = prior + duration + cfm, unweighted.
template <class S>
StepResult<S> train_step(Model<S>& model, const Batch<S>& batch, const TrainConfig& cfg,
                         std::size_t update) {
    cfg.validate();
    Tape<S> tape;
    Ws<S> ws(tape);
    std::size_t B = batch.size();
    std::size_t C = batch.frames.dim(1), Tmax = batch.frames.dim(2);

    StepResult<S> res;
    Var<S> prior_sq = nullptr, dur_sq = nullptr;
    std::size_t prior_count = 0, dur_count = 0;
    Tensor<S> mu_batch({B, C, Tmax});

    for (std::size_t i = 0; i < B; ++i) {
        auto [mu_tok, log_d] = model.encoder.forward(ws, batch.tokens[i]);
        Tensor<S> frames = batch_item_frames(batch, i);
        Tensor<S> lp = log_prior_matrix(frames, mu_tok->value);
        AlignmentPath path = mas(lp);
        Durations durs = durations_from_path(path);
        res.mas_durations.push_back(durs);

        Var<S> mu_al = upsample_by_durations(mu_tok, durs);
        Var<S> r = sub(mu_al, constant(tape, frames));
        Var<S> s = sum_all(mul(r, r));
        prior_sq = prior_sq ? add(prior_sq, s) : s;
        prior_count += frames.size();

        Tensor<S> log_t({durs.d.size()});
        for (std::size_t k = 0; k < durs.d.size(); ++k)
            log_t.data[k] = S(std::log((double)durs.d[k] + 1e-8));
        Var<S> dr = sub(log_d, constant(tape, std::move(log_t)));
        Var<S> ds = sum_all(mul(dr, dr));
        dur_sq = dur_sq ? add(dur_sq, ds) : ds;
        dur_count += durs.d.size();

        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t j = 0; j < batch.n_frames[i]; ++j)
                mu_batch(i, c, j) = mu_al->value(c, j);
    }

    Var<S> prior = add_scalar(mul_scalar(prior_sq, S(1) / S(2 * prior_count)),
                              S(0.5 * kLog2Pi));
    Var<S> dur = mul_scalar(dur_sq, S(1) / S(dur_count));

    OtCfmConfig ot{cfg.sigma_min};
    FieldFn<S> field = [&](Tape<S>& t, const Tensor<S>& x_t, const Tensor<S>& mu,
                           double tt) { return model.decoder.forward(ws, x_t, mu, tt); };
    std::uint64_t cfm_seed = Rng::mix(cfg.seed, 0xcf30000 + update);
    Var<S> cfm = cfm_loss(tape, batch.frames, mu_batch, batch.frame_mask, field,
                          cfm_seed, ot);

    Var<S> total = add(add(prior, dur), cfm);
    res.losses = {(double)prior->value.item(), (double)dur->value.item(),
                  (double)cfm->value.item(), (double)total->value.item()};
    if (!std::isfinite(res.losses.prior)) throw TensorError("train_step: non-finite prior loss");
    if (!std::isfinite(res.losses.duration))
        throw TensorError("train_step: non-finite duration loss");
    if (!std::isfinite(res.losses.cfm)) throw TensorError("train_step: non-finite cfm loss");

    tape.backward(total);

    // global-norm clip, then Adam
    double norm_sq = 0;
    model.visit_params([&](Param<S>& p) {
        Tensor<S> g = ws.grad_of(p);
        for (S v : g.data) norm_sq += (double)v * (double)v;
    });
    double scale = 1.0;
    double norm = std::sqrt(norm_sq);
    if (cfg.grad_clip > 0 && norm > cfg.grad_clip) scale = cfg.grad_clip / norm;

    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    double t_adam = (double)(update + 1);
    double bc1 = 1.0 - std::pow(b1, t_adam);
    double bc2 = 1.0 - std::pow(b2, t_adam);
    model.visit_params([&](Param<S>& p) {
        if (!p.has_moments) {
            p.adam_m = Tensor<S>::zeros(p.value.shape);
            p.adam_v = Tensor<S>::zeros(p.value.shape);
            p.has_moments = true;
        }
        Tensor<S> g = ws.grad_of(p);
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            double gi = (double)g.data[i] * scale;
            double m = b1 * (double)p.adam_m.data[i] + (1 - b1) * gi;
            double v = b2 * (double)p.adam_v.data[i] + (1 - b2) * gi * gi;
            p.adam_m.data[i] = S(m);
            p.adam_v.data[i] = S(v);
            p.value.data[i] -=
                S(cfg.learning_rate * (m / bc1) / (std::sqrt(v / bc2) + eps));
        }
        if (!all_finite(p.value))
            throw TensorError("train_step: non-finite parameter " + p.name);
    });
    return res;
}

// ---------------------------------------------------------------------------
// checkpoint: "MTC1" | version u32 | json_len u32 | json | MTF blobs
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

template <class S>
void save_checkpoint(const std::string& path, Model<S>& model, const TrainConfig& tc,
                     std::size_t update) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw TensorError("save_checkpoint: cannot open " + path);
    std::vector<std::string> names;
    model.visit_params([&](Param<S>& p) { names.push_back(p.name); });
    nlohmann::json j{{"model", to_json(model.config)},
                     {"train", to_json(tc)},
                     {"update", update},
                     {"tensors", names}};
    std::string header = j.dump();
    os.write("MTC1", 4);
    detail::put_u32(os, kCheckpointVersion);
    detail::put_u32(os, (std::uint32_t)header.size());
    os.write(header.data(), (std::streamsize)header.size());
    model.visit_params([&](Param<S>& p) {
        write_tensor_stream(os, p.value.template cast<float>());
        if (!p.has_moments) {
            p.adam_m = Tensor<S>::zeros(p.value.shape);
            p.adam_v = Tensor<S>::zeros(p.value.shape);
            p.has_moments = true;
        }
        write_tensor_stream(os, p.adam_m.template cast<float>());
        write_tensor_stream(os, p.adam_v.template cast<float>());
    });
    if (!os) throw TensorError("save_checkpoint: write failed on " + path);
}

template <class S>
struct Checkpoint {
    ModelConfig model_config;
    TrainConfig train_config;
    std::size_t update = 0;
    Model<S> model;
};

template <class S>
Checkpoint<S> load_checkpoint(const std::string& path,
                              const ModelConfig* expected = nullptr) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw TensorError("load_checkpoint: cannot open " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "MTC1", 4) != 0)
        throw MtfError("bad magic", "not a checkpoint file");
    std::uint32_t version = detail::get_u32(is);
    if (version != kCheckpointVersion)
        throw TensorError("load_checkpoint: version mismatch, file has " +
                          std::to_string(version));
    std::uint32_t hlen = detail::get_u32(is);
    std::string header(hlen, '\0');
    if (!is.read(header.data(), hlen)) throw MtfError("truncated", "checkpoint header");
    auto j = nlohmann::json::parse(header);

    Checkpoint<S> ck;
    ck.model_config = model_config_from_json(j.at("model"));
    ck.train_config = train_config_from_json(j.at("train"));
    ck.update = j.at("update");
    if (expected && to_json(*expected) != j.at("model"))
        throw TensorError("load_checkpoint: config mismatch with checkpoint");
    ck.model = Model<S>(ck.model_config);
    std::vector<std::string> names = j.at("tensors");
    std::size_t idx = 0;
    ck.model.visit_params([&](Param<S>& p) {
        if (idx >= names.size() || names[idx] != p.name)
            throw TensorError("load_checkpoint: missing tensor " + p.name);
        ++idx;
        Tensor<float> v = read_tensor_stream(is);
        if (v.shape != p.value.shape)
            shape_fail("load_checkpoint " + p.name, p.value.shape, v.shape);
        p.value = v.template cast<S>();
        p.adam_m = read_tensor_stream(is).template cast<S>();
        p.adam_v = read_tensor_stream(is).template cast<S>();
        p.has_moments = true;
    });
    return ck;
}

// ---------------------------------------------------------------------------
// synthesis: text -> durations -> upsampled mu -> Euler solve on the decoder
// ---------------------------------------------------------------------------

template <class S>
struct SynthesisResult {
    Tensor<S> frames;  // [n_mel x sum(d)]
    Durations durations;
    std::size_t nfe = 0;
    double wall_time = 0.0;
};

template <class S>
SynthesisResult<S> synthesize(const std::string& text, Model<S>& model,
                              std::size_t n_steps, double temperature,
                              std::uint64_t seed, const Vocab& vocab = Vocab()) {
    if (n_steps < 1) throw TensorError("synthesize: n_steps must be >= 1");
    std::vector<std::size_t> tokens = tokenize(text, vocab);

    Tape<S> enc_tape;
    Ws<S> ws(enc_tape);
    auto [mu_tok, log_d] = model.encoder.forward(ws, tokens);

    SynthesisResult<S> res;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        double d = std::ceil(std::exp((double)log_d->value.data[i]));
        res.durations.d.push_back(d < 1 ? 1 : (std::size_t)d);
    }
    Tensor<S> mu = upsample_by_durations(mu_tok->value, res.durations);

    Tensor<S> x0 = sample_prior<S>(mu.shape, temperature, seed);
    SynthField<S> field = [&](const Tensor<S>& x, double t, const Tensor<S>& cond) {
        Tape<S> tape;
        Ws<S> dws(tape);
        return model.decoder.forward(dws, x, cond, t)->value;
    };
    SolveReport<S> rep = euler_solve(x0, field, n_steps, mu);
    res.frames = std::move(rep.output);
    res.nfe = rep.nfe;
    res.wall_time = rep.wall_time;
    return res;
}

// ---------------------------------------------------------------------------
// training loop; batch order and loss sequence are functions of (corpus,
// config, start_update) only, so resuming from a checkpoint reproduces the
// uninterrupted trajectory.
// ---------------------------------------------------------------------------

template <class S>
using UpdateCallback = std::function<void(std::size_t update, const Losses&,
                                          const StepResult<S>&)>;

template <class S>
void train_loop(Model<S>& model, const std::vector<Utterance<S>>& corpus,
                const TrainConfig& cfg, std::size_t start_update,
                const UpdateCallback<S>& on_update,
                const std::function<void(std::size_t)>& on_checkpoint = nullptr) {
    cfg.validate();
    if (corpus.empty()) throw TensorError("train_loop: empty corpus");
    std::size_t per_epoch =
        (corpus.size() + cfg.batch_size - 1) / cfg.batch_size;
    std::size_t update = start_update;
    while (update < cfg.max_updates) {
        std::size_t epoch = update / per_epoch;
        auto batches = make_batches(corpus, cfg.batch_size, Rng::mix(cfg.seed, epoch));
        for (std::size_t bi = update % per_epoch; bi < batches.size() && update < cfg.max_updates;
             ++bi, ++update) {
            StepResult<S> r = train_step(model, batches[bi], cfg, update);
            if (on_update) on_update(update, r.losses, r);
            if (on_checkpoint && cfg.checkpoint_every > 0 &&
                (update + 1) % cfg.checkpoint_every == 0)
                on_checkpoint(update + 1);
        }
    }
}

}  // namespace matcha
