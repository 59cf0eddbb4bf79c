#pragma once

#include "matcha/data.hpp"
#include "matcha/train.hpp"
#include "matcha/verify.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace matcha {

// ---------------------------------------------------------------------------
// config file: flat `key = value` lines under [model] / [train] / [data]
// sections; '#' and ';' start comments; unknown keys are errors
// ---------------------------------------------------------------------------

struct RunConfig {
    ModelConfig model = ModelConfig::toy();
    TrainConfig train;
    std::size_t synthetic_utts = 64;
    std::string manifest;
};

namespace detail {

inline std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

inline std::size_t to_size(const std::string& key, const std::string& v) {
    try {
        return (std::size_t)std::stoull(v);
    } catch (...) {
        throw TensorError("config: bad value for '" + key + "': " + v);
    }
}

inline double to_real(const std::string& key, const std::string& v) {
    try {
        return std::stod(v);
    } catch (...) {
        throw TensorError("config: bad value for '" + key + "': " + v);
    }
}

}  // namespace detail

inline RunConfig parse_run_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw TensorError("config: cannot open " + path);
    std::vector<std::pair<std::string, std::string>> kv;  // "section.key" -> value
    std::string line, section;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        std::size_t cut = line.find_first_of("#;");
        if (cut != std::string::npos) line = line.substr(0, cut);
        line = detail::trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw TensorError("config: malformed section at line " +
                                  std::to_string(lineno));
            section = detail::trim(line.substr(1, line.size() - 2));
            continue;
        }
        std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw TensorError("config: expected key = value at line " +
                              std::to_string(lineno));
        std::string key = detail::trim(line.substr(0, eq));
        std::string val = detail::trim(line.substr(eq + 1));
        kv.emplace_back(section + "." + key, val);
    }

    RunConfig rc;
    // the preset picks the base model shape; apply it before any overrides
    for (const auto& [k, v] : kv)
        if (k == "model.preset") {
            if (v == "toy")
                rc.model = ModelConfig::toy();
            else if (v == "paper")
                rc.model = ModelConfig::paper();
            else
                throw TensorError("config: unknown preset '" + v + "'");
        }
    for (const auto& [k, v] : kv) {
        if (k == "model.preset") continue;
        else if (k == "model.n_vocab") rc.model.n_vocab = detail::to_size(k, v);
        else if (k == "model.n_mel") rc.model.n_mel = detail::to_size(k, v);
        else if (k == "model.sigma_min") rc.model.sigma_min = detail::to_real(k, v);
        else if (k == "model.encoder_channels") rc.model.encoder.channels = detail::to_size(k, v);
        else if (k == "model.encoder_layers") rc.model.encoder.layers = detail::to_size(k, v);
        else if (k == "model.encoder_heads") rc.model.encoder.heads = detail::to_size(k, v);
        else if (k == "model.encoder_head_dim") rc.model.encoder.head_dim = detail::to_size(k, v);
        else if (k == "model.encoder_ffn") rc.model.encoder.ffn = detail::to_size(k, v);
        else if (k == "model.prenet_kernel") rc.model.encoder.prenet_kernel = detail::to_size(k, v);
        else if (k == "model.prenet_layers") rc.model.encoder.prenet_layers = detail::to_size(k, v);
        else if (k == "model.dur_channels") rc.model.encoder.dur_channels = detail::to_size(k, v);
        else if (k == "model.dur_kernel") rc.model.encoder.dur_kernel = detail::to_size(k, v);
        else if (k == "model.dur_layers") rc.model.encoder.dur_layers = detail::to_size(k, v);
        else if (k == "model.decoder_hidden") rc.model.decoder.hidden = detail::to_size(k, v);
        else if (k == "model.decoder_heads") rc.model.decoder.heads = detail::to_size(k, v);
        else if (k == "model.decoder_attention_dim") rc.model.decoder.attention_dim = detail::to_size(k, v);
        else if (k == "model.decoder_n_down") rc.model.decoder.n_down = detail::to_size(k, v);
        else if (k == "model.decoder_n_mid") rc.model.decoder.n_mid = detail::to_size(k, v);
        else if (k == "model.decoder_n_up") rc.model.decoder.n_up = detail::to_size(k, v);
        else if (k == "model.decoder_groups") rc.model.decoder.groups = detail::to_size(k, v);
        else if (k == "model.decoder_ffn") rc.model.decoder.ffn = detail::to_size(k, v);
        else if (k == "train.learning_rate") rc.train.learning_rate = detail::to_real(k, v);
        else if (k == "train.batch_size") rc.train.batch_size = detail::to_size(k, v);
        else if (k == "train.max_updates") rc.train.max_updates = detail::to_size(k, v);
        else if (k == "train.seed") rc.train.seed = detail::to_size(k, v);
        else if (k == "train.sigma_min") rc.train.sigma_min = detail::to_real(k, v);
        else if (k == "train.checkpoint_every") rc.train.checkpoint_every = detail::to_size(k, v);
        else if (k == "train.grad_clip") rc.train.grad_clip = detail::to_real(k, v);
        else if (k == "data.synthetic_utts") rc.synthetic_utts = detail::to_size(k, v);
        else if (k == "data.manifest") rc.manifest = v;
        else throw TensorError("config: unknown key '" + k + "'");
    }
    rc.model.validate();
    rc.train.validate();
    return rc;
}

// ---------------------------------------------------------------------------
// commands; each throws TensorError on failure, main turns that into a
// one-line error and a nonzero exit
// ---------------------------------------------------------------------------

struct TrainArgs {
    std::string config;
    std::string data;    // manifest path; empty with synthetic = true
    bool synthetic = false;
    std::string out_dir;
    std::int64_t seed = -1;  // < 0: keep the config's seed
};

inline void cmd_train(const TrainArgs& a) {
    RunConfig rc = parse_run_config(a.config);
    if (a.seed >= 0) rc.train.seed = (std::uint64_t)a.seed;
    std::string manifest = a.data.empty() ? rc.manifest : a.data;
    if (!a.synthetic && manifest.empty())
        throw TensorError("train: need --synthetic or a data manifest");

    Vocab vocab;
    std::vector<Utterance<float>> corpus;
    if (a.synthetic) {
        corpus = synth_corpus<float>(rc.synthetic_utts, rc.model.n_vocab, rc.model.n_mel,
                                     Rng::mix(rc.train.seed, 0xda7a), vocab)
                     .utterances;
    } else {
        corpus = load_corpus<float>(manifest, vocab);
        for (const auto& u : corpus)
            if (u.frames.rows() != rc.model.n_mel)
                throw TensorError("train: utterance " + u.id + " has " +
                                  std::to_string(u.frames.rows()) +
                                  " mel bins, model expects " +
                                  std::to_string(rc.model.n_mel));
    }

    std::filesystem::create_directories(a.out_dir);
    std::ofstream csv(a.out_dir + "/losses.csv");
    if (!csv) throw TensorError("train: cannot write " + a.out_dir + "/losses.csv");
    csv << "update,prior,duration,cfm,total\n";

    Model<float> model(rc.model);
    Rng init_rng(rc.train.seed);
    model.init(init_rng);
    std::cout << "params=" << model.count_params() << " corpus=" << corpus.size()
              << " updates=" << rc.train.max_updates << "\n";

    auto ckpt_path = [&](std::size_t u) {
        return a.out_dir + "/ckpt_" + std::to_string(u) + ".mtc";
    };
    train_loop<float>(
        model, corpus, rc.train, 0,
        [&](std::size_t u, const Losses& l, const StepResult<float>&) {
            csv << u << "," << l.prior << "," << l.duration << "," << l.cfm << ","
                << l.total << "\n";
        },
        [&](std::size_t u) { save_checkpoint(ckpt_path(u), model, rc.train, u); });
    save_checkpoint(a.out_dir + "/ckpt_final.mtc", model, rc.train,
                    rc.train.max_updates);
    std::cout << "done out=" << a.out_dir << "\n";
}

struct SynthArgs {
    std::string ckpt;
    std::string text;
    std::size_t steps = 4;
    double temperature = 0.667;
    std::uint64_t seed = 0;
    std::string out;
};

inline void cmd_synth(const SynthArgs& a) {
    if (a.steps < 1) throw TensorError("synth: --steps must be >= 1");
    Checkpoint<float> ck = load_checkpoint<float>(a.ckpt);
    SynthesisResult<float> r =
        synthesize<float>(a.text, ck.model, a.steps, a.temperature, a.seed);
    write_tensor_file(a.out, r.frames.cast<float>());
    std::cout << "frames=" << r.frames.cols() << " nfe=" << r.nfe
              << " wall_s=" << r.wall_time << " out=" << a.out << "\n";
}

struct AlignArgs {
    std::string ckpt;
    std::string manifest;
    std::string out_dir;
};

inline void cmd_align(const AlignArgs& a) {
    Checkpoint<float> ck = load_checkpoint<float>(a.ckpt);
    Vocab vocab;
    auto corpus = load_corpus<float>(a.manifest, vocab);
    std::filesystem::create_directories(a.out_dir);
    std::ofstream csv(a.out_dir + "/durations.csv");
    if (!csv) throw TensorError("align: cannot write " + a.out_dir + "/durations.csv");
    csv << "id,token_index,duration\n";
    std::size_t failures = 0;
    for (const auto& u : corpus) {
        try {
            Tape<float> tape;
            Ws<float> ws(tape);
            auto [mu, log_d] = ck.model.encoder.forward(ws, u.tokens);
            AlignmentPath path = mas(log_prior_matrix(u.frames, mu->value));
            Durations d = durations_from_path(path);
            std::ofstream dump(a.out_dir + "/" + u.id + ".align");
            dump << alignment_dump(path);
            for (std::size_t i = 0; i < d.d.size(); ++i)
                csv << u.id << "," << i << "," << d.d[i] << "\n";
        } catch (const TensorError& e) {
            ++failures;
            std::cerr << "error: align " << u.id << ": " << e.what() << "\n";
        }
    }
    std::cout << "aligned=" << (corpus.size() - failures) << " failed=" << failures
              << " out=" << a.out_dir << "\n";
}

struct BenchArgs {
    std::string ckpt;
    std::vector<std::size_t> lengths{10, 50, 200};
    std::vector<std::size_t> steps{2, 4, 10};
    std::size_t repeats = 3;
    std::uint64_t seed = 0;
    std::string out;
};

// seconds of wall time per second of generated audio, assuming 80 mel
// frames per second; a proxy since there is no vocoder here
inline double rtf_proxy(double wall_s, std::size_t frames) {
    return wall_s / ((double)frames / 80.0);
}

inline void cmd_bench(const BenchArgs& a) {
    if (a.lengths.empty() || a.steps.empty() || a.repeats < 1)
        throw TensorError("bench: lengths, steps and repeats must be non-empty");
    Checkpoint<float> ck = load_checkpoint<float>(a.ckpt);
    Vocab vocab;
    std::ofstream csv(a.out);
    if (!csv) throw TensorError("bench: cannot write " + a.out);
    csv << "id,tokens,frames,steps,wall_s,nfe,rtf_proxy\n";

    Rng rng(a.seed);
    std::size_t first_letter = vocab.id_of('a');
    struct Point {
        double frames, wall;
    };
    std::map<std::size_t, std::vector<Point>> by_steps;
    for (std::size_t len : a.lengths) {
        std::vector<std::size_t> ids(len);
        for (auto& id : ids) id = first_letter + (std::size_t)rng.uniform_int(0, 25);
        std::string text = detokenize(ids, vocab);
        std::string id = "len" + std::to_string(len);
        for (std::size_t n : a.steps)
            for (std::size_t r = 0; r < a.repeats; ++r) {
                auto res = synthesize<float>(text, ck.model, n, 0.667,
                                             Rng::mix(a.seed, 100 * len + 10 * n + r));
                std::size_t frames = res.frames.cols();
                csv << id << "," << len << "," << frames << "," << n << ","
                    << res.wall_time << "," << res.nfe << ","
                    << rtf_proxy(res.wall_time, frames) << "\n";
                by_steps[n].push_back({(double)frames, res.wall_time});
            }
    }
    // least-squares wall_s on frame length, one line per steps setting
    for (const auto& [n, pts] : by_steps) {
        double sx = 0, sy = 0, sxx = 0, sxy = 0, m = (double)pts.size();
        for (const auto& p : pts) {
            sx += p.frames;
            sy += p.wall;
            sxx += p.frames * p.frames;
            sxy += p.frames * p.wall;
        }
        double denom = m * sxx - sx * sx;
        double slope = denom != 0 ? (m * sxy - sx * sy) / denom : 0;
        double intercept = (sy - slope * sx) / m;
        std::cout << "steps=" << n << " slope_s_per_frame=" << slope
                  << " intercept_s=" << intercept << "\n";
    }
    std::cout << "rows=" << a.lengths.size() * a.steps.size() * a.repeats
              << " out=" << a.out << "\n";
}

inline int cmd_verify(const std::string& suite) {
    VerifyResult r;
    if (suite == "flow")
        r = verify_flow_suite();
    else if (suite == "mas")
        r = verify_mas_suite();
    else if (suite == "rope")
        r = verify_rope_suite();
    else if (suite == "grad")
        r = verify_grad_suite();
    else
        throw TensorError("verify: unknown suite '" + suite +
                          "', expected flow|mas|rope|grad");
    if (r.pass) {
        std::cout << "verify " << suite << ": pass\n";
        return 0;
    }
    std::cerr << "verify " << suite << ": FAIL: " << r.message << "\n";
    return 1;
}

}  // namespace matcha
