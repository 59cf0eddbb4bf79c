// Acceptance gate: ten criteria, one pass/fail line each, nonzero exit if any
// blocking criterion fails. Tolerances are pinned here, not configurable.

#include "matcha/cli.hpp"
#include "matcha/train.hpp"
#include "matcha/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <vector>

using namespace matcha;

namespace {

int g_failures = 0;

void report(int n, const std::string& what, bool pass, const std::string& detail) {
    std::cout << (pass ? "[PASS]" : "[FAIL]") << " criterion " << n << ": " << what;
    if (!detail.empty()) std::cout << " (" << detail << ")";
    std::cout << std::endl;
    if (!pass) ++g_failures;
}

double now_s() {
    return std::chrono::duration<double>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

// -- 1: flow identities -----------------------------------------------------

void criterion_flow() {
    double t0 = now_s();
    VerifyResult r = verify_flow_suite();
    double el = now_s() - t0;
    report(1, "flow identities and dphi/dt (rel err < 1e-6)", r.pass && el < 1.0,
           r.pass ? "ran in " + std::to_string(el) + " s" : r.message);
}

// -- 2: zero-loss fixed point -----------------------------------------------

// Field equal to the analytic target plus a constant, reconstructed from the
// same seeded streams the loss draws from.
FieldFn<double> target_plus(const Tensor<double>& x1_batch, std::uint64_t seed,
                            const OtCfmConfig& cfg, double c) {
    auto x0_rng = std::make_shared<Rng>(Rng(seed).split(2));
    auto item = std::make_shared<std::size_t>(0);
    return [x1_batch, x0_rng, item, cfg, c](Tape<double>& tape,
                                            const Tensor<double>& x_t,
                                            const Tensor<double>&, double) {
        std::size_t C = x_t.rows(), L = x_t.cols();
        Tensor<double> x0({C, L}), x1({C, L});
        for (std::size_t i = 0; i < C; ++i)
            for (std::size_t j = 0; j < L; ++j) x0(i, j) = x0_rng->normal();
        for (std::size_t i = 0; i < C; ++i)
            for (std::size_t j = 0; j < L; ++j) x1(i, j) = x1_batch(*item, i, j);
        Tensor<double> u = ot_target_field(x0, x1, cfg);
        for (auto& v : u.data) v += c;
        ++*item;
        return constant(tape, u);
    };
}

void criterion_zero_loss() {
    OtCfmConfig cfg{1e-4};
    Rng rng(61);
    Tensor<double> x1({3, 4, 6}), mu({3, 4, 6}), mask({3, 6});
    for (auto& v : x1.data) v = rng.normal();
    for (auto& v : mu.data) v = rng.normal();
    std::fill(mask.data.begin(), mask.data.end(), 1.0);

    Tape<double> t1;
    double zero =
        cfm_loss(t1, x1, mu, mask, target_plus(x1, 88, cfg, 0.0), 88, cfg)->value.item();
    double c = 0.4;
    Tape<double> t2;
    double offset =
        cfm_loss(t2, x1, mu, mask, target_plus(x1, 89, cfg, c), 89, cfg)->value.item();
    bool pass = zero <= 1e-12 && std::abs(offset - c * c) <= 1e-12;
    std::ostringstream d;
    d << "loss at target = " << zero << ", at target+" << c << " = " << offset
      << " vs c^2 = " << c * c;
    report(2, "cfm loss vanishes at the analytic target, c offset gives c^2", pass,
           d.str());
}

// -- 3, 4, 6: oracle suites -------------------------------------------------

void criterion_mas() {
    double t0 = now_s();
    VerifyResult r = verify_mas_suite(100);
    double el = now_s() - t0;
    report(3, "MAS equals brute-force enumeration on 100 instances",
           r.pass && el < 10.0, r.pass ? "ran in " + std::to_string(el) + " s" : r.message);
}

void criterion_grad() {
    double t0 = now_s();
    VerifyResult r = verify_grad_suite(1e-4);
    double el = now_s() - t0;
    report(4, "all blocks pass 64-bit finite differences (rel err < 1e-4)",
           r.pass && el < 120.0,
           r.pass ? "ran in " + std::to_string(el) + " s" : r.message);
}

void criterion_rope() {
    VerifyResult r = verify_rope_suite(100);
    report(6, "attention logits invariant under position shifts (tol 1e-6)", r.pass,
           r.message);
}

// -- 5: Euler solver order --------------------------------------------------

void criterion_euler() {
    Tensor<double> none({0});
    SynthField<double> growth = [](const Tensor<double>& x, double,
                                   const Tensor<double>&) { return x; };
    Tensor<double> one = Tensor<double>::vec({1});
    double e = std::exp(1.0);
    double err10 = std::abs(euler_solve(one, growth, 10, none).output.data[0] - e);
    double err100 = std::abs(euler_solve(one, growth, 100, none).output.data[0] - e);
    auto rep1000 = euler_solve(one, growth, 1000, none);
    double err1000 = std::abs(rep1000.output.data[0] - e);
    double order_a = std::log10(err10 / err100);
    double order_b = std::log10(err100 / err1000);

    SynthField<double> flat = [](const Tensor<double>& x, double, const Tensor<double>&) {
        return Tensor<double>::full(x.shape, -2.0);
    };
    auto c1 = euler_solve(Tensor<double>::vec({5}), flat, 1, none);
    bool const_exact = c1.output.data[0] == 3.0 && c1.nfe == 1;

    bool pass = order_a >= 0.9 && order_b >= 0.9 && const_exact && rep1000.nfe == 1000;
    std::ostringstream d;
    d << "orders " << order_a << ", " << order_b << "; constant field exact at n=1; nfe ok";
    report(5, "Euler order >= 0.9 on dx/dt = x, exact constant case, exact NFE", pass,
           d.str());
}

// -- 7: desk-scale end-to-end -----------------------------------------------

void criterion_desk_scale() {
    double t0 = now_s();
    ModelConfig mc = ModelConfig::toy();
    TrainConfig tc;
    tc.learning_rate = 2e-3;
    tc.batch_size = 8;
    tc.max_updates = 2000;
    tc.seed = 1;
    tc.checkpoint_every = 0;

    // a corpus this size is large enough that the encoder cannot memorize a
    // wrong alignment per utterance; smaller corpora admit degenerate
    // alignment fixed points
    auto corpus = synth_corpus<float>(128, mc.n_vocab, mc.n_mel, Rng::mix(tc.seed, 0xda7a));
    Model<float> model(mc);
    Rng init(tc.seed);
    model.init(init);

    // random-parameters baseline for the synthesis comparison
    Model<float> random_model(mc);
    Rng rinit(999);
    random_model.init(rinit);

    std::vector<double> totals;
    train_loop<float>(model, corpus.utterances, tc, 0,
                      [&](std::size_t, const Losses& l, const StepResult<float>&) {
                          totals.push_back(l.total);
                      });
    double train_s = now_s() - t0;

    double at10 = totals[10];
    double tail = 0;
    for (std::size_t i = totals.size() - 10; i < totals.size(); ++i) tail += totals[i];
    tail /= 10;
    bool loss_ok = tail < 0.5 * at10;

    // MAS duration agreement against the generator's ground truth
    std::size_t total_tok = 0, matched = 0;
    for (const auto& u : corpus.utterances) {
        Tape<float> tape;
        Ws<float> ws(tape);
        auto [mu, log_d] = model.encoder.forward(ws, u.tokens);
        Durations d = durations_from_path(mas(log_prior_matrix(u.frames, mu->value)));
        for (std::size_t i = 0; i < d.d.size(); ++i) {
            ++total_tok;
            matched += d.d[i] == u.true_durations.d[i];
        }
    }
    double mas_rate = (double)matched / (double)total_tok;
    bool mas_ok = mas_rate >= 0.95;

    // synthesized per-token means vs the true signatures, trained vs random
    auto signature_err = [&](Model<float>& m) {
        double err = 0;
        std::size_t n = 0;
        for (std::size_t k = 0; k < 5; ++k) {
            const auto& u = corpus.utterances[k];
            auto r = synthesize<float>(u.text, m, 4, 0.667, 70 + k);
            std::size_t j = 0;
            for (std::size_t i = 0; i < u.tokens.size(); ++i) {
                std::size_t di = r.durations.d[i];
                for (std::size_t c = 0; c < mc.n_mel; ++c) {
                    double mean = 0;
                    for (std::size_t f = 0; f < di; ++f) mean += r.frames(c, j + f);
                    mean /= (double)di;
                    double diff = mean - (double)corpus.signatures(u.tokens[i], c);
                    err += diff * diff;
                    ++n;
                }
                j += di;
            }
        }
        return std::sqrt(err / (double)n);
    };
    double trained_err = signature_err(model);
    double random_err = signature_err(random_model);
    bool synth_ok = random_err >= 5.0 * trained_err;

    bool time_ok = train_s < 900.0;
    std::ostringstream d;
    d << "2000 updates in " << train_s << " s; loss " << at10 << " -> " << tail
      << "; MAS match " << 100 * mas_rate << "%; signature err " << trained_err
      << " vs random " << random_err;
    report(7, "desk-scale training run meets loss, alignment and synthesis bars",
           time_ok && loss_ok && mas_ok && synth_ok, d.str());
}

// -- 8: NFE/speed monotonicity ----------------------------------------------

void criterion_bench() {
    ModelConfig mc = ModelConfig::toy();
    Model<float> model(mc);
    Rng init(3);
    model.init(init);
    Vocab vocab;
    Rng rng(12);

    std::vector<std::size_t> lengths{10, 50, 200}, steps{2, 4, 10};
    std::size_t repeats = 3;
    // medians[length][steps], plus per-steps (frames, wall) points
    std::map<std::size_t, std::map<std::size_t, double>> med;
    std::map<std::size_t, std::vector<std::pair<double, double>>> pts;
    for (std::size_t len : lengths) {
        std::vector<std::size_t> ids(len);
        for (auto& id : ids) id = vocab.id_of('a') + (std::size_t)rng.uniform_int(0, 25);
        std::string text = detokenize(ids, vocab);
        for (std::size_t n : steps) {
            std::vector<double> walls;
            double frames = 0;
            for (std::size_t r = 0; r < repeats; ++r) {
                auto res = synthesize<float>(text, model, n, 0.667, 40 + r);
                walls.push_back(res.wall_time);
                frames = (double)res.frames.cols();
            }
            std::sort(walls.begin(), walls.end());
            med[len][n] = walls[repeats / 2];
            for (double w : walls) pts[n].push_back({frames, w});
        }
    }

    bool mono = true;
    for (std::size_t len : lengths)
        for (std::size_t i = 1; i < steps.size(); ++i)
            mono = mono && med[len][steps[i]] > med[len][steps[i - 1]];
    for (std::size_t n : steps)
        for (std::size_t i = 1; i < lengths.size(); ++i)
            mono = mono && med[lengths[i]][n] > med[lengths[i - 1]][n];

    bool slopes = true;
    for (std::size_t n : steps) {
        double sx = 0, sy = 0, sxx = 0, sxy = 0, m = (double)pts[n].size();
        for (auto [x, y] : pts[n]) {
            sx += x;
            sy += y;
            sxx += x * x;
            sxy += x * y;
        }
        double slope = (m * sxy - sx * sy) / (m * sxx - sx * sx);
        slopes = slopes && slope > 0;
    }
    std::ostringstream d;
    d << "median wall times s: ";
    for (std::size_t len : lengths)
        for (std::size_t n : steps) d << med[len][n] << " ";
    report(8, "wall time increases with steps and with length; slopes positive",
           mono && slopes, d.str());
}

// -- 9: parameter-count soft check (informational) --------------------------

void criterion_params() {
    Model<float> model(ModelConfig::paper());
    double count = (double)model.count_params();
    double reference = 18.2e6;
    double dev = (count - reference) / reference;
    std::ostringstream d;
    d << count / 1e6 << "M vs reference 18.2M (" << 100 * dev << "%)";
    if (std::abs(dev) > 0.20)
        d << "; outside the expected +-20% band, encoder hyperparameters are "
             "approximated from the cited upstream code";
    d << "; informational, non-blocking";
    report(9, "paper-preset parameter count near 18.2M", true, d.str());
}

// -- 10: serialization ------------------------------------------------------

ModelConfig detailed_tiny() {
    ModelConfig c;
    c.n_vocab = 36;
    c.n_mel = 6;
    c.encoder = {16, 1, 1, 16, 32, 3, 1, 16, 3, 1};
    c.decoder = {16, 1, 16, 1, 1, 1, 4, 32};
    c.preset = "tiny";
    return c;
}

void criterion_serialization() {
    // MTF round trip
    Rng rng(71);
    Tensor<float> t({5, 9});
    for (auto& v : t.data) v = (float)rng.normal();
    std::stringstream ss;
    write_tensor_stream(ss, t);
    Tensor<float> back = read_tensor_stream(ss);
    bool mtf_ok = back.shape == t.shape && back.data == t.data;

    // checkpoint round trip and resumed trajectory
    ModelConfig mc = detailed_tiny();
    TrainConfig tc;
    tc.learning_rate = 1e-3;
    tc.batch_size = 4;
    tc.seed = 2;
    tc.checkpoint_every = 0;
    auto corpus = synth_corpus<float>(8, mc.n_vocab, mc.n_mel, 300).utterances;

    tc.max_updates = 15;
    Model<float> full(mc);
    Rng init_a(2);
    full.init(init_a);
    std::vector<double> ref;
    train_loop<float>(full, corpus, tc, 0,
                      [&](std::size_t, const Losses& l, const StepResult<float>&) {
                          ref.push_back(l.total);
                      });

    Model<float> part(mc);
    Rng init_b(2);
    part.init(init_b);
    std::vector<double> got;
    TrainConfig tc5 = tc;
    tc5.max_updates = 5;
    train_loop<float>(part, corpus, tc5, 0,
                      [&](std::size_t, const Losses& l, const StepResult<float>&) {
                          got.push_back(l.total);
                      });
    std::string path = "/tmp/matcha_acceptance_ckpt.mtc";
    save_checkpoint(path, part, tc5, 5);
    Checkpoint<float> ck = load_checkpoint<float>(path);

    bool ckpt_ok = ck.update == 5;
    std::vector<Param<float>*> a, b;
    part.visit_params([&](Param<float>& p) { a.push_back(&p); });
    ck.model.visit_params([&](Param<float>& p) { b.push_back(&p); });
    for (std::size_t i = 0; i < a.size(); ++i)
        ckpt_ok = ckpt_ok && a[i]->value.data == b[i]->value.data &&
                  a[i]->adam_m.data == b[i]->adam_m.data &&
                  a[i]->adam_v.data == b[i]->adam_v.data;

    TrainConfig tc15 = ck.train_config;
    tc15.max_updates = 15;
    train_loop<float>(ck.model, corpus, tc15, ck.update,
                      [&](std::size_t, const Losses& l, const StepResult<float>&) {
                          got.push_back(l.total);
                      });
    bool resume_ok = got == ref;
    std::remove(path.c_str());

    std::ostringstream d;
    d << "MTF bit-exact: " << (mtf_ok ? "yes" : "no")
      << "; checkpoint bit-exact: " << (ckpt_ok ? "yes" : "no")
      << "; resumed trajectory of 10 further updates identical: "
      << (resume_ok ? "yes" : "no");
    report(10, "tensor/checkpoint round trips bit-exact, resume reproduces training",
           mtf_ok && ckpt_ok && resume_ok, d.str());
}

}  // namespace

int main() {
    criterion_flow();
    criterion_zero_loss();
    criterion_mas();
    criterion_grad();
    criterion_euler();
    criterion_rope();
    criterion_desk_scale();
    criterion_bench();
    criterion_params();
    criterion_serialization();
    std::cout << (g_failures == 0 ? "ACCEPTANCE: all criteria passed"
                                  : "ACCEPTANCE: " + std::to_string(g_failures) +
                                        " criteria failed")
              << std::endl;
    return g_failures == 0 ? 0 : 1;
}
