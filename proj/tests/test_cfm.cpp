#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "matcha/cfm.hpp"
#include "matcha/gradcheck.hpp"
#include "matcha/verify.hpp"

#include <cmath>
#include <memory>

using namespace matcha;

TEST_CASE("flow at t=0 returns x0 exactly") {
    OtCfmConfig cfg{1e-4};
    Tensor<double> x0 = Tensor<double>::vec({2, -1});
    Tensor<double> x1 = Tensor<double>::vec({0, 0});
    Tensor<double> p = ot_flow_point(x0, x1, FlowTime(0.0), cfg);
    CHECK(p.data[0] == 2.0);
    CHECK(p.data[1] == -1.0);
}

TEST_CASE("flow at t=1 with sigma_min=0 returns x1 exactly") {
    OtCfmConfig cfg{0.0};
    Tensor<double> x0 = Tensor<double>::vec({1, 1});
    Tensor<double> x1 = Tensor<double>::vec({3, 5});
    Tensor<double> p = ot_flow_point(x0, x1, FlowTime(1.0), cfg);
    CHECK(p.data[0] == 3.0);
    CHECK(p.data[1] == 5.0);
}

TEST_CASE("flow at t=0.5 matches the straight-line formula") {
    OtCfmConfig cfg{1e-4};
    Tensor<double> x0 = Tensor<double>::vec({1, 0});
    Tensor<double> x1 = Tensor<double>::vec({0, 1});
    Tensor<double> p = ot_flow_point(x0, x1, FlowTime(0.5), cfg);
    CHECK(p.data[0] == doctest::Approx(0.50005).epsilon(1e-12));
    CHECK(p.data[1] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("target field special cases") {
    Tensor<double> x0 = Tensor<double>::vec({2});
    Tensor<double> x1 = Tensor<double>::vec({1});
    CHECK(ot_target_field(x0, x1, {0.0}).data[0] == -1.0);
    CHECK(ot_target_field(Tensor<double>::vec({0}), x1, {0.3}).data[0] == 1.0);
    CHECK(ot_target_field(x0, x1, {1e-4}).data[0] == doctest::Approx(-0.9998).epsilon(1e-12));
}

TEST_CASE("flow time derivative equals the target field") {
    VerifyResult r = verify_flow_suite();
    CHECK_MESSAGE(r.pass, r.message);
}

TEST_CASE("FlowTime enforces [0,1]") {
    CHECK_THROWS_AS(FlowTime(-0.1), TensorError);
    CHECK_THROWS_AS(FlowTime(1.1), TensorError);
}

TEST_CASE("flow and field reject mismatched shapes") {
    Tensor<double> a({2, 3}), b({3, 2});
    CHECK_THROWS_AS(ot_flow_point(a, b, FlowTime(0.5), {}), TensorError);
    CHECK_THROWS_AS(ot_target_field(a, b, {}), TensorError);
}

namespace {

// loss inputs shared by the cfm_loss cases
struct LossSetup {
    Tensor<double> x1{{2, 3, 4}}, mu{{2, 3, 4}}, mask{{2, 4}};
    LossSetup() {
        Rng rng(5);
        for (auto& v : x1.data) v = rng.normal();
        for (auto& v : mu.data) v = rng.normal();
        // item 0 uses 4 frames, item 1 uses 2
        for (std::size_t j = 0; j < 4; ++j) mask(0, j) = 1;
        mask(1, 0) = mask(1, 1) = 1;
    }
};

}  // namespace

namespace {

// Field returning the analytic target plus an offset, reconstructed from the
// same seeded streams the loss draws from.
FieldFn<double> target_plus(const LossSetup& s, std::uint64_t seed,
                            const OtCfmConfig& cfg, double c) {
    auto t_rng = std::make_shared<Rng>(Rng(seed).split(1));
    auto x0_rng = std::make_shared<Rng>(Rng(seed).split(2));
    auto item = std::make_shared<std::size_t>(0);
    return [&s, t_rng, x0_rng, item, cfg, c](Tape<double>& tape,
                                             const Tensor<double>& x_t,
                                             const Tensor<double>&, double) {
        std::size_t C = x_t.rows(), L = x_t.cols();
        (void)t_rng->uniform();
        Tensor<double> x0({C, L}), x1b({C, L});
        for (std::size_t i = 0; i < C; ++i)
            for (std::size_t j = 0; j < L; ++j) x0(i, j) = x0_rng->normal();
        for (std::size_t i = 0; i < C; ++i)
            for (std::size_t j = 0; j < L; ++j) x1b(i, j) = s.x1(*item, i, j);
        Tensor<double> u = ot_target_field(x0, x1b, cfg);
        for (auto& v : u.data) v += c;
        ++*item;
        return constant(tape, u);
    };
}

}  // namespace

TEST_CASE("cfm_loss is zero when the field equals the analytic target") {
    LossSetup s;
    OtCfmConfig cfg{1e-4};
    Tape<double> tape;
    Var<double> loss =
        cfm_loss(tape, s.x1, s.mu, s.mask, target_plus(s, 77, cfg, 0.0), 77, cfg);
    CHECK(loss->value.item() <= 1e-12);
}

TEST_CASE("constant residual c gives loss c^2 exactly") {
    LossSetup s;
    OtCfmConfig cfg{1e-4};
    double c = 0.75;
    Tape<double> tape;
    Var<double> loss =
        cfm_loss(tape, s.x1, s.mu, s.mask, target_plus(s, 78, cfg, c), 78, cfg);
    CHECK(loss->value.item() == doctest::Approx(c * c).epsilon(1e-12));
}

TEST_CASE("single datum matches a hand-computed masked mean of residuals") {
    OtCfmConfig cfg{1e-4};
    std::uint64_t seed = 79;
    Tensor<double> x1({1, 2, 3}), mu({1, 2, 3}), mask({1, 3});
    Rng fill(9);
    for (auto& v : x1.data) v = fill.normal();
    for (auto& v : mu.data) v = fill.normal();
    mask(0, 0) = mask(0, 1) = mask(0, 2) = 1;

    // the field under test: v = mu (a simple deterministic function)
    FieldFn<double> field = [](Tape<double>& tape, const Tensor<double>&,
                               const Tensor<double>& m, double) {
        return constant(tape, m);
    };
    Tape<double> tape;
    double got = cfm_loss(tape, x1, mu, mask, field, seed, cfg)->value.item();

    // independent 64-bit recomputation with plain loops
    Rng root(seed);
    Rng t_rng = root.split(1), x0_rng = root.split(2);
    (void)t_rng.uniform();
    double acc = 0;
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 3; ++j) {
            double x0 = x0_rng.normal();
            std::size_t idx = i * 3 + j;
            double u = x1.data[idx] - (1.0 - cfg.sigma_min) * x0;
            double r = u - mu.data[idx];
            acc += r * r;
        }
    CHECK(got == doctest::Approx(acc / 6.0).epsilon(1e-12));
}

TEST_CASE("cfm_loss rejects an empty mask and mismatched shapes") {
    Tensor<double> x1({1, 2, 3}), mu({1, 2, 3}), mask({1, 3});
    FieldFn<double> field = [](Tape<double>& tape, const Tensor<double>& x,
                               const Tensor<double>&, double) {
        return constant(tape, x);
    };
    Tape<double> tape;
    CHECK_THROWS_AS(cfm_loss(tape, x1, mu, mask, field, 0, {}), TensorError);
    Tensor<double> bad({1, 3, 3});
    CHECK_THROWS_AS(cfm_loss(tape, x1, bad, mask, field, 0, {}), TensorError);
}

TEST_CASE("cfm_loss is non-negative and deterministic given the seed") {
    LossSetup s;
    FieldFn<double> field = [](Tape<double>& tape, const Tensor<double>&,
                               const Tensor<double>& m, double) {
        return constant(tape, m);
    };
    auto run = [&]() {
        Tape<double> tape;
        return cfm_loss(tape, s.x1, s.mu, s.mask, field, 123, {1e-4})->value.item();
    };
    double a = run(), b = run();
    CHECK(a == b);
    CHECK(a >= 0.0);
}

TEST_CASE("cfm_loss gradient w.r.t. field parameters passes grad_check") {
    LossSetup s;
    Param<double> theta;  // field v = theta broadcast per item
    theta.value = Tensor<double>::vec({0.3, -0.4, 0.9});
    auto build = [&](Tape<double>& tape, Ws<double>& ws) {
        FieldFn<double> field = [&](Tape<double>& t, const Tensor<double>& x,
                                    const Tensor<double>&, double) {
            return bcast_cols(ws(theta), x.cols());
        };
        return cfm_loss(tape, s.x1, s.mu, s.mask, field, 321, {1e-4});
    };
    auto eval = [&]() {
        Tape<double> tape;
        Ws<double> ws(tape);
        return build(tape, ws)->value.item();
    };
    auto analytic = [&]() {
        Tape<double> tape;
        Ws<double> ws(tape);
        auto loss = build(tape, ws);
        tape.backward(loss);
        return std::vector<Tensor<double>>{ws.grad_of(theta)};
    };
    auto rep = grad_check(eval, analytic, {&theta.value}, 1e-6, 1e-4);
    CHECK_MESSAGE(rep.pass, rep.worst, " err=", rep.max_rel_err);
}
