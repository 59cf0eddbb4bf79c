#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "matcha/align.hpp"
#include "matcha/gradcheck.hpp"
#include "matcha/rng.hpp"
#include "matcha/verify.hpp"

#include <cmath>

using namespace matcha;

TEST_CASE("log_prior_matrix at mu == frame is -C/2 log(2 pi)") {
    Tensor<double> frames({1, 1}, {0.7});
    Tensor<double> mu({1, 1}, {0.7});
    Tensor<double> lp = log_prior_matrix(frames, mu);
    CHECK(lp(0, 0) == doctest::Approx(-0.5 * kLog2Pi).epsilon(1e-12));
    CHECK(lp(0, 0) == doctest::Approx(-0.9189385332046727).epsilon(1e-12));
}

TEST_CASE("log_prior_matrix drops quadratically with distance") {
    Tensor<double> frames({2, 1}, {1.0, 2.0});
    Tensor<double> mu({2, 2}, {1.0, 4.0, 2.0, 2.0});  // token 0 = frame, token 1 = (4,2)
    Tensor<double> lp = log_prior_matrix(frames, mu);
    CHECK(lp(0, 0) == doctest::Approx(-kLog2Pi).epsilon(1e-12));
    CHECK(lp(0, 0) - lp(1, 0) == doctest::Approx(0.5 * 9.0).epsilon(1e-12));
}

TEST_CASE("mas picks the obvious diagonal on a 2x2 example") {
    Tensor<double> ll = Tensor<double>::from_rows({{0, -10}, {-10, 0}});
    AlignmentPath p = mas(ll);
    CHECK(p.frame_to_token == std::vector<std::size_t>{0, 1});
}

TEST_CASE("mas with one token assigns every frame to it") {
    Tensor<double> ll({1, 5}, {0.1, -2, 3, 0, 1});
    AlignmentPath p = mas(ll);
    CHECK(p.frame_to_token == std::vector<std::size_t>(5, 0));
}

TEST_CASE("mas rejects T < N and non-finite scores") {
    CHECK_THROWS_AS(mas(Tensor<double>({3, 2})), TensorError);
    Tensor<double> bad({2, 3});
    bad(1, 1) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(mas(bad), TensorError);
}

TEST_CASE("mas is invariant to a constant shift of the scores") {
    Rng rng(31);
    Tensor<double> ll({4, 9});
    for (auto& v : ll.data) v = rng.uniform(-3, 3);
    AlignmentPath a = mas(ll);
    for (auto& v : ll.data) v += 17.5;
    AlignmentPath b = mas(ll);
    CHECK(a.frame_to_token == b.frame_to_token);
}

TEST_CASE("mas matches brute-force enumeration on random instances") {
    VerifyResult r = verify_mas_suite();
    CHECK_MESSAGE(r.pass, r.message);
}

TEST_CASE("durations partition the frames") {
    AlignmentPath p{{0, 0, 1, 2, 2, 2}};
    Durations d = durations_from_path(p);
    CHECK(d.d == std::vector<std::size_t>{2, 1, 3});
    CHECK(d.total() == p.n_frames());
}

TEST_CASE("path validation rejects skips and wrong starts") {
    CHECK_THROWS_AS((AlignmentPath{{1, 2}}.validate()), TensorError);
    CHECK_THROWS_AS((AlignmentPath{{0, 2}}.validate()), TensorError);
    CHECK_THROWS_AS((AlignmentPath{{0, 1, 0}}.validate()), TensorError);
    CHECK_NOTHROW((AlignmentPath{{0, 1, 1, 2}}.validate()));
}

TEST_CASE("prior_loss at mu == frames equals half log(2 pi)") {
    Tape<double> tape;
    Tensor<double> frames({3, 4});
    Rng rng(33);
    for (auto& v : frames.data) v = rng.normal();
    Var<double> mu = constant(tape, frames);
    double got = prior_loss(tape, frames, mu)->value.item();
    CHECK(got == doctest::Approx(0.5 * kLog2Pi).epsilon(1e-12));
}

TEST_CASE("prior_loss grows with the squared residual") {
    Tape<double> tape;
    Tensor<double> frames({2, 2});
    Tensor<double> off = Tensor<double>::full({2, 2}, 0.5);
    double base = prior_loss(tape, frames, constant(tape, frames))->value.item();
    double moved = prior_loss(tape, frames, constant(tape, off))->value.item();
    CHECK(moved - base == doctest::Approx(0.5 * 0.25).epsilon(1e-12));
}

TEST_CASE("prior_loss ignores masked-out frames") {
    Tape<double> tape;
    Rng rng(34);
    Tensor<double> frames({3, 5});
    for (auto& v : frames.data) v = rng.normal();
    Tensor<double> muv = frames;
    // corrupt the masked tail; the loss must not see it
    for (std::size_t c = 0; c < 3; ++c) muv(c, 3) = muv(c, 4) = 1e6;
    Tensor<double> mask({5}, {1, 1, 1, 0, 0});
    double got = prior_loss(tape, frames, constant(tape, muv), &mask)->value.item();
    CHECK(got == doctest::Approx(0.5 * kLog2Pi).epsilon(1e-12));

    Tensor<double> empty({5});
    CHECK_THROWS_AS(prior_loss(tape, frames, constant(tape, muv), &empty), TensorError);
}

TEST_CASE("duration_loss is ~zero when predictions equal log targets") {
    Tape<double> tape;
    Durations d{{3, 7}};
    Tensor<double> pred({2}, {std::log(3.0 + 1e-8), std::log(7.0 + 1e-8)});
    double got = duration_loss(tape, constant(tape, pred), d)->value.item();
    CHECK(got <= 1e-24);
}

TEST_CASE("duration_loss matches a hand-computed value") {
    Tape<double> tape;
    Durations d{{3, 7}};
    Tensor<double> pred({2}, {1.0, 2.0});
    double got = duration_loss(tape, constant(tape, pred), d)->value.item();
    double e0 = 1.0 - std::log(3.0 + 1e-8), e1 = 2.0 - std::log(7.0 + 1e-8);
    CHECK(got == doctest::Approx((e0 * e0 + e1 * e1) / 2.0).epsilon(1e-12));
}

TEST_CASE("duration_loss rejects length mismatch and zero durations") {
    Tape<double> tape;
    Tensor<double> pred({2});
    CHECK_THROWS_AS(duration_loss(tape, constant(tape, pred), Durations{{1, 2, 3}}),
                    TensorError);
    CHECK_THROWS_AS(duration_loss(tape, constant(tape, pred), Durations{{0, 2}}),
                    TensorError);
}

TEST_CASE("upsample duplicates columns by duration") {
    Tensor<double> tok = Tensor<double>::from_rows({{1, 2}, {10, 20}});
    Tensor<double> up = upsample_by_durations(tok, Durations{{2, 1}});
    CHECK(up.shape == Shape{2, 3});
    CHECK(up(0, 0) == 1);
    CHECK(up(0, 1) == 1);
    CHECK(up(0, 2) == 2);
    CHECK(up(1, 2) == 20);
}

TEST_CASE("upsample with unit durations is the identity") {
    Rng rng(35);
    Tensor<double> tok({4, 3});
    for (auto& v : tok.data) v = rng.normal();
    Tensor<double> up = upsample_by_durations(tok, Durations{{1, 1, 1}});
    CHECK(up.data == tok.data);
}

TEST_CASE("upsample rejects durations below 1") {
    Tensor<double> tok({2, 2});
    CHECK_THROWS_AS(upsample_by_durations(tok, Durations{{1, 0}}), TensorError);
}

TEST_CASE("averaging per token inverts the upsample") {
    Rng rng(36);
    Tensor<double> tok({3, 4});
    for (auto& v : tok.data) v = rng.normal();
    Durations d{{2, 1, 4, 3}};
    Tensor<double> up = upsample_by_durations(tok, d);
    std::size_t j = 0;
    for (std::size_t i = 0; i < 4; ++i) {
        for (std::size_t c = 0; c < 3; ++c) {
            double mean = 0;
            for (std::size_t k = 0; k < d.d[i]; ++k) mean += up(c, j + k);
            mean /= (double)d.d[i];
            CHECK(mean == doctest::Approx(tok(c, i)).epsilon(1e-12));
        }
        j += d.d[i];
    }
}

TEST_CASE("prior_loss gradient w.r.t. mu passes grad_check") {
    Rng rng(37);
    Tensor<double> frames({3, 5}), muv({3, 5});
    for (auto& v : frames.data) v = rng.normal();
    for (auto& v : muv.data) v = rng.normal();
    Tensor<double> mask({5}, {1, 1, 1, 1, 0});

    auto eval = [&]() {
        Tape<double> tape;
        return prior_loss(tape, frames, tape.leaf(muv, true), &mask)->value.item();
    };
    auto analytic = [&]() {
        Tape<double> tape;
        auto mu = tape.leaf(muv, true);
        tape.backward(prior_loss(tape, frames, mu, &mask));
        return std::vector<Tensor<double>>{mu->grad};
    };
    auto rep = grad_check(eval, analytic, {&muv}, 1e-6, 1e-5);
    CHECK_MESSAGE(rep.pass, rep.worst, " err=", rep.max_rel_err);
}

TEST_CASE("duration and upsample gradients pass grad_check") {
    Rng rng(38);
    Tensor<double> pred({4});
    for (auto& v : pred.data) v = rng.normal();
    Durations d{{2, 1, 3, 2}};

    auto eval = [&]() {
        Tape<double> tape;
        return duration_loss(tape, tape.leaf(pred, true), d)->value.item();
    };
    auto analytic = [&]() {
        Tape<double> tape;
        auto p = tape.leaf(pred, true);
        tape.backward(duration_loss(tape, p, d));
        return std::vector<Tensor<double>>{p->grad};
    };
    CHECK(grad_check(eval, analytic, {&pred}, 1e-6, 1e-5).pass);

    Tensor<double> tok({2, 4});
    for (auto& v : tok.data) v = rng.normal();
    auto eval2 = [&]() {
        Tape<double> tape;
        auto up = upsample_by_durations(tape.leaf(tok, true), d);
        return sum_all(mul(up, up))->value.item();
    };
    auto analytic2 = [&]() {
        Tape<double> tape;
        auto t = tape.leaf(tok, true);
        auto up = upsample_by_durations(t, d);
        tape.backward(sum_all(mul(up, up)));
        return std::vector<Tensor<double>>{t->grad};
    };
    CHECK(grad_check(eval2, analytic2, {&tok}, 1e-6, 1e-5).pass);
}

TEST_CASE("alignment_dump emits one frame per line") {
    AlignmentPath p{{0, 0, 1}};
    CHECK(alignment_dump(p) == "0 0\n1 0\n2 1\n");
}
