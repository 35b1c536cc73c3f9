#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "phar/blocks.hpp"
#include "phar/gradcheck.hpp"

using namespace phar;

namespace {

void zero_branch(ParamStore& ps) {
    // conv weights/biases and BN gammas/betas to zero, emulating a dead branch
    for (auto& e : ps.entries()) {
        if (e.path.find("running_var") != std::string::npos) continue;
        if (e.path.find("running_mean") != std::string::npos) continue;
        std::fill(e.tensor.data(), e.tensor.data() + e.tensor.numel(), 0.0f);
    }
}

}  // namespace

TEST_CASE("residual block with zeroed branch reduces to ReLU(input)") {
    ParamStore ps;
    Rng rng(3);
    ResidualBlock block(ps, rng, "res", 4);
    zero_branch(ps);
    Rng drng(5);
    Tensor x = oracle::random_uniform(Shape(2, 4, 6, 6), drng, -1.0f, 1.0f);
    Tensor y = block(x, true);
    REQUIRE(y.shape() == x.shape());
    for (size_t i = 0; i < x.numel(); ++i)
        CHECK(y.data()[i] == std::max(0.0f, x.data()[i]));
}

TEST_CASE("residual block preserves spatial dims and rejects channel mismatch") {
    ParamStore ps;
    Rng rng(3);
    ResidualBlock block(ps, rng, "res", 4);
    Rng drng(6);
    for (auto [h, w] : {std::pair{1, 1}, std::pair{5, 3}, std::pair{8, 8}}) {
        Tensor x = oracle::random_uniform(Shape(1, 4, h, w), drng);
        CHECK(block(x, true).shape() == x.shape());
    }
    Tensor bad = oracle::random_uniform(Shape(1, 3, 4, 4), drng);
    CHECK_THROWS_AS(block(bad, true), Error);
}

TEST_CASE("residual block gradient flows through the skip path") {
    ParamStore ps;
    Rng rng(11);
    ResidualBlock block(ps, rng, "res", 3);
    // BN gamma small and beta positive keeps every ReLU input strictly
    // positive, i.e. the finite-difference probe sits at a non-kink point.
    for (auto& e : ps.entries()) {
        if (e.path.find(".gamma") != std::string::npos)
            std::fill(e.tensor.data(), e.tensor.data() + e.tensor.numel(), 0.05f);
        if (e.path.find(".beta") != std::string::npos)
            std::fill(e.tensor.data(), e.tensor.data() + e.tensor.numel(), 0.5f);
    }
    Rng drng(12);
    std::vector<Tensor> in{oracle::random_uniform(Shape(1, 3, 4, 4), drng, 0.2f, 1.0f)};
    Tensor probe(Shape(1, 3, 4, 4), 0.0f);
    for (size_t i = 0; i < probe.numel(); ++i) probe.data()[i] = (i % 3 == 1) ? -1.0f : 1.0f;
    auto f = [&](std::vector<Tensor>& v) { return sum(mul(block(v[0], true), probe)); };
    CHECK(grad_check(f, in) < 1e-3);
}

TEST_CASE("ds block halves extents per the shape formula") {
    ParamStore ps;
    Rng rng(7);
    DsBlock ds(ps, rng, "ds", 3, 8);
    Rng drng(8);
    CHECK(ds(oracle::random_uniform(Shape(1, 3, 256, 256), drng), true).shape() ==
          Shape(1, 8, 128, 128));
    CHECK(ds(oracle::random_uniform(Shape(1, 3, 2, 2), drng), true).shape() ==
          Shape(1, 8, 1, 1));
    // odd input follows floor((5+2-4)/2)+1
    CHECK(oracle::conv_out_extent(5, 4, 2, 1) == 2);
    CHECK(ds(oracle::random_uniform(Shape(1, 3, 5, 5), drng), true).shape() ==
          Shape(1, 8, 2, 2));
    CHECK_THROWS_AS(ds(oracle::random_uniform(Shape(1, 3, 1, 4), drng), true), Error);
}

TEST_CASE("us block doubles extents and round-trips with ds on even input") {
    ParamStore ps;
    Rng rng(9);
    DsBlock ds(ps, rng, "ds", 3, 6);
    UsBlock us(ps, rng, "us", 6, 3);
    Rng drng(10);
    CHECK(us(oracle::random_uniform(Shape(1, 6, 1, 1), drng), true).shape() ==
          Shape(1, 3, 2, 2));
    Tensor x = oracle::random_uniform(Shape(2, 3, 32, 48), drng);
    Tensor round = us(ds(x, true), true);
    CHECK(round.shape() == x.shape());
}

TEST_CASE("initialization respects the fan-in bound and the seed") {
    ParamStore a, b;
    Rng ra(42), rb(42);
    ConvLayer ca(a, ra, "conv", 8, 16, 3, 1, 1);
    ConvLayer cb(b, rb, "conv", 8, 16, 3, 1, 1);
    const float bound = kaiming_uniform_bound(8 * 3 * 3);
    CHECK(bound == doctest::Approx(std::sqrt(6.0f / 72.0f)));
    bool all_in_bound = true, any_outside_half = false;
    for (size_t i = 0; i < ca.weight.numel(); ++i) {
        const float v = ca.weight.data()[i];
        if (std::abs(v) > bound) all_in_bound = false;
        if (std::abs(v) > 0.5f * bound) any_outside_half = true;
        if (v != cb.weight.data()[i]) all_in_bound = false;  // same seed, same bits
    }
    CHECK(all_in_bound);
    CHECK(any_outside_half);  // actually spreads over the range
    for (size_t i = 0; i < ca.bias.numel(); ++i) CHECK(ca.bias.data()[i] == 0.0f);

    BatchNormLayer bn(a, "bn", 16);
    for (int c = 0; c < 16; ++c) {
        CHECK(bn.gamma.at(0, c, 0, 0) == 1.0f);
        CHECK(bn.beta.at(0, c, 0, 0) == 0.0f);
        CHECK(bn.running_mean.at(0, c, 0, 0) == 0.0f);
        CHECK(bn.running_var.at(0, c, 0, 0) == 1.0f);
    }
}

TEST_CASE("param store enforces unique paths and insertion order") {
    ParamStore ps;
    ps.add("b.w", Tensor(Shape(1, 1, 1, 1), 1.0f));
    ps.add("a.w", Tensor(Shape(1, 1, 1, 1), 2.0f));
    CHECK_THROWS_AS(ps.add("b.w", Tensor(Shape(1, 1, 1, 1), 0.0f)), Error);
    CHECK(ps.entries()[0].path == "b.w");
    CHECK(ps.entries()[1].path == "a.w");
    CHECK(ps.entries()[0].adam_m.size() == 1);
}

TEST_CASE("adam behaves like the scalar reference") {
    // reference implementation, plain doubles
    auto ref_adam = [](double& w, double g, double& m, double& v, int t, double lr, double b1,
                       double b2, double eps) {
        m = b1 * m + (1 - b1) * g;
        v = b2 * v + (1 - b2) * g * g;
        const double mh = m / (1 - std::pow(b1, t));
        const double vh = v / (1 - std::pow(b2, t));
        w -= lr * mh / (std::sqrt(vh) + eps);
    };

    SUBCASE("zero gradient leaves parameters unchanged") {
        ParamStore ps;
        Tensor w = ps.add("w", Tensor(Shape(1, 1, 1, 1), 1.5f));
        w.ensure_grad();
        adam_step(ps, 0.1f);
        CHECK(ps.at("w").item() == 1.5f);
    }
    SUBCASE("first step moves by about -lr * sign(g)") {
        ParamStore ps;
        Tensor w = ps.add("w", Tensor(Shape(1, 1, 1, 1), 0.7f));
        w.ensure_grad();
        w.grad()[0] = 0.03f;
        adam_step(ps, 0.01f);
        CHECK(ps.at("w").item() == doctest::Approx(0.7f - 0.01f).epsilon(1e-3));
    }
    SUBCASE("10 steps on (w-3)^2 move monotonically toward 3") {
        ParamStore ps;
        Tensor w = ps.add("w", Tensor(Shape(1, 1, 1, 1), 0.0f));
        double rw = 0.0, rm = 0.0, rv = 0.0;
        float prev = 0.0f;
        for (int t = 1; t <= 10; ++t) {
            const float g = 2.0f * (ps.at("w").item() - 3.0f);
            w.ensure_grad();
            w.grad()[0] = g;
            adam_step(ps, 0.1f, 0.9f, 0.999f, 1e-8f);
            ref_adam(rw, 2.0 * (rw - 3.0), rm, rv, t, 0.1, 0.9, 0.999, 1e-8);
            CHECK(ps.at("w").item() > prev);
            CHECK(ps.at("w").item() < 3.0f);
            CHECK(ps.at("w").item() == doctest::Approx(rw).epsilon(1e-4));
            prev = ps.at("w").item();
        }
    }
    SUBCASE("missing gradient is a structured error") {
        ParamStore ps;
        ps.add("w", Tensor(Shape(1, 1, 1, 1), 1.0f));
        CHECK_THROWS_WITH_AS(adam_step(ps, 0.1f), doctest::Contains("no gradient"), Error);
    }
}

TEST_CASE("blocks are pure given fixed params, mode and running stats") {
    ParamStore ps;
    Rng rng(13);
    DsBlock ds(ps, rng, "ds", 3, 4);
    Rng drng(14);
    Tensor x = oracle::random_uniform(Shape(1, 3, 8, 8), drng);
    Tensor y1 = ds(x, false);
    Tensor y2 = ds(x, false);
    for (size_t i = 0; i < y1.numel(); ++i) CHECK(y1.data()[i] == y2.data()[i]);
}
