#include <doctest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "srcflow/flow.hpp"
#include "srcflow/rng.hpp"

using namespace srcflow;

namespace {

TokenField random_field(Eigen::Index n, Eigen::Index c, std::uint64_t seed) {
    Rng rng(seed);
    TokenField f(n, c);
    for (Eigen::Index i = 0; i < f.data().size(); ++i) f.data().data()[i] = rng.normal();
    return f;
}

FlowConfig tiny(int blocks, int tokens, int channels) {
    FlowConfig c;
    c.blocks = blocks;
    c.shallow_layers = 1;
    c.deep_layers = 1;
    c.width = 8;
    c.heads = 2;
    c.mlp_ratio = 2;
    c.tokens = tokens;
    c.channels = channels;
    c.num_classes = 3;
    return c;
}

}  // namespace

TEST_CASE("affine transform") {
    CHECK(affine_forward(3, 0, 0) == 3);
    CHECK(affine_forward(3, 1, std::log(2.0)) == doctest::Approx(1.0));
    CHECK(affine_inverse(1, 1, std::log(2.0)) == doctest::Approx(3.0));
    CHECK(affine_inverse(0, -2.5, 1.7) == -2.5);
    Rng rng(1);
    for (int i = 0; i < 100; ++i) {
        const double y = rng.normal() * 3, mu = rng.normal(), alpha = rng.uniform(-3, 3);
        CHECK(std::abs(affine_inverse(affine_forward(y, mu, alpha), mu, alpha) - y) <= 1e-12);
    }
}

TEST_CASE("config validation") {
    CHECK_NOTHROW(tiny(2, 4, 2).validate());
    auto c = tiny(2, 4, 2);
    c.blocks = 0;
    CHECK_THROWS_AS(c.validate(), Error);
    c = tiny(2, 4, 2);
    c.deep_layers = 0;
    CHECK_THROWS_AS(c.validate(), Error);
    c = tiny(2, 4, 2);
    c.label_drop_p = 1.0;
    CHECK_THROWS_AS(c.validate(), Error);
    c = tiny(2, 4, 2);
    c.alpha_clamp = 0.0;
    CHECK_THROWS_AS(c.validate(), Error);
    c = tiny(2, 4, 2);
    CHECK(c.embedding_row(kNullLabel) == 3);
    CHECK(c.embedding_row(1) == 1);
    CHECK_THROWS_AS(c.embedding_row(3), Error);
}

TEST_CASE("cfg_combine") {
    AffineParams cond{Matrix::Constant(2, 2, 2.0), Matrix::Constant(2, 2, 0.5)};
    AffineParams uncond{Matrix::Constant(2, 2, 1.0), Matrix::Constant(2, 2, 0.25)};
    const auto same = cfg_combine(cond, uncond, 0.0, 8.0);
    CHECK(same.mu == cond.mu);
    CHECK(same.alpha == cond.alpha);
    const auto g = cfg_combine(cond, uncond, 1.0, 8.0);
    CHECK(g.mu(0, 0) == 3.0);
    CHECK(g.alpha(1, 1) == 0.75);
    const auto eq = cfg_combine(cond, cond, 3.7, 8.0);
    CHECK(eq.mu == cond.mu);
    CHECK(eq.alpha == cond.alpha);
    const auto clamped = cfg_combine(cond, uncond, 100.0, 8.0);
    CHECK(clamped.alpha.maxCoeff() == 8.0);
}

TEST_CASE("zero-initialized flow is the identity") {
    const auto model = init_flow<double>(tiny(6, 4, 3), FlowInit::zero_head, 2);
    const auto y = random_field(4, 3, 3);
    const auto f = flow_forward(y, 1, model);
    CHECK(f.u == y);
    CHECK(f.logdet == 0.0);
    CHECK(flow_inverse(y, 1, GuidanceSpec{}, model) == y);
    CHECK(nll(y, 1, model) == doctest::Approx(0.5 * y.data().squaredNorm()).epsilon(1e-14));
    const auto p = block_params(y, kNullLabel, 0, model);
    CHECK(p.mu.isZero(0.0));
    CHECK(p.alpha.isZero(0.0));
}

TEST_CASE("single block with constant head output") {
    auto model = init_flow<double>(tiny(1, 1, 1), FlowInit::zero_head, 4);
    auto& b = model.params.at("b0.head.b");
    b(0, 0) = 1.0;
    b(0, 1) = 8.0 * std::atanh(std::log(2.0) / 8.0);
    const auto f = flow_forward(TokenField(Matrix::Constant(1, 1, 3.0)), 0, model);
    CHECK(f.u(0, 0) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(f.logdet == doctest::Approx(-std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("block parameters are causal") {
    const auto model = init_flow<double>(tiny(2, 5, 2), FlowInit::random, 5, 0.5);
    const auto y = random_field(5, 2, 6);
    for (int block = 0; block < 2; ++block) {
        const auto base = block_params(y, 1, block, model);
        for (int j = 0; j < 5; ++j) {
            auto moved = y;
            moved(j, 0) += 1.5;
            moved(j, 1) -= 0.7;
            const auto p = block_params(moved, 1, block, model);
            CHECK(p.mu.topRows(j + 1) == base.mu.topRows(j + 1));
            CHECK(p.alpha.topRows(j + 1) == base.alpha.topRows(j + 1));
            if (j < 4) CHECK(p.mu.bottomRows(4 - j) != base.mu.bottomRows(4 - j));
        }
        const auto other = block_params(random_field(5, 2, 7), 1, block, model);
        CHECK(other.mu.row(0) == base.mu.row(0));
        const auto relabeled = block_params(y, 2, block, model);
        CHECK(relabeled.mu.row(0) != base.mu.row(0));
        CHECK(base.alpha.cwiseAbs().maxCoeff() <= model.config.alpha_clamp);
    }
}

TEST_CASE("random flow round-trips") {
    const auto model = init_flow<double>(tiny(3, 4, 2), FlowInit::random, 8, 0.5);
    for (int t = 0; t < 5; ++t) {
        const auto y = random_field(4, 2, 100 + t);
        const auto u = flow_forward(y, t % 3, model).u;
        const auto back = flow_inverse(u, t % 3, GuidanceSpec{}, model);
        CHECK((back.data() - y.data()).cwiseAbs().maxCoeff() < 1e-8);
    }
    const auto m32 = model.cast<float>();
    const auto y = random_field(4, 2, 9);
    const auto back = flow_inverse(flow_forward(y, 0, m32).u, 0, GuidanceSpec{}, m32);
    CHECK((back.data() - y.data()).cwiseAbs().maxCoeff() < 1e-3);
}

TEST_CASE("batched forward matches single fields") {
    const auto model = init_flow<double>(tiny(2, 3, 2), FlowInit::random, 10, 0.5);
    std::vector<TokenField> ys{random_field(3, 2, 11), random_field(3, 2, 12)};
    const std::vector<int> labels{0, kNullLabel};
    const auto batch = flow_forward_batch<double>(ys, labels, model);
    for (std::size_t i = 0; i < ys.size(); ++i) {
        const auto one = flow_forward(ys[i], labels[i], model);
        CHECK((batch[i].u.data() - one.u.data()).cwiseAbs().maxCoeff() < 1e-12);
        CHECK(batch[i].logdet == doctest::Approx(one.logdet).epsilon(1e-12));
    }
}

TEST_CASE("guidance at w = 0 matches the unguided path bit for bit") {
    const auto model = init_flow<double>(tiny(2, 3, 2), FlowInit::random, 13, 0.5);
    std::vector<TokenField> us{random_field(3, 2, 14), random_field(3, 2, 15)};
    const std::vector<int> labels{1, 2};
    const auto plain = flow_inverse_batch<double>(us, labels, GuidanceSpec{0.0}, model);
    const auto guided = flow_inverse_batch_guided<double>(us, labels, GuidanceSpec{0.0}, model);
    for (std::size_t i = 0; i < us.size(); ++i) CHECK(plain[i] == guided[i]);
    const auto strong = flow_inverse_batch<double>(us, labels, GuidanceSpec{2.0}, model);
    CHECK_FALSE(strong[0] == plain[0]);
}

TEST_CASE("nll adds the Gaussian constant consistently") {
    CHECK(gaussian_constant(4, 2) == doctest::Approx(8 * 0.5 * std::log(2 * std::numbers::pi)));
    const auto model = init_flow<double>(tiny(2, 3, 2), FlowInit::random, 16, 0.5);
    const auto y = random_field(3, 2, 17);
    const auto f = flow_forward(y, 0, model);
    CHECK(nll(y, 0, model) == doctest::Approx(0.5 * f.u.data().squaredNorm() - f.logdet).epsilon(1e-12));
}

TEST_CASE("non-finite outputs raise NumericalError") {
    auto model = init_flow<double>(tiny(1, 1, 1), FlowInit::zero_head, 18);
    model.params.at("b0.head.b")(0, 1) = -1e6;
    CHECK_THROWS_AS(flow_forward(TokenField(Matrix::Constant(1, 1, 1e306)), 0, model), NumericalError);
}
