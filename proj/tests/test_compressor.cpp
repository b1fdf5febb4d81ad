#include <doctest.h>

#include <vector>

#include "oracles.hpp"
#include "srcflow/compressor.hpp"
#include "srcflow/rng.hpp"

using namespace srcflow;

namespace {

TokenField random_field(Eigen::Index n, Eigen::Index c, std::uint64_t seed) {
    Rng rng(seed);
    TokenField f(n, c);
    for (Eigen::Index i = 0; i < f.data().size(); ++i) f.data().data()[i] = rng.normal();
    return f;
}

SrcConfig small_config(int n, int d) {
    SrcConfig c;
    c.n = n;
    c.d = d;
    c.layers = 1;
    c.heads = 2;
    c.mlp_ratio = 2;
    c.tokens = 6;
    return c;
}

}  // namespace

TEST_CASE("config validation") {
    CHECK_NOTHROW(small_config(8, 4).validate());
    CHECK_THROWS_AS(small_config(8, 9).validate(), Error);
    CHECK_THROWS_AS(small_config(8, 0).validate(), Error);
    auto c = small_config(8, 4);
    c.heads = 3;
    CHECK_THROWS_AS(c.validate(), Error);
    c = small_config(8, 4);
    c.layers = 0;
    CHECK_THROWS_AS(c.validate(), Error);
}

TEST_CASE("identity init encodes to the leading channel slice") {
    const auto src = init_src<double>(small_config(8, 3), SrcInit::identity, 1);
    const auto z = random_field(5, 8, 2);
    const auto zc = src_encode(z, src);
    REQUIRE(zc.channels() == 3);
    CHECK(zc.data() == z.data().leftCols(3));
}

TEST_CASE("identity init with d = n round-trips exactly") {
    const auto src = init_src<double>(small_config(8, 8), SrcInit::identity, 1);
    const auto z = random_field(6, 8, 3);
    CHECK(src_decode(src_encode(z, src), src) == z);
}

TEST_CASE("output shapes hold for any token count") {
    const auto src = init_src<double>(small_config(8, 3), SrcInit::random_full, 4);
    for (int n : {1, 4, 6}) {
        const auto zc = src_encode(random_field(n, 8, 5), src);
        CHECK(zc.tokens() == n);
        CHECK(zc.channels() == 3);
        const auto zh = src_decode(zc, src);
        CHECK(zh.tokens() == n);
        CHECK(zh.channels() == 8);
        CHECK(zh.is_finite());
    }
    CHECK_THROWS_AS(src_encode(random_field(7, 8, 5), src), Error);
    CHECK_THROWS_AS(src_encode(random_field(4, 5, 5), src), Error);
}

TEST_CASE("batched and single-field paths agree") {
    const auto src = init_src<double>(small_config(8, 3), SrcInit::random_full, 6);
    std::vector<TokenField> zs{random_field(4, 8, 7), random_field(4, 8, 8), random_field(4, 8, 9)};
    const auto enc = src_encode_batch<double>(zs, src);
    for (std::size_t i = 0; i < zs.size(); ++i) {
        const auto one = src_encode(zs[i], src);
        CHECK((enc[i].data() - one.data()).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("float and double parameters agree") {
    const auto src = init_src<double>(small_config(8, 3), SrcInit::random_full, 10);
    const auto z = random_field(6, 8, 11);
    const auto a = src_encode(z, src);
    const auto b = src_encode(z, src.cast<float>());
    CHECK((a.data() - b.data()).cwiseAbs().maxCoeff() < 1e-4);
}

TEST_CASE("seeded init is reproducible") {
    const auto a = init_src<double>(small_config(8, 3), SrcInit::random, 12);
    const auto b = init_src<double>(small_config(8, 3), SrcInit::random, 12);
    const auto c = init_src<double>(small_config(8, 3), SrcInit::random, 13);
    bool same = true, differs = false;
    for (std::size_t i = 0; i < a.params.size(); ++i) {
        same = same && a.params.entries()[i].value == b.params.entries()[i].value;
        differs = differs || a.params.entries()[i].value != c.params.entries()[i].value;
    }
    CHECK(same);
    CHECK(differs);
    CHECK(a.params.all_finite());
}

TEST_CASE("src_loss") {
    const auto z = random_field(3, 4, 14);
    CHECK(src_loss(z, z) == 0.0);
    CHECK(src_loss(TokenField(Matrix::Zero(3, 4)), TokenField(Matrix::Ones(3, 4))) == 1.0);
    const auto zh = random_field(3, 4, 15);
    const std::vector<double> a(z.data().data(), z.data().data() + 12), b(zh.data().data(), zh.data().data() + 12);
    CHECK(std::abs(src_loss(z, zh) - oracle::brute_mse(a, b)) <= 1e-10);
    CHECK_THROWS_AS(src_loss(z, random_field(3, 5, 1)), Error);
}
