#include <doctest.h>

#include <cmath>
#include <vector>

#include "oracles.hpp"
#include "srcflow/rng.hpp"
#include "srcflow/tokenfield.hpp"

using namespace srcflow;

namespace {

TokenField random_field(Eigen::Index n, Eigen::Index c, Rng& rng, double scale = 1.0, double shift = 0.0) {
    TokenField f(n, c);
    for (Eigen::Index i = 0; i < f.data().size(); ++i) f.data().data()[i] = shift + scale * rng.normal();
    return f;
}

}  // namespace

TEST_CASE("TokenField rejects empty and non-finite data") {
    CHECK_THROWS_AS(TokenField(Matrix(0, 3)), Error);
    Matrix m = Matrix::Zero(2, 2);
    m(1, 1) = std::nan("");
    CHECK_THROWS_AS(TokenField{m}, Error);
    m(1, 1) = INFINITY;
    CHECK_THROWS_AS(TokenField{m}, Error);
}

TEST_CASE("channel stats of all-zero fields engage the sigma floor") {
    const std::vector<TokenField> data(3, TokenField(Matrix::Zero(4, 2)));
    const auto s = compute_channel_stats(data);
    CHECK(s.mu.isZero(0.0));
    CHECK(s.sigma(0) == doctest::Approx(kSigmaFloor));
    CHECK(s.sigma(1) == doctest::Approx(kSigmaFloor));
}

TEST_CASE("channel stats of a symmetric two-point set") {
    Matrix m(2, 3);
    m << -1, -1, -1, 1, 1, 1;
    const std::vector<TokenField> data{TokenField(m)};
    const auto s = compute_channel_stats(data);
    for (int j = 0; j < 3; ++j) {
        CHECK(s.mu(j) == doctest::Approx(0.0));
        CHECK(s.sigma(j) == doctest::Approx(1.0));
    }
}

TEST_CASE("channel stats match a two-pass reference") {
    Rng rng(11);
    std::vector<TokenField> data;
    std::vector<std::vector<double>> rows;
    for (int e = 0; e < 50; ++e) {
        data.push_back(random_field(20, 5, rng, 3.0, 7.0));
        for (int i = 0; i < 20; ++i) {
            std::vector<double> r(5);
            for (int j = 0; j < 5; ++j) r[j] = data.back()(i, j);
            rows.push_back(r);
        }
    }
    const auto s = compute_channel_stats(data);
    const auto [mean, sd] = oracle::two_pass_stats(rows);
    for (int j = 0; j < 5; ++j) {
        CHECK(std::abs(s.mu(j) - mean[j]) <= 1e-10 * std::abs(mean[j]));
        CHECK(std::abs(s.sigma(j) - sd[j]) <= 1e-10 * sd[j]);
    }
}

TEST_CASE("normalize and denormalize") {
    ChannelStats s{Vector::Constant(1, 0.0), Vector::Constant(1, 2.0)};
    TokenField four(Matrix::Constant(1, 1, 4.0));
    CHECK(normalize(four, s)(0, 0) == 2.0);
    TokenField two(Matrix::Constant(1, 1, 2.0));
    CHECK(denormalize(two, s)(0, 0) == 4.0);

    ChannelStats t{Vector::LinSpaced(3, -1.0, 2.0), Vector::LinSpaced(3, 0.5, 3.0)};
    Matrix at_mu(2, 3);
    at_mu.rowwise() = t.mu.transpose();
    CHECK(normalize(TokenField(at_mu), t).data().isZero(0.0));
    CHECK(denormalize(TokenField(Matrix::Zero(2, 3)), t) == TokenField(at_mu));

    Rng rng(5);
    const auto x = random_field(6, 3, rng, 4.0);
    const auto back = denormalize(normalize(x, t), t);
    CHECK(((back.data() - x.data()).cwiseAbs().array() <= 1e-5 * (1.0 + x.data().cwiseAbs().array())).all());
}

TEST_CASE("add_noise") {
    Rng rng(3);
    const auto x = random_field(100, 10, rng);
    CHECK(add_noise(x, NoiseSpec::none(), 1) == x);

    SUBCASE("constant sigma variance") {
        TokenField big(1000, 100);
        const auto y = add_noise(big, NoiseSpec::constant(0.4), 42);
        const double var = y.data().squaredNorm() / static_cast<double>(y.data().size());
        CHECK(std::abs(var / 0.16 - 1.0) < 0.05);
        CHECK(add_noise(big, NoiseSpec::constant(0.4), 42) == y);
        CHECK_FALSE(add_noise(big, NoiseSpec::constant(0.4), 43) == y);
    }
    SUBCASE("per-sample sigma varies across examples") {
        TokenField z(16, 16);
        double lo = INFINITY, hi = 0.0;
        for (int e = 0; e < 100; ++e) {
            const auto y = add_noise(z, NoiseSpec::per_sample_uniform(0.8), Rng::derive(9, e));
            const double v = y.data().squaredNorm() / 256.0;
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        CHECK(hi / lo > 2.0);
    }
    SUBCASE("invalid specs") {
        CHECK_THROWS_AS(add_noise(x, NoiseSpec::constant(-1.0), 1), Error);
        CHECK_THROWS_AS(add_noise(x, NoiseSpec::constant(NAN), 1), Error);
    }
}

TEST_CASE("pca spectrum") {
    SUBCASE("analytic diag(4,1)") {
        Matrix cov = Matrix::Zero(2, 2);
        cov(0, 0) = 4;
        cov(1, 1) = 1;
        const auto r = spectrum_of_covariance(cov);
        CHECK(r.cumulative_explained(0) == doctest::Approx(0.8).epsilon(1e-6));
        CHECK(r.cumulative_explained(1) == doctest::Approx(1.0).epsilon(1e-6));
        CHECK(intrinsic_dim(r, 0.9) == 2);
        CHECK(intrinsic_dim(r, 0.8) == 1);
    }
    SUBCASE("rank one") {
        Rng rng(8);
        std::vector<TokenField> data;
        for (int e = 0; e < 20; ++e) {
            TokenField f(10, 4);
            for (int i = 0; i < 10; ++i) {
                const double a = rng.normal();
                f(i, 0) = a;
                f(i, 1) = -2 * a;
                f(i, 2) = 0.5 * a;
                f(i, 3) = a;
            }
            data.push_back(f);
        }
        const auto r = pca_spectrum(data);
        CHECK(r.cumulative_explained(0) == doctest::Approx(1.0).epsilon(1e-6));
        CHECK(intrinsic_dim(r, 0.99) == 1);
    }
    SUBCASE("isotropic") {
        Rng rng(12);
        std::vector<TokenField> data;
        for (int e = 0; e < 100; ++e) data.push_back(random_field(100, 5, rng));
        const auto r = pca_spectrum(data);
        for (int k = 0; k < 5; ++k) CHECK(std::abs(r.cumulative_explained(k) - (k + 1) / 5.0) < 0.01);
        for (int k = 1; k < 5; ++k) CHECK(r.eigenvalues(k) <= r.eigenvalues(k - 1));
    }
    SUBCASE("uniform spectrum threshold") {
        const auto r = spectrum_of_covariance(Matrix::Identity(10, 10));
        CHECK(intrinsic_dim(r, 0.5) == 5);
    }
    SUBCASE("matches the Jacobi oracle") {
        Rng rng(13);
        std::vector<TokenField> data;
        std::vector<std::vector<double>> rows;
        Matrix mix = Matrix::Random(4, 4);
        for (int e = 0; e < 30; ++e) {
            TokenField f(Matrix(random_field(10, 4, rng).data() * mix));
            for (int i = 0; i < 10; ++i) rows.push_back({f(i, 0), f(i, 1), f(i, 2), f(i, 3)});
            data.push_back(f);
        }
        const auto r = pca_spectrum(data);
        const auto ref = oracle::jacobi_eigen(oracle::covariance(rows));
        for (int k = 0; k < 4; ++k) CHECK(r.eigenvalues(k) == doctest::Approx(ref.values[k]).epsilon(1e-9));
    }
    CHECK_THROWS_AS(intrinsic_dim(spectrum_of_covariance(Matrix::Identity(2, 2)), 0.0), Error);
}
