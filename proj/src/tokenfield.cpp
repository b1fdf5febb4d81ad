#include "srcflow/tokenfield.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "srcflow/rng.hpp"

namespace srcflow {

TokenField::TokenField(Eigen::Index tokens, Eigen::Index channels) : data_(Matrix::Zero(tokens, channels)) {
    if (tokens < 1 || channels < 1) throw Error("token field must have at least one token and one channel");
}

TokenField::TokenField(Matrix data) : data_(std::move(data)) {
    if (data_.rows() < 1 || data_.cols() < 1) throw Error("token field must have at least one token and one channel");
    if (!data_.allFinite()) throw NumericalError("token field holds a non-finite entry");
}

ChannelStats ChannelStats::identity(Eigen::Index channels) {
    return ChannelStats{Vector::Zero(channels), Vector::Ones(channels)};
}

void NoiseSpec::validate() const {
    if (!std::isfinite(sigma) || sigma < 0.0) throw Error("noise sigma must be finite and non-negative");
    if (mode == Mode::per_sample_uniform && sigma <= 0.0) throw Error("per-sample noise needs sigma_max > 0");
}

namespace {

// Pairwise reduction over fields keeps the summation order fixed and the
// rounding error logarithmic in the dataset size.
template <class Leaf>
Vector pairwise_sum(std::span<const TokenField> fields, Eigen::Index c, Leaf&& leaf) {
    if (fields.size() == 1) return leaf(fields.front());
    const auto half = fields.size() / 2;
    Vector left = pairwise_sum(fields.first(half), c, leaf);
    left += pairwise_sum(fields.subspan(half), c, leaf);
    return left;
}

void check_shape(const TokenField& f, const ChannelStats& s) {
    if (f.channels() != s.mu.size() || s.mu.size() != s.sigma.size()) throw Error("shape mismatch");
}

}  // namespace

ChannelStats compute_channel_stats(std::span<const TokenField> dataset) {
    if (dataset.empty()) throw Error("no data");
    const Eigen::Index c = dataset.front().channels();
    double count = 0.0;
    for (const auto& f : dataset) {
        if (f.channels() != c) throw Error("shape mismatch");
        count += static_cast<double>(f.tokens());
    }
    if (count < 2.0) throw Error("no data");

    const Vector mean =
        pairwise_sum(dataset, c, [](const TokenField& f) -> Vector { return f.data().colwise().sum().transpose(); }) /
        count;
    const Vector var = pairwise_sum(dataset, c,
                                    [&mean](const TokenField& f) -> Vector {
                                        return (f.data().rowwise() - mean.transpose())
                                            .array()
                                            .square()
                                            .colwise()
                                            .sum()
                                            .transpose();
                                    }) /
                       count;
    ChannelStats out{mean, var.array().sqrt().max(kSigmaFloor).matrix()};
    return out;
}

TokenField normalize(const TokenField& field, const ChannelStats& stats) {
    check_shape(field, stats);
    Matrix out = (field.data().rowwise() - stats.mu.transpose()).array().rowwise() / stats.sigma.transpose().array();
    return TokenField(std::move(out));
}

TokenField denormalize(const TokenField& field, const ChannelStats& stats) {
    check_shape(field, stats);
    Matrix out = field.data().array().rowwise() * stats.sigma.transpose().array();
    out.rowwise() += stats.mu.transpose();
    return TokenField(std::move(out));
}

TokenField add_noise(const TokenField& field, const NoiseSpec& spec, std::uint64_t seed) {
    spec.validate();
    if (spec.mode == NoiseSpec::Mode::none) return field;
    Rng rng(seed, 0x6e6f697365ULL);
    const double sigma = spec.mode == NoiseSpec::Mode::constant ? spec.sigma : rng.uniform(0.0, spec.sigma);
    Matrix out = field.data();
    for (Eigen::Index i = 0; i < out.size(); ++i) out.data()[i] += sigma * rng.normal();
    return TokenField(std::move(out));
}

Matrix pooled_covariance(std::span<const TokenField> dataset) {
    if (dataset.empty()) throw Error("insufficient data");
    const Eigen::Index c = dataset.front().channels();
    double count = 0.0;
    for (const auto& f : dataset) {
        if (f.channels() != c) throw Error("shape mismatch");
        count += static_cast<double>(f.tokens());
    }
    const Vector mean =
        pairwise_sum(dataset, c, [](const TokenField& f) -> Vector { return f.data().colwise().sum().transpose(); }) /
        count;
    // Column-stacked upper products; reshaped back below.
    const Vector flat = pairwise_sum(dataset, c * c, [&mean, c](const TokenField& f) -> Vector {
        const Matrix centered = f.data().rowwise() - mean.transpose();
        const Matrix prod = centered.transpose() * centered;
        return Eigen::Map<const Vector>(prod.data(), c * c);
    });
    return Eigen::Map<const Matrix>(flat.data(), c, c) / count;
}

SpectrumReport spectrum_of_covariance(const Matrix& covariance) {
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(covariance);
    if (solver.info() != Eigen::Success) throw Error("eigen-decomposition failed");
    const Eigen::Index c = covariance.rows();
    SpectrumReport r;
    r.eigenvalues = solver.eigenvalues().reverse().cwiseMax(0.0);
    r.cumulative_explained.resize(c);
    const double total = r.eigenvalues.sum();
    double acc = 0.0;
    for (Eigen::Index k = 0; k < c; ++k) {
        acc += r.eigenvalues(k);
        r.cumulative_explained(k) = total > 0.0 ? std::min(1.0, acc / total) : 1.0;
    }
    return r;
}

SpectrumReport pca_spectrum(std::span<const TokenField> dataset) {
    if (dataset.empty()) throw Error("insufficient data");
    Eigen::Index count = 0;
    for (const auto& f : dataset) count += f.tokens();
    if (count < dataset.front().channels() + 1) throw Error("insufficient data");
    return spectrum_of_covariance(pooled_covariance(dataset));
}

int intrinsic_dim(const SpectrumReport& report, double threshold) {
    if (!(threshold > 0.0 && threshold <= 1.0)) throw Error("threshold out of range");
    const auto& cum = report.cumulative_explained;
    for (Eigen::Index k = 0; k < cum.size(); ++k)
        if (cum(k) >= threshold) return static_cast<int>(k + 1);
    return static_cast<int>(cum.size());
}

}  // namespace srcflow
