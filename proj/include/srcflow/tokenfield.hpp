#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <span>
#include <vector>

#include "srcflow/error.hpp"

namespace srcflow {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

/// N x c matrix of spatial tokens: one row per token, one column per channel.
class TokenField {
public:
    TokenField() = default;
    TokenField(Eigen::Index tokens, Eigen::Index channels);
    /// Throws if the matrix is empty or holds a non-finite entry.
    explicit TokenField(Matrix data);

    Eigen::Index tokens() const noexcept { return data_.rows(); }
    Eigen::Index channels() const noexcept { return data_.cols(); }

    const Matrix& data() const noexcept { return data_; }
    Matrix& data() noexcept { return data_; }

    double operator()(Eigen::Index i, Eigen::Index j) const { return data_(i, j); }
    double& operator()(Eigen::Index i, Eigen::Index j) { return data_(i, j); }

    bool is_finite() const { return data_.allFinite(); }

    friend bool operator==(const TokenField& a, const TokenField& b) {
        return a.data_.rows() == b.data_.rows() && a.data_.cols() == b.data_.cols() && a.data_ == b.data_;
    }

private:
    Matrix data_;
};

inline constexpr double kSigmaFloor = 1e-6;

/// Fields plus optional class labels (empty when unlabeled).
struct Dataset {
    std::vector<TokenField> fields;
    std::vector<int> labels;

    bool has_labels() const noexcept { return !labels.empty(); }
    std::size_t size() const noexcept { return fields.size(); }
};

/// Per-channel mean and standard deviation.
struct ChannelStats {
    Vector mu;
    Vector sigma;

    Eigen::Index channels() const noexcept { return mu.size(); }
    static ChannelStats identity(Eigen::Index channels);
};

/// Noise-injection policy. `PerSampleUniform` draws one sigma ~ U(0, sigma)
/// per field; `Constant` uses `sigma` for every field.
struct NoiseSpec {
    enum class Mode { none, constant, per_sample_uniform };
    Mode mode = Mode::none;
    double sigma = 0.0;

    static NoiseSpec none() { return {}; }
    static NoiseSpec constant(double s) { return {Mode::constant, s}; }
    static NoiseSpec per_sample_uniform(double s_max) { return {Mode::per_sample_uniform, s_max}; }

    void validate() const;
};

struct SpectrumReport {
    Vector eigenvalues;           // descending
    Vector cumulative_explained;  // non-decreasing, last entry 1
};

/// Population mean/std over every token of every field; sigma clamped at kSigmaFloor.
ChannelStats compute_channel_stats(std::span<const TokenField> dataset);

TokenField normalize(const TokenField& field, const ChannelStats& stats);
TokenField denormalize(const TokenField& field, const ChannelStats& stats);

/// Deterministic in (field, spec, seed).
TokenField add_noise(const TokenField& field, const NoiseSpec& spec, std::uint64_t seed);

/// Empirical c x c covariance of all tokens pooled across fields and positions.
Matrix pooled_covariance(std::span<const TokenField> dataset);

/// Eigen-spectrum of the pooled token covariance. Needs at least c + 1 tokens.
SpectrumReport pca_spectrum(std::span<const TokenField> dataset);

/// Spectrum of a given covariance matrix (symmetric, c x c).
SpectrumReport spectrum_of_covariance(const Matrix& covariance);

/// Smallest k (1-based) whose cumulative explained variance reaches `threshold`.
int intrinsic_dim(const SpectrumReport& report, double threshold);

}  // namespace srcflow
