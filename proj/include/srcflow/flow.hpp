#pragma once

// Transformer autoregressive flow. Each of K blocks maps
//   y_i -> (y_i - mu_i) * exp(-alpha_i)
// with (mu_i, alpha_i) predicted by a causal transformer from tokens < i and
// the class label, then reverses token order before the next block.

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "srcflow/autograd.hpp"
#include "srcflow/params.hpp"
#include "srcflow/tokenfield.hpp"

namespace srcflow {

/// Label value selecting the unconditional (null) embedding.
inline constexpr int kNullLabel = -1;

struct FlowConfig {
    int blocks = 6;
    int shallow_layers = 1;
    int deep_layers = 4;
    int width = 128;
    int heads = 4;
    int mlp_ratio = 4;
    int channels = 8;  // d
    int tokens = 16;   // N
    int num_classes = 10;
    double label_drop_p = 0.1;
    double alpha_clamp = 8.0;

    void validate() const;
    /// Transformer depth of block k: the last block is deep, the rest shallow.
    int layers_in_block(int k) const noexcept { return k == blocks - 1 ? deep_layers : shallow_layers; }
    /// Row of the class-embedding table used for a label (kNullLabel maps to the last row).
    int embedding_row(int label) const;
};

struct AffineParams {
    Matrix mu;
    Matrix alpha;
};

struct GuidanceSpec {
    double w = 0.0;
};

enum class FlowInit {
    /// Output heads zero: every block is the identity map.
    zero_head,
    /// Small random head so blocks are non-trivial (verification use).
    random,
};

template <class T>
struct FlowModel {
    FlowConfig config;
    ParamSet<T> params;

    template <class U>
    FlowModel<U> cast() const {
        return FlowModel<U>{config, params.template cast<U>()};
    }
};

/// `head_std` is the typical magnitude of the random head outputs (mu, raw alpha).
template <class T>
FlowModel<T> init_flow(const FlowConfig& config, FlowInit init, std::uint64_t seed, double head_std = 0.1);

inline double affine_forward(double y, double mu, double alpha) { return (y - mu) * std::exp(-alpha); }
inline double affine_inverse(double u, double mu, double alpha) { return u * std::exp(alpha) + mu; }

/// Linear extrapolation from the unconditional towards the conditional
/// parameters with strength (1 + w); alpha is re-clamped. w == 0 returns
/// `cond` unchanged.
AffineParams cfg_combine(const AffineParams& cond, const AffineParams& uncond, double w, double alpha_clamp);

// -- graph level -------------------------------------------------------------

template <class T>
struct AffineVars {
    ag::Var<T> mu;
    ag::Var<T> alpha;
};

/// Shift/log-scale of block k for a stacked batch (batch * tokens) x d.
/// Token count may be smaller than config.tokens (prefix evaluation).
template <class T>
AffineVars<T> block_params_graph(const Bound<T>& b, const FlowConfig& config, int block, ag::Var<T> y,
                                 std::span<const int> labels);

template <class T>
struct ForwardVars {
    ag::Var<T> u;
    ag::Var<T> sum_alpha;  // 1 x 1, summed over blocks, tokens, channels and batch
    std::vector<ag::Var<T>> alphas;  // per block, (batch * tokens) x d
};

template <class T>
ForwardVars<T> flow_forward_graph(const Bound<T>& b, const FlowConfig& config, ag::Var<T> y,
                                  std::span<const int> labels);

/// Batch-mean of L_NF = 0.5 * |u|^2 + sum(alpha).
template <class T>
ag::Var<T> flow_loss_graph(const Bound<T>& b, const FlowConfig& config, ag::Var<T> y, std::span<const int> labels);

// -- field level -------------------------------------------------------------

template <class T>
AffineParams block_params(const TokenField& field, int label, int block, const FlowModel<T>& model);

struct FlowForwardResult {
    TokenField u;
    double logdet = 0.0;
};

template <class T>
FlowForwardResult flow_forward(const TokenField& field, int label, const FlowModel<T>& model);

template <class T>
std::vector<FlowForwardResult> flow_forward_batch(std::span<const TokenField> fields, std::span<const int> labels,
                                                  const FlowModel<T>& model);

template <class T>
TokenField flow_inverse(const TokenField& u, int label, const GuidanceSpec& guidance, const FlowModel<T>& model);

/// Sequential inverse for a batch; tokens of one field are generated in order,
/// fields of the batch advance together.
template <class T>
std::vector<TokenField> flow_inverse_batch(std::span<const TokenField> u, std::span<const int> labels,
                                           const GuidanceSpec& guidance, const FlowModel<T>& model);

/// Same as flow_inverse_batch but always takes the guided path, evaluating
/// conditional and null-label parameters even when w == 0.
template <class T>
std::vector<TokenField> flow_inverse_batch_guided(std::span<const TokenField> u, std::span<const int> labels,
                                                  const GuidanceSpec& guidance, const FlowModel<T>& model);

/// L_NF of one field (the Gaussian constant is excluded).
template <class T>
double nll(const TokenField& field, int label, const FlowModel<T>& model);

/// (N d / 2) ln(2 pi): add to L_NF for the full negative log-likelihood.
double gaussian_constant(Eigen::Index tokens, Eigen::Index channels);

}  // namespace srcflow
