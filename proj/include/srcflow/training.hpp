#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "srcflow/compressor.hpp"
#include "srcflow/flow.hpp"
#include "srcflow/params.hpp"
#include "srcflow/tokenfield.hpp"

namespace srcflow {

struct TrainConfig {
    int epochs = 1;
    int batch_size = 32;
    double lr = 2e-4;
    double weight_decay = 0.0;
    int warmup_epochs = 0;
    int cosine_start_epoch = 0;
    double ema_decay = 0.999;
    double grad_clip = 1.0;
    std::uint64_t seed = 0;
    NoiseSpec noise;
    /// Optimizer steps per epoch; 0 means ceil(dataset size / batch size).
    int steps_per_epoch = 0;

    void validate() const;
    int total_steps(std::size_t dataset_size) const;
};

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.95;
inline constexpr double kAdamEps = 1e-8;

template <class T>
struct OptimizerState {
    ParamSet<T> m;
    ParamSet<T> v;
    long step = 0;

    static OptimizerState init(const ParamSet<T>& params) { return {params.zeros_like(), params.zeros_like(), 0}; }
};

template <class T>
struct EMAState {
    ParamSet<T> shadow;
    double decay = 0.999;
};

/// Global L2 norm over every gradient entry.
template <class T>
double grad_norm(const ParamSet<T>& grads);

/// AdamW step with global-norm clipping at `grad_clip` and decoupled weight
/// decay. Returns the gradient norm before clipping. Throws on non-finite
/// gradients.
template <class T>
double optimizer_step(ParamSet<T>& params, const ParamSet<T>& grads, OptimizerState<T>& state, double lr,
                      double weight_decay, double grad_clip);

/// Linear warmup, constant until the cosine start, then cosine decay to 0 at
/// `total_steps`. Epoch boundaries are scaled onto the step axis.
double lr_schedule(long step, long total_steps, const TrainConfig& config);

template <class T>
EMAState<T> ema_init(const ParamSet<T>& params, double decay);
template <class T>
void ema_update(EMAState<T>& ema, const ParamSet<T>& params);

struct MetricRow {
    long step = 0;
    double lr = 0.0;
    double loss = 0.0;
    double logdet_mean = 0.0;
    double grad_norm = 0.0;
};

using MetricLog = std::vector<MetricRow>;

/// Stage 1: denoising reconstruction. Inputs are normalize(add_noise(z_raw)),
/// targets the clean normalize(z_raw).
template <class T>
SrcParams<T> train_src(const Dataset& dataset, const ChannelStats& rae_stats, const SrcConfig& src_config,
                       const TrainConfig& train_config, MetricLog* log = nullptr, SrcInit init = SrcInit::random);

/// Continues training from given parameters (epochs = 0 returns them unchanged).
template <class T>
SrcParams<T> train_src_from(SrcParams<T> start, const Dataset& dataset, const ChannelStats& rae_stats,
                            const TrainConfig& train_config, MetricLog* log = nullptr);

/// Builds the compact flow input of one field:
///   normalize2(enc(normalize(z_raw + noise))) with enc = identity when no compressor is given.
template <class T>
std::vector<TokenField> compact_fields(std::span<const TokenField> raw, const SrcParams<T>* src,
                                       const ChannelStats& rae_stats, const ChannelStats* compact_stats,
                                       const NoiseSpec& noise, std::span<const std::uint64_t> noise_seeds);

/// Channel statistics of encoder outputs over the (noised, normalized) dataset.
template <class T>
ChannelStats compute_compact_stats(const Dataset& dataset, const SrcParams<T>* src, const ChannelStats& rae_stats,
                                   const NoiseSpec& noise, std::uint64_t seed);

template <class T>
struct FlowTrainResult {
    FlowModel<T> model;
    EMAState<T> ema;
};

/// Stage 2: maximum likelihood on compact fields with label dropout and EMA.
/// Without a compressor the normalized data itself is modeled.
template <class T>
FlowTrainResult<T> train_flow(const Dataset& dataset, const SrcParams<T>* src, const ChannelStats& rae_stats,
                              const ChannelStats& compact_stats, const FlowConfig& flow_config,
                              const TrainConfig& train_config, MetricLog* log = nullptr,
                              std::optional<FlowModel<T>> start = std::nullopt);

struct SampleSet {
    std::vector<TokenField> compact;  // flow outputs in the normalized compact space
    std::vector<TokenField> decoded;  // raw token space
};

/// Draws u ~ N(0, I) per sample, then flow_inverse -> denormalize(compact)
/// -> src_decode (skipped without a compressor) -> denormalize(rae).
template <class T>
SampleSet sample_pipeline(const FlowModel<T>& model, const SrcParams<T>* src, const ChannelStats& rae_stats,
                          const ChannelStats& compact_stats, int label, const GuidanceSpec& guidance, int count,
                          std::uint64_t seed);

/// Mean full NLL per dimension, (L_NF + Gaussian constant) / (N d), of the
/// compact fields built from `dataset` under `noise`.
template <class T>
double mean_nll_per_dim(const FlowModel<T>& model, const Dataset& dataset, const SrcParams<T>* src,
                        const ChannelStats& rae_stats, const ChannelStats& compact_stats, const NoiseSpec& noise,
                        std::uint64_t seed);

/// Constant versus per-sample noise during flow training, both scored on
/// constant-noised held-out data.
struct NoiseScheduleReport {
    double sigma = 0.4;
    double constant_nll = 0.0;    // per dimension
    double per_sample_nll = 0.0;  // per dimension
    bool constant_wins() const noexcept { return constant_nll <= per_sample_nll; }
};

/// Trains two flows that differ only in the noise schedule: Constant(sigma)
/// and PerSampleUniform(sigma). `train_config.noise` is ignored.
template <class T>
NoiseScheduleReport noise_schedule_report(const Dataset& train, const Dataset& test, const SrcParams<T>* src,
                                          const ChannelStats& rae_stats, const FlowConfig& flow_config,
                                          const TrainConfig& train_config, double sigma);

}  // namespace srcflow
