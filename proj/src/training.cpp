#include "srcflow/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <string>

#include "srcflow/batch.hpp"
#include "srcflow/rng.hpp"

namespace srcflow {

void TrainConfig::validate() const {
    if (epochs < 0) throw Error("train config: epochs must be >= 0");
    if (batch_size < 1) throw Error("train config: batch_size must be >= 1");
    if (!(lr > 0.0)) throw Error("train config: lr must be > 0");
    if (weight_decay < 0.0) throw Error("train config: weight_decay must be >= 0");
    if (warmup_epochs < 0 || cosine_start_epoch < warmup_epochs || cosine_start_epoch > std::max(epochs, 0))
        throw Error("train config: need 0 <= warmup_epochs <= cosine_start_epoch <= epochs");
    if (!(ema_decay >= 0.0 && ema_decay < 1.0)) throw Error("train config: ema_decay must be in [0, 1)");
    if (!(grad_clip > 0.0)) throw Error("train config: grad_clip must be > 0");
    if (steps_per_epoch < 0) throw Error("train config: steps_per_epoch must be >= 0");
    noise.validate();
}

int TrainConfig::total_steps(std::size_t dataset_size) const {
    const auto per_epoch = steps_per_epoch > 0
                               ? static_cast<std::size_t>(steps_per_epoch)
                               : (dataset_size + static_cast<std::size_t>(batch_size) - 1) /
                                     static_cast<std::size_t>(batch_size);
    return static_cast<int>(per_epoch) * epochs;
}

template <class T>
double grad_norm(const ParamSet<T>& grads) {
    double sq = 0.0;
    for (const auto& e : grads.entries()) sq += e.value.template cast<double>().squaredNorm();
    return std::sqrt(sq);
}

template <class T>
double optimizer_step(ParamSet<T>& params, const ParamSet<T>& grads, OptimizerState<T>& state, double lr,
                      double weight_decay, double grad_clip) {
    if (!params.same_layout(grads) || !params.same_layout(state.m) || !params.same_layout(state.v))
        throw Error("shape mismatch");
    const double norm = grad_norm(grads);
    if (!std::isfinite(norm)) throw NumericalError("non-finite gradient");
    const double clip = norm > grad_clip ? grad_clip / norm : 1.0;

    ++state.step;
    const double bc1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(state.step));
    const T b1 = static_cast<T>(kAdamBeta1), b2 = static_cast<T>(kAdamBeta2);
    auto& pe = params.entries();
    const auto& ge = grads.entries();
    for (std::size_t i = 0; i < pe.size(); ++i) {
        auto p = pe[i].value.array();
        const auto g = (ge[i].value.array() * static_cast<T>(clip)).eval();
        auto m = state.m.entries()[i].value.array();
        auto v = state.v.entries()[i].value.array();
        m = b1 * m + (T(1) - b1) * g;
        v = b2 * v + (T(1) - b2) * g * g;
        const auto mhat = m / static_cast<T>(bc1);
        const auto vhat = v / static_cast<T>(bc2);
        p -= static_cast<T>(lr) * (mhat / (vhat.sqrt() + static_cast<T>(kAdamEps)) + static_cast<T>(weight_decay) * p);
    }
    return norm;
}

double lr_schedule(long step, long total_steps, const TrainConfig& config) {
    if (total_steps <= 0) return config.lr;
    step = std::clamp(step, 0L, total_steps);
    const double per_epoch = config.epochs > 0 ? static_cast<double>(total_steps) / config.epochs : 0.0;
    const double warmup = per_epoch * config.warmup_epochs;
    const double cosine_start = per_epoch * config.cosine_start_epoch;
    const double s = static_cast<double>(step);
    if (s < warmup) return config.lr * s / warmup;
    if (s < cosine_start || cosine_start >= static_cast<double>(total_steps)) return config.lr;
    const double frac = (s - cosine_start) / (static_cast<double>(total_steps) - cosine_start);
    return config.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

template <class T>
EMAState<T> ema_init(const ParamSet<T>& params, double decay) {
    if (!(decay >= 0.0 && decay < 1.0)) throw Error("ema decay must be in [0, 1)");
    return EMAState<T>{params, decay};
}

template <class T>
void ema_update(EMAState<T>& ema, const ParamSet<T>& params) {
    if (!ema.shadow.same_layout(params)) throw Error("shape mismatch");
    const T a = static_cast<T>(ema.decay);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& s = ema.shadow.entries()[i].value;
        s = a * s + (T(1) - a) * params.entries()[i].value;
    }
}

namespace {

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(Rng::derive(seed, 0x6570ULL, static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    return order;
}

/// Deterministic batch schedule: epoch-wise permutations, consumed in order.
class BatchSchedule {
public:
    BatchSchedule(std::size_t n, int batch, std::uint64_t seed) : n_(n), batch_(batch), seed_(seed) {}

    std::vector<std::size_t> next() {
        std::vector<std::size_t> out;
        out.reserve(static_cast<std::size_t>(batch_));
        while (out.size() < static_cast<std::size_t>(batch_)) {
            if (pos_ >= order_.size()) {
                order_ = epoch_order(n_, seed_, epoch_++);
                pos_ = 0;
            }
            out.push_back(order_[pos_++]);
        }
        return out;
    }

private:
    std::size_t n_;
    int batch_;
    std::uint64_t seed_;
    int epoch_ = 0;
    std::vector<std::size_t> order_;
    std::size_t pos_ = 0;
};

void check_dataset(const Dataset& data, Eigen::Index channels) {
    if (data.fields.empty()) throw Error("no data");
    for (const auto& f : data.fields)
        if (f.channels() != channels || f.tokens() != data.fields.front().tokens()) throw Error("shape mismatch");
    if (data.has_labels() && data.labels.size() != data.fields.size()) throw Error("label count mismatch");
}

}  // namespace

template <class T>
SrcParams<T> train_src_from(SrcParams<T> model, const Dataset& dataset, const ChannelStats& rae_stats,
                            const TrainConfig& cfg, MetricLog* log) {
    cfg.validate();
    check_dataset(dataset, model.config.n);
    const int total = cfg.total_steps(dataset.size());
    if (total == 0) return model;
    const int batch = cfg.batch_size;

    std::vector<TokenField> targets;
    targets.reserve(dataset.size());
    for (const auto& f : dataset.fields) targets.push_back(normalize(f, rae_stats));

    auto opt = OptimizerState<T>::init(model.params);
    BatchSchedule schedule(dataset.size(), batch, cfg.seed);
    for (int step = 0; step < total; ++step) {
        const auto idx = schedule.next();
        std::vector<TokenField> in, tgt;
        in.reserve(idx.size());
        tgt.reserve(idx.size());
        for (std::size_t s = 0; s < idx.size(); ++s) {
            const auto seed = Rng::derive(cfg.seed, 0x6e7372ULL, static_cast<std::uint64_t>(step), s);
            in.push_back(normalize(add_noise(dataset.fields[idx[s]], cfg.noise, seed), rae_stats));
            tgt.push_back(targets[idx[s]]);
        }

        ag::Tape<T> tape;
        const Bound<T> b(tape, model.params);
        const auto zc = src_encode_graph(b, model.config, tape.constant(stack_fields<T>(in)), batch);
        const auto zhat = src_decode_graph(b, model.config, zc, batch);
        const auto target = tape.constant(stack_fields<T>(tgt));
        const auto loss =
            ag::scale(ag::sum_squares(ag::sub(zhat, target)), T(1) / static_cast<T>(target.value().size()));
        const double loss_value = static_cast<double>(loss.value()(0, 0));
        if (!std::isfinite(loss_value)) throw NumericalError("divergence: non-finite loss at step " + std::to_string(step));
        tape.backward(loss);

        const double lr = lr_schedule(step, total, cfg);
        double gn = 0.0;
        try {
            gn = optimizer_step(model.params, b.grads(), opt, lr, cfg.weight_decay, cfg.grad_clip);
        } catch (const NumericalError&) {
            throw NumericalError("divergence: non-finite gradient at step " + std::to_string(step));
        }
        if (log) log->push_back(MetricRow{step, lr, loss_value, 0.0, gn});
    }
    return model;
}

template <class T>
SrcParams<T> train_src(const Dataset& dataset, const ChannelStats& rae_stats, const SrcConfig& src_config,
                       const TrainConfig& train_config, MetricLog* log, SrcInit init) {
    return train_src_from<T>(init_src<T>(src_config, init, Rng::derive(train_config.seed, 0x696e6974ULL)), dataset,
                             rae_stats, train_config, log);
}

template <class T>
std::vector<TokenField> compact_fields(std::span<const TokenField> raw, const SrcParams<T>* src,
                                       const ChannelStats& rae_stats, const ChannelStats* compact_stats,
                                       const NoiseSpec& noise, std::span<const std::uint64_t> noise_seeds) {
    if (noise_seeds.size() != raw.size()) throw Error("one noise seed per field required");
    std::vector<TokenField> z;
    z.reserve(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i) z.push_back(normalize(add_noise(raw[i], noise, noise_seeds[i]), rae_stats));
    if (src) z = src_encode_batch<T>(z, *src);
    if (compact_stats)
        for (auto& f : z) f = normalize(f, *compact_stats);
    return z;
}

template <class T>
ChannelStats compute_compact_stats(const Dataset& dataset, const SrcParams<T>* src, const ChannelStats& rae_stats,
                                   const NoiseSpec& noise, std::uint64_t seed) {
    if (dataset.fields.empty()) throw Error("no data");
    std::vector<TokenField> all;
    all.reserve(dataset.size());
    constexpr std::size_t chunk = 64;
    for (std::size_t start = 0; start < dataset.size(); start += chunk) {
        const auto count = std::min(chunk, dataset.size() - start);
        std::vector<std::uint64_t> seeds(count);
        for (std::size_t i = 0; i < count; ++i) seeds[i] = Rng::derive(seed, 0x63737473ULL, start + i);
        auto part = compact_fields<T>(std::span<const TokenField>(dataset.fields).subspan(start, count), src, rae_stats,
                                      nullptr, noise, seeds);
        for (auto& f : part) all.push_back(std::move(f));
    }
    return compute_channel_stats(all);
}

template <class T>
FlowTrainResult<T> train_flow(const Dataset& dataset, const SrcParams<T>* src, const ChannelStats& rae_stats,
                              const ChannelStats& compact_stats, const FlowConfig& flow_config,
                              const TrainConfig& cfg, MetricLog* log, std::optional<FlowModel<T>> start) {
    cfg.validate();
    flow_config.validate();
    check_dataset(dataset, rae_stats.channels());
    if (src && src->config.d != flow_config.channels) throw Error("shape mismatch: compressor d != flow channels");
    if (!src && rae_stats.channels() != flow_config.channels) throw Error("shape mismatch: data channels != flow channels");
    if (dataset.fields.front().tokens() != flow_config.tokens) throw Error("shape mismatch: token count");

    FlowModel<T> model = start ? std::move(*start)
                               : init_flow<T>(flow_config, FlowInit::zero_head, Rng::derive(cfg.seed, 0x696e6974ULL));
    auto ema = ema_init(model.params, cfg.ema_decay);
    auto opt = OptimizerState<T>::init(model.params);
    const int total = cfg.total_steps(dataset.size());
    const int batch = cfg.batch_size;
    BatchSchedule schedule(dataset.size(), batch, cfg.seed);

    for (int step = 0; step < total; ++step) {
        const auto idx = schedule.next();
        std::vector<TokenField> raw;
        std::vector<std::uint64_t> seeds;
        std::vector<int> labels;
        raw.reserve(idx.size());
        Rng drop(Rng::derive(cfg.seed, 0x64726f70ULL, static_cast<std::uint64_t>(step)));
        for (std::size_t s = 0; s < idx.size(); ++s) {
            raw.push_back(dataset.fields[idx[s]]);
            seeds.push_back(Rng::derive(cfg.seed, 0x6e666cULL, static_cast<std::uint64_t>(step), s));
            int label = dataset.has_labels() ? dataset.labels[idx[s]] : kNullLabel;
            if (drop.uniform() < flow_config.label_drop_p) label = kNullLabel;
            labels.push_back(label);
        }
        const auto zc = compact_fields<T>(raw, src, rae_stats, &compact_stats, cfg.noise, seeds);

        ag::Tape<T> tape;
        const Bound<T> b(tape, model.params);
        const auto f = flow_forward_graph(b, model.config, tape.constant(stack_fields<T>(zc)), labels);
        const auto total_loss = ag::add(ag::scale(ag::sum_squares(f.u), T(0.5)), f.sum_alpha);
        const auto loss = ag::scale(total_loss, T(1) / static_cast<T>(batch));
        const double loss_value = static_cast<double>(loss.value()(0, 0));
        if (!std::isfinite(loss_value)) throw NumericalError("divergence: non-finite loss at step " + std::to_string(step));
        tape.backward(loss);

        const double lr = lr_schedule(step, total, cfg);
        double gn = 0.0;
        try {
            gn = optimizer_step(model.params, b.grads(), opt, lr, cfg.weight_decay, cfg.grad_clip);
        } catch (const NumericalError&) {
            throw NumericalError("divergence: non-finite gradient at step " + std::to_string(step));
        }
        ema_update(ema, model.params);
        if (log) {
            const double logdet_mean = -static_cast<double>(f.sum_alpha.value()(0, 0)) / batch;
            log->push_back(MetricRow{step, lr, loss_value, logdet_mean, gn});
        }
    }
    return FlowTrainResult<T>{std::move(model), std::move(ema)};
}

template <class T>
SampleSet sample_pipeline(const FlowModel<T>& model, const SrcParams<T>* src, const ChannelStats& rae_stats,
                          const ChannelStats& compact_stats, int label, const GuidanceSpec& guidance, int count,
                          std::uint64_t seed) {
    if (count < 0) throw Error("sample count must be >= 0");
    const auto& cfg = model.config;
    cfg.embedding_row(label);
    SampleSet out;
    constexpr int chunk = 256;
    for (int start = 0; start < count; start += chunk) {
        const int n = std::min(chunk, count - start);
        std::vector<TokenField> u;
        for (int i = 0; i < n; ++i) {
            Rng rng(Rng::derive(seed, 0x73616d70ULL, static_cast<std::uint64_t>(start + i)));
            Matrix m(cfg.tokens, cfg.channels);
            for (Eigen::Index j = 0; j < m.size(); ++j) m.data()[j] = rng.normal();
            u.emplace_back(std::move(m));
        }
        const std::vector<int> labels(static_cast<std::size_t>(n), label);
        auto zc = flow_inverse_batch<T>(u, labels, guidance, model);
        std::vector<TokenField> z;
        z.reserve(zc.size());
        for (const auto& f : zc) z.push_back(denormalize(f, compact_stats));
        if (src) z = src_decode_batch<T>(z, *src);
        for (auto& f : z) out.decoded.push_back(denormalize(f, rae_stats));
        for (auto& f : zc) out.compact.push_back(std::move(f));
    }
    return out;
}

template <class T>
double mean_nll_per_dim(const FlowModel<T>& model, const Dataset& dataset, const SrcParams<T>* src,
                        const ChannelStats& rae_stats, const ChannelStats& compact_stats, const NoiseSpec& noise,
                        std::uint64_t seed) {
    if (dataset.fields.empty()) throw Error("no data");
    const auto& cfg = model.config;
    double total = 0.0;
    constexpr std::size_t chunk = 256;
    for (std::size_t start = 0; start < dataset.size(); start += chunk) {
        const auto count = std::min(chunk, dataset.size() - start);
        std::vector<std::uint64_t> seeds(count);
        std::vector<int> labels(count, kNullLabel);
        for (std::size_t i = 0; i < count; ++i) {
            seeds[i] = Rng::derive(seed, 0x65766cULL, start + i);
            if (dataset.has_labels()) labels[i] = dataset.labels[start + i];
        }
        const auto zc = compact_fields<T>(std::span<const TokenField>(dataset.fields).subspan(start, count), src,
                                          rae_stats, &compact_stats, noise, seeds);
        for (const auto& r : flow_forward_batch<T>(zc, labels, model))
            total += 0.5 * r.u.data().squaredNorm() - r.logdet;
    }
    const double dims = static_cast<double>(cfg.tokens) * cfg.channels;
    return total / (static_cast<double>(dataset.size()) * dims) + gaussian_constant(cfg.tokens, cfg.channels) / dims;
}

template <class T>
NoiseScheduleReport noise_schedule_report(const Dataset& train, const Dataset& test, const SrcParams<T>* src,
                                          const ChannelStats& rae_stats, const FlowConfig& flow_config,
                                          const TrainConfig& train_config, double sigma) {
    const auto constant = NoiseSpec::constant(sigma);
    const auto per_sample = NoiseSpec::per_sample_uniform(sigma);
    constant.validate();
    per_sample.validate();
    // Both runs and the evaluation share one compact space.
    const auto compact_stats = compute_compact_stats<T>(train, src, rae_stats, constant, train_config.seed);
    const auto score = [&](const NoiseSpec& noise) {
        TrainConfig cfg = train_config;
        cfg.noise = noise;
        const auto run = train_flow<T>(train, src, rae_stats, compact_stats, flow_config, cfg);
        return mean_nll_per_dim<T>(run.model, test, src, rae_stats, compact_stats, constant,
                                   Rng::derive(train_config.seed, 0x74657374ULL));
    };
    NoiseScheduleReport out;
    out.sigma = sigma;
    out.constant_nll = score(constant);
    out.per_sample_nll = score(per_sample);
    return out;
}

#define SRCFLOW_INSTANTIATE(T)                                                                                        \
    template double grad_norm<T>(const ParamSet<T>&);                                                               \
    template double optimizer_step<T>(ParamSet<T>&, const ParamSet<T>&, OptimizerState<T>&, double, double, double); \
    template EMAState<T> ema_init<T>(const ParamSet<T>&, double);                                                    \
    template void ema_update<T>(EMAState<T>&, const ParamSet<T>&);                                                   \
    template SrcParams<T> train_src<T>(const Dataset&, const ChannelStats&, const SrcConfig&, const TrainConfig&,    \
                                       MetricLog*, SrcInit);                                                         \
    template SrcParams<T> train_src_from<T>(SrcParams<T>, const Dataset&, const ChannelStats&, const TrainConfig&,   \
                                            MetricLog*);                                                             \
    template std::vector<TokenField> compact_fields<T>(std::span<const TokenField>, const SrcParams<T>*,             \
                                                       const ChannelStats&, const ChannelStats*, const NoiseSpec&,   \
                                                       std::span<const std::uint64_t>);                              \
    template ChannelStats compute_compact_stats<T>(const Dataset&, const SrcParams<T>*, const ChannelStats&,         \
                                                   const NoiseSpec&, std::uint64_t);                                 \
    template FlowTrainResult<T> train_flow<T>(const Dataset&, const SrcParams<T>*, const ChannelStats&,              \
                                              const ChannelStats&, const FlowConfig&, const TrainConfig&,            \
                                              MetricLog*, std::optional<FlowModel<T>>);                      \
    template SampleSet sample_pipeline<T>(const FlowModel<T>&, const SrcParams<T>*, const ChannelStats&,           \
                                          const ChannelStats&, int, const GuidanceSpec&, int, std::uint64_t);        \
    template double mean_nll_per_dim<T>(const FlowModel<T>&, const Dataset&, const SrcParams<T>*,                  \
                                        const ChannelStats&, const ChannelStats&, const NoiseSpec&, std::uint64_t);  \
    template NoiseScheduleReport noise_schedule_report<T>(const Dataset&, const Dataset&, const SrcParams<T>*,       \
                                                          const ChannelStats&, const FlowConfig&, const TrainConfig&, \
                                                          double);

SRCFLOW_INSTANTIATE(float)
SRCFLOW_INSTANTIATE(double)
#undef SRCFLOW_INSTANTIATE

}  // namespace srcflow
