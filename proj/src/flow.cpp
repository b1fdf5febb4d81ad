#include "srcflow/flow.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "srcflow/batch.hpp"
#include "srcflow/layers.hpp"
#include "srcflow/rng.hpp"

namespace srcflow {

void FlowConfig::validate() const {
    if (blocks < 1) throw Error("flow config: blocks must be >= 1");
    if (shallow_layers < 1 || deep_layers < shallow_layers)
        throw Error("flow config: need deep_layers >= shallow_layers >= 1");
    if (width < 1 || heads < 1 || width % heads != 0) throw Error("flow config: width must be divisible by heads");
    if (mlp_ratio < 1) throw Error("flow config: mlp_ratio must be >= 1");
    if (channels < 1 || tokens < 1) throw Error("flow config: channels and tokens must be >= 1");
    if (num_classes < 0) throw Error("flow config: num_classes must be >= 0");
    if (!(label_drop_p >= 0.0 && label_drop_p < 1.0)) throw Error("flow config: label_drop_p must be in [0, 1)");
    if (!(alpha_clamp > 0.0) || !std::isfinite(alpha_clamp)) throw Error("flow config: alpha_clamp must be > 0");
}

int FlowConfig::embedding_row(int label) const {
    if (label == kNullLabel) return num_classes;
    if (label < 0 || label >= num_classes) throw Error("unknown label id " + std::to_string(label));
    return label;
}

double gaussian_constant(Eigen::Index tokens, Eigen::Index channels) {
    return 0.5 * static_cast<double>(tokens * channels) * std::log(2.0 * std::numbers::pi);
}

AffineParams cfg_combine(const AffineParams& cond, const AffineParams& uncond, double w, double alpha_clamp) {
    if (cond.mu.rows() != uncond.mu.rows() || cond.mu.cols() != uncond.mu.cols() ||
        cond.alpha.rows() != uncond.alpha.rows() || cond.alpha.cols() != uncond.alpha.cols())
        throw Error("shape mismatch");
    if (w == 0.0) return cond;
    AffineParams out;
    out.mu = uncond.mu + (1.0 + w) * (cond.mu - uncond.mu);
    out.alpha = (uncond.alpha + (1.0 + w) * (cond.alpha - uncond.alpha)).cwiseMax(-alpha_clamp).cwiseMin(alpha_clamp);
    return out;
}

namespace {

std::string block_prefix(int k) { return "b" + std::to_string(k); }
std::string layer_prefix(int k, int l) { return block_prefix(k) + ".l" + std::to_string(l); }

std::vector<int> embedding_rows(const FlowConfig& config, std::span<const int> labels) {
    std::vector<int> rows;
    rows.reserve(labels.size());
    for (int l : labels) rows.push_back(config.embedding_row(l));
    return rows;
}

}  // namespace

template <class T>
FlowModel<T> init_flow(const FlowConfig& config, FlowInit init, std::uint64_t seed, double head_std) {
    config.validate();
    Rng rng(seed, 0x666c6f77ULL);
    const int w = config.width, d = config.channels;
    layers::InitSpec spec;
    spec.weight_std = 1.0 / std::sqrt(static_cast<double>(w));
    spec.zero_residual_out = init == FlowInit::zero_head;

    FlowModel<T> out{config, {}};
    auto& ps = out.params;
    ps.add("class_emb", layers::gaussian<T>(config.num_classes + 1, w, 0.5, rng));
    for (int k = 0; k < config.blocks; ++k) {
        const auto p = block_prefix(k);
        layers::add_linear(ps, p + ".in", d, w, 1.0 / std::sqrt(static_cast<double>(d)), rng);
        ps.add(p + ".start", layers::gaussian<T>(1, w, 0.5, rng));
        ps.add(p + ".pos", layers::gaussian<T>(config.tokens, w, 0.1, rng));
        for (int l = 0; l < config.layers_in_block(k); ++l)
            layers::add_block(ps, layer_prefix(k, l), w, w * config.mlp_ratio, spec, rng);
        layers::add_layer_norm(ps, p + ".ln_f", w);
        layers::add_linear(ps, p + ".head", w, 2 * d, init == FlowInit::zero_head ? 0.0 : head_std / std::sqrt(static_cast<double>(w)), rng);
    }
    return out;
}

template <class T>
AffineVars<T> block_params_graph(const Bound<T>& b, const FlowConfig& config, int block, ag::Var<T> y,
                                 std::span<const int> labels) {
    const int batch = static_cast<int>(labels.size());
    if (batch < 1 || y.cols() != config.channels || y.rows() % batch != 0) throw Error("shape mismatch");
    const auto tokens = y.rows() / batch;
    if (tokens > config.tokens) throw Error("shape mismatch: more tokens than the positional table");
    const auto p = block_prefix(block);
    const auto rows = embedding_rows(config, labels);

    auto x = layers::apply_linear(b, p + ".in", y);
    const auto ctx = ag::add_row(ag::gather_rows(b("class_emb"), std::span<const int>(rows)), b(p + ".start"));
    auto h = ag::shift_tokens(x, ctx, batch);
    h = ag::add_tiled(h, ag::top_rows(b(p + ".pos"), tokens), batch);
    for (int l = 0; l < config.layers_in_block(block); ++l)
        h = layers::apply_block(b, layer_prefix(block, l), h, batch, config.heads, true);
    h = layers::apply_layer_norm(b, p + ".ln_f", h);
    const auto out = layers::apply_linear(b, p + ".head", h);

    const T c = static_cast<T>(config.alpha_clamp);
    const auto mu = ag::col_slice(out, 0, config.channels);
    const auto alpha = ag::scale(ag::tanh(ag::scale(ag::col_slice(out, config.channels, config.channels), T(1) / c)), c);
    return {mu, alpha};
}

template <class T>
ForwardVars<T> flow_forward_graph(const Bound<T>& b, const FlowConfig& config, ag::Var<T> y,
                                  std::span<const int> labels) {
    const int batch = static_cast<int>(labels.size());
    ForwardVars<T> out;
    for (int k = 0; k < config.blocks; ++k) {
        const auto [mu, alpha] = block_params_graph(b, config, k, y, labels);
        y = ag::mul(ag::sub(y, mu), ag::exp(ag::scale(alpha, T(-1))));
        const auto s = ag::sum(alpha);
        out.sum_alpha = k == 0 ? s : ag::add(out.sum_alpha, s);
        out.alphas.push_back(alpha);
        y = ag::reverse_tokens(y, batch);
    }
    out.u = y;
    return out;
}

template <class T>
ag::Var<T> flow_loss_graph(const Bound<T>& b, const FlowConfig& config, ag::Var<T> y, std::span<const int> labels) {
    const auto f = flow_forward_graph(b, config, y, labels);
    const auto total = ag::add(ag::scale(ag::sum_squares(f.u), T(0.5)), f.sum_alpha);
    return ag::scale(total, T(1) / static_cast<T>(labels.size()));
}

template <class T>
AffineParams block_params(const TokenField& field, int label, int block, const FlowModel<T>& model) {
    if (block < 0 || block >= model.config.blocks) throw Error("block index out of range");
    ag::Tape<T> tape(false);
    const Bound<T> b(tape, model.params);
    const int labels[1] = {label};
    const auto p = block_params_graph(b, model.config, block,
                                      tape.constant(stack_fields<T>(std::span<const TokenField>(&field, 1))), labels);
    return AffineParams{p.mu.value().template cast<double>(), p.alpha.value().template cast<double>()};
}

template <class T>
std::vector<FlowForwardResult> flow_forward_batch(std::span<const TokenField> fields, std::span<const int> labels,
                                                  const FlowModel<T>& model) {
    if (fields.size() != labels.size()) throw Error("label count does not match batch size");
    ag::Tape<T> tape(false);
    const Bound<T> b(tape, model.params);
    const int batch = static_cast<int>(fields.size());
    const auto f = flow_forward_graph(b, model.config, tape.constant(stack_fields<T>(fields)), labels);
    auto u = unstack_fields<T>(f.u.value(), batch);
    const Eigen::Index n = f.u.rows() / batch;
    std::vector<FlowForwardResult> out;
    out.reserve(fields.size());
    for (int i = 0; i < batch; ++i) {
        double logdet = 0.0;
        for (const auto& a : f.alphas) logdet -= static_cast<double>(a.value().middleRows(i * n, n).sum());
        if (!std::isfinite(logdet)) throw NumericalError("numerical overflow");
        out.push_back(FlowForwardResult{std::move(u[static_cast<std::size_t>(i)]), logdet});
    }
    return out;
}

template <class T>
FlowForwardResult flow_forward(const TokenField& field, int label, const FlowModel<T>& model) {
    const int labels[1] = {label};
    return std::move(flow_forward_batch<T>(std::span<const TokenField>(&field, 1), labels, model).front());
}

namespace {

template <class T>
std::vector<TokenField> inverse_impl(std::span<const TokenField> u, std::span<const int> labels,
                                     const GuidanceSpec& guidance, bool guided, const FlowModel<T>& model) {
    if (u.size() != labels.size()) throw Error("label count does not match batch size");
    if (!std::isfinite(guidance.w) || guidance.w < 0.0) throw Error("guidance strength must be finite and >= 0");
    const auto& cfg = model.config;
    const int batch = static_cast<int>(u.size());
    const std::vector<int> null_labels(u.size(), kNullLabel);
    const T w = static_cast<T>(guidance.w);
    const T clamp = static_cast<T>(cfg.alpha_clamp);

    ag::Mat<T> y = stack_fields<T>(u);
    const Eigen::Index n = y.rows() / batch, d = y.cols();
    if (d != cfg.channels) throw Error("shape mismatch");

    // One non-recording tape for the whole call so parameters are bound once.
    ag::Tape<T> tape(false);
    const Bound<T> b(tape, model.params);
    const std::size_t mark = tape.size();

    for (int k = cfg.blocks - 1; k >= 0; --k) {
        ag::Mat<T> target(y.rows(), d);
        for (int i = 0; i < batch; ++i)
            for (Eigen::Index t = 0; t < n; ++t) target.row(i * n + t) = y.row(i * n + (n - 1 - t));

        ag::Mat<T> x = ag::Mat<T>::Zero(y.rows(), d);
        for (Eigen::Index t = 0; t < n; ++t) {
            // Prefix of length t + 1; row t is a placeholder the causal shift drops.
            const Eigen::Index len = t + 1;
            ag::Mat<T> prefix(len * batch, d);
            for (int i = 0; i < batch; ++i) prefix.middleRows(i * len, len) = x.middleRows(i * n, len);
            const auto in = tape.constant(std::move(prefix));
            const auto cond = block_params_graph(b, cfg, k, in, labels);
            if (!guided) {
                for (int i = 0; i < batch; ++i) {
                    const Eigen::Index row = i * len + t;
                    x.row(i * n + t) =
                        target.row(i * n + t).cwiseProduct(cond.alpha.value().row(row).array().exp().matrix()) +
                        cond.mu.value().row(row);
                }
                tape.truncate(mark);
                continue;
            }
            const auto unc = block_params_graph(b, cfg, k, in, std::span<const int>(null_labels));
            for (int i = 0; i < batch; ++i) {
                const Eigen::Index row = i * len + t;
                const auto mu_c = cond.mu.value().row(row);
                const auto mu_u = unc.mu.value().row(row);
                const auto al_c = cond.alpha.value().row(row);
                const auto al_u = unc.alpha.value().row(row);
                if (w == T(0)) {
                    x.row(i * n + t) = target.row(i * n + t).cwiseProduct(al_c.array().exp().matrix()) + mu_c;
                    continue;
                }
                const auto mu = (mu_u + (T(1) + w) * (mu_c - mu_u)).eval();
                const auto alpha = (al_u + (T(1) + w) * (al_c - al_u)).cwiseMax(-clamp).cwiseMin(clamp).eval();
                x.row(i * n + t) = target.row(i * n + t).cwiseProduct(alpha.array().exp().matrix()) + mu;
            }
            tape.truncate(mark);
        }
        if (!x.allFinite()) throw NumericalError("numerical overflow");
        y = std::move(x);
    }
    return unstack_fields<T>(y, batch);
}

}  // namespace

template <class T>
std::vector<TokenField> flow_inverse_batch(std::span<const TokenField> u, std::span<const int> labels,
                                           const GuidanceSpec& guidance, const FlowModel<T>& model) {
    return inverse_impl<T>(u, labels, guidance, guidance.w != 0.0, model);
}

template <class T>
std::vector<TokenField> flow_inverse_batch_guided(std::span<const TokenField> u, std::span<const int> labels,
                                                  const GuidanceSpec& guidance, const FlowModel<T>& model) {
    return inverse_impl<T>(u, labels, guidance, true, model);
}

template <class T>
TokenField flow_inverse(const TokenField& u, int label, const GuidanceSpec& guidance, const FlowModel<T>& model) {
    const int labels[1] = {label};
    return std::move(flow_inverse_batch<T>(std::span<const TokenField>(&u, 1), labels, guidance, model).front());
}

template <class T>
double nll(const TokenField& field, int label, const FlowModel<T>& model) {
    const auto r = flow_forward<T>(field, label, model);
    return 0.5 * r.u.data().squaredNorm() - r.logdet;
}

#define SRCFLOW_INSTANTIATE(T)                                                                                      \
    template FlowModel<T> init_flow<T>(const FlowConfig&, FlowInit, std::uint64_t, double);                        \
    template AffineVars<T> block_params_graph<T>(const Bound<T>&, const FlowConfig&, int, ag::Var<T>,             \
                                                 std::span<const int>);                                            \
    template ForwardVars<T> flow_forward_graph<T>(const Bound<T>&, const FlowConfig&, ag::Var<T>,                  \
                                                  std::span<const int>);                                           \
    template ag::Var<T> flow_loss_graph<T>(const Bound<T>&, const FlowConfig&, ag::Var<T>, std::span<const int>); \
    template AffineParams block_params<T>(const TokenField&, int, int, const FlowModel<T>&);                       \
    template FlowForwardResult flow_forward<T>(const TokenField&, int, const FlowModel<T>&);                       \
    template std::vector<FlowForwardResult> flow_forward_batch<T>(std::span<const TokenField>,                     \
                                                                  std::span<const int>, const FlowModel<T>&);      \
    template TokenField flow_inverse<T>(const TokenField&, int, const GuidanceSpec&, const FlowModel<T>&);         \
    template std::vector<TokenField> flow_inverse_batch<T>(std::span<const TokenField>, std::span<const int>,      \
                                                           const GuidanceSpec&, const FlowModel<T>&);              \
    template std::vector<TokenField> flow_inverse_batch_guided<T>(std::span<const TokenField>, std::span<const int>, \
                                                                  const GuidanceSpec&, const FlowModel<T>&);       \
    template double nll<T>(const TokenField&, int, const FlowModel<T>&);

SRCFLOW_INSTANTIATE(float)
SRCFLOW_INSTANTIATE(double)
#undef SRCFLOW_INSTANTIATE

}  // namespace srcflow
