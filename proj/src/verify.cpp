#include "srcflow/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numbers>

#include "srcflow/batch.hpp"
#include "srcflow/rng.hpp"

namespace srcflow {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

TokenField gaussian_field(Eigen::Index n, Eigen::Index d, Rng& rng, double std = 1.0) {
    Matrix m(n, d);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = std * rng.normal();
    return TokenField(std::move(m));
}

}  // namespace

double jacobian_logdet_oracle(const FlowModel<double>& model, const TokenField& field, int label) {
    const Eigen::Index n = field.tokens(), d = field.channels(), dim = n * d;
    if (dim > 16) throw Error("jacobian oracle limited to N * d <= 16");
    const auto column = [&](Eigen::Index j, double h) {
        TokenField plus = field, minus = field;
        double& xp = plus.data().data()[j];
        double& xm = minus.data().data()[j];
        xp += h;
        xm -= h;
        const double step = xp - xm;
        const auto up = flow_forward<double>(plus, label, model).u;
        const auto um = flow_forward<double>(minus, label, model).u;
        return Eigen::VectorXd((Eigen::Map<const Eigen::VectorXd>(up.data().data(), dim) -
                                Eigen::Map<const Eigen::VectorXd>(um.data().data(), dim)) /
                               step);
    };
    // Central differences at h and h / 2 combined by Richardson extrapolation,
    // cancelling the O(h^2) truncation term.
    Eigen::MatrixXd jac(dim, dim);
    for (Eigen::Index j = 0; j < dim; ++j) {
        const double h = 1e-5 * std::max(1.0, std::abs(field.data().data()[j]));
        jac.col(j) = (4.0 * column(j, 0.5 * h) - column(j, h)) / 3.0;
    }
    const Eigen::PartialPivLU<Eigen::MatrixXd> lu(jac);
    double logabs = 0.0;
    for (Eigen::Index i = 0; i < dim; ++i) {
        const double u = std::abs(lu.matrixLU()(i, i));
        if (u == 0.0) throw Error("degenerate transport");
        logabs += std::log(u);
    }
    if (logabs < std::log(1e-300)) throw Error("degenerate transport");
    return logabs;
}

VerifyReport gradcheck(const std::string& name, const LossEvaluator& loss, const ParamSet<double>& params,
                       const ParamSet<double>& analytic, double tolerance) {
    const auto t0 = Clock::now();
    if (!params.same_layout(analytic)) throw Error("shape mismatch");
    ParamSet<double> probe = params;
    double worst = 0.0;
    for (std::size_t e = 0; e < probe.size(); ++e) {
        auto& value = probe.entries()[e].value;
        const auto& grad = analytic.entries()[e].value;
        for (Eigen::Index i = 0; i < value.size(); ++i) {
            const double x0 = value.data()[i];
            const double h = 1e-5 * std::max(1.0, std::abs(x0));
            value.data()[i] = x0 + h;
            const double xp = value.data()[i];
            const double lp = loss(probe);
            value.data()[i] = x0 - h;
            const double xm = value.data()[i];
            const double lm = loss(probe);
            value.data()[i] = x0;
            const double fd = (lp - lm) / (xp - xm);
            const double a = grad.data()[i];
            const double rel = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-4});
            worst = std::max(worst, rel);
        }
    }
    return VerifyReport{name, worst < tolerance, worst, tolerance, seconds_since(t0)};
}

template <class T>
VerifyReport check_invertibility(const FlowModel<T>& model, int n_trials, double tolerance, std::uint64_t seed) {
    if (n_trials < 1) throw Error("n_trials must be >= 1");
    const auto t0 = Clock::now();
    Rng rng(seed, 0x696e76ULL);
    const auto& cfg = model.config;
    std::vector<TokenField> y;
    std::vector<int> labels;
    for (int t = 0; t < n_trials; ++t) {
        y.push_back(gaussian_field(cfg.tokens, cfg.channels, rng));
        // Uniform over the classes and the null label.
        const auto pick = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.num_classes) + 1));
        labels.push_back(pick == cfg.num_classes ? kNullLabel : pick);
    }
    const auto fwd = flow_forward_batch<T>(y, labels, model);
    std::vector<TokenField> u;
    for (const auto& r : fwd) u.push_back(r.u);
    const auto back = flow_inverse_batch<T>(u, labels, GuidanceSpec{}, model);
    double worst = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i)
        worst = std::max(worst, (back[i].data() - y[i].data()).cwiseAbs().maxCoeff());
    return VerifyReport{std::string("invertibility_") + (sizeof(T) == 4 ? "32" : "64"), worst <= tolerance, worst,
                        tolerance, seconds_since(t0)};
}

VerifyReport gaussian_nll_check(const FlowModel<double>& model, int n_samples, std::uint64_t seed, double tolerance,
                                double data_std) {
    const auto t0 = Clock::now();
    Rng rng(seed, 0x6e6c6cULL);
    const auto& cfg = model.config;
    double total = 0.0;
    constexpr int chunk = 500;
    for (int start = 0; start < n_samples; start += chunk) {
        const int count = std::min(chunk, n_samples - start);
        std::vector<TokenField> y;
        for (int i = 0; i < count; ++i) y.push_back(gaussian_field(cfg.tokens, cfg.channels, rng, data_std));
        const std::vector<int> labels(static_cast<std::size_t>(count), kNullLabel);
        for (const auto& r : flow_forward_batch<double>(y, labels, model))
            total += 0.5 * r.u.data().squaredNorm() - r.logdet + gaussian_constant(cfg.tokens, cfg.channels);
    }
    const double per_dim = total / (static_cast<double>(n_samples) * cfg.tokens * cfg.channels);
    return VerifyReport{"gaussian_nll", std::abs(per_dim - kGaussianEntropyPerDim) <= tolerance, per_dim, tolerance,
                        seconds_since(t0)};
}

double histogram_tv(std::span<const Point2> a, std::span<const Point2> b, int bins, const Range2& range) {
    if (a.empty() || b.empty()) throw Error("empty sample set");
    if (bins < 2) throw Error("bins must be >= 2");
    if (!(range.x_max > range.x_min && range.y_max > range.y_min)) throw Error("empty histogram range");
    const auto fill = [&](std::span<const Point2> pts) {
        Eigen::MatrixXd h = Eigen::MatrixXd::Zero(bins, bins);
        double count = 0.0;
        for (const auto& p : pts) {
            const double fx = (p[0] - range.x_min) / (range.x_max - range.x_min);
            const double fy = (p[1] - range.y_min) / (range.y_max - range.y_min);
            if (!(fx >= 0.0 && fx < 1.0 && fy >= 0.0 && fy < 1.0)) continue;
            h(static_cast<Eigen::Index>(fx * bins), static_cast<Eigen::Index>(fy * bins)) += 1.0;
            count += 1.0;
        }
        if (count == 0.0) throw Error("empty sample set");
        return Eigen::MatrixXd(h / count);
    };
    return 0.5 * (fill(a) - fill(b)).cwiseAbs().sum();
}

double flow_loss_value(const FlowModel<double>& model, std::span<const TokenField> fields, std::span<const int> labels) {
    ag::Tape<double> tape(false);
    const Bound<double> b(tape, model.params);
    return flow_loss_graph(b, model.config, tape.constant(stack_fields<double>(fields)), labels).value()(0, 0);
}

ParamSet<double> flow_loss_grad(const FlowModel<double>& model, std::span<const TokenField> fields,
                                std::span<const int> labels) {
    ag::Tape<double> tape;
    const Bound<double> b(tape, model.params);
    tape.backward(flow_loss_graph(b, model.config, tape.constant(stack_fields<double>(fields)), labels));
    return b.grads();
}

namespace {

ag::Var<double> src_roundtrip_graph(const Bound<double>& b, const SrcConfig& cfg, ag::Tape<double>& tape,
                                    std::span<const TokenField> fields) {
    const int batch = static_cast<int>(fields.size());
    const auto z = tape.constant(stack_fields<double>(fields));
    const auto zhat = src_decode_graph(b, cfg, src_encode_graph(b, cfg, z, batch), batch);
    return ag::scale(ag::sum_squares(ag::sub(zhat, z)), 1.0 / static_cast<double>(z.value().size()));
}

}  // namespace

double src_roundtrip_loss_value(const SrcParams<double>& src, std::span<const TokenField> fields) {
    ag::Tape<double> tape(false);
    const Bound<double> b(tape, src.params);
    return src_roundtrip_graph(b, src.config, tape, fields).value()(0, 0);
}

ParamSet<double> src_roundtrip_loss_grad(const SrcParams<double>& src, std::span<const TokenField> fields) {
    ag::Tape<double> tape;
    const Bound<double> b(tape, src.params);
    tape.backward(src_roundtrip_graph(b, src.config, tape, fields));
    return b.grads();
}

std::vector<VerifyReport> run_verify_suite(const FlowModel<double>* loaded, std::uint64_t seed) {
    std::vector<VerifyReport> out;

    // Identity flow: zero heads make every block the identity map.
    FlowConfig small;
    small.blocks = 6;
    small.width = 16;
    small.heads = 2;
    small.deep_layers = 2;
    small.channels = 2;
    small.tokens = 4;
    small.num_classes = 3;
    const auto zero = init_flow<double>(small, FlowInit::zero_head, seed);
    {
        auto r = check_invertibility<double>(zero, 20, 0.0, seed);
        r.check = "identity_roundtrip";
        out.push_back(r);
    }
    {
        const auto t0 = Clock::now();
        Rng rng(seed, 1);
        FlowConfig tiny = small;
        tiny.tokens = 2;
        const auto z2 = init_flow<double>(tiny, FlowInit::zero_head, seed);
        const double v = jacobian_logdet_oracle(z2, gaussian_field(2, 2, rng), 0);
        out.push_back({"identity_logdet_oracle", std::abs(v) <= 1e-6, std::abs(v), 1e-6, seconds_since(t0)});
    }
    {
        auto r = gaussian_nll_check(zero, 10000, seed, 0.02);
        r.check = "identity_gaussian_nll";
        out.push_back(r);
    }

    // Analytic logdet against the dense finite-difference Jacobian.
    {
        const auto t0 = Clock::now();
        double worst = 0.0;
        for (int trial = 0; trial < 5; ++trial) {
            FlowConfig tiny;
            tiny.blocks = 2;
            tiny.width = 8;
            tiny.heads = 2;
            tiny.deep_layers = 1;
            tiny.mlp_ratio = 2;
            tiny.channels = 2;
            tiny.tokens = 2;
            tiny.num_classes = 2;
            const auto model = init_flow<double>(tiny, FlowInit::random, Rng::derive(seed, 2, trial), 0.5);
            Rng rng(Rng::derive(seed, 3, trial));
            const auto y = gaussian_field(2, 2, rng);
            const double analytic = flow_forward<double>(y, trial % 2, model).logdet;
            const double oracle = jacobian_logdet_oracle(model, y, trial % 2);
            worst = std::max(worst, std::abs(analytic - oracle) / std::max(std::abs(oracle), 1e-12));
        }
        out.push_back({"logdet_exactness", worst < 1e-4, worst, 1e-4, seconds_since(t0)});
    }

    // Gradients of L_NF and of the compressor round-trip loss.
    {
        FlowConfig tiny;
        tiny.blocks = 1;
        tiny.width = 4;
        tiny.heads = 1;
        tiny.deep_layers = 1;
        tiny.mlp_ratio = 1;
        tiny.channels = 1;
        tiny.tokens = 2;
        tiny.num_classes = 2;
        const auto model = init_flow<double>(tiny, FlowInit::random, Rng::derive(seed, 4), 0.5);
        Rng rng(seed, 5);
        const std::vector<TokenField> y{gaussian_field(2, 1, rng), gaussian_field(2, 1, rng)};
        const std::vector<int> labels{0, kNullLabel};
        const auto loss = [&](const ParamSet<double>& p) {
            return flow_loss_value(FlowModel<double>{tiny, p}, y, labels);
        };
        out.push_back(gradcheck("gradcheck_flow", loss, model.params, flow_loss_grad(model, y, labels), 1e-4));
    }
    {
        SrcConfig tiny;
        tiny.n = 4;
        tiny.d = 2;
        tiny.layers = 1;
        tiny.heads = 1;
        tiny.mlp_ratio = 1;
        tiny.tokens = 2;
        const auto src = init_src<double>(tiny, SrcInit::random_full, Rng::derive(seed, 6));
        Rng rng(seed, 7);
        const std::vector<TokenField> z{gaussian_field(2, 4, rng), gaussian_field(2, 4, rng)};
        const auto loss = [&](const ParamSet<double>& p) { return src_roundtrip_loss_value(SrcParams<double>{tiny, p}, z); };
        out.push_back(gradcheck("gradcheck_src", loss, src.params, src_roundtrip_loss_grad(src, z), 1e-4));
    }

    // Bijectivity of a random model at both precisions.
    {
        FlowConfig cfg = small;
        cfg.tokens = 8;
        cfg.channels = 4;
        const auto model = init_flow<double>(cfg, FlowInit::random, Rng::derive(seed, 8), 0.3);
        out.push_back(check_invertibility<double>(model, 20, 1e-8, seed));
        out.push_back(check_invertibility<float>(model.cast<float>(), 20, 1e-3, seed));
    }

    if (loaded) {
        auto r = check_invertibility<double>(*loaded, 10, 1e-8, seed);
        r.check = "loaded_model_invertibility";
        out.push_back(r);
    }
    return out;
}

template VerifyReport check_invertibility<float>(const FlowModel<float>&, int, double, std::uint64_t);
template VerifyReport check_invertibility<double>(const FlowModel<double>&, int, double, std::uint64_t);

}  // namespace srcflow
