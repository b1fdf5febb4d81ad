#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "srcflow/compressor.hpp"
#include "srcflow/flow.hpp"
#include "srcflow/params.hpp"
#include "srcflow/tokenfield.hpp"

namespace srcflow {

struct VerifyReport {
    std::string check;
    bool pass = false;
    double measured = 0.0;
    double tolerance = 0.0;
    double runtime_seconds = 0.0;
};

/// 0.5 * ln(2 pi e): per-dimension entropy of a standard normal.
inline constexpr double kGaussianEntropyPerDim = 1.4189385332046727;

/// log|det| of the dense Jacobian of flow_forward, built by central finite
/// differences with step h = 1e-5 * max(1, |x|), Richardson-extrapolated with
/// step h / 2. Needs N * d <= 16.
double jacobian_logdet_oracle(const FlowModel<double>& model, const TokenField& field, int label);

using LossEvaluator = std::function<double(const ParamSet<double>&)>;

/// Compares `analytic` against central finite differences of `loss` for
/// every scalar of `params`. measured = max |a - f| / max(|a|, |f|, 1e-4).
VerifyReport gradcheck(const std::string& name, const LossEvaluator& loss, const ParamSet<double>& params,
                       const ParamSet<double>& analytic, double tolerance);

/// max over trials of |flow_inverse(flow_forward(y)) - y|_inf for y ~ N(0, I).
template <class T>
VerifyReport check_invertibility(const FlowModel<T>& model, int n_trials, double tolerance, std::uint64_t seed);

/// Mean full NLL per dimension of `n_samples` fields drawn from
/// N(0, data_std^2 I), compared with 0.5 ln(2 pi e).
VerifyReport gaussian_nll_check(const FlowModel<double>& model, int n_samples, std::uint64_t seed,
                                double tolerance = 0.05, double data_std = 1.0);

using Point2 = std::array<double, 2>;

struct Range2 {
    double x_min, x_max, y_min, y_max;
};

/// Half the L1 distance between the normalized 2D histograms of a and b.
/// Points outside the range are dropped from both counts.
double histogram_tv(std::span<const Point2> a, std::span<const Point2> b, int bins, const Range2& range);

/// Loss evaluators whose analytic gradients come from the tape.
double flow_loss_value(const FlowModel<double>& model, std::span<const TokenField> fields, std::span<const int> labels);
ParamSet<double> flow_loss_grad(const FlowModel<double>& model, std::span<const TokenField> fields,
                                std::span<const int> labels);
double src_roundtrip_loss_value(const SrcParams<double>& src, std::span<const TokenField> fields);
ParamSet<double> src_roundtrip_loss_grad(const SrcParams<double>& src, std::span<const TokenField> fields);

/// The oracle suite behind `srcflow verify`. Runs identity-flow checks on a
/// fresh zero-initialized model, logdet/gradient/invertibility checks on tiny
/// random models, and invertibility on `loaded` when given.
std::vector<VerifyReport> run_verify_suite(const FlowModel<double>* loaded, std::uint64_t seed);

}  // namespace srcflow
