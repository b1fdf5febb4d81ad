#pragma once

// Pre-norm transformer block shared by the compressor and the flow:
//   x <- x + Wo * Attn(LN1(x))
//   x <- x + W2 * gelu(W1 * LN2(x))

#include <cmath>
#include <string>

#include "srcflow/autograd.hpp"
#include "srcflow/params.hpp"
#include "srcflow/rng.hpp"

namespace srcflow::layers {

struct InitSpec {
    double weight_std = 0.02;
    /// Zero the output projection of every residual branch (identity block).
    bool zero_residual_out = true;
};

template <class T>
ag::Mat<T> gaussian(Eigen::Index rows, Eigen::Index cols, double std, Rng& rng) {
    ag::Mat<T> m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(std * rng.normal());
    return m;
}

template <class T>
void add_linear(ParamSet<T>& ps, const std::string& name, int in, int out, double std, Rng& rng) {
    ps.add(name + ".w", std > 0.0 ? gaussian<T>(in, out, std, rng) : ag::Mat<T>::Zero(in, out));
    ps.add(name + ".b", ag::Mat<T>::Zero(1, out));
}

template <class T>
void add_layer_norm(ParamSet<T>& ps, const std::string& name, int width) {
    ps.add(name + ".g", ag::Mat<T>::Ones(1, width));
    ps.add(name + ".b", ag::Mat<T>::Zero(1, width));
}

template <class T>
void add_block(ParamSet<T>& ps, const std::string& p, int width, int hidden, const InitSpec& init, Rng& rng) {
    const double out_std = init.zero_residual_out ? 0.0 : init.weight_std;
    add_layer_norm(ps, p + ".ln1", width);
    add_linear(ps, p + ".q", width, width, init.weight_std, rng);
    add_linear(ps, p + ".k", width, width, init.weight_std, rng);
    add_linear(ps, p + ".v", width, width, init.weight_std, rng);
    add_linear(ps, p + ".o", width, width, out_std, rng);
    add_layer_norm(ps, p + ".ln2", width);
    add_linear(ps, p + ".fc1", width, hidden, init.weight_std, rng);
    add_linear(ps, p + ".fc2", hidden, width, out_std, rng);
}

template <class T>
ag::Var<T> apply_linear(const Bound<T>& b, const std::string& name, ag::Var<T> x) {
    return ag::linear(x, b(name + ".w"), b(name + ".b"));
}

template <class T>
ag::Var<T> apply_layer_norm(const Bound<T>& b, const std::string& name, ag::Var<T> x) {
    return ag::layer_norm(x, b(name + ".g"), b(name + ".b"));
}

template <class T>
ag::Var<T> apply_block(const Bound<T>& b, const std::string& p, ag::Var<T> x, int batch, int heads, bool causal) {
    const auto h = apply_layer_norm(b, p + ".ln1", x);
    const auto att = ag::attention(apply_linear(b, p + ".q", h), apply_linear(b, p + ".k", h),
                                   apply_linear(b, p + ".v", h), batch, heads, causal);
    x = ag::add(x, apply_linear(b, p + ".o", att));
    const auto h2 = apply_layer_norm(b, p + ".ln2", x);
    return ag::add(x, apply_linear(b, p + ".fc2", ag::gelu(apply_linear(b, p + ".fc1", h2))));
}

}  // namespace srcflow::layers
