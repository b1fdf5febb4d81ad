#include "srcflow/compressor.hpp"

#include <cmath>
#include <string>

#include "srcflow/batch.hpp"
#include "srcflow/layers.hpp"
#include "srcflow/rng.hpp"

namespace srcflow {

void SrcConfig::validate() const {
    if (n < 1 || d < 1 || d > n) throw Error("src config: need 1 <= d <= n");
    if (layers < 1) throw Error("src config: layers must be >= 1");
    if (heads < 1 || width() % heads != 0) throw Error("src config: width must be divisible by heads");
    if (mlp_ratio < 1) throw Error("src config: mlp_ratio must be >= 1");
    if (tokens < 1) throw Error("src config: tokens must be >= 1");
}

SrcConfig SrcConfig::full_scale(int tokens) {
    SrcConfig c;
    c.n = 768;
    c.d = 32;
    c.layers = 4;
    c.heads = 12;
    c.tokens = tokens;
    return c;
}

namespace {

std::string enc_block(int l) { return "enc.block" + std::to_string(l); }
std::string dec_block(int l) { return "dec.block" + std::to_string(l); }

}  // namespace

template <class T>
SrcParams<T> init_src(const SrcConfig& config, SrcInit init, std::uint64_t seed) {
    config.validate();
    Rng rng(seed, 0x737263ULL);
    const int n = config.n, d = config.d;
    layers::InitSpec spec;
    spec.weight_std = 1.0 / std::sqrt(static_cast<double>(n));
    spec.zero_residual_out = init != SrcInit::random_full;

    SrcParams<T> out{config, {}};
    auto& ps = out.params;
    ps.add("enc.pos", init == SrcInit::random_full ? layers::gaussian<T>(config.tokens, n, 0.1, rng)
                                                   : ag::Mat<T>::Zero(config.tokens, n));
    for (int l = 0; l < config.layers; ++l) layers::add_block(ps, enc_block(l), n, n * config.mlp_ratio, spec, rng);

    ag::Mat<T> down = ag::Mat<T>::Zero(n, d);
    ag::Mat<T> up = ag::Mat<T>::Zero(d, n);
    if (init == SrcInit::identity) {
        for (int j = 0; j < d; ++j) down(j, j) = up(j, j) = T(1);
    } else {
        down = layers::gaussian<T>(n, d, 1.0 / std::sqrt(static_cast<double>(n)), rng);
        up = layers::gaussian<T>(d, n, 1.0 / std::sqrt(static_cast<double>(d)), rng);
    }
    ps.add("proj_down.w", std::move(down));
    ps.add("proj_down.b", ag::Mat<T>::Zero(1, d));
    ps.add("proj_up.w", std::move(up));
    ps.add("proj_up.b", ag::Mat<T>::Zero(1, n));

    ps.add("dec.pos", init == SrcInit::random_full ? layers::gaussian<T>(config.tokens, n, 0.1, rng)
                                                   : ag::Mat<T>::Zero(config.tokens, n));
    for (int l = 0; l < config.layers; ++l) layers::add_block(ps, dec_block(l), n, n * config.mlp_ratio, spec, rng);
    return out;
}

template <class T>
ag::Var<T> src_encode_graph(const Bound<T>& b, const SrcConfig& config, ag::Var<T> z, int batch) {
    if (z.cols() != config.n || batch < 1 || z.rows() % batch != 0) throw Error("shape mismatch");
    const auto tokens = z.rows() / batch;
    if (tokens > config.tokens) throw Error("shape mismatch: more tokens than the positional table");
    auto x = ag::add_tiled(z, ag::top_rows(b("enc.pos"), tokens), batch);
    for (int l = 0; l < config.layers; ++l) x = layers::apply_block(b, enc_block(l), x, batch, config.heads, false);
    return layers::apply_linear(b, std::string("proj_down"), x);
}

template <class T>
ag::Var<T> src_decode_graph(const Bound<T>& b, const SrcConfig& config, ag::Var<T> zc, int batch) {
    if (zc.cols() != config.d || batch < 1 || zc.rows() % batch != 0) throw Error("shape mismatch");
    const auto tokens = zc.rows() / batch;
    if (tokens > config.tokens) throw Error("shape mismatch: more tokens than the positional table");
    auto x = layers::apply_linear(b, std::string("proj_up"), zc);
    x = ag::add_tiled(x, ag::top_rows(b("dec.pos"), tokens), batch);
    for (int l = 0; l < config.layers; ++l) x = layers::apply_block(b, dec_block(l), x, batch, config.heads, false);
    return x;
}

template <class T>
std::vector<TokenField> src_encode_batch(std::span<const TokenField> z, const SrcParams<T>& params) {
    ag::Tape<T> tape(false);
    const Bound<T> b(tape, params.params);
    const int batch = static_cast<int>(z.size());
    const auto out = src_encode_graph(b, params.config, tape.constant(stack_fields<T>(z)), batch);
    return unstack_fields<T>(out.value(), batch);
}

template <class T>
std::vector<TokenField> src_decode_batch(std::span<const TokenField> zc, const SrcParams<T>& params) {
    ag::Tape<T> tape(false);
    const Bound<T> b(tape, params.params);
    const int batch = static_cast<int>(zc.size());
    const auto out = src_decode_graph(b, params.config, tape.constant(stack_fields<T>(zc)), batch);
    return unstack_fields<T>(out.value(), batch);
}

template <class T>
TokenField src_encode(const TokenField& z, const SrcParams<T>& params) {
    return src_encode_batch<T>(std::span<const TokenField>(&z, 1), params).front();
}

template <class T>
TokenField src_decode(const TokenField& zc, const SrcParams<T>& params) {
    return src_decode_batch<T>(std::span<const TokenField>(&zc, 1), params).front();
}

double src_loss(const TokenField& z, const TokenField& z_hat) {
    if (z.tokens() != z_hat.tokens() || z.channels() != z_hat.channels()) throw Error("shape mismatch");
    return (z.data() - z_hat.data()).squaredNorm() / static_cast<double>(z.data().size());
}

#define SRCFLOW_INSTANTIATE(T)                                                                              \
    template SrcParams<T> init_src<T>(const SrcConfig&, SrcInit, std::uint64_t);                          \
    template ag::Var<T> src_encode_graph<T>(const Bound<T>&, const SrcConfig&, ag::Var<T>, int);           \
    template ag::Var<T> src_decode_graph<T>(const Bound<T>&, const SrcConfig&, ag::Var<T>, int);           \
    template std::vector<TokenField> src_encode_batch<T>(std::span<const TokenField>, const SrcParams<T>&); \
    template std::vector<TokenField> src_decode_batch<T>(std::span<const TokenField>, const SrcParams<T>&); \
    template TokenField src_encode<T>(const TokenField&, const SrcParams<T>&);                             \
    template TokenField src_decode<T>(const TokenField&, const SrcParams<T>&);

SRCFLOW_INSTANTIATE(float)
SRCFLOW_INSTANTIATE(double)
#undef SRCFLOW_INSTANTIATE

}  // namespace srcflow
