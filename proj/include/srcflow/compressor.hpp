#pragma once

// Semantic representation compressor: an attention autoencoder that maps
// N x n token fields to N x d and back.
//
//   encode: z + pos_enc -> L blocks at width n -> linear n->d
//   decode: linear d->n + pos_dec -> L blocks at width n

#include <cstdint>
#include <span>
#include <vector>

#include "srcflow/autograd.hpp"
#include "srcflow/params.hpp"
#include "srcflow/tokenfield.hpp"

namespace srcflow {

struct SrcConfig {
    int n = 64;         // input channels (also the attention width)
    int d = 8;          // compact channels
    int layers = 2;     // blocks per side
    int heads = 4;
    int mlp_ratio = 4;
    int tokens = 16;    // rows of the positional tables

    int width() const noexcept { return n; }
    void validate() const;

    /// Full-scale preset (n = 768, d = 32, L = 4).
    static SrcConfig full_scale(int tokens = 256);
};

enum class SrcInit {
    /// Residual branches and positional tables zero, projections select the
    /// first d channels: encode(z) is exactly the channel slice z[:, :d].
    identity,
    /// Random projections; residual outputs still zero.
    random,
    /// Every weight random, residual outputs included (verification use).
    random_full,
};

template <class T>
struct SrcParams {
    SrcConfig config;
    ParamSet<T> params;

    template <class U>
    SrcParams<U> cast() const {
        return SrcParams<U>{config, params.template cast<U>()};
    }
};

template <class T>
SrcParams<T> init_src(const SrcConfig& config, SrcInit init, std::uint64_t seed);

/// Graph builders over a batch of `batch` sequences stacked row-wise.
template <class T>
ag::Var<T> src_encode_graph(const Bound<T>& b, const SrcConfig& config, ag::Var<T> z, int batch);
template <class T>
ag::Var<T> src_decode_graph(const Bound<T>& b, const SrcConfig& config, ag::Var<T> zc, int batch);

template <class T>
TokenField src_encode(const TokenField& z, const SrcParams<T>& params);
template <class T>
TokenField src_decode(const TokenField& zc, const SrcParams<T>& params);

/// Batched inference; every field must share the same token count.
template <class T>
std::vector<TokenField> src_encode_batch(std::span<const TokenField> z, const SrcParams<T>& params);
template <class T>
std::vector<TokenField> src_decode_batch(std::span<const TokenField> zc, const SrcParams<T>& params);

/// Mean squared error over all entries.
double src_loss(const TokenField& z, const TokenField& z_hat);

}  // namespace srcflow
