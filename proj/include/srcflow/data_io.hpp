#pragma once

// Synthetic generators and the on-disk formats.
//
// SFTK dataset (little-endian):
//   "SFTK" | u32 version | u32 example_count | u32 N | u32 c | u8 has_labels
//   | f32 payload[example_count * N * c] (example-major, row-major)
//   | i32 labels[example_count] (only when has_labels)
//
// Stats files are SFTK files with two N = 1 examples: mu, then sigma.
//
// SFCK checkpoint (little-endian):
//   "SFCK" | u32 version | u32 config_len | config text
//   | repeated { u32 name_len | name | u32 rank | u32 dims[rank] | f32 payload }
//   | u32 CRC32 of every preceding byte

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "srcflow/compressor.hpp"
#include "srcflow/rng.hpp"
#include "srcflow/flow.hpp"
#include "srcflow/training.hpp"
#include "srcflow/tokenfield.hpp"
#include "srcflow/verify.hpp"

namespace srcflow {

inline constexpr std::uint32_t kFormatVersion = 1;

// -- generators ------------------------------------------------------------------

/// r x n matrix with orthonormal rows, a deterministic function of (n, r, seed).
Matrix low_rank_basis(int n, int rank, std::uint64_t seed);

/// Tokens = coefficients ~ N(0, diag(spectrum)) times the basis, plus
/// N(0, noise_std^2) ambient noise.
Dataset gen_low_rank(int examples, int tokens, int n, int rank, const std::vector<double>& spectrum, double noise_std,
                     std::uint64_t seed);

inline constexpr double kMixtureStd = 0.1;

/// Component means: a single component sits at the origin, otherwise all
/// classes * components_per_class means are spread evenly on the unit circle.
std::vector<Point2> mixture_centers(int classes, int components_per_class);

/// One ground-truth draw of class `label`.
Point2 sample_mixture(int label, int classes, int components_per_class, Rng& rng);

/// Labeled N = 1, c = 2 dataset; labels uniform over classes.
Dataset gen_class_mixture(int examples, int classes, int components_per_class, std::uint64_t seed);

// -- byte formats ------------------------------------------------------------------

std::string encode_dataset(const Dataset& data);
Dataset decode_dataset(std::string_view bytes);

struct Section {
    std::string name;
    std::vector<std::uint32_t> dims;
    std::vector<float> data;
};

struct Checkpoint {
    std::string config_text;
    std::vector<Section> sections;

    const Section* find(std::string_view name) const;
};

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::string_view bytes);

std::string read_file(const std::filesystem::path& path);
/// Writes to a sibling temporary file, then renames over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

Dataset read_dataset(const std::filesystem::path& path);
void write_dataset(const std::filesystem::path& path, const Dataset& data);

ChannelStats read_stats(const std::filesystem::path& path);
void write_stats(const std::filesystem::path& path, const ChannelStats& stats);

Checkpoint read_checkpoint(const std::filesystem::path& path);
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);

/// Appends every parameter as a section named prefix + parameter name.
template <class T>
void add_sections(Checkpoint& ckpt, const std::string& prefix, const ParamSet<T>& params);

/// Fills `layout` (which fixes names and shapes) from sections named prefix + name.
template <class T>
void load_sections(const Checkpoint& ckpt, const std::string& prefix, ParamSet<T>& layout);

void add_stats_sections(Checkpoint& ckpt, const std::string& prefix, const ChannelStats& stats);
ChannelStats load_stats_sections(const Checkpoint& ckpt, const std::string& prefix);

// -- configuration ------------------------------------------------------------------

/// Sectioned key = value configuration: [src], [flow], [train], [noise].
struct PipelineConfig {
    SrcConfig src;
    FlowConfig flow;
    TrainConfig train;
    bool has_noise = false;  // true when the file set [noise] explicitly

    /// Unknown sections or keys and malformed values are errors.
    static PipelineConfig parse(std::string_view text);
    static PipelineConfig load(const std::filesystem::path& path);
};

/// Canonical text of the given sections, fixed key order, 17 significant digits.
std::string canonical_src_config(const SrcConfig& c);
std::string canonical_flow_config(const FlowConfig& c);

// -- metrics ------------------------------------------------------------------------

std::string metrics_csv(const MetricLog& log);

}  // namespace srcflow
