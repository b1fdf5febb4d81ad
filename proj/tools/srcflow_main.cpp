// srcflow: command-line driver for the two-stage pipeline.
//
// Exit status: 0 success, 1 failed check or divergence, 2 usage or invalid
// input, 3 I/O or file-format error.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "srcflow/compressor.hpp"
#include "srcflow/data_io.hpp"
#include "srcflow/flow.hpp"
#include "srcflow/rng.hpp"
#include "srcflow/tokenfield.hpp"
#include "srcflow/training.hpp"
#include "srcflow/verify.hpp"

using namespace srcflow;
namespace fs = std::filesystem;

namespace {

constexpr int kExitCheck = 1;
constexpr int kExitUsage = 2;
constexpr int kExitIo = 3;

struct Options {
    std::string config, out, data, ckpt, metrics, decoded, kind = "low-rank";
    std::uint64_t seed = 0;
    int label = kNullLabel;
    double cfg = 0.0;
    int count = 1000;
    int precision = 32;
    int rank = 8;
    double noise_std = 0.0;
    int classes = 4;
    int components = 1;
    double sigma = 0.4;
    double test_fraction = 0.2;
    bool ema = false;
};

PipelineConfig load_config(const Options& o) {
    return o.config.empty() ? PipelineConfig{} : PipelineConfig::load(o.config);
}

void write_text(const std::string& path, const std::string& text) {
    if (path.empty() || path == "-") {
        std::cout << text;
        return;
    }
    write_file_atomic(path, text);
}

std::string default_metrics_path(const Options& o) { return o.metrics.empty() ? o.out + ".metrics.csv" : o.metrics; }

int dataset_classes(const Dataset& d) {
    int top = -1;
    for (int l : d.labels) top = std::max(top, l);
    return top + 1;
}

// -- checkpoints ----------------------------------------------------------------------

template <class T>
struct Pipeline {
    std::optional<SrcParams<T>> src;
    ChannelStats rae;
    ChannelStats compact;
    FlowModel<T> flow;
    FlowModel<T> ema;
};

template <class T>
SrcParams<T> load_src(const Checkpoint& ck) {
    const auto cfg = PipelineConfig::parse(ck.config_text);
    auto src = init_src<T>(cfg.src, SrcInit::identity, 0);
    load_sections(ck, "src/", src.params);
    return src;
}

template <class T>
Pipeline<T> load_pipeline(const std::string& path) {
    const auto ck = read_checkpoint(path);
    const auto cfg = PipelineConfig::parse(ck.config_text);
    if (!ck.find("flow/class_emb")) throw FormatError(FormatErrc::malformed, path + " holds no flow parameters");
    Pipeline<T> p{std::nullopt, load_stats_sections(ck, "stats/rae."), load_stats_sections(ck, "stats/compact."),
                  init_flow<T>(cfg.flow, FlowInit::zero_head, 0), init_flow<T>(cfg.flow, FlowInit::zero_head, 0)};
    load_sections(ck, "flow/", p.flow.params);
    load_sections(ck, "ema/", p.ema.params);
    if (ck.find("src/proj_down.w")) p.src = load_src<T>(ck);
    return p;
}

// -- commands -------------------------------------------------------------------------

int cmd_gen_data(const Options& o) {
    const auto cfg = load_config(o);
    Dataset d;
    if (o.kind == "low-rank") {
        std::vector<double> spectrum;
        if (o.rank == 8)
            spectrum = {8, 6, 5, 4, 3, 2, 1.5, 1};
        else
            for (int k = o.rank; k >= 1; --k) spectrum.push_back(static_cast<double>(k));
        d = gen_low_rank(o.count, cfg.src.tokens, cfg.src.n, o.rank, spectrum, o.noise_std, o.seed);
    } else if (o.kind == "mixture") {
        d = gen_class_mixture(o.count, o.classes, o.components, o.seed);
    } else {
        throw Error("unknown --kind " + o.kind + " (low-rank or mixture)");
    }
    write_dataset(o.out, d);
    return 0;
}

int cmd_stats(const Options& o) {
    write_stats(o.out, compute_channel_stats(read_dataset(o.data).fields));
    return 0;
}

int cmd_pca(const Options& o) {
    const auto d = read_dataset(o.data);
    const auto stats = compute_channel_stats(d.fields);
    std::vector<TokenField> z;
    z.reserve(d.size());
    for (const auto& f : d.fields) z.push_back(normalize(f, stats));
    const auto rep = pca_spectrum(z);
    const int dim = intrinsic_dim(rep, 0.99);
    std::ostringstream ss;
    ss << "component,eigenvalue,cumulative_explained,intrinsic_dim_0.99\n" << std::setprecision(12);
    for (Eigen::Index k = 0; k < rep.eigenvalues.size(); ++k)
        ss << k + 1 << ',' << rep.eigenvalues(k) << ',' << rep.cumulative_explained(k) << ',' << dim << '\n';
    write_text(o.out, ss.str());
    return 0;
}

template <class T>
int cmd_train_src(const Options& o) {
    auto cfg = load_config(o);
    const auto data = read_dataset(o.data);
    cfg.src.n = static_cast<int>(data.fields.front().channels());
    cfg.src.tokens = static_cast<int>(data.fields.front().tokens());
    cfg.src.validate();
    auto tc = cfg.train;
    tc.seed = o.seed;
    if (!cfg.has_noise) tc.noise = NoiseSpec::per_sample_uniform(0.8);
    const auto rae = compute_channel_stats(data.fields);
    MetricLog log;
    const auto src = train_src<T>(data, rae, cfg.src, tc, &log);
    Checkpoint ck;
    ck.config_text = canonical_src_config(cfg.src);
    add_sections(ck, "src/", src.params);
    add_stats_sections(ck, "stats/rae.", rae);
    write_checkpoint(o.out, ck);
    write_file_atomic(default_metrics_path(o), metrics_csv(log));
    return 0;
}

template <class T>
int cmd_train_flow(const Options& o) {
    auto cfg = load_config(o);
    const auto data = read_dataset(o.data);
    auto tc = cfg.train;
    tc.seed = o.seed;
    if (!cfg.has_noise) tc.noise = NoiseSpec::constant(0.4);

    std::optional<SrcParams<T>> src;
    ChannelStats rae;
    if (!o.ckpt.empty()) {
        const auto ck = read_checkpoint(o.ckpt);
        src = load_src<T>(ck);
        rae = load_stats_sections(ck, "stats/rae.");
        cfg.src = src->config;
        cfg.flow.channels = cfg.src.d;
    } else {
        rae = compute_channel_stats(data.fields);
        cfg.flow.channels = static_cast<int>(data.fields.front().channels());
    }
    cfg.flow.tokens = static_cast<int>(data.fields.front().tokens());
    if (data.has_labels() && dataset_classes(data) > cfg.flow.num_classes)
        throw Error("dataset labels exceed [flow] num_classes");
    cfg.flow.validate();

    const SrcParams<T>* sp = src ? &*src : nullptr;
    const auto compact = compute_compact_stats<T>(data, sp, rae, tc.noise, tc.seed);
    MetricLog log;
    const auto run = train_flow<T>(data, sp, rae, compact, cfg.flow, tc, &log);

    Checkpoint ck;
    ck.config_text = (src ? canonical_src_config(cfg.src) : std::string()) + canonical_flow_config(cfg.flow);
    add_sections(ck, "flow/", run.model.params);
    add_sections(ck, "ema/", run.ema.shadow);
    if (src) add_sections(ck, "src/", src->params);
    add_stats_sections(ck, "stats/rae.", rae);
    add_stats_sections(ck, "stats/compact.", compact);
    write_checkpoint(o.out, ck);
    write_file_atomic(default_metrics_path(o), metrics_csv(log));
    return 0;
}

template <class T>
int cmd_sample(const Options& o) {
    const auto p = load_pipeline<T>(o.ckpt);
    const auto& model = o.ema ? p.ema : p.flow;
    const auto s = sample_pipeline<T>(model, p.src ? &*p.src : nullptr, p.rae, p.compact, o.label, GuidanceSpec{o.cfg},
                                      o.count, o.seed);
    Dataset compact{s.compact, std::vector<int>(s.compact.size(), o.label)};
    Dataset decoded{s.decoded, std::vector<int>(s.decoded.size(), o.label)};
    write_dataset(o.out, compact);
    const auto dpath = o.decoded.empty() ? fs::path(o.out).replace_extension(".decoded.sftk") : fs::path(o.decoded);
    write_dataset(dpath, decoded);
    return 0;
}

template <class T>
int cmd_nll(const Options& o) {
    const auto p = load_pipeline<T>(o.ckpt);
    const auto& model = o.ema ? p.ema : p.flow;
    const auto data = read_dataset(o.data);
    const auto cfg = load_config(o);
    const auto noise = cfg.has_noise ? cfg.train.noise : NoiseSpec::none();
    const SrcParams<T>* sp = p.src ? &*p.src : nullptr;
    const double dims = static_cast<double>(model.config.tokens) * model.config.channels;
    std::ostringstream ss;
    ss << "index,label,l_nf,nll,nll_per_dim\n" << std::setprecision(10);
    for (std::size_t i = 0; i < data.size(); ++i) {
        const int label = data.has_labels() ? data.labels[i] : kNullLabel;
        const std::uint64_t seed = Rng::derive(o.seed, i);
        const auto zc = compact_fields<T>(std::span<const TokenField>(&data.fields[i], 1), sp, p.rae, &p.compact, noise,
                                          std::span<const std::uint64_t>(&seed, 1));
        const double l = nll<T>(zc.front(), label, model);
        const double full = l + gaussian_constant(model.config.tokens, model.config.channels);
        ss << i << ',' << label << ',' << l << ',' << full << ',' << full / dims << '\n';
    }
    write_text(o.out, ss.str());
    return 0;
}

int cmd_verify(const Options& o) {
    std::optional<FlowModel<double>> loaded;
    if (!o.ckpt.empty()) loaded = load_pipeline<double>(o.ckpt).flow;
    const auto reports = run_verify_suite(loaded ? &*loaded : nullptr, o.seed);
    std::ostringstream ss;
    ss << "check,pass,measured,tolerance,runtime_seconds\n" << std::setprecision(6);
    bool ok = true;
    for (const auto& r : reports) {
        ss << r.check << ',' << (r.pass ? 1 : 0) << ',' << r.measured << ',' << r.tolerance << ',' << r.runtime_seconds
           << '\n';
        ok = ok && r.pass;
    }
    write_text(o.out, ss.str());
    if (!ok) std::cerr << "srcflow: verification failed\n";
    return ok ? 0 : kExitCheck;
}

template <class T>
int cmd_report(const Options& o) {
    auto cfg = load_config(o);
    const auto data = read_dataset(o.data);
    if (data.size() < 2) throw Error("report needs at least two examples");
    auto cut = static_cast<std::size_t>(static_cast<double>(data.size()) * (1.0 - o.test_fraction));
    cut = std::clamp<std::size_t>(cut, 1, data.size() - 1);
    Dataset train, test;
    for (std::size_t i = 0; i < data.size(); ++i) {
        auto& dst = i < cut ? train : test;
        dst.fields.push_back(data.fields[i]);
        if (data.has_labels()) dst.labels.push_back(data.labels[i]);
    }
    std::optional<SrcParams<T>> src;
    ChannelStats rae;
    if (!o.ckpt.empty()) {
        const auto ck = read_checkpoint(o.ckpt);
        src = load_src<T>(ck);
        rae = load_stats_sections(ck, "stats/rae.");
        cfg.flow.channels = src->config.d;
    } else {
        rae = compute_channel_stats(train.fields);
        cfg.flow.channels = static_cast<int>(data.fields.front().channels());
    }
    cfg.flow.tokens = static_cast<int>(data.fields.front().tokens());
    if (data.has_labels() && dataset_classes(data) > cfg.flow.num_classes)
        throw Error("dataset labels exceed [flow] num_classes");
    auto tc = cfg.train;
    tc.seed = o.seed;
    const auto r = noise_schedule_report<T>(train, test, src ? &*src : nullptr, rae, cfg.flow, tc, o.sigma);
    std::ostringstream ss;
    ss << "schedule,sigma,test_nll_per_dim\n" << std::setprecision(10);
    ss << "constant," << r.sigma << ',' << r.constant_nll << '\n';
    ss << "per_sample_uniform," << r.sigma << ',' << r.per_sample_nll << '\n';
    ss << "constant_wins,," << (r.constant_wins() ? 1 : 0) << '\n';
    write_text(o.out, ss.str());
    return 0;
}

template <class F32, class F64>
int by_precision(const Options& o, F32 f32, F64 f64) {
    return o.precision == 64 ? f64(o) : f32(o);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"srcflow: semantic representation compressor + autoregressive flow pipeline"};
    app.require_subcommand(1, 1);
    Options o;

    const auto common = [&](CLI::App* c) {
        c->add_option("--config", o.config, "Configuration file ([src] [flow] [train] [noise])")->check(CLI::ExistingFile);
        c->add_option("--seed", o.seed, "Seed for every random draw");
        c->add_option("--precision", o.precision, "Floating-point width for training and inference")
            ->check(CLI::IsMember({32, 64}));
    };

    auto* gen = app.add_subcommand("gen-data", "Generate a synthetic SFTK dataset");
    common(gen);
    gen->add_option("--out", o.out, "Output SFTK path")->required();
    gen->add_option("--count", o.count, "Number of examples")->check(CLI::PositiveNumber);
    gen->add_option("--kind", o.kind, "low-rank or mixture");
    gen->add_option("--rank", o.rank, "Intrinsic rank (low-rank)")->check(CLI::PositiveNumber);
    gen->add_option("--noise-std", o.noise_std, "Ambient noise std (low-rank)")->check(CLI::NonNegativeNumber);
    gen->add_option("--classes", o.classes, "Number of classes (mixture)")->check(CLI::PositiveNumber);
    gen->add_option("--components", o.components, "Components per class (mixture)")->check(CLI::PositiveNumber);

    auto* stats = app.add_subcommand("stats", "Per-channel statistics of a dataset");
    common(stats);
    stats->add_option("--data", o.data, "Input SFTK dataset")->required();
    stats->add_option("--out", o.out, "Output stats file")->required();

    auto* pca = app.add_subcommand("pca", "PCA spectrum of the normalized dataset as CSV");
    common(pca);
    pca->add_option("--data", o.data, "Input SFTK dataset")->required();
    pca->add_option("--out", o.out, "Output CSV (default: stdout)");

    auto* tsrc = app.add_subcommand("train-src", "Stage 1: train the compressor");
    common(tsrc);
    tsrc->add_option("--data", o.data, "Training dataset")->required();
    tsrc->add_option("--out", o.out, "Output SFCK checkpoint")->required();
    tsrc->add_option("--metrics", o.metrics, "Metrics CSV (default: <out>.metrics.csv)");

    auto* tflow = app.add_subcommand("train-flow", "Stage 2: train the flow on compact tokens");
    common(tflow);
    tflow->add_option("--data", o.data, "Training dataset")->required();
    tflow->add_option("--ckpt", o.ckpt, "Compressor checkpoint (omit to model normalized data directly)");
    tflow->add_option("--out", o.out, "Output SFCK checkpoint")->required();
    tflow->add_option("--metrics", o.metrics, "Metrics CSV (default: <out>.metrics.csv)");

    auto* sample = app.add_subcommand("sample", "Sample compact fields and decode them");
    common(sample);
    sample->add_option("--ckpt", o.ckpt, "Flow checkpoint")->required();
    sample->add_option("--label", o.label, "Class label (-1 = unconditional)");
    sample->add_option("--cfg", o.cfg, "Guidance strength w (0 = unguided conditional)")->check(CLI::NonNegativeNumber);
    sample->add_option("--count", o.count, "Number of samples")->check(CLI::NonNegativeNumber);
    sample->add_option("--out", o.out, "Output SFTK of compact samples")->required();
    sample->add_option("--decoded", o.decoded, "Output SFTK of decoded samples (default: <out>.decoded.sftk)");
    sample->add_flag("--ema", o.ema, "Use the EMA parameters");

    auto* nllc = app.add_subcommand("nll", "Per-example negative log-likelihood as CSV");
    common(nllc);
    nllc->add_option("--ckpt", o.ckpt, "Flow checkpoint")->required();
    nllc->add_option("--data", o.data, "Dataset to score")->required();
    nllc->add_option("--out", o.out, "Output CSV (default: stdout)");
    nllc->add_flag("--ema", o.ema, "Use the EMA parameters");

    auto* ver = app.add_subcommand("verify", "Run the oracle suite; nonzero exit on failure");
    common(ver);
    ver->add_option("--ckpt", o.ckpt, "Flow checkpoint to include in the invertibility check");
    ver->add_option("--out", o.out, "Output CSV (default: stdout)");

    auto* rep = app.add_subcommand("report", "Constant vs per-sample noise comparison as CSV");
    common(rep);
    rep->add_option("--data", o.data, "Labeled dataset; the tail fraction is held out")->required();
    rep->add_option("--ckpt", o.ckpt, "Compressor checkpoint (optional)");
    rep->add_option("--out", o.out, "Output CSV (default: stdout)");
    rep->add_option("--sigma", o.sigma, "Noise level of both schedules")->check(CLI::NonNegativeNumber);
    rep->add_option("--test-fraction", o.test_fraction, "Held-out fraction")->check(CLI::Range(0.01, 0.99));

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kExitUsage;
    }

    try {
        if (gen->parsed()) return cmd_gen_data(o);
        if (stats->parsed()) return cmd_stats(o);
        if (pca->parsed()) return cmd_pca(o);
        if (tsrc->parsed()) return by_precision(o, cmd_train_src<float>, cmd_train_src<double>);
        if (tflow->parsed()) return by_precision(o, cmd_train_flow<float>, cmd_train_flow<double>);
        if (sample->parsed()) return by_precision(o, cmd_sample<float>, cmd_sample<double>);
        if (nllc->parsed()) return by_precision(o, cmd_nll<float>, cmd_nll<double>);
        if (ver->parsed()) return cmd_verify(o);
        if (rep->parsed()) return by_precision(o, cmd_report<float>, cmd_report<double>);
    } catch (const FormatError& e) {
        std::cerr << "srcflow: " << e.what() << '\n';
        return kExitIo;
    } catch (const NumericalError& e) {
        std::cerr << "srcflow: " << e.what() << '\n';
        return kExitCheck;
    } catch (const Error& e) {
        std::cerr << "srcflow: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "srcflow: " << e.what() << '\n';
        return kExitIo;
    }
    return kExitUsage;
}
