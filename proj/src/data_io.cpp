#include "srcflow/data_io.hpp"

#include <zlib.h>

#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <iomanip>
#include <numbers>
#include <sstream>

#include "srcflow/rng.hpp"

namespace srcflow {

const char* to_string(FormatErrc code) noexcept {
    switch (code) {
        case FormatErrc::bad_magic: return "bad magic";
        case FormatErrc::version_unsupported: return "version unsupported";
        case FormatErrc::checksum_mismatch: return "checksum mismatch";
        case FormatErrc::truncated_file: return "truncated file";
        case FormatErrc::malformed: return "malformed file";
        case FormatErrc::io_failure: return "i/o failure";
    }
    return "unknown format error";
}

// -- generators ------------------------------------------------------------------

Matrix low_rank_basis(int n, int rank, std::uint64_t seed) {
    if (rank < 1 || rank > n) throw Error("invalid spectrum: rank must be in [1, n]");
    Rng rng(seed, 0x6261736973ULL);
    Eigen::MatrixXd g(n, rank);
    for (Eigen::Index j = 0; j < rank; ++j)
        for (Eigen::Index i = 0; i < n; ++i) g(i, j) = rng.normal();
    const Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    const Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(n, rank);
    return q.transpose();
}

Dataset gen_low_rank(int examples, int tokens, int n, int rank, const std::vector<double>& spectrum, double noise_std,
                     std::uint64_t seed) {
    if (examples < 1 || tokens < 1 || n < 1) throw Error("invalid generator sizes");
    if (static_cast<int>(spectrum.size()) != rank) throw Error("invalid spectrum: need one variance per rank");
    for (std::size_t i = 0; i < spectrum.size(); ++i) {
        if (!(spectrum[i] > 0.0) || !std::isfinite(spectrum[i])) throw Error("invalid spectrum: variances must be > 0");
        if (i > 0 && spectrum[i] > spectrum[i - 1]) throw Error("invalid spectrum: must be descending");
    }
    if (!(noise_std >= 0.0)) throw Error("invalid noise_std");
    const Matrix basis = low_rank_basis(n, rank, seed);
    Vector scale(rank);
    for (int k = 0; k < rank; ++k) scale(k) = std::sqrt(spectrum[static_cast<std::size_t>(k)]);

    Dataset out;
    out.fields.reserve(static_cast<std::size_t>(examples));
    Rng rng(seed, 0x746f6b656e73ULL);
    for (int e = 0; e < examples; ++e) {
        Matrix coef(tokens, rank);
        for (Eigen::Index i = 0; i < coef.size(); ++i) coef.data()[i] = rng.normal();
        coef = coef * scale.asDiagonal();
        Matrix z = coef * basis;
        if (noise_std > 0.0)
            for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] += noise_std * rng.normal();
        out.fields.emplace_back(std::move(z));
    }
    return out;
}

std::vector<Point2> mixture_centers(int classes, int components_per_class) {
    if (classes < 1 || components_per_class < 1) throw Error("mixture needs at least one class and component");
    const int total = classes * components_per_class;
    std::vector<Point2> out;
    out.reserve(static_cast<std::size_t>(total));
    if (total == 1) {
        out.push_back({0.0, 0.0});
        return out;
    }
    for (int k = 0; k < total; ++k) {
        const double a = 2.0 * std::numbers::pi * k / total;
        out.push_back({std::cos(a), std::sin(a)});
    }
    return out;
}

Point2 sample_mixture(int label, int classes, int components_per_class, Rng& rng) {
    if (label < 0 || label >= classes) throw Error("unknown label id " + std::to_string(label));
    const auto centers = mixture_centers(classes, components_per_class);
    const auto comp = static_cast<int>(rng.below(static_cast<std::uint64_t>(components_per_class)));
    const auto& c = centers[static_cast<std::size_t>(label * components_per_class + comp)];
    const double x = c[0] + kMixtureStd * rng.normal();
    const double y = c[1] + kMixtureStd * rng.normal();
    return {x, y};
}

Dataset gen_class_mixture(int examples, int classes, int components_per_class, std::uint64_t seed) {
    if (examples < 1) throw Error("invalid generator sizes");
    mixture_centers(classes, components_per_class);
    Dataset out;
    Rng rng(seed, 0x6d6978ULL);
    for (int e = 0; e < examples; ++e) {
        const int label = static_cast<int>(rng.below(static_cast<std::uint64_t>(classes)));
        const auto p = sample_mixture(label, classes, components_per_class, rng);
        Matrix m(1, 2);
        m << p[0], p[1];
        out.fields.emplace_back(std::move(m));
        out.labels.push_back(label);
    }
    return out;
}

// -- byte helpers ------------------------------------------------------------------

namespace {

class Writer {
public:
    void bytes(std::string_view s) { buf_.append(s); }
    void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
    }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    std::string& str() noexcept { return buf_; }

private:
    std::string buf_;
};

class Reader {
public:
    explicit Reader(std::string_view s) : s_(s) {}

    std::string_view bytes(std::size_t n) {
        need(n);
        const auto out = s_.substr(pos_, n);
        pos_ += n;
        return out;
    }
    std::uint8_t u8() { return static_cast<std::uint8_t>(bytes(1)[0]); }
    std::uint32_t u32() {
        const auto b = bytes(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(b[static_cast<std::size_t>(i)])) << (8 * i);
        return v;
    }
    float f32() { return std::bit_cast<float>(u32()); }
    std::size_t remaining() const noexcept { return s_.size() - pos_; }

private:
    void need(std::size_t n) const {
        if (s_.size() - pos_ < n) throw FormatError(FormatErrc::truncated_file, "");
    }
    std::string_view s_;
    std::size_t pos_ = 0;
};

std::uint32_t crc32_of(std::string_view s) {
    uLong crc = crc32(0L, Z_NULL, 0);
    crc = crc32(crc, reinterpret_cast<const Bytef*>(s.data()), static_cast<uInt>(s.size()));
    return static_cast<std::uint32_t>(crc);
}

void check_header(Reader& r, std::string_view magic) {
    if (r.remaining() < magic.size()) throw FormatError(FormatErrc::truncated_file, "");
    if (r.bytes(magic.size()) != magic) throw FormatError(FormatErrc::bad_magic, "");
    if (r.remaining() < 4) throw FormatError(FormatErrc::truncated_file, "");
    const auto version = r.u32();
    if (version != kFormatVersion)
        throw FormatError(FormatErrc::version_unsupported, "version " + std::to_string(version));
}

}  // namespace

std::string encode_dataset(const Dataset& data) {
    if (data.fields.empty()) throw Error("no data");
    const auto n = data.fields.front().tokens(), c = data.fields.front().channels();
    if (data.has_labels() && data.labels.size() != data.fields.size()) throw Error("label count mismatch");
    Writer w;
    w.bytes("SFTK");
    w.u32(kFormatVersion);
    w.u32(static_cast<std::uint32_t>(data.fields.size()));
    w.u32(static_cast<std::uint32_t>(n));
    w.u32(static_cast<std::uint32_t>(c));
    w.u8(data.has_labels() ? 1 : 0);
    for (const auto& f : data.fields) {
        if (f.tokens() != n || f.channels() != c) throw Error("shape mismatch");
        for (Eigen::Index i = 0; i < f.data().size(); ++i) w.f32(static_cast<float>(f.data().data()[i]));
    }
    if (data.has_labels())
        for (int l : data.labels) w.u32(static_cast<std::uint32_t>(l));
    return std::move(w.str());
}

Dataset decode_dataset(std::string_view bytes) {
    Reader r(bytes);
    check_header(r, "SFTK");
    const auto count = r.u32(), n = r.u32(), c = r.u32();
    const auto flag = r.u8();
    if (flag > 1) throw FormatError(FormatErrc::malformed, "label flag");
    if (count == 0 || n == 0 || c == 0) throw FormatError(FormatErrc::malformed, "empty dimensions");
    const std::uint64_t payload = std::uint64_t{count} * n * c * 4 + (flag ? std::uint64_t{count} * 4 : 0);
    if (r.remaining() < payload) throw FormatError(FormatErrc::truncated_file, "");
    if (r.remaining() > payload) throw FormatError(FormatErrc::malformed, "trailing bytes");
    Dataset out;
    out.fields.reserve(count);
    for (std::uint32_t e = 0; e < count; ++e) {
        Matrix m(n, c);
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<double>(r.f32());
        if (!m.allFinite()) throw FormatError(FormatErrc::malformed, "non-finite payload");
        out.fields.emplace_back(std::move(m));
    }
    if (flag)
        for (std::uint32_t e = 0; e < count; ++e) out.labels.push_back(static_cast<int>(r.u32()));
    return out;
}

const Section* Checkpoint::find(std::string_view name) const {
    for (const auto& s : sections)
        if (s.name == name) return &s;
    return nullptr;
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
    Writer w;
    w.bytes("SFCK");
    w.u32(kFormatVersion);
    w.u32(static_cast<std::uint32_t>(ckpt.config_text.size()));
    w.bytes(ckpt.config_text);
    for (std::size_t i = 0; i < ckpt.sections.size(); ++i) {
        const auto& s = ckpt.sections[i];
        for (std::size_t j = 0; j < i; ++j)
            if (ckpt.sections[j].name == s.name) throw Error("duplicate section " + s.name);
        std::size_t count = 1;
        for (auto d : s.dims) count *= d;
        if (count != s.data.size()) throw Error("section " + s.name + " size does not match its dims");
        w.u32(static_cast<std::uint32_t>(s.name.size()));
        w.bytes(s.name);
        w.u32(static_cast<std::uint32_t>(s.dims.size()));
        for (auto d : s.dims) w.u32(d);
        for (float v : s.data) w.f32(v);
    }
    w.u32(crc32_of(w.str()));
    return std::move(w.str());
}

Checkpoint decode_checkpoint(std::string_view bytes) {
    // Structure first so that a short file reports truncation; the CRC then
    // catches corruption inside well-formed payloads.
    Reader head(bytes);
    check_header(head, "SFCK");
    if (bytes.size() < 16) throw FormatError(FormatErrc::truncated_file, "");
    const auto body = bytes.substr(0, bytes.size() - 4);

    Reader r(body);
    check_header(r, "SFCK");
    Checkpoint out;
    const auto config_len = r.u32();
    out.config_text = std::string(r.bytes(config_len));
    while (r.remaining() > 0) {
        Section s;
        s.name = std::string(r.bytes(r.u32()));
        const auto rank = r.u32();
        if (rank > 8) throw FormatError(FormatErrc::malformed, "section rank");
        std::uint64_t count = 1;
        for (std::uint32_t i = 0; i < rank; ++i) {
            s.dims.push_back(r.u32());
            count *= s.dims.back();
        }
        if (count * 4 > r.remaining()) throw FormatError(FormatErrc::truncated_file, "");
        s.data.resize(count);
        for (auto& v : s.data) v = r.f32();
        out.sections.push_back(std::move(s));
    }
    Reader tail(bytes.substr(bytes.size() - 4));
    if (tail.u32() != crc32_of(body)) throw FormatError(FormatErrc::checksum_mismatch, "");
    for (std::size_t i = 0; i < out.sections.size(); ++i)
        for (std::size_t j = 0; j < i; ++j)
            if (out.sections[i].name == out.sections[j].name)
                throw FormatError(FormatErrc::malformed, "duplicate section " + out.sections[i].name);
    return out;
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError(FormatErrc::io_failure, "cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return std::move(ss).str();
}

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw FormatError(FormatErrc::io_failure, "cannot write " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw FormatError(FormatErrc::io_failure, "short write to " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw FormatError(FormatErrc::io_failure, "cannot rename onto " + path.string());
}

Dataset read_dataset(const std::filesystem::path& path) { return decode_dataset(read_file(path)); }
void write_dataset(const std::filesystem::path& path, const Dataset& data) {
    write_file_atomic(path, encode_dataset(data));
}

ChannelStats read_stats(const std::filesystem::path& path) {
    const auto d = read_dataset(path);
    if (d.fields.size() != 2 || d.fields[0].tokens() != 1) throw FormatError(FormatErrc::malformed, "not a stats file");
    ChannelStats s{d.fields[0].data().row(0).transpose(), d.fields[1].data().row(0).transpose()};
    if ((s.sigma.array() <= 0.0).any()) throw FormatError(FormatErrc::malformed, "non-positive sigma");
    return s;
}

void write_stats(const std::filesystem::path& path, const ChannelStats& stats) {
    Dataset d;
    d.fields.emplace_back(Matrix(stats.mu.transpose()));
    d.fields.emplace_back(Matrix(stats.sigma.transpose()));
    write_dataset(path, d);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    write_file_atomic(path, encode_checkpoint(ckpt));
}

template <class T>
void add_sections(Checkpoint& ckpt, const std::string& prefix, const ParamSet<T>& params) {
    for (const auto& e : params.entries()) {
        Section s;
        s.name = prefix + e.name;
        s.dims = {static_cast<std::uint32_t>(e.value.rows()), static_cast<std::uint32_t>(e.value.cols())};
        s.data.resize(static_cast<std::size_t>(e.value.size()));
        for (Eigen::Index i = 0; i < e.value.size(); ++i) s.data[static_cast<std::size_t>(i)] = static_cast<float>(e.value.data()[i]);
        ckpt.sections.push_back(std::move(s));
    }
}

template <class T>
void load_sections(const Checkpoint& ckpt, const std::string& prefix, ParamSet<T>& layout) {
    for (auto& e : layout.entries()) {
        const auto* s = ckpt.find(prefix + e.name);
        if (!s) throw FormatError(FormatErrc::malformed, "missing section " + prefix + e.name);
        if (s->dims.size() != 2 || s->dims[0] != e.value.rows() || s->dims[1] != e.value.cols())
            throw FormatError(FormatErrc::malformed, "section " + s->name + " has the wrong shape");
        for (Eigen::Index i = 0; i < e.value.size(); ++i) e.value.data()[i] = static_cast<T>(s->data[static_cast<std::size_t>(i)]);
    }
}

template void add_sections<float>(Checkpoint&, const std::string&, const ParamSet<float>&);
template void add_sections<double>(Checkpoint&, const std::string&, const ParamSet<double>&);
template void load_sections<float>(const Checkpoint&, const std::string&, ParamSet<float>&);
template void load_sections<double>(const Checkpoint&, const std::string&, ParamSet<double>&);

void add_stats_sections(Checkpoint& ckpt, const std::string& prefix, const ChannelStats& stats) {
    ParamSet<double> ps;
    ps.add("mu", ag::Mat<double>(stats.mu.transpose()));
    ps.add("sigma", ag::Mat<double>(stats.sigma.transpose()));
    add_sections(ckpt, prefix, ps);
}

ChannelStats load_stats_sections(const Checkpoint& ckpt, const std::string& prefix) {
    const auto* mu = ckpt.find(prefix + "mu");
    if (!mu || mu->dims.size() != 2) throw FormatError(FormatErrc::malformed, "missing section " + prefix + "mu");
    ParamSet<double> ps;
    ps.add("mu", ag::Mat<double>::Zero(1, mu->dims[1]));
    ps.add("sigma", ag::Mat<double>::Zero(1, mu->dims[1]));
    load_sections(ckpt, prefix, ps);
    return ChannelStats{ps.at("mu").row(0).transpose(), ps.at("sigma").row(0).transpose()};
}

// -- configuration ------------------------------------------------------------------

namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

template <class V>
V parse_number(const std::string& key, const std::string& text) {
    V v{};
    const auto* end = text.data() + text.size();
    const auto [ptr, ec] = std::from_chars(text.data(), end, v);
    if (ec != std::errc() || ptr != end) throw Error("config: bad value for " + key + ": " + text);
    return v;
}

std::string fmt(double v) {
    std::ostringstream ss;
    ss << std::setprecision(17) << v;
    return ss.str();
}

}  // namespace

PipelineConfig PipelineConfig::parse(std::string_view text) {
    PipelineConfig cfg;
    using Setter = std::function<void(const std::string&)>;
    const auto int_key = [](int& dst, const char* key) {
        return Setter([&dst, key](const std::string& v) { dst = parse_number<int>(key, v); });
    };
    const auto real_key = [](double& dst, const char* key) {
        return Setter([&dst, key](const std::string& v) { dst = parse_number<double>(key, v); });
    };
    std::map<std::string, std::map<std::string, Setter>> keys;
    auto& s = keys["src"];
    s["n"] = int_key(cfg.src.n, "n");
    s["d"] = int_key(cfg.src.d, "d");
    s["layers"] = int_key(cfg.src.layers, "layers");
    s["heads"] = int_key(cfg.src.heads, "heads");
    s["mlp_ratio"] = int_key(cfg.src.mlp_ratio, "mlp_ratio");
    s["tokens"] = int_key(cfg.src.tokens, "tokens");
    auto& f = keys["flow"];
    f["blocks"] = int_key(cfg.flow.blocks, "blocks");
    f["shallow_layers"] = int_key(cfg.flow.shallow_layers, "shallow_layers");
    f["deep_layers"] = int_key(cfg.flow.deep_layers, "deep_layers");
    f["width"] = int_key(cfg.flow.width, "width");
    f["heads"] = int_key(cfg.flow.heads, "heads");
    f["mlp_ratio"] = int_key(cfg.flow.mlp_ratio, "mlp_ratio");
    f["channels"] = int_key(cfg.flow.channels, "channels");
    f["tokens"] = int_key(cfg.flow.tokens, "tokens");
    f["num_classes"] = int_key(cfg.flow.num_classes, "num_classes");
    f["label_drop_p"] = real_key(cfg.flow.label_drop_p, "label_drop_p");
    f["alpha_clamp"] = real_key(cfg.flow.alpha_clamp, "alpha_clamp");
    auto& t = keys["train"];
    t["epochs"] = int_key(cfg.train.epochs, "epochs");
    t["batch_size"] = int_key(cfg.train.batch_size, "batch_size");
    t["lr"] = real_key(cfg.train.lr, "lr");
    t["weight_decay"] = real_key(cfg.train.weight_decay, "weight_decay");
    t["warmup_epochs"] = int_key(cfg.train.warmup_epochs, "warmup_epochs");
    t["cosine_start_epoch"] = int_key(cfg.train.cosine_start_epoch, "cosine_start_epoch");
    t["ema_decay"] = real_key(cfg.train.ema_decay, "ema_decay");
    t["grad_clip"] = real_key(cfg.train.grad_clip, "grad_clip");
    t["steps_per_epoch"] = int_key(cfg.train.steps_per_epoch, "steps_per_epoch");
    t["seed"] = Setter([&cfg](const std::string& v) { cfg.train.seed = parse_number<std::uint64_t>("seed", v); });
    auto& n = keys["noise"];
    n["mode"] = Setter([&cfg](const std::string& v) {
        if (v == "none")
            cfg.train.noise.mode = NoiseSpec::Mode::none;
        else if (v == "constant")
            cfg.train.noise.mode = NoiseSpec::Mode::constant;
        else if (v == "per_sample")
            cfg.train.noise.mode = NoiseSpec::Mode::per_sample_uniform;
        else
            throw Error("config: noise mode must be none, constant or per_sample");
    });
    n["sigma"] = real_key(cfg.train.noise.sigma, "sigma");

    std::string section;
    std::istringstream in{std::string(text)};
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        const auto body = trim(hash == std::string::npos ? line : line.substr(0, hash));
        if (body.empty()) continue;
        if (body.front() == '[') {
            if (body.back() != ']') throw Error("config line " + std::to_string(lineno) + ": bad section header");
            section = trim(std::string_view(body).substr(1, body.size() - 2));
            if (!keys.contains(section)) throw Error("config: unknown section [" + section + "]");
            if (section == "noise") cfg.has_noise = true;
            continue;
        }
        const auto eq = body.find('=');
        if (eq == std::string::npos) throw Error("config line " + std::to_string(lineno) + ": expected key = value");
        if (section.empty()) throw Error("config line " + std::to_string(lineno) + ": key outside a section");
        const auto key = trim(std::string_view(body).substr(0, eq));
        const auto value = trim(std::string_view(body).substr(eq + 1));
        const auto& table = keys.at(section);
        const auto it = table.find(key);
        if (it == table.end()) throw Error("config: unknown key " + key + " in [" + section + "]");
        it->second(value);
    }
    cfg.src.validate();
    cfg.flow.validate();
    cfg.train.noise.validate();
    return cfg;
}

PipelineConfig PipelineConfig::load(const std::filesystem::path& path) { return parse(read_file(path)); }

std::string canonical_src_config(const SrcConfig& c) {
    std::ostringstream ss;
    ss << "[src]\n"
       << "n = " << c.n << "\nd = " << c.d << "\nlayers = " << c.layers << "\nheads = " << c.heads
       << "\nmlp_ratio = " << c.mlp_ratio << "\ntokens = " << c.tokens << "\n";
    return ss.str();
}

std::string canonical_flow_config(const FlowConfig& c) {
    std::ostringstream ss;
    ss << "[flow]\n"
       << "blocks = " << c.blocks << "\nshallow_layers = " << c.shallow_layers << "\ndeep_layers = " << c.deep_layers
       << "\nwidth = " << c.width << "\nheads = " << c.heads << "\nmlp_ratio = " << c.mlp_ratio
       << "\nchannels = " << c.channels << "\ntokens = " << c.tokens << "\nnum_classes = " << c.num_classes
       << "\nlabel_drop_p = " << fmt(c.label_drop_p) << "\nalpha_clamp = " << fmt(c.alpha_clamp) << "\n";
    return ss.str();
}

std::string metrics_csv(const MetricLog& log) {
    std::ostringstream ss;
    ss << "step,lr,loss,logdet_mean,grad_norm\n" << std::setprecision(10);
    for (const auto& r : log) ss << r.step << ',' << r.lr << ',' << r.loss << ',' << r.logdet_mean + 0.0 << ',' << r.grad_norm << '\n';
    return ss.str();
}

}  // namespace srcflow
