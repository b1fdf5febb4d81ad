#include <doctest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "srcflow/data_io.hpp"

using namespace srcflow;
namespace fs = std::filesystem;

namespace {

FormatErrc decode_error(const std::string& bytes, bool checkpoint) {
    try {
        if (checkpoint)
            decode_checkpoint(bytes);
        else
            decode_dataset(bytes);
    } catch (const FormatError& e) {
        return e.code();
    }
    FAIL("decode accepted corrupted bytes");
    return FormatErrc::malformed;
}

Checkpoint sample_checkpoint() {
    Checkpoint ck;
    ck.config_text = "[flow]\nblocks = 2\n";
    ck.sections.push_back({"a", {2, 3}, {1, 2, 3, 4, 5, 6}});
    ck.sections.push_back({"b", {1, 1}, {-0.5f}});
    return ck;
}

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("srcflow_test_" + std::to_string(::getpid()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string operator/(const std::string& name) const { return (path / name).string(); }
};

int run_cli(const std::string& args) {
    const std::string cmd = std::string(SRCFLOW_CLI_PATH) + " " + args + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("low-rank generator") {
    const auto basis = low_rank_basis(16, 3, 1);
    CHECK((basis * basis.transpose() - Matrix::Identity(3, 3)).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(low_rank_basis(16, 3, 1) == basis);

    const auto r1 = gen_low_rank(50, 4, 8, 1, {2.0}, 0.0, 2);
    CHECK(pca_spectrum(r1.fields).cumulative_explained(0) == doctest::Approx(1.0).epsilon(1e-6));

    const auto r2 = gen_low_rank(2500, 4, 8, 2, {4.0, 1.0}, 0.0, 3);
    CHECK(std::abs(pca_spectrum(r2.fields).cumulative_explained(0) - 0.8) < 0.02);

    const auto r8 = gen_low_rank(625, 16, 64, 8, {8, 6, 5, 4, 3, 2, 1.5, 1}, 0.01, 4);
    CHECK(intrinsic_dim(pca_spectrum(r8.fields), 0.99) == 8);

    CHECK_THROWS_AS(gen_low_rank(5, 4, 8, 2, {1.0, 2.0}, 0.0, 1), Error);
    CHECK_THROWS_AS(gen_low_rank(5, 4, 8, 2, {1.0}, 0.0, 1), Error);
    CHECK_THROWS_AS(gen_low_rank(5, 4, 8, 9, std::vector<double>(9, 1.0), 0.0, 1), Error);
}

TEST_CASE("class mixture generator") {
    const auto one = gen_class_mixture(10000, 1, 1, 5);
    double mx = 0, my = 0;
    for (const auto& f : one.fields) {
        mx += f(0, 0);
        my += f(0, 1);
    }
    CHECK(std::abs(mx / 1e4) < 0.01);
    CHECK(std::abs(my / 1e4) < 0.01);

    const auto four = gen_class_mixture(10000, 4, 1, 6);
    const auto centers = mixture_centers(4, 1);
    std::vector<double> sx(4), sy(4), n(4);
    for (std::size_t i = 0; i < four.size(); ++i) {
        const int l = four.labels[i];
        sx[l] += four.fields[i](0, 0);
        sy[l] += four.fields[i](0, 1);
        n[l] += 1;
    }
    for (int l = 0; l < 4; ++l) {
        CHECK(std::abs(sx[l] / n[l] - centers[l][0]) < 0.02);
        CHECK(std::abs(sy[l] / n[l] - centers[l][1]) < 0.02);
    }
    const auto again = gen_class_mixture(10000, 4, 1, 6);
    CHECK(encode_dataset(again) == encode_dataset(four));
}

TEST_CASE("dataset bytes round-trip exactly") {
    const auto data = gen_class_mixture(20, 3, 2, 7);
    const auto bytes = encode_dataset(data);
    const auto back = decode_dataset(bytes);
    CHECK(encode_dataset(back) == bytes);
    CHECK(back.labels == data.labels);

    Dataset unlabeled{gen_low_rank(3, 2, 4, 1, {1.0}, 0.0, 8).fields, {}};
    CHECK_FALSE(decode_dataset(encode_dataset(unlabeled)).has_labels());
}

TEST_CASE("dataset corruption codes") {
    const auto bytes = encode_dataset(gen_class_mixture(4, 2, 1, 9));
    CHECK(decode_error(bytes.substr(0, bytes.size() - 3), false) == FormatErrc::truncated_file);
    CHECK(decode_error(bytes.substr(0, 2), false) == FormatErrc::truncated_file);
    auto bad = bytes;
    bad[0] = 'X';
    CHECK(decode_error(bad, false) == FormatErrc::bad_magic);
    bad = bytes;
    bad[4] = 9;
    CHECK(decode_error(bad, false) == FormatErrc::version_unsupported);
}

TEST_CASE("checkpoint bytes round-trip and corruption codes") {
    const auto bytes = encode_checkpoint(sample_checkpoint());
    const auto back = decode_checkpoint(bytes);
    CHECK(encode_checkpoint(back) == bytes);
    REQUIRE(back.find("a") != nullptr);
    CHECK(back.find("a")->data[5] == 6.0f);
    CHECK(back.find("missing") == nullptr);

    auto flipped = bytes;
    flipped[bytes.size() - 8] ^= 0x40;
    CHECK(decode_error(flipped, true) == FormatErrc::checksum_mismatch);
    CHECK(decode_error(bytes.substr(0, bytes.size() - 1), true) == FormatErrc::truncated_file);
    CHECK(decode_error(bytes.substr(0, bytes.size() / 2), true) == FormatErrc::truncated_file);
    auto magic = bytes;
    magic[1] = 'Z';
    CHECK(decode_error(magic, true) == FormatErrc::bad_magic);
}

TEST_CASE("parameter and stats sections") {
    const auto model = init_flow<double>(FlowConfig{}, FlowInit::random, 10);
    Checkpoint ck;
    add_sections(ck, "flow/", model.params);
    ChannelStats s{Vector::LinSpaced(3, -1, 1), Vector::LinSpaced(3, 0.5, 2)};
    add_stats_sections(ck, "stats/", s);
    auto layout = init_flow<double>(FlowConfig{}, FlowInit::zero_head, 0);
    load_sections(decode_checkpoint(encode_checkpoint(ck)), "flow/", layout.params);
    const auto& a = model.params.at("b0.head.w");
    const auto& b = layout.params.at("b0.head.w");
    CHECK((a - b).cwiseAbs().maxCoeff() < 1e-6);
    const auto back = load_stats_sections(ck, "stats/");
    CHECK((back.mu - s.mu).cwiseAbs().maxCoeff() < 1e-7);

    FlowConfig other;
    other.width = 64;
    auto wrong = init_flow<double>(other, FlowInit::zero_head, 0);
    CHECK_THROWS_AS(load_sections(ck, "flow/", wrong.params), FormatError);
}

TEST_CASE("configuration parsing") {
    const auto cfg = PipelineConfig::parse(
        "# comment\n[src]\nn = 32\nd = 4\n\n[flow]\nblocks = 3\nalpha_clamp = 6.5\n"
        "[train]\nepochs = 7\nlr = 1e-3\nseed = 42\n[noise]\nmode = per_sample\nsigma = 0.8\n");
    CHECK(cfg.src.n == 32);
    CHECK(cfg.src.d == 4);
    CHECK(cfg.flow.blocks == 3);
    CHECK(cfg.flow.alpha_clamp == 6.5);
    CHECK(cfg.train.epochs == 7);
    CHECK(cfg.train.seed == 42);
    CHECK(cfg.has_noise);
    CHECK(cfg.train.noise.mode == NoiseSpec::Mode::per_sample_uniform);
    CHECK(cfg.train.noise.sigma == 0.8);

    const auto round = PipelineConfig::parse(canonical_src_config(cfg.src) + canonical_flow_config(cfg.flow));
    CHECK(canonical_flow_config(round.flow) == canonical_flow_config(cfg.flow));

    CHECK_THROWS_AS(PipelineConfig::parse("[bogus]\n"), Error);
    CHECK_THROWS_AS(PipelineConfig::parse("[src]\nwhat = 1\n"), Error);
    CHECK_THROWS_AS(PipelineConfig::parse("[src]\nn = abc\n"), Error);
    CHECK_THROWS_AS(PipelineConfig::parse("[noise]\nmode = loud\n"), Error);
}

TEST_CASE("metrics csv") {
    const MetricLog log{{0, 1e-3, 2.5, -0.1, 0.7}};
    const auto csv = metrics_csv(log);
    CHECK(csv.rfind("step,lr,loss,logdet_mean,grad_norm\n", 0) == 0);
    CHECK(csv.find("\n0,") != std::string::npos);
}

TEST_CASE("file writes are atomic and reread exactly") {
    TempDir dir;
    const auto data = gen_class_mixture(10, 2, 1, 11);
    write_dataset(dir / "d.sftk", data);
    CHECK(encode_dataset(read_dataset(dir / "d.sftk")) == encode_dataset(data));
    ChannelStats s = compute_channel_stats(data.fields);
    write_stats(dir / "s.stats", s);
    const auto back = read_stats(dir / "s.stats");
    CHECK((back.sigma - s.sigma).cwiseAbs().maxCoeff() < 1e-6);
    try {
        read_dataset(dir / "absent.sftk");
        FAIL("missing file accepted");
    } catch (const FormatError& e) {
        CHECK(e.code() == FormatErrc::io_failure);
    }
}

TEST_CASE("command line") {
    TempDir dir;
    CHECK(run_cli("verify") == 0);
    CHECK(run_cli("") == 2);
    CHECK(run_cli("sample --ckpt nothing") == 2);
    CHECK(run_cli("stats --data " + dir / "absent.sftk --out " + dir / "x") == 3);

    REQUIRE(run_cli("gen-data --kind low-rank --count 500 --seed 3 --out " + dir / "lr.sftk") == 0);
    REQUIRE(run_cli("pca --data " + dir / "lr.sftk --out " + dir / "pca.csv") == 0);
    const auto pca = slurp(dir / "pca.csv");
    CHECK(pca.rfind("component,eigenvalue,cumulative_explained,intrinsic_dim_0.99\n", 0) == 0);
    std::istringstream rows(pca);
    std::string line;
    std::getline(rows, line);
    std::getline(rows, line);
    CHECK(line.substr(line.rfind(',') + 1) == "8");

    {
        std::ofstream cfg(dir / "tiny.cfg");
        cfg << "[flow]\nblocks = 2\nwidth = 8\nheads = 2\ndeep_layers = 1\nmlp_ratio = 2\nnum_classes = 4\n"
               "[train]\nepochs = 1\nbatch_size = 64\nlr = 1e-3\n";
    }
    REQUIRE(run_cli("gen-data --kind mixture --count 256 --seed 4 --out " + dir / "mix.sftk") == 0);
    REQUIRE(run_cli("train-flow --config " + dir / "tiny.cfg --data " + dir / "mix.sftk --seed 5 --out " +
                    dir / "f1.sfck") == 0);
    REQUIRE(run_cli("train-flow --config " + dir / "tiny.cfg --data " + dir / "mix.sftk --seed 5 --out " +
                    dir / "f2.sfck") == 0);
    CHECK(slurp(dir / "f1.sfck") == slurp(dir / "f2.sfck"));
    CHECK(fs::exists(dir / "f1.sfck.metrics.csv"));

    REQUIRE(run_cli("sample --ckpt " + dir / "f1.sfck --label 2 --cfg 0 --count 20 --seed 6 --out " +
                    dir / "s1.sftk") == 0);
    REQUIRE(run_cli("sample --ckpt " + dir / "f1.sfck --label 2 --cfg 0 --count 20 --seed 6 --out " +
                    dir / "s2.sftk") == 0);
    CHECK(slurp(dir / "s1.sftk") == slurp(dir / "s2.sftk"));
    CHECK(slurp(dir / "s1.decoded.sftk") == slurp(dir / "s2.decoded.sftk"));
    CHECK(read_dataset(dir / "s1.decoded.sftk").size() == 20);

    CHECK(run_cli("nll --ckpt " + dir / "f1.sfck --data " + dir / "mix.sftk --out " + dir / "nll.csv") == 0);
    CHECK(run_cli("verify --ckpt " + dir / "f1.sfck") == 0);

    auto bytes = slurp(dir / "f1.sfck");
    bytes[bytes.size() / 2] ^= 0x01;
    std::ofstream(dir / "bad.sfck", std::ios::binary) << bytes;
    CHECK(run_cli("sample --ckpt " + dir / "bad.sfck --count 2 --out " + dir / "x.sftk") == 3);
}
