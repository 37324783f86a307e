#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "gdflow/pointcloud.hpp"

// Drives the built gdflow binary end to end.

using namespace gdflow;
namespace fs = std::filesystem;

namespace {

const char* kCli = GDFLOW_CLI_PATH;

struct TempDir {
    fs::path dir;
    TempDir() {
        dir = fs::temp_directory_path() /
              ("gdflow_cli_" + std::to_string(::getpid()) + "_" +
               std::to_string(reinterpret_cast<uintptr_t>(this)));
        fs::create_directories(dir);
    }
    ~TempDir() { fs::remove_all(dir); }
    std::string path(const std::string& f) const { return (dir / f).string(); }
};

int run(const std::string& args, const std::string& stdout_file = "/dev/null") {
    const std::string cmd =
        std::string(kCli) + " " + args + " >" + stdout_file + " 2>/dev/null";
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

void write_file(const std::string& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary);
    f << content;
}

std::string smoke_config(int iterations, const std::string& loss_mode = "supervised") {
    std::ostringstream os;
    os << R"({
  "model": {"d": 4, "d_h": 10, "K": 3, "k": 4, "heads": 2, "key_dim": 3,
            "leaky_slope": 0.01, "variant": "full"},
  "integrator": {"dt": 0.5, "T": 1.0, "graph_refresh": "per-step", "activation": true},
  "train": {"lr_init": 1e-3, "lr_min": 1e-6, "plateau_patience": 5, "plateau_factor": 0.5,
            "batch_size": 2, "iterations": )"
       << iterations << R"(, "sigma_range": [0.02, 0.02], "loss_mode": ")" << loss_mode
       << R"(", "seed": 7, "patch_size": 64, "val_interval": 5, "clip_norm": 5.0}
})";
    return os.str();
}

}  // namespace

TEST(CliSynth, ZeroNoiseMakesIdenticalFiles) {
    TempDir td;
    ASSERT_EQ(run("synth --shape sphere --n 128 --noise 0 --seed 4 --out " + td.path("n.xyz") +
                  " --clean " + td.path("c.xyz")),
              0);
    EXPECT_EQ(read_file(td.path("n.xyz")), read_file(td.path("c.xyz")));
}

TEST(CliSynth, DeterministicUnderRepeat) {
    TempDir td;
    const std::string flags = "synth --shape torus --n 200 --noise 0.02 --seed 11 --out ";
    ASSERT_EQ(run(flags + td.path("a.xyz") + " --clean " + td.path("ca.xyz")), 0);
    ASSERT_EQ(run(flags + td.path("b.xyz") + " --clean " + td.path("cb.xyz")), 0);
    EXPECT_EQ(read_file(td.path("a.xyz")), read_file(td.path("b.xyz")));
}

TEST(CliSynth, UnknownShapeIsUsageError) {
    TempDir td;
    EXPECT_EQ(run("synth --shape pyramid --out " + td.path("x.xyz")), 2);
}

TEST(CliEval, IdenticalFilesAllZero) {
    TempDir td;
    ASSERT_EQ(run("synth --shape sphere --n 64 --noise 0 --seed 2 --out " + td.path("a.xyz")), 0);
    ASSERT_EQ(run("eval --ref " + td.path("a.xyz") + " --test " + td.path("a.xyz"),
                  td.path("out.json")),
              0);
    const std::string j = read_file(td.path("out.json"));
    EXPECT_NE(j.find("\"cd\":0.0"), std::string::npos) << j;
    EXPECT_NE(j.find("\"emd\":0.0"), std::string::npos) << j;
    EXPECT_NE(j.find("\"hd\":0.0"), std::string::npos) << j;
    EXPECT_NE(j.find("\"rmsd\":0.0"), std::string::npos) << j;
}

TEST(CliEval, TwoPointHandCase) {
    TempDir td;
    write_file(td.path("a.xyz"), "0 0 0\n");
    write_file(td.path("b.xyz"), "1 0 0\n");
    ASSERT_EQ(run("eval --ref " + td.path("a.xyz") + " --test " + td.path("b.xyz"),
                  td.path("out.json")),
              0);
    const std::string j = read_file(td.path("out.json"));
    EXPECT_NE(j.find("\"cd\":2.0"), std::string::npos) << j;
    EXPECT_NE(j.find("\"emd\":1.0"), std::string::npos) << j;
    EXPECT_NE(j.find("\"hd\":1.0"), std::string::npos) << j;
    EXPECT_NE(j.find("\"rmsd\":1.0"), std::string::npos) << j;
}

TEST(CliEval, EmdSizeMismatchIsUsageError) {
    TempDir td;
    write_file(td.path("a.xyz"), "0 0 0\n");
    write_file(td.path("b.xyz"), "1 0 0\n2 0 0\n");
    EXPECT_EQ(run("eval --ref " + td.path("a.xyz") + " --test " + td.path("b.xyz") +
                  " --metrics emd"),
              2);
    // without emd the same pair evaluates fine
    EXPECT_EQ(run("eval --ref " + td.path("a.xyz") + " --test " + td.path("b.xyz") +
                  " --metrics cd,hd,rmsd"),
              0);
}

TEST(CliFilterResponse, BernsteinConstantColumn) {
    TempDir td;
    ASSERT_EQ(run("filter-response --basis bernstein --K 4 --theta 0.3,0.3,0.3,0.3,0.3 "
                  "--grid 64 --out " +
                  td.path("r.csv")),
              0);
    std::ifstream f(td.path("r.csv"));
    std::string header;
    std::getline(f, header);
    EXPECT_EQ(header, "lambda,response");
    std::string line;
    double first = -1.0;
    int rows = 0;
    while (std::getline(f, line)) {
        const auto comma = line.find(',');
        const double v = std::stod(line.substr(comma + 1));
        if (first < 0) first = v;
        EXPECT_NEAR(v, first, 1e-9);  // equal coefficients give a flat response
        EXPECT_LE(v, 1.0 + 1e-9);
        ++rows;
    }
    EXPECT_EQ(rows, 64);
}

TEST(CliFilterResponse, PprConstantOneAndRangeError) {
    TempDir td;
    ASSERT_EQ(run("filter-response --filter ppr --theta 1.0 --grid 16 --out " + td.path("r.csv")),
              0);
    std::ifstream f(td.path("r.csv"));
    std::string line;
    std::getline(f, line);
    while (std::getline(f, line)) {
        const auto comma = line.find(',');
        EXPECT_DOUBLE_EQ(std::stod(line.substr(comma + 1)), 1.0);
    }
    EXPECT_EQ(run("filter-response --filter ppr --theta 0.0 --grid 16"), 2);
}

TEST(CliTrain, MissingConfigKeyNamesIt) {
    TempDir td;
    // drop "iterations" from the train section
    std::string cfg = smoke_config(3);
    const auto pos = cfg.find("\"iterations\": 3, ");
    ASSERT_NE(pos, std::string::npos);
    cfg.erase(pos, std::string("\"iterations\": 3, ").size());
    write_file(td.path("cfg.json"), cfg);
    fs::create_directories(td.path("data"));
    fs::create_directories(td.path("val"));
    ASSERT_EQ(run("synth --shape sphere --n 128 --noise 0 --seed 1 --out " +
                  td.path("data/a.xyz")),
              0);
    ASSERT_EQ(
        run("synth --shape sphere --n 128 --noise 0 --seed 2 --out " + td.path("val/a.xyz")), 0);
    const std::string cmd = std::string(kCli) + " train --config " + td.path("cfg.json") +
                            " --data " + td.path("data") + " --val " + td.path("val") +
                            " --out " + td.path("m.ckpt") + " >/dev/null 2>" +
                            td.path("err.txt");
    const int rc = std::system(cmd.c_str());
    EXPECT_EQ(WEXITSTATUS(rc), 2);
    EXPECT_NE(read_file(td.path("err.txt")).find("train.iterations"), std::string::npos);
}

TEST(CliTrain, UnknownConfigKeyRejected) {
    TempDir td;
    std::string cfg = smoke_config(1);
    const auto pos = cfg.find("\"lr_init\"");
    cfg.insert(pos, "\"warmup\": 3, ");
    write_file(td.path("cfg.json"), cfg);
    fs::create_directories(td.path("data"));
    fs::create_directories(td.path("val"));
    ASSERT_EQ(run("synth --shape sphere --n 128 --noise 0 --seed 1 --out " +
                  td.path("data/a.xyz")),
              0);
    ASSERT_EQ(
        run("synth --shape sphere --n 128 --noise 0 --seed 2 --out " + td.path("val/a.xyz")), 0);
    EXPECT_EQ(run("train --config " + td.path("cfg.json") + " --data " + td.path("data") +
                  " --val " + td.path("val") + " --out " + td.path("m.ckpt")),
              2);
}

TEST(CliTrainDenoise, ZeroIterationsAndIdentityDenoise) {
    TempDir td;
    write_file(td.path("cfg.json"), smoke_config(0));
    fs::create_directories(td.path("data"));
    fs::create_directories(td.path("val"));
    ASSERT_EQ(run("synth --shape sphere --n 128 --noise 0 --seed 1 --out " +
                  td.path("data/a.xyz")),
              0);
    ASSERT_EQ(
        run("synth --shape sphere --n 128 --noise 0 --seed 2 --out " + td.path("val/a.xyz")), 0);
    ASSERT_EQ(run("train --config " + td.path("cfg.json") + " --data " + td.path("data") +
                  " --val " + td.path("val") + " --out " + td.path("m.ckpt")),
              0);
    EXPECT_TRUE(fs::exists(td.path("m.ckpt")));
    EXPECT_TRUE(fs::exists(td.path("m.ckpt.final")));
    EXPECT_TRUE(fs::exists(td.path("m.ckpt.log.csv")));

    // zero-initialized head: denoise reproduces the input coordinates
    ASSERT_EQ(run("synth --shape torus --n 96 --noise 0.02 --seed 5 --out " + td.path("n.xyz")),
              0);
    ASSERT_EQ(run("denoise --ckpt " + td.path("m.ckpt") + " --in " + td.path("n.xyz") +
                  " --out " + td.path("d.xyz")),
              0);
    auto in = load_xyz(td.path("n.xyz"));
    auto out = load_xyz(td.path("d.xyz"));
    ASSERT_EQ(in.size(), out.size());
    for (int64_t i = 0; i < in.size(); ++i)
        for (int a = 0; a < 3; ++a) EXPECT_EQ(in.points[i][a], out.points[i][a]);
}

TEST(CliDenoise, DeterministicBytesAndSnapshots) {
    TempDir td;
    write_file(td.path("cfg.json"), smoke_config(2));
    fs::create_directories(td.path("data"));
    fs::create_directories(td.path("val"));
    ASSERT_EQ(run("synth --shape sphere --n 128 --noise 0 --seed 1 --out " +
                  td.path("data/a.xyz")),
              0);
    ASSERT_EQ(
        run("synth --shape sphere --n 128 --noise 0 --seed 2 --out " + td.path("val/a.xyz")), 0);
    ASSERT_EQ(run("train --config " + td.path("cfg.json") + " --data " + td.path("data") +
                  " --val " + td.path("val") + " --out " + td.path("m.ckpt")),
              0);
    ASSERT_EQ(run("synth --shape sphere --n 96 --noise 0.02 --seed 9 --out " + td.path("n.xyz")),
              0);

    ASSERT_EQ(run("denoise --ckpt " + td.path("m.ckpt") + " --in " + td.path("n.xyz") +
                  " --out " + td.path("d1.xyz") + " --snapshots 1.0"),
              0);
    ASSERT_EQ(run("denoise --ckpt " + td.path("m.ckpt") + " --in " + td.path("n.xyz") +
                  " --out " + td.path("d2.xyz")),
              0);
    // byte-identical outputs across runs, and the T snapshot equals the output
    EXPECT_EQ(read_file(td.path("d1.xyz")), read_file(td.path("d2.xyz")));
    EXPECT_EQ(read_file(td.path("d1.t1.xyz")), read_file(td.path("d1.xyz")));
}

TEST(CliDenoise, CorruptCheckpointIsRuntimeError) {
    TempDir td;
    write_file(td.path("junk.ckpt"), "not a checkpoint");
    write_file(td.path("n.xyz"), "0 0 0\n1 0 0\n0 1 0\n0 0 1\n1 1 0\n");
    EXPECT_EQ(run("denoise --ckpt " + td.path("junk.ckpt") + " --in " + td.path("n.xyz") +
                  " --out " + td.path("d.xyz")),
              1);
}

TEST(CliSelftest, PassesCleanAndFailsWithInjectedVjp) {
    TempDir td;
    EXPECT_EQ(run("selftest", td.path("report.txt")), 0);
    const std::string report = read_file(td.path("report.txt"));
    for (const char* suite :
         {"gradient-check", "bernstein-bound", "rk4-order", "kronecker-spectrum"}) {
        EXPECT_NE(report.find(std::string("suite=") + suite), std::string::npos);
        EXPECT_NE(report.find("status=pass"), std::string::npos);
    }
    EXPECT_EQ(run("selftest --inject-bad-vjp leaky_relu", td.path("bad.txt")), 1);
    const std::string bad = read_file(td.path("bad.txt"));
    EXPECT_NE(bad.find("status=fail"), std::string::npos);
    EXPECT_NE(bad.find("leaky_relu"), std::string::npos);
}
