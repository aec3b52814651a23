#include <gtest/gtest.h>

#include <algorithm>
#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>
#include <sys/wait.h>

#include "json.hpp"

namespace fs = std::filesystem;

namespace {

struct Outcome {
    int code;
    std::string out;
};

Outcome msense(const std::string& args) {
    const std::string cmd = std::string(MSENSE_CLI) + " " + args + " 2>&1";
    FILE* pipe = popen(cmd.c_str(), "r");
    if (!pipe) return {-1, ""};
    std::string out;
    std::array<char, 4096> buf{};
    while (std::fgets(buf.data(), buf.size(), pipe)) out += buf.data();
    const int status = pclose(pipe);
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

class CliTest : public ::testing::Test {
protected:
    fs::path dir;

    void SetUp() override {
        const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
        dir = fs::temp_directory_path() / (std::string("msense_cli_") + info->name());
        fs::remove_all(dir);
        fs::create_directories(dir);
    }
    void TearDown() override { fs::remove_all(dir); }

    std::string tiny_config() {
        const nlohmann::json j = {
            {"dataset", {{"preset", "synthetic-3"}, {"n", 45}, {"seed", 3}}},
            {"methods", {"input", "esensi"}},
            {"k", 3},
            {"percents", {0, 0.5, 1}},
            {"encoder", {{"embedding_dim", 4}, {"layers", 1}}},
            {"train", {{"epochs", 3}, {"batch_size", 16}, {"patience", 2}}},
            {"threads", 1}};
        const fs::path p = dir / "cfg.json";
        std::ofstream(p) << j.dump(2);
        return p.string();
    }
};

TEST_F(CliTest, HelpExitsZero) {
    const auto r = msense("--help");
    EXPECT_EQ(r.code, 0);
    EXPECT_NE(r.out.find("generate"), std::string::npos);
}

TEST_F(CliTest, MissingSubcommandIsUsageError) { EXPECT_EQ(msense("").code, 2); }

TEST_F(CliTest, GenerateCropPresetShapes) {
    const auto r = msense("generate --preset cropharvest-like --n 30 --seed 7 --out " + (dir / "g").string());
    ASSERT_EQ(r.code, 0) << r.out;
    const auto manifest = nlohmann::json::parse(slurp(dir / "g" / "manifest.json"));
    ASSERT_EQ(manifest.at("sensors").size(), 4u);
    EXPECT_EQ(manifest["sensors"][0]["dim"], 11);
    EXPECT_EQ(manifest["sensors"][0]["timesteps"], 12);
    EXPECT_TRUE(fs::exists(dir / "g" / "generator.json"));
}

TEST_F(CliTest, GenerateZeroSamplesWritesHeadersOnly) {
    ASSERT_EQ(msense("generate --preset synthetic-3 --n 0 --out " + (dir / "g").string()).code, 0);
    const std::string labels = slurp(dir / "g" / "labels.csv");
    EXPECT_EQ(std::count(labels.begin(), labels.end(), '\n'), 1);
}

TEST_F(CliTest, GenerateIsReproducible) {
    ASSERT_EQ(msense("generate --preset pm25-like --n 20 --seed 4 --out " + (dir / "a").string()).code, 0);
    ASSERT_EQ(msense("generate --preset pm25-like --n 20 --seed 4 --out " + (dir / "b").string()).code, 0);
    for (const auto& e : fs::directory_iterator(dir / "a")) {
        EXPECT_EQ(slurp(e.path()), slurp(dir / "b" / e.path().filename())) << e.path().filename();
    }
}

TEST_F(CliTest, GenerateRejectsUnknownPresetAndKey) {
    EXPECT_EQ(msense("generate --preset nope --out " + (dir / "g").string()).code, 2);
    EXPECT_EQ(msense("generate --preset synthetic-3 -s bogus=1 --out " + (dir / "g").string()).code, 2);
}

TEST_F(CliTest, RunRejectsUnknownMethod) {
    const auto r = msense("run -c " + tiny_config() + " -s 'methods=[\"bogus\"]' -o " + (dir / "r").string());
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.out.find("bogus"), std::string::npos);
    EXPECT_FALSE(fs::exists(dir / "r" / "results.csv"));
}

TEST_F(CliTest, RunRejectsUnknownOverrideKey) {
    EXPECT_EQ(msense("run -c " + tiny_config() + " -s train.epoch=3 -o " + (dir / "r").string()).code, 2);
}

TEST_F(CliTest, DryRunValidatesWithoutWriting) {
    const auto r = msense("run -c " + tiny_config() + " --dry-run");
    EXPECT_EQ(r.code, 0) << r.out;
    EXPECT_EQ(msense("run -c " + tiny_config() + " -s k=1 --dry-run").code, 2);
}

TEST_F(CliTest, RunWritesArtifactsAndIsByteIdentical) {
    const std::string cfg = tiny_config();
    const auto a = msense("run -c " + cfg + " -o " + (dir / "a").string());
    ASSERT_EQ(a.code, 0) << a.out;
    EXPECT_NE(a.out.find("synthetic-3 (f1)"), std::string::npos);
    for (const char* f : {"config.json", "results.csv", "summary.json"}) EXPECT_TRUE(fs::exists(dir / "a" / f)) << f;
    EXPECT_TRUE(fs::exists(dir / "a" / "plotdata" / "esensi__alpha.csv"));

    const auto stamped = nlohmann::json::parse(slurp(dir / "a" / "config.json"));
    EXPECT_EQ(stamped["k"], 3);
    EXPECT_EQ(stamped["train"]["epochs"], 3);

    ASSERT_EQ(msense("run -c " + cfg + " -o " + (dir / "b").string()).code, 0);
    EXPECT_EQ(slurp(dir / "a" / "results.csv"), slurp(dir / "b" / "results.csv"));
    auto sa = nlohmann::json::parse(slurp(dir / "a" / "summary.json"));
    auto sb = nlohmann::json::parse(slurp(dir / "b" / "summary.json"));
    sa["config"].erase("output_dir");
    sb["config"].erase("output_dir");
    EXPECT_EQ(sa, sb);

    const auto rep = msense("report -i " + (dir / "a").string());
    EXPECT_EQ(rep.code, 0);
    EXPECT_NE(rep.out.find("PRS"), std::string::npos);
}

TEST_F(CliTest, SweepDropoutRatioRows) {
    const auto r = msense("sweep dropout-ratio -c " + tiny_config() + " --ratios 0.2,0.6 -o " + (dir / "s").string());
    ASSERT_EQ(r.code, 0) << r.out;
    const std::string csv = slurp(dir / "s" / "dropout-ratio.csv");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
    EXPECT_EQ(msense("sweep dropout-ratio -c " + tiny_config() + " --ratios '' -o " + (dir / "s").string()).code, 2);
    EXPECT_EQ(msense("sweep nonsense -c " + tiny_config() + " -o " + (dir / "s").string()).code, 2);
}

TEST_F(CliTest, TrainThenEvaluateMatchesRun) {
    const std::string cfg = tiny_config();
    ASSERT_EQ(msense("run -c " + cfg + " -o " + (dir / "r").string()).code, 0);
    ASSERT_EQ(msense("train -c " + cfg + " -m esensi --fold 1 -o " + (dir / "t").string()).code, 0);
    const auto ev = msense("evaluate --model " + (dir / "t").string());
    ASSERT_EQ(ev.code, 0) << ev.out;

    std::istringstream rows(slurp(dir / "r" / "results.csv"));
    std::string line, expected;
    while (std::getline(rows, line)) {
        if (line.rfind("esensi,1,alpha,0,", 0) == 0) expected = line;
    }
    ASSERT_FALSE(expected.empty());
    std::vector<std::string> cells;
    std::stringstream ss(expected);
    for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4f", std::stod(cells[5]));
    EXPECT_NE(ev.out.find(std::string("full-sensor f1 ") + buf), std::string::npos) << ev.out;

    EXPECT_EQ(msense("train -c " + cfg + " --fold 3 -o " + (dir / "t2").string()).code, 2);
}

}  // namespace
