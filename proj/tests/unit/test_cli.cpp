// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "tapct/volcore.hpp"

namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code = -1;
  std::string output;
};

CliResult run_cli(const std::string& args) {
  const std::string cmd = std::string(TAPCT_CLI_PATH) + " " + args + " 2>&1";
  CliResult r;
  FILE* p = popen(cmd.c_str(), "r");
  if (p == nullptr) return r;
  std::array<char, 4096> buf{};
  while (fgets(buf.data(), static_cast<int>(buf.size()), p) != nullptr) r.output += buf.data();
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

nlohmann::json read_json(const fs::path& p) {
  std::ifstream f(p);
  return nlohmann::json::parse(f);
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("tapct_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  std::string d(const std::string& sub) const { return (dir_ / sub).string(); }
  fs::path dir_;
};

}  // namespace

TEST_F(Cli, NoOrUnknownSubcommandFails) {
  EXPECT_EQ(run_cli("").code, 1);
  const CliResult r = run_cli("frobnicate");
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(run_cli("--version").code, 0);
}

TEST_F(Cli, SynthIsDeterministicAndWritesRunRecord) {
  ASSERT_EQ(run_cli("synth --n 2 --shape 8,32,32 --seed 3 --out " + d("a")).code, 0);
  ASSERT_EQ(run_cli("synth --n 2 --shape 8,32,32 --seed 3 --out " + d("b")).code, 0);
  for (const char* id : {"phantom_0000", "phantom_0001"}) {
    const auto va = tapct::load_volume(dir_ / "a" / "images" / id);
    const auto vb = tapct::load_volume(dir_ / "b" / "images" / id);
    EXPECT_EQ(tapct::checksum(va), tapct::checksum(vb));
    EXPECT_EQ(va.shape(), (tapct::Extent3{8, 32, 32}));
  }
  const auto run = read_json(dir_ / "a" / "run.json");
  EXPECT_EQ(run.at("command"), "synth");
  EXPECT_TRUE(run.contains("version"));
  EXPECT_TRUE(run.contains("argv"));
}

TEST_F(Cli, RejectsBadArguments) {
  EXPECT_EQ(run_cli("synth --n 1 --shape 4,4,4 --out " + d("s")).code, 1);
  EXPECT_EQ(run_cli("stats --in " + d("missing")).code, 1);
  EXPECT_EQ(run_cli("pretrain --set no.such.key=1 --out " + d("p")).code, 1);
}

TEST_F(Cli, SingleClassLabelsMakeAucUndefined) {
  ASSERT_EQ(run_cli("synth --n 4 --shape 8,64,64 --out " + d("data")).code, 0);
  ASSERT_EQ(run_cli("pretrain --set data.root=" + d("data/images") +
                  " --set train.iterations=1 --set train.batch_size=2 --set crop.n_local=1"
                  " --set head.prototypes=16 --set head.hidden=16 --set head.bottleneck=8"
                  " --out " + d("run"))
                .code,
            0);
  ASSERT_EQ(run_cli("embed --ckpt " + d("run/final.tapckpt") + " --in " + d("data/images") + " --out " +
                  d("emb"))
                .code,
            0);
  {
    std::ofstream csv(dir_ / "labels.csv");
    csv << "id,finding\n";
    for (int i = 0; i < 4; ++i) csv << "phantom_000" << i << ",1\n";
  }
  const CliResult r = run_cli("eval-cls --bags " + d("emb") + " --labels " + d("labels.csv") + " --test 2");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("AUC undefined"), std::string::npos) << r.output;

  const CliResult seg = run_cli("eval-seg --embeddings " + d("emb") + " --labels " + d("data/labels") +
                        " --test 1 --epochs 2 --out " + d("seg"));
  ASSERT_EQ(seg.code, 0) << seg.output;
  const auto m = read_json(dir_ / "seg" / "metrics.json");
  EXPECT_EQ(m.at("n_test"), 1);
  EXPECT_GE(m.at("dice_macro").get<double>(), 0.0);
  EXPECT_LE(m.at("dice_macro").get<double>(), 1.0);

  const CliResult ret = run_cli("retrieve --ckpt " + d("run/final.tapckpt") + " --scan-a " +
                        d("data/images/phantom_0000") + " --mask-a " + d("data/labels/phantom_0000") +
                        " --scan-b " + d("data/images/phantom_0001") + " --topk 3 --overlay --out " +
                        d("ret"));
  ASSERT_EQ(ret.code, 0) << ret.output;
  const auto matches = read_json(dir_ / "ret" / "matches.json");
  EXPECT_TRUE(matches.dump().find("score") != std::string::npos);
}
