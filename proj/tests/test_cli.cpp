#include <gtest/gtest.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>

#include "sgfnet/config.hpp"
#include "sgfnet/hpf.hpp"

using namespace sgfnet;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out;
};

Run run(const std::string& args) {
  const std::string cmd = std::string(SGFNET_CLI) + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  std::string out;
  char buf[512];
  while (std::fgets(buf, sizeof buf, pipe)) out += buf;
  const int status = pclose(pipe);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("sgfnet_cli_" + std::to_string(::getpid()) + "_" +
                                        ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  // Small network so a CLI training run takes well under a second per epoch.
  std::string train_args(const std::string& data, const std::string& out, int epochs) const {
    return "train --set data=" + data + " --set out=" + out + " --set epochs=" + std::to_string(epochs) +
           " --set stage_channels=8,8,16,16 --set basis_h=4 --set basis_w=4";
  }

  fs::path dir_;
};

std::vector<double> losses(const std::string& log) {
  std::vector<double> out;
  const std::regex line(R"(epoch=\d+ loss=([0-9.]+) miou=[0-9.]+ macc=[0-9.]+)");
  for (std::sregex_iterator it(log.begin(), log.end(), line), end; it != end; ++it) out.push_back(std::stod((*it)[1]));
  return out;
}

}  // namespace

TEST(RunConfigTest, ParsesFileWithCommentsAndOverrides) {
  std::istringstream in("# run\ndata = /tmp/x   # trailing\n\nepochs=7\nstage_channels = 8, 16,24 ,32\nenable_gsa = false\n"
                        "modality = thermal\nlearning_rate = 0.5\n");
  RunConfig rc;
  parse_config(in, rc);
  apply_override(rc, "epochs=9");
  EXPECT_EQ(rc.data, "/tmp/x");
  EXPECT_EQ(rc.net.epochs, 9u);
  EXPECT_EQ(rc.net.stage_channels, (std::array<std::size_t, 4>{8, 16, 24, 32}));
  EXPECT_FALSE(rc.net.enable_gsa);
  EXPECT_EQ(rc.net.modality, Modality::thermal);
  EXPECT_DOUBLE_EQ(rc.net.learning_rate, 0.5);
  EXPECT_FALSE(rc.explicit_dims);
}

TEST(RunConfigTest, RejectsUnknownAndMalformed) {
  RunConfig rc;
  EXPECT_THROW(apply_override(rc, "learning_rte=0.1"), ConfigError);
  EXPECT_THROW(apply_override(rc, "epochs=ten"), ConfigError);
  EXPECT_THROW(apply_override(rc, "epochs"), ConfigError);
  EXPECT_THROW(apply_override(rc, "enable_sfe=maybe"), ConfigError);
  EXPECT_THROW(apply_override(rc, "modality=depth"), ConfigError);
  EXPECT_THROW(apply_override(rc, "stage_channels=8,16"), ConfigError);
  std::istringstream in("epochs 3\n");
  EXPECT_THROW(parse_config(in, rc), ConfigError);
}

TEST(RunConfigTest, TextRoundTrip) {
  RunConfig rc;
  apply_override(rc, "learning_rate=0.0123456789012345");
  apply_override(rc, "enable_ds=false");
  apply_override(rc, "modality=rgb");
  rc.match_dataset({10, 32, 48, 5, 0});
  std::istringstream in(to_text(rc));
  RunConfig back;
  parse_config(in, back);
  EXPECT_EQ(to_text(back), to_text(rc));
  EXPECT_EQ(back.net.learning_rate, rc.net.learning_rate);
  EXPECT_EQ(back.net.width, 48u);
  EXPECT_EQ(back.net.num_classes, 5u);
}

TEST(RunConfigTest, ExplicitDimsMustMatchDataset) {
  RunConfig rc;
  apply_override(rc, "height=64");
  EXPECT_THROW(rc.match_dataset({1, 32, 96, 4, 0}), ConfigError);
}

TEST_F(CliTest, GenWritesDeterministicDataset) {
  ASSERT_EQ(run("gen --out " + path("a") + " --n 4 --h 32 --w 48 --k 5 --seed 3").code, 0);
  ASSERT_EQ(run("gen --out " + path("b") + " --n 4 --h 32 --w 48 --k 5 --seed 3").code, 0);
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(path("a"))) {
    ++files;
    EXPECT_EQ(slurp(e.path()), slurp(fs::path(path("b")) / e.path().filename())) << e.path();
  }
  EXPECT_EQ(files, 3u * 4 + 1);
  EXPECT_EQ(slurp(path("a") + "/meta.txt"), "n=4\nh=32\nw=48\nk=5\nseed=3\n");
  EXPECT_EQ(run("gen --out " + path("c") + " --n 1 --h 30").code, 2);
}

TEST_F(CliTest, TrainEvalInferCycle) {
  ASSERT_EQ(run("gen --out " + path("d") + " --n 4 --h 32 --w 32 --seed 2").code, 0);
  const auto r = run(train_args(path("d"), path("run"), 2));
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(losses(r.out).size(), 2u);
  EXPECT_EQ(losses(slurp(path("run/log.txt"))).size(), 2u);
  EXPECT_NE(slurp(path("run/config.txt")).find("stage_channels = 8,8,16,16"), std::string::npos);
  EXPECT_TRUE(fs::exists(path("run/ckpt/params/manifest.txt")));

  const auto e1 = run("eval --ckpt " + path("run/ckpt") + " --data " + path("d"));
  const auto e2 = run("eval --ckpt " + path("run/ckpt") + " --data " + path("d"));
  ASSERT_EQ(e1.code, 0) << e1.out;
  EXPECT_EQ(e1.out, e2.out);
  EXPECT_NE(e1.out.find("mIoU"), std::string::npos);
  EXPECT_NE(run("eval --ckpt " + path("missing") + " --data " + path("d")).code, 0);

  const std::string infer = "infer --ckpt " + path("run/ckpt") + " --rgb " + path("d/0000_rgb.ppm") + " --th " +
                            path("d/0000_th.pgm") + " --out ";
  ASSERT_EQ(run(infer + path("p1.pgm")).code, 0);
  ASSERT_EQ(run(infer + path("p2.pgm")).code, 0);
  const Image lbl = read_pgm(path("p1.pgm"));
  EXPECT_EQ(lbl.width, 32u);
  EXPECT_EQ(lbl.height, 32u);
  for (auto v : lbl.pixels) EXPECT_LT(v, 4);
  EXPECT_EQ(slurp(path("p1.pgm")), slurp(path("p2.pgm")));
  EXPECT_EQ(read_ppm(path("p1_color.ppm")).width, 32u);
}

TEST_F(CliTest, AblationFlagsChangeParameterManifest) {
  ASSERT_EQ(run("gen --out " + path("d") + " --n 2 --h 32 --w 32").code, 0);
  ASSERT_EQ(run(train_args(path("d"), path("full"), 1)).code, 0);
  ASSERT_EQ(run(train_args(path("d"), path("plain"), 1) + " --set enable_sfe=false --set enable_gsa=false").code, 0);
  const std::string full = slurp(path("full/ckpt/params/manifest.txt")), plain = slurp(path("plain/ckpt/params/manifest.txt"));
  EXPECT_NE(full, plain);
  EXPECT_NE(full.find("attn_rgb"), std::string::npos);
  EXPECT_EQ(plain.find("attn_rgb"), std::string::npos);
  EXPECT_EQ(plain.find("mlp_rgb."), std::string::npos);
}

TEST_F(CliTest, ResumeJoinsUninterruptedTrace) {
  ASSERT_EQ(run("gen --out " + path("d") + " --n 4 --h 32 --w 32 --seed 5").code, 0);
  const auto straight = run(train_args(path("d"), path("straight"), 3));
  ASSERT_EQ(straight.code, 0) << straight.out;
  ASSERT_EQ(run(train_args(path("d"), path("part"), 2)).code, 0);
  const auto resumed = run(train_args(path("d"), path("rest"), 3) + " --set resume=" + path("part/ckpt"));
  ASSERT_EQ(resumed.code, 0) << resumed.out;
  const auto full = losses(straight.out), tail = losses(resumed.out);
  ASSERT_EQ(full.size(), 3u);
  ASSERT_EQ(tail.size(), 1u);
  EXPECT_NEAR(tail[0], full[2], 1e-6);
  EXPECT_NE(resumed.out.find("epoch=3 "), std::string::npos);
}

TEST_F(CliTest, ErrorExitCodes) {
  EXPECT_EQ(run("").code, 1);
  EXPECT_EQ(run("frobnicate").code, 1);
  EXPECT_EQ(run("train --set nonsense=1").code, 1);
  EXPECT_EQ(run("train --set data=" + path("nowhere")).code, 2);
  {
    std::ofstream bad(path("bad.pgm"), std::ios::binary);
    bad << "P5 4 4 255\nxx";
  }
  EXPECT_EQ(run("hpf --in " + path("bad.pgm") + " --out " + path("o.pgm")).code, 2);
  EXPECT_EQ(run("hpf --in " + path("bad.pgm") + " --cutoff 2 --out " + path("o.pgm")).code, 1);
  ASSERT_EQ(run("gen --out " + path("d") + " --n 2 --h 32 --w 32").code, 0);
  EXPECT_EQ(run(train_args(path("d"), path("r"), 3) + " --set learning_rate=1e30 --set batch_size=1").code, 3);
}

TEST_F(CliTest, HelpListsEveryCommand) {
  const auto r = run("--help");
  EXPECT_EQ(r.code, 0);
  for (const char* c : {"gen", "train", "eval", "infer", "hpf", "gradcheck"}) EXPECT_NE(r.out.find(c), std::string::npos) << c;
  EXPECT_NE(run("gen --help").out.find("--seed"), std::string::npos);
}

TEST_F(CliTest, HpfCutoffZeroAndConstantImage) {
  Image img(1, 16, 24);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = static_cast<std::uint8_t>((i * 37) % 256);
  write_image_file(path("in.pgm"), img);
  ASSERT_EQ(run("hpf --in " + path("in.pgm") + " --cutoff 0 --out " + path("same.pgm")).code, 0);
  const Image same = read_pgm(path("same.pgm"));
  for (std::size_t i = 0; i < img.pixels.size(); ++i) EXPECT_LE(std::abs(int(same.pixels[i]) - int(img.pixels[i])), 1);

  Image flat(1, 16, 16);
  std::ranges::fill(flat.pixels, 77);
  write_image_file(path("flat.pgm"), flat);
  ASSERT_EQ(run("hpf --in " + path("flat.pgm") + " --cutoff 0.1 --out " + path("flat_out.pgm")).code, 0);
  for (auto v : read_pgm(path("flat_out.pgm")).pixels) EXPECT_EQ(v, 128);
}

TEST_F(CliTest, HpfKeepsEdgeEnergy) {
  const auto demo = hpf::make_edge_image(64, 96, 0);
  Image img(1, 64, 96);
  for (std::size_t i = 0; i < img.pixels.size(); ++i)
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(demo.image.values[i], 0.0, 1.0) * 255));
  write_image_file(path("edges.pgm"), img);
  ASSERT_EQ(run("hpf --in " + path("edges.pgm") + " --cutoff 0.1 --out " + path("edges_hp.pgm")).code, 0);
  const Image out = read_pgm(path("edges_hp.pgm"));
  Grid<double> response(64, 96);
  for (std::size_t i = 0; i < out.pixels.size(); ++i) response.values[i] = int(out.pixels[i]) - 128;
  EXPECT_GT(hpf::energy_fraction(response, hpf::near_edges(demo.region, 2)), 0.5);
}

TEST_F(CliTest, GradcheckReportsEveryOpAndDetectsFault) {
  const auto ok = run("gradcheck --seed 0 --size 4");
  EXPECT_EQ(ok.code, 0) << ok.out;
  for (const char* name : {"add", "conv2d_depthwise", "attention", "dct_pool", "soft_ce_loss", "sgf_block"})
    EXPECT_NE(ok.out.find(name), std::string::npos) << name;
  const auto bad = run("gradcheck --inject-fault conv2d_pointwise");
  EXPECT_NE(bad.code, 0);
  EXPECT_NE(bad.out.find("FAIL"), std::string::npos);
}
