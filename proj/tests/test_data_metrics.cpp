#include <gtest/gtest.h>

#include <unistd.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "sgfnet/data.hpp"
#include "sgfnet/metrics.hpp"

using namespace sgfnet;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("sgfnet_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

ConfusionMatrix from_rows(std::vector<std::vector<std::uint64_t>> rows) {
  ConfusionMatrix cm(rows.size());
  for (std::size_t g = 0; g < rows.size(); ++g)
    for (std::size_t p = 0; p < rows.size(); ++p) cm(g, p) = rows[g][p];
  return cm;
}

// Per-class IoU straight from label lists: |pred=c and gt=c| / |pred=c or gt=c|.
double iou_from_pixels(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gt, std::uint8_t c) {
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    inter += pred[i] == c && gt[i] == c;
    uni += pred[i] == c || gt[i] == c;
  }
  return static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace

TEST(ConfusionMatrixTest, PerfectPredictionIsDiagonal) {
  const std::vector<std::uint8_t> labels{0, 1, 2, 2, 1, 0, 3, 3};
  ConfusionMatrix cm(4);
  accumulate(cm, std::span<const std::uint8_t>(labels), std::span<const std::uint8_t>(labels));
  EXPECT_EQ(cm.total(), labels.size());
  for (std::size_t g = 0; g < 4; ++g)
    for (std::size_t p = 0; p < 4; ++p)
      if (g != p) {
        EXPECT_EQ(cm(g, p), 0u);
      }
  const auto m = metrics(cm);
  EXPECT_DOUBLE_EQ(m.macc, 1.0);
  EXPECT_DOUBLE_EQ(m.miou, 1.0);
}

TEST(ConfusionMatrixTest, SingleErrorLandsInGtRowPredColumn) {
  const std::vector<std::uint8_t> gt{0, 1, 1, 0}, pred{0, 0, 1, 0};
  ConfusionMatrix cm(2);
  accumulate(cm, std::span<const std::uint8_t>(pred), std::span<const std::uint8_t>(gt));
  EXPECT_EQ(cm(1, 0), 1u);
  EXPECT_EQ(cm(0, 1), 0u);
  EXPECT_EQ(cm(0, 0), 2u);
  EXPECT_EQ(cm(1, 1), 1u);
}

TEST(ConfusionMatrixTest, RejectsBadInput) {
  ConfusionMatrix cm(3);
  const std::vector<std::uint8_t> a{0, 1}, b{0, 1, 2}, bad{0, 3};
  EXPECT_THROW(accumulate(cm, std::span<const std::uint8_t>(a), std::span<const std::uint8_t>(b)), DimensionError);
  EXPECT_THROW(accumulate(cm, std::span<const std::uint8_t>(bad), std::span<const std::uint8_t>(a)), RangeError);
  EXPECT_THROW(metrics(ConfusionMatrix(3)), RangeError);
}

TEST(MetricsTest, TwoClassHandExample) {
  const auto m = metrics(from_rows({{3, 1}, {1, 3}}));
  EXPECT_DOUBLE_EQ(m.acc[0], 0.75);
  EXPECT_DOUBLE_EQ(m.acc[1], 0.75);
  EXPECT_DOUBLE_EQ(m.iou[0], 0.6);
  EXPECT_DOUBLE_EQ(m.iou[1], 0.6);
  EXPECT_DOUBLE_EQ(m.miou, 0.6);
  EXPECT_DOUBLE_EQ(m.macc, 0.75);
}

TEST(MetricsTest, AbsentClassExcluded) {
  // Class 2 never appears in ground truth or prediction.
  const auto m = metrics(from_rows({{4, 0, 0}, {2, 2, 0}, {0, 0, 0}}));
  EXPECT_FALSE(m.present[2]);
  EXPECT_TRUE(std::isnan(m.iou[2]));
  EXPECT_TRUE(std::isfinite(m.miou));
  EXPECT_DOUBLE_EQ(m.macc, (1.0 + 0.5) / 2);
  EXPECT_DOUBLE_EQ(m.miou, (4.0 / 6 + 2.0 / 4) / 2);
}

TEST(MetricsTest, MatchesPixelLevelOracleAndBounds) {
  std::mt19937_64 rng(17);
  std::uniform_int_distribution<int> cls(0, 4);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::uint8_t> gt(300), pred(300);
    for (auto& g : gt) g = static_cast<std::uint8_t>(cls(rng));
    for (std::size_t i = 0; i < gt.size(); ++i) pred[i] = rng() % 3 == 0 ? static_cast<std::uint8_t>(cls(rng)) : gt[i];
    ConfusionMatrix cm(5);
    accumulate(cm, std::span<const std::uint8_t>(pred), std::span<const std::uint8_t>(gt));
    const auto m = metrics(cm);
    for (std::uint8_t c = 0; c < 5; ++c) {
      if (!m.present[c]) continue;
      EXPECT_NEAR(m.iou[c], iou_from_pixels(pred, gt, c), 1e-12);
      EXPECT_LE(0.0, m.iou[c]);
      EXPECT_LE(m.iou[c], m.acc[c]);
      EXPECT_LE(m.acc[c], 1.0);
    }
  }
}

TEST(MetricsTest, PermutationEquivariant) {
  std::mt19937_64 rng(3);
  std::vector<std::uint8_t> gt(200), pred(200);
  for (auto& g : gt) g = static_cast<std::uint8_t>(rng() % 4);
  for (auto& p : pred) p = static_cast<std::uint8_t>(rng() % 4);
  const std::array<std::uint8_t, 4> perm{2, 0, 3, 1};
  std::vector<std::uint8_t> gt2(gt.size()), pred2(pred.size());
  for (std::size_t i = 0; i < gt.size(); ++i) gt2[i] = perm[gt[i]], pred2[i] = perm[pred[i]];
  ConfusionMatrix a(4), b(4);
  accumulate(a, std::span<const std::uint8_t>(pred), std::span<const std::uint8_t>(gt));
  accumulate(b, std::span<const std::uint8_t>(pred2), std::span<const std::uint8_t>(gt2));
  const auto ma = metrics(a), mb = metrics(b);
  EXPECT_NEAR(ma.miou, mb.miou, 1e-15);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_DOUBLE_EQ(ma.iou[c], mb.iou[perm[c]]);
}

TEST(MetricsTest, MergeEqualsJointAccumulation) {
  const std::vector<std::uint8_t> g1{0, 1, 2}, p1{0, 2, 2}, g2{1, 1, 0}, p2{1, 0, 0};
  ConfusionMatrix a(3), b(3), joint(3);
  accumulate(a, std::span<const std::uint8_t>(p1), std::span<const std::uint8_t>(g1));
  accumulate(b, std::span<const std::uint8_t>(p2), std::span<const std::uint8_t>(g2));
  accumulate(joint, std::span<const std::uint8_t>(p1), std::span<const std::uint8_t>(g1));
  accumulate(joint, std::span<const std::uint8_t>(p2), std::span<const std::uint8_t>(g2));
  a += b;
  EXPECT_EQ(a, joint);
}

TEST(NetpbmTest, RoundTripRandomImages) {
  std::mt19937 rng(9);
  for (std::size_t channels : {1u, 3u}) {
    Image img(channels, 5, 7);
    for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng());
    std::stringstream buf;
    write_netpbm(buf, img);
    EXPECT_EQ(read_netpbm(buf), img);
  }
}

TEST(NetpbmTest, HeaderParsing) {
  std::stringstream in;
  in << "P5 4 3 255\n" << std::string(12, '\x07');
  const Image img = read_netpbm(in);
  EXPECT_EQ(img.width, 4u);
  EXPECT_EQ(img.height, 3u);
  EXPECT_EQ(img.channels, 1u);

  std::stringstream commented;
  commented << "P6\n# made by hand\n2 1\n255\n" << std::string(6, 'a');
  EXPECT_EQ(read_netpbm(commented).width, 2u);
}

TEST(NetpbmTest, RejectsMalformed) {
  auto parse = [](const std::string& s) {
    std::stringstream in(s);
    return read_netpbm(in);
  };
  EXPECT_THROW(parse("P5 4 3 65535\n" + std::string(24, 'x')), FormatError);
  EXPECT_THROW(parse("P5 4 3 255\n" + std::string(11, 'x')), FormatError);
  EXPECT_THROW(parse("P3 1 1 255\n1 2 3"), FormatError);
  EXPECT_THROW(parse("P5 four 3 255\n"), FormatError);
  EXPECT_THROW(parse("P5 0 3 255\n"), FormatError);
}

TEST(GeneratorTest, SameSeedBitIdentical) {
  EXPECT_EQ(gen_dataset(4, 32, 48, 4, 5), gen_dataset(4, 32, 48, 4, 5));
  EXPECT_NE(gen_dataset(2, 32, 48, 4, 5), gen_dataset(2, 32, 48, 4, 6));
}

TEST(GeneratorTest, SampleIndependentOfDatasetSize) {
  const auto small = gen_dataset(3, 32, 32, 5, 1);
  const auto large = gen_dataset(6, 32, 32, 5, 1);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(small[i], large[i]);
}

TEST(GeneratorTest, RangesAndShapeCount) {
  for (std::size_t i = 0; i < 30; ++i) {
    std::vector<ShapeSpec> layout;
    const auto s = gen_sample(i, 64, 96, 4, 0, &layout);
    EXPECT_GE(layout.size(), 2u);
    EXPECT_LE(layout.size(), 5u);
    EXPECT_EQ(s.rgb.size(), 3u * 64 * 96);
    EXPECT_EQ(s.thermal.size(), 64u * 96);
    for (float v : s.rgb) ASSERT_TRUE(v >= 0.0f && v <= 1.0f);
    for (float v : s.thermal) ASSERT_TRUE(v >= 0.0f && v <= 1.0f);
    for (auto l : s.labels) ASSERT_LT(l, 4);
  }
}

TEST(GeneratorTest, HiddenModalityMatchesBackground) {
  const double tol = 3 * kNoiseSigma + 1.0 / 255;
  const auto bg = class_color(0, 4);
  std::size_t checked_rgb_only = 0, checked_thermal_only = 0;
  for (std::size_t idx = 0; idx < 40; ++idx) {
    std::vector<ShapeSpec> layout;
    const auto s = gen_sample(idx, 64, 96, 4, 0, &layout);
    const std::size_t hw = 64 * 96;
    for (std::size_t k = 0; k < layout.size(); ++k) {
      for (std::size_t y = 0; y < 64; ++y)
        for (std::size_t x = 0; x < 96; ++x) {
          if (!layout[k].contains(y, x)) continue;
          bool alone = true;
          for (std::size_t j = 0; j < layout.size(); ++j) alone = alone && (j == k || !layout[j].contains(y, x));
          if (!alone) continue;
          const std::size_t i = y * 96 + x;
          if (layout[k].visibility == Visibility::rgb_only) {
            EXPECT_LT(std::abs(s.thermal[i] - kThermalBackground), tol);
            ++checked_rgb_only;
          } else if (layout[k].visibility == Visibility::thermal_only) {
            for (std::size_t ch = 0; ch < 3; ++ch) EXPECT_LT(std::abs(s.rgb[ch * hw + i] - bg[ch]), tol);
            ++checked_thermal_only;
          }
        }
    }
  }
  EXPECT_GT(checked_rgb_only, 1000u);
  EXPECT_GT(checked_thermal_only, 1000u);
}

TEST(GeneratorTest, VisibleModalityHasContrast) {
  for (std::size_t c = 1; c < 4; ++c) EXPECT_GT(std::abs(class_temperature(c, 4) - kThermalBackground), 6 * kNoiseSigma);
  const auto bg = class_color(0, 4);
  for (std::size_t c = 1; c < 4; ++c) {
    const auto col = class_color(c, 4);
    double d = 0;
    for (std::size_t ch = 0; ch < 3; ++ch) d = std::max(d, static_cast<double>(std::abs(col[ch] - bg[ch])));
    EXPECT_GT(d, 6 * kNoiseSigma) << c;
  }
}

TEST(GeneratorTest, EveryClassAppearsInHundredSamples) {
  const auto data = gen_dataset(100, 64, 96, 4, 0);
  std::array<std::size_t, 4> hist{};
  for (const auto& s : data)
    for (auto l : s.labels) ++hist[l];
  for (std::size_t c = 0; c < 4; ++c) EXPECT_GT(hist[c], 0u) << c;
}

TEST(GeneratorTest, RejectsInvalidDimensions) {
  EXPECT_THROW(gen_dataset(1, 60, 96, 4, 0), DimensionError);
  EXPECT_THROW(gen_dataset(1, 64, 96, 3, 0), RangeError);
  EXPECT_THROW(gen_dataset(0, 64, 96, 4, 0), RangeError);
}

TEST(DatasetIoTest, SaveLoadIsLossless) {
  const fs::path dir = scratch_dir("dataset");
  const auto data = gen_dataset(3, 32, 48, 5, 11);
  save_dataset(dir, data, {3, 32, 48, 5, 11});
  std::size_t files = 0;
  for ([[maybe_unused]] const auto& e : fs::directory_iterator(dir)) ++files;
  EXPECT_EQ(files, 3u * 3 + 1);
  DatasetMeta meta;
  const auto loaded = load_dataset(dir, &meta);
  EXPECT_EQ(meta.n, 3u);
  EXPECT_EQ(meta.height, 32u);
  EXPECT_EQ(meta.width, 48u);
  EXPECT_EQ(meta.classes, 5u);
  EXPECT_EQ(meta.seed, 11u);
  EXPECT_EQ(loaded, data);
  fs::remove_all(dir);
}

TEST(DatasetIoTest, MissingOrCorruptFilesFail) {
  const fs::path dir = scratch_dir("corrupt");
  EXPECT_THROW(load_dataset(dir), Error);
  save_dataset(dir, gen_dataset(1, 16, 16, 4, 0), {1, 16, 16, 4, 0});
  {
    std::ofstream trunc(dir / "0000_th.pgm", std::ios::binary);
    trunc << "P5 16 16 255\n" << std::string(10, '\0');
  }
  EXPECT_THROW(load_dataset(dir), FormatError);
  fs::remove_all(dir);
}
