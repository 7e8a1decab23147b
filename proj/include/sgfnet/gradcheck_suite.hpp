#pragma once

// Central-difference check of every differentiable op and of the SGF block,
// in double precision, over three consecutive seeds.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "sgfnet/gradcheck.hpp"
#include "sgfnet/network.hpp"
#include "sgfnet/ops.hpp"
#include "sgfnet/sgf.hpp"
#include "sgfnet/spectral.hpp"

namespace sgfnet {

inline constexpr double kOpTolerance = 1e-4;
inline constexpr double kBlockTolerance = 1e-3;

struct GradReport {
  std::string name;
  double max_error = 0.0;
  double tolerance = kOpTolerance;
  bool passed() const { return max_error < tolerance; }
};

namespace detail {

using TD = Tensor<double>;

struct GradCase {
  std::string name;
  double tolerance;
  std::vector<TD> inputs;
  std::function<TD()> loss;
};

inline TD rand_t(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  TD t(std::move(s));
  for (double& v : t.mutable_data()) v = d(rng);
  return t;
}

inline std::vector<GradCase> gradient_cases(std::uint64_t seed, std::size_t size) {
  Rng rng(seed);
  const std::size_t s = std::max<std::size_t>(size, 3);
  std::vector<GradCase> cases;
  // Each case reduces its output as sum(y * w) with a fixed random w.
  auto add_case = [&](std::string name, std::vector<TD> inputs, auto body, double tol = kOpTolerance) {
    const TD w_proj = [&] {
      NoTapeScope<double> guard;
      return rand_t(body(inputs).shape(), rng);
    }();
    cases.push_back({std::move(name), tol, inputs, [inputs, body, w_proj] { return sum(mul(body(inputs), w_proj)); }});
  };
  using V = const std::vector<TD>&;
  const Shape x4{2, 4, s, s};

  add_case("add", {rand_t(x4, rng), rand_t({2, 4}, rng)}, [](V in) { return add(in[0], in[1]); });
  add_case("sub", {rand_t(x4, rng), rand_t(x4, rng)}, [](V in) { return sub(in[0], in[1]); });
  add_case("mul", {rand_t(x4, rng), rand_t({2, 4, 1, 1}, rng)}, [](V in) { return mul(in[0], in[1]); });
  add_case("div", {rand_t(x4, rng), rand_t(x4, rng, 0.5, 1.5)}, [](V in) { return div(in[0], in[1]); });
  add_case("scalar_mul", {rand_t(x4, rng)}, [](V in) { return scalar_mul(in[0], 2.5); });
  add_case("add_scalar", {rand_t(x4, rng)}, [](V in) { return add_scalar(in[0], 0.3); });
  add_case("rsub_scalar", {rand_t(x4, rng)}, [](V in) { return rsub_scalar(1.0, in[0]); });
  add_case("sigmoid", {rand_t(x4, rng, -4, 4)}, [](V in) { return sigmoid(in[0]); });
  add_case("relu", {rand_t(x4, rng)}, [](V in) { return relu(in[0]); });
  add_case("elementwise", {rand_t(x4, rng), rand_t(x4, rng)},
           [](V in) { return elementwise(ElementwiseOp::mul, elementwise(ElementwiseOp::sigmoid, in[0]), in[1]); });
  add_case("broadcast_mul_channel", {rand_t(x4, rng), rand_t({2, 4}, rng)},
           [](V in) { return broadcast_mul_channel(in[0], in[1]); });
  add_case("broadcast_mul_spatial", {rand_t(x4, rng), rand_t({2, 1, s, s}, rng)},
           [](V in) { return broadcast_mul_spatial(in[0], in[1]); });
  add_case("sum", {rand_t(x4, rng)}, [](V in) { return sum(mul(in[0], in[0])); });
  add_case("mean", {rand_t(x4, rng)}, [](V in) { return mean(mul(in[0], in[0])); });
  add_case("sum_per_channel", {rand_t(x4, rng)}, [](V in) { return sum_per_channel(in[0]); });
  add_case("reshape", {rand_t(x4, rng)}, [s](V in) { return reshape(in[0], {8, s * s}); });
  add_case("transpose", {rand_t({2, 4, s}, rng)}, [](V in) { return transpose(in[0]); });
  add_case("matmul", {rand_t({2, 3, 4}, rng), rand_t({2, 4, s}, rng)}, [](V in) { return matmul(in[0], in[1]); });
  add_case("linear", {rand_t({2, 4}, rng), rand_t({3, 4}, rng), rand_t({3}, rng)},
           [](V in) { return linear(in[0], in[1], in[2]); });
  add_case("conv2d_pointwise", {rand_t(x4, rng), rand_t({3, 4}, rng), rand_t({3}, rng)},
           [](V in) { return conv2d_pointwise(in[0], in[1], in[2]); });
  add_case("conv2d_depthwise", {rand_t(x4, rng), rand_t({4, 3, 3}, rng)},
           [](V in) { return conv2d_depthwise(in[0], in[1], 1); });
  add_case("conv2d_depthwise_dilated", {rand_t(x4, rng), rand_t({4, 3, 3}, rng)},
           [](V in) { return conv2d_depthwise(in[0], in[1], 2); });
  add_case("adaptive_avg_pool", {rand_t(x4, rng)}, [s](V in) { return adaptive_avg_pool(in[0], s - 1, 2); });
  add_case("upsample_bilinear", {rand_t(x4, rng)}, [s](V in) { return upsample_bilinear(in[0], 2 * s + 1, s + 2); });
  add_case("softmax", {rand_t(x4, rng, -3, 3)}, [](V in) { return softmax(in[0], 1); });
  add_case("log_softmax", {rand_t(x4, rng, -3, 3)}, [](V in) { return log_softmax(in[0], 1); });
  add_case("concat_channels", {rand_t(x4, rng), rand_t({2, 2, s, s}, rng)},
           [](V in) { return concat_channels<double>({in[0], in[1]}); });
  add_case("split_channels", {rand_t(x4, rng)}, [](V in) {
    auto parts = split_channels(in[0], {1, 3});
    return add(scalar_mul(sum(parts[0]), 2.0), sum(mul(parts[1], parts[1])));
  });
  add_case("attention", {rand_t({2, 2, s * s}, rng), rand_t({2, 2, s * s}, rng), rand_t({2, 4, s * s}, rng)},
           [](V in) { return attention(in[0], in[1], in[2]).out; });
  {
    const auto basis = spectral::SpectralBasisSet<double>::zigzag(4, std::min<std::size_t>(s, 4), 3);
    add_case("dct_pool", {rand_t({2, 8, s, s}, rng)}, [basis](V in) { return spectral::dct_pool(in[0], basis); });
  }
  {
    std::vector<std::uint8_t> labels(2 * s * s);
    for (auto& l : labels) l = static_cast<std::uint8_t>(std::uniform_int_distribution<int>(0, 2)(rng));
    add_case("dice_loss", {rand_t({2, 4, s, s}, rng, -2, 2)},
             [labels](V in) { return dice_loss(in[0], std::span<const std::uint8_t>(labels)); });
    add_case("soft_ce_loss", {rand_t({2, 4, s, s}, rng, -2, 2)},
             [labels](V in) { return soft_ce_loss(in[0], std::span<const std::uint8_t>(labels), 0.1); });
  }

  // SGF components and the full block on 1 x 8 x s x s features, weights included.
  auto params = std::make_shared<sgf::SgfParams<double>>(sgf::SgfParams<double>::init(8, 4, 3, {}, rng));
  auto bases = std::make_shared<sgf::SgfBases<double>>(sgf::make_bases<double>(8, s, s));
  auto block_case = [&](std::string name, auto collect, auto body, double tol) {
    std::vector<TD> inputs{rand_t({1, 8, s, s}, rng), rand_t({1, 8, s, s}, rng)};
    collect(*params, inputs);
    add_case(std::move(name), inputs, [params, bases, body](V in) { return body(in, *params, *bases); }, tol);
  };
  using P = sgf::SgfParams<double>;
  using B = sgf::SgfBases<double>;
  block_case(
      "channel_activation", [](P& p, std::vector<TD>& in) { p.mlp_rgb->for_each("", [&](const std::string&, TD& t) { in.push_back(t); }); },
      [](V in, const P& p, const B& b) { return sgf::channel_activation(in[0], *p.mlp_rgb, b.single); }, kOpTolerance);
  block_case(
      "spectral_feature_enhancement",
      [](P& p, std::vector<TD>& in) {
        p.mlp_rgb->for_each("", [&](const std::string&, TD& t) { in.push_back(t); });
        p.mlp_t->for_each("", [&](const std::string&, TD& t) { in.push_back(t); });
      },
      [](V in, const P& p, const B& b) {
        const auto e = sgf::spectral_feature_enhancement<double>({in[0], in[1]}, p, b);
        return concat_channels<double>({e.enh.rgb, e.enh.thermal, e.com.rgb, e.com.thermal});
      },
      kOpTolerance);
  block_case(
      "large_kernel_attention", [](P& p, std::vector<TD>& in) { p.lka->for_each("", [&](const std::string&, TD& t) { in.push_back(t); }); },
      [](V in, const P& p, const B&) { return sgf::large_kernel_attention(concat_channels<double>({in[0], in[1]}), *p.lka); },
      kOpTolerance);
  block_case(
      "spectral_channel_attention",
      [](P& p, std::vector<TD>& in) {
        p.lka->for_each("", [&](const std::string&, TD& t) { in.push_back(t); });
        p.mlp_rgbt->for_each("", [&](const std::string&, TD& t) { in.push_back(t); });
      },
      [](V in, const P& p, const B& b) { return sgf::spectral_channel_attention(concat_channels<double>({in[0], in[1]}), p, b); },
      kOpTolerance);
  block_case(
      "global_cross_attention",
      [](P& p, std::vector<TD>& in) {
        p.attn_rgb->for_each("", [&](const std::string&, TD& t) { in.push_back(t); });
        p.attn_t->for_each("", [&](const std::string&, TD& t) { in.push_back(t); });
      },
      [](V in, const P& p, const B&) {
        const auto r = sgf::global_cross_attention<double>({in[0], in[1]}, p, false);
        return concat_channels<double>({r.att.rgb, r.att.thermal});
      },
      kOpTolerance);
  block_case(
      "sgf_block", [](P& p, std::vector<TD>& in) { p.for_each("", [&](const std::string&, TD& t) { in.push_back(t); }); },
      [](V in, const P& p, const B& b) {
        const auto out = sgf::sgf_forward<double>({in[0], in[1]}, p, b);
        return concat_channels<double>({out.fuse.rgb, out.fuse.thermal, out.prelim_logits});
      },
      kBlockTolerance);
  return cases;
}

}  // namespace detail

/// Max relative error per case over seeds seed, seed+1, seed+2, in a fixed order.
inline std::vector<GradReport> run_gradcheck_suite(std::uint64_t seed = 0, std::size_t size = 4, double eps = 1e-5) {
  std::vector<GradReport> reports;
  for (std::uint64_t k = 0; k < 3; ++k) {
    const auto cases = detail::gradient_cases(seed + k, size);
    if (reports.empty())
      for (const auto& c : cases) reports.push_back({c.name, 0.0, c.tolerance});
    for (std::size_t i = 0; i < cases.size(); ++i) {
      const double err = finite_diff_check_params<double>(cases[i].loss, cases[i].inputs, eps);
      reports[i].max_error = std::max(reports[i].max_error, err);
    }
  }
  return reports;
}

}  // namespace sgfnet
