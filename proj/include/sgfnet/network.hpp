#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sgfnet/ops.hpp"
#include "sgfnet/random.hpp"
#include "sgfnet/sgf.hpp"

namespace sgfnet {

enum class Modality { both, rgb, thermal };

inline std::string to_string(Modality m) {
  switch (m) {
    case Modality::rgb: return "rgb";
    case Modality::thermal: return "thermal";
    default: return "both";
  }
}

struct NetworkConfig {
  std::array<std::size_t, 4> stage_channels{16, 32, 64, 128};
  std::size_t num_classes = 4;
  std::size_t height = 64, width = 96;
  std::size_t basis_h = 7, basis_w = 7;
  std::size_t reduction = 4;
  std::uint64_t seed = 0;
  double learning_rate = 0.02;
  double lr_decay = 0.95;
  double momentum = 0.9;
  std::size_t batch_size = 2;
  std::size_t epochs = 30;
  double label_smoothing = 0.1;
  double grad_clip = 5.0;  // max global gradient L2 norm per step; 0 disables
  bool enable_sfe = true, enable_sca = true, enable_gsa = true, enable_ds = true;
  Modality modality = Modality::both;

  sgf::SgfOptions sgf_options() const { return {enable_sfe, enable_sca, enable_gsa, enable_ds, true}; }

  void validate() const {
    for (std::size_t c : stage_channels) {
      if (c == 0 || c % 8 != 0 || c % reduction != 0) {
        throw DimensionError("stage width " + std::to_string(c) + " must be a positive multiple of 8 and of reduction " +
                             std::to_string(reduction));
      }
    }
    if (height == 0 || width == 0 || height % 16 != 0 || width % 16 != 0) {
      throw DimensionError("input size " + std::to_string(height) + "x" + std::to_string(width) +
                           " must be a positive multiple of 16");
    }
    if (num_classes < 2) throw RangeError("num_classes must be at least 2");
    if (batch_size == 0) throw RangeError("batch_size must be positive");
    if (basis_h == 0 || basis_w == 0) throw RangeError("basis size must be positive");
    if (!(grad_clip >= 0.0)) throw RangeError("grad_clip must be non-negative");
  }
};

template <class T>
struct EncoderStage {
  Tensor<T> dw;  // [Cin,3,3]
  sgf::Pointwise<T> pw;

  static EncoderStage init(std::size_t in, std::size_t out, Rng& rng) {
    return {init_weight<T>({in, 3, 3}, 9, rng), sgf::Pointwise<T>::init(in, out, rng)};
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    const Tensor<T> y = relu(pw(conv2d_depthwise(x, dw)));
    return adaptive_avg_pool(y, y.dim(2) / 2, y.dim(3) / 2);
  }

  template <class F>
  void for_each(const std::string& prefix, F&& f) {
    f(prefix + ".dw", dw);
    pw.for_each(prefix + ".pw", f);
  }
};

template <class T>
struct DecoderStage {
  Tensor<T> dw;  // [C,3,3]
  sgf::Pointwise<T> pw;

  static DecoderStage init(std::size_t c, Rng& rng) {
    return {init_weight<T>({c, 3, 3}, 9, rng), sgf::Pointwise<T>::init(c, c, rng)};
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return relu(pw(conv2d_depthwise(x, dw))); }

  template <class F>
  void for_each(const std::string& prefix, F&& f) {
    f(prefix + ".dw", dw);
    pw.for_each(prefix + ".pw", f);
  }
};

/// Two-stream encoder, one SGF block per scale and a top-down decoder.
template <class T>
struct Model {
  NetworkConfig config;
  std::array<EncoderStage<T>, 4> rgb_encoder, thermal_encoder;
  std::array<sgf::SgfParams<T>, 4> fusion;
  std::array<sgf::SgfBases<T>, 4> bases;
  std::array<sgf::Pointwise<T>, 3> reduce;  // stage s+1 width -> stage s width
  std::array<DecoderStage<T>, 3> refine;
  sgf::Pointwise<T> classifier;

  static Model init(const NetworkConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    Model m;
    m.config = cfg;
    const auto& ch = cfg.stage_channels;
    for (std::size_t s = 0; s < 4; ++s) {
      m.rgb_encoder[s] = EncoderStage<T>::init(s == 0 ? 3 : ch[s - 1], ch[s], rng);
      m.thermal_encoder[s] = EncoderStage<T>::init(s == 0 ? 1 : ch[s - 1], ch[s], rng);
    }
    for (std::size_t s = 0; s < 4; ++s) {
      m.fusion[s] = sgf::SgfParams<T>::init(ch[s], cfg.reduction, cfg.num_classes, cfg.sgf_options(), rng);
      const std::size_t div = std::size_t{2} << s;
      m.bases[s] = sgf::make_bases<T>(ch[s], cfg.height / div, cfg.width / div, cfg.basis_h, cfg.basis_w);
    }
    for (std::size_t s = 0; s < 3; ++s) {
      m.reduce[s] = sgf::Pointwise<T>::init(ch[s + 1], ch[s], rng);
      m.refine[s] = DecoderStage<T>::init(ch[s], rng);
    }
    m.classifier = sgf::Pointwise<T>::init(ch[0], cfg.num_classes, rng);
    return m;
  }

  /// Visits every learnable tensor in a fixed order.
  template <class F>
  void for_each(F&& f) {
    for (std::size_t s = 0; s < 4; ++s) rgb_encoder[s].for_each("enc_rgb" + std::to_string(s), f);
    for (std::size_t s = 0; s < 4; ++s) thermal_encoder[s].for_each("enc_th" + std::to_string(s), f);
    for (std::size_t s = 0; s < 4; ++s) fusion[s].for_each("sgf" + std::to_string(s) + ".", f);
    for (std::size_t s = 0; s < 3; ++s) reduce[s].for_each("dec" + std::to_string(s) + ".reduce", f);
    for (std::size_t s = 0; s < 3; ++s) refine[s].for_each("dec" + std::to_string(s) + ".refine", f);
    classifier.for_each("classifier", f);
  }

  std::vector<Tensor<T>> parameters() {
    std::vector<Tensor<T>> out;
    for_each([&](const std::string&, Tensor<T>& t) { out.push_back(t); });
    return out;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for_each([&](const std::string&, Tensor<T>& t) { n += t.numel(); });
    return n;
  }
};

template <class T>
struct ForwardResult {
  Tensor<T> logits;                 // [N,K,H,W]
  std::vector<Tensor<T>> prelim;    // 4 x [N,K,H,W]; empty without deep supervision
};

/// Four feature maps at strides 2, 4, 8, 16 for one stream.
template <class T>
std::array<Tensor<T>, 4> encoder_forward(const std::array<EncoderStage<T>, 4>& stages, const Tensor<T>& img) {
  if (img.rank() != 4 || img.dim(2) % 16 != 0 || img.dim(3) % 16 != 0) {
    throw DimensionError("encoder_forward: input " + to_string(img.shape()) + " needs spatial size divisible by 16");
  }
  std::array<Tensor<T>, 4> out;
  Tensor<T> x = img;
  for (std::size_t s = 0; s < 4; ++s) x = out[s] = stages[s](x);
  return out;
}

/// Inputs [N,3,H,W] and [N,1,H,W]; fused features of each scale feed the next encoder stage.
template <class T>
ForwardResult<T> model_forward(const Model<T>& m, const Tensor<T>& rgb, const Tensor<T>& thermal) {
  const auto& cfg = m.config;
  if (rgb.rank() != 4 || rgb.dim(1) != 3 || thermal.rank() != 4 || thermal.dim(1) != 1 || rgb.dim(0) != thermal.dim(0) ||
      rgb.dim(2) != thermal.dim(2) || rgb.dim(3) != thermal.dim(3)) {
    throw DimensionError("model_forward: expected [N,3,H,W] and [N,1,H,W], got " + to_string(rgb.shape()) + " and " +
                         to_string(thermal.shape()));
  }
  if (rgb.dim(2) != cfg.height || rgb.dim(3) != cfg.width) {
    throw DimensionError("model_forward: input " + std::to_string(rgb.dim(2)) + "x" + std::to_string(rgb.dim(3)) +
                         " differs from configured " + std::to_string(cfg.height) + "x" + std::to_string(cfg.width));
  }
  const std::size_t h = rgb.dim(2), w = rgb.dim(3);

  ForwardResult<T> out;
  std::array<Tensor<T>, 4> fused;
  Tensor<T> x_rgb = rgb, x_t = thermal;
  for (std::size_t s = 0; s < 4; ++s) {
    const sgf::FeaturePair<T> f{m.rgb_encoder[s](x_rgb), m.thermal_encoder[s](x_t)};
    auto r = sgf::sgf_forward(f, m.fusion[s], m.bases[s]);
    fused[s] = r.fuse.rgb;
    x_rgb = r.fuse.rgb;
    x_t = r.fuse.thermal;
    if (r.prelim_logits.defined()) out.prelim.push_back(upsample_bilinear(r.prelim_logits, h, w));
  }

  Tensor<T> x = fused[3];
  for (std::size_t s = 3; s-- > 0;) {
    const Tensor<T> up = upsample_bilinear(m.reduce[s](x), fused[s].dim(2), fused[s].dim(3));
    x = m.refine[s](add(up, fused[s]));
  }
  out.logits = upsample_bilinear(m.classifier(x), h, w);
  return out;
}

namespace detail {

template <class T>
Tensor<T> one_hot(std::span<const std::uint8_t> labels, std::size_t n, std::size_t k, std::size_t hw, T on, T off) {
  if (labels.size() != n * hw) {
    throw DimensionError("labels hold " + std::to_string(labels.size()) + " pixels, logits " + std::to_string(n * hw));
  }
  Tensor<T> y(Shape{n, k, hw}, off);
  auto d = y.mutable_data();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t p = 0; p < hw; ++p) {
      const std::size_t c = labels[b * hw + p];
      if (c >= k) throw RangeError("label " + std::to_string(c) + " out of range for " + std::to_string(k) + " classes");
      d[(b * k + c) * hw + p] = on;
    }
  return y;
}

}  // namespace detail

/// Soft Dice over softmax probabilities, 1 - (2 sum p*y + eps) / (sum p^2 + sum y^2 + eps),
/// averaged over classes present in the labels.
template <class T>
Tensor<T> dice_loss(const Tensor<T>& logits, std::span<const std::uint8_t> labels, T eps = T(1)) {
  if (logits.rank() != 4) throw DimensionError("dice_loss: logits must be [N,K,H,W]");
  const std::size_t n = logits.dim(0), k = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
  const Tensor<T> y = detail::one_hot<T>(labels, n, k, hw, T(1), T(0));
  const Tensor<T> p = reshape(softmax(logits, 1), {n, k, hw});
  const Tensor<T> y_sum = sum_per_channel(y);
  std::vector<T> weight(k, T(0));
  std::size_t present = 0;
  for (std::size_t c = 0; c < k; ++c) present += y_sum[c] > 0;
  for (std::size_t c = 0; c < k; ++c)
    if (y_sum[c] > 0) weight[c] = T(1) / static_cast<T>(present);
  const Tensor<T> inter = sum_per_channel(mul(p, y));
  const Tensor<T> denom = add_scalar(add(sum_per_channel(mul(p, p)), y_sum), eps);
  const Tensor<T> dice = div(add_scalar(scalar_mul(inter, T(2)), eps), denom);
  return rsub_scalar(T(1), sum(mul(dice, Tensor<T>(Shape{k}, std::move(weight)))));
}

/// Cross-entropy against (1 - s) one-hot + s / K targets, mean over pixels.
template <class T>
Tensor<T> soft_ce_loss(const Tensor<T>& logits, std::span<const std::uint8_t> labels, T smoothing = T(0.1)) {
  if (logits.rank() != 4) throw DimensionError("soft_ce_loss: logits must be [N,K,H,W]");
  if (smoothing < 0 || smoothing > 1) throw RangeError("soft_ce_loss: smoothing must lie in [0,1]");
  const std::size_t n = logits.dim(0), k = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
  const T off = smoothing / static_cast<T>(k);
  const Tensor<T> q = detail::one_hot<T>(labels, n, k, hw, T(1) - smoothing + off, off);
  const Tensor<T> logp = reshape(log_softmax(logits, 1), {n, k, hw});
  return scalar_mul(sum(mul(logp, q)), T(-1) / static_cast<T>(n * hw));
}

template <class T>
Tensor<T> segmentation_loss(const Tensor<T>& logits, std::span<const std::uint8_t> labels, T smoothing) {
  return add(dice_loss(logits, labels), soft_ce_loss(logits, labels, smoothing));
}

/// Final term plus one term per preliminary map.
template <class T>
Tensor<T> total_loss(const Tensor<T>& logits, const std::vector<Tensor<T>>& prelim, std::span<const std::uint8_t> labels,
                     T smoothing = T(0.1)) {
  Tensor<T> total = segmentation_loss(logits, labels, smoothing);
  for (const auto& p : prelim) {
    if (p.shape() != logits.shape()) throw DimensionError("total_loss: preliminary map " + to_string(p.shape()) + " vs " + to_string(logits.shape()));
    total = add(total, segmentation_loss(p, labels, smoothing));
  }
  return total;
}

/// Per-pixel argmax over classes, [N,K,H,W] -> N*H*W labels.
template <class T>
std::vector<std::uint8_t> argmax_labels(const Tensor<T>& logits) {
  const std::size_t n = logits.dim(0), k = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
  std::vector<std::uint8_t> out(n * hw);
  auto d = logits.data();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t p = 0; p < hw; ++p) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < k; ++c)
        if (d[(b * k + c) * hw + p] > d[(b * k + best) * hw + p]) best = c;
      out[b * hw + p] = static_cast<std::uint8_t>(best);
    }
  return out;
}

}  // namespace sgfnet
