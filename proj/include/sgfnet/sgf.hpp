#pragma once

#include <algorithm>
#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "sgfnet/ops.hpp"
#include "sgfnet/random.hpp"
#include "sgfnet/spectral.hpp"
#include "sgfnet/tensor.hpp"

// Spectral-aware global fusion block: spectral feature enhancement,
// spectral channel attention over both modalities, and global cross-modal
// spatial attention, followed by additive fusion into the RGB stream.

namespace sgfnet::sgf {

template <class T>
struct FeaturePair {
  Tensor<T> rgb;
  Tensor<T> thermal;
};

template <class T>
void check_pair(const FeaturePair<T>& f, std::string_view op) {
  if (f.rgb.shape() != f.thermal.shape()) {
    throw DimensionError(std::string(op) + ": modality shapes differ: " + to_string(f.rgb.shape()) + " vs " +
                         to_string(f.thermal.shape()));
  }
}

/// Two-layer perceptron C -> C/r -> C with ReLU in between.
template <class T>
struct Mlp {
  Tensor<T> w1, b1, w2, b2;

  static Mlp init(std::size_t width, std::size_t reduction, Rng& rng) {
    const std::size_t hidden = width / reduction;
    return {init_weight<T>({hidden, width}, width, rng), init_weight<T>({hidden}, width, rng),
            init_weight<T>({width, hidden}, hidden, rng), init_weight<T>({width}, hidden, rng)};
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return linear(relu(linear(x, w1, b1)), w2, b2); }

  template <class F>
  void for_each(const std::string& prefix, F&& f) {
    f(prefix + ".w1", w1);
    f(prefix + ".b1", b1);
    f(prefix + ".w2", w2);
    f(prefix + ".b2", b2);
  }
};

/// Pointwise (1x1) convolution weights.
template <class T>
struct Pointwise {
  Tensor<T> w, b;

  static Pointwise init(std::size_t in, std::size_t out, Rng& rng) {
    return {init_weight<T>({out, in}, in, rng), init_weight<T>({out}, in, rng)};
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d_pointwise(x, w, b); }

  template <class F>
  void for_each(const std::string& prefix, F&& f) {
    f(prefix + ".w", w);
    f(prefix + ".b", b);
  }
};

/// 5x5 depthwise -> 7x7 depthwise (dilation 3) -> 1x1.
template <class T>
struct LargeKernel {
  Tensor<T> dw5, dw7;
  Pointwise<T> pw;

  static LargeKernel init(std::size_t width, Rng& rng) {
    auto dw5 = init_weight<T>({width, 5, 5}, 25, rng);
    auto dw7 = init_weight<T>({width, 7, 7}, 49, rng);
    return {std::move(dw5), std::move(dw7), Pointwise<T>::init(width, width, rng)};
  }

  template <class F>
  void for_each(const std::string& prefix, F&& f) {
    f(prefix + ".dw5", dw5);
    f(prefix + ".dw7", dw7);
    pw.for_each(prefix + ".pw", f);
  }
};

/// Query/key/value projections plus the 1x1 conv producing the spatial map.
template <class T>
struct CrossAttention {
  Pointwise<T> query, key, value, gate;

  static CrossAttention init(std::size_t width, Rng& rng) {
    const std::size_t reduced = width / 8;
    return {Pointwise<T>::init(width, reduced, rng), Pointwise<T>::init(width, reduced, rng),
            Pointwise<T>::init(width, width, rng), Pointwise<T>::init(width, 1, rng)};
  }

  template <class F>
  void for_each(const std::string& prefix, F&& f) {
    query.for_each(prefix + ".q", f);
    key.for_each(prefix + ".k", f);
    value.for_each(prefix + ".v", f);
    gate.for_each(prefix + ".mask", f);
  }
};

/// Which parts of the block are active. All-false gives plain additive fusion.
struct SgfOptions {
  bool sfe = true;                // spectral feature enhancement
  bool sca = true;                // spectral channel attention
  bool gsa = true;                // global cross-modal spatial attention
  bool prediction_head = true;    // preliminary map for deep supervision
  bool rescale_spatial_gate = true;  // multiply the unit-sum spatial map by H*W
};

template <class T>
struct SgfParams {
  std::size_t channels = 0;
  std::size_t reduction = 4;
  std::size_t num_classes = 0;
  SgfOptions options;

  std::optional<Mlp<T>> mlp_rgb, mlp_t, mlp_rgbt;
  std::optional<LargeKernel<T>> lka;
  std::optional<CrossAttention<T>> attn_rgb, attn_t;
  std::optional<Pointwise<T>> head;

  static SgfParams init(std::size_t channels, std::size_t reduction, std::size_t num_classes, const SgfOptions& options,
                        Rng& rng) {
    if (channels == 0 || channels % 8 != 0) {
      throw DimensionError("SgfParams: channel width " + std::to_string(channels) + " must be a positive multiple of 8");
    }
    if (reduction == 0 || channels % reduction != 0) {
      throw DimensionError("SgfParams: channel width " + std::to_string(channels) +
                           " not divisible by reduction ratio " + std::to_string(reduction));
    }
    SgfParams p;
    p.channels = channels;
    p.reduction = reduction;
    p.num_classes = num_classes;
    p.options = options;
    if (options.sfe) {
      p.mlp_rgb = Mlp<T>::init(channels, reduction, rng);
      p.mlp_t = Mlp<T>::init(channels, reduction, rng);
    }
    if (options.sca) {
      p.lka = LargeKernel<T>::init(2 * channels, rng);
      p.mlp_rgbt = Mlp<T>::init(2 * channels, reduction, rng);
    }
    if (options.gsa) {
      p.attn_rgb = CrossAttention<T>::init(channels, rng);
      p.attn_t = CrossAttention<T>::init(channels, rng);
    }
    if (options.prediction_head) p.head = Pointwise<T>::init(channels, num_classes, rng);
    return p;
  }

  /// Visits every learnable tensor as (name, tensor&), in a fixed order.
  template <class F>
  void for_each(const std::string& prefix, F&& f) {
    if (mlp_rgb) mlp_rgb->for_each(prefix + "mlp_rgb", f);
    if (mlp_t) mlp_t->for_each(prefix + "mlp_t", f);
    if (lka) lka->for_each(prefix + "lka", f);
    if (mlp_rgbt) mlp_rgbt->for_each(prefix + "mlp_rgbt", f);
    if (attn_rgb) attn_rgb->for_each(prefix + "attn_rgb", f);
    if (attn_t) attn_t->for_each(prefix + "attn_t", f);
    if (head) head->for_each(prefix + "head", f);
  }
};

/// Cosine bases for the single-modality (C) and joint (2C) descriptors.
template <class T>
struct SgfBases {
  spectral::SpectralBasisSet<T> single;
  spectral::SpectralBasisSet<T> joint;
};

namespace detail {

// Largest divisor of `channels` not above min(default group count, available pairs).
inline std::size_t fitting_group_count(std::size_t channels, std::size_t available) {
  std::size_t g = std::min(spectral::default_group_count(channels), available);
  while (g > 1 && channels % g != 0) --g;
  return g;
}

template <class T>
spectral::SpectralBasisSet<T> bases_for(std::size_t channels, std::size_t bh, std::size_t bw,
                                        const std::vector<spectral::FrequencyPair>& explicit_pairs) {
  if (!explicit_pairs.empty()) {
    std::vector<spectral::FrequencyPair> fitting;
    for (const auto& p : explicit_pairs)
      if (p.fh < bh && p.fw < bw) fitting.push_back(p);
    if (fitting.empty() || channels % fitting.size() != 0) {
      throw DimensionError("configured frequency pairs do not fit a " + std::to_string(bh) + "x" + std::to_string(bw) +
                           " basis with " + std::to_string(channels) + " channels");
    }
    return spectral::SpectralBasisSet<T>::make(bh, bw, std::move(fitting));
  }
  return spectral::SpectralBasisSet<T>::zigzag(fitting_group_count(channels, bh * bw), bh, bw);
}

}  // namespace detail

/// Bases for a block of width `channels` on `feat_h` x `feat_w` features.
/// The basis size is clamped to the feature size, since pooling cannot upsample.
template <class T>
SgfBases<T> make_bases(std::size_t channels, std::size_t feat_h, std::size_t feat_w, std::size_t basis_h = 7,
                       std::size_t basis_w = 7, const std::vector<spectral::FrequencyPair>& explicit_pairs = {}) {
  const std::size_t bh = std::min(basis_h, feat_h), bw = std::min(basis_w, feat_w);
  return {detail::bases_for<T>(channels, bh, bw, explicit_pairs), detail::bases_for<T>(2 * channels, bh, bw, explicit_pairs)};
}

/// Raw channel activation score Q = MLP(dct_pool(x)), shape [N,C].
template <class T>
Tensor<T> channel_activation(const Tensor<T>& x, const Mlp<T>& mlp, const spectral::SpectralBasisSet<T>& basis_set) {
  if (mlp.w1.dim(1) != x.dim(1)) {
    throw DimensionError("channel_activation: MLP width " + std::to_string(mlp.w1.dim(1)) + " vs " +
                         std::to_string(x.dim(1)) + " channels");
  }
  return mlp(spectral::dct_pool(x, basis_set));
}

template <class T>
struct Enhancement {
  FeaturePair<T> enh;
  FeaturePair<T> com;
  Tensor<T> joint_score;  // Q = C * Q_rgb * Q_t, [N,C]
};

/// enh = f (x) sigmoid(Q), com = f (x) sigmoid(1 - Q), with one joint Q for
/// both modalities.
template <class T>
Enhancement<T> spectral_feature_enhancement(const FeaturePair<T>& f, const SgfParams<T>& params,
                                            const SgfBases<T>& bases) {
  check_pair(f, "spectral_feature_enhancement");
  if (!params.mlp_rgb || !params.mlp_t) throw Error("spectral_feature_enhancement: block built without SFE weights");
  const Tensor<T> q_rgb = channel_activation(f.rgb, *params.mlp_rgb, bases.single);
  const Tensor<T> q_t = channel_activation(f.thermal, *params.mlp_t, bases.single);
  Tensor<T> q = scalar_mul(mul(q_rgb, q_t), static_cast<T>(f.rgb.dim(1)));
  const Tensor<T> keep = sigmoid(q);
  const Tensor<T> complement = sigmoid(rsub_scalar(T(1), q));
  return {{broadcast_mul_channel(f.rgb, keep), broadcast_mul_channel(f.thermal, keep)},
          {broadcast_mul_channel(f.rgb, complement), broadcast_mul_channel(f.thermal, complement)},
          std::move(q)};
}

template <class T>
Tensor<T> large_kernel_attention(const Tensor<T>& x, const LargeKernel<T>& lka) {
  if (x.rank() != 4 || x.dim(1) != lka.dw5.dim(0)) {
    throw DimensionError("large_kernel_attention: input " + to_string(x.shape()) + " vs width " +
                         std::to_string(lka.dw5.dim(0)));
  }
  return lka.pw(conv2d_depthwise(conv2d_depthwise(x, lka.dw5, 1), lka.dw7, 3));
}

/// Scores computed from the large-kernel features, applied to `enh_cat`.
template <class T>
Tensor<T> spectral_channel_attention(const Tensor<T>& enh_cat, const SgfParams<T>& params, const SgfBases<T>& bases) {
  if (!params.lka || !params.mlp_rgbt) throw Error("spectral_channel_attention: block built without SCA weights");
  const Tensor<T> lka = large_kernel_attention(enh_cat, *params.lka);
  const Tensor<T> q = channel_activation(lka, *params.mlp_rgbt, bases.joint);
  return broadcast_mul_channel(enh_cat, sigmoid(q));
}

/// Sums the two branches and splits back into [RGB | thermal] halves.
template <class T>
FeaturePair<T> aggregate(const Tensor<T>& enh_weighted, const Tensor<T>& com_cat) {
  if (enh_weighted.shape() != com_cat.shape()) {
    throw DimensionError("aggregate: " + to_string(enh_weighted.shape()) + " vs " + to_string(com_cat.shape()));
  }
  if (enh_weighted.dim(1) % 2 != 0) throw DimensionError("aggregate: odd channel count");
  const std::size_t half = enh_weighted.dim(1) / 2;
  auto parts = split_channels(add(enh_weighted, com_cat), {half, half});
  return {std::move(parts[0]), std::move(parts[1])};
}

template <class T>
struct CrossAttentionResult {
  FeaturePair<T> att;
  FeaturePair<T> cross;
  Tensor<T> mask_rgb;  // [N,HW,HW], columns sum to 1; applied to thermal values. Detached, optional.
  Tensor<T> mask_t;    // applied to RGB values
  Tensor<T> spatial_rgb;  // [N,1,H,W], sums to 1 over H*W
  Tensor<T> spatial_t;
};

namespace detail {

template <class T>
Tensor<T> spatial_map(const Tensor<T>& cross, const Pointwise<T>& gate) {
  const std::size_t n = cross.dim(0), h = cross.dim(2), w = cross.dim(3);
  return reshape(softmax(reshape(gate(cross), {n, h * w}), 1), {n, 1, h, w});
}

}  // namespace detail

/// Each modality's affinity (from its own queries and keys) mixes the other
/// modality's values; the result plus a residual drives a spatial softmax
/// map that reweights the aggregated features.
template <class T>
CrossAttentionResult<T> global_cross_attention(const FeaturePair<T>& agg, const SgfParams<T>& params,
                                               bool keep_masks = true) {
  check_pair(agg, "global_cross_attention");
  if (!params.attn_rgb || !params.attn_t) throw Error("global_cross_attention: block built without GSA weights");
  const std::size_t n = agg.rgb.dim(0), c = agg.rgb.dim(1), h = agg.rgb.dim(2), w = agg.rgb.dim(3);
  if (c != params.channels) {
    throw DimensionError("global_cross_attention: " + std::to_string(c) + " channels vs block width " +
                         std::to_string(params.channels));
  }
  const auto& ar = *params.attn_rgb;
  const auto& at = *params.attn_t;

  auto project = [&](const Pointwise<T>& pw, const Tensor<T>& x) { return reshape(pw(x), {n, pw.w.dim(0), h * w}); };
  auto by_rgb = attention(project(ar.query, agg.rgb), project(ar.key, agg.rgb), project(at.value, agg.thermal), keep_masks);
  auto by_t = attention(project(at.query, agg.thermal), project(at.key, agg.thermal), project(ar.value, agg.rgb), keep_masks);

  CrossAttentionResult<T> r;
  if (keep_masks) {
    r.mask_rgb = transpose(by_rgb.probs_t);
    r.mask_t = transpose(by_t.probs_t);
  }
  r.cross.thermal = add(reshape(by_rgb.out, {n, c, h, w}), agg.thermal);
  r.cross.rgb = add(reshape(by_t.out, {n, c, h, w}), agg.rgb);

  r.spatial_rgb = detail::spatial_map(r.cross.rgb, ar.gate);
  r.spatial_t = detail::spatial_map(r.cross.thermal, at.gate);
  const T scale = params.options.rescale_spatial_gate ? static_cast<T>(h * w) : T(1);
  auto gate = [&](const Tensor<T>& m) { return scale == T(1) ? m : scalar_mul(m, scale); };
  r.att.rgb = broadcast_mul_spatial(agg.rgb, gate(r.spatial_rgb));
  r.att.thermal = broadcast_mul_spatial(agg.thermal, gate(r.spatial_t));
  return r;
}

/// fuse.rgb = att.rgb + att.thermal, fuse.thermal = att.thermal.
template <class T>
FeaturePair<T> fuse(const FeaturePair<T>& att) {
  check_pair(att, "fuse");
  return {add(att.rgb, att.thermal), att.thermal};
}

template <class T>
struct SgfOutput {
  FeaturePair<T> fuse;
  Tensor<T> prelim_logits;  // [N,K,H,W]; undefined without a prediction head
};

template <class T>
SgfOutput<T> sgf_forward(const FeaturePair<T>& f, const SgfParams<T>& params, const SgfBases<T>& bases) {
  check_pair(f, "sgf_forward");
  if (f.rgb.rank() != 4 || f.rgb.dim(1) != params.channels) {
    throw DimensionError("sgf_forward: features " + to_string(f.rgb.shape()) + " vs block width " +
                         std::to_string(params.channels));
  }
  const std::size_t c = params.channels;
  const SgfOptions& opt = params.options;

  FeaturePair<T> agg = f;
  if (opt.sfe || opt.sca) {
    Tensor<T> enh_cat, com_cat;
    if (opt.sfe) {
      auto e = spectral_feature_enhancement(f, params, bases);
      enh_cat = concat_channels<T>({e.enh.rgb, e.enh.thermal});
      com_cat = concat_channels<T>({e.com.rgb, e.com.thermal});
    } else {
      enh_cat = concat_channels<T>({f.rgb, f.thermal});
    }
    Tensor<T> weighted = opt.sca ? spectral_channel_attention(enh_cat, params, bases) : enh_cat;
    if (com_cat.defined()) {
      agg = aggregate(weighted, com_cat);
    } else {
      auto parts = split_channels(weighted, {c, c});
      agg = {std::move(parts[0]), std::move(parts[1])};
    }
  }
  FeaturePair<T> att = opt.gsa ? global_cross_attention(agg, params, false).att : agg;

  SgfOutput<T> out;
  out.fuse = fuse(att);
  if (params.head) out.prelim_logits = (*params.head)(out.fuse.rgb);
  return out;
}

}  // namespace sgfnet::sgf
