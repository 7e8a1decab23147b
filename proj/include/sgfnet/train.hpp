#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "sgfnet/data.hpp"
#include "sgfnet/metrics.hpp"
#include "sgfnet/network.hpp"
#include "sgfnet/tensor_io.hpp"

namespace sgfnet {

template <class T>
struct Batch {
  Tensor<T> rgb, thermal;
  std::vector<std::uint8_t> labels;
};

/// Stacks samples into network inputs. Single-modality runs feed the same
/// image to both streams: luminance for the thermal stream, or thermal
/// replicated three times for the RGB stream.
template <class T>
Batch<T> make_batch(const std::vector<SegSample>& samples, std::span<const std::size_t> indices, Modality modality) {
  if (indices.empty()) throw RangeError("make_batch: no samples");
  const std::size_t h = samples[indices[0]].height, w = samples[indices[0]].width, hw = h * w, n = indices.size();
  Batch<T> b{Tensor<T>(Shape{n, 3, h, w}), Tensor<T>(Shape{n, 1, h, w}), {}};
  auto rgb = b.rgb.mutable_data();
  auto th = b.thermal.mutable_data();
  b.labels.reserve(n * hw);
  for (std::size_t i = 0; i < n; ++i) {
    const SegSample& s = samples[indices[i]];
    if (s.height != h || s.width != w) throw DimensionError("make_batch: samples differ in size");
    for (std::size_t p = 0; p < hw; ++p) {
      const T r = s.rgb[p], g = s.rgb[hw + p], bl = s.rgb[2 * hw + p], t = s.thermal[p];
      T* out_rgb = &rgb[i * 3 * hw + p];
      switch (modality) {
        case Modality::both:
          out_rgb[0] = r, out_rgb[hw] = g, out_rgb[2 * hw] = bl;
          th[i * hw + p] = t;
          break;
        case Modality::rgb:
          out_rgb[0] = r, out_rgb[hw] = g, out_rgb[2 * hw] = bl;
          th[i * hw + p] = T(0.299) * r + T(0.587) * g + T(0.114) * bl;
          break;
        case Modality::thermal:
          out_rgb[0] = out_rgb[hw] = out_rgb[2 * hw] = t;
          th[i * hw + p] = t;
          break;
      }
    }
    b.labels.insert(b.labels.end(), s.labels.begin(), s.labels.end());
  }
  return b;
}

struct EpochLog {
  std::size_t epoch = 0;
  double loss = 0.0;
  double miou = 0.0;
  double macc = 0.0;
};

inline std::string format_log(const EpochLog& e) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "epoch=%zu loss=%.6f miou=%.6f macc=%.6f", e.epoch, e.loss, e.miou, e.macc);
  return buf;
}

/// SGD with momentum over a Model<T>, one exponential lr step per epoch.
/// Gradients are rescaled to global L2 norm grad_clip when they exceed it.
template <class T>
class Trainer {
 public:
  explicit Trainer(const NetworkConfig& cfg) : model_(Model<T>::init(cfg)), lr_(cfg.learning_rate) {
    for (const auto& p : model_.parameters()) velocity_.emplace_back(p.numel(), T(0));
  }

  Model<T>& model() { return model_; }
  const Model<T>& model() const { return model_; }
  const NetworkConfig& config() const { return model_.config; }
  std::size_t epoch() const { return epoch_; }
  double learning_rate() const { return lr_; }
  std::size_t steps() const { return steps_; }

  /// Order in which `epoch` visits `count` samples; depends only on (seed, epoch).
  std::vector<std::size_t> epoch_order(std::size_t count, std::size_t epoch) const {
    std::vector<std::size_t> order(count);
    std::iota(order.begin(), order.end(), std::size_t{0});
    const std::uint64_t seed = config().seed;
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(epoch), 0x5eedu};
    Rng rng(seq);
    std::shuffle(order.begin(), order.end(), rng);
    return order;
  }

  /// One forward/backward/update on the given batch; returns the loss before the update.
  double step(const Batch<T>& batch, ConfusionMatrix* running = nullptr) {
    Tape<T> tape;
    TapeScope<T> scope(tape);
    const auto fwd = model_forward(model_, batch.rgb, batch.thermal);
    const Tensor<T> loss = total_loss(fwd.logits, fwd.prelim, std::span<const std::uint8_t>(batch.labels),
                                      static_cast<T>(config().label_smoothing));
    const double value = static_cast<double>(loss.item());
    if (!std::isfinite(value)) {
      throw NumericError("non-finite loss " + std::to_string(value) + " at epoch " + std::to_string(epoch_ + 1) + ", step " +
                         std::to_string(steps_) + " (lr " + std::to_string(lr_) + ")");
    }
    if (running) {
      const auto pred = argmax_labels(fwd.logits);
      accumulate(*running, std::span<const std::uint8_t>(pred), std::span<const std::uint8_t>(batch.labels));
    }
    auto params = model_.parameters();
    for (auto& p : params) p.zero_grad();
    tape.backward(loss);
    double norm2 = 0.0;
    for (const auto& p : params)
      if (p.has_grad())
        for (T g : p.impl()->grad) norm2 += static_cast<double>(g) * static_cast<double>(g);
    const double clip = config().grad_clip, norm = std::sqrt(norm2);
    const T g_scale = clip > 0.0 && norm > clip ? static_cast<T>(clip / norm) : T(1);
    const T mu = static_cast<T>(config().momentum), lr = static_cast<T>(lr_);
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (!params[i].has_grad()) continue;
      auto& v = velocity_[i];
      auto g = params[i].impl()->grad;
      auto d = params[i].mutable_data();
      for (std::size_t j = 0; j < v.size(); ++j) {
        v[j] = mu * v[j] + g_scale * g[j];
        d[j] -= lr * v[j];
      }
    }
    for (auto& p : params) p.zero_grad();
    ++steps_;
    return value;
  }

  /// Trains one epoch. Metrics come from `val` if given, else from the
  /// running training predictions.
  EpochLog train_epoch(const std::vector<SegSample>& train, const std::vector<SegSample>* val = nullptr) {
    if (train.empty()) throw RangeError("train: empty dataset");
    const auto order = epoch_order(train.size(), epoch_);
    ConfusionMatrix running(config().num_classes);
    double total = 0.0;
    std::size_t batches = 0;
    const std::size_t bs = config().batch_size;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t end = std::min(order.size(), start + bs);
      const auto batch = make_batch<T>(train, std::span<const std::size_t>(order).subspan(start, end - start), config().modality);
      total += step(batch, val ? nullptr : &running);
      ++batches;
    }
    ++epoch_;
    lr_ *= config().lr_decay;
    EpochLog log{epoch_, total / static_cast<double>(batches), 0.0, 0.0};
    const auto m = metrics(val ? evaluate(*val) : running);
    log.miou = m.miou;
    log.macc = m.macc;
    return log;
  }

  std::vector<EpochLog> fit(const std::vector<SegSample>& train, const std::vector<SegSample>* val = nullptr,
                            const std::function<void(const EpochLog&)>& on_epoch = {}) {
    std::vector<EpochLog> logs;
    while (epoch_ < config().epochs) {
      logs.push_back(train_epoch(train, val));
      if (on_epoch) on_epoch(logs.back());
    }
    return logs;
  }

  /// Loss of the current weights on a batch, without recording.
  double batch_loss(const Batch<T>& batch) const {
    NoTapeScope<T> guard;
    const auto fwd = model_forward(model_, batch.rgb, batch.thermal);
    return static_cast<double>(total_loss(fwd.logits, fwd.prelim, std::span<const std::uint8_t>(batch.labels),
                                          static_cast<T>(config().label_smoothing))
                                   .item());
  }

  std::vector<std::uint8_t> predict(const std::vector<SegSample>& samples, std::span<const std::size_t> indices) const {
    NoTapeScope<T> guard;
    const auto batch = make_batch<T>(samples, indices, config().modality);
    return argmax_labels(model_forward(model_, batch.rgb, batch.thermal).logits);
  }

  ConfusionMatrix evaluate(const std::vector<SegSample>& samples) const {
    ConfusionMatrix cm(config().num_classes);
    std::vector<std::size_t> idx(samples.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    const std::size_t bs = std::max<std::size_t>(config().batch_size, 1);
    for (std::size_t start = 0; start < idx.size(); start += bs) {
      const auto part = std::span<const std::size_t>(idx).subspan(start, std::min(bs, idx.size() - start));
      const auto pred = predict(samples, part);
      std::vector<std::uint8_t> gt;
      for (std::size_t i : part) gt.insert(gt.end(), samples[i].labels.begin(), samples[i].labels.end());
      accumulate(cm, std::span<const std::uint8_t>(pred), std::span<const std::uint8_t>(gt));
    }
    return cm;
  }

  /// Checkpoint directory: params/ and velocity/ manifests plus state.txt.
  void save(const std::filesystem::path& dir) {
    NamedTensors<T> params, velocity;
    std::size_t i = 0;
    model_.for_each([&](const std::string& name, Tensor<T>& t) {
      params.emplace_back(name, t);
      velocity.emplace_back(name, Tensor<T>(t.shape(), velocity_[i++]));
    });
    save_manifest(dir / "params", params);
    save_manifest(dir / "velocity", velocity);
    std::ofstream state(dir / "state.txt");
    char lr[64];
    std::snprintf(lr, sizeof lr, "%a", lr_);
    state << "epoch=" << epoch_ << "\nsteps=" << steps_ << "\nlr=" << lr << '\n';
    if (!state) throw Error("cannot write checkpoint state in " + dir.string());
  }

  /// Restores weights, optimizer state and schedule position written by save().
  void load(const std::filesystem::path& dir) {
    const auto params = load_manifest<T>(dir / "params");
    const auto velocity = load_manifest<T>(dir / "velocity");
    std::size_t i = 0;
    model_.for_each([&](const std::string& name, Tensor<T>& t) {
      if (i >= params.size() || params[i].first != name || params[i].second.shape() != t.shape()) {
        throw FormatError("checkpoint parameter " + std::to_string(i) + " does not match '" + name + "' " +
                          to_string(t.shape()));
      }
      std::ranges::copy(params[i].second.data(), t.mutable_data().begin());
      std::ranges::copy(velocity.at(i).second.data(), velocity_[i].begin());
      ++i;
    });
    if (i != params.size()) throw FormatError("checkpoint has " + std::to_string(params.size()) + " parameters, model " + std::to_string(i));

    std::ifstream state(dir / "state.txt");
    if (!state) throw Error("no state.txt in " + dir.string());
    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(state, line)) {
      const auto eq = line.find('=');
      if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    try {
      epoch_ = std::stoul(kv.at("epoch"));
      steps_ = std::stoul(kv.at("steps"));
      lr_ = std::strtod(kv.at("lr").c_str(), nullptr);
    } catch (const std::exception&) {
      throw FormatError("malformed state.txt in " + dir.string());
    }
  }

 private:
  Model<T> model_;
  std::vector<std::vector<T>> velocity_;
  double lr_;
  std::size_t epoch_ = 0;
  std::size_t steps_ = 0;
};

}  // namespace sgfnet
