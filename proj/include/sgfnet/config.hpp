#pragma once

#include <charconv>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "sgfnet/data.hpp"
#include "sgfnet/network.hpp"

namespace sgfnet {

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Training run settings: dataset and output paths plus the network and
/// optimizer fields. Input size and class count default to the dataset's.
struct RunConfig {
  std::string data;
  std::string val_data;
  std::string out = "run";
  std::string resume;
  NetworkConfig net;
  bool explicit_dims = false;  // height, width or num_classes given by the user

  /// Takes size and class count from the dataset, or checks them against it.
  void match_dataset(const DatasetMeta& meta) {
    if (explicit_dims && (net.height != meta.height || net.width != meta.width || net.num_classes != meta.classes)) {
      throw ConfigError("config: height/width/num_classes " + std::to_string(net.height) + "/" + std::to_string(net.width) +
                        "/" + std::to_string(net.num_classes) + " do not match dataset " + std::to_string(meta.height) +
                        "/" + std::to_string(meta.width) + "/" + std::to_string(meta.classes));
    }
    net.height = meta.height;
    net.width = meta.width;
    net.num_classes = meta.classes;
  }
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

template <class N>
N parse_number(std::string_view key, std::string_view v) {
  N out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || ptr != v.data() + v.size()) {
    throw ConfigError("config: '" + std::string(key) + "' expects a number, got '" + std::string(v) + "'");
  }
  return out;
}

inline bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw ConfigError("config: '" + std::string(key) + "' expects true/false, got '" + std::string(v) + "'");
}

inline Modality parse_modality(std::string_view v) {
  if (v == "both") return Modality::both;
  if (v == "rgb") return Modality::rgb;
  if (v == "thermal") return Modality::thermal;
  throw ConfigError("config: modality must be both, rgb or thermal, got '" + std::string(v) + "'");
}

}  // namespace detail

/// Sets one key; unknown keys and malformed values throw ConfigError.
inline void apply_setting(RunConfig& rc, std::string_view key, std::string_view value) {
  using detail::parse_bool;
  using detail::parse_number;
  auto& n = rc.net;
  if (key == "data") rc.data = value;
  else if (key == "val_data") rc.val_data = value;
  else if (key == "out") rc.out = value;
  else if (key == "resume") rc.resume = value;
  else if (key == "epochs") n.epochs = parse_number<std::size_t>(key, value);
  else if (key == "seed") n.seed = parse_number<std::uint64_t>(key, value);
  else if (key == "learning_rate") n.learning_rate = parse_number<double>(key, value);
  else if (key == "lr_decay") n.lr_decay = parse_number<double>(key, value);
  else if (key == "momentum") n.momentum = parse_number<double>(key, value);
  else if (key == "batch_size") n.batch_size = parse_number<std::size_t>(key, value);
  else if (key == "reduction") n.reduction = parse_number<std::size_t>(key, value);
  else if (key == "basis_h") n.basis_h = parse_number<std::size_t>(key, value);
  else if (key == "basis_w") n.basis_w = parse_number<std::size_t>(key, value);
  else if (key == "label_smoothing") n.label_smoothing = parse_number<double>(key, value);
  else if (key == "grad_clip") n.grad_clip = parse_number<double>(key, value);
  else if (key == "enable_sfe") n.enable_sfe = parse_bool(key, value);
  else if (key == "enable_sca") n.enable_sca = parse_bool(key, value);
  else if (key == "enable_gsa") n.enable_gsa = parse_bool(key, value);
  else if (key == "enable_ds") n.enable_ds = parse_bool(key, value);
  else if (key == "modality") n.modality = detail::parse_modality(value);
  else if (key == "height" || key == "width" || key == "num_classes") {
    (key == "height" ? n.height : key == "width" ? n.width : n.num_classes) = parse_number<std::size_t>(key, value);
    rc.explicit_dims = true;
  } else if (key == "stage_channels") {
    std::vector<std::size_t> widths;
    std::string_view rest = value;
    while (!rest.empty()) {
      const auto comma = rest.find(',');
      widths.push_back(parse_number<std::size_t>(key, detail::trim(rest.substr(0, comma))));
      rest = comma == std::string_view::npos ? std::string_view{} : rest.substr(comma + 1);
    }
    if (widths.size() != 4) throw ConfigError("config: stage_channels needs exactly 4 widths");
    std::copy(widths.begin(), widths.end(), n.stage_channels.begin());
  } else {
    throw ConfigError("config: unknown key '" + std::string(key) + "'");
  }
}

/// Parses "key=value" (as given on the command line).
inline void apply_override(RunConfig& rc, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) throw ConfigError("override '" + std::string(assignment) + "' is not key=value");
  apply_setting(rc, detail::trim(assignment.substr(0, eq)), detail::trim(assignment.substr(eq + 1)));
}

/// Flat `key = value` lines; `#` starts a comment; blank lines ignored.
inline void parse_config(std::istream& in, RunConfig& rc) {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string_view s = line;
    if (const auto hash = s.find('#'); hash != std::string_view::npos) s = s.substr(0, hash);
    s = detail::trim(s);
    if (s.empty()) continue;
    if (s.find('=') == std::string_view::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    }
    apply_override(rc, s);
  }
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  RunConfig rc;
  parse_config(in, rc);
  return rc;
}

/// Every setting, in a form parse_config reads back to the same values.
inline std::string to_text(const RunConfig& rc) {
  const auto& n = rc.net;
  std::ostringstream out;
  out.precision(17);
  auto b = [](bool v) { return v ? "true" : "false"; };
  out << "data = " << rc.data << "\nval_data = " << rc.val_data << "\nout = " << rc.out << "\nresume = " << rc.resume
      << "\nepochs = " << n.epochs << "\nseed = " << n.seed << "\nlearning_rate = " << n.learning_rate
      << "\nlr_decay = " << n.lr_decay << "\nmomentum = " << n.momentum << "\nbatch_size = " << n.batch_size
      << "\nstage_channels = " << n.stage_channels[0] << ',' << n.stage_channels[1] << ',' << n.stage_channels[2] << ','
      << n.stage_channels[3] << "\nreduction = " << n.reduction << "\nbasis_h = " << n.basis_h
      << "\nbasis_w = " << n.basis_w << "\nlabel_smoothing = " << n.label_smoothing << "\ngrad_clip = " << n.grad_clip
      << "\nenable_sfe = " << b(n.enable_sfe) << "\nenable_sca = " << b(n.enable_sca)
      << "\nenable_gsa = " << b(n.enable_gsa) << "\nenable_ds = " << b(n.enable_ds)
      << "\nmodality = " << to_string(n.modality) << "\nheight = " << n.height << "\nwidth = " << n.width
      << "\nnum_classes = " << n.num_classes << "\n# optimizer: SGD with momentum and gradient-norm clipping, lr decayed once per epoch\n";
  return out.str();
}

}  // namespace sgfnet
