#pragma once

// TNSR v1 container: one text header line
//   TNSR 1 <f32|f64> <ndim> <d0> <d1> ...
// followed by little-endian row-major values.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "sgfnet/tensor.hpp"

namespace sgfnet {

namespace detail {

template <class T>
constexpr const char* dtype_name() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>, "TNSR stores f32 or f64 only");
  return std::is_same_v<T, float> ? "f32" : "f64";
}

template <class U>
void write_le(std::ostream& out, U v) {
  char bytes[sizeof(U)];
  std::memcpy(bytes, &v, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
  out.write(bytes, sizeof(U));
}

template <class U>
U read_le(const char* bytes) {
  char tmp[sizeof(U)];
  std::memcpy(tmp, bytes, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(tmp, tmp + sizeof(U));
  U v;
  std::memcpy(&v, tmp, sizeof(U));
  return v;
}

template <class U, class T>
std::vector<T> read_payload(std::istream& in, std::size_t count) {
  std::vector<char> raw(count * sizeof(U));
  in.read(raw.data(), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(in.gcount()) != raw.size()) throw FormatError("TNSR: truncated payload");
  std::vector<T> values(count);
  for (std::size_t i = 0; i < count; ++i) values[i] = static_cast<T>(read_le<U>(raw.data() + i * sizeof(U)));
  return values;
}

}  // namespace detail

template <class T>
void write_tensor(std::ostream& out, const Tensor<T>& t) {
  out << "TNSR 1 " << detail::dtype_name<T>() << ' ' << t.rank();
  for (std::size_t d : t.shape()) out << ' ' << d;
  out << '\n';
  for (T v : t.data()) detail::write_le(out, v);
  if (!out) throw Error("TNSR: write failed");
}

/// Reads either dtype and converts to T.
template <class T>
Tensor<T> read_tensor(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw FormatError("TNSR: missing header");
  std::istringstream hdr(line);
  std::string magic, dtype;
  int version = 0;
  std::size_t ndim = 0;
  if (!(hdr >> magic >> version >> dtype >> ndim) || magic != "TNSR") throw FormatError("TNSR: malformed header '" + line + "'");
  if (version != 1) throw FormatError("TNSR: unsupported version " + std::to_string(version));
  Shape shape(ndim);
  for (auto& d : shape)
    if (!(hdr >> d)) throw FormatError("TNSR: header lists fewer than " + std::to_string(ndim) + " dims");
  std::string extra;
  if (hdr >> extra) throw FormatError("TNSR: trailing header tokens");
  const std::size_t count = numel(shape);
  if (dtype == "f32") return Tensor<T>(shape, detail::read_payload<float, T>(in, count));
  if (dtype == "f64") return Tensor<T>(shape, detail::read_payload<double, T>(in, count));
  throw FormatError("TNSR: unknown dtype '" + dtype + "'");
}

template <class T>
void save_tensor(const std::filesystem::path& path, const Tensor<T>& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  write_tensor(out, t);
}

template <class T>
Tensor<T> load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return read_tensor<T>(in);
}

template <class T>
using NamedTensors = std::vector<std::pair<std::string, Tensor<T>>>;

/// Writes each tensor to <dir>/<index>.tnsr and lists `name file` pairs in manifest.txt.
template <class T>
void save_manifest(const std::filesystem::path& dir, const NamedTensors<T>& entries) {
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir / "manifest.txt");
  if (!manifest) throw Error("cannot write manifest in " + dir.string());
  for (std::size_t i = 0; i < entries.size(); ++i) {
    char file[32];
    std::snprintf(file, sizeof file, "%04zu.tnsr", i);
    save_tensor(dir / file, entries[i].second);
    manifest << entries[i].first << ' ' << file << '\n';
  }
}

template <class T>
NamedTensors<T> load_manifest(const std::filesystem::path& dir) {
  std::ifstream manifest(dir / "manifest.txt");
  if (!manifest) throw Error("no manifest.txt in " + dir.string());
  NamedTensors<T> entries;
  std::string name, file;
  while (manifest >> name >> file) entries.emplace_back(name, load_tensor<T>(dir / file));
  if (!manifest.eof()) throw FormatError("malformed manifest in " + dir.string());
  return entries;
}

}  // namespace sgfnet
