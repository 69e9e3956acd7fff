#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "sylph/tensor.hpp"

namespace sylph {

/// Failure while reading an on-disk artifact; carries the file and byte offset.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& path, std::uint64_t offset, const std::string& what)
      : std::runtime_error(path + " @ byte " + std::to_string(offset) + ": " + what), path_(path), offset_(offset) {}
  const std::string& path() const { return path_; }
  std::uint64_t offset() const { return offset_; }

 private:
  std::string path_;
  std::uint64_t offset_;
};

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

/// Container layout (little-endian):
///   "SYLC" | u32 version | u32 count |
///   count × { u32 name_len | name | u32 rank | rank × u64 extent | f32 payload }
inline constexpr char kContainerMagic[4] = {'S', 'Y', 'L', 'C'};
inline constexpr std::uint32_t kContainerVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class ByteReader {
 public:
  ByteReader(std::string path, std::string bytes) : path_(std::move(path)), bytes_(std::move(bytes)) {}

  std::uint64_t offset() const { return pos_; }
  bool at_end() const { return pos_ == bytes_.size(); }

  void need(std::uint64_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) throw FormatError(path_, pos_, std::string("truncated ") + what);
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  std::string bytes(std::uint64_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  [[noreturn]] void fail(const std::string& what) const { throw FormatError(path_, pos_, what); }

 private:
  std::string path_;
  std::string bytes_;
  std::uint64_t pos_ = 0;
};

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace detail

inline std::string encode_container(const std::vector<NamedArray>& arrays) {
  std::string out(kContainerMagic, 4);
  detail::put_u32(out, kContainerVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(arrays.size()));
  for (const auto& a : arrays) {
    if (a.values.size() != shape_numel(a.shape)) {
      throw std::invalid_argument("container: array " + a.name + " payload does not match its shape");
    }
    detail::put_u32(out, static_cast<std::uint32_t>(a.name.size()));
    out += a.name;
    detail::put_u32(out, static_cast<std::uint32_t>(a.shape.size()));
    for (auto e : a.shape) detail::put_u64(out, e);
    for (float v : a.values) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

inline std::vector<NamedArray> decode_container(const std::string& path, std::string bytes) {
  detail::ByteReader r(path, std::move(bytes));
  if (r.bytes(4, "magic") != std::string(kContainerMagic, 4)) r.fail("bad magic, expected SYLC");
  const auto version = r.u32("version");
  if (version != kContainerVersion) r.fail("unsupported container version " + std::to_string(version));
  const auto count = r.u32("tensor count");
  std::vector<NamedArray> arrays;
  arrays.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedArray a;
    const auto len = r.u32("name length");
    a.name = r.bytes(len, "name");
    const auto rank = r.u32("rank");
    if (rank > 8) r.fail("implausible rank " + std::to_string(rank) + " for " + a.name);
    for (std::uint32_t d = 0; d < rank; ++d) a.shape.push_back(static_cast<std::size_t>(r.u64("extent")));
    const std::uint64_t n = shape_numel(a.shape);
    r.need(n * 4, "payload");
    a.values.resize(n);
    for (std::uint64_t k = 0; k < n; ++k) a.values[k] = std::bit_cast<float>(r.u32("payload"));
    arrays.push_back(std::move(a));
  }
  if (!r.at_end()) r.fail("trailing bytes after last record");
  return arrays;
}

inline void write_container(const std::string& path, const std::vector<NamedArray>& arrays) {
  const std::string bytes = encode_container(arrays);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("short write to " + path);
}

inline std::vector<NamedArray> read_container(const std::string& path) {
  return decode_container(path, detail::read_file_bytes(path));
}

/// Named parameter tensors of a model, iterated in name order.
template <std::floating_point T>
class ParamStore {
 public:
  Tensor<T>& add(const std::string& name, Tensor<T> value) {
    value.set_requires_grad(true);
    auto [it, inserted] = params_.emplace(name, std::move(value));
    if (!inserted) throw std::logic_error("ParamStore: duplicate parameter " + name);
    return it->second;
  }
  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  Tensor<T>& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("ParamStore: no parameter " + name);
    return it->second;
  }
  const Tensor<T>& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("ParamStore: no parameter " + name);
    return it->second;
  }
  void erase(const std::string& name) { params_.erase(name); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  std::size_t size() const { return params_.size(); }

  void zero_grad() {
    for (auto& [_, t] : params_) t.zero_grad();
  }

  std::vector<NamedArray> to_arrays() const {
    std::vector<NamedArray> out;
    for (const auto& [name, t] : params_) {
      NamedArray a{name, t.shape(), {}};
      a.values.assign(t.data().begin(), t.data().end());
      out.push_back(std::move(a));
    }
    return out;
  }

  /// Copies values for every parameter present in `arrays`; unknown names are
  /// ignored, shape mismatches throw.
  void load_arrays(const std::vector<NamedArray>& arrays) {
    for (const auto& a : arrays) {
      auto it = params_.find(a.name);
      if (it == params_.end()) continue;
      if (it->second.shape() != a.shape) {
        throw std::runtime_error("checkpoint tensor " + a.name + " has shape " + shape_str(a.shape) +
                                 ", model expects " + shape_str(it->second.shape()));
      }
      auto dst = it->second.data();
      for (std::size_t i = 0; i < a.values.size(); ++i) dst[i] = static_cast<T>(a.values[i]);
    }
  }

 private:
  std::map<std::string, Tensor<T>> params_;
};

}  // namespace sylph
