#pragma once

#include <cctype>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "sylph/checkpoint.hpp"

namespace sylph {

/// Interleaved 8-bit RGB raster, row-major.
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> rgb;

  Image() = default;
  Image(std::size_t h, std::size_t w, std::uint8_t fill = 0) : height(h), width(w), rgb(h * w * 3, fill) {}

  std::uint8_t* pixel(std::size_t y, std::size_t x) { return rgb.data() + (y * width + x) * 3; }
  const std::uint8_t* pixel(std::size_t y, std::size_t x) const { return rgb.data() + (y * width + x) * 3; }
  bool operator==(const Image&) const = default;
};

inline std::string encode_ppm(const Image& img) {
  std::string out = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(img.rgb.data()), img.rgb.size());
  return out;
}

inline void write_ppm(const std::string& path, const Image& img) {
  const std::string bytes = encode_ppm(img);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

/// Binary PPM (P6, maxval 255) decoder. Errors carry the byte offset.
inline Image decode_ppm(const std::string& path, const std::string& bytes) {
  std::size_t pos = 0;
  auto fail = [&](const std::string& what) -> void { throw FormatError(path, pos, what); };
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&](const char* what) -> std::size_t {
    skip_space();
    if (pos >= bytes.size()) fail(std::string("truncated header, missing ") + what);
    if (!std::isdigit(static_cast<unsigned char>(bytes[pos]))) fail(std::string("expected ") + what);
    std::size_t v = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + static_cast<std::size_t>(bytes[pos] - '0');
      if (v > 1u << 20) fail(std::string("implausible ") + what);
      ++pos;
    }
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') fail("not a binary PPM (missing P6 magic)");
  pos = 2;
  const std::size_t w = number("width"), h = number("height"), maxval = number("maxval");
  if (maxval != 255) fail("unsupported maxval " + std::to_string(maxval));
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) fail("truncated header");
  ++pos;
  Image img(h, w);
  if (bytes.size() - pos < img.rgb.size()) {
    fail("truncated pixel data: expected " + std::to_string(img.rgb.size()) + " bytes, found " +
         std::to_string(bytes.size() - pos));
  }
  if (bytes.size() - pos > img.rgb.size()) {
    pos += img.rgb.size();
    fail("trailing bytes after pixel data");
  }
  std::copy(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.end(), img.rgb.begin());
  return img;
}

inline Image read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path, 0, "cannot open image");
  return decode_ppm(path, std::string(std::istreambuf_iterator<char>(in), {}));
}

}  // namespace sylph
