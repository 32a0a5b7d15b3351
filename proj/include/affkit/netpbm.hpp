#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "affkit/error.hpp"
#include "affkit/maskops.hpp"

namespace affkit {

/// 8-bit interleaved image; 1 channel (gray) or 3 (RGB).
struct Image {
  std::size_t width = 0, height = 0, channels = 3;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(std::size_t w, std::size_t h, std::size_t c, std::uint8_t fill = 0)
      : width(w), height(h), channels(c), pixels(w * h * c, fill) {}

  std::uint8_t& at(std::size_t x, std::size_t y, std::size_t c) {
    return pixels[(y * width + x) * channels + c];
  }
  std::uint8_t at(std::size_t x, std::size_t y, std::size_t c) const {
    return pixels[(y * width + x) * channels + c];
  }

  friend bool operator==(const Image&, const Image&) = default;
};

/// Writes to a sibling temp file, then renames over the destination.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot open " + tmp + " for writing");
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw Error("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ValidationError("cannot open " + path.string() + ": no such file");
  return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

namespace detail {

class PnmHeaderParser {
 public:
  PnmHeaderParser(const std::string& bytes, std::string source)
      : bytes_(bytes), source_(std::move(source)) {}

  [[noreturn]] void fail(const std::string& what) const {
    throw FormatError(source_ + ": " + what + " at byte " + std::to_string(pos_), pos_);
  }

  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      const char c = bytes_[pos_];
      if (c == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f') {
        ++pos_;
      } else {
        break;
      }
    }
  }

  std::size_t read_uint() {
    skip_space_and_comments();
    const std::size_t start = pos_;
    std::size_t v = 0;
    while (pos_ < bytes_.size() && bytes_[pos_] >= '0' && bytes_[pos_] <= '9') {
      v = v * 10 + static_cast<std::size_t>(bytes_[pos_] - '0');
      if (v > (1u << 24)) fail("header value too large");
      ++pos_;
    }
    if (pos_ == start) fail("expected an integer in header");
    return v;
  }

  std::size_t pos_ = 0;

 private:
  const std::string& bytes_;
  std::string source_;
};

}  // namespace detail

/// Binary PGM (P5) or PPM (P6) with maxval <= 255.
inline Image decode_netpbm(const std::string& bytes, const std::string& source) {
  detail::PnmHeaderParser p(bytes, source);
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6'))
    p.fail("bad magic, expected P5 or P6");
  const std::size_t channels = bytes[1] == '5' ? 1 : 3;
  p.pos_ = 2;
  const std::size_t w = p.read_uint();
  const std::size_t h = p.read_uint();
  const std::size_t maxval = p.read_uint();
  if (w == 0 || h == 0) p.fail("zero image dimension");
  if (maxval == 0 || maxval > 255) p.fail("unsupported maxval " + std::to_string(maxval));
  if (p.pos_ >= bytes.size()) p.fail("missing raster");
  const char sep = bytes[p.pos_];
  if (sep != ' ' && sep != '\t' && sep != '\n' && sep != '\r') p.fail("expected whitespace after maxval");
  ++p.pos_;
  const std::size_t need = w * h * channels;
  if (bytes.size() - p.pos_ < need) {
    p.pos_ = bytes.size();
    p.fail("truncated raster (need " + std::to_string(need) + " bytes)");
  }
  Image img(w, h, channels);
  std::copy_n(bytes.begin() + static_cast<std::ptrdiff_t>(p.pos_), need, img.pixels.begin());
  return img;
}

inline std::string encode_netpbm(const Image& img) {
  if (img.channels != 1 && img.channels != 3) throw ValidationError("netpbm: channels must be 1 or 3");
  std::string out = (img.channels == 1 ? "P5\n" : "P6\n") + std::to_string(img.width) + " " +
                    std::to_string(img.height) + "\n255\n";
  out.append(img.pixels.begin(), img.pixels.end());
  return out;
}

inline Image read_image(const std::filesystem::path& path) {
  return decode_netpbm(read_file_bytes(path), path.string());
}

inline void write_image(const std::filesystem::path& path, const Image& img) {
  write_file_atomic(path, encode_netpbm(img));
}

/// Masks are PGM files whose pixel values are affordance labels. Labels above
/// num_affordance_classes are rejected.
inline LabelMask read_mask(const std::filesystem::path& path, std::size_t num_affordance_classes) {
  const Image img = read_image(path);
  if (img.channels != 1) throw FormatError(path.string() + ": mask must be a PGM (P5) file", 1);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    if (img.pixels[i] > num_affordance_classes)
      throw ValidationError(path.string() + ": label " + std::to_string(img.pixels[i]) +
                            " at pixel (" + std::to_string(i % img.width) + "," +
                            std::to_string(i / img.width) + ") exceeds " +
                            std::to_string(num_affordance_classes) + " affordance classes");
  }
  return LabelMask(img.width, img.height, img.pixels);
}

inline void write_mask(const std::filesystem::path& path, const LabelMask& mask) {
  Image img(mask.width(), mask.height(), 1);
  std::copy(mask.labels().begin(), mask.labels().end(), img.pixels.begin());
  write_image(path, img);
}

}  // namespace affkit
