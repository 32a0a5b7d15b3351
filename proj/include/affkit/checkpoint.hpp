#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "affkit/config.hpp"
#include "affkit/error.hpp"
#include "affkit/model.hpp"
#include "affkit/netpbm.hpp"

namespace affkit {

// Layout (little-endian): "AFNC", u32 version, u32 tensor count, then per
// tensor u16 name length, name bytes, u8 rank, u32 dims, f32 values.
// Run metadata travels as extra tensors named meta.*.

inline constexpr char kCheckpointMagic[4] = {'A', 'F', 'N', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor<float> value;
};

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { out_.push_back(static_cast<char>(v)); }
  void u16(std::uint16_t v) { le(v, 2); }
  void u32(std::uint32_t v) { le(v, 4); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void bytes(const std::string& s) { out_ += s; }
  std::string& str() { return out_; }

 private:
  void le(std::uint32_t v, int n) {
    for (int i = 0; i < n; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  std::string out_;
};

class ByteReader {
 public:
  ByteReader(const std::string& data, std::string source) : data_(data), source_(std::move(source)) {}

  [[noreturn]] void fail(const std::string& what) const {
    throw FormatError(source_ + ": " + what + " at byte offset " + std::to_string(pos_), pos_);
  }

  void need(std::size_t n, const char* what) const {
    if (data_.size() - pos_ < n) fail(std::string("truncated ") + what);
  }

  std::uint32_t le(int n, const char* what) {
    need(static_cast<std::size_t>(n), what);
    std::uint32_t v = 0;
    for (int i = 0; i < n; ++i) v |= std::uint32_t(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::uint8_t u8(const char* what) { return static_cast<std::uint8_t>(le(1, what)); }
  std::uint16_t u16(const char* what) { return static_cast<std::uint16_t>(le(2, what)); }
  std::uint32_t u32(const char* what) { return le(4, what); }
  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == data_.size(); }

 private:
  const std::string& data_;
  std::string source_;
  std::size_t pos_ = 0;
};

inline Tensor<float> pack_bytes(const std::string& s) {
  Tensor<float> t({std::max<std::size_t>(1, s.size() + 1)});
  t[0] = static_cast<float>(s.size() ? 1 : 0);
  for (std::size_t i = 0; i < s.size(); ++i) t[i + 1] = static_cast<float>(static_cast<unsigned char>(s[i]));
  return t;
}

inline std::string unpack_bytes(const Tensor<float>& t) {
  std::string s;
  if (t.size() < 2) return s;
  for (std::size_t i = 1; i < t.size(); ++i) s.push_back(static_cast<char>(static_cast<unsigned char>(t[i])));
  return s;
}

/// 16-bit chunks, least significant first; each chunk is exact in f32.
inline Tensor<float> pack_u64(std::uint64_t v) {
  Tensor<float> t({4});
  for (std::size_t i = 0; i < 4; ++i) t[i] = static_cast<float>((v >> (16 * i)) & 0xffff);
  return t;
}

inline std::uint64_t unpack_u64(const Tensor<float>& t) {
  if (t.size() != 4) throw FormatError("checkpoint: 64-bit metadata needs 4 chunks", 0);
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    const float f = t[i];
    if (!(f >= 0 && f <= 65535 && f == std::floor(f))) throw FormatError("checkpoint: bad metadata chunk", 0);
    v |= static_cast<std::uint64_t>(f) << (16 * i);
  }
  return v;
}

}  // namespace detail

inline std::string encode_checkpoint(const std::vector<NamedTensor>& tensors) {
  detail::ByteWriter w;
  w.bytes(std::string(kCheckpointMagic, 4));
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    if (t.name.empty() || t.name.size() > 0xffff) throw ValidationError("checkpoint: bad tensor name length");
    if (t.value.rank() > 255) throw ValidationError("checkpoint: tensor rank too large");
    w.u16(static_cast<std::uint16_t>(t.name.size()));
    w.bytes(t.name);
    w.u8(static_cast<std::uint8_t>(t.value.rank()));
    for (auto d : t.value.dims()) w.u32(static_cast<std::uint32_t>(d));
    for (float v : t.value.values()) w.f32(v);
  }
  return std::move(w.str());
}

inline std::vector<NamedTensor> decode_checkpoint(const std::string& bytes, const std::string& source) {
  detail::ByteReader r(bytes, source);
  if (r.bytes(4, "magic") != std::string(kCheckpointMagic, 4)) {
    throw FormatError(source + ": bad magic at byte offset 0 (expected AFNC)", 0);
  }
  const std::size_t version_at = r.pos();
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion)
    throw FormatError(source + ": unsupported version " + std::to_string(version) + " at byte offset " +
                          std::to_string(version_at),
                      version_at);
  const std::uint32_t count = r.u32("tensor count");
  std::vector<NamedTensor> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t len = r.u16("name length");
    if (len == 0) r.fail("empty tensor name");
    std::string name = r.bytes(len, "tensor name");
    const std::uint8_t rank = r.u8("rank");
    if (rank == 0) r.fail("tensor '" + name + "' has rank 0");
    Shape dims;
    std::uint64_t total = 1;
    for (std::uint8_t d = 0; d < rank; ++d) {
      const std::uint32_t v = r.u32("dims");
      if (v == 0) r.fail("tensor '" + name + "' has a zero dimension");
      total *= v;
      if (total > bytes.size()) r.fail("tensor '" + name + "' is larger than the file");
      dims.push_back(v);
    }
    r.need(total * 4, "tensor values");
    std::vector<float> values(total);
    for (auto& v : values) v = r.f32("tensor values");
    out.push_back({std::move(name), Tensor<float>(std::move(dims), std::move(values))});
  }
  if (!r.done()) r.fail("trailing bytes after last tensor");
  return out;
}

/// Parameters plus meta.config (the full run config text), meta.iteration and meta.seed.
inline void save_checkpoint(const Model& model, const RunConfig& run, const std::filesystem::path& path) {
  std::vector<NamedTensor> tensors;
  RunConfig copy = run;
  copy.model = model.config();
  tensors.push_back({"meta.config", detail::pack_bytes(config_to_text(copy))});
  tensors.push_back({"meta.iteration", detail::pack_u64(model.iteration())});
  tensors.push_back({"meta.seed", detail::pack_u64(run.seed)});
  for (const auto& p : model.params()) tensors.push_back({p.name, p.value});
  write_file_atomic(path, encode_checkpoint(tensors));
}

struct LoadedCheckpoint {
  RunConfig run;
  Model model;
};

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  const std::string bytes = read_file_bytes(path);
  const auto tensors = decode_checkpoint(bytes, path.string());
  std::map<std::string, const Tensor<float>*> by_name;
  for (const auto& t : tensors) {
    if (!by_name.emplace(t.name, &t.value).second)
      throw FormatError(path.string() + ": duplicate tensor '" + t.name + "'", 0);
  }
  auto get = [&](const std::string& name) -> const Tensor<float>& {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError(path.string() + ": missing tensor '" + name + "'", 0);
    return *it->second;
  };
  RunConfig run = parse_config(detail::unpack_bytes(get("meta.config")), path.string() + "[meta.config]");
  run.seed = detail::unpack_u64(get("meta.seed"));
  Model model(run.model, run.init_seed);
  model.set_iteration(detail::unpack_u64(get("meta.iteration")));
  for (auto& p : model.params()) {
    const auto& t = get(p.name);
    if (t.dims() != p.value.dims())
      throw FormatError(path.string() + ": tensor '" + p.name + "' has dims " + shape_string(t.dims()) +
                            ", model expects " + shape_string(p.value.dims()),
                        0);
    p.value = t;
  }
  if (by_name.size() != model.params().size() + 3)
    throw FormatError(path.string() + ": checkpoint holds tensors the model does not define", 0);
  return {std::move(run), std::move(model)};
}

}  // namespace affkit
