#pragma once

// Binary checkpoint, all integers little-endian:
//   "XMPT" u32 version
//   u32 len, stage bytes; u64 step; u64 seed; u64 config_hash
//   u32 tensor count, then per tensor:
//     u32 len, name bytes; u32 rank; u32 dims[rank]; f32 data[numel] (row-major)

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "xmpt/models.hpp"

namespace xmpt {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CheckpointTensor {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

struct Checkpoint {
  std::string stage;
  std::uint64_t step = 0;
  std::uint64_t seed = 0;
  std::uint64_t config_hash = 0;
  std::vector<CheckpointTensor> tensors;

  static Checkpoint from_parameters(const ParameterList& params) {
    Checkpoint ck;
    std::set<std::string> seen;
    for (const auto& p : params) {
      if (!seen.insert(p.name).second) throw CheckpointError("checkpoint: duplicate tensor name '" + p.name + "'");
      CheckpointTensor t{p.name, p.tensor.shape(), {}};
      t.data.reserve(p.tensor.numel());
      for (double v : p.tensor.data()) t.data.push_back(static_cast<float>(v));
      ck.tensors.push_back(std::move(t));
    }
    return ck;
  }

  ParameterList to_parameters() const {
    ParameterList out;
    for (const auto& t : tensors)
      out.push_back({t.name, Tensor::from(t.shape, std::vector<double>(t.data.begin(), t.data.end()))});
    return out;
  }
};

namespace detail {

class ByteWriter {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s);
  }
  void raw(std::string_view s) { bytes_.append(s); }
  std::string take() { return std::move(bytes_); }

 private:
  std::string bytes_;
};

class ByteReader {
 public:
  ByteReader(std::string_view bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

  void need(std::size_t n, const char* field) {
    if (bytes_.size() - pos_ < n)
      throw CheckpointError(what_ + ": truncated reading " + field + " at byte " + std::to_string(pos_) + " (need " +
                            std::to_string(n) + ", have " + std::to_string(bytes_.size() - pos_) + ")");
  }
  std::uint32_t u32(const char* field) {
    need(4, field);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64(const char* field) {
    need(8, field);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  float f32(const char* field) { return std::bit_cast<float>(u32(field)); }
  std::string str(const char* field) {
    const std::uint32_t n = u32(field);
    return std::string(raw(n, field));
  }
  std::string_view raw(std::size_t n, const char* field) {
    need(n, field);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t position() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }
  const std::string& what() const { return what_; }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
  std::string what_;
};

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open '" + path.string() + "' for reading");
  return std::string(std::istreambuf_iterator<char>(in), {});
}

/// Writes to a sibling temporary file, then renames over the target.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot open '" + tmp.string() + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("write failed for '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace detail

inline std::string serialize(const Checkpoint& ck) {
  detail::ByteWriter w;
  w.raw("XMPT");
  w.u32(kCheckpointVersion);
  w.str(ck.stage);
  w.u64(ck.step);
  w.u64(ck.seed);
  w.u64(ck.config_hash);
  w.u32(static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& t : ck.tensors) {
    if (numel_of(t.shape) != t.data.size())
      throw CheckpointError("checkpoint: tensor '" + t.name + "' data does not match shape " + to_string(t.shape));
    w.str(t.name);
    w.u32(static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) w.u32(static_cast<std::uint32_t>(d));
    for (float v : t.data) w.f32(v);
  }
  return w.take();
}

inline Checkpoint deserialize(std::string_view bytes, const std::string& what = "checkpoint") {
  detail::ByteReader r(bytes, what);
  if (r.raw(4, "magic") != "XMPT") throw CheckpointError(what + ": bad magic at byte 0 (expected \"XMPT\")");
  const auto version = r.u32("version");
  if (version != kCheckpointVersion)
    throw CheckpointError(what + ": unsupported version " + std::to_string(version) + " at byte 4");
  Checkpoint ck;
  ck.stage = r.str("stage");
  ck.step = r.u64("step");
  ck.seed = r.u64("seed");
  ck.config_hash = r.u64("config hash");
  const auto count = r.u32("tensor count");
  std::set<std::string> seen;
  for (std::uint32_t k = 0; k < count; ++k) {
    CheckpointTensor t;
    const auto at = r.position();
    t.name = r.str("tensor name");
    if (!seen.insert(t.name).second)
      throw CheckpointError(what + ": duplicate tensor name '" + t.name + "' at byte " + std::to_string(at));
    const auto rank = r.u32("tensor rank");
    std::size_t n = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      t.shape.push_back(r.u32("tensor dims"));
      n *= t.shape.back();
    }
    r.need(n * 4, "tensor data");
    t.data.resize(n);
    for (auto& v : t.data) v = r.f32("tensor data");
    ck.tensors.push_back(std::move(t));
  }
  if (!r.done()) throw CheckpointError(what + ": trailing bytes after byte " + std::to_string(r.position()));
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  detail::write_file_atomic(path, serialize(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return deserialize(detail::read_file(path), path.string());
}

/// FNV-1a, used to fingerprint resolved configurations.
inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace xmpt
