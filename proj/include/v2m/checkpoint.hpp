#pragma once

// Binary checkpoint format (all integers little-endian):
//
//   "V2M1"  u32 version  u32 record count
//   per record: u16 name length, name bytes (UTF-8), u8 dtype (0 f32, 1 f64),
//               u8 rank, rank x u32 dims, raw little-endian values
//
// Records keep the order they were written in, so load -> save reproduces
// the file byte for byte. The model configuration travels as the f64
// record "meta.config".

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "v2m/model.hpp"
#include "v2m/tensor.hpp"

namespace v2m {

inline constexpr std::array<char, 4> kCheckpointMagic{'V', '2', 'M', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointRecord {
  std::string name;
  DType dtype = DType::f64;
  Shape shape;
  std::vector<unsigned char> bytes;  // little-endian values

  std::size_t element_size() const { return dtype == DType::f32 ? 4 : 8; }

  template <std::floating_point T>
  static CheckpointRecord from_tensor(std::string name, const Tensor<T>& t) {
    CheckpointRecord r{std::move(name), dtype_of<T>(), t.shape(), {}};
    r.bytes.reserve(t.size() * sizeof(T));
    for (T v : t.data()) {
      using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
      const U u = std::bit_cast<U>(v);
      for (std::size_t b = 0; b < sizeof(T); ++b) r.bytes.push_back(static_cast<unsigned char>(u >> (8 * b)));
    }
    return r;
  }

  /// Values converted to T.
  template <std::floating_point T>
  Tensor<T> tensor() const {
    Tensor<T> out(shape);
    for (std::size_t i = 0; i < out.size(); ++i) {
      const unsigned char* p = bytes.data() + i * element_size();
      if (dtype == DType::f32) {
        std::uint32_t u = 0;
        for (std::size_t b = 0; b < 4; ++b) u |= std::uint32_t{p[b]} << (8 * b);
        out[i] = static_cast<T>(std::bit_cast<float>(u));
      } else {
        std::uint64_t u = 0;
        for (std::size_t b = 0; b < 8; ++b) u |= std::uint64_t{p[b]} << (8 * b);
        out[i] = static_cast<T>(std::bit_cast<double>(u));
      }
    }
    return out;
  }
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::vector<CheckpointRecord> records;

  const CheckpointRecord* find(const std::string& name) const {
    for (const auto& r : records) {
      if (r.name == name) return &r;
    }
    return nullptr;
  }
};

namespace detail {

inline void put_le(std::vector<unsigned char>& out, std::uint64_t v, int bytes) {
  for (int b = 0; b < bytes; ++b) out.push_back(static_cast<unsigned char>(v >> (8 * b)));
}

class ByteReader {
 public:
  ByteReader(const std::vector<unsigned char>& b, std::string path) : b_(b), path_(std::move(path)) {}

  std::uint64_t le(int bytes) {
    need(static_cast<std::size_t>(bytes));
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= std::uint64_t{b_[at_ + static_cast<std::size_t>(i)]} << (8 * i);
    at_ += static_cast<std::size_t>(bytes);
    return v;
  }

  std::vector<unsigned char> take(std::size_t n) {
    need(n);
    std::vector<unsigned char> out(b_.begin() + static_cast<std::ptrdiff_t>(at_),
                                   b_.begin() + static_cast<std::ptrdiff_t>(at_ + n));
    at_ += n;
    return out;
  }

  bool done() const { return at_ == b_.size(); }

 private:
  void need(std::size_t n) const {
    if (b_.size() - at_ < n) throw FormatError("'" + path_ + "': truncated checkpoint");
  }
  const std::vector<unsigned char>& b_;
  std::string path_;
  std::size_t at_ = 0;
};

}  // namespace detail

inline std::vector<unsigned char> encode_checkpoint(const Checkpoint& ck) {
  std::vector<unsigned char> out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  detail::put_le(out, ck.version, 4);
  detail::put_le(out, ck.records.size(), 4);
  for (const auto& r : ck.records) {
    if (r.name.size() > 0xFFFF) throw ContractError("checkpoint record name too long");
    if (r.shape.size() > 0xFF) throw ContractError("checkpoint record rank too large");
    if (r.bytes.size() != numel(r.shape) * r.element_size()) {
      throw ContractError("checkpoint record '" + r.name + "' payload does not match its shape");
    }
    detail::put_le(out, r.name.size(), 2);
    out.insert(out.end(), r.name.begin(), r.name.end());
    out.push_back(static_cast<unsigned char>(r.dtype));
    out.push_back(static_cast<unsigned char>(r.shape.size()));
    for (std::size_t d : r.shape) detail::put_le(out, d, 4);
    out.insert(out.end(), r.bytes.begin(), r.bytes.end());
  }
  return out;
}

inline Checkpoint decode_checkpoint(const std::vector<unsigned char>& bytes, const std::string& path) {
  if (bytes.size() < 4 || !std::equal(kCheckpointMagic.begin(), kCheckpointMagic.end(), bytes.begin())) {
    throw FormatError("'" + path + "': bad checkpoint magic, expected V2M1");
  }
  detail::ByteReader in(bytes, path);
  in.take(4);
  Checkpoint ck;
  ck.version = static_cast<std::uint32_t>(in.le(4));
  if (ck.version != kCheckpointVersion) {
    throw FormatError("'" + path + "': unsupported checkpoint version " + std::to_string(ck.version));
  }
  const std::size_t count = in.le(4);
  for (std::size_t i = 0; i < count; ++i) {
    CheckpointRecord r;
    const std::size_t len = in.le(2);
    const auto name = in.take(len);
    r.name.assign(name.begin(), name.end());
    const auto code = in.le(1);
    if (code > 1) throw FormatError("'" + path + "': record '" + r.name + "' has unknown dtype " + std::to_string(code));
    r.dtype = static_cast<DType>(code);
    const std::size_t rank = in.le(1);
    for (std::size_t k = 0; k < rank; ++k) r.shape.push_back(in.le(4));
    r.bytes = in.take(numel(r.shape) * r.element_size());
    ck.records.push_back(std::move(r));
  }
  if (!in.done()) throw FormatError("'" + path + "': trailing bytes after last record");
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  const auto bytes = encode_checkpoint(ck);
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("cannot write checkpoint '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path + "'");
  const std::vector<unsigned char> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return decode_checkpoint(bytes, path);
}

// ---------------------------------------------------------------------------
// Model checkpoints
// ---------------------------------------------------------------------------

/// [image, patch, in_channels, dim, state, depth, mlp_ratio, classes, scheme,
///  direction bits, pipeline bits, norm_eps]
inline Tensor<double> encode_model_config(const ModelConfig& c) {
  double dirs = 0;
  for (int r : c.rotations) dirs += static_cast<double>(1 << r);
  const double pipes = (c.pipelines.horizontal ? 1.0 : 0.0) + (c.pipelines.vertical ? 2.0 : 0.0);
  return Tensor<double>({12}, {static_cast<double>(c.image), static_cast<double>(c.patch),
                               static_cast<double>(c.in_channels), static_cast<double>(c.dim),
                               static_cast<double>(c.state), static_cast<double>(c.depth),
                               static_cast<double>(c.mlp_ratio), static_cast<double>(c.classes),
                               static_cast<double>(c.scheme), dirs, pipes, c.norm_eps});
}

inline ModelConfig decode_model_config(const Tensor<double>& t) {
  if (t.shape() != Shape{12}) throw FormatError("meta.config has shape " + shape_str(t.shape()) + ", expected [12]");
  auto u = [&](std::size_t i) { return static_cast<std::size_t>(t[i]); };
  ModelConfig c;
  c.image = u(0);
  c.patch = u(1);
  c.in_channels = u(2);
  c.dim = u(3);
  c.state = u(4);
  c.depth = u(5);
  c.mlp_ratio = u(6);
  c.classes = u(7);
  if (u(8) > 2) throw FormatError("meta.config: unknown class-token scheme");
  c.scheme = static_cast<ClassTokenScheme>(u(8));
  c.rotations.clear();
  for (int r = 0; r < 4; ++r) {
    if (u(9) & (std::size_t{1} << r)) c.rotations.push_back(r);
  }
  c.pipelines = {(u(10) & 1) != 0, (u(10) & 2) != 0};
  c.norm_eps = t[11];
  return c;
}

template <std::floating_point T>
Checkpoint make_checkpoint(const ModelConfig& c, const ParamMap<T>& params) {
  Checkpoint ck;
  ck.records.push_back(CheckpointRecord::from_tensor("meta.config", encode_model_config(c)));
  for (const auto& [name, t] : params) ck.records.push_back(CheckpointRecord::from_tensor(name, t));
  return ck;
}

inline ModelConfig checkpoint_model_config(const Checkpoint& ck) {
  const auto* r = ck.find("meta.config");
  if (!r) throw FormatError("checkpoint has no meta.config record");
  return decode_model_config(r->tensor<double>());
}

/// Every non-meta record, converted to T and checked against the configuration.
template <std::floating_point T>
ParamMap<T> checkpoint_params(const Checkpoint& ck, const ModelConfig& c) {
  ParamMap<T> p;
  for (const auto& r : ck.records) {
    if (!r.name.starts_with("meta.")) p[r.name] = r.tensor<T>();
  }
  check_model_shapes(c, p);
  return p;
}

}  // namespace v2m
