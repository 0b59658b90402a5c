#pragma once

// Labeled image sets: the synthetic locality task and IDX files.
//
// Locality task: a bright square blob sits inside one quadrant of a noisy
// grayscale image and the label is that quadrant (0 upper-left, 1 upper-right,
// 2 lower-left, 3 lower-right). A scan that only sees part of the image from
// the class slot cannot tell all quadrants apart, which is what the direction
// ablation measures.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "v2m/tensor.hpp"

namespace v2m {

class BadMagicError : public FormatError {
 public:
  using FormatError::FormatError;
};
class TruncatedError : public FormatError {
 public:
  using FormatError::FormatError;
};
class CountMismatchError : public FormatError {
 public:
  using FormatError::FormatError;
};

template <std::floating_point T>
struct Dataset {
  Tensor<T> images;         // [N, S, S, C], values in [0, 1]
  std::vector<int> labels;  // N entries in [0, classes)
  std::size_t classes = 0;
  /// Label after a horizontal flip of the image; empty means unchanged.
  std::vector<int> hflip_label;

  std::size_t size() const { return labels.size(); }
  std::size_t side() const { return images.dim(1); }
  std::size_t channels() const { return images.dim(3); }

  /// Copies samples `idx` into a new batch, flipping those with flip[i] set.
  Dataset gather(const std::vector<std::size_t>& idx, const std::vector<bool>& flip = {}) const {
    const std::size_t s = side(), c = channels(), per = s * s * c;
    Dataset out{Tensor<T>({idx.size(), s, s, c}), std::vector<int>(idx.size()), classes, hflip_label};
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const T* src = images.ptr() + idx[i] * per;
      T* dst = out.images.ptr() + i * per;
      const bool f = !flip.empty() && flip[i];
      if (!f) {
        std::copy(src, src + per, dst);
      } else {
        for (std::size_t r = 0; r < s; ++r) {
          for (std::size_t q = 0; q < s; ++q) std::copy_n(src + (r * s + (s - 1 - q)) * c, c, dst + (r * s + q) * c);
        }
      }
      const int label = labels[idx[i]];
      out.labels[i] = f && !hflip_label.empty() ? hflip_label[static_cast<std::size_t>(label)] : label;
    }
    return out;
  }

  /// Samples [begin, end).
  Dataset slice(std::size_t begin, std::size_t end) const {
    std::vector<std::size_t> idx(end - begin);
    std::iota(idx.begin(), idx.end(), begin);
    return gather(idx);
  }
};

struct LocalityTaskSpec {
  std::size_t side = 16;
  std::size_t blob = 3;
  double noise_std = 0.25;
  std::uint64_t seed = 0;
  std::size_t train = 1000;
  std::size_t test = 500;

  void validate() const {
    if (side < 2 || side % 2 != 0) throw ConfigError("locality task: image side must be even and >= 2");
    if (blob == 0 || blob > side / 2) {
      throw ConfigError("locality task: blob side " + std::to_string(blob) + " does not fit in a " +
                        std::to_string(side / 2) + "-pixel quadrant");
    }
    if (!(noise_std >= 0.0)) throw ConfigError("locality task: noise std must be non-negative");
  }
};

/// `count` samples; labels cycle 0..3 before a seeded shuffle, so every class
/// appears floor(count/4) or ceil(count/4) times.
template <std::floating_point T>
Dataset<T> generate_locality_dataset(const LocalityTaskSpec& spec, std::size_t count, std::uint64_t stream) {
  spec.validate();
  Rng rng = Rng(spec.seed).fork(stream);
  const std::size_t s = spec.side, half = s / 2;
  std::vector<int> labels(count);
  for (std::size_t i = 0; i < count; ++i) labels[i] = static_cast<int>(i % 4);
  rng.shuffle(labels);
  Dataset<T> d{Tensor<T>({count, s, s, 1}), labels, 4, {1, 0, 3, 2}};
  for (std::size_t n = 0; n < count; ++n) {
    T* img = d.images.ptr() + n * s * s;
    for (std::size_t i = 0; i < s * s; ++i) {
      const double v = spec.noise_std > 0 ? spec.noise_std * rng.normal() : 0.0;
      img[i] = static_cast<T>(std::clamp(v, 0.0, 1.0));
    }
    const auto q = static_cast<std::size_t>(labels[n]);
    const std::size_t r0 = (q / 2) * half + rng.below(half - spec.blob + 1);
    const std::size_t c0 = (q % 2) * half + rng.below(half - spec.blob + 1);
    for (std::size_t r = 0; r < spec.blob; ++r) {
      for (std::size_t c = 0; c < spec.blob; ++c) img[(r0 + r) * s + c0 + c] = T(1);
    }
  }
  return d;
}

// ---------------------------------------------------------------------------
// IDX files (big-endian header, unsigned byte payload)
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

namespace detail {

inline std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& b, std::size_t at, const std::string& path) {
  if (b.size() < at + 4) throw TruncatedError("'" + path + "': truncated header");
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) |
         std::uint32_t{b[at + 3]};
}

inline void put_be32(std::vector<unsigned char>& b, std::uint32_t v) {
  for (int shift = 24; shift >= 0; shift -= 8) b.push_back(static_cast<unsigned char>(v >> shift));
}

inline void write_file(const std::string& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("cannot write '" + path + "'");
}

}  // namespace detail

/// Reads an image file (magic 0x803, dims N, rows, cols) and a label file
/// (magic 0x801, dim N). Pixels are scaled by 1/255.
template <std::floating_point T>
Dataset<T> load_idx(const std::string& images_path, const std::string& labels_path) {
  const auto img = detail::read_file(images_path);
  const auto lab = detail::read_file(labels_path);
  if (detail::read_be32(img, 0, images_path) != kIdxImagesMagic) {
    throw BadMagicError("'" + images_path + "': bad magic, expected 0x00000803");
  }
  if (detail::read_be32(lab, 0, labels_path) != kIdxLabelsMagic) {
    throw BadMagicError("'" + labels_path + "': bad magic, expected 0x00000801");
  }
  const std::size_t n = detail::read_be32(img, 4, images_path);
  const std::size_t rows = detail::read_be32(img, 8, images_path);
  const std::size_t cols = detail::read_be32(img, 12, images_path);
  const std::size_t n_labels = detail::read_be32(lab, 4, labels_path);
  if (img.size() < 16 + n * rows * cols) throw TruncatedError("'" + images_path + "': truncated pixel payload");
  if (lab.size() < 8 + n_labels) throw TruncatedError("'" + labels_path + "': truncated label payload");
  if (n != n_labels) {
    throw CountMismatchError("'" + images_path + "' holds " + std::to_string(n) + " images but '" + labels_path +
                             "' holds " + std::to_string(n_labels) + " labels");
  }
  Dataset<T> d{Tensor<T>({n, rows, cols, 1}), std::vector<int>(n), 0, {}};
  for (std::size_t i = 0; i < n * rows * cols; ++i) d.images[i] = static_cast<T>(img[16 + i] / 255.0);
  int max_label = -1;
  for (std::size_t i = 0; i < n; ++i) {
    d.labels[i] = lab[8 + i];
    max_label = std::max(max_label, d.labels[i]);
  }
  d.classes = static_cast<std::size_t>(max_label + 1);
  return d;
}

/// Writes raw IDX files; pixels and labels are given as bytes.
inline void write_idx(const std::string& images_path, const std::string& labels_path, std::size_t rows,
                      std::size_t cols, const std::vector<unsigned char>& pixels,
                      const std::vector<unsigned char>& labels) {
  if (pixels.size() != labels.size() * rows * cols) throw DimensionError("write_idx: pixel count mismatch");
  std::vector<unsigned char> img, lab;
  detail::put_be32(img, kIdxImagesMagic);
  detail::put_be32(img, static_cast<std::uint32_t>(labels.size()));
  detail::put_be32(img, static_cast<std::uint32_t>(rows));
  detail::put_be32(img, static_cast<std::uint32_t>(cols));
  img.insert(img.end(), pixels.begin(), pixels.end());
  detail::put_be32(lab, kIdxLabelsMagic);
  detail::put_be32(lab, static_cast<std::uint32_t>(labels.size()));
  lab.insert(lab.end(), labels.begin(), labels.end());
  detail::write_file(images_path, img);
  detail::write_file(labels_path, lab);
}

}  // namespace v2m
