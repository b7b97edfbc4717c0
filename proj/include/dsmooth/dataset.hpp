#pragma once

// Labelled image sets and the DSK1 container:
//   "DSK1", u16 version=1, u32 count, u32 C, u32 H, u32 W, u16 num_classes,
//   count*C*H*W f32 pixels, count u16 labels (all little-endian).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dsmooth/binary_io.hpp"
#include "dsmooth/errors.hpp"
#include "dsmooth/rng.hpp"
#include "dsmooth/tensor.hpp"

namespace dsmooth::data {

class Dataset {
 public:
  Dataset(Shape image_shape, std::size_t num_classes) : image_shape_(std::move(image_shape)), classes_(num_classes) {
    if (image_shape_.size() != 3) throw ShapeError("dataset images must be [C,H,W], got " + shape_string(image_shape_));
    (void)shape_size(image_shape_);
    if (classes_ < 1 || classes_ > 65535) throw ArgumentError("dataset class count must be in [1, 65535]");
  }

  void add(std::span<const double> pixels, int label) {
    if (pixels.size() != image_size()) throw ShapeError("image has " + std::to_string(pixels.size()) + " values");
    if (label < 0 || static_cast<std::size_t>(label) >= classes_) {
      throw ArgumentError("label " + std::to_string(label) + " outside [0," + std::to_string(classes_) + ")");
    }
    for (double v : pixels) {
      if (!(v >= -1e-9 && v <= 1.0 + 1e-9)) throw RangeError("pixel value " + std::to_string(v) + " outside [0,1]");
    }
    pixels_.insert(pixels_.end(), pixels.begin(), pixels.end());
    labels_.push_back(label);
  }

  [[nodiscard]] std::size_t size() const noexcept { return labels_.size(); }
  [[nodiscard]] bool empty() const noexcept { return labels_.empty(); }
  [[nodiscard]] const Shape& image_shape() const noexcept { return image_shape_; }
  [[nodiscard]] std::size_t image_size() const { return shape_size(image_shape_); }
  [[nodiscard]] std::size_t num_classes() const noexcept { return classes_; }
  [[nodiscard]] const std::vector<int>& labels() const noexcept { return labels_; }
  [[nodiscard]] int label(std::size_t i) const { return labels_.at(i); }

  [[nodiscard]] std::span<const double> pixels(std::size_t i) const {
    if (i >= size()) throw ArgumentError("image index " + std::to_string(i) + " out of range");
    return std::span<const double>(pixels_).subspan(i * image_size(), image_size());
  }

  [[nodiscard]] Tensor image(std::size_t i) const {
    const auto p = pixels(i);
    return Tensor(image_shape_, std::vector<double>(p.begin(), p.end()));
  }

  /// [indices.size(), C, H, W] batch in the given order.
  [[nodiscard]] Tensor batch(std::span<const std::size_t> indices) const {
    if (indices.empty()) throw ArgumentError("empty batch");
    Tensor out(batched(indices.size(), image_shape_));
    for (std::size_t k = 0; k < indices.size(); ++k) {
      const auto p = pixels(indices[k]);
      std::copy(p.begin(), p.end(), out.row(k).begin());
    }
    return out;
  }

  [[nodiscard]] Dataset subset(std::size_t first, std::size_t count) const {
    if (first + count > size()) throw ArgumentError("subset exceeds dataset");
    Dataset out(image_shape_, classes_);
    for (std::size_t i = first; i < first + count; ++i) out.add(pixels(i), labels_[i]);
    return out;
  }

  friend bool operator==(const Dataset&, const Dataset&) = default;

 private:
  Shape image_shape_;
  std::size_t classes_;
  std::vector<double> pixels_;
  std::vector<int> labels_;
};

inline constexpr std::uint16_t kDatasetVersion = 1;

inline std::vector<char> serialize_dataset(const Dataset& ds) {
  io::ByteWriter w;
  w.put_bytes("DSK1");
  w.put<std::uint16_t>(kDatasetVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ds.size()));
  for (auto e : ds.image_shape()) w.put<std::uint32_t>(static_cast<std::uint32_t>(e));
  w.put<std::uint16_t>(static_cast<std::uint16_t>(ds.num_classes()));
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (double v : ds.pixels(i)) w.put<float>(static_cast<float>(v));
  }
  for (int l : ds.labels()) w.put<std::uint16_t>(static_cast<std::uint16_t>(l));
  return w.bytes();
}

inline Dataset deserialize_dataset(const std::vector<char>& bytes) {
  io::ByteReader r(bytes, "dataset");
  if (r.get_bytes(4) != "DSK1") throw FormatError("dataset: bad magic");
  if (const auto v = r.get<std::uint16_t>(); v != kDatasetVersion) {
    throw FormatError("dataset: unsupported version " + std::to_string(v));
  }
  const auto count = r.get<std::uint32_t>();
  Shape shape(3);
  for (auto& e : shape) {
    e = r.get<std::uint32_t>();
    if (e == 0) throw FormatError("dataset: zero image extent");
  }
  const auto classes = r.get<std::uint16_t>();
  if (classes == 0) throw FormatError("dataset: zero classes");
  const std::size_t d = shape_size(shape);
  if (r.remaining() != static_cast<std::size_t>(count) * (d * 4 + 2)) {
    throw FormatError("dataset: payload length does not match " + std::to_string(count) + " images of " +
                      shape_string(shape));
  }
  std::vector<float> pixels;
  std::vector<std::uint16_t> labels;
  r.get_array(static_cast<std::size_t>(count) * d, pixels);
  r.get_array(count, labels);
  Dataset ds(shape, classes);
  std::vector<double> image(d);
  for (std::size_t i = 0; i < count; ++i) {
    const auto label = labels[i];
    if (label >= classes) {
      throw FormatError("dataset: label " + std::to_string(label) + " >= class count " + std::to_string(classes));
    }
    for (std::size_t k = 0; k < d; ++k) image[k] = pixels[i * d + k];
    ds.add(image, label);
  }
  return ds;
}

inline void save_dataset(const Dataset& ds, const std::string& path) {
  io::write_file(path, serialize_dataset(ds));
}

inline Dataset load_dataset(const std::string& path) { return deserialize_dataset(io::read_file(path)); }

struct SyntheticSpec {
  Shape image_shape{1, 8, 8};
  std::size_t num_classes = 4;
  std::size_t per_class = 500;
};

namespace detail {

// Class templates on an H x W canvas, drawn at offset (dy, dx).
inline bool pattern_pixel(std::size_t cls, long y, long x, long h, long w) {
  const long cy = h / 2, cx = w / 2;
  switch (cls % 6) {
    case 0: return (y == cy - 1 || y == cy) && x >= 1 && x < w - 1;             // horizontal bar
    case 1: return (x == cx - 1 || x == cx) && y >= 1 && y < h - 1;             // vertical bar
    case 2: {                                                                   // ring
      const bool in = y >= 1 && y < h - 1 && x >= 1 && x < w - 1;
      return in && (y == 1 || y == h - 2 || x == 1 || x == w - 2);
    }
    case 3: return x >= 1 && x < w - 1 && (y == x || y + x == h - 1);           // X
    case 4: return y >= 1 && y < h - 1 && x >= 1 && x < w - 1 && ((y + x) % 2 == 0) && std::abs(y - cy) < 3;
    default: return y >= cy && x >= cx && y < h - 1 && x < w - 1;               // block
  }
}

}  // namespace detail

/// Class-conditional geometric patterns (bars, ring, X, ...) with a random
/// one-pixel shift, random contrast and background, and mild pixel noise.
/// Examples are interleaved by class: index i has label i % num_classes.
/// Pixel values are rounded to f32 so the set survives a DSK1 round trip
/// unchanged.
inline Dataset make_synthetic_dataset(const SyntheticSpec& spec, std::uint64_t seed) {
  if (spec.image_shape.size() != 3) throw ArgumentError("synthetic images must be [C,H,W]");
  if (spec.num_classes < 2 || spec.num_classes > 6) throw ArgumentError("synthetic data supports 2 to 6 classes");
  const long c = static_cast<long>(spec.image_shape[0]);
  const long h = static_cast<long>(spec.image_shape[1]);
  const long w = static_cast<long>(spec.image_shape[2]);
  if (h < 6 || w < 6) throw ArgumentError("synthetic images need H, W >= 6");
  Dataset ds(spec.image_shape, spec.num_classes);
  rng::Rng gen(seed, 0xDA7A);
  std::vector<double> image(shape_size(spec.image_shape));
  for (std::size_t k = 0; k < spec.per_class * spec.num_classes; ++k) {
    const std::size_t cls = k % spec.num_classes;
    const long dy = static_cast<long>(gen.below(3)) - 1;
    const long dx = static_cast<long>(gen.below(3)) - 1;
    const double background = gen.uniform(0.1, 0.3);
    const double contrast = gen.uniform(0.45, 0.65);
    for (long ch = 0; ch < c; ++ch) {
      for (long y = 0; y < h; ++y) {
        for (long x = 0; x < w; ++x) {
          double v = background + 0.03 * gen.normal();
          if (detail::pattern_pixel(cls, y - dy, x - dx, h, w)) v += contrast;
          image[static_cast<std::size_t>((ch * h + y) * w + x)] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
      }
    }
    ds.add(image, static_cast<int>(cls));
  }
  return ds;
}

}  // namespace dsmooth::data
