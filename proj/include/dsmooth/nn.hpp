#pragma once

// Small sequential networks with hand-written reverse-mode gradients: exactly
// the layers needed for DnCNN-style residual denoisers and compact conv
// classifiers. Tensors are batched NCHW (conv) or NF (linear).

#include <cmath>
#include <cstdint>
#include <cstring>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "dsmooth/errors.hpp"
#include "dsmooth/rng.hpp"
#include "dsmooth/tensor.hpp"

namespace dsmooth::nn {

// -- layer descriptors -------------------------------------------------------

/// Square-kernel, stride-1 convolution with symmetric zero padding.
struct Conv2D {
  std::size_t kernel = 3;
  std::size_t in = 1;
  std::size_t out = 1;
  std::size_t pad = 1;
  friend bool operator==(const Conv2D&, const Conv2D&) = default;
};
struct ReLU {
  friend bool operator==(const ReLU&, const ReLU&) = default;
};
struct Linear {
  std::size_t in = 1;
  std::size_t out = 1;
  friend bool operator==(const Linear&, const Linear&) = default;
};
/// [N, C, H, W] -> [N, C] by spatial mean.
struct GlobalAvgPool {
  friend bool operator==(const GlobalAvgPool&, const GlobalAvgPool&) = default;
};

using Layer = std::variant<Conv2D, ReLU, Linear, GlobalAvgPool>;

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

/// Network layout: the per-example input shape, the layer chain, and whether
/// the network is residual (output = input - chain(input)).
struct Architecture {
  Shape input{1};
  std::vector<Layer> layers;
  bool residual = false;

  friend bool operator==(const Architecture&, const Architecture&) = default;

  /// Per-example output shape; throws ShapeError if the layers do not chain.
  [[nodiscard]] Shape output_shape() const {
    Shape s = input;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      s = std::visit(Overloaded{
                         [&](const Conv2D& c) -> Shape {
                           if (s.size() != 3 || s[0] != c.in) {
                             throw ShapeError("layer " + std::to_string(i) + ": conv2d expects [" +
                                              std::to_string(c.in) + ",H,W], got " + shape_string(s));
                           }
                           if (s[1] + 2 * c.pad < c.kernel || s[2] + 2 * c.pad < c.kernel) {
                             throw ShapeError("layer " + std::to_string(i) + ": kernel larger than padded input");
                           }
                           return {c.out, s[1] + 2 * c.pad - c.kernel + 1, s[2] + 2 * c.pad - c.kernel + 1};
                         },
                         [&](const ReLU&) -> Shape { return s; },
                         [&](const Linear& l) -> Shape {
                           if (s.size() != 1 || s[0] != l.in) {
                             throw ShapeError("layer " + std::to_string(i) + ": linear expects [" +
                                              std::to_string(l.in) + "], got " + shape_string(s));
                           }
                           return {l.out};
                         },
                         [&](const GlobalAvgPool&) -> Shape {
                           if (s.size() != 3) {
                             throw ShapeError("layer " + std::to_string(i) + ": pool expects [C,H,W], got " +
                                              shape_string(s));
                           }
                           return {s[0]};
                         },
                     },
                     layers[i]);
    }
    if (residual && s != input) {
      throw ShapeError("residual network must map " + shape_string(input) + " to itself, got " +
                       shape_string(s));
    }
    return s;
  }

  /// Canonical text form, one item per line. Stored verbatim in model files.
  [[nodiscard]] std::string to_text() const {
    std::ostringstream os;
    os << "input";
    for (auto e : input) os << ' ' << e;
    os << "\nresidual " << (residual ? 1 : 0) << '\n';
    for (const auto& layer : layers) {
      std::visit(Overloaded{
                     [&](const Conv2D& c) {
                       os << "conv2d " << c.kernel << ' ' << c.in << ' ' << c.out << ' ' << c.pad << '\n';
                     },
                     [&](const ReLU&) { os << "relu\n"; },
                     [&](const Linear& l) { os << "linear " << l.in << ' ' << l.out << '\n'; },
                     [&](const GlobalAvgPool&) { os << "gap\n"; },
                 },
                 layer);
    }
    return os.str();
  }

  static Architecture parse(std::string_view text) {
    Architecture arch;
    std::istringstream is{std::string(text)};
    std::string line;
    bool saw_input = false;
    bool saw_residual = false;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      std::istringstream ls(line);
      std::string word;
      ls >> word;
      auto read = [&](std::size_t& v) {
        if (!(ls >> v)) throw FormatError("architecture: bad number in line '" + line + "'");
      };
      if (word == "input") {
        arch.input.clear();
        std::size_t e = 0;
        while (ls >> e) arch.input.push_back(e);
        if (arch.input.empty()) throw FormatError("architecture: empty input shape");
        saw_input = true;
      } else if (word == "residual") {
        std::size_t r = 0;
        read(r);
        arch.residual = r != 0;
        saw_residual = true;
      } else if (word == "conv2d") {
        Conv2D c;
        read(c.kernel);
        read(c.in);
        read(c.out);
        read(c.pad);
        arch.layers.emplace_back(c);
      } else if (word == "relu") {
        arch.layers.emplace_back(ReLU{});
      } else if (word == "linear") {
        Linear l;
        read(l.in);
        read(l.out);
        arch.layers.emplace_back(l);
      } else if (word == "gap") {
        arch.layers.emplace_back(GlobalAvgPool{});
      } else {
        throw FormatError("architecture: unknown item '" + word + "'");
      }
    }
    if (!saw_input || !saw_residual) throw FormatError("architecture: missing input/residual header");
    for (auto e : arch.input) {
      if (e == 0) throw FormatError("architecture: zero extent in input shape");
    }
    try {
      (void)arch.output_shape();
    } catch (const ShapeError& e) {
      throw FormatError(std::string("architecture: ") + e.what());
    }
    return arch;
  }
};

/// DnCNN-style residual denoiser: conv-relu repeated, final conv predicts the
/// noise, output = input - predicted noise. Same padding throughout.
inline Architecture dncnn_denoiser(const Shape& image, std::size_t width = 16, std::size_t depth = 4) {
  if (image.size() != 3) throw ShapeError("denoiser input must be [C,H,W]");
  if (depth < 2) throw ArgumentError("denoiser depth must be >= 2");
  Architecture arch;
  arch.input = image;
  arch.residual = true;
  const std::size_t channels = image[0];
  arch.layers.emplace_back(Conv2D{3, channels, width, 1});
  arch.layers.emplace_back(ReLU{});
  for (std::size_t i = 0; i + 2 < depth; ++i) {
    arch.layers.emplace_back(Conv2D{3, width, width, 1});
    arch.layers.emplace_back(ReLU{});
  }
  arch.layers.emplace_back(Conv2D{3, width, channels, 1});
  return arch;
}

/// Conv(3x3,w1)-ReLU-Conv(3x3,w2)-ReLU-GlobalAvgPool-Linear(classes).
inline Architecture conv_classifier(const Shape& image, std::size_t classes, std::size_t width1 = 16,
                                    std::size_t width2 = 32) {
  if (image.size() != 3) throw ShapeError("classifier input must be [C,H,W]");
  Architecture arch;
  arch.input = image;
  arch.layers = {Conv2D{3, image[0], width1, 1}, ReLU{}, Conv2D{3, width1, width2, 1}, ReLU{},
                 GlobalAvgPool{}, Linear{width2, classes}};
  return arch;
}

struct Parameter {
  std::string name;
  Tensor value;
};

class Model;

/// Layer inputs retained by a recorded forward pass, consumed by backward.
class Tape {
 public:
  [[nodiscard]] bool recorded() const noexcept { return owner_ != nullptr; }
  void clear() noexcept {
    owner_ = nullptr;
    inputs_.clear();
  }

 private:
  friend class Model;
  const Model* owner_ = nullptr;
  std::size_t batch_ = 0;
  std::vector<Tensor> inputs_;  // inputs_[i] feeds layer i
};

namespace detail {

struct ConvGeometry {
  std::size_t n, c, h, w, k, pad, ho, wo, cols;
  [[nodiscard]] std::size_t pixels() const noexcept { return ho * wo; }
};

inline ConvGeometry conv_geometry(const Conv2D& conv, const Tensor& x) {
  const auto& s = x.shape();
  ConvGeometry g{s[0], s[1], s[2], s[3], conv.kernel, conv.pad, 0, 0, 0};
  g.ho = g.h + 2 * g.pad - g.k + 1;
  g.wo = g.w + 2 * g.pad - g.k + 1;
  g.cols = g.c * g.k * g.k;
  return g;
}

// Valid output columns [lo, hi) for kernel offset kx: 0 <= ox + kx - pad < w.
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t offset, std::size_t pad, std::size_t in,
                                                       std::size_t out) {
  const std::size_t lo = pad > offset ? pad - offset : 0;
  const std::size_t hi = std::min(out, in + pad > offset ? in + pad - offset : 0);
  return {lo, std::max(lo, hi)};
}

// col[((ch*k + ky)*k + kx) * pixels + oy*wo + ox] = x[ch, oy+ky-pad, ox+kx-pad], 0 outside.
inline void im2col(const ConvGeometry& g, const double* x, std::vector<double>& col) {
  const std::size_t pixels = g.pixels();
  col.assign(g.cols * pixels, 0.0);
  for (std::size_t ch = 0; ch < g.c; ++ch) {
    const double* plane = x + ch * g.h * g.w;
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      const auto [ylo, yhi] = valid_range(ky, g.pad, g.h, g.ho);
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const auto [xlo, xhi] = valid_range(kx, g.pad, g.w, g.wo);
        double* row = col.data() + ((ch * g.k + ky) * g.k + kx) * pixels;
        for (std::size_t oy = ylo; oy < yhi; ++oy) {
          const double* src = plane + (oy + ky - g.pad) * g.w + (xlo + kx - g.pad);
          double* dst = row + oy * g.wo + xlo;
          for (std::size_t i = 0; i < xhi - xlo; ++i) dst[i] = src[i];
        }
      }
    }
  }
}

inline void col2im_add(const ConvGeometry& g, const std::vector<double>& col, double* x) {
  const std::size_t pixels = g.pixels();
  for (std::size_t ch = 0; ch < g.c; ++ch) {
    double* plane = x + ch * g.h * g.w;
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      const auto [ylo, yhi] = valid_range(ky, g.pad, g.h, g.ho);
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const auto [xlo, xhi] = valid_range(kx, g.pad, g.w, g.wo);
        const double* row = col.data() + ((ch * g.k + ky) * g.k + kx) * pixels;
        for (std::size_t oy = ylo; oy < yhi; ++oy) {
          double* dst = plane + (oy + ky - g.pad) * g.w + (xlo + kx - g.pad);
          const double* src = row + oy * g.wo + xlo;
          for (std::size_t i = 0; i < xhi - xlo; ++i) dst[i] += src[i];
        }
      }
    }
  }
}

// y[o, p0:p0+Block] = bias[o] + sum_kk w[o, kk] * col[kk, p0:p0+Block]
template <std::size_t Block>
inline void conv_tile(const double* col, const double* w, double bias, std::size_t cols, std::size_t pixels,
                      std::size_t p0, double* y) {
  double acc[Block];
  for (std::size_t i = 0; i < Block; ++i) acc[i] = bias;
  for (std::size_t kk = 0; kk < cols; ++kk) {
    const double wv = w[kk];
    const double* c = col + kk * pixels + p0;
    for (std::size_t i = 0; i < Block; ++i) acc[i] += wv * c[i];
  }
  for (std::size_t i = 0; i < Block; ++i) y[p0 + i] = acc[i];
}

inline Tensor conv_forward(const Conv2D& conv, const Tensor& x, const Tensor& weight, const Tensor& bias) {
  const auto g = conv_geometry(conv, x);
  const std::size_t pixels = g.pixels();
  Tensor y({g.n, conv.out, g.ho, g.wo});
  std::vector<double> col;
  for (std::size_t n = 0; n < g.n; ++n) {
    im2col(g, x.data().data() + n * g.c * g.h * g.w, col);
    for (std::size_t o = 0; o < conv.out; ++o) {
      const double* w = weight.data().data() + o * g.cols;
      double* yo = y.data().data() + (n * conv.out + o) * pixels;
      std::size_t p = 0;
      for (; p + 32 <= pixels; p += 32) conv_tile<32>(col.data(), w, bias[o], g.cols, pixels, p, yo);
      for (; p + 8 <= pixels; p += 8) conv_tile<8>(col.data(), w, bias[o], g.cols, pixels, p, yo);
      for (; p < pixels; ++p) conv_tile<1>(col.data(), w, bias[o], g.cols, pixels, p, yo);
    }
  }
  return y;
}

// Returns dL/dx; adds dL/dW and dL/db into the given buffers when non-null.
inline Tensor conv_backward(const Conv2D& conv, const Tensor& x, const Tensor& weight, const Tensor& gy,
                            Tensor* gweight, Tensor* gbias) {
  const auto g = conv_geometry(conv, x);
  const std::size_t out = conv.out;
  const std::size_t pixels = g.pixels();
  Tensor gx(x.shape());
  std::vector<double> col;
  std::vector<double> gcol;
  for (std::size_t n = 0; n < g.n; ++n) {
    const double* gyn = gy.data().data() + n * out * pixels;
    if (gweight != nullptr) {
      im2col(g, x.data().data() + n * g.c * g.h * g.w, col);
      for (std::size_t o = 0; o < out; ++o) {
        const double* go = gyn + o * pixels;
        double* gw = gweight->data().data() + o * g.cols;
        double bsum = 0.0;
        for (std::size_t p = 0; p < pixels; ++p) bsum += go[p];
        (*gbias)[o] += bsum;
        for (std::size_t kk = 0; kk < g.cols; ++kk) {
          const double* c = col.data() + kk * pixels;
          double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
          std::size_t p = 0;
          for (; p + 4 <= pixels; p += 4) {
            s0 += go[p] * c[p];
            s1 += go[p + 1] * c[p + 1];
            s2 += go[p + 2] * c[p + 2];
            s3 += go[p + 3] * c[p + 3];
          }
          for (; p < pixels; ++p) s0 += go[p] * c[p];
          gw[kk] += (s0 + s1) + (s2 + s3);
        }
      }
    }
    gcol.assign(g.cols * pixels, 0.0);
    for (std::size_t o = 0; o < out; ++o) {
      const double* go = gyn + o * pixels;
      const double* w = weight.data().data() + o * g.cols;
      for (std::size_t kk = 0; kk < g.cols; ++kk) {
        const double wv = w[kk];
        double* gc = gcol.data() + kk * pixels;
        for (std::size_t p = 0; p < pixels; ++p) gc[p] += wv * go[p];
      }
    }
    col2im_add(g, gcol, gx.data().data() + n * g.c * g.h * g.w);
  }
  return gx;
}

inline Tensor linear_forward(const Linear& lin, const Tensor& x, const Tensor& weight, const Tensor& bias) {
  const std::size_t batch = x.extent(0);
  Tensor y({batch, lin.out});
  for (std::size_t n = 0; n < batch; ++n) {
    const auto xn = x.row(n);
    for (std::size_t o = 0; o < lin.out; ++o) {
      double acc = bias[o];
      for (std::size_t i = 0; i < lin.in; ++i) acc += weight[o * lin.in + i] * xn[i];
      y[n * lin.out + o] = acc;
    }
  }
  return y;
}

inline Tensor linear_backward(const Linear& lin, const Tensor& x, const Tensor& weight, const Tensor& gy,
                              Tensor* gweight, Tensor* gbias) {
  const std::size_t batch = x.extent(0);
  Tensor gx(x.shape());
  for (std::size_t n = 0; n < batch; ++n) {
    const auto xn = x.row(n);
    auto gxn = gx.row(n);
    for (std::size_t o = 0; o < lin.out; ++o) {
      const double go = gy[n * lin.out + o];
      if (go == 0.0) continue;
      for (std::size_t i = 0; i < lin.in; ++i) gxn[i] += go * weight[o * lin.in + i];
      if (gweight != nullptr) {
        for (std::size_t i = 0; i < lin.in; ++i) (*gweight)[o * lin.in + i] += go * xn[i];
        (*gbias)[o] += go;
      }
    }
  }
  return gx;
}

inline Tensor relu_forward(const Tensor& x) {
  Tensor y = x;
  for (auto& v : y.data()) v = v > 0.0 ? v : 0.0;
  return y;
}

inline Tensor relu_backward(const Tensor& x, const Tensor& gy) {
  Tensor gx = gy;
  for (std::size_t i = 0; i < gx.size(); ++i) {
    if (!(x[i] > 0.0)) gx[i] = 0.0;
  }
  return gx;
}

inline Tensor pool_forward(const Tensor& x) {
  const std::size_t n = x.extent(0), c = x.extent(1), hw = x.extent(2) * x.extent(3);
  Tensor y({n, c});
  for (std::size_t i = 0; i < n * c; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < hw; ++j) acc += x[i * hw + j];
    y[i] = acc / static_cast<double>(hw);
  }
  return y;
}

inline Tensor pool_backward(const Tensor& x, const Tensor& gy) {
  const std::size_t n = x.extent(0), c = x.extent(1), hw = x.extent(2) * x.extent(3);
  Tensor gx(x.shape());
  for (std::size_t i = 0; i < n * c; ++i) {
    const double g = gy[i] / static_cast<double>(hw);
    for (std::size_t j = 0; j < hw; ++j) gx[i * hw + j] = g;
  }
  return gx;
}

inline std::uint64_t fnv1a(std::uint64_t h, const void* bytes, std::size_t len) noexcept {
  const auto* p = static_cast<const unsigned char*>(bytes);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001B3ull;
  }
  return h;
}

}  // namespace detail

/// A sequential network with its parameters and accumulated gradients.
///
/// forward() is const and keeps no state, so a frozen model can be shared by
/// concurrent readers. Training records a Tape during forward and hands it
/// back to backward().
class Model {
 public:
  /// Zero-initialised parameters.
  explicit Model(Architecture arch) : arch_(std::move(arch)) {
    output_ = arch_.output_shape();
    for (std::size_t i = 0; i < arch_.layers.size(); ++i) {
      const auto prefix = std::to_string(i) + ".";
      if (const auto* c = std::get_if<Conv2D>(&arch_.layers[i])) {
        add_param(prefix + "weight", {c->out, c->in, c->kernel, c->kernel});
        add_param(prefix + "bias", {c->out});
      } else if (const auto* l = std::get_if<Linear>(&arch_.layers[i])) {
        add_param(prefix + "weight", {l->out, l->in});
        add_param(prefix + "bias", {l->out});
      }
    }
  }

  /// Kaiming-uniform weights (bound sqrt(6 / fan_in)), zero biases.
  Model(Architecture arch, std::uint64_t seed) : Model(std::move(arch)) {
    rng::Rng gen(seed, 0x1417);
    for (auto& p : params_) {
      if (p.name.ends_with(".bias")) continue;
      const auto& s = p.value.shape();
      const std::size_t fan_in = p.value.size() / s[0];
      const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
      for (auto& v : p.value.data()) v = gen.uniform(-bound, bound);
    }
  }

  [[nodiscard]] const Architecture& architecture() const noexcept { return arch_; }
  [[nodiscard]] const Shape& input_shape() const noexcept { return arch_.input; }
  [[nodiscard]] const Shape& output_shape() const noexcept { return output_; }

  [[nodiscard]] std::vector<Parameter>& params() noexcept { return params_; }
  [[nodiscard]] const std::vector<Parameter>& params() const noexcept { return params_; }
  [[nodiscard]] std::vector<Parameter>& grads() noexcept { return grads_; }
  [[nodiscard]] const std::vector<Parameter>& grads() const noexcept { return grads_; }

  Tensor& param(std::string_view name) {
    for (auto& p : params_) {
      if (p.name == name) return p.value;
    }
    throw ArgumentError("no parameter named '" + std::string(name) + "'");
  }

  void zero_grad() noexcept {
    for (auto& g : grads_) g.value.fill(0.0);
  }

  [[nodiscard]] Tensor forward(const Tensor& batch) const { return run_forward(batch, nullptr); }

  /// Forward pass that records every layer input into `tape`.
  Tensor forward(const Tensor& batch, Tape& tape) const {
    tape.clear();
    Tensor out = run_forward(batch, &tape.inputs_);
    tape.owner_ = this;
    tape.batch_ = batch.extent(0);
    return out;
  }

  /// Accumulates dL/dparams into grads() and returns dL/dinput.
  Tensor backward(const Tape& tape, const Tensor& grad_out) { return run_backward(tape, grad_out, &grads_); }

  /// dL/dinput only; parameters and their gradients are left untouched.
  [[nodiscard]] Tensor input_gradient(const Tape& tape, const Tensor& grad_out) const {
    return run_backward(tape, grad_out, nullptr);
  }

  /// FNV-1a digest of every parameter's name and raw bits.
  [[nodiscard]] std::uint64_t hash() const noexcept {
    std::uint64_t h = 0xCBF29CE484222325ull;
    for (const auto& p : params_) {
      h = detail::fnv1a(h, p.name.data(), p.name.size());
      h = detail::fnv1a(h, p.value.data().data(), p.value.size() * sizeof(double));
    }
    return h;
  }

 private:
  void add_param(std::string name, Shape shape) {
    params_.push_back({name, Tensor(shape)});
    grads_.push_back({std::move(name), Tensor(std::move(shape))});
  }

  // Index of layer `layer`'s weight in params_ (its bias follows).
  [[nodiscard]] std::size_t first_param(std::size_t layer) const {
    std::size_t idx = 0;
    for (std::size_t i = 0; i < layer; ++i) {
      if (std::holds_alternative<Conv2D>(arch_.layers[i]) || std::holds_alternative<Linear>(arch_.layers[i])) {
        idx += 2;
      }
    }
    return idx;
  }

  Tensor run_forward(const Tensor& batch, std::vector<Tensor>* record) const {
    if (batch.rank() != arch_.input.size() + 1 || example_shape(batch) != arch_.input) {
      throw ShapeError("model expects batches of " + shape_string(arch_.input) + ", got " +
                       shape_string(batch.shape()));
    }
    Tensor x = batch;
    std::size_t p = 0;
    for (const auto& layer : arch_.layers) {
      if (record != nullptr) record->push_back(x);
      x = std::visit(Overloaded{
                         [&](const Conv2D& c) {
                           auto y = detail::conv_forward(c, x, params_[p].value, params_[p + 1].value);
                           p += 2;
                           return y;
                         },
                         [&](const ReLU&) { return detail::relu_forward(x); },
                         [&](const Linear& l) {
                           auto y = detail::linear_forward(l, x, params_[p].value, params_[p + 1].value);
                           p += 2;
                           return y;
                         },
                         [&](const GlobalAvgPool&) { return detail::pool_forward(x); },
                     },
                     layer);
    }
    if (arch_.residual) {
      Tensor y = batch;
      for (std::size_t i = 0; i < y.size(); ++i) y[i] -= x[i];
      x = std::move(y);
    }
    return x;
  }

  Tensor run_backward(const Tape& tape, const Tensor& grad_out, std::vector<Parameter>* grads) const {
    if (!tape.recorded() || tape.owner_ != this || tape.inputs_.size() != arch_.layers.size()) {
      throw StateError("backward called without a recorded forward pass on this model");
    }
    const Shape expected = batched(tape.batch_, output_);
    if (grad_out.shape() != expected) {
      throw ShapeError("output gradient shape " + shape_string(grad_out.shape()) + " != " +
                       shape_string(expected));
    }
    Tensor g = grad_out;
    if (arch_.residual) {
      for (auto& v : g.data()) v = -v;
    }
    std::size_t p = first_param(arch_.layers.size());
    for (std::size_t i = arch_.layers.size(); i-- > 0;) {
      const Tensor& x = tape.inputs_[i];
      g = std::visit(Overloaded{
                         [&](const Conv2D& c) {
                           p -= 2;
                           return detail::conv_backward(c, x, params_[p].value, g,
                                                        grads ? &(*grads)[p].value : nullptr,
                                                        grads ? &(*grads)[p + 1].value : nullptr);
                         },
                         [&](const ReLU&) { return detail::relu_backward(x, g); },
                         [&](const Linear& l) {
                           p -= 2;
                           return detail::linear_backward(l, x, params_[p].value, g,
                                                          grads ? &(*grads)[p].value : nullptr,
                                                          grads ? &(*grads)[p + 1].value : nullptr);
                         },
                         [&](const GlobalAvgPool&) { return detail::pool_backward(x, g); },
                     },
                     arch_.layers[i]);
    }
    if (arch_.residual) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += grad_out[i];
    }
    return g;
  }

  Architecture arch_;
  Shape output_;
  std::vector<Parameter> params_;
  std::vector<Parameter> grads_;
};

// -- losses -----------------------------------------------------------------

struct LossResult {
  double value = 0.0;
  Tensor grad;  // dLoss/dInput, same shape as the prediction
};

/// Sum of squared differences per example, averaged over the batch axis.
inline LossResult mse_loss(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("mse_loss: " + shape_string(pred.shape()) + " vs " + shape_string(target.shape()));
  }
  const double batch = static_cast<double>(pred.extent(0));
  LossResult r{0.0, Tensor(pred.shape())};
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - target[i];
    r.value += d * d;
    r.grad[i] = 2.0 * d / batch;
  }
  r.value /= batch;
  return r;
}

/// Row-wise softmax of an [N, C] tensor, stabilised by max subtraction.
inline Tensor softmax(const Tensor& logits) {
  if (logits.rank() != 2) throw ShapeError("softmax expects [N, C]");
  Tensor out(logits.shape());
  const std::size_t c = logits.extent(1);
  for (std::size_t n = 0; n < logits.extent(0); ++n) {
    const auto row = logits.row(n);
    auto dst = out.row(n);
    double mx = row[0];
    for (double v : row) mx = std::max(mx, v);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (dst[j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < c; ++j) dst[j] /= z;
  }
  return out;
}

/// Batch-averaged -log softmax(logits)[label].
inline LossResult cross_entropy_loss(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy_loss expects [N, C] logits");
  const std::size_t batch = logits.extent(0);
  const std::size_t c = logits.extent(1);
  if (labels.size() != batch) throw ShapeError("cross_entropy_loss: label count != batch size");
  LossResult r{0.0, Tensor(logits.shape())};
  for (std::size_t n = 0; n < batch; ++n) {
    const int label = labels[n];
    if (label < 0 || static_cast<std::size_t>(label) >= c) {
      throw ArgumentError("cross_entropy_loss: label " + std::to_string(label) + " outside [0," +
                          std::to_string(c) + ")");
    }
    const auto row = logits.row(n);
    double mx = row[0];
    for (double v : row) mx = std::max(mx, v);
    double z = 0.0;
    for (double v : row) z += std::exp(v - mx);
    const double log_z = mx + std::log(z);
    r.value += log_z - row[static_cast<std::size_t>(label)];
    auto g = r.grad.row(n);
    for (std::size_t j = 0; j < c; ++j) g[j] = std::exp(row[j] - log_z) / static_cast<double>(batch);
    g[static_cast<std::size_t>(label)] -= 1.0 / static_cast<double>(batch);
  }
  r.value /= static_cast<double>(batch);
  return r;
}

/// Index of the largest entry of each row; ties go to the lowest index.
inline std::vector<int> argmax_rows(const Tensor& scores) {
  std::vector<int> out(scores.extent(0));
  for (std::size_t n = 0; n < out.size(); ++n) {
    const auto row = scores.row(n);
    std::size_t best = 0;
    for (std::size_t j = 1; j < row.size(); ++j) {
      if (row[j] > row[best]) best = j;
    }
    out[n] = static_cast<int>(best);
  }
  return out;
}

}  // namespace dsmooth::nn
