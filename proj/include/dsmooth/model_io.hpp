#pragma once

// DSMK model files:
//   "DSMK" | u16 version=1 | u32 len | architecture text (UTF-8)
//   then per parameter, in architecture order:
//   u16 name_len | name | u8 rank | u32 extents[rank] | f64 values (LE)

#include <cstdint>
#include <string>
#include <vector>

#include "dsmooth/binary_io.hpp"
#include "dsmooth/nn.hpp"

namespace dsmooth::nn {

inline constexpr char kModelMagic[4] = {'D', 'S', 'M', 'K'};
inline constexpr std::uint16_t kModelVersion = 1;

inline std::vector<char> serialize_model(const Model& model) {
  io::ByteWriter w;
  w.put_bytes(std::string_view(kModelMagic, 4));
  w.put<std::uint16_t>(kModelVersion);
  const std::string arch = model.architecture().to_text();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(arch.size()));
  w.put_bytes(arch);
  for (const auto& p : model.params()) {
    w.put<std::uint16_t>(static_cast<std::uint16_t>(p.name.size()));
    w.put_bytes(p.name);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(p.value.rank()));
    for (auto e : p.value.shape()) w.put<std::uint32_t>(static_cast<std::uint32_t>(e));
    for (double v : p.value.data()) w.put<double>(v);
  }
  return w.bytes();
}

inline Model deserialize_model(const std::vector<char>& bytes) {
  io::ByteReader r(bytes, "model file");
  if (r.get_bytes(4) != std::string_view(kModelMagic, 4)) throw FormatError("model file: bad magic");
  if (const auto v = r.get<std::uint16_t>(); v != kModelVersion) {
    throw FormatError("model file: unsupported version " + std::to_string(v));
  }
  const auto arch_len = r.get<std::uint32_t>();
  Model model(Architecture::parse(r.get_bytes(arch_len)));
  for (auto& p : model.params()) {
    const auto name_len = r.get<std::uint16_t>();
    if (r.get_bytes(name_len) != p.name) throw FormatError("model file: unexpected parameter name");
    const auto rank = r.get<std::uint8_t>();
    Shape shape(rank);
    for (auto& e : shape) e = r.get<std::uint32_t>();
    if (shape != p.value.shape()) {
      throw FormatError("model file: parameter '" + p.name + "' has shape " + shape_string(shape));
    }
    std::vector<double> values;
    r.get_array(p.value.size(), values);
    p.value = Tensor(shape, std::move(values));
  }
  if (!r.at_end()) throw FormatError("model file: trailing bytes");
  return model;
}

inline void save_model(const Model& model, const std::string& path) {
  io::write_file(path, serialize_model(model));
}

inline Model load_model(const std::string& path) { return deserialize_model(io::read_file(path)); }

}  // namespace dsmooth::nn
