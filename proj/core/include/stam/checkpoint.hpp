#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>

#include "stam/errors.hpp"
#include "stam/model.hpp"

namespace stam {

// Checkpoint layout (all little-endian):
//   magic "STAMCKPT", version byte, config (six int64 dims, fusion byte, two
//   toggle bytes), block count, then per block: name, shape, float32 payload.
// Block order is the canonical parameter order, so files are comparable.

static_assert(std::endian::native == std::endian::little,
              "checkpoint io assumes a little-endian host");

namespace detail {

constexpr char kCkptMagic[8] = {'S', 'T', 'A', 'M', 'C', 'K', 'P', 'T'};
constexpr uint8_t kCkptVersion = 1;

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw IoError("checkpoint: truncated file");
  return v;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const ModelParams& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("checkpoint: cannot open for writing: " + path);
  os.write(detail::kCkptMagic, 8);
  detail::put<uint8_t>(os, detail::kCkptVersion);
  const ModelConfig& c = params.config;
  detail::put<int64_t>(os, c.d);
  detail::put<int64_t>(os, c.heads);
  detail::put<int64_t>(os, c.layers);
  detail::put<int64_t>(os, c.ffn_dim);
  detail::put<int64_t>(os, c.appearance_dim);
  detail::put<int64_t>(os, c.window_T);
  detail::put<uint8_t>(os, static_cast<uint8_t>(c.fusion));
  detail::put<uint8_t>(os, c.use_aspe ? 1 : 0);
  detail::put<uint8_t>(os, c.use_rstpe ? 1 : 0);
  detail::put<uint32_t>(os, static_cast<uint32_t>(params.values.size()));
  for (size_t i = 0; i < params.values.size(); ++i) {
    const std::string& name = params.names[i];
    const TensorF& t = params.values[i];
    detail::put<uint32_t>(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put<uint32_t>(os, static_cast<uint32_t>(t.rank()));
    for (int64_t dim : t.shape()) detail::put<int64_t>(os, dim);
    os.write(reinterpret_cast<const char*>(t.data()),
             static_cast<std::streamsize>(t.numel() * sizeof(float)));
  }
  if (!os) throw IoError("checkpoint: write failed: " + path);
}

inline ModelParams load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open: " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, detail::kCkptMagic, 8) != 0) {
    throw IoError("checkpoint: bad magic in " + path);
  }
  uint8_t version = detail::take<uint8_t>(is);
  if (version != detail::kCkptVersion) {
    throw IoError("checkpoint: unsupported version " + std::to_string(int(version)));
  }
  ModelConfig c;
  c.d = detail::take<int64_t>(is);
  c.heads = detail::take<int64_t>(is);
  c.layers = detail::take<int64_t>(is);
  c.ffn_dim = detail::take<int64_t>(is);
  c.appearance_dim = detail::take<int64_t>(is);
  c.window_T = detail::take<int64_t>(is);
  c.fusion = static_cast<QueryFusion>(detail::take<uint8_t>(is));
  c.use_aspe = detail::take<uint8_t>(is) != 0;
  c.use_rstpe = detail::take<uint8_t>(is) != 0;
  c.validate();

  ModelParams out;
  out.config = c;
  uint32_t blocks = detail::take<uint32_t>(is);
  for (uint32_t i = 0; i < blocks; ++i) {
    uint32_t name_len = detail::take<uint32_t>(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    uint32_t rank = detail::take<uint32_t>(is);
    std::vector<int64_t> shape;
    for (uint32_t r = 0; r < rank; ++r) shape.push_back(detail::take<int64_t>(is));
    TensorF t(shape);
    is.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.numel() * sizeof(float)));
    if (!is) throw IoError("checkpoint: truncated block " + name);
    out.names.push_back(std::move(name));
    out.values.push_back(std::move(t));
  }

  // The stored blocks must line up with what the config implies.
  ModelParams skeleton = init_params<float>(c, 0);
  if (skeleton.names != out.names) throw IoError("checkpoint: block layout mismatch in " + path);
  for (size_t i = 0; i < out.values.size(); ++i) {
    if (!(out.values[i].shape() == skeleton.values[i].shape())) {
      throw IoError("checkpoint: shape mismatch for block " + out.names[i]);
    }
  }
  return out;
}

}  // namespace stam
