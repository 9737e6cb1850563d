#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>

#include "diffdepth/tensor.hpp"

// Raw tensor blob format (little-endian):
//   magic "DDTB" | u32 version=1 | u32 dtype (1=f32, 2=f64) | u32 rank |
//   u64 dims[rank] | payload (row-major scalars)
// Used for checkpoints, depth-map dumps, and dataset depth files.

namespace diffdepth {

static_assert(std::endian::native == std::endian::little,
              "tensor blobs are written in native little-endian order");

namespace detail {

template <typename S>
constexpr std::uint32_t dtype_code() {
  if constexpr (std::is_same_v<S, float>) return 1;
  else if constexpr (std::is_same_v<S, double>) return 2;
  else static_assert(sizeof(S) == 0, "unsupported scalar type");
}

inline void write_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
inline void write_u64(std::ostream& os, std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }

inline std::uint32_t read_u32(std::istream& is, const std::string& what) {
  std::uint32_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), 4)) throw std::runtime_error("tensor blob: truncated " + what);
  return v;
}
inline std::uint64_t read_u64(std::istream& is, const std::string& what) {
  std::uint64_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), 8)) throw std::runtime_error("tensor blob: truncated " + what);
  return v;
}

}  // namespace detail

template <typename S>
void write_tensor(std::ostream& os, const Tensor<S>& t) {
  os.write("DDTB", 4);
  detail::write_u32(os, 1);
  detail::write_u32(os, detail::dtype_code<S>());
  detail::write_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (int d : t.shape()) detail::write_u64(os, static_cast<std::uint64_t>(d));
  os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(S)));
  if (!os) throw std::runtime_error("tensor blob: write failed");
}

template <typename S>
Tensor<S> read_tensor(std::istream& is) {
  char magic[4] = {};
  if (!is.read(magic, 4) || std::string(magic, 4) != "DDTB")
    throw std::runtime_error("tensor blob: bad magic");
  const std::uint32_t version = detail::read_u32(is, "version");
  if (version != 1) throw std::runtime_error("tensor blob: unsupported version " + std::to_string(version));
  const std::uint32_t dtype = detail::read_u32(is, "dtype");
  if (dtype != detail::dtype_code<S>())
    throw std::runtime_error("tensor blob: dtype code " + std::to_string(dtype) + " does not match requested scalar");
  const std::uint32_t rank = detail::read_u32(is, "rank");
  if (rank > 8) throw std::runtime_error("tensor blob: implausible rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) {
    const std::uint64_t v = detail::read_u64(is, "dim");
    if (v > (1ull << 31)) throw std::runtime_error("tensor blob: implausible dimension");
    d = static_cast<int>(v);
  }
  Tensor<S> t = Tensor<S>::zeros(shape);
  if (!is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(S))))
    throw std::runtime_error("tensor blob: truncated payload for shape " + shape_str(shape));
  return t;
}

template <typename S>
void save_tensor(const std::string& path, const Tensor<S>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  write_tensor(os, t);
}

template <typename S>
Tensor<S> load_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open: " + path);
  return read_tensor<S>(is);
}

}  // namespace diffdepth
