#include "diffdepth/image_io.hpp"

#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <vector>

namespace diffdepth {

namespace {

std::uint8_t quantize(double v) {
  const double q = std::round(v * 255.0);
  return static_cast<std::uint8_t>(std::min(255.0, std::max(0.0, q)));
}

/// Reads one whitespace-delimited header token, skipping '#' comments.
std::string next_token(std::istream& is) {
  std::string tok;
  int c;
  while ((c = is.get()) != EOF) {
    if (c == '#') {
      while ((c = is.get()) != EOF && c != '\n') {}
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
  if (tok.empty()) throw std::runtime_error("image: truncated header");
  return tok;
}

}  // namespace

void write_ppm(const std::string& path, const Tensor<double>& rgb) {
  if (rgb.rank() != 3 || rgb.dim(0) != 3) throw std::invalid_argument("write_ppm: expected [3,H,W]");
  const int h = rgb.dim(1), w = rgb.dim(2);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("write_ppm: cannot open " + path);
  os << "P6\n" << w << " " << h << "\n255\n";
  std::vector<std::uint8_t> row(static_cast<std::size_t>(w) * 3);
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        row[static_cast<std::size_t>(x) * 3 + static_cast<std::size_t>(c)] =
            quantize(rgb.data()[c * plane + y * w + x]);
    os.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!os) throw std::runtime_error("write_ppm: write failed for " + path);
}

Tensor<double> read_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("read_ppm: cannot open " + path);
  if (next_token(is) != "P6") throw std::runtime_error("read_ppm: not a binary PPM: " + path);
  const int w = std::stoi(next_token(is));
  const int h = std::stoi(next_token(is));
  const int maxval = std::stoi(next_token(is));
  if (w < 1 || h < 1 || maxval != 255)
    throw std::runtime_error("read_ppm: unsupported header in " + path);
  // header terminates with exactly one whitespace byte, already consumed
  std::vector<std::uint8_t> buf(static_cast<std::size_t>(w) * h * 3);
  if (!is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size())))
    throw std::runtime_error("read_ppm: truncated pixel data in " + path);
  Tensor<double> out = Tensor<double>::zeros({3, h, w});
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        out.data()[c * plane + y * w + x] =
            buf[(static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)) * 3 +
                static_cast<std::size_t>(c)] /
            255.0;
  return out;
}

void write_pgm(const std::string& path, const Tensor<double>& gray) {
  if (gray.rank() != 3 || gray.dim(0) != 1) throw std::invalid_argument("write_pgm: expected [1,H,W]");
  const int h = gray.dim(1), w = gray.dim(2);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("write_pgm: cannot open " + path);
  os << "P5\n" << w << " " << h << "\n255\n";
  std::vector<std::uint8_t> row(static_cast<std::size_t>(w));
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) row[static_cast<std::size_t>(x)] = quantize(gray.data()[y * w + x]);
    os.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!os) throw std::runtime_error("write_pgm: write failed for " + path);
}

Tensor<double> normalize_for_display(const Tensor<double>& map) {
  Tensor<double> out = Tensor<double>::zeros(map.shape());
  const double lo = map.array().minCoeff();
  const double hi = map.array().maxCoeff();
  if (hi > lo) out.array() = (map.array() - lo) / (hi - lo);
  return out;
}

}  // namespace diffdepth
