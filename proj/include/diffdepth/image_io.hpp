#pragma once

#include <string>

#include "diffdepth/tensor.hpp"

// 8-bit binary PPM (P6) / PGM (P5) image files. Values in [0,1] are
// quantized with round-to-nearest on write and divided by 255 on read.

namespace diffdepth {

void write_ppm(const std::string& path, const Tensor<double>& rgb);
Tensor<double> read_ppm(const std::string& path);

void write_pgm(const std::string& path, const Tensor<double>& gray);

/// Min-max normalizes an arbitrary [1,H,W] map to [0,1] for visualization.
/// A constant map comes back all zero.
Tensor<double> normalize_for_display(const Tensor<double>& map);

}  // namespace diffdepth
