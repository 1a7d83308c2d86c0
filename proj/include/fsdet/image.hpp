#pragma once

#include <filesystem>
#include <stdexcept>

#include "fsdet/tensor.hpp"

namespace fsdet {

/// Planar image, pixels [C,H,W] with intensities in [0,1].
struct Image {
  Tensor pixels;

  Image() = default;
  Image(int channels, int height, int width, double fill = 0.0) : pixels({channels, height, width}, fill) {}
  explicit Image(Tensor t) : pixels(std::move(t)) {}

  int channels() const { return pixels.dim(0); }
  int height() const { return pixels.dim(1); }
  int width() const { return pixels.dim(2); }
  double& at(int c, int y, int x) { return pixels.at(c, y, x); }
  double at(int c, int y, int x) const { return pixels.at(c, y, x); }
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bilinear resampling with pixel-center alignment.
Image resize_bilinear(const Image& src, int width, int height);

/// Binary (P6) or ASCII (P3) colour, and P5/P2 greyscale netpbm files.
Image read_pnm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const Image& img);

}  // namespace fsdet
