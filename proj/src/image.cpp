#include "fsdet/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

namespace fsdet {

Image resize_bilinear(const Image& src, int width, int height) {
  if (width < 1 || height < 1) throw DataError("resize_bilinear: target size must be positive");
  const int C = src.channels(), H = src.height(), W = src.width();
  if (H == height && W == width) return src;
  Image dst(C, height, width);
  const double sy = static_cast<double>(H) / height;
  const double sx = static_cast<double>(W) / width;
  for (int y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, H - 1.0);
    const int y0 = static_cast<int>(std::floor(fy));
    const int y1 = std::min(y0 + 1, H - 1);
    const double wy = fy - y0;
    for (int x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, W - 1.0);
      const int x0 = static_cast<int>(std::floor(fx));
      const int x1 = std::min(x0 + 1, W - 1);
      const double wx = fx - x0;
      for (int c = 0; c < C; ++c) {
        const double top = src.at(c, y0, x0) * (1 - wx) + src.at(c, y0, x1) * wx;
        const double bot = src.at(c, y1, x0) * (1 - wx) + src.at(c, y1, x1) * wx;
        dst.at(c, y, x) = top * (1 - wy) + bot * wy;
      }
    }
  }
  return dst;
}

namespace {

// Next header token, skipping whitespace and '#' comments.
std::string next_token(std::istream& in) {
  std::string tok;
  int ch;
  while ((ch = in.get()) != EOF) {
    if (ch == '#') {
      while ((ch = in.get()) != EOF && ch != '\n') {
      }
      continue;
    }
    if (std::isspace(ch)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(static_cast<char>(ch));
  }
  return tok;
}

}  // namespace

Image read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open image " + path.string());
  const std::string magic = next_token(in);
  const bool binary = magic == "P6" || magic == "P5";
  const int C = (magic == "P6" || magic == "P3") ? 3 : (magic == "P5" || magic == "P2") ? 1 : 0;
  if (C == 0) throw DataError("unsupported image format in " + path.string());
  int W = 0, H = 0, maxval = 0;
  try {
    W = std::stoi(next_token(in));
    H = std::stoi(next_token(in));
    maxval = std::stoi(next_token(in));
  } catch (const std::exception&) {
    throw DataError("malformed header in " + path.string());
  }
  if (W < 1 || H < 1 || maxval < 1 || maxval > 65535) throw DataError("bad image header in " + path.string());
  Image img(3, H, W);
  const int bytes = maxval < 256 ? 1 : 2;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < C; ++c) {
        int v = 0;
        if (binary) {
          for (int b = 0; b < bytes; ++b) {
            const int ch = in.get();
            if (ch == EOF) throw DataError("truncated image " + path.string());
            v = (v << 8) | ch;
          }
        } else {
          v = std::stoi(next_token(in));
        }
        const double val = static_cast<double>(v) / maxval;
        if (C == 1) {
          for (int k = 0; k < 3; ++k) img.at(k, y, x) = val;
        } else {
          img.at(c, y, x) = val;
        }
      }
  return img;
}

void write_ppm(const std::filesystem::path& path, const Image& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write image " + path.string());
  const int H = img.height(), W = img.width(), C = img.channels();
  out << "P6\n" << W << ' ' << H << "\n255\n";
  std::vector<unsigned char> row(static_cast<std::size_t>(W) * 3);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < 3; ++c) {
        const double v = img.at(std::min(c, C - 1), y, x);
        row[static_cast<std::size_t>(x) * 3 + c] =
            static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
      }
    out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
}

}  // namespace fsdet
