#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "vlpseg/errors.hpp"
#include "vlpseg/tensor.hpp"

namespace vlpseg {

// RGB image, interleaved, values in [0,1]. The synthetic generator quantizes
// every value to the 8-bit grid so disk round-trips are pixel-exact.
struct Image {
  int h = 0, w = 0;
  std::vector<double> rgb;  // h*w*3

  static Image filled(int h, int w, double r, double g, double b) {
    Image im;
    im.h = h;
    im.w = w;
    im.rgb.resize(static_cast<std::size_t>(h) * w * 3);
    for (int i = 0; i < h * w; ++i) {
      im.rgb[static_cast<std::size_t>(i) * 3 + 0] = r;
      im.rgb[static_cast<std::size_t>(i) * 3 + 1] = g;
      im.rgb[static_cast<std::size_t>(i) * 3 + 2] = b;
    }
    return im;
  }

  double* px(int y, int x) { return &rgb[(static_cast<std::size_t>(y) * w + x) * 3]; }
  const double* px(int y, int x) const { return &rgb[(static_cast<std::size_t>(y) * w + x) * 3]; }

  void validate(int patch_size) const {
    if (h <= 0 || w <= 0 || rgb.size() != static_cast<std::size_t>(h) * w * 3)
      throw ShapeError("Image: inconsistent dimensions");
    if (patch_size > 0 && (h % patch_size != 0 || w % patch_size != 0))
      throw ShapeError("Image: " + std::to_string(h) + "x" + std::to_string(w) +
                       " not divisible by patch size " + std::to_string(patch_size));
    for (double v : rgb)
      if (!(v >= 0.0 && v <= 1.0)) throw InvalidInputError("Image: pixel value outside [0,1]");
  }
};

// {0,1} mask. Index masks on disk carry class ids; in-memory BinaryMask is
// always already binarized to one class.
struct BinaryMask {
  int h = 0, w = 0;
  std::vector<std::uint8_t> v;

  static BinaryMask zeros(int h, int w) {
    BinaryMask m;
    m.h = h;
    m.w = w;
    m.v.assign(static_cast<std::size_t>(h) * w, 0);
    return m;
  }

  std::uint8_t at(int y, int x) const { return v[static_cast<std::size_t>(y) * w + x]; }
  void set(int y, int x, std::uint8_t val) { v[static_cast<std::size_t>(y) * w + x] = val; }

  std::size_t count() const {
    std::size_t n = 0;
    for (auto b : v) n += b ? 1 : 0;
    return n;
  }
  bool empty() const { return count() == 0; }
};

struct SoftMask {
  int h = 0, w = 0;
  std::vector<double> v;
};

// Pixel-level embeddings, channel-major (C x H x W).
struct FeatureMap {
  int c = 0, h = 0, w = 0;
  std::vector<double> v;

  static FeatureMap zeros(int c, int h, int w) {
    FeatureMap f;
    f.c = c;
    f.h = h;
    f.w = w;
    f.v.assign(static_cast<std::size_t>(c) * h * w, 0.0);
    return f;
  }

  double& at(int ci, int y, int x) { return v[(static_cast<std::size_t>(ci) * h + y) * w + x]; }
  double at(int ci, int y, int x) const { return v[(static_cast<std::size_t>(ci) * h + y) * w + x]; }

  // (H*W) x C token matrix, token p = y*W + x.
  Tensor tokens() const {
    Tensor t = Tensor::zeros({h * w, c});
    for (int ci = 0; ci < c; ++ci)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) t.at(y * w + x, ci) = at(ci, y, x);
    return t;
  }

  static FeatureMap from_tokens(const Tensor& t, int h, int w) {
    if (t.rows() != h * w) throw ShapeError("FeatureMap::from_tokens: row count != H*W");
    FeatureMap f = zeros(t.cols(), h, w);
    for (int ci = 0; ci < f.c; ++ci)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) f.at(ci, y, x) = t.at(y * w + x, ci);
    return f;
  }

  bool all_finite() const {
    for (double x : v)
      if (!std::isfinite(x)) return false;
    return true;
  }
};

struct TextEmbedding {
  std::vector<double> v;
};

struct SamImageEmbedding {
  int c = 0, h = 0, w = 0;
  std::vector<double> v;  // C x H x W

  Tensor tokens() const {
    Tensor t = Tensor::zeros({h * w, c});
    for (int ci = 0; ci < c; ++ci)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) t.at(y * w + x, ci) = v[(static_cast<std::size_t>(ci) * h + y) * w + x];
    return t;
  }
};

struct MaskLogits {
  int h = 0, w = 0;
  std::vector<double> v;
};

// Nearest-neighbor downsample of an annotation mask to the feature grid;
// the sample point is the patch center.
inline BinaryMask downsample_mask_nn(const BinaryMask& m, int patch_size) {
  if (m.h % patch_size != 0 || m.w % patch_size != 0)
    throw ShapeError("downsample_mask_nn: mask dims not divisible by patch size");
  BinaryMask out = BinaryMask::zeros(m.h / patch_size, m.w / patch_size);
  int half = patch_size / 2;
  for (int y = 0; y < out.h; ++y)
    for (int x = 0; x < out.w; ++x) out.set(y, x, m.at(y * patch_size + half, x * patch_size + half));
  return out;
}

// ---- PPM (P6) / PGM (P5) I/O ----

namespace detail {

inline int read_pnm_int(std::istream& in) {
  int c = in.get();
  while (c == '#' || std::isspace(c)) {
    if (c == '#')
      while (c != '\n' && c != EOF) c = in.get();
    c = in.get();
  }
  if (c == EOF) throw DataError("pnm: unexpected end of header");
  int v = 0;
  while (std::isdigit(c)) {
    v = v * 10 + (c - '0');
    c = in.get();
  }
  return v;
}

}  // namespace detail

inline void write_ppm(const std::filesystem::path& path, const Image& im) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write image file: " + path.string());
  out << "P6\n" << im.w << " " << im.h << "\n255\n";
  std::vector<unsigned char> buf(im.rgb.size());
  for (std::size_t i = 0; i < im.rgb.size(); ++i)
    buf[i] = static_cast<unsigned char>(std::lround(std::clamp(im.rgb[i], 0.0, 1.0) * 255.0));
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

inline Image read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open image file: " + path.string());
  char m0 = static_cast<char>(in.get()), m1 = static_cast<char>(in.get());
  if (m0 != 'P' || m1 != '6') throw DataError("not a P6 ppm file: " + path.string());
  int w = detail::read_pnm_int(in);
  int h = detail::read_pnm_int(in);
  int maxval = detail::read_pnm_int(in);
  if (maxval != 255) throw DataError("ppm: only maxval 255 supported: " + path.string());
  Image im;
  im.h = h;
  im.w = w;
  std::vector<unsigned char> buf(static_cast<std::size_t>(h) * w * 3);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (in.gcount() != static_cast<std::streamsize>(buf.size()))
    throw DataError("ppm: truncated pixel data: " + path.string());
  im.rgb.resize(buf.size());
  for (std::size_t i = 0; i < buf.size(); ++i) im.rgb[i] = buf[i] / 255.0;
  return im;
}

// Index mask: pixel value is a class id (0 = background).
inline void write_pgm(const std::filesystem::path& path, const std::vector<std::uint8_t>& v, int h, int w) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write mask file: " + path.string());
  out << "P5\n" << w << " " << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size()));
}

inline std::vector<std::uint8_t> read_pgm(const std::filesystem::path& path, int& h, int& w) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open mask file: " + path.string());
  char m0 = static_cast<char>(in.get()), m1 = static_cast<char>(in.get());
  if (m0 != 'P' || m1 != '5') throw DataError("not a P5 pgm file: " + path.string());
  w = detail::read_pnm_int(in);
  h = detail::read_pnm_int(in);
  int maxval = detail::read_pnm_int(in);
  if (maxval != 255) throw DataError("pgm: only maxval 255 supported: " + path.string());
  std::vector<std::uint8_t> buf(static_cast<std::size_t>(h) * w);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (in.gcount() != static_cast<std::streamsize>(buf.size()))
    throw DataError("pgm: truncated pixel data: " + path.string());
  return buf;
}

}  // namespace vlpseg
