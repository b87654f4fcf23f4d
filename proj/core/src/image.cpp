#include "hts/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <istream>
#include <numbers>
#include <ostream>
#include <string>

#include "hts/serialize.hpp"

namespace hts::image {

namespace {

void check_image(const Image& img) {
  if (img.rank() != 3) throw DimensionError("image must be H x W x C, got " + shape_string(img.shape()));
}

// Next header token, skipping whitespace and '#' comments.
std::string ppm_token(std::istream& in) {
  std::string tok;
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {
      while ((c = in.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
  if (tok.empty()) throw FormatError("truncated PPM header");
  return tok;
}

std::size_t ppm_number(std::istream& in, const char* what) {
  const std::string tok = ppm_token(in);
  if (tok.empty() || tok.size() > 9 || !std::all_of(tok.begin(), tok.end(), ::isdigit)) {
    throw FormatError(std::string("bad PPM ") + what + " '" + tok + "'");
  }
  return std::stoul(tok);
}

// Bilinear sample of every channel at (y, x) in pixel-centre coordinates.
void bilinear(const Image& img, double y, double x, float* out) {
  const std::size_t h = height(img), w = width(img), c = channels(img);
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  const auto y0 = static_cast<std::size_t>(y), x0 = static_cast<std::size_t>(x);
  const std::size_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const double fy = y - static_cast<double>(y0), fx = x - static_cast<double>(x0);
  const auto px = [&](std::size_t r, std::size_t col, std::size_t ch) {
    return static_cast<double>(img[(r * w + col) * c + ch]);
  };
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double top = px(y0, x0, ch) * (1 - fx) + px(y0, x1, ch) * fx;
    const double bottom = px(y1, x0, ch) * (1 - fx) + px(y1, x1, ch) * fx;
    out[ch] = static_cast<float>(top * (1 - fy) + bottom * fy);
  }
}

}  // namespace

std::size_t height(const Image& img) {
  check_image(img);
  return img.dim(0);
}
std::size_t width(const Image& img) {
  check_image(img);
  return img.dim(1);
}
std::size_t channels(const Image& img) {
  check_image(img);
  return img.dim(2);
}

void write_ppm(std::ostream& out, const Image& img) {
  if (channels(img) != 3) throw DimensionError("PPM needs 3 channels, got " + shape_string(img.shape()));
  out << "P6\n" << width(img) << ' ' << height(img) << "\n255\n";
  std::string bytes(img.size(), '\0');
  for (std::size_t i = 0; i < img.size(); ++i) {
    const float v = std::clamp(std::round(img[i]), 0.0f, 255.0f);
    bytes[i] = static_cast<char>(static_cast<unsigned char>(v));
  }
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing PPM");
}

Image read_ppm(std::istream& in) {
  if (ppm_token(in) != "P6") throw FormatError("not a binary PPM (P6)");
  const std::size_t w = ppm_number(in, "width");
  const std::size_t h = ppm_number(in, "height");
  const std::size_t maxval = ppm_number(in, "maxval");
  if (w == 0 || h == 0) throw FormatError("PPM with zero extent");
  if (maxval != 255) throw FormatError("unsupported PPM maxval " + std::to_string(maxval));
  // ppm_token consumed the single whitespace byte after maxval.
  std::string bytes(w * h * 3, '\0');
  le::read_exact(in, bytes.data(), bytes.size());
  Image img(Shape{h, w, 3});
  for (std::size_t i = 0; i < bytes.size(); ++i) img[i] = static_cast<unsigned char>(bytes[i]);
  return img;
}

Image load_image(const std::filesystem::path& path) {
  const std::string ext = path.extension().string();
  if (ext == ".htst") {
    Image img = load_tensor<float>(path);
    check_image(img);
    return img;
  }
  if (ext != ".ppm") throw FormatError("unsupported image format '" + ext + "' for " + path.string());
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return read_ppm(in);
}

void save_image(const std::filesystem::path& path, const Image& img) {
  const std::string ext = path.extension().string();
  if (ext == ".htst") {
    save_tensor(path, img);
    return;
  }
  if (ext != ".ppm") throw FormatError("unsupported image format '" + ext + "' for " + path.string());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  write_ppm(out, img);
}

Image resize_bilinear(const Image& img, std::size_t out_h, std::size_t out_w) {
  const std::size_t h = height(img), w = width(img), c = channels(img);
  if (out_h == h && out_w == w) return img;
  Image out(Shape{out_h, out_w, c});
  const double sy = static_cast<double>(h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(w) / static_cast<double>(out_w);
  for (std::size_t r = 0; r < out_h; ++r) {
    for (std::size_t col = 0; col < out_w; ++col) {
      bilinear(img, (static_cast<double>(r) + 0.5) * sy - 0.5, (static_cast<double>(col) + 0.5) * sx - 0.5,
               &out[(r * out_w + col) * c]);
    }
  }
  return out;
}

Image crop(const Image& img, std::size_t x, std::size_t y, std::size_t w, std::size_t h) {
  const std::size_t ih = height(img), iw = width(img), c = channels(img);
  if (w == 0 || h == 0 || x + w > iw || y + h > ih) {
    throw ContractError("crop box (" + std::to_string(x) + "," + std::to_string(y) + "," + std::to_string(w) + "," +
                        std::to_string(h) + ") outside " + shape_string(img.shape()));
  }
  Image out(Shape{h, w, c});
  for (std::size_t r = 0; r < h; ++r) {
    const float* src = &img[((y + r) * iw + x) * c];
    std::copy(src, src + w * c, &out[r * w * c]);
  }
  return out;
}

Image flip_horizontal(const Image& img) {
  const std::size_t h = height(img), w = width(img), c = channels(img);
  Image out(img.shape());
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t col = 0; col < w; ++col)
      for (std::size_t ch = 0; ch < c; ++ch) out[(r * w + col) * c + ch] = img[(r * w + (w - 1 - col)) * c + ch];
  return out;
}

Image transpose(const Image& img) {
  const std::size_t h = height(img), w = width(img), c = channels(img);
  Image out(Shape{w, h, c});
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t col = 0; col < w; ++col)
      for (std::size_t ch = 0; ch < c; ++ch) out[(col * h + r) * c + ch] = img[(r * w + col) * c + ch];
  return out;
}

Image rotate(const Image& img, double degrees) {
  const std::size_t h = height(img), w = width(img), c = channels(img);
  if (degrees == 0.0) return img;
  const double a = degrees * std::numbers::pi / 180.0;
  const double cs = std::cos(a), sn = std::sin(a);
  const double cy = (static_cast<double>(h) - 1) / 2, cx = (static_cast<double>(w) - 1) / 2;
  Image out(img.shape());
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t col = 0; col < w; ++col) {
      // Inverse map from output pixel to source location, rows pointing down.
      const double dy = static_cast<double>(r) - cy, dx = static_cast<double>(col) - cx;
      const double sx = cs * dx - sn * dy + cx;
      const double sy = sn * dx + cs * dy + cy;
      bilinear(img, sy, sx, &out[(r * w + col) * c]);
    }
  }
  return out;
}

void clamp(Image& img, float lo, float hi) {
  for (auto& v : img.data()) v = std::clamp(v, lo, hi);
}

}  // namespace hts::image
