#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>

#include "hts/tensor.hpp"

namespace hts::image {

/// H x W x C, intensities on the 0-255 scale.
using Image = Tensor<float>;

std::size_t height(const Image& img);
std::size_t width(const Image& img);
std::size_t channels(const Image& img);

/// Binary PPM (P6, maxval 255). Three channels only.
void write_ppm(std::ostream& out, const Image& img);
Image read_ppm(std::istream& in);

/// Dispatch on extension: ".ppm" or ".htst" (an f32 rank-3 tensor file).
/// Anything else is a FormatError.
Image load_image(const std::filesystem::path& path);
void save_image(const std::filesystem::path& path, const Image& img);

/// Bilinear with half-pixel centres and edge clamping.
Image resize_bilinear(const Image& img, std::size_t out_h, std::size_t out_w);

/// Rows [y, y + h), columns [x, x + w). The box must lie inside the image.
Image crop(const Image& img, std::size_t x, std::size_t y, std::size_t w, std::size_t h);

Image flip_horizontal(const Image& img);
/// Swaps the row and column axes.
Image transpose(const Image& img);
/// Rotation about the centre by `degrees` (counter-clockwise), bilinear
/// sampling, out-of-range samples take the nearest edge pixel.
Image rotate(const Image& img, double degrees);

/// Clamps every value into [lo, hi].
void clamp(Image& img, float lo, float hi);

}  // namespace hts::image
