#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "elab/tensor.hpp"

namespace elab {

/// Minimal 8-bit grayscale PNG writer (zlib-deflated, single IDAT).
void write_png_gray(const std::string& path, int width, int height, const std::vector<std::uint8_t>& pixels);

/// Tiles images (values in [-1, 1], [H, W, 1] or flat H*W) into a grid with
/// a 2px separator and returns the byte canvas.
struct GrayCanvas {
    int width = 0, height = 0;
    std::vector<std::uint8_t> pixels;
};

GrayCanvas image_grid(const std::vector<Tensor<float>>& images, int image_size, int cols);

void write_image_grid_png(const std::string& path, const std::vector<Tensor<float>>& images, int image_size, int cols);

}  // namespace elab
