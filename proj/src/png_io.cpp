#include "elab/png_io.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace elab {

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v >> 24));
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v));
}

void put_chunk(std::vector<std::uint8_t>& out, const char type[4], const std::vector<std::uint8_t>& data) {
    put_u32(out, static_cast<std::uint32_t>(data.size()));
    const std::size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), data.begin(), data.end());
    const auto crc = crc32(0L, out.data() + start, static_cast<uInt>(out.size() - start));
    put_u32(out, static_cast<std::uint32_t>(crc));
}

}  // namespace

void write_png_gray(const std::string& path, int width, int height, const std::vector<std::uint8_t>& pixels) {
    if (pixels.size() != static_cast<std::size_t>(width) * height) throw std::invalid_argument("png: pixel count mismatch");

    // filter byte 0 per scanline
    std::vector<std::uint8_t> raw;
    raw.reserve(static_cast<std::size_t>(height) * (width + 1));
    for (int y = 0; y < height; ++y) {
        raw.push_back(0);
        raw.insert(raw.end(), pixels.begin() + static_cast<std::ptrdiff_t>(y) * width,
                   pixels.begin() + static_cast<std::ptrdiff_t>(y + 1) * width);
    }
    uLongf comp_size = compressBound(static_cast<uLong>(raw.size()));
    std::vector<std::uint8_t> comp(comp_size);
    if (compress2(comp.data(), &comp_size, raw.data(), static_cast<uLong>(raw.size()), 9) != Z_OK)
        throw std::runtime_error("png: deflate failed");
    comp.resize(comp_size);

    std::vector<std::uint8_t> out = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    std::vector<std::uint8_t> ihdr;
    put_u32(ihdr, static_cast<std::uint32_t>(width));
    put_u32(ihdr, static_cast<std::uint32_t>(height));
    ihdr.push_back(8);  // bit depth
    ihdr.push_back(0);  // grayscale
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);
    put_chunk(out, "IHDR", ihdr);
    put_chunk(out, "IDAT", comp);
    put_chunk(out, "IEND", {});

    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write png: " + path);
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
}

GrayCanvas image_grid(const std::vector<Tensor<float>>& images, int image_size, int cols) {
    if (images.empty()) throw std::invalid_argument("image grid: no images");
    const int n = static_cast<int>(images.size());
    cols = std::min(cols, n);
    const int rows = (n + cols - 1) / cols;
    const int pad = 2;
    GrayCanvas c;
    c.width = cols * image_size + (cols + 1) * pad;
    c.height = rows * image_size + (rows + 1) * pad;
    c.pixels.assign(static_cast<std::size_t>(c.width) * c.height, 32);
    for (int i = 0; i < n; ++i) {
        const int r = i / cols, col = i % cols;
        const int oy = pad + r * (image_size + pad);
        const int ox = pad + col * (image_size + pad);
        for (int y = 0; y < image_size; ++y)
            for (int x = 0; x < image_size; ++x) {
                float v = images[static_cast<std::size_t>(i)].v[static_cast<std::size_t>(y) * image_size + x];
                v = std::min(1.0f, std::max(-1.0f, v));
                c.pixels[static_cast<std::size_t>(oy + y) * c.width + (ox + x)] =
                    static_cast<std::uint8_t>((v + 1.0f) * 127.5f);
            }
    }
    return c;
}

void write_image_grid_png(const std::string& path, const std::vector<Tensor<float>>& images, int image_size,
                          int cols) {
    const GrayCanvas c = image_grid(images, image_size, cols);
    write_png_gray(path, c.width, c.height, c.pixels);
}

}  // namespace elab
