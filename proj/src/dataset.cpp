#include "elab/dataset.hpp"

#include <array>
#include <cmath>
#include <string>

#include "elab/rng.hpp"

namespace elab {

namespace {

// 5x7 digit glyphs, row-major, '1' = ink.
constexpr std::array<const char*, 10> kGlyphs = {
    "01110"
    "10001"
    "10011"
    "10101"
    "11001"
    "10001"
    "01110",  // 0
    "00100"
    "01100"
    "00100"
    "00100"
    "00100"
    "00100"
    "01110",  // 1
    "01110"
    "10001"
    "00001"
    "00010"
    "00100"
    "01000"
    "11111",  // 2
    "01110"
    "10001"
    "00001"
    "00110"
    "00001"
    "10001"
    "01110",  // 3
    "00010"
    "00110"
    "01010"
    "10010"
    "11111"
    "00010"
    "00010",  // 4
    "11111"
    "10000"
    "11110"
    "00001"
    "00001"
    "10001"
    "01110",  // 5
    "00110"
    "01000"
    "10000"
    "11110"
    "10001"
    "10001"
    "01110",  // 6
    "11111"
    "00001"
    "00010"
    "00100"
    "01000"
    "01000"
    "01000",  // 7
    "01110"
    "10001"
    "10001"
    "01110"
    "10001"
    "10001"
    "01110",  // 8
    "01110"
    "10001"
    "10001"
    "01111"
    "00001"
    "00010"
    "01100",  // 9
};

constexpr int kGw = 5, kGh = 7;

double glyph_at(int d, int gx, int gy) {
    if (gx < 0 || gx >= kGw || gy < 0 || gy >= kGh) return 0.0;
    return kGlyphs[static_cast<std::size_t>(d)][static_cast<std::size_t>(gy * kGw + gx)] == '1' ? 1.0 : 0.0;
}

double glyph_bilinear(int d, double u, double v) {
    // u, v in glyph cell coordinates (cell centers at integers)
    const int x0 = static_cast<int>(std::floor(u));
    const int y0 = static_cast<int>(std::floor(v));
    const double fx = u - x0, fy = v - y0;
    const double a = glyph_at(d, x0, y0), b = glyph_at(d, x0 + 1, y0);
    const double c = glyph_at(d, x0, y0 + 1), e = glyph_at(d, x0 + 1, y0 + 1);
    return (a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + e * fx) * fy;
}

}  // namespace

std::string digit_token(int cls) { return "<digit-" + std::to_string(cls) + ">"; }

LabeledImages render_digits(int per_class, int image_size, std::uint64_t seed) {
    LabeledImages out;
    out.image_size = image_size;
    for (int c = 0; c < 10; ++c) out.class_tokens.push_back(digit_token(c));

    const double S = static_cast<double>(image_size);
    for (int cls = 0; cls < 10; ++cls) {
        Rng rng(derive_seed(seed, "digit", static_cast<std::uint64_t>(cls)));
        for (int n = 0; n < per_class; ++n) {
            const double theta = (rng.uniform() * 2.0 - 1.0) * 0.14;
            const double scale = 0.85 + rng.uniform() * 0.25;
            const double dx = (rng.uniform() * 2.0 - 1.0) * 0.065 * S;
            const double dy = (rng.uniform() * 2.0 - 1.0) * 0.065 * S;
            const double intensity = 0.75 + rng.uniform() * 0.25;
            const double th = 0.10 + rng.uniform() * 0.16;  // stroke thickness via soft threshold

            const double bh = 0.70 * S * scale;
            const double bw = bh * static_cast<double>(kGw) / kGh;
            const double ct = std::cos(theta), st = std::sin(theta);
            const double cxp = S / 2.0 + dx, cyp = S / 2.0 + dy;

            Tensor<float> img({image_size, image_size, 1});
            for (int y = 0; y < image_size; ++y) {
                for (int x = 0; x < image_size; ++x) {
                    const double px = (x + 0.5) - cxp, py = (y + 0.5) - cyp;
                    const double rx = ct * px + st * py;
                    const double ry = -st * px + ct * py;
                    const double u = (rx + bw / 2.0) / bw * kGw - 0.5;
                    const double v = (ry + bh / 2.0) / bh * kGh - 0.5;
                    double val = glyph_bilinear(cls, u, v);
                    val = std::min(1.0, std::max(0.0, (val - th) / 0.35));
                    img.v[static_cast<std::size_t>(y) * image_size + x] =
                        static_cast<float>(2.0 * val * intensity - 1.0);
                }
            }
            out.images.push_back(std::move(img));
            out.labels.push_back(cls);
        }
    }
    return out;
}

}  // namespace elab
