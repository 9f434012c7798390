#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace sflow {

/// Row-major RGB image with float channels in [0, 1].
struct Image {
    int h = 0;
    int w = 0;
    std::vector<float> px;  // h * w * 3

    static Image filled(int h, int w, float r, float g, float b);

    float& at(int y, int x, int c) { return px[(static_cast<size_t>(y) * w + x) * 3 + c]; }
    float at(int y, int x, int c) const {
        return px[(static_cast<size_t>(y) * w + x) * 3 + c];
    }
    size_t pixel_count() const { return static_cast<size_t>(h) * w; }
};

/// 8-bit PNG, color type RGB, deterministic byte output for a fixed image.
void write_png(const std::string& path, const Image& img);
Image read_png(const std::string& path);

/// Binary PGM (P5), 8-bit grayscale.
void write_pgm(const std::string& path, int h, int w, const std::vector<uint8_t>& gray);

Image resize_bilinear(const Image& img, int out_h, int out_w);
/// Exact 2-pixel horizontal box average; input width must be even.
Image downscale_width_half(const Image& img);
/// Side-by-side horizontal concatenation; heights must match.
Image concat_horizontal(const Image& a, const Image& b);
Image crop(const Image& img, int y0, int x0, int h, int w);

}  // namespace sflow
