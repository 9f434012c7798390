#include "sflow/image.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "sflow/tensor.hpp"

namespace sflow {

Image Image::filled(int h, int w, float r, float g, float b) {
    Image img;
    img.h = h;
    img.w = w;
    img.px.resize(static_cast<size_t>(h) * w * 3);
    for (size_t i = 0; i < img.pixel_count(); ++i) {
        img.px[i * 3 + 0] = r;
        img.px[i * 3 + 1] = g;
        img.px[i * 3 + 2] = b;
    }
    return img;
}

namespace {

uint8_t to_byte(float v) {
    const float clamped = std::clamp(v, 0.0f, 1.0f);
    return static_cast<uint8_t>(std::lround(clamped * 255.0f));
}

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(static_cast<uint8_t>(v >> 24));
    out.push_back(static_cast<uint8_t>(v >> 16));
    out.push_back(static_cast<uint8_t>(v >> 8));
    out.push_back(static_cast<uint8_t>(v));
}

void put_chunk(std::vector<uint8_t>& out, const char type[4],
               const std::vector<uint8_t>& payload) {
    put_u32(out, static_cast<uint32_t>(payload.size()));
    std::vector<uint8_t> body(type, type + 4);
    body.insert(body.end(), payload.begin(), payload.end());
    out.insert(out.end(), body.begin(), body.end());
    const uint32_t crc =
        static_cast<uint32_t>(crc32(0L, body.data(), static_cast<uInt>(body.size())));
    put_u32(out, crc);
}

uint32_t read_u32(const uint8_t* p) {
    return (static_cast<uint32_t>(p[0]) << 24) | (static_cast<uint32_t>(p[1]) << 16) |
           (static_cast<uint32_t>(p[2]) << 8) | p[3];
}

int paeth(int a, int b, int c) {
    const int p = a + b - c;
    const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

}  // namespace

void write_png(const std::string& path, const Image& img) {
    const int channels = 3;
    const size_t stride = static_cast<size_t>(img.w) * channels;
    std::vector<uint8_t> raw((stride + 1) * static_cast<size_t>(img.h));
    for (int y = 0; y < img.h; ++y) {
        uint8_t* row = raw.data() + static_cast<size_t>(y) * (stride + 1);
        row[0] = 0;  // filter: none
        for (int x = 0; x < img.w; ++x)
            for (int c = 0; c < channels; ++c)
                row[1 + static_cast<size_t>(x) * channels + c] = to_byte(img.at(y, x, c));
    }

    uLongf bound = compressBound(static_cast<uLong>(raw.size()));
    std::vector<uint8_t> compressed(bound);
    if (compress2(compressed.data(), &bound, raw.data(), static_cast<uLong>(raw.size()),
                  9) != Z_OK)
        throw DataError("write_png: deflate failed");
    compressed.resize(bound);

    std::vector<uint8_t> out = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    std::vector<uint8_t> ihdr;
    put_u32(ihdr, static_cast<uint32_t>(img.w));
    put_u32(ihdr, static_cast<uint32_t>(img.h));
    ihdr.push_back(8);   // bit depth
    ihdr.push_back(2);   // color type: RGB
    ihdr.push_back(0);   // compression
    ihdr.push_back(0);   // filter
    ihdr.push_back(0);   // interlace
    put_chunk(out, "IHDR", ihdr);
    put_chunk(out, "IDAT", compressed);
    put_chunk(out, "IEND", {});

    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("write_png: cannot open " + path);
    f.write(reinterpret_cast<const char*>(out.data()),
            static_cast<std::streamsize>(out.size()));
    if (!f) throw DataError("write_png: write failed for " + path);
}

Image read_png(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("read_png: cannot open " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                               std::istreambuf_iterator<char>());
    static const uint8_t sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    if (bytes.size() < 8 || std::memcmp(bytes.data(), sig, 8) != 0)
        throw DataError("read_png: not a PNG file: " + path);

    int w = 0, h = 0, color_type = -1;
    std::vector<uint8_t> idat;
    size_t at = 8;
    while (at + 8 <= bytes.size()) {
        const uint32_t len = read_u32(bytes.data() + at);
        if (at + 12 + len > bytes.size()) throw DataError("read_png: truncated chunk");
        const char* type = reinterpret_cast<const char*>(bytes.data() + at + 4);
        const uint8_t* payload = bytes.data() + at + 8;
        if (std::memcmp(type, "IHDR", 4) == 0) {
            w = static_cast<int>(read_u32(payload));
            h = static_cast<int>(read_u32(payload + 4));
            const int depth = payload[8];
            color_type = payload[9];
            if (depth != 8) throw DataError("read_png: only 8-bit depth supported");
            if (payload[12] != 0) throw DataError("read_png: interlace not supported");
        } else if (std::memcmp(type, "IDAT", 4) == 0) {
            idat.insert(idat.end(), payload, payload + len);
        } else if (std::memcmp(type, "IEND", 4) == 0) {
            break;
        }
        at += 12 + len;
    }
    if (w <= 0 || h <= 0) throw DataError("read_png: missing IHDR");

    int channels = 0;
    switch (color_type) {
        case 0: channels = 1; break;
        case 2: channels = 3; break;
        case 6: channels = 4; break;
        default: throw DataError("read_png: unsupported color type");
    }

    const size_t stride = static_cast<size_t>(w) * channels;
    std::vector<uint8_t> raw((stride + 1) * static_cast<size_t>(h));
    uLongf raw_len = static_cast<uLongf>(raw.size());
    if (uncompress(raw.data(), &raw_len, idat.data(), static_cast<uLong>(idat.size())) !=
            Z_OK ||
        raw_len != raw.size())
        throw DataError("read_png: inflate failed");

    // Undo per-row filters in place.
    std::vector<uint8_t> prev(stride, 0);
    Image img;
    img.h = h;
    img.w = w;
    img.px.resize(static_cast<size_t>(h) * w * 3);
    std::vector<uint8_t> cur(stride);
    for (int y = 0; y < h; ++y) {
        const uint8_t* row = raw.data() + static_cast<size_t>(y) * (stride + 1);
        const int filter = row[0];
        for (size_t i = 0; i < stride; ++i) {
            const int x = row[1 + i];
            const int a = i >= static_cast<size_t>(channels) ? cur[i - channels] : 0;
            const int b = prev[i];
            const int c = i >= static_cast<size_t>(channels) ? prev[i - channels] : 0;
            int v = 0;
            switch (filter) {
                case 0: v = x; break;
                case 1: v = x + a; break;
                case 2: v = x + b; break;
                case 3: v = x + (a + b) / 2; break;
                case 4: v = x + paeth(a, b, c); break;
                default: throw DataError("read_png: unknown filter");
            }
            cur[i] = static_cast<uint8_t>(v & 0xff);
        }
        for (int x = 0; x < w; ++x) {
            const uint8_t* p = cur.data() + static_cast<size_t>(x) * channels;
            const float r = p[0] / 255.0f;
            const float g = channels >= 3 ? p[1] / 255.0f : r;
            const float b2 = channels >= 3 ? p[2] / 255.0f : r;
            img.at(y, x, 0) = r;
            img.at(y, x, 1) = g;
            img.at(y, x, 2) = b2;
        }
        prev = cur;
    }
    return img;
}

void write_pgm(const std::string& path, int h, int w, const std::vector<uint8_t>& gray) {
    if (gray.size() != static_cast<size_t>(h) * w)
        throw DataError("write_pgm: payload size mismatch");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("write_pgm: cannot open " + path);
    f << "P5\n" << w << " " << h << "\n255\n";
    f.write(reinterpret_cast<const char*>(gray.data()),
            static_cast<std::streamsize>(gray.size()));
    if (!f) throw DataError("write_pgm: write failed for " + path);
}

Image resize_bilinear(const Image& img, int out_h, int out_w) {
    Image out;
    out.h = out_h;
    out.w = out_w;
    out.px.resize(static_cast<size_t>(out_h) * out_w * 3);
    for (int y = 0; y < out_h; ++y) {
        const float sy = out_h > 1 ? static_cast<float>(y) * (img.h - 1) / (out_h - 1) : 0.0f;
        const int y0 = static_cast<int>(sy);
        const int y1 = std::min(y0 + 1, img.h - 1);
        const float fy = sy - static_cast<float>(y0);
        for (int x = 0; x < out_w; ++x) {
            const float sx =
                out_w > 1 ? static_cast<float>(x) * (img.w - 1) / (out_w - 1) : 0.0f;
            const int x0 = static_cast<int>(sx);
            const int x1 = std::min(x0 + 1, img.w - 1);
            const float fx = sx - static_cast<float>(x0);
            for (int c = 0; c < 3; ++c) {
                const float top = img.at(y0, x0, c) * (1 - fx) + img.at(y0, x1, c) * fx;
                const float bot = img.at(y1, x0, c) * (1 - fx) + img.at(y1, x1, c) * fx;
                out.at(y, x, c) = top * (1 - fy) + bot * fy;
            }
        }
    }
    return out;
}

Image downscale_width_half(const Image& img) {
    if (img.w % 2 != 0) throw DataError("downscale_width_half: odd width");
    Image out;
    out.h = img.h;
    out.w = img.w / 2;
    out.px.resize(static_cast<size_t>(out.h) * out.w * 3);
    for (int y = 0; y < out.h; ++y)
        for (int x = 0; x < out.w; ++x)
            for (int c = 0; c < 3; ++c)
                out.at(y, x, c) = 0.5f * (img.at(y, 2 * x, c) + img.at(y, 2 * x + 1, c));
    return out;
}

Image concat_horizontal(const Image& a, const Image& b) {
    if (a.h != b.h) throw DataError("concat_horizontal: height mismatch");
    Image out;
    out.h = a.h;
    out.w = a.w + b.w;
    out.px.resize(static_cast<size_t>(out.h) * out.w * 3);
    for (int y = 0; y < out.h; ++y) {
        for (int x = 0; x < a.w; ++x)
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = a.at(y, x, c);
        for (int x = 0; x < b.w; ++x)
            for (int c = 0; c < 3; ++c) out.at(y, a.w + x, c) = b.at(y, x, c);
    }
    return out;
}

Image crop(const Image& img, int y0, int x0, int h, int w) {
    if (y0 < 0 || x0 < 0 || y0 + h > img.h || x0 + w > img.w)
        throw DataError("crop: region out of bounds");
    Image out;
    out.h = h;
    out.w = w;
    out.px.resize(static_cast<size_t>(h) * w * 3);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = img.at(y0 + y, x0 + x, c);
    return out;
}

}  // namespace sflow
