#pragma once

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "polarsynth/crc32.hpp"
#include "polarsynth/errors.hpp"
#include "polarsynth/grid.hpp"

namespace polarsynth::io {

// Minimal PNG codec on top of zlib. Writes 8/16-bit grayscale and 8-bit RGB
// (filter type None); reads non-interlaced grayscale/RGB/RGBA at 8 or 16 bits
// with all five scanline filters.

namespace pngdetail {

inline void put_u32(std::vector<uint8_t>& v, uint32_t x) {
    v.push_back(static_cast<uint8_t>(x >> 24));
    v.push_back(static_cast<uint8_t>(x >> 16));
    v.push_back(static_cast<uint8_t>(x >> 8));
    v.push_back(static_cast<uint8_t>(x));
}

inline void write_chunk(std::ofstream& f, const char type[4], const std::vector<uint8_t>& data) {
    std::vector<uint8_t> head;
    put_u32(head, static_cast<uint32_t>(data.size()));
    f.write(reinterpret_cast<const char*>(head.data()), 4);
    uint8_t tb[4] = {static_cast<uint8_t>(type[0]), static_cast<uint8_t>(type[1]),
                     static_cast<uint8_t>(type[2]), static_cast<uint8_t>(type[3])};
    uint32_t crc = crc32(tb, 4);
    crc = crc32(data.data(), data.size(), crc);
    f.write(reinterpret_cast<const char*>(tb), 4);
    if (!data.empty())
        f.write(reinterpret_cast<const char*>(data.data()),
                static_cast<std::streamsize>(data.size()));
    std::vector<uint8_t> tail;
    put_u32(tail, crc);
    f.write(reinterpret_cast<const char*>(tail.data()), 4);
}

inline std::vector<uint8_t> zlib_compress(const std::vector<uint8_t>& raw) {
    uLongf bound = compressBound(static_cast<uLong>(raw.size()));
    std::vector<uint8_t> out(bound);
    if (compress2(out.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
        throw IoError("png: zlib compression failed");
    out.resize(bound);
    return out;
}

inline std::vector<uint8_t> zlib_decompress(const std::vector<uint8_t>& comp, size_t expected) {
    std::vector<uint8_t> out(expected);
    uLongf n = static_cast<uLongf>(expected);
    int rc = uncompress(out.data(), &n, comp.data(), static_cast<uLong>(comp.size()));
    if (rc != Z_OK || n != expected) throw IoError("png: zlib decompression failed");
    return out;
}

inline void write_png(const std::string& path, int w, int h, int bit_depth, int color_type,
                      const std::vector<uint8_t>& samples /* big-endian, packed */) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("png: cannot open " + path);
    static const uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
    f.write(reinterpret_cast<const char*>(sig), 8);
    std::vector<uint8_t> ihdr;
    put_u32(ihdr, static_cast<uint32_t>(w));
    put_u32(ihdr, static_cast<uint32_t>(h));
    ihdr.push_back(static_cast<uint8_t>(bit_depth));
    ihdr.push_back(static_cast<uint8_t>(color_type));
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);
    write_chunk(f, "IHDR", ihdr);

    int channels = (color_type == 2) ? 3 : 1;
    size_t row_bytes = static_cast<size_t>(w) * channels * (bit_depth / 8);
    std::vector<uint8_t> raw;
    raw.reserve((row_bytes + 1) * h);
    for (int y = 0; y < h; ++y) {
        raw.push_back(0); // filter: None
        raw.insert(raw.end(), samples.begin() + y * row_bytes, samples.begin() + (y + 1) * row_bytes);
    }
    write_chunk(f, "IDAT", zlib_compress(raw));
    write_chunk(f, "IEND", {});
    if (!f) throw IoError("png: write failed for " + path);
}

inline int paeth(int a, int b, int c) {
    int p = a + b - c;
    int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

} // namespace pngdetail

struct PngImage {
    int width = 0, height = 0, channels = 0, bit_depth = 0;
    std::vector<double> samples; // row-major interleaved, normalized to [0,1]

    double luma(int y, int x) const {
        const double* p = &samples[(static_cast<size_t>(y) * width + x) * channels];
        if (channels >= 3) return 0.2126 * p[0] + 0.7152 * p[1] + 0.0722 * p[2];
        return p[0];
    }
};

// Values are clamped to [0,1] before quantization.
inline void write_png_gray8(const std::string& path, const RGrid& img) {
    std::vector<uint8_t> s(img.size());
    for (size_t i = 0; i < img.size(); ++i) {
        double v = std::min(1.0, std::max(0.0, img[i]));
        s[i] = static_cast<uint8_t>(std::lround(v * 255.0));
    }
    pngdetail::write_png(path, img.cols(), img.rows(), 8, 0, s);
}

inline void write_png_gray16(const std::string& path, const RGrid& img) {
    std::vector<uint8_t> s(img.size() * 2);
    for (size_t i = 0; i < img.size(); ++i) {
        double v = std::min(1.0, std::max(0.0, img[i]));
        auto q = static_cast<uint16_t>(std::lround(v * 65535.0));
        s[2 * i] = static_cast<uint8_t>(q >> 8);
        s[2 * i + 1] = static_cast<uint8_t>(q & 0xff);
    }
    pngdetail::write_png(path, img.cols(), img.rows(), 16, 0, s);
}

inline void write_png_rgb8(const std::string& path, const RGrid& r, const RGrid& g, const RGrid& b) {
    r.require_same(g);
    r.require_same(b);
    std::vector<uint8_t> s(r.size() * 3);
    for (size_t i = 0; i < r.size(); ++i) {
        auto q = [](double v) {
            return static_cast<uint8_t>(std::lround(std::min(1.0, std::max(0.0, v)) * 255.0));
        };
        s[3 * i] = q(r[i]);
        s[3 * i + 1] = q(g[i]);
        s[3 * i + 2] = q(b[i]);
    }
    pngdetail::write_png(path, r.cols(), r.rows(), 8, 2, s);
}

inline PngImage read_png(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("png: cannot open " + path);
    uint8_t sig[8];
    f.read(reinterpret_cast<char*>(sig), 8);
    static const uint8_t want[8] = {137, 80, 78, 71, 13, 10, 26, 10};
    if (f.gcount() != 8 || std::memcmp(sig, want, 8) != 0)
        throw IoError("png: bad signature in " + path);

    auto read_u32 = [&](const uint8_t* p) {
        return (static_cast<uint32_t>(p[0]) << 24) | (static_cast<uint32_t>(p[1]) << 16) |
               (static_cast<uint32_t>(p[2]) << 8) | p[3];
    };

    int w = 0, h = 0, bit_depth = 0, color_type = 0;
    std::vector<uint8_t> idat;
    bool done = false;
    while (!done) {
        uint8_t head[8];
        f.read(reinterpret_cast<char*>(head), 8);
        if (f.gcount() != 8) throw IoError("png: truncated chunk in " + path);
        uint32_t len = read_u32(head);
        std::string type(reinterpret_cast<char*>(head + 4), 4);
        std::vector<uint8_t> data(len);
        if (len) {
            f.read(reinterpret_cast<char*>(data.data()), len);
            if (f.gcount() != static_cast<std::streamsize>(len))
                throw IoError("png: truncated chunk data in " + path);
        }
        uint8_t crcb[4];
        f.read(reinterpret_cast<char*>(crcb), 4);
        uint32_t crc_want = read_u32(crcb);
        uint32_t crc_got = crc32(head + 4, 4);
        crc_got = crc32(data.data(), data.size(), crc_got);
        if (crc_want != crc_got) throw IoError("png: chunk checksum mismatch in " + path);

        if (type == "IHDR") {
            w = static_cast<int>(read_u32(&data[0]));
            h = static_cast<int>(read_u32(&data[4]));
            bit_depth = data[8];
            color_type = data[9];
            if (data[12] != 0) throw IoError("png: interlaced files unsupported: " + path);
            if (bit_depth != 8 && bit_depth != 16)
                throw IoError("png: unsupported bit depth in " + path);
            if (color_type != 0 && color_type != 2 && color_type != 6)
                throw IoError("png: unsupported color type in " + path);
        } else if (type == "IDAT") {
            idat.insert(idat.end(), data.begin(), data.end());
        } else if (type == "IEND") {
            done = true;
        }
        // ancillary chunks are skipped
    }
    if (w <= 0 || h <= 0) throw IoError("png: missing IHDR in " + path);

    int channels = (color_type == 0) ? 1 : (color_type == 2 ? 3 : 4);
    int bytes_per_sample = bit_depth / 8;
    size_t row_bytes = static_cast<size_t>(w) * channels * bytes_per_sample;
    size_t raw_size = (row_bytes + 1) * h;
    std::vector<uint8_t> raw = pngdetail::zlib_decompress(idat, raw_size);

    // undo scanline filters in place
    int bpp = channels * bytes_per_sample;
    std::vector<uint8_t> out(row_bytes * h);
    for (int y = 0; y < h; ++y) {
        uint8_t filter = raw[y * (row_bytes + 1)];
        const uint8_t* src = &raw[y * (row_bytes + 1) + 1];
        uint8_t* cur = &out[y * row_bytes];
        const uint8_t* up = (y > 0) ? &out[(y - 1) * row_bytes] : nullptr;
        for (size_t x = 0; x < row_bytes; ++x) {
            int a = (x >= static_cast<size_t>(bpp)) ? cur[x - bpp] : 0;
            int b = up ? up[x] : 0;
            int c = (up && x >= static_cast<size_t>(bpp)) ? up[x - bpp] : 0;
            int v = src[x];
            switch (filter) {
                case 0: break;
                case 1: v += a; break;
                case 2: v += b; break;
                case 3: v += (a + b) / 2; break;
                case 4: v += pngdetail::paeth(a, b, c); break;
                default: throw IoError("png: unknown filter type in " + path);
            }
            cur[x] = static_cast<uint8_t>(v & 0xff);
        }
    }

    PngImage img;
    img.width = w;
    img.height = h;
    img.channels = channels;
    img.bit_depth = bit_depth;
    img.samples.resize(static_cast<size_t>(w) * h * channels);
    double scale = (bit_depth == 8) ? 1.0 / 255.0 : 1.0 / 65535.0;
    for (size_t i = 0; i < img.samples.size(); ++i) {
        uint32_t v;
        if (bit_depth == 8) v = out[i];
        else v = (static_cast<uint32_t>(out[2 * i]) << 8) | out[2 * i + 1];
        img.samples[i] = v * scale;
    }
    return img;
}

inline RGrid luma_grid(const PngImage& img) {
    RGrid g(img.height, img.width);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) g(y, x) = img.luma(y, x);
    return g;
}

} // namespace polarsynth::io
