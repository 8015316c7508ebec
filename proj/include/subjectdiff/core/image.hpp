#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "subjectdiff/core/rng.hpp"

namespace sdg {

// CHW float image with values in [-1, 1].
struct ImageF {
    int c = 0, h = 0, w = 0;
    std::vector<float> v;

    ImageF() = default;
    ImageF(int c_, int h_, int w_) : c(c_), h(h_), w(w_), v(static_cast<size_t>(c_) * h_ * w_, 0.f) {}

    float& at(int ch, int y, int x) { return v[(static_cast<size_t>(ch) * h + y) * w + x]; }
    float at(int ch, int y, int x) const { return v[(static_cast<size_t>(ch) * h + y) * w + x]; }
    size_t numel() const { return v.size(); }
};

struct MaskImage {
    int h = 0, w = 0;
    std::vector<uint8_t> v;  // 0 or 1

    MaskImage() = default;
    MaskImage(int h_, int w_) : h(h_), w(w_), v(static_cast<size_t>(h_) * w_, 0) {}

    uint8_t& at(int y, int x) { return v[static_cast<size_t>(y) * w + x]; }
    uint8_t at(int y, int x) const { return v[static_cast<size_t>(y) * w + x]; }
    int count() const {
        int n = 0;
        for (uint8_t b : v) n += b;
        return n;
    }
};

inline uint8_t float_to_u8(float x) {
    const float y = (std::clamp(x, -1.f, 1.f) + 1.f) * 127.5f;
    return static_cast<uint8_t>(std::lround(y));
}

inline float u8_to_float(uint8_t b) { return static_cast<float>(b) / 127.5f - 1.f; }

// Lossless 8-bit RGB container (binary PPM, P6).
inline void write_ppm(const std::string& path, const ImageF& img) {
    if (img.c != 3) throw std::invalid_argument("write_ppm: need 3 channels");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << "P6\n" << img.w << " " << img.h << "\n255\n";
    std::vector<uint8_t> row(static_cast<size_t>(img.w) * 3);
    for (int y = 0; y < img.h; y++) {
        for (int x = 0; x < img.w; x++)
            for (int ch = 0; ch < 3; ch++) row[static_cast<size_t>(x) * 3 + ch] = float_to_u8(img.at(ch, y, x));
        f.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
    if (!f) throw std::runtime_error("write failed " + path);
}

inline ImageF read_ppm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot read " + path);
    std::string magic;
    int w, h, maxv;
    f >> magic >> w >> h >> maxv;
    if (magic != "P6" || maxv != 255) throw std::runtime_error("unsupported ppm: " + path);
    f.get();
    ImageF img(3, h, w);
    std::vector<uint8_t> row(static_cast<size_t>(w) * 3);
    for (int y = 0; y < h; y++) {
        f.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()));
        for (int x = 0; x < w; x++)
            for (int ch = 0; ch < 3; ch++) img.at(ch, y, x) = u8_to_float(row[static_cast<size_t>(x) * 3 + ch]);
    }
    if (!f) throw std::runtime_error("truncated ppm: " + path);
    return img;
}

// 1-bit lossless mask (binary PBM, P4). PBM convention: 1 = black; we store
// foreground as 1.
inline void write_pbm(const std::string& path, const MaskImage& m) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << "P4\n" << m.w << " " << m.h << "\n";
    const int row_bytes = (m.w + 7) / 8;
    std::vector<uint8_t> row(static_cast<size_t>(row_bytes));
    for (int y = 0; y < m.h; y++) {
        std::fill(row.begin(), row.end(), 0);
        for (int x = 0; x < m.w; x++)
            if (m.at(y, x)) row[static_cast<size_t>(x / 8)] |= static_cast<uint8_t>(0x80 >> (x % 8));
        f.write(reinterpret_cast<const char*>(row.data()), row_bytes);
    }
    if (!f) throw std::runtime_error("write failed " + path);
}

inline MaskImage read_pbm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot read " + path);
    std::string magic;
    int w, h;
    f >> magic >> w >> h;
    if (magic != "P4") throw std::runtime_error("unsupported pbm: " + path);
    f.get();
    MaskImage m(h, w);
    const int row_bytes = (w + 7) / 8;
    std::vector<uint8_t> row(static_cast<size_t>(row_bytes));
    for (int y = 0; y < h; y++) {
        f.read(reinterpret_cast<char*>(row.data()), row_bytes);
        for (int x = 0; x < w; x++) m.at(y, x) = (row[static_cast<size_t>(x / 8)] >> (7 - x % 8)) & 1;
    }
    if (!f) throw std::runtime_error("truncated pbm: " + path);
    return m;
}

// Tile images into a grid (row-major), separated by a 1px border.
inline ImageF make_grid(const std::vector<ImageF>& imgs, int per_row) {
    if (imgs.empty()) return ImageF(3, 1, 1);
    const int h = imgs[0].h, w = imgs[0].w;
    const int rows = (static_cast<int>(imgs.size()) + per_row - 1) / per_row;
    ImageF grid(3, rows * (h + 1) + 1, per_row * (w + 1) + 1);
    std::fill(grid.v.begin(), grid.v.end(), 1.f);
    for (size_t i = 0; i < imgs.size(); i++) {
        const int r = static_cast<int>(i) / per_row, c = static_cast<int>(i) % per_row;
        for (int ch = 0; ch < 3; ch++)
            for (int y = 0; y < h; y++)
                for (int x = 0; x < w; x++)
                    grid.at(ch, r * (h + 1) + 1 + y, c * (w + 1) + 1 + x) = imgs[i].at(ch, y, x);
    }
    return grid;
}

inline uint64_t image_hash(const ImageF& img) {
    // hash of the 8-bit quantized pixels, matching what lands on disk
    std::vector<uint8_t> q(img.numel());
    for (size_t i = 0; i < q.size(); i++) q[i] = float_to_u8(img.v[i]);
    uint64_t h = fnv1a64(q.data(), q.size());
    return h;
}

}  // namespace sdg
