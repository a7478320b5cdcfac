#pragma once

#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "math.hpp"

namespace tofr {

struct Image {
    int w = 0, h = 0;
    std::vector<Vec3> px;

    Image() = default;
    Image(int w_, int h_) : w(w_), h(h_), px(size_t(w_) * h_) {}

    Vec3& at(int x, int y) { return px[size_t(y) * w + x]; }
    const Vec3& at(int x, int y) const { return px[size_t(y) * w + x]; }

    Image& operator+=(const Image& o) {
        for (size_t i = 0; i < px.size(); ++i) px[i] += o.px[i];
        return *this;
    }
    Image& operator*=(double s) {
        for (auto& p : px) p *= s;
        return *this;
    }
    double mean() const {
        double s = 0;
        for (const auto& p : px) s += (p.x + p.y + p.z) / 3.0;
        return px.empty() ? 0 : s / double(px.size());
    }
};

// Little-endian RGB PFM, rows bottom-to-top.
inline void write_pfm(const Image& img, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path);
    f << "PF\n" << img.w << " " << img.h << "\n-1.0\n";
    std::vector<float> row(size_t(img.w) * 3);
    for (int y = img.h - 1; y >= 0; --y) {
        for (int x = 0; x < img.w; ++x) {
            const Vec3& p = img.at(x, y);
            row[size_t(x) * 3 + 0] = float(p.x);
            row[size_t(x) * 3 + 1] = float(p.y);
            row[size_t(x) * 3 + 2] = float(p.z);
        }
        f.write(reinterpret_cast<const char*>(row.data()), std::streamsize(row.size() * 4));
    }
}

inline Image read_pfm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path);
    std::string magic;
    int w, h;
    double scale;
    f >> magic >> w >> h >> scale;
    if (magic != "PF") throw std::runtime_error(path + ": not a color PFM");
    f.get();  // single whitespace after the scale
    Image img(w, h);
    std::vector<float> row(size_t(w) * 3);
    for (int y = h - 1; y >= 0; --y) {
        f.read(reinterpret_cast<char*>(row.data()), std::streamsize(row.size() * 4));
        if (!f) throw std::runtime_error(path + ": truncated PFM");
        for (int x = 0; x < w; ++x)
            img.at(x, y) = {row[size_t(x) * 3], row[size_t(x) * 3 + 1], row[size_t(x) * 3 + 2]};
    }
    return img;
}

// Plain-text dump: "H W" header then one "r g b" triple per pixel, row-major.
inline void write_text_matrix(const Image& img, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot open " + path);
    f.precision(17);
    f << img.h << " " << img.w << "\n";
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) {
            const Vec3& p = img.at(x, y);
            f << p.x << " " << p.y << " " << p.z << "\n";
        }
}

inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t hash_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    std::string s = ss.str();
    return fnv1a64(s.data(), s.size());
}

}  // namespace tofr
