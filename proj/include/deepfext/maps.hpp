#pragma once

#include <cstdint>
#include <vector>

#include "deepfext/common.hpp"

namespace dfx {

// Single-channel float image, row-major.
struct GrayMap {
    int height = 0;
    int width = 0;
    std::vector<float> px;

    GrayMap() = default;
    GrayMap(int h, int w, float fill = 0.0f)
        : height(h), width(w), px(static_cast<std::size_t>(h) * w, fill) {}

    float& at(int y, int x) { return px[static_cast<std::size_t>(y) * width + x]; }
    float at(int y, int x) const { return px[static_cast<std::size_t>(y) * width + x]; }
    std::size_t size() const { return px.size(); }
};

// Strict {0,1} mask.
struct BinaryMap {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> px;

    BinaryMap() = default;
    BinaryMap(int h, int w, std::uint8_t fill = 0)
        : height(h), width(w), px(static_cast<std::size_t>(h) * w, fill) {}

    std::uint8_t& at(int y, int x) { return px[static_cast<std::size_t>(y) * width + x]; }
    std::uint8_t at(int y, int x) const { return px[static_cast<std::size_t>(y) * width + x]; }
    std::size_t size() const { return px.size(); }
    std::int64_t count() const {
        std::int64_t n = 0;
        for (auto v : px) n += v;
        return n;
    }
};

// Small-integer class-index image (argmax outputs).
struct LabelMap {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> px;

    LabelMap() = default;
    LabelMap(int h, int w) : height(h), width(w), px(static_cast<std::size_t>(h) * w, 0) {}
    std::uint8_t at(int y, int x) const { return px[static_cast<std::size_t>(y) * width + x]; }
};

inline void require_same_shape(const BinaryMap& a, const BinaryMap& b, const char* what) {
    if (a.height != b.height || a.width != b.width) {
        throw DataError(std::string(what) + ": shape mismatch " + std::to_string(a.height) + "x" +
                        std::to_string(a.width) + " vs " + std::to_string(b.height) + "x" +
                        std::to_string(b.width));
    }
}

}  // namespace dfx
