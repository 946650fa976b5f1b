#pragma once

// Shared synthetic fixtures: vessel-like test images, random blob masks and
// miniature dataset trees.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>

#include "deepfext/dataset.hpp"
#include "deepfext/image_io.hpp"
#include "deepfext/maps.hpp"
#include "deepfext/tensor.hpp"

namespace fixtures {

struct SyntheticImage {
    dfx::Tensor image;       // (3,H,W)
    dfx::BinaryMap mask;
};

// Bright bars and circular arcs (widths 3..7) on a dark background with a
// mild horizontal gradient.
inline SyntheticImage make_vessel_image(int h, int w, std::uint64_t seed = 0) {
    dfx::BinaryMap mask(h, w);
    auto put = [&](int y, int x) {
        if (y >= 0 && y < h && x >= 0 && x < w) mask.at(y, x) = 1;
    };
    const int off = static_cast<int>(seed % 5);

    // horizontal bar, width 5
    for (int y = h / 5 + off; y < h / 5 + off + 5 && y < h; ++y) {
        for (int x = 3; x < w - 3; ++x) put(y, x);
    }
    // vertical bar, width 3
    for (int x = w / 3 + off; x < w / 3 + off + 3 && x < w; ++x) {
        for (int y = 3; y < h - 3; ++y) put(y, x);
    }
    // diagonal bar, width 4
    for (int t = 0; t < std::min(h, w) - 8; ++t) {
        for (int d = 0; d < 4; ++d) put(4 + t, 4 + t + d);
    }
    // two circular arcs, widths 7 and 3
    const double cy = 0.62 * h, cx = 0.58 * w;
    const double r1 = 0.30 * std::min(h, w), r2 = 0.18 * std::min(h, w);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const double r = std::hypot(y - cy, x - cx);
            if (std::abs(r - r1) < 3.5) put(y, x);
            if (std::abs(r - r2) < 1.5 && x >= cx) put(y, x);
        }
    }

    dfx::Tensor img(dfx::Shape{3, h, w});
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const float grad = 0.05f * static_cast<float>(x) / static_cast<float>(w);
            const float base = mask.at(y, x) ? 0.85f : 0.12f;
            img.at3(0, y, x) = base + grad;
            img.at3(1, y, x) = base * 0.9f + grad;
            img.at3(2, y, x) = base * 0.75f + grad;
        }
    }
    return {std::move(img), std::move(mask)};
}

// Union of 2..5 discs with radius 2..6.
inline dfx::BinaryMap make_blob_mask(int h, int w, std::mt19937_64& rng) {
    dfx::BinaryMap m(h, w);
    const int blobs = 2 + static_cast<int>(rng() % 4);
    for (int b = 0; b < blobs; ++b) {
        const int r = 2 + static_cast<int>(rng() % 5);
        const int cy = r + 1 + static_cast<int>(rng() % std::max(1, h - 2 * r - 2));
        const int cx = r + 1 + static_cast<int>(rng() % std::max(1, w - 2 * r - 2));
        for (int y = cy - r; y <= cy + r; ++y) {
            for (int x = cx - r; x <= cx + r; ++x) {
                if (y >= 0 && y < h && x >= 0 && x < w &&
                    (y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r) {
                    m.at(y, x) = 1;
                }
            }
        }
    }
    return m;
}

inline dfx::GrayMap mask_to_gray(const dfx::BinaryMap& m) {
    dfx::GrayMap g(m.height, m.width);
    for (std::size_t i = 0; i < m.px.size(); ++i) g.px[i] = m.px[i] ? 1.0f : 0.0f;
    return g;
}

// Uniform random probability map and mask for metric fuzzing.
inline dfx::GrayMap random_prob(int h, int w, std::mt19937_64& rng) {
    dfx::GrayMap g(h, w);
    for (float& p : g.px) p = static_cast<float>((rng() >> 11) * 0x1.0p-53);
    return g;
}

inline dfx::BinaryMap random_mask(int h, int w, std::mt19937_64& rng) {
    dfx::BinaryMap m(h, w);
    for (auto& p : m.px) p = (rng() & 1) ? 1 : 0;
    return m;
}

// A custom-layout dataset tree with n synthetic images.
inline std::filesystem::path write_custom_dataset(const std::filesystem::path& root, int n, int h,
                                                  int w, bool with_fov = false) {
    namespace fs = std::filesystem;
    fs::create_directories(root / "images");
    fs::create_directories(root / "masks");
    if (with_fov) fs::create_directories(root / "fov");
    for (int i = 0; i < n; ++i) {
        SyntheticImage s = make_vessel_image(h, w, static_cast<std::uint64_t>(i));
        const std::string stem = "img" + std::to_string(i);
        dfx::write_ppm((root / "images" / (stem + ".ppm")).string(), s.image);
        dfx::write_mask_png((root / "masks" / (stem + ".png")).string(), s.mask);
        if (with_fov) {
            dfx::BinaryMap fov(h, w, 1);
            for (int x = 0; x < w; ++x) fov.at(0, x) = 0;  // clip one row
            dfx::write_mask_png((root / "fov" / (stem + ".png")).string(), fov);
        }
    }
    return root;
}

}  // namespace fixtures
