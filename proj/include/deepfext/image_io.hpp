#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "deepfext/maps.hpp"
#include "deepfext/tensor.hpp"

namespace dfx {

// Interleaved raster samples as decoded from disk.
struct ImageBuffer {
    int width = 0;
    int height = 0;
    int channels = 0;   // 1 or 3 (alpha is dropped at decode)
    int bit_depth = 8;  // 8 or 16
    std::vector<std::uint16_t> samples;

    int maxval() const { return bit_depth == 16 ? 65535 : 255; }
};

// Decoders accept portable pixmaps/graymaps (P2/P3/P5/P6, maxval <= 255) and
// non-interlaced 8/16-bit PNG (gray, gray+alpha, RGB, RGBA). Anything else
// raises DataError naming the format; the README documents the one-line
// conversion to PNG.
ImageBuffer decode_image_file(const std::string& path);

Tensor decode_image(const std::string& path);   // (C,H,W), samples mapped to [0,1]
GrayMap decode_gray(const std::string& path);   // first channel, [0,1]
BinaryMap decode_mask(const std::string& path); // first channel thresholded at 0.5

// All writers are atomic (temp file + rename) and byte-deterministic.
void write_pgm(const std::string& path, const GrayMap& img);
void write_ppm(const std::string& path, const Tensor& rgb);  // (3,H,W) in [0,1]
void write_png_gray(const std::string& path, const GrayMap& img, int bits = 8);
void write_mask_png(const std::string& path, const BinaryMap& mask);  // values {0,255}
void write_labels_png(const std::string& path, const LabelMap& labels);  // raw class indices

// p -> round(p * (2^bits - 1)), clamped to [0,1] first.
std::uint16_t quantize_unit(float p, int bits);

void write_file_atomic(const std::string& path, const std::string& bytes);

}  // namespace dfx
