#include "deepfext/image_io.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace dfx {

namespace {

std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open image file: " + path);
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return bytes;
}

std::string identify_foreign_format(const std::string& b) {
    if (b.size() >= 4 && b.compare(0, 4, "GIF8") == 0) return "GIF";
    if (b.size() >= 2 && ((b[0] == 'I' && b[1] == 'I') || (b[0] == 'M' && b[1] == 'M'))) return "TIFF";
    if (b.size() >= 2 && static_cast<unsigned char>(b[0]) == 0xff &&
        static_cast<unsigned char>(b[1]) == 0xd8)
        return "JPEG";
    if (b.size() >= 2 && b[0] == 'B' && b[1] == 'M') return "BMP";
    if (b.size() >= 2 && static_cast<unsigned char>(b[0]) == 0x1f &&
        static_cast<unsigned char>(b[1]) == 0x8b)
        return "gzip";
    return "unknown";
}

// ---- PNM ----

struct PnmCursor {
    const std::string& b;
    std::size_t i = 0;
};

int pnm_next_int(PnmCursor& c, const std::string& path) {
    // skip whitespace and '#' comments
    while (c.i < c.b.size()) {
        char ch = c.b[c.i];
        if (ch == '#') {
            while (c.i < c.b.size() && c.b[c.i] != '\n') ++c.i;
        } else if (std::isspace(static_cast<unsigned char>(ch))) {
            ++c.i;
        } else {
            break;
        }
    }
    if (c.i >= c.b.size() || !std::isdigit(static_cast<unsigned char>(c.b[c.i]))) {
        throw DataError("malformed PNM header in " + path);
    }
    long v = 0;
    while (c.i < c.b.size() && std::isdigit(static_cast<unsigned char>(c.b[c.i]))) {
        v = v * 10 + (c.b[c.i] - '0');
        ++c.i;
    }
    return static_cast<int>(v);
}

ImageBuffer decode_pnm(const std::string& bytes, const std::string& path) {
    const char kind = bytes[1];
    const bool ascii = (kind == '2' || kind == '3');
    const int channels = (kind == '3' || kind == '6') ? 3 : 1;
    PnmCursor c{bytes, 2};
    ImageBuffer img;
    img.channels = channels;
    img.width = pnm_next_int(c, path);
    img.height = pnm_next_int(c, path);
    const int maxval = pnm_next_int(c, path);
    if (img.width < 1 || img.height < 1) throw DataError("bad PNM dimensions in " + path);
    if (maxval < 1 || maxval > 255) {
        throw DataError("PNM maxval " + std::to_string(maxval) + " unsupported (expect <= 255): " + path);
    }
    img.bit_depth = 8;
    const std::size_t n = static_cast<std::size_t>(img.width) * img.height * channels;
    img.samples.resize(n);
    if (ascii) {
        for (std::size_t k = 0; k < n; ++k) {
            int v = pnm_next_int(c, path);
            img.samples[k] = static_cast<std::uint16_t>(std::min(v, maxval) * 255 / maxval);
        }
    } else {
        ++c.i;  // single whitespace after maxval
        if (c.i + n > bytes.size()) throw DataError("truncated PNM payload in " + path);
        for (std::size_t k = 0; k < n; ++k) {
            int v = static_cast<unsigned char>(bytes[c.i + k]);
            img.samples[k] = static_cast<std::uint16_t>(std::min(v, maxval) * 255 / maxval);
        }
    }
    return img;
}

// ---- PNG ----

std::uint32_t be32(const unsigned char* p) {
    return (static_cast<std::uint32_t>(p[0]) << 24) | (static_cast<std::uint32_t>(p[1]) << 16) |
           (static_cast<std::uint32_t>(p[2]) << 8) | p[3];
}

int paeth(int a, int b, int c) {
    int p = a + b - c;
    int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

ImageBuffer decode_png(const std::string& bytes, const std::string& path) {
    static const unsigned char sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    if (bytes.size() < 8 || std::memcmp(bytes.data(), sig, 8) != 0) {
        throw DataError("corrupt PNG signature: " + path);
    }
    const unsigned char* data = reinterpret_cast<const unsigned char*>(bytes.data());
    std::size_t i = 8;
    std::uint32_t width = 0, height = 0;
    int bit_depth = 0, color_type = -1;
    std::string idat;
    bool saw_iend = false;
    while (i + 8 <= bytes.size() && !saw_iend) {
        const std::uint32_t len = be32(data + i);
        if (i + 12 + len > bytes.size()) throw DataError("truncated PNG chunk in " + path);
        const char* type = bytes.data() + i + 4;
        const unsigned char* payload = data + i + 8;
        const std::uint32_t want_crc = be32(data + i + 8 + len);
        std::uint32_t got_crc = static_cast<std::uint32_t>(
            crc32(crc32(0L, data + i + 4, 4), payload, len));
        if (want_crc != got_crc) throw DataError("PNG chunk CRC mismatch in " + path);
        if (std::memcmp(type, "IHDR", 4) == 0) {
            if (len != 13) throw DataError("bad IHDR in " + path);
            width = be32(payload);
            height = be32(payload + 4);
            bit_depth = payload[8];
            color_type = payload[9];
            if (payload[10] != 0 || payload[11] != 0) throw DataError("unsupported PNG compression/filter method: " + path);
            if (payload[12] != 0) throw DataError("interlaced PNG unsupported: " + path + " (re-encode without interlacing)");
        } else if (std::memcmp(type, "IDAT", 4) == 0) {
            idat.append(reinterpret_cast<const char*>(payload), len);
        } else if (std::memcmp(type, "IEND", 4) == 0) {
            saw_iend = true;
        } else if (std::memcmp(type, "PLTE", 4) == 0) {
            throw DataError("palette PNG unsupported: " + path + " (convert to grayscale or RGB)");
        }
        i += 12 + len;
    }
    if (width == 0 || height == 0) throw DataError("missing IHDR in " + path);
    if (bit_depth != 8 && bit_depth != 16) {
        throw DataError("PNG bit depth " + std::to_string(bit_depth) + " unsupported (expect 8 or 16): " + path);
    }
    int channels;
    switch (color_type) {
        case 0: channels = 1; break;
        case 2: channels = 3; break;
        case 4: channels = 2; break;
        case 6: channels = 4; break;
        default: throw DataError("PNG color type " + std::to_string(color_type) + " unsupported: " + path);
    }

    const int bytes_per_sample = bit_depth / 8;
    const std::size_t stride = static_cast<std::size_t>(width) * channels * bytes_per_sample;
    const std::size_t raw_len = (stride + 1) * height;
    std::vector<unsigned char> raw(raw_len);
    uLongf out_len = raw_len;
    int zrc = uncompress(raw.data(), &out_len, reinterpret_cast<const Bytef*>(idat.data()),
                         static_cast<uLong>(idat.size()));
    if (zrc != Z_OK || out_len != raw_len) throw DataError("PNG inflate failed in " + path);

    const int bpp = channels * bytes_per_sample;
    std::vector<unsigned char> prev(stride, 0), cur(stride);
    const int out_channels = (channels == 2) ? 1 : (channels == 4 ? 3 : channels);
    ImageBuffer img;
    img.width = static_cast<int>(width);
    img.height = static_cast<int>(height);
    img.channels = out_channels;
    img.bit_depth = bit_depth;
    img.samples.resize(static_cast<std::size_t>(width) * height * out_channels);

    for (std::uint32_t y = 0; y < height; ++y) {
        const unsigned char* line = raw.data() + y * (stride + 1);
        const int filter = line[0];
        const unsigned char* src = line + 1;
        for (std::size_t x = 0; x < stride; ++x) {
            const int a = x >= static_cast<std::size_t>(bpp) ? cur[x - bpp] : 0;
            const int b = prev[x];
            const int c = x >= static_cast<std::size_t>(bpp) ? prev[x - bpp] : 0;
            int v = src[x];
            switch (filter) {
                case 0: break;
                case 1: v += a; break;
                case 2: v += b; break;
                case 3: v += (a + b) / 2; break;
                case 4: v += paeth(a, b, c); break;
                default: throw DataError("PNG filter type " + std::to_string(filter) + " invalid in " + path);
            }
            cur[x] = static_cast<unsigned char>(v & 0xff);
        }
        for (std::uint32_t x = 0; x < width; ++x) {
            for (int ch = 0; ch < out_channels; ++ch) {
                const std::size_t s = (static_cast<std::size_t>(x) * channels + ch) * bytes_per_sample;
                std::uint16_t v = bytes_per_sample == 1
                                      ? cur[s]
                                      : static_cast<std::uint16_t>((cur[s] << 8) | cur[s + 1]);
                img.samples[(static_cast<std::size_t>(y) * width + x) * out_channels + ch] = v;
            }
        }
        std::swap(prev, cur);
    }
    return img;
}

void append_be32(std::string& out, std::uint32_t v) {
    out.push_back(static_cast<char>((v >> 24) & 0xff));
    out.push_back(static_cast<char>((v >> 16) & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
    out.push_back(static_cast<char>(v & 0xff));
}

void append_chunk(std::string& out, const char type[4], const std::string& payload) {
    append_be32(out, static_cast<std::uint32_t>(payload.size()));
    out.append(type, 4);
    out.append(payload);
    std::uint32_t crc = static_cast<std::uint32_t>(crc32(0L, nullptr, 0));
    crc = static_cast<std::uint32_t>(crc32(crc, reinterpret_cast<const Bytef*>(type), 4));
    crc = static_cast<std::uint32_t>(
        crc32(crc, reinterpret_cast<const Bytef*>(payload.data()), static_cast<uInt>(payload.size())));
    append_be32(out, crc);
}

std::string encode_png_gray(const std::vector<std::uint16_t>& px, int w, int h, int bits) {
    const int bytes_per_sample = bits / 8;
    const std::size_t stride = static_cast<std::size_t>(w) * bytes_per_sample;
    std::string raw;
    raw.reserve((stride + 1) * h);
    for (int y = 0; y < h; ++y) {
        raw.push_back('\0');  // filter 0
        for (int x = 0; x < w; ++x) {
            std::uint16_t v = px[static_cast<std::size_t>(y) * w + x];
            if (bits == 16) {
                raw.push_back(static_cast<char>((v >> 8) & 0xff));
                raw.push_back(static_cast<char>(v & 0xff));
            } else {
                raw.push_back(static_cast<char>(v & 0xff));
            }
        }
    }
    uLongf comp_cap = compressBound(static_cast<uLong>(raw.size()));
    std::string comp(comp_cap, '\0');
    compress2(reinterpret_cast<Bytef*>(comp.data()), &comp_cap,
              reinterpret_cast<const Bytef*>(raw.data()), static_cast<uLong>(raw.size()), 6);
    comp.resize(comp_cap);

    std::string out("\x89PNG\r\n\x1a\n", 8);
    std::string ihdr;
    append_be32(ihdr, static_cast<std::uint32_t>(w));
    append_be32(ihdr, static_cast<std::uint32_t>(h));
    ihdr.push_back(static_cast<char>(bits));
    ihdr.push_back('\0');  // gray
    ihdr.append(3, '\0');  // compression, filter, interlace
    append_chunk(out, "IHDR", ihdr);
    append_chunk(out, "IDAT", comp);
    append_chunk(out, "IEND", "");
    return out;
}

}  // namespace

ImageBuffer decode_image_file(const std::string& path) {
    const std::string bytes = read_file(path);
    if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] >= '2' && bytes[1] <= '6') {
        if (bytes[1] == '4' || bytes[1] == '1') {
            throw DataError("PBM bitmaps unsupported: " + path + " (convert to PGM/PNG)");
        }
        return decode_pnm(bytes, path);
    }
    if (bytes.size() >= 8 && static_cast<unsigned char>(bytes[0]) == 0x89 && bytes[1] == 'P') {
        return decode_png(bytes, path);
    }
    throw DataError("unsupported raster format (" + identify_foreign_format(bytes) + "): " + path +
                    "; convert it to PNG or PPM/PGM first (see README, e.g. `magick in.tif out.png`)");
}

Tensor decode_image(const std::string& path) {
    ImageBuffer img = decode_image_file(path);
    Tensor t(Shape{img.channels, img.height, img.width});
    const float inv = 1.0f / static_cast<float>(img.maxval());
    for (int c = 0; c < img.channels; ++c) {
        for (int y = 0; y < img.height; ++y) {
            for (int x = 0; x < img.width; ++x) {
                t.at3(c, y, x) = img.samples[(static_cast<std::size_t>(y) * img.width + x) * img.channels + c] * inv;
            }
        }
    }
    return t;
}

GrayMap decode_gray(const std::string& path) {
    ImageBuffer img = decode_image_file(path);
    GrayMap m(img.height, img.width);
    const float inv = 1.0f / static_cast<float>(img.maxval());
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            m.at(y, x) = img.samples[(static_cast<std::size_t>(y) * img.width + x) * img.channels] * inv;
        }
    }
    return m;
}

BinaryMap decode_mask(const std::string& path) {
    GrayMap g = decode_gray(path);
    BinaryMap m(g.height, g.width);
    for (std::size_t i = 0; i < g.px.size(); ++i) m.px[i] = g.px[i] >= 0.5f ? 1 : 0;
    return m;
}

void write_file_atomic(const std::string& path, const std::string& bytes) {
    namespace fs = std::filesystem;
    fs::path target(path);
    fs::path tmp = target;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw DataError("cannot write file: " + tmp.string());
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!f) throw DataError("short write to: " + tmp.string());
    }
    fs::rename(tmp, target);
}

std::uint16_t quantize_unit(float p, int bits) {
    const float c = std::clamp(p, 0.0f, 1.0f);
    const int maxv = bits == 16 ? 65535 : 255;
    return static_cast<std::uint16_t>(std::lround(static_cast<double>(c) * maxv));
}

void write_pgm(const std::string& path, const GrayMap& img) {
    std::string out = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
    out.reserve(out.size() + img.px.size());
    for (float p : img.px) out.push_back(static_cast<char>(quantize_unit(p, 8)));
    write_file_atomic(path, out);
}

void write_ppm(const std::string& path, const Tensor& rgb) {
    if (rgb.shape.rank() != 3 || rgb.shape[0] != 3) {
        throw ShapeError("write_ppm expects (3,H,W), got " + rgb.shape.str());
    }
    const std::int64_t h = rgb.shape[1], w = rgb.shape[2];
    std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    for (std::int64_t y = 0; y < h; ++y) {
        for (std::int64_t x = 0; x < w; ++x) {
            for (int c = 0; c < 3; ++c) out.push_back(static_cast<char>(quantize_unit(rgb.at3(c, y, x), 8)));
        }
    }
    write_file_atomic(path, out);
}

void write_png_gray(const std::string& path, const GrayMap& img, int bits) {
    if (bits != 8 && bits != 16) throw ConfigError("PNG bit depth must be 8 or 16");
    std::vector<std::uint16_t> px(img.px.size());
    for (std::size_t i = 0; i < img.px.size(); ++i) px[i] = quantize_unit(img.px[i], bits);
    write_file_atomic(path, encode_png_gray(px, img.width, img.height, bits));
}

void write_mask_png(const std::string& path, const BinaryMap& mask) {
    std::vector<std::uint16_t> px(mask.px.size());
    for (std::size_t i = 0; i < mask.px.size(); ++i) px[i] = mask.px[i] ? 255 : 0;
    write_file_atomic(path, encode_png_gray(px, mask.width, mask.height, 8));
}

void write_labels_png(const std::string& path, const LabelMap& labels) {
    std::vector<std::uint16_t> px(labels.px.size());
    for (std::size_t i = 0; i < labels.px.size(); ++i) px[i] = labels.px[i];
    write_file_atomic(path, encode_png_gray(px, labels.width, labels.height, 8));
}

}  // namespace dfx
