#pragma once

#include <zlib.h>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>
#include <vector>

#include "fixnoise/errors.hpp"
#include "fixnoise/hash.hpp"
#include "fixnoise/tensor.hpp"

namespace fixnoise {

/// 8-bit interleaved RGB raster, row-major.
struct Image8 {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<std::uint8_t> rgb;

    static Image8 blank(std::size_t w, std::size_t h) { return {w, h, std::vector<std::uint8_t>(w * h * 3, 0)}; }

    std::uint8_t* at(std::size_t x, std::size_t y) { return rgb.data() + (y * width + x) * 3; }
    const std::uint8_t* at(std::size_t x, std::size_t y) const { return rgb.data() + (y * width + x) * 3; }

    bool operator==(const Image8&) const = default;
};

namespace detail {

inline void put_be32(std::string& out, std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<char>((v >> s) & 0xff));
}

inline std::uint32_t get_be32(const unsigned char* p) {
    return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) | std::uint32_t{p[3]};
}

inline void put_chunk(std::string& out, const char type[4], std::string_view payload) {
    put_be32(out, static_cast<std::uint32_t>(payload.size()));
    std::string body(type, 4);
    body.append(payload);
    out += body;
    put_be32(out, static_cast<std::uint32_t>(crc32(0L, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size()))));
}

inline constexpr unsigned char kPngSignature[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};

inline int paeth(int a, int b, int c) {
    const int p = a + b - c;
    const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    return pb <= pc ? b : c;
}

}  // namespace detail

/// Non-interlaced 8-bit RGB PNG, filter type 0 on every row.
inline std::string png_encode(const Image8& img) {
    if (img.width == 0 || img.height == 0 || img.rgb.size() != img.width * img.height * 3) {
        throw DimensionError("png_encode: raster size does not match " + std::to_string(img.width) + "x" + std::to_string(img.height));
    }
    std::string raw;
    raw.reserve(img.height * (1 + img.width * 3));
    for (std::size_t y = 0; y < img.height; ++y) {
        raw.push_back(0);
        raw.append(reinterpret_cast<const char*>(img.at(0, y)), img.width * 3);
    }
    uLongf bound = compressBound(static_cast<uLong>(raw.size()));
    std::string packed(bound, '\0');
    if (compress2(reinterpret_cast<Bytef*>(packed.data()), &bound, reinterpret_cast<const Bytef*>(raw.data()),
                  static_cast<uLong>(raw.size()), 9) != Z_OK) {
        throw IoError("png_encode: deflate failed");
    }
    packed.resize(bound);

    std::string out(reinterpret_cast<const char*>(detail::kPngSignature), 8);
    std::string ihdr;
    detail::put_be32(ihdr, static_cast<std::uint32_t>(img.width));
    detail::put_be32(ihdr, static_cast<std::uint32_t>(img.height));
    ihdr += std::string{char(8), char(2), char(0), char(0), char(0)};  // depth 8, RGB, deflate, filter 0, no interlace
    detail::put_chunk(out, "IHDR", ihdr);
    detail::put_chunk(out, "IDAT", packed);
    detail::put_chunk(out, "IEND", {});
    return out;
}

/// Decodes 8-bit grayscale, RGB, gray+alpha and RGBA PNGs (alpha dropped)
/// with any of the five row filters. Interlaced and 16-bit files are
/// rejected.
inline Image8 png_decode(std::string_view bytes) {
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    if (bytes.size() < 8 || std::memcmp(p, detail::kPngSignature, 8) != 0) throw FormatError("not a PNG: bad signature");
    std::size_t pos = 8;
    std::size_t width = 0, height = 0;
    int channels = 0;
    bool seen_ihdr = false, seen_iend = false;
    std::string idat;
    while (pos < bytes.size()) {
        if (bytes.size() - pos < 12) throw FormatError("PNG chunk header truncated");
        const std::uint32_t len = detail::get_be32(p + pos);
        if (bytes.size() - pos - 12 < len) throw FormatError("PNG chunk payload truncated");
        const std::string_view type(bytes.data() + pos + 4, 4);
        const unsigned char* data = p + pos + 8;
        const auto crc = static_cast<std::uint32_t>(crc32(0L, p + pos + 4, len + 4));
        if (crc != detail::get_be32(data + len)) throw FormatError("PNG chunk " + std::string(type) + " fails its CRC");
        if (type == "IHDR") {
            if (len != 13) throw FormatError("PNG IHDR has wrong length");
            width = detail::get_be32(data);
            height = detail::get_be32(data + 4);
            const int depth = data[8], color = data[9], interlace = data[12];
            if (depth != 8) throw FormatError("PNG bit depth " + std::to_string(depth) + " unsupported (need 8)");
            if (interlace != 0) throw FormatError("interlaced PNG unsupported");
            if (data[10] != 0 || data[11] != 0) throw FormatError("PNG compression/filter method unsupported");
            switch (color) {
                case 0: channels = 1; break;
                case 2: channels = 3; break;
                case 4: channels = 2; break;
                case 6: channels = 4; break;
                default: throw FormatError("PNG color type " + std::to_string(color) + " unsupported");
            }
            if (width == 0 || height == 0 || width > (1u << 16) || height > (1u << 16)) throw FormatError("PNG extent out of range");
            seen_ihdr = true;
        } else if (type == "IDAT") {
            idat.append(reinterpret_cast<const char*>(data), len);
        } else if (type == "IEND") {
            seen_iend = true;
            break;
        }
        pos += 12 + len;
    }
    if (!seen_ihdr || !seen_iend || idat.empty()) throw FormatError("PNG is missing IHDR, IDAT or IEND");

    const std::size_t stride = width * static_cast<std::size_t>(channels);
    std::vector<unsigned char> raw(height * (stride + 1));
    uLongf raw_len = static_cast<uLongf>(raw.size());
    if (uncompress(raw.data(), &raw_len, reinterpret_cast<const Bytef*>(idat.data()), static_cast<uLong>(idat.size())) != Z_OK ||
        raw_len != raw.size()) {
        throw FormatError("PNG image data does not inflate to the declared size");
    }

    std::vector<unsigned char> prev(stride, 0), cur(stride);
    Image8 img = Image8::blank(width, height);
    const std::size_t bpp = static_cast<std::size_t>(channels);
    for (std::size_t y = 0; y < height; ++y) {
        const unsigned char filter = raw[y * (stride + 1)];
        const unsigned char* src = raw.data() + y * (stride + 1) + 1;
        for (std::size_t i = 0; i < stride; ++i) {
            const int a = i >= bpp ? cur[i - bpp] : 0;
            const int b = prev[i];
            const int c = i >= bpp ? prev[i - bpp] : 0;
            int pred = 0;
            switch (filter) {
                case 0: pred = 0; break;
                case 1: pred = a; break;
                case 2: pred = b; break;
                case 3: pred = (a + b) / 2; break;
                case 4: pred = detail::paeth(a, b, c); break;
                default: throw FormatError("PNG row " + std::to_string(y) + " has unknown filter " + std::to_string(filter));
            }
            cur[i] = static_cast<unsigned char>(src[i] + pred);
        }
        for (std::size_t x = 0; x < width; ++x) {
            const unsigned char* px = cur.data() + x * bpp;
            std::uint8_t* out = img.at(x, y);
            if (channels <= 2) {
                out[0] = out[1] = out[2] = px[0];
            } else {
                out[0] = px[0];
                out[1] = px[1];
                out[2] = px[2];
            }
        }
        std::swap(prev, cur);
    }
    return img;
}

/// [3 x H x W] tensor with x / 127.5 - 1.
inline Tensor image_to_tensor(const Image8& img) {
    const std::size_t hw = img.width * img.height;
    std::vector<double> data(3 * hw);
    for (std::size_t i = 0; i < hw; ++i)
        for (std::size_t c = 0; c < 3; ++c) data[c * hw + i] = static_cast<double>(img.rgb[i * 3 + c]) / 127.5 - 1.0;
    return Tensor::from_data({3, img.height, img.width}, std::move(data));
}

/// Inverse of image_to_tensor, rounding to nearest. Values outside [-1, 1]
/// are a contract violation; callers clamp explicitly when they mean to.
inline Image8 tensor_to_image(const Tensor& t) {
    const bool batched = t.rank() == 4 && t.dim(0) == 1;
    if (!(t.rank() == 3 || batched) || t.dim(batched ? 1 : 0) != 3) {
        throw DimensionError("expected a [3 x H x W] image, got " + shape_str(t.shape()));
    }
    const std::size_t h = t.dim(batched ? 2 : 1), w = t.dim(batched ? 3 : 2), hw = h * w;
    Image8 img = Image8::blank(w, h);
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < hw; ++i) {
            const double v = t[c * hw + i];
            if (!(v >= -1.0 && v <= 1.0)) {
                throw ContractError("pixel value " + std::to_string(v) + " outside [-1, 1]; clamp before encoding");
            }
            img.rgb[i * 3 + c] = static_cast<std::uint8_t>(std::lround((v + 1.0) * 127.5));
        }
    return img;
}

inline void write_png(const std::string& path, const Image8& img) { write_file_bytes(path, png_encode(img)); }

inline Image8 read_png(const std::string& path) { return png_decode(read_file_bytes(path)); }

/// Tiles equally sized images into rows x cols.
inline Image8 tile_images(const std::vector<Image8>& cells, std::size_t rows, std::size_t cols) {
    if (cells.size() != rows * cols || cells.empty()) throw DimensionError("grid needs rows * cols cells");
    const std::size_t cw = cells.front().width, ch = cells.front().height;
    Image8 grid = Image8::blank(cw * cols, ch * rows);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) {
            const Image8& cell = cells[r * cols + c];
            if (cell.width != cw || cell.height != ch) throw DimensionError("grid cells differ in size");
            for (std::size_t y = 0; y < ch; ++y) std::memcpy(grid.at(c * cw, r * ch + y), cell.at(0, y), cw * 3);
        }
    return grid;
}

}  // namespace fixnoise
