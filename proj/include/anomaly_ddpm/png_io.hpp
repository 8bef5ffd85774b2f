#pragma once

#include <png.h>

#include <csetjmp>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "anomaly_ddpm/errors.hpp"
#include "anomaly_ddpm/serialize.hpp"

namespace anomaly_ddpm {

struct GrayImageBuffer {
    int width = 0;
    int height = 0;
    int bit_depth = 0;              // 8 or 16
    std::vector<uint16_t> pixels;   // row-major, native range [0, 2^bit_depth - 1]
};

namespace detail {

struct PngReadState {
    const std::string* bytes;
    size_t pos;
};

inline void png_mem_read(png_structp png, png_bytep out, png_size_t n) {
    auto* st = static_cast<PngReadState*>(png_get_io_ptr(png));
    if (st->pos + n > st->bytes->size()) png_error(png, "unexpected end of PNG stream");
    std::memcpy(out, st->bytes->data() + st->pos, n);
    st->pos += n;
}

inline void png_mem_write(png_structp png, png_bytep data, png_size_t n) {
    auto* out = static_cast<std::string*>(png_get_io_ptr(png));
    out->append(reinterpret_cast<const char*>(data), n);
}

inline void png_mem_flush(png_structp) {}

}  // namespace detail

// Reads an 8- or 16-bit grayscale PNG. Any other color type is rejected.
inline GrayImageBuffer read_gray_png(const std::filesystem::path& path) {
    std::string bytes = read_file_bytes(path);
    if (bytes.size() < 8 || png_sig_cmp(reinterpret_cast<png_const_bytep>(bytes.data()), 0, 8) != 0)
        throw DataError("not a PNG file: " + path.string());

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("png_create_read_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw IoError("png_create_info_struct failed");
    }

    GrayImageBuffer img;
    std::vector<png_bytep> rows;
    std::vector<uint8_t> raw;
    detail::PngReadState st{&bytes, 0};

    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DataError("corrupt PNG: " + path.string());
    }

    png_set_read_fn(png, &st, detail::png_mem_read);
    png_read_info(png, info);

    int color_type = png_get_color_type(png, info);
    int bit_depth = png_get_bit_depth(png, info);
    if (color_type != PNG_COLOR_TYPE_GRAY) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DataError("non-grayscale PNG (color type " + std::to_string(color_type) +
                        "): " + path.string());
    }
    if (bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    png_read_update_info(png, info);
    bit_depth = png_get_bit_depth(png, info);

    img.width = static_cast<int>(png_get_image_width(png, info));
    img.height = static_cast<int>(png_get_image_height(png, info));
    img.bit_depth = bit_depth;

    size_t rowbytes = png_get_rowbytes(png, info);
    raw.assign(rowbytes * static_cast<size_t>(img.height), 0);
    rows.resize(static_cast<size_t>(img.height));
    for (int y = 0; y < img.height; ++y) rows[static_cast<size_t>(y)] = raw.data() + rowbytes * static_cast<size_t>(y);
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);

    img.pixels.resize(static_cast<size_t>(img.width) * img.height);
    if (bit_depth == 8) {
        for (size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = raw[i];
    } else {
        // PNG stores 16-bit big-endian
        for (size_t i = 0; i < img.pixels.size(); ++i)
            img.pixels[i] = static_cast<uint16_t>((raw[2 * i] << 8) | raw[2 * i + 1]);
    }
    return img;
}

// Writes grayscale PNG at the requested bit depth (8 or 16); values are
// expected in the native range for that depth.
inline void write_gray_png(const std::filesystem::path& path, const std::vector<uint16_t>& pixels,
                           int width, int height, int bit_depth) {
    if (bit_depth != 8 && bit_depth != 16) throw IoError("png bit depth must be 8 or 16");
    if (static_cast<size_t>(width) * height != pixels.size()) throw ShapeError("png pixel count mismatch");

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw IoError("png_create_info_struct failed");
    }

    std::string out;
    std::vector<uint8_t> raw;
    std::vector<png_bytep> rows;

    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("png write failed: " + path.string());
    }

    png_set_write_fn(png, &out, detail::png_mem_write, detail::png_mem_flush);
    png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height),
                 bit_depth, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);

    size_t rowbytes = static_cast<size_t>(width) * (bit_depth / 8);
    raw.assign(rowbytes * static_cast<size_t>(height), 0);
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            uint16_t v = pixels[static_cast<size_t>(y) * width + x];
            if (bit_depth == 8) {
                raw[static_cast<size_t>(y) * rowbytes + x] = static_cast<uint8_t>(v & 0xff);
            } else {
                raw[static_cast<size_t>(y) * rowbytes + 2 * x] = static_cast<uint8_t>(v >> 8);
                raw[static_cast<size_t>(y) * rowbytes + 2 * x + 1] = static_cast<uint8_t>(v & 0xff);
            }
        }
    }
    rows.resize(static_cast<size_t>(height));
    for (int y = 0; y < height; ++y) rows[static_cast<size_t>(y)] = raw.data() + rowbytes * static_cast<size_t>(y);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);

    atomic_write_file(path, out);
}

// Float image in [0,1] to PNG.
inline void write_float_png(const std::filesystem::path& path, const float* values, int width,
                            int height, int bit_depth) {
    const float scale = bit_depth == 8 ? 255.0f : 65535.0f;
    std::vector<uint16_t> px(static_cast<size_t>(width) * height);
    for (size_t i = 0; i < px.size(); ++i) {
        float v = values[i];
        v = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
        px[i] = static_cast<uint16_t>(std::lround(v * scale));
    }
    write_gray_png(path, px, width, height, bit_depth);
}

}  // namespace anomaly_ddpm
