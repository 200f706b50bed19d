#pragma once

#include <png.h>

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "nucleo/errors.hpp"
#include "nucleo/maskops.hpp"
#include "nucleo/tensor.hpp"

namespace nucleo {

/// Interleaved 8-bit RGB image.
struct ImageU8 {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> rgb;  // height*width*3

    std::uint8_t at(int y, int x, int c) const {
        return rgb[(static_cast<size_t>(y) * width + x) * 3 + static_cast<size_t>(c)];
    }
    void set(int y, int x, int c, std::uint8_t v) {
        rgb[(static_cast<size_t>(y) * width + x) * 3 + static_cast<size_t>(c)] = v;
    }
};

/// Decodes any 8/16-bit gray/palette/RGB/RGBA PNG to RGB8 (gray replicated,
/// alpha dropped).
inline ImageU8 read_png(const std::string& path) {
    png_image img;
    std::memset(&img, 0, sizeof(img));
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&img, path.c_str()))
        throw DataError("read_png: cannot read " + path + ": " + img.message);
    img.format = PNG_FORMAT_RGB;
    ImageU8 out;
    out.height = static_cast<int>(img.height);
    out.width = static_cast<int>(img.width);
    out.rgb.resize(PNG_IMAGE_SIZE(img));
    if (!png_image_finish_read(&img, nullptr, out.rgb.data(), 0, nullptr)) {
        png_image_free(&img);
        throw DataError("read_png: decode failed for " + path + ": " + img.message);
    }
    return out;
}

inline void write_png(const std::string& path, const ImageU8& image) {
    png_image img;
    std::memset(&img, 0, sizeof(img));
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(image.width);
    img.height = static_cast<png_uint_32>(image.height);
    img.format = PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&img, path.c_str(), 0, image.rgb.data(), 0, nullptr))
        throw DataError("write_png: cannot write " + path + ": " + img.message);
}

inline void write_png_gray(const std::string& path, int height, int width,
                           const std::vector<std::uint8_t>& gray) {
    png_image img;
    std::memset(&img, 0, sizeof(img));
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(width);
    img.height = static_cast<png_uint_32>(height);
    img.format = PNG_FORMAT_GRAY;
    if (!png_image_write_to_file(&img, path.c_str(), 0, gray.data(), 0, nullptr))
        throw DataError("write_png_gray: cannot write " + path + ": " + img.message);
}

/// [3,H,W] float tensor with raw 0-255 values.
inline Tensor<float> image_to_tensor(const ImageU8& img) {
    Tensor<float> t({3, img.height, img.width});
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x)
                t[(static_cast<long>(c) * img.height + y) * img.width + x] =
                    static_cast<float>(img.at(y, x, c));
    return t;
}

/// Nonzero pixels (any channel) become mask foreground.
inline Mask mask_from_image(const ImageU8& img) {
    Mask m(img.height, img.width);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            if (img.at(y, x, 0) || img.at(y, x, 1) || img.at(y, x, 2)) m.set(y, x, 1);
    return m;
}

inline std::vector<std::uint8_t> mask_to_gray(const Mask& m) {
    std::vector<std::uint8_t> g(m.bits.size());
    for (size_t i = 0; i < m.bits.size(); ++i) g[i] = m.bits[i] ? 255 : 0;
    return g;
}

/// Draws mask contours (foreground pixels with a 4-neighbour background) onto
/// the image, cycling a small color palette per instance.
inline void draw_mask_contours(ImageU8& image, const std::vector<Mask>& masks) {
    static const std::uint8_t palette[6][3] = {{255, 60, 60},  {60, 255, 60},  {80, 120, 255},
                                               {255, 220, 40}, {255, 70, 255}, {60, 230, 230}};
    for (size_t k = 0; k < masks.size(); ++k) {
        const Mask& m = masks[k];
        const std::uint8_t* col = palette[k % 6];
        for (int y = 0; y < m.height && y < image.height; ++y)
            for (int x = 0; x < m.width && x < image.width; ++x) {
                if (!m.at(y, x)) continue;
                bool boundary = y == 0 || x == 0 || y == m.height - 1 || x == m.width - 1 ||
                                !m.at(y - 1, x) || !m.at(y + 1, x) || !m.at(y, x - 1) ||
                                !m.at(y, x + 1);
                if (!boundary) continue;
                for (int c = 0; c < 3; ++c) image.set(y, x, c, col[c]);
            }
    }
}

}  // namespace nucleo
