#include "dtseg/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "dtseg/errors.hpp"

namespace dtseg::image_io {

namespace {

std::vector<unsigned char> read_png(const std::string& path, png_uint_32 format, int& h, int& w) {
    png_image image;
    std::memset(&image, 0, sizeof image);
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&image, path.c_str()))
        throw IngestError("cannot read PNG " + path + ": " + image.message);
    image.format = format;
    std::vector<unsigned char> buf(PNG_IMAGE_SIZE(image));
    if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
        png_image_free(&image);
        throw IngestError("cannot decode PNG " + path + ": " + image.message);
    }
    h = int(image.height);
    w = int(image.width);
    return buf;
}

void write_png(const std::string& path, png_uint_32 format, int h, int w, const std::vector<unsigned char>& buf) {
    png_image image;
    std::memset(&image, 0, sizeof image);
    image.version = PNG_IMAGE_VERSION;
    image.width = png_uint_32(w);
    image.height = png_uint_32(h);
    image.format = format;
    if (!png_image_write_to_file(&image, path.c_str(), 0, buf.data(), 0, nullptr))
        throw std::runtime_error("cannot write PNG " + path + ": " + image.message);
}

}  // namespace

ImagePatch read_rgb(const std::string& path) {
    int h = 0, w = 0;
    const auto buf = read_png(path, PNG_FORMAT_RGB, h, w);
    ImagePatch img(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) img.at(y, x, c) = buf[(size_t(y) * w + x) * 3 + c] / 255.0;
    return img;
}

SegMask read_mask(const std::string& path, int num_classes) {
    int h = 0, w = 0;
    const auto buf = read_png(path, PNG_FORMAT_GRAY, h, w);
    SegMask m(h, w, num_classes);
    for (size_t i = 0; i < m.size(); ++i) {
        if (buf[i] >= num_classes)
            throw IngestError("mask " + path + " contains class " + std::to_string(int(buf[i])) + " but K = " +
                              std::to_string(num_classes));
        m.labels[i] = buf[i];
    }
    return m;
}

void write_rgb(const std::string& path, const ImagePatch& image) {
    const int h = image.height(), w = image.width();
    std::vector<unsigned char> buf(size_t(h) * w * 3);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                buf[(size_t(y) * w + x) * 3 + c] =
                    static_cast<unsigned char>(std::lround(std::clamp(image.at(y, x, c), 0.0, 1.0) * 255.0));
    write_png(path, PNG_FORMAT_RGB, h, w, buf);
}

void write_mask(const std::string& path, const SegMask& mask) {
    std::vector<unsigned char> buf(mask.size());
    for (size_t i = 0; i < mask.size(); ++i) {
        if (mask.labels[i] < 0 || mask.labels[i] > 255) throw ArgumentError("mask value does not fit in 8 bits");
        buf[i] = static_cast<unsigned char>(mask.labels[i]);
    }
    write_png(path, PNG_FORMAT_GRAY, mask.h, mask.w, buf);
}

}  // namespace dtseg::image_io
