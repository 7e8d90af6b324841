#pragma once

#include <string>

#include "dtseg/types.hpp"

namespace dtseg::image_io {

// 8-bit RGB PNG → [0,1] image. Throws IngestError naming the file on failure.
ImagePatch read_rgb(const std::string& path);
// 8-bit single-channel PNG; pixel value = class index.
SegMask read_mask(const std::string& path, int num_classes);

// Values are clamped to [0,1] and rounded to 8 bits.
void write_rgb(const std::string& path, const ImagePatch& image);
void write_mask(const std::string& path, const SegMask& mask);

}  // namespace dtseg::image_io
