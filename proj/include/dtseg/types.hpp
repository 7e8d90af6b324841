#pragma once

#include <optional>
#include <string>
#include <vector>

#include "dtseg/tensor.hpp"

namespace dtseg {

// RGB image with values in [0,1], stored as a [1, 3, H, W] tensor.
struct ImagePatch {
    Tensor pixels;
    std::string id;

    ImagePatch() = default;
    ImagePatch(int h, int w, std::string id_ = {}) : pixels(1, 3, h, w), id(std::move(id_)) {}
    ImagePatch(Tensor px, std::string id_) : pixels(std::move(px)), id(std::move(id_)) {}

    int height() const { return pixels.h(); }
    int width() const { return pixels.w(); }
    double& at(int y, int x, int ch) { return pixels.at(0, ch, y, x); }
    double at(int y, int x, int ch) const { return pixels.at(0, ch, y, x); }
    bool operator==(const ImagePatch&) const = default;
};

// Row-major class-index mask; class 0 is background.
struct SegMask {
    int h = 0, w = 0;
    int num_classes = 2;
    std::vector<int> labels;

    SegMask() = default;
    SegMask(int h_, int w_, int k, int fill = 0) : h(h_), w(w_), num_classes(k), labels(size_t(h_) * w_, fill) {}

    int& at(int y, int x) { return labels[size_t(y) * w + x]; }
    int at(int y, int x) const { return labels[size_t(y) * w + x]; }
    size_t size() const { return labels.size(); }
    bool operator==(const SegMask&) const = default;
};

struct LabeledPair {
    ImagePatch image;
    std::optional<SegMask> mask;
};

struct DatasetBundle {
    std::vector<LabeledPair> pairs;
    std::vector<std::string> class_names;
    std::string provenance;

    size_t size() const { return pairs.size(); }
    int num_classes() const { return int(class_names.size()); }
    size_t labeled_count() const;
};

}  // namespace dtseg
