#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dtseg/types.hpp"

namespace dtseg::datakit {

// Colored elliptical "nuclei" of classes 1..K-1 on a textured class-0
// background. Each class owns a hue band, so local color predicts the label.
DatasetBundle generate_synthetic(int n, int h, int w, int num_classes, uint64_t seed);

// Layout: <dir>/images/<id>.png (RGB) and optional <dir>/masks/<id>.png.
// Pairs are returned in lexicographic filename order.
DatasetBundle load_dataset(const std::string& dir, int num_classes);
void write_dataset(const DatasetBundle& bundle, const std::string& dir);

// Tiles size×size patches with the given stride. The last row/column of
// patches is anchored to the image edge, so every pixel is covered.
std::vector<LabeledPair> extract_patches(const ImagePatch& image, const std::optional<SegMask>& mask, int size,
                                         int stride);
// Anchor offsets used along one axis of length `extent`.
std::vector<int> patch_anchors(int extent, int size, int stride);

struct SplitSpec {
    int numerator = 1;
    int denominator = 10;
    uint64_t seed = 0;

    double ratio() const { return double(numerator) / double(denominator); }
    // Parses "1/20", "0.1", or "1".
    static SplitSpec parse(const std::string& text, uint64_t seed);
};

struct Split {
    DatasetBundle labeled;
    DatasetBundle unlabeled;  // masks stripped
};

// |labeled| = max(1, floor(ratio · |bundle|)); both parts keep the source order.
Split split_labeled(const DatasetBundle& bundle, const SplitSpec& spec);
size_t labeled_count(size_t total, const SplitSpec& spec);

enum class AugmentKind { identity, rot90, rot180, rot270, flip_h, flip_v, color_jitter, scale_crop };
inline constexpr int kAugmentKinds = 8;

std::string to_string(AugmentKind kind);
AugmentKind augment_kind_for_seed(uint64_t seed);

// Random draw among rotations/flips, brightness-contrast jitter (image only)
// and aspect-preserving scale-crop. Geometry is applied to the mask with
// nearest-neighbor sampling. Deterministic in `seed`.
LabeledPair augment(const LabeledPair& pair, uint64_t seed);

// Counter-clockwise rotation by quarter_turns · 90°.
LabeledPair rotate90(const LabeledPair& pair, int quarter_turns);

}  // namespace dtseg::datakit
