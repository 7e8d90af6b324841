#include "dtseg/datakit.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numbers>

#include "dtseg/errors.hpp"
#include "dtseg/image_io.hpp"
#include "dtseg/kernels.hpp"
#include "dtseg/nn.hpp"

namespace fs = std::filesystem;

namespace dtseg {

size_t DatasetBundle::labeled_count() const {
    return size_t(std::count_if(pairs.begin(), pairs.end(), [](const LabeledPair& p) { return p.mask.has_value(); }));
}

}  // namespace dtseg

namespace dtseg::datakit {

namespace {

using Rgb = std::array<double, 3>;

constexpr Rgb kBackground{0.92, 0.78, 0.86};

constexpr std::array<Rgb, 7> kPalette{{
    {0.45, 0.15, 0.50},  // purple
    {0.15, 0.30, 0.68},  // blue
    {0.62, 0.28, 0.18},  // brown
    {0.18, 0.52, 0.30},  // green
    {0.72, 0.58, 0.12},  // ochre
    {0.30, 0.30, 0.30},  // gray
    {0.58, 0.08, 0.28},  // crimson
}};

Rgb class_color(int k) {
    Rgb c = kPalette[size_t(k - 1) % kPalette.size()];
    // Palette wraps for K > 8; later cycles get progressively darker.
    const double shade = 1.0 - 0.2 * double((k - 1) / int(kPalette.size()));
    for (auto& v : c) v *= shade;
    return c;
}

std::vector<std::string> default_class_names(int k) {
    std::vector<std::string> names{"background"};
    for (int i = 1; i < k; ++i) names.push_back("class" + std::to_string(i));
    return names;
}

}  // namespace

DatasetBundle generate_synthetic(int n, int h, int w, int num_classes, uint64_t seed) {
    if (n < 1) throw ArgumentError("generate_synthetic: n must be >= 1");
    if (num_classes < 2) throw ArgumentError("generate_synthetic: K must be >= 2");
    if (h < 16 || w < 16) throw ArgumentError("generate_synthetic: H and W must be >= 16");

    DatasetBundle bundle;
    bundle.class_names = default_class_names(num_classes);
    bundle.provenance = "synthetic n=" + std::to_string(n) + " size=" + std::to_string(h) + "x" + std::to_string(w) +
                        " K=" + std::to_string(num_classes) + " seed=" + std::to_string(seed);
    bundle.pairs.reserve(size_t(n));

    for (int idx = 0; idx < n; ++idx) {
        Rng rng(mix_seed(seed, uint64_t(idx)));
        char id[32];
        std::snprintf(id, sizeof id, "synth_%05d", idx);
        ImagePatch img(h, w, id);
        SegMask mask(h, w, num_classes);
        std::vector<Rgb> color(size_t(h) * w);

        // Background: slow stain gradient.
        const double gx = rng.uniform(-0.04, 0.04), gy = rng.uniform(-0.04, 0.04);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const double drift = gx * (double(x) / w - 0.5) + gy * (double(y) / h - 0.5);
                for (int c = 0; c < 3; ++c) color[size_t(y) * w + x][c] = kBackground[c] + drift;
            }

        const double area_scale = double(h) * double(w) / (64.0 * 64.0);
        const int blobs = std::max(1, int(std::lround(rng.uniform(4.0, 10.0) * area_scale)));
        for (int b = 0; b < blobs; ++b) {
            const int k = rng.randint(1, num_classes - 1);
            const double cy = rng.uniform(0.0, h - 1.0), cx = rng.uniform(0.0, w - 1.0);
            const double ra = rng.uniform(3.0, 7.0), rb = rng.uniform(3.0, 7.0);
            const double theta = rng.uniform(0.0, std::numbers::pi);
            Rgb base = class_color(k);
            for (auto& v : base) v += rng.uniform(-0.04, 0.04);
            const double ct = std::cos(theta), st = std::sin(theta);
            const int y0 = std::max(0, int(cy - 8)), y1 = std::min(h - 1, int(cy + 8));
            const int x0 = std::max(0, int(cx - 8)), x1 = std::min(w - 1, int(cx + 8));
            for (int y = y0; y <= y1; ++y)
                for (int x = x0; x <= x1; ++x) {
                    const double dy = y - cy, dx = x - cx;
                    const double u = (dx * ct + dy * st) / ra, v = (-dx * st + dy * ct) / rb;
                    const double r2 = u * u + v * v;
                    if (r2 > 1.0) continue;
                    mask.at(y, x) = k;
                    // Slightly darker core.
                    const double shade = 1.0 - 0.12 * (1.0 - r2);
                    for (int c = 0; c < 3; ++c) color[size_t(y) * w + x][c] = base[c] * shade;
                }
        }

        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                for (int c = 0; c < 3; ++c)
                    img.at(y, x, c) = std::clamp(color[size_t(y) * w + x][c] + 0.05 * rng.normal(), 0.0, 1.0);
        bundle.pairs.push_back({std::move(img), std::move(mask)});
    }
    return bundle;
}

DatasetBundle load_dataset(const std::string& dir, int num_classes) {
    if (num_classes < 2) throw ArgumentError("load_dataset: K must be >= 2");
    const fs::path root(dir);
    const fs::path images = root / "images";
    const fs::path masks = root / "masks";
    if (!fs::is_directory(root)) throw IngestError("dataset directory not found: " + dir);
    if (!fs::is_directory(images)) throw IngestError("dataset has no images/ directory: " + images.string());

    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(images))
        if (entry.is_regular_file() && entry.path().extension() == ".png") files.push_back(entry.path());
    std::sort(files.begin(), files.end(), [](const fs::path& a, const fs::path& b) {
        return a.filename().string() < b.filename().string();
    });

    DatasetBundle bundle;
    bundle.class_names = default_class_names(num_classes);
    bundle.provenance = "directory " + dir;
    int h = -1, w = -1;
    for (const auto& file : files) {
        ImagePatch img = image_io::read_rgb(file.string());
        img.id = file.stem().string();
        if (h < 0) {
            h = img.height();
            w = img.width();
        } else if (img.height() != h || img.width() != w) {
            throw IngestError("image " + file.string() + " is " + std::to_string(img.height()) + "x" +
                              std::to_string(img.width()) + ", expected " + std::to_string(h) + "x" + std::to_string(w));
        }
        LabeledPair pair{std::move(img), std::nullopt};
        const fs::path mask_path = masks / file.filename();
        if (fs::is_regular_file(mask_path)) {
            SegMask m = image_io::read_mask(mask_path.string(), num_classes);
            if (m.h != h || m.w != w)
                throw IngestError("mask " + mask_path.string() + " is " + std::to_string(m.h) + "x" +
                                  std::to_string(m.w) + " but its image is " + std::to_string(h) + "x" +
                                  std::to_string(w));
            pair.mask = std::move(m);
        }
        bundle.pairs.push_back(std::move(pair));
    }
    return bundle;
}

void write_dataset(const DatasetBundle& bundle, const std::string& dir) {
    const fs::path root(dir);
    fs::create_directories(root / "images");
    fs::create_directories(root / "masks");
    for (const auto& p : bundle.pairs) {
        image_io::write_rgb((root / "images" / (p.image.id + ".png")).string(), p.image);
        if (p.mask) image_io::write_mask((root / "masks" / (p.image.id + ".png")).string(), *p.mask);
    }
}

std::vector<int> patch_anchors(int extent, int size, int stride) {
    if (size < 1 || stride < 1) throw ArgumentError("patch size and stride must be >= 1");
    if (size > extent) throw ArgumentError("patch size " + std::to_string(size) + " exceeds image extent " +
                                           std::to_string(extent));
    std::vector<int> anchors;
    int pos = 0;
    for (; pos + size < extent; pos += stride) anchors.push_back(pos);
    // Final patch flush with the far edge.
    if (anchors.empty() || anchors.back() != extent - size) anchors.push_back(extent - size);
    return anchors;
}

std::vector<LabeledPair> extract_patches(const ImagePatch& image, const std::optional<SegMask>& mask, int size,
                                         int stride) {
    const int h = image.height(), w = image.width();
    if (mask && (mask->h != h || mask->w != w)) throw ArgumentError("extract_patches: mask shape differs from image");
    const auto ys = patch_anchors(h, size, stride);
    const auto xs = patch_anchors(w, size, stride);
    std::vector<LabeledPair> out;
    out.reserve(ys.size() * xs.size());
    for (int y0 : ys)
        for (int x0 : xs) {
            ImagePatch p(size, size, image.id + "_y" + std::to_string(y0) + "_x" + std::to_string(x0));
            for (int c = 0; c < 3; ++c)
                for (int y = 0; y < size; ++y)
                    for (int x = 0; x < size; ++x) p.at(y, x, c) = image.at(y0 + y, x0 + x, c);
            std::optional<SegMask> m;
            if (mask) {
                m.emplace(size, size, mask->num_classes);
                for (int y = 0; y < size; ++y)
                    for (int x = 0; x < size; ++x) m->at(y, x) = mask->at(y0 + y, x0 + x);
            }
            out.push_back({std::move(p), std::move(m)});
        }
    return out;
}

SplitSpec SplitSpec::parse(const std::string& text, uint64_t seed) {
    SplitSpec s;
    s.seed = seed;
    const auto slash = text.find('/');
    try {
        if (slash != std::string::npos) {
            s.numerator = std::stoi(text.substr(0, slash));
            s.denominator = std::stoi(text.substr(slash + 1));
        } else {
            const double r = std::stod(text);
            // Decimal ratios are represented exactly over 10^6.
            s.denominator = 1000000;
            s.numerator = int(std::lround(r * s.denominator));
        }
    } catch (const std::logic_error&) {
        throw ArgumentError("cannot parse labeled ratio '" + text + "'");
    }
    if (s.denominator <= 0 || s.numerator <= 0 || s.numerator > s.denominator)
        throw ArgumentError("labeled ratio must lie in (0, 1], got '" + text + "'");
    return s;
}

size_t labeled_count(size_t total, const SplitSpec& spec) {
    if (spec.denominator <= 0 || spec.numerator <= 0 || spec.numerator > spec.denominator)
        throw ArgumentError("labeled ratio must lie in (0, 1]");
    const size_t n = total * size_t(spec.numerator) / size_t(spec.denominator);
    return std::max<size_t>(1, n);
}

Split split_labeled(const DatasetBundle& bundle, const SplitSpec& spec) {
    if (bundle.pairs.empty()) throw ArgumentError("split_labeled: empty bundle");
    const size_t n = bundle.pairs.size();
    const size_t n_labeled = labeled_count(n, spec);

    std::vector<size_t> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(mix_seed(spec.seed, 0x5b117));
    for (size_t i = n - 1; i > 0; --i) std::swap(order[i], order[size_t(rng.randint(0, int(i)))]);
    std::vector<bool> is_labeled(n, false);
    for (size_t i = 0; i < n_labeled; ++i) is_labeled[order[i]] = true;

    Split s;
    for (DatasetBundle* b : {&s.labeled, &s.unlabeled}) {
        b->class_names = bundle.class_names;
        b->provenance = bundle.provenance;
    }
    s.labeled.provenance += " | labeled " + std::to_string(spec.numerator) + "/" + std::to_string(spec.denominator);
    s.unlabeled.provenance += " | unlabeled";
    for (size_t i = 0; i < n; ++i) {
        if (is_labeled[i]) {
            s.labeled.pairs.push_back(bundle.pairs[i]);
        } else {
            s.unlabeled.pairs.push_back({bundle.pairs[i].image, std::nullopt});
        }
    }
    return s;
}

std::string to_string(AugmentKind kind) {
    switch (kind) {
        case AugmentKind::identity: return "identity";
        case AugmentKind::rot90: return "rot90";
        case AugmentKind::rot180: return "rot180";
        case AugmentKind::rot270: return "rot270";
        case AugmentKind::flip_h: return "flip_h";
        case AugmentKind::flip_v: return "flip_v";
        case AugmentKind::color_jitter: return "color_jitter";
        case AugmentKind::scale_crop: return "scale_crop";
    }
    return "unknown";
}

namespace {

// Generic nearest/coordinate remap: out(y, x) = in(map(y, x)).
template <typename Map>
LabeledPair remap(const LabeledPair& pair, int out_h, int out_w, Map map) {
    LabeledPair out{ImagePatch(out_h, out_w, pair.image.id), std::nullopt};
    if (pair.mask) out.mask.emplace(out_h, out_w, pair.mask->num_classes);
    for (int y = 0; y < out_h; ++y)
        for (int x = 0; x < out_w; ++x) {
            const auto [sy, sx] = map(y, x);
            for (int c = 0; c < 3; ++c) out.image.at(y, x, c) = pair.image.at(sy, sx, c);
            if (pair.mask) out.mask->at(y, x) = pair.mask->at(sy, sx);
        }
    return out;
}

LabeledPair flip(const LabeledPair& pair, bool horizontal) {
    const int h = pair.image.height(), w = pair.image.width();
    return remap(pair, h, w, [&](int y, int x) {
        return horizontal ? std::pair{y, w - 1 - x} : std::pair{h - 1 - y, x};
    });
}

LabeledPair color_jitter(const LabeledPair& pair, Rng& rng) {
    const double brightness = rng.uniform(-0.1, 0.1);
    const double contrast = rng.uniform(0.8, 1.2);
    LabeledPair out = pair;
    for (auto& v : out.image.pixels.vec()) v = std::clamp((v - 0.5) * contrast + 0.5 + brightness, 0.0, 1.0);
    return out;
}

LabeledPair scale_crop(const LabeledPair& pair, Rng& rng) {
    const int h = pair.image.height(), w = pair.image.width();
    const double s = rng.uniform(1.0, 1.3);
    const int ch = std::clamp(int(std::lround(h / s)), 1, h);
    const int cw = std::clamp(int(std::lround(w / s)), 1, w);
    const int oy = rng.randint(0, h - ch), ox = rng.randint(0, w - cw);

    LabeledPair out{ImagePatch(h, w, pair.image.id), std::nullopt};
    Tensor crop(1, 3, ch, cw);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < ch; ++y)
            for (int x = 0; x < cw; ++x) crop.at(0, c, y, x) = pair.image.at(oy + y, ox + x, c);
    kernels::upsample_bilinear(3, ch, cw, h, w, crop.span(), out.image.pixels.span());
    for (auto& v : out.image.pixels.vec()) v = std::clamp(v, 0.0, 1.0);
    if (pair.mask) {
        out.mask.emplace(h, w, pair.mask->num_classes);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const int sy = std::min(ch - 1, int((y + 0.5) * ch / h));
                const int sx = std::min(cw - 1, int((x + 0.5) * cw / w));
                out.mask->at(y, x) = pair.mask->at(oy + sy, ox + sx);
            }
    }
    return out;
}

}  // namespace

LabeledPair rotate90(const LabeledPair& pair, int quarter_turns) {
    const int turns = ((quarter_turns % 4) + 4) % 4;
    LabeledPair out = pair;
    for (int t = 0; t < turns; ++t) {
        const int h = out.image.height(), w = out.image.width();
        out = remap(out, w, h, [&](int y, int x) { return std::pair{x, w - 1 - y}; });
    }
    return out;
}

AugmentKind augment_kind_for_seed(uint64_t seed) {
    Rng rng(seed);
    return AugmentKind(rng.randint(0, kAugmentKinds - 1));
}

LabeledPair augment(const LabeledPair& pair, uint64_t seed) {
    Rng rng(seed);
    const auto kind = AugmentKind(rng.randint(0, kAugmentKinds - 1));
    switch (kind) {
        case AugmentKind::identity: return pair;
        case AugmentKind::rot90: return rotate90(pair, 1);
        case AugmentKind::rot180: return rotate90(pair, 2);
        case AugmentKind::rot270: return rotate90(pair, 3);
        case AugmentKind::flip_h: return flip(pair, true);
        case AugmentKind::flip_v: return flip(pair, false);
        case AugmentKind::color_jitter: return color_jitter(pair, rng);
        case AugmentKind::scale_crop: return scale_crop(pair, rng);
    }
    return pair;
}

}  // namespace dtseg::datakit
