#include "dtseg/collab.hpp"

#include <algorithm>
#include <numeric>

#include "dtseg/errors.hpp"
#include "dtseg/hashing.hpp"

namespace dtseg::collab {

namespace {

constexpr int kStages = 3;
constexpr int kChunk = 8;

ag::Var run_basic(const ParamSet& ps, const BasicBlock& b, const ag::Var& x) {
    ag::Var h = b.conv1(ps, ag::relu(b.norm1(ps, x)));
    h = b.conv2(ps, ag::relu(b.norm2(ps, h)));
    return ag::add(x, h);
}

std::vector<int> gather_labels(const std::vector<int>& labels, const std::vector<int>& idx, size_t per_image) {
    std::vector<int> y;
    y.reserve(per_image * idx.size());
    for (int i : idx)
        y.insert(y.end(), labels.begin() + long(size_t(i) * per_image), labels.begin() + long(size_t(i + 1) * per_image));
    return y;
}

DatasetBundle labeled_only(const DatasetBundle& bundle, const char* who) {
    DatasetBundle out;
    out.class_names = bundle.class_names;
    out.provenance = bundle.provenance;
    for (const auto& p : bundle.pairs)
        if (p.mask) out.pairs.push_back(p);
    if (out.pairs.empty()) throw ArgumentError(std::string(who) + ": no labeled pairs");
    return out;
}

std::vector<int> all_labels(const DatasetBundle& bundle) {
    std::vector<int> y;
    for (const auto& p : bundle.pairs) y.insert(y.end(), p.mask->labels.begin(), p.mask->labels.end());
    return y;
}

std::vector<int> sample_indices(Rng& rng, int batch, int total) {
    std::vector<int> idx(static_cast<size_t>(std::max(1, batch)));
    for (auto& i : idx) i = rng.randint(0, total - 1);
    return idx;
}

}  // namespace

void BaselineConfig::validate() const {
    if (width < 1 || fpn_width < 1) throw ArgumentError("baseline widths must be >= 1");
    if (groups < 1) throw ArgumentError("baseline groups must be >= 1");
    if (!(dice_smooth > 0.0)) throw ArgumentError("baseline dice_smooth must be > 0");
}

nlohmann::json BaselineConfig::to_json() const {
    return {{"width", width}, {"fpn_width", fpn_width}, {"groups", groups}, {"dice_smooth", dice_smooth}};
}

BaselineConfig BaselineConfig::from_json(const nlohmann::json& j) {
    BaselineConfig c;
    c.width = j.at("width").get<int>();
    c.fpn_width = j.at("fpn_width").get<int>();
    c.groups = j.at("groups").get<int>();
    c.dice_smooth = j.at("dice_smooth").get<double>();
    c.validate();
    return c;
}

BaselineParams BaselineParams::init(const BaselineConfig& config, int num_classes, uint64_t seed) {
    config.validate();
    if (num_classes < 2) throw ArgumentError("baseline needs at least 2 classes");
    BaselineParams bp;
    bp.config = config;
    bp.num_classes = num_classes;
    Rng rng(mix_seed(seed, 0xba5e));
    auto& ps = bp.params;
    bp.stem = Conv2d::create(ps, "stem", 3, config.width, 3, 1, 1, rng);
    int ch = config.width;
    for (int s = 0; s < kStages; ++s) {
        const int out = config.width << s;
        const std::string name = "stage" + std::to_string(s);
        bp.down.push_back(Conv2d::create(ps, name + ".down", ch, out, 3, 2, 1, rng));
        BasicBlock b;
        const int g = std::gcd(config.groups, out);
        b.norm1 = GroupNorm::create(ps, name + ".norm1", out, g);
        b.conv1 = Conv2d::create(ps, name + ".conv1", out, out, 3, 1, 1, rng);
        b.norm2 = GroupNorm::create(ps, name + ".norm2", out, g);
        b.conv2 = Conv2d::create(ps, name + ".conv2", out, out, 3, 1, 1, rng);
        bp.stages.push_back(b);
        bp.lateral.push_back(Conv2d::pointwise(ps, "fpn.lateral" + std::to_string(s), out, config.fpn_width, rng));
        ch = out;
    }
    bp.smooth = Conv2d::create(ps, "fpn.smooth", config.fpn_width, config.fpn_width, 3, 1, 1, rng);
    bp.classifier = Conv2d::pointwise(ps, "classifier", config.fpn_width, num_classes, rng);
    return bp;
}

BaselineParams BaselineParams::from_params(const BaselineConfig& config, int num_classes, ParamSet params) {
    BaselineParams bp = init(config, num_classes, 0);
    assign_params(bp.params, params);
    return bp;
}

ag::Var baseline_features(const BaselineParams& bp, const ag::Var& images) {
    const Shape s = images->value.shape();
    if (s.c != 3) throw ShapeError("baseline expects RGB input, got " + s.str());
    if (s.h % 8 != 0 || s.w % 8 != 0) throw ShapeError("baseline input " + s.str() + " is not a multiple of 8");
    const auto& ps = bp.params;
    ag::Var h = ag::relu(bp.stem(ps, images));
    std::vector<ag::Var> pyramid;
    for (int i = 0; i < kStages; ++i) {
        h = run_basic(ps, bp.stages[size_t(i)], bp.down[size_t(i)](ps, h));
        pyramid.push_back(h);
    }
    ag::Var p = bp.lateral.back()(ps, pyramid.back());
    for (int i = kStages - 2; i >= 0; --i)
        p = ag::add(bp.lateral[size_t(i)](ps, pyramid[size_t(i)]), ag::upsample_nearest(p, 2));
    p = ag::relu(bp.smooth(ps, p));
    return ag::upsample_bilinear(p, s.h, s.w);
}

ag::Var baseline_logits(const BaselineParams& bp, const ag::Var& images) {
    return bp.classifier(bp.params, baseline_features(bp, images));
}

Tensor baseline_probs(const BaselineParams& bp, const Tensor& images) {
    ag::NoGradGuard guard;
    return ag::softmax_channels(baseline_logits(bp, ag::constant(images)))->value;
}

BaselineParams train_baseline(const DatasetBundle& labeled, const BaselineConfig& config, const TrainOptions& opts,
                              LossHistory* history) {
    const DatasetBundle data = labeled_only(labeled, "train_baseline");
    BaselineParams bp = BaselineParams::init(config, data.num_classes(), opts.seed);
    if (opts.steps <= 0) return bp;
    std::vector<Tensor> images;
    for (const auto& p : data.pairs) images.push_back(p.image.pixels);
    const Tensor all = Tensor::stack(images);
    const std::vector<int> labels = all_labels(data);
    const size_t per_image = size_t(all.h()) * all.w();

    Rng rng(mix_seed(opts.seed, 0xb7));
    RMSprop opt(bp.params, opts.lr);
    for (int step = 0; step < opts.steps; ++step) {
        const auto idx = sample_indices(rng, opts.batch, all.n());
        ag::Var probs = ag::softmax_channels(baseline_logits(bp, ag::constant(all.gather(idx))));
        ag::Var loss = ag::dice_loss(probs, gather_labels(labels, idx, per_image), config.dice_smooth);
        check_loss(loss->value[0], step, "train_baseline");
        if (history) history->push_back(loss->value[0]);
        ag::backward(loss);
        opt.step();
    }
    return bp;
}

Participant make_baseline_participant(std::shared_ptr<const BaselineParams> baseline) {
    Participant p;
    p.name = "baseline";
    p.channels = baseline->config.fpn_width;
    p.feature_fn = [baseline](const Tensor& images) {
        ag::NoGradGuard guard;
        return baseline_features(*baseline, ag::constant(images))->value;
    };
    p.checksum = [baseline] { return baseline->checksum(); };
    return p;
}

Participant make_dtseg_participant(DtsegStack stack, uint64_t noise_seed) {
    auto shared = std::make_shared<const DtsegStack>(std::move(stack));
    Participant p;
    p.name = "dtseg";
    p.channels = shared->decoder->fused_channels();
    p.feature_fn = [shared, noise_seed](const Tensor& images) {
        const segdecoder::Backbone backbone{*shared->denoiser, *shared->codec, shared->schedule};
        return segdecoder::predict_features(images, backbone, *shared->decoder, noise_seed);
    };
    p.checksum = [shared] {
        return sha256_hex(shared->denoiser->checksum() + shared->codec->checksum() + shared->decoder->checksum());
    };
    return p;
}

void CollabConfig::validate() const {
    if (common_channels < 1) throw ArgumentError("collab common_channels must be >= 1");
    if (head_hidden < 1) throw ArgumentError("collab head_hidden must be >= 1");
    if (!(dice_smooth > 0.0)) throw ArgumentError("collab dice_smooth must be > 0");
}

nlohmann::json CollabConfig::to_json() const {
    return {{"common_channels", common_channels}, {"head_hidden", head_hidden}, {"dice_smooth", dice_smooth}};
}

CollabConfig CollabConfig::from_json(const nlohmann::json& j) {
    CollabConfig c;
    c.common_channels = j.at("common_channels").get<int>();
    c.head_hidden = j.at("head_hidden").get<int>();
    c.dice_smooth = j.at("dice_smooth").get<double>();
    c.validate();
    return c;
}

CollabParams CollabParams::init(const CollabConfig& config, int c1, int c2, int num_classes, uint64_t seed) {
    config.validate();
    if (c1 < 1 || c2 < 1) throw ArgumentError("participant widths must be >= 1");
    if (num_classes < 2) throw ArgumentError("collab needs at least 2 classes");
    CollabParams cp;
    cp.config = config;
    cp.num_classes = num_classes;
    cp.participant_channels = {c1, c2};
    Rng rng(mix_seed(seed, 0xc011ab));
    const int C = config.common_channels;
    cp.map1 = Conv2d::pointwise(cp.params, "map.0", c1, C, rng);
    cp.map2 = Conv2d::pointwise(cp.params, "map.1", c2, C, rng);
    cp.head1 = Conv2d::pointwise(cp.params, "head.fc1", 2 * C, config.head_hidden, rng);
    cp.head2 = Conv2d::pointwise(cp.params, "head.fc2", config.head_hidden, num_classes, rng);
    if (cp.params.count() != cp.expected_parameter_count())
        throw std::logic_error("collab parameter census mismatch");
    return cp;
}

CollabParams CollabParams::from_params(const CollabConfig& config, int c1, int c2, int num_classes,
                                       ParamSet params) {
    CollabParams cp = init(config, c1, c2, num_classes, 0);
    assign_params(cp.params, params);
    return cp;
}

size_t CollabParams::expected_parameter_count() const {
    const size_t C = size_t(config.common_channels), h = size_t(config.head_hidden), k = size_t(num_classes);
    const size_t c1 = size_t(participant_channels.at(0)), c2 = size_t(participant_channels.at(1));
    return C * (c1 + c2) + 2 * C + (2 * C * h + h) + (h * k + k);
}

ag::Var fuse_logits(const CollabParams& cp, const ag::Var& f1, const ag::Var& f2) {
    const Shape a = f1->value.shape(), b = f2->value.shape();
    if (a.n != b.n || a.h != b.h || a.w != b.w)
        throw ArgumentError("participant features disagree spatially: " + a.str() + " vs " + b.str());
    if (a.c != cp.participant_channels[0] || b.c != cp.participant_channels[1])
        throw ShapeError("participant widths " + std::to_string(a.c) + "/" + std::to_string(b.c) +
                         " do not match the mapping networks");
    ag::Var fused = ag::concat_channels({cp.map1(cp.params, f1), cp.map2(cp.params, f2)});
    return cp.head2(cp.params, ag::relu(cp.head1(cp.params, fused)));
}

Tensor fuse_and_predict(const Tensor& f1, const Tensor& f2, const CollabParams& cp) {
    ag::NoGradGuard guard;
    return ag::softmax_channels(fuse_logits(cp, ag::constant(f1), ag::constant(f2)))->value;
}

Tensor participant_features(const Participant& p, const DatasetBundle& bundle) {
    std::vector<Tensor> samples;
    for (size_t begin = 0; begin < bundle.pairs.size(); begin += kChunk) {
        const size_t end = std::min(bundle.pairs.size(), begin + kChunk);
        std::vector<Tensor> images;
        for (size_t i = begin; i < end; ++i) images.push_back(bundle.pairs[i].image.pixels);
        const Tensor f = p.feature_fn(Tensor::stack(images));
        if (f.c() != p.channels)
            throw ShapeError("participant " + p.name + " produced " + std::to_string(f.c()) + " channels, declared " +
                             std::to_string(p.channels));
        for (int n = 0; n < f.n(); ++n) samples.push_back(f.slice_batch(n, 1));
    }
    return Tensor::stack(samples);
}

CollabParams train_collab(const DatasetBundle& labeled, const Participant& p1, const Participant& p2,
                          const CollabConfig& config, const TrainOptions& opts, LossHistory* history) {
    const DatasetBundle data = labeled_only(labeled, "train_collab");
    CollabParams cp = CollabParams::init(config, p1.channels, p2.channels, data.num_classes(), opts.seed);
    if (opts.steps <= 0) return cp;
    const Tensor f1 = participant_features(p1, data);
    const Tensor f2 = participant_features(p2, data);
    const std::vector<int> labels = all_labels(data);
    const size_t per_image = size_t(f1.h()) * f1.w();

    Rng rng(mix_seed(opts.seed, 0xc0));
    RMSprop opt(cp.params, opts.lr);
    for (int step = 0; step < opts.steps; ++step) {
        const auto idx = sample_indices(rng, opts.batch, f1.n());
        ag::Var probs =
            ag::softmax_channels(fuse_logits(cp, ag::constant(f1.gather(idx)), ag::constant(f2.gather(idx))));
        ag::Var loss = ag::dice_loss(probs, gather_labels(labels, idx, per_image), config.dice_smooth);
        check_loss(loss->value[0], step, "train_collab");
        if (history) history->push_back(loss->value[0]);
        ag::backward(loss);
        opt.step();
    }
    return cp;
}

}  // namespace dtseg::collab
