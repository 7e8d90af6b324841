#include "dtseg/segdecoder.hpp"

#include <algorithm>

#include "dtseg/datakit.hpp"
#include "dtseg/errors.hpp"

namespace dtseg::segdecoder {

namespace {

// Images per extraction call while caching features.
constexpr int kExtractChunk = 8;

ag::Var tokens_of(const ag::Var& x) {
    const Shape s = x->value.shape();
    return ag::reshape(x, {s.n, s.c, 1, s.h * s.w});
}

}  // namespace

std::string to_string(Mode mode) { return mode == Mode::parallel ? "parallel" : "serial"; }

Mode mode_from_string(const std::string& text) {
    if (text == "parallel") return Mode::parallel;
    if (text == "serial") return Mode::serial;
    throw ArgumentError("unknown aggregation mode '" + text + "' (expected parallel or serial)");
}

void DecoderConfig::validate() const {
    if (blocks.empty()) throw ArgumentError("decoder blocks must be nonempty");
    if (timesteps.empty()) throw ArgumentError("decoder timesteps must be nonempty");
    if (common_channels < 1) throw ArgumentError("decoder common_channels must be >= 1");
    if (attention_pool < 1) throw ArgumentError("decoder attention_pool must be >= 1");
    if (heads < 1) throw ArgumentError("decoder heads must be >= 1");
    const int width = mode == Mode::parallel ? common_channels : common_channels * int(blocks.size());
    if (self_attention && width % heads != 0)
        throw ArgumentError("transformer width " + std::to_string(width) + " is not divisible by " +
                            std::to_string(heads) + " heads");
    if (head_hidden < 1) throw ArgumentError("decoder head_hidden must be >= 1");
    if (!(dice_smooth > 0.0)) throw ArgumentError("decoder dice_smooth must be > 0");
    if (feature_views < 1) throw ArgumentError("decoder feature_views must be >= 1");
}

nlohmann::json DecoderConfig::to_json() const {
    return {{"blocks", blocks},
            {"timesteps", timesteps},
            {"common_channels", common_channels},
            {"mode", to_string(mode)},
            {"self_attention", self_attention},
            {"attention_pool", attention_pool},
            {"heads", heads},
            {"head_hidden", head_hidden},
            {"zero_init_out", zero_init_out},
            {"dice_smooth", dice_smooth},
            {"feature_views", feature_views},
            {"noise_seed", noise_seed}};
}

DecoderConfig DecoderConfig::from_json(const nlohmann::json& j) {
    DecoderConfig c;
    c.blocks = j.at("blocks").get<std::vector<int>>();
    c.timesteps = j.at("timesteps").get<std::vector<int>>();
    c.common_channels = j.at("common_channels").get<int>();
    c.mode = mode_from_string(j.at("mode").get<std::string>());
    c.self_attention = j.at("self_attention").get<bool>();
    c.attention_pool = j.at("attention_pool").get<int>();
    c.heads = j.at("heads").get<int>();
    c.head_hidden = j.at("head_hidden").get<int>();
    c.zero_init_out = j.at("zero_init_out").get<bool>();
    c.dice_smooth = j.at("dice_smooth").get<double>();
    c.feature_views = j.at("feature_views").get<int>();
    c.noise_seed = j.at("noise_seed").get<uint64_t>();
    c.validate();
    return c;
}

TransformerLayer TransformerLayer::create(ParamSet& ps, const std::string& name, int width, int heads,
                                          bool self_attention, bool zero_init_out, Rng& rng) {
    TransformerLayer t;
    t.width = width;
    t.heads = heads;
    t.self_attention = self_attention;
    const Init out_init = zero_init_out ? Init::zeros : Init::uniform;
    if (self_attention) {
        t.ln1 = ChannelLayerNorm::create(ps, name + ".ln1", width);
        t.q = Conv2d::pointwise(ps, name + ".attn.q", width, width, rng);
        t.k = Conv2d::pointwise(ps, name + ".attn.k", width, width, rng);
        t.v = Conv2d::pointwise(ps, name + ".attn.v", width, width, rng);
        t.o = Conv2d::pointwise(ps, name + ".attn.o", width, width, rng, out_init);
    }
    t.ln2 = ChannelLayerNorm::create(ps, name + ".ln2", width);
    t.ff1 = Conv2d::pointwise(ps, name + ".ffn.fc1", width, 2 * width, rng);
    t.ff2 = Conv2d::pointwise(ps, name + ".ffn.fc2", 2 * width, width, rng, out_init);
    return t;
}

ag::Var transformer_layer(const ParamSet& ps, const TransformerLayer& layer, const ag::Var& x, int pool) {
    const Shape s = x->value.shape();
    if (s.c != layer.width)
        throw ShapeError("transformer width " + std::to_string(layer.width) + " vs input " + s.str());
    ag::Var h = x;
    if (layer.self_attention) {
        if (s.h % pool != 0 || s.w % pool != 0)
            throw ArgumentError("attention_pool " + std::to_string(pool) + " does not divide " + s.str());
        ag::Var y = layer.ln1(ps, x);
        if (pool > 1) y = ag::avg_pool(y, pool);
        const Shape ps_shape = y->value.shape();
        ag::Var t = tokens_of(y);
        ag::Var a = ag::attention(layer.q(ps, t), layer.k(ps, t), layer.v(ps, t), layer.heads);
        a = ag::reshape(layer.o(ps, a), ps_shape);
        if (pool > 1) a = ag::upsample_nearest(a, pool);
        h = ag::add(h, a);
    }
    ag::Var f = layer.ff2(ps, ag::silu(layer.ff1(ps, layer.ln2(ps, h))));
    return ag::add(h, f);
}

DecoderParams DecoderParams::init(const DecoderConfig& config, std::vector<int> block_channels, int num_classes,
                                  uint64_t seed) {
    config.validate();
    if (block_channels.size() != config.blocks.size())
        throw ArgumentError("decoder needs one channel count per block");
    if (num_classes < 2) throw ArgumentError("decoder needs at least 2 classes");
    DecoderParams dp;
    dp.config = config;
    dp.num_classes = num_classes;
    dp.block_channels = std::move(block_channels);
    Rng rng(mix_seed(seed, 0xdec0de));
    auto& ps = dp.params;
    const int c = config.common_channels;
    for (size_t i = 0; i < dp.block_channels.size(); ++i)
        dp.align.push_back(Conv2d::pointwise(ps, "align." + std::to_string(i), dp.block_channels[i], c, rng));
    if (config.mode == Mode::parallel) {
        for (size_t i = 0; i < config.blocks.size(); ++i)
            dp.transformers.push_back(TransformerLayer::create(ps, "transformer." + std::to_string(i), c,
                                                               config.heads, config.self_attention,
                                                               config.zero_init_out, rng));
    } else {
        dp.transformers.push_back(TransformerLayer::create(ps, "transformer.0", dp.fused_channels(), config.heads,
                                                           config.self_attention, config.zero_init_out, rng));
    }
    dp.head1 = Conv2d::pointwise(ps, "head.fc1", dp.fused_channels(), config.head_hidden, rng);
    dp.head2 = Conv2d::pointwise(ps, "head.fc2", config.head_hidden, num_classes, rng);
    return dp;
}

DecoderParams DecoderParams::from_params(const DecoderConfig& config, std::vector<int> block_channels,
                                         int num_classes, ParamSet params) {
    DecoderParams dp = init(config, std::move(block_channels), num_classes, 0);
    assign_params(dp.params, params);
    return dp;
}

std::vector<int> block_channels_for(const diffusion::DenoiserParams& denoiser, const DecoderConfig& config) {
    std::vector<int> out;
    for (int b : config.blocks) out.push_back(denoiser.block_info(b).channels * int(config.timesteps.size()));
    return out;
}

std::vector<ag::Var> align_features(const DecoderParams& dp, const std::vector<ag::Var>& blocks, int h, int w) {
    if (blocks.empty()) throw ArgumentError("align_features: no feature blocks");
    if (blocks.size() != dp.align.size())
        throw ArgumentError("align_features: expected " + std::to_string(dp.align.size()) + " blocks");
    std::vector<ag::Var> out;
    for (size_t i = 0; i < blocks.size(); ++i) {
        const Shape s = blocks[i]->value.shape();
        if (s.c != dp.block_channels[i])
            throw ShapeError("feature block " + std::to_string(i) + " has " + std::to_string(s.c) +
                             " channels, decoder expects " + std::to_string(dp.block_channels[i]));
        if (s.h > h || s.w > w)
            throw ArgumentError("feature block " + s.str() + " is larger than the target " + std::to_string(h) + "x" +
                                std::to_string(w));
        ag::Var p = dp.align[i](dp.params, blocks[i]);
        out.push_back(s.h == h && s.w == w ? p : ag::upsample_bilinear(p, h, w));
    }
    return out;
}

ag::Var aggregate(const DecoderParams& dp, const std::vector<ag::Var>& aligned) {
    if (aligned.empty()) throw ArgumentError("aggregate: no aligned features");
    const Shape first = aligned.front()->value.shape();
    for (const auto& a : aligned)
        if (!(a->value.shape() == first)) throw ArgumentError("aggregate: mixed feature shapes");
    if (first.c != dp.config.common_channels) throw ArgumentError("aggregate: features are not at the common width");
    const int pool = dp.config.attention_pool;
    ag::Var fused;
    if (dp.config.mode == Mode::parallel) {
        if (aligned.size() != dp.transformers.size()) throw ArgumentError("aggregate: block count mismatch");
        std::vector<ag::Var> parts;
        for (size_t i = 0; i < aligned.size(); ++i)
            parts.push_back(transformer_layer(dp.params, dp.transformers[i], aligned[i], pool));
        fused = parts.size() == 1 ? parts.front() : ag::concat_channels(parts);
    } else {
        ag::Var cat = aligned.size() == 1 ? aligned.front() : ag::concat_channels(aligned);
        fused = transformer_layer(dp.params, dp.transformers.front(), cat, pool);
    }
    if (fused->value.c() != dp.fused_channels()) throw ShapeError("aggregate: fused width mismatch");
    return fused;
}

ag::Var segmentation_head(const DecoderParams& dp, const ag::Var& fused) {
    if (fused->value.c() != dp.fused_channels())
        throw ShapeError("head expects " + std::to_string(dp.fused_channels()) + " channels, got " +
                         fused->value.shape().str());
    return dp.head2(dp.params, ag::relu(dp.head1(dp.params, fused)));
}

ag::Var fused_features(const DecoderParams& dp, const diffusion::FeatureBlockSet& fs, int h, int w) {
    std::vector<ag::Var> blocks;
    for (int b : dp.config.blocks) blocks.push_back(ag::constant(fs.concatenated(b)));
    return aggregate(dp, align_features(dp, blocks, h, w));
}

DecoderParams train_dtseg(const DatasetBundle& labeled, const Backbone& backbone, const DecoderConfig& config,
                          const TrainOptions& opts, LossHistory* history) {
    std::vector<const LabeledPair*> pairs;
    for (const auto& p : labeled.pairs)
        if (p.mask) pairs.push_back(&p);
    if (pairs.empty()) throw ArgumentError("train_dtseg: no labeled pairs");
    const int K = labeled.num_classes();
    DecoderParams dp = DecoderParams::init(config, block_channels_for(backbone.denoiser, config), K, opts.seed);
    if (opts.steps <= 0) return dp;

    // Frozen backbone: features are computed once per (image, view).
    const int H = pairs.front()->image.height(), W = pairs.front()->image.width();
    std::vector<std::vector<Tensor>> chunks(config.blocks.size());
    std::vector<int> labels;
    for (int view = 0; view < config.feature_views; ++view) {
        const uint64_t noise = view == 0 ? config.noise_seed : mix_seed(opts.seed, 0xfea7 + uint64_t(view));
        for (size_t begin = 0; begin < pairs.size(); begin += kExtractChunk) {
            const size_t end = std::min(pairs.size(), begin + kExtractChunk);
            std::vector<Tensor> images;
            for (size_t i = begin; i < end; ++i) {
                LabeledPair p = view == 0 ? *pairs[i] : datakit::augment(*pairs[i], mix_seed(opts.seed, i * 1000 + view));
                images.push_back(p.image.pixels);
                labels.insert(labels.end(), p.mask->labels.begin(), p.mask->labels.end());
            }
            const auto fs = diffusion::extract_features(backbone.denoiser, backbone.codec, Tensor::stack(images),
                                                        config.timesteps, config.blocks, backbone.schedule, noise);
            for (size_t b = 0; b < config.blocks.size(); ++b)
                chunks[b].push_back(fs.concatenated(config.blocks[b]));
        }
    }
    std::vector<Tensor> cache;
    for (auto& c : chunks) {
        std::vector<Tensor> samples;
        for (const auto& t : c)
            for (int n = 0; n < t.n(); ++n) samples.push_back(t.slice_batch(n, 1));
        cache.push_back(Tensor::stack(samples));
        c.clear();
    }
    const int total = cache.front().n();
    const size_t per_image = size_t(H) * W;

    Rng rng(mix_seed(opts.seed, 0x7a1));
    RMSprop opt(dp.params, opts.lr);
    const int batch = std::max(1, opts.batch);
    for (int step = 0; step < opts.steps; ++step) {
        std::vector<int> idx(static_cast<size_t>(batch));
        for (auto& i : idx) i = rng.randint(0, total - 1);
        std::vector<ag::Var> blocks;
        for (const auto& c : cache) blocks.push_back(ag::constant(c.gather(idx)));
        std::vector<int> y;
        y.reserve(per_image * idx.size());
        for (int i : idx) y.insert(y.end(), labels.begin() + long(i * per_image), labels.begin() + long((i + 1) * per_image));
        ag::Var probs = ag::softmax_channels(segmentation_head(dp, aggregate(dp, align_features(dp, blocks, H, W))));
        ag::Var loss = ag::dice_loss(probs, y, config.dice_smooth);
        check_loss(loss->value[0], step, "train_dtseg");
        if (history) history->push_back(loss->value[0]);
        ag::backward(loss);
        opt.step();
    }
    return dp;
}

Tensor predict_features(const Tensor& images, const Backbone& backbone, const DecoderParams& dp,
                        uint64_t noise_seed) {
    ag::NoGradGuard guard;
    const auto fs = diffusion::extract_features(backbone.denoiser, backbone.codec, images, dp.config.timesteps,
                                                dp.config.blocks, backbone.schedule, noise_seed);
    return fused_features(dp, fs, images.h(), images.w())->value;
}

Tensor predict_probs(const Tensor& images, const Backbone& backbone, const DecoderParams& dp) {
    ag::NoGradGuard guard;
    const Tensor fused = predict_features(images, backbone, dp, dp.config.noise_seed);
    return ag::softmax_channels(segmentation_head(dp, ag::constant(fused)))->value;
}

SegMask predict(const ImagePatch& image, const Backbone& backbone, const DecoderParams& dp) {
    return argmax_masks(predict_probs(image.pixels, backbone, dp)).front();
}

std::vector<SegMask> argmax_masks(const Tensor& scores) {
    const Shape s = scores.shape();
    std::vector<SegMask> out;
    for (int n = 0; n < s.n; ++n) {
        SegMask m(s.h, s.w, s.c);
        for (int y = 0; y < s.h; ++y)
            for (int x = 0; x < s.w; ++x) {
                int best = 0;
                for (int k = 1; k < s.c; ++k)
                    if (scores.at(n, k, y, x) > scores.at(n, best, y, x)) best = k;
                m.at(y, x) = best;
            }
        out.push_back(std::move(m));
    }
    return out;
}

}  // namespace dtseg::segdecoder
