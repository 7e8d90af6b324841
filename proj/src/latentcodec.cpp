#include "dtseg/latentcodec.hpp"

#include <algorithm>
#include <cmath>

#include "dtseg/errors.hpp"

namespace dtseg::latentcodec {

namespace {

int levels_for(int factor) {
    int levels = 0;
    while ((1 << levels) < factor) ++levels;
    return levels;
}

void check_divisible(const CodecParams& codec, const Tensor& x) {
    const int f = codec.config.factor;
    if (x.c() != 3) throw ShapeError("codec input must have 3 channels, got " + x.shape().str());
    if (x.h() % f != 0 || x.w() % f != 0)
        throw ShapeError("image " + std::to_string(x.h()) + "x" + std::to_string(x.w()) +
                         " is not divisible by codec factor " + std::to_string(f));
}

Tensor stack_images(const DatasetBundle& bundle, const std::vector<int>& idx) {
    std::vector<Tensor> xs;
    xs.reserve(idx.size());
    for (int i : idx) xs.push_back(bundle.pairs[size_t(i)].image.pixels);
    return Tensor::stack(xs);
}

}  // namespace

void CodecConfig::validate() const {
    if (factor < 1 || (factor & (factor - 1)) != 0) throw ArgumentError("codec factor must be a power of two >= 1");
    if (latent_channels < 1) throw ArgumentError("codec latent_channels must be >= 1");
    if (identity() && latent_channels != 3) throw ArgumentError("identity codec (factor 1) requires 3 latent channels");
    if (width < 1) throw ArgumentError("codec width must be >= 1");
}

nlohmann::json CodecConfig::to_json() const {
    return {{"factor", factor}, {"latent_channels", latent_channels}, {"width", width}};
}

CodecConfig CodecConfig::from_json(const nlohmann::json& j) {
    CodecConfig c;
    c.factor = j.at("factor").get<int>();
    c.latent_channels = j.at("latent_channels").get<int>();
    c.width = j.at("width").get<int>();
    c.validate();
    return c;
}

CodecParams CodecParams::init(const CodecConfig& config, uint64_t seed) {
    config.validate();
    CodecParams c;
    c.config = config;
    if (config.identity()) return c;
    Rng rng(mix_seed(seed, 0xc0dec));
    const int w = config.width;
    const int levels = levels_for(config.factor);
    c.encoder.push_back(Conv2d::create(c.params, "enc.stem", 3, w, 3, 1, 1, rng));
    for (int l = 0; l < levels; ++l)
        c.encoder.push_back(Conv2d::create(c.params, "enc.down" + std::to_string(l), w, w, 3, 2, 1, rng));
    c.encoder.push_back(Conv2d::pointwise(c.params, "enc.to_latent", w, config.latent_channels, rng));
    c.decoder.push_back(Conv2d::pointwise(c.params, "dec.from_latent", config.latent_channels, w, rng));
    for (int l = 0; l < levels; ++l)
        c.decoder.push_back(Conv2d::create(c.params, "dec.up" + std::to_string(l), w, w, 3, 1, 1, rng));
    c.decoder.push_back(Conv2d::create(c.params, "dec.out", w, 3, 3, 1, 1, rng));
    c.latent_shift = c.params.add("latent.shift", Tensor(1, config.latent_channels, 1, 1, 0.0));
    c.latent_scale = c.params.add("latent.scale", Tensor(1, config.latent_channels, 1, 1, 1.0));
    return c;
}

CodecParams CodecParams::from_params(const CodecConfig& config, ParamSet params) {
    CodecParams c = init(config, 0);
    assign_params(c.params, params);
    return c;
}

ag::Var encode_raw(const CodecParams& codec, const ag::Var& x) {
    if (codec.config.identity()) return x;
    const auto& ps = codec.params;
    ag::Var h = ag::silu(codec.encoder.front()(ps, x));
    for (size_t i = 1; i + 1 < codec.encoder.size(); ++i) h = ag::silu(codec.encoder[i](ps, h));
    return codec.encoder.back()(ps, h);
}

ag::Var decode_raw(const CodecParams& codec, const ag::Var& z) {
    if (codec.config.identity()) return z;
    const auto& ps = codec.params;
    ag::Var h = ag::silu(codec.decoder.front()(ps, z));
    for (size_t i = 1; i + 1 < codec.decoder.size(); ++i)
        h = ag::upsample_nearest(ag::silu(codec.decoder[i](ps, h)), 2);
    return codec.decoder.back()(ps, h);
}

Tensor encode(const CodecParams& codec, const Tensor& x) {
    check_divisible(codec, x);
    if (codec.config.identity()) return x;
    ag::NoGradGuard guard;
    Tensor z = encode_raw(codec, ag::constant(x))->value;
    const Tensor& shift = codec.params[codec.latent_shift]->value;
    const Tensor& scale = codec.params[codec.latent_scale]->value;
    const size_t plane = z.shape().plane();
    for (int n = 0; n < z.n(); ++n)
        for (int c = 0; c < z.c(); ++c) {
            double* p = z.sample(n) + size_t(c) * plane;
            for (size_t i = 0; i < plane; ++i) p[i] = (p[i] - shift[c]) / scale[c];
        }
    return z;
}

Tensor encode(const CodecParams& codec, const ImagePatch& x) { return encode(codec, x.pixels); }

Tensor decode(const CodecParams& codec, const Tensor& z) {
    if (z.c() != codec.config.latent_channels)
        throw ShapeError("latent has " + std::to_string(z.c()) + " channels, codec expects " +
                         std::to_string(codec.config.latent_channels));
    Tensor out;
    if (codec.config.identity()) {
        out = z;
    } else {
        Tensor raw = z;
        const Tensor& shift = codec.params[codec.latent_shift]->value;
        const Tensor& scale = codec.params[codec.latent_scale]->value;
        const size_t plane = raw.shape().plane();
        for (int n = 0; n < raw.n(); ++n)
            for (int c = 0; c < raw.c(); ++c) {
                double* p = raw.sample(n) + size_t(c) * plane;
                for (size_t i = 0; i < plane; ++i) p[i] = p[i] * scale[c] + shift[c];
            }
        ag::NoGradGuard guard;
        out = decode_raw(codec, ag::constant(raw))->value;
    }
    for (auto& v : out.vec()) v = std::clamp(v, 0.0, 1.0);
    return out;
}

CodecParams train_codec(const DatasetBundle& bundle, const CodecConfig& config, const TrainOptions& opts,
                        LossHistory* history) {
    if (bundle.pairs.empty()) throw ArgumentError("train_codec: empty bundle");
    CodecParams codec = CodecParams::init(config, opts.seed);
    if (config.identity() || opts.steps <= 0) return codec;
    for (const auto& p : bundle.pairs) check_divisible(codec, p.image.pixels);

    const int n = int(bundle.pairs.size());
    const int batch = std::max(1, std::min(opts.batch, n));
    Rng rng(mix_seed(opts.seed, 0xba7c4));
    RMSprop opt(codec.params, opts.lr);
    for (int step = 0; step < opts.steps; ++step) {
        std::vector<int> idx(static_cast<size_t>(batch));
        for (auto& i : idx) i = rng.randint(0, n - 1);
        const Tensor x = stack_images(bundle, idx);
        ag::Var recon = decode_raw(codec, encode_raw(codec, ag::constant(x)));
        ag::Var loss = ag::mse_loss(recon, x);
        check_loss(loss->value[0], step, "train_codec");
        if (history) history->push_back(loss->value[0]);
        ag::backward(loss);
        opt.step();
    }

    // Per-channel latent statistics over the training set.
    const int c = config.latent_channels;
    std::vector<double> sum(c, 0.0), sq(c, 0.0);
    double count = 0.0;
    {
        ag::NoGradGuard guard;
        for (const auto& p : bundle.pairs) {
            const Tensor z = encode_raw(codec, ag::constant(p.image.pixels))->value;
            const size_t plane = z.shape().plane();
            for (int ch = 0; ch < c; ++ch)
                for (size_t i = 0; i < plane; ++i) {
                    const double v = z[size_t(ch) * plane + i];
                    sum[ch] += v;
                    sq[ch] += v * v;
                }
            count += double(z.shape().plane());
        }
    }
    Tensor& shift = codec.params[codec.latent_shift]->value;
    Tensor& scale = codec.params[codec.latent_scale]->value;
    for (int ch = 0; ch < c; ++ch) {
        const double mean = sum[ch] / count;
        const double var = std::max(sq[ch] / count - mean * mean, 1e-12);
        shift[ch] = mean;
        scale[ch] = std::sqrt(var);
    }
    return codec;
}

double reconstruction_mse(const CodecParams& codec, const DatasetBundle& bundle) {
    if (bundle.pairs.empty()) throw ArgumentError("reconstruction_mse: empty bundle");
    double total = 0.0;
    size_t count = 0;
    for (const auto& p : bundle.pairs) {
        const Tensor recon = decode(codec, encode(codec, p.image.pixels));
        for (size_t i = 0; i < recon.numel(); ++i) {
            const double d = recon[i] - p.image.pixels[i];
            total += d * d;
        }
        count += recon.numel();
    }
    return total / double(count);
}

}  // namespace dtseg::latentcodec
