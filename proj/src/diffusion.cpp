#include "dtseg/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "dtseg/errors.hpp"

namespace dtseg::diffusion {

namespace {

void finish_schedule(NoiseSchedule& s) {
    s.T = int(s.beta.size());
    s.alpha.resize(s.beta.size());
    s.alpha_bar.assign(s.beta.size() + 1, 1.0);
    for (size_t i = 0; i < s.beta.size(); ++i) {
        s.alpha[i] = 1.0 - s.beta[i];
        s.alpha_bar[i + 1] = s.alpha_bar[i] * s.alpha[i];
    }
}

int enc_width(const DenoiserConfig& c, int level) { return level == 0 ? c.base_width : 2 * c.base_width; }

int groups_for(const DenoiserConfig& c, int channels) { return std::gcd(c.groups, channels); }

ResBlock make_block(ParamSet& ps, const DenoiserConfig& c, const std::string& name, int in, int out, Rng& rng) {
    ResBlock b;
    b.in = in;
    b.out = out;
    b.norm1 = GroupNorm::create(ps, name + ".norm1", in, groups_for(c, in));
    b.conv1 = Conv2d::create(ps, name + ".conv1", in, out, 3, 1, 1, rng);
    b.temb_proj = Conv2d::pointwise(ps, name + ".temb", c.temb_dim, out, rng);
    b.norm2 = GroupNorm::create(ps, name + ".norm2", out, groups_for(c, out));
    b.conv2 = Conv2d::create(ps, name + ".conv2", out, out, 3, 1, 1, rng);
    if (in != out) {
        b.has_skip = true;
        b.skip = Conv2d::pointwise(ps, name + ".skip", in, out, rng);
    }
    return b;
}

ag::Var run_block(const ParamSet& ps, const ResBlock& b, const ag::Var& x, const ag::Var& emb) {
    ag::Var h = b.conv1(ps, ag::silu(b.norm1(ps, x)));
    h = ag::add_channel_bias(h, b.temb_proj(ps, emb));
    h = b.conv2(ps, ag::silu(b.norm2(ps, h)));
    return ag::add(h, b.has_skip ? b.skip(ps, x) : x);
}

void check_timestep(int t, const NoiseSchedule& s, int lo) {
    if (t < lo || t > s.T)
        throw ArgumentError("timestep " + std::to_string(t) + " outside [" + std::to_string(lo) + ", " +
                            std::to_string(s.T) + "]");
}

}  // namespace

nlohmann::json NoiseSchedule::to_json() const {
    return {{"T", T}, {"beta_start", beta_start}, {"beta_end", beta_end}};
}

NoiseSchedule NoiseSchedule::from_json(const nlohmann::json& j) {
    return build_schedule(j.at("T").get<int>(), j.at("beta_start").get<double>(), j.at("beta_end").get<double>());
}

NoiseSchedule build_schedule(int T, double beta_start, double beta_end) {
    if (T < 1) throw ArgumentError("schedule T must be >= 1");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
        throw ArgumentError("schedule requires 0 < beta_start <= beta_end < 1");
    NoiseSchedule s;
    s.beta_start = beta_start;
    s.beta_end = beta_end;
    s.beta.resize(size_t(T));
    for (int i = 0; i < T; ++i)
        s.beta[size_t(i)] = T == 1 ? beta_start : beta_start + (beta_end - beta_start) * double(i) / double(T - 1);
    finish_schedule(s);
    return s;
}

NoiseSchedule schedule_from_betas(std::vector<double> betas) {
    if (betas.empty()) throw ArgumentError("schedule needs at least one beta");
    for (double b : betas)
        if (!(b > 0.0 && b < 1.0)) throw ArgumentError("every beta must lie in (0, 1)");
    NoiseSchedule s;
    s.beta_start = betas.front();
    s.beta_end = betas.back();
    s.beta = std::move(betas);
    finish_schedule(s);
    return s;
}

Tensor forward_diffuse(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& schedule) {
    check_timestep(t, schedule, 0);
    if (!(z0.shape() == eps.shape()))
        throw ShapeError("forward_diffuse: noise " + eps.shape().str() + " vs latent " + z0.shape().str());
    const double a = std::sqrt(schedule.alpha_bar[size_t(t)]);
    const double b = std::sqrt(1.0 - schedule.alpha_bar[size_t(t)]);
    Tensor out(z0.shape());
    for (size_t i = 0; i < out.numel(); ++i) out[i] = a * z0[i] + b * eps[i];
    return out;
}

void DenoiserConfig::validate() const {
    if (in_channels < 1) throw ArgumentError("denoiser in_channels must be >= 1");
    if (base_width < 1) throw ArgumentError("denoiser base_width must be >= 1");
    if (depth < 0 || bottleneck_blocks < 0 || tail_blocks < 0)
        throw ArgumentError("denoiser depth and block counts must be >= 0");
    if (temb_dim < 2 || temb_dim % 2 != 0) throw ArgumentError("denoiser temb_dim must be even and >= 2");
    if (groups < 1) throw ArgumentError("denoiser groups must be >= 1");
}

nlohmann::json DenoiserConfig::to_json() const {
    return {{"in_channels", in_channels},      {"base_width", base_width}, {"depth", depth},
            {"bottleneck_blocks", bottleneck_blocks}, {"tail_blocks", tail_blocks}, {"temb_dim", temb_dim},
            {"groups", groups}};
}

DenoiserConfig DenoiserConfig::from_json(const nlohmann::json& j) {
    DenoiserConfig c;
    c.in_channels = j.at("in_channels").get<int>();
    c.base_width = j.at("base_width").get<int>();
    c.depth = j.at("depth").get<int>();
    c.bottleneck_blocks = j.at("bottleneck_blocks").get<int>();
    c.tail_blocks = j.at("tail_blocks").get<int>();
    c.temb_dim = j.at("temb_dim").get<int>();
    c.groups = j.at("groups").get<int>();
    c.validate();
    return c;
}

DenoiserParams DenoiserParams::init(const DenoiserConfig& config, uint64_t seed) {
    config.validate();
    DenoiserParams d;
    d.config = config;
    Rng rng(mix_seed(seed, 0xd1ff));
    auto& ps = d.params;
    const int w = config.base_width;
    d.in_conv = Conv2d::create(ps, "in_conv", config.in_channels, w, 3, 1, 1, rng);
    d.temb1 = Conv2d::pointwise(ps, "temb.fc1", config.temb_dim, config.temb_dim, rng);
    d.temb2 = Conv2d::pointwise(ps, "temb.fc2", config.temb_dim, config.temb_dim, rng);

    int index = 1;
    auto name = [&index] { return "block" + std::to_string(index++); };
    int ch = w;
    for (int l = 0; l <= config.depth; ++l) {
        if (l > 0) d.downsample.push_back(Conv2d::create(ps, "down" + std::to_string(l), ch, ch, 3, 2, 1, rng));
        d.blocks.push_back(make_block(ps, config, name(), ch, enc_width(config, l), rng));
        ch = enc_width(config, l);
    }
    for (int i = 0; i < config.bottleneck_blocks; ++i) d.blocks.push_back(make_block(ps, config, name(), ch, ch, rng));
    for (int l = config.depth; l >= 0; --l) {
        const int out = enc_width(config, l);
        d.blocks.push_back(make_block(ps, config, name(), ch + out, out, rng));
        ch = out;
    }
    for (int i = 0; i < config.tail_blocks; ++i) d.blocks.push_back(make_block(ps, config, name(), ch, ch, rng));
    d.out_norm = GroupNorm::create(ps, "out_norm", ch, groups_for(config, ch));
    d.out_conv = Conv2d::create(ps, "out_conv", ch, config.in_channels, 3, 1, 1, rng);
    return d;
}

DenoiserParams DenoiserParams::from_params(const DenoiserConfig& config, ParamSet params) {
    DenoiserParams d = init(config, 0);
    assign_params(d.params, params);
    return d;
}

BlockInfo DenoiserParams::block_info(int block) const {
    const int n = config.n_blocks();
    if (block < 1 || block > n)
        throw ArgumentError("block " + std::to_string(block) + " is not registered (valid: 1.." + std::to_string(n) +
                            ")");
    const int enc = config.depth + 1;
    const int i = block - 1;
    BlockInfo info;
    info.channels = blocks[size_t(i)].out;
    if (i < enc)
        info.level = i;
    else if (i < enc + config.bottleneck_blocks)
        info.level = config.depth;
    else if (i < 2 * enc + config.bottleneck_blocks)
        info.level = config.depth - (i - enc - config.bottleneck_blocks);
    else
        info.level = 0;
    return info;
}

Tensor timestep_embedding(const std::vector<int>& t, int dim) {
    const int half = dim / 2;
    Tensor e(int(t.size()), dim, 1, 1);
    for (size_t n = 0; n < t.size(); ++n)
        for (int k = 0; k < half; ++k) {
            const double freq = std::exp(-std::log(10000.0) * double(k) / double(half));
            e.at(int(n), k, 0, 0) = std::sin(double(t[n]) * freq);
            e.at(int(n), half + k, 0, 0) = std::cos(double(t[n]) * freq);
        }
    return e;
}

ag::Var denoiser_forward(const DenoiserParams& d, const ag::Var& z_t, const std::vector<int>& t,
                         const std::vector<int>& hooks, std::map<int, ag::Var>* captured) {
    const auto& c = d.config;
    const Shape s = z_t->value.shape();
    if (s.c != c.in_channels)
        throw ShapeError("denoiser expects " + std::to_string(c.in_channels) + " channels, got " + s.str());
    const int mult = 1 << c.depth;
    if (s.h % mult != 0 || s.w % mult != 0)
        throw ShapeError("denoiser input " + s.str() + " not divisible by " + std::to_string(mult));
    if (int(t.size()) != s.n) throw ArgumentError("denoiser needs one timestep per sample");
    for (int b : hooks) d.block_info(b);

    const auto& ps = d.params;
    ag::Var emb = ag::constant(timestep_embedding(t, c.temb_dim));
    emb = ag::silu(d.temb2(ps, ag::silu(d.temb1(ps, emb))));

    size_t next = 0;
    auto step = [&](const ag::Var& x) {
        ag::Var h = run_block(ps, d.blocks[next], x, emb);
        ++next;
        if (captured && std::find(hooks.begin(), hooks.end(), int(next)) != hooks.end()) (*captured)[int(next)] = h;
        return h;
    };

    ag::Var h = d.in_conv(ps, z_t);
    std::vector<ag::Var> skips;
    for (int l = 0; l <= c.depth; ++l) {
        if (l > 0) h = d.downsample[size_t(l - 1)](ps, h);
        h = step(h);
        skips.push_back(h);
    }
    for (int i = 0; i < c.bottleneck_blocks; ++i) h = step(h);
    for (int l = c.depth; l >= 0; --l) {
        if (l < c.depth) h = ag::upsample_nearest(h, 2);
        h = step(ag::concat_channels({h, skips[size_t(l)]}));
    }
    for (int i = 0; i < c.tail_blocks; ++i) h = step(h);
    return d.out_conv(ps, ag::silu(d.out_norm(ps, h)));
}

DenoiseOutput denoiser_forward(const DenoiserParams& params, const Tensor& z_t, int t, const std::vector<int>& hooks) {
    ag::NoGradGuard guard;
    std::map<int, ag::Var> captured;
    ag::Var out = denoiser_forward(params, ag::constant(z_t), std::vector<int>(size_t(z_t.n()), t), hooks, &captured);
    DenoiseOutput result;
    result.eps_hat = out->value;
    for (auto& [block, var] : captured) result.features[block] = var->value;
    return result;
}

DenoiserParams pretrain_diffusion(const DatasetBundle& unlabeled, const latentcodec::CodecParams& codec,
                                  const NoiseSchedule& schedule, const DenoiserConfig& config,
                                  const TrainOptions& opts, LossHistory* history) {
    if (unlabeled.pairs.empty()) throw ArgumentError("pretrain_diffusion: empty bundle");
    if (config.in_channels != codec.config.latent_channels)
        throw ArgumentError("denoiser in_channels must equal codec latent_channels");
    DenoiserParams d = DenoiserParams::init(config, opts.seed);
    if (opts.steps <= 0) return d;

    std::vector<Tensor> latents;
    latents.reserve(unlabeled.pairs.size());
    for (const auto& p : unlabeled.pairs) latents.push_back(latentcodec::encode(codec, p.image.pixels));

    const int n = int(latents.size());
    const int batch = std::max(1, opts.batch);
    Rng rng(mix_seed(opts.seed, 0x9e7));
    RMSprop opt(d.params, opts.lr);
    for (int step = 0; step < opts.steps; ++step) {
        std::vector<Tensor> zs, noise;
        std::vector<int> ts;
        for (int b = 0; b < batch; ++b) {
            const Tensor& z0 = latents[size_t(rng.randint(0, n - 1))];
            const int t = rng.randint(1, schedule.T);
            Tensor eps = rng.normal_tensor(z0.shape());
            zs.push_back(forward_diffuse(z0, t, eps, schedule));
            noise.push_back(std::move(eps));
            ts.push_back(t);
        }
        ag::Var pred = denoiser_forward(d, ag::constant(Tensor::stack(zs)), ts);
        ag::Var loss = ag::mse_loss(pred, Tensor::stack(noise));
        check_loss(loss->value[0], step, "pretrain_diffusion");
        if (history) history->push_back(loss->value[0]);
        ag::backward(loss);
        opt.step();
    }
    return d;
}

std::vector<Tensor> sample(const DenoiserParams& params, const NoiseSchedule& schedule, int stride, int n, int h,
                           int w, uint64_t seed) {
    if (stride < 1 || schedule.T % stride != 0)
        throw ArgumentError("sampling stride " + std::to_string(stride) + " must divide T=" +
                            std::to_string(schedule.T));
    if (n < 1) throw ArgumentError("sample count must be >= 1");
    Rng rng(mix_seed(seed, 0x5a3b1e));
    std::vector<Tensor> out;
    for (int i = 0; i < n; ++i) {
        Tensor z = rng.normal_tensor({1, params.config.in_channels, h, w});
        for (int t = schedule.T; t > 0; t -= stride) {
            const Tensor eps = denoiser_forward(params, z, t).eps_hat;
            const double ab = schedule.alpha_bar[size_t(t)];
            const double ab_prev = schedule.alpha_bar[size_t(t - stride)];
            for (size_t k = 0; k < z.numel(); ++k) {
                const double x0 = (z[k] - std::sqrt(1.0 - ab) * eps[k]) / std::sqrt(ab);
                z[k] = std::sqrt(ab_prev) * x0 + std::sqrt(1.0 - ab_prev) * eps[k];
            }
        }
        out.push_back(std::move(z));
    }
    return out;
}

const Tensor& FeatureBlockSet::at(int block, int t) const {
    auto it = entries.find({block, t});
    if (it == entries.end())
        throw ArgumentError("no feature for block " + std::to_string(block) + " at t=" + std::to_string(t));
    return it->second;
}

Tensor FeatureBlockSet::concatenated(int block) const {
    std::vector<Tensor> parts;
    for (int t : timesteps) parts.push_back(at(block, t));
    return Tensor::concat_channels(parts);
}

int FeatureBlockSet::channels(int block) const {
    int total = 0;
    for (int t : timesteps) total += at(block, t).c();
    return total;
}

FeatureBlockSet extract_features(const DenoiserParams& params, const latentcodec::CodecParams& codec, const Tensor& x,
                                 const std::vector<int>& timesteps, const std::vector<int>& blocks,
                                 const NoiseSchedule& schedule, uint64_t noise_seed) {
    if (timesteps.empty() || blocks.empty()) throw ArgumentError("extract_features needs timesteps and blocks");
    for (int t : timesteps) check_timestep(t, schedule, 1);
    for (int b : blocks) params.block_info(b);

    FeatureBlockSet fs;
    fs.blocks = blocks;
    fs.timesteps = timesteps;
    const Tensor z0 = latentcodec::encode(codec, x);
    const int per = z0.c() * z0.h() * z0.w();
    for (int t : timesteps) {
        Rng rng(mix_seed(noise_seed, uint64_t(t)));
        const Tensor one = rng.normal_tensor({1, z0.c(), z0.h(), z0.w()});
        Tensor eps(z0.shape());
        for (int n = 0; n < z0.n(); ++n) std::copy(one.data(), one.data() + per, eps.sample(n));
        DenoiseOutput out = denoiser_forward(params, forward_diffuse(z0, t, eps, schedule), t, blocks);
        for (int b : blocks) fs.entries[{b, t}] = std::move(out.features.at(b));
    }
    for (int b : blocks) {
        const Shape first = fs.at(b, timesteps.front()).shape();
        for (int t : timesteps) {
            const Shape s = fs.at(b, t).shape();
            if (s.n != first.n || s.h != first.h || s.w != first.w)
                throw std::logic_error("feature block " + std::to_string(b) + " changed shape across timesteps");
        }
    }
    return fs;
}

FeatureBlockSet extract_features(const DenoiserParams& params, const latentcodec::CodecParams& codec,
                                 const ImagePatch& x, const std::vector<int>& timesteps,
                                 const std::vector<int>& blocks, const NoiseSchedule& schedule, uint64_t noise_seed) {
    return extract_features(params, codec, x.pixels, timesteps, blocks, schedule, noise_seed);
}

}  // namespace dtseg::diffusion
