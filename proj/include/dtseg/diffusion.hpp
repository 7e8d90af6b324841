#pragma once

#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "dtseg/latentcodec.hpp"
#include "dtseg/nn.hpp"
#include "dtseg/types.hpp"

namespace dtseg::diffusion {

// beta[t-1] is β_t for t = 1..T; alpha_bar has T+1 entries with alpha_bar[0] = 1.
struct NoiseSchedule {
    int T = 0;
    double beta_start = 0.0, beta_end = 0.0;
    std::vector<double> beta, alpha, alpha_bar;

    nlohmann::json to_json() const;
    static NoiseSchedule from_json(const nlohmann::json& j);
};

// Linearly spaced β (inclusive endpoints).
NoiseSchedule build_schedule(int T, double beta_start, double beta_end);
// Arbitrary β_1..β_T, each in (0, 1).
NoiseSchedule schedule_from_betas(std::vector<double> betas);

// z_t = √ᾱ_t·z0 + √(1−ᾱ_t)·ε
Tensor forward_diffuse(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& schedule);

// Block numbering, 1-based in forward order:
//   encoder   depth+1 blocks (resolution halves between them)
//   bottleneck bottleneck_blocks
//   decoder   depth+1 blocks, each fed the matching encoder skip
//   tail      tail_blocks at full resolution
// The defaults give 9 blocks; blocks 7, 8, 9 are the two upper decoder
// stages and the full-resolution tail.
struct DenoiserConfig {
    int in_channels = 3;
    int base_width = 16;
    int depth = 2;
    int bottleneck_blocks = 2;
    int tail_blocks = 1;
    int temb_dim = 32;
    int groups = 4;

    int n_blocks() const { return 2 * (depth + 1) + bottleneck_blocks + tail_blocks; }
    void validate() const;
    nlohmann::json to_json() const;
    static DenoiserConfig from_json(const nlohmann::json& j);
};

struct ResBlock {
    int in = 0, out = 0;
    GroupNorm norm1, norm2;
    Conv2d conv1, conv2, temb_proj;
    bool has_skip = false;
    Conv2d skip;
};

struct BlockInfo {
    int channels = 0;
    int level = 0;  // spatial downsampling is 2^level relative to the input
};

struct DenoiserParams {
    static constexpr int kVersion = 1;

    DenoiserConfig config;
    ParamSet params;
    int version = kVersion;

    Conv2d in_conv;
    Conv2d temb1, temb2;
    std::vector<ResBlock> blocks;     // n_blocks, in numbering order
    std::vector<Conv2d> downsample;   // depth
    GroupNorm out_norm;
    Conv2d out_conv;

    static DenoiserParams init(const DenoiserConfig& config, uint64_t seed);
    static DenoiserParams from_params(const DenoiserConfig& config, ParamSet params);

    BlockInfo block_info(int block) const;  // throws ArgumentError for unknown blocks
    std::string checksum() const { return params.checksum(); }
};

struct DenoiseOutput {
    Tensor eps_hat;
    std::map<int, Tensor> features;  // hooked block → activation
};

// Differentiable forward pass. `t` holds one timestep per sample. Activations
// of `hooks` are stored into *captured when non-null.
ag::Var denoiser_forward(const DenoiserParams& params, const ag::Var& z_t, const std::vector<int>& t,
                         const std::vector<int>& hooks = {}, std::map<int, ag::Var>* captured = nullptr);
// Inference form with a single timestep for the whole batch.
DenoiseOutput denoiser_forward(const DenoiserParams& params, const Tensor& z_t, int t,
                               const std::vector<int>& hooks = {});

// Sinusoidal timestep embedding, [N, dim, 1, 1].
Tensor timestep_embedding(const std::vector<int>& t, int dim);

// ε-prediction MSE training on the codec latents of `unlabeled`.
DenoiserParams pretrain_diffusion(const DatasetBundle& unlabeled, const latentcodec::CodecParams& codec,
                                  const NoiseSchedule& schedule, const DenoiserConfig& config,
                                  const TrainOptions& opts, LossHistory* history = nullptr);

// Deterministic strided reverse process over T, T−stride, …, stride.
// Returns n latents of shape [1, in_channels, h, w].
std::vector<Tensor> sample(const DenoiserParams& params, const NoiseSchedule& schedule, int stride, int n, int h,
                           int w, uint64_t seed);

struct FeatureBlockSet {
    std::vector<int> blocks;
    std::vector<int> timesteps;
    std::map<std::pair<int, int>, Tensor> entries;  // (block, timestep) → [N, c_i, h_i, w_i]

    const Tensor& at(int block, int t) const;
    // All timesteps of one block concatenated along channels, in timestep order.
    Tensor concatenated(int block) const;
    int channels(int block) const;
};

// Encodes x, noises it once per timestep (noise from noise_seed, identical for
// every sample of the batch) and captures the requested blocks.
FeatureBlockSet extract_features(const DenoiserParams& params, const latentcodec::CodecParams& codec, const Tensor& x,
                                 const std::vector<int>& timesteps, const std::vector<int>& blocks,
                                 const NoiseSchedule& schedule, uint64_t noise_seed);
FeatureBlockSet extract_features(const DenoiserParams& params, const latentcodec::CodecParams& codec,
                                 const ImagePatch& x, const std::vector<int>& timesteps,
                                 const std::vector<int>& blocks, const NoiseSchedule& schedule, uint64_t noise_seed);

}  // namespace dtseg::diffusion
