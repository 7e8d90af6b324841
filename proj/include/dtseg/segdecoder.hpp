#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "dtseg/diffusion.hpp"
#include "dtseg/latentcodec.hpp"
#include "dtseg/nn.hpp"
#include "dtseg/types.hpp"

namespace dtseg::segdecoder {

enum class Mode { parallel, serial };

std::string to_string(Mode mode);
Mode mode_from_string(const std::string& text);

struct DecoderConfig {
    std::vector<int> blocks{7, 8, 9};
    std::vector<int> timesteps{50, 150, 200};
    int common_channels = 16;  // c
    Mode mode = Mode::parallel;
    bool self_attention = true;
    int attention_pool = 4;
    int heads = 4;
    int head_hidden = 32;
    bool zero_init_out = false;  // zero the attention/FFN output projections
    double dice_smooth = 1.0;
    int feature_views = 1;  // cached feature views per training image (view 0 unaugmented)
    uint64_t noise_seed = 0;  // extraction noise at inference

    void validate() const;
    nlohmann::json to_json() const;
    static DecoderConfig from_json(const nlohmann::json& j);
};

// Pre-norm layer: x + unpool(Attn(LN(pool(x)))) then + FFN(LN(x)). Tokens
// are the spatial positions after average pooling; [N, c, 1, L] inputs with
// pool 1 are plain token sequences.
struct TransformerLayer {
    int width = 0, heads = 1;
    bool self_attention = true;
    ChannelLayerNorm ln1, ln2;
    Conv2d q, k, v, o;
    Conv2d ff1, ff2;

    static TransformerLayer create(ParamSet& ps, const std::string& name, int width, int heads, bool self_attention,
                                   bool zero_init_out, Rng& rng);
};

ag::Var transformer_layer(const ParamSet& ps, const TransformerLayer& layer, const ag::Var& x, int pool);

struct DecoderParams {
    static constexpr int kVersion = 1;

    DecoderConfig config;
    int num_classes = 2;
    std::vector<int> block_channels;  // per-block input channels (c_i · |timesteps|)
    ParamSet params;
    int version = kVersion;

    std::vector<Conv2d> align;                  // one 1×1 projection per block
    std::vector<TransformerLayer> transformers; // n (parallel) or 1 (serial)
    Conv2d head1, head2;

    static DecoderParams init(const DecoderConfig& config, std::vector<int> block_channels, int num_classes,
                              uint64_t seed);
    static DecoderParams from_params(const DecoderConfig& config, std::vector<int> block_channels, int num_classes,
                                     ParamSet params);

    int fused_channels() const { return int(config.blocks.size()) * config.common_channels; }
    std::string checksum() const { return params.checksum(); }
};

// Per-block input channel counts implied by the denoiser and config.
std::vector<int> block_channels_for(const diffusion::DenoiserParams& denoiser, const DecoderConfig& config);

// Bilinear upsample to H×W plus a learned 1×1 projection to c. The projection
// runs at feature resolution first; bilinear weights sum to one, so this
// equals projecting after upsampling.
std::vector<ag::Var> align_features(const DecoderParams& dp, const std::vector<ag::Var>& blocks, int h, int w);
ag::Var aggregate(const DecoderParams& dp, const std::vector<ag::Var>& aligned);
// Pointwise c_in → hidden → ReLU → K scores (pre-softmax).
ag::Var segmentation_head(const DecoderParams& dp, const ag::Var& fused);

// Fused pre-head features for a feature set: [N, n·c, H, W].
ag::Var fused_features(const DecoderParams& dp, const diffusion::FeatureBlockSet& fs, int h, int w);

struct Backbone {
    const diffusion::DenoiserParams& denoiser;
    const latentcodec::CodecParams& codec;
    const diffusion::NoiseSchedule& schedule;
};

// Algorithm: cache frozen features (feature_views per image) → align →
// aggregate → head → softmax → Dice; only decoder parameters are updated.
DecoderParams train_dtseg(const DatasetBundle& labeled, const Backbone& backbone, const DecoderConfig& config,
                          const TrainOptions& opts, LossHistory* history = nullptr);

// Per-pixel class probabilities [N, K, H, W] for a batch of images.
Tensor predict_probs(const Tensor& images, const Backbone& backbone, const DecoderParams& dp);
// Fused features without the head, [N, n·c, H, W].
Tensor predict_features(const Tensor& images, const Backbone& backbone, const DecoderParams& dp,
                        uint64_t noise_seed);
SegMask predict(const ImagePatch& image, const Backbone& backbone, const DecoderParams& dp);

// Argmax over channels of [N, K, H, W] scores.
std::vector<SegMask> argmax_masks(const Tensor& scores);

}  // namespace dtseg::segdecoder
