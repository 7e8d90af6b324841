#pragma once

#include <string>

#include <json.hpp>

#include "dtseg/nn.hpp"
#include "dtseg/types.hpp"

namespace dtseg::latentcodec {

struct CodecConfig {
    int factor = 2;          // spatial downsampling f, power of two
    int latent_channels = 3; // c_z
    int width = 16;          // hidden conv width

    bool identity() const { return factor == 1; }
    void validate() const;
    nlohmann::json to_json() const;
    static CodecConfig from_json(const nlohmann::json& j);
};

// Strided-convolution autoencoder. With factor 1 it is the exact identity and
// has no weights. Latents are standardized per channel with statistics taken
// from the training set so they suit the diffusion noise scale.
struct CodecParams {
    static constexpr int kVersion = 1;

    CodecConfig config;
    ParamSet params;
    int version = kVersion;

    // Layer layout (indices into params).
    std::vector<Conv2d> encoder;  // stem, one stride-2 conv per level, latent projection
    std::vector<Conv2d> decoder;  // latent expansion, one conv per level, output conv
    size_t latent_shift = 0, latent_scale = 0;

    static CodecParams init(const CodecConfig& config, uint64_t seed);
    // Rebuilds the layer layout for `config` with weights taken from `params`.
    static CodecParams from_params(const CodecConfig& config, ParamSet params);

    std::string checksum() const { return params.checksum(); }
};

// x: [N, 3, H, W] → [N, c_z, H/f, W/f]. Throws ShapeError if H or W is not a multiple of f.
Tensor encode(const CodecParams& codec, const Tensor& x);
Tensor encode(const CodecParams& codec, const ImagePatch& x);
// z: [N, c_z, h, w] → [N, 3, h·f, w·f], clipped to [0, 1].
Tensor decode(const CodecParams& codec, const Tensor& z);

// Differentiable halves used for training (raw latents, unclipped output).
ag::Var encode_raw(const CodecParams& codec, const ag::Var& x);
ag::Var decode_raw(const CodecParams& codec, const ag::Var& z);

// Pixel reconstruction (MSE) training; latent statistics are refreshed at the
// end. Identity codecs are returned unchanged.
CodecParams train_codec(const DatasetBundle& bundle, const CodecConfig& config, const TrainOptions& opts,
                        LossHistory* history = nullptr);

double reconstruction_mse(const CodecParams& codec, const DatasetBundle& bundle);

}  // namespace dtseg::latentcodec
