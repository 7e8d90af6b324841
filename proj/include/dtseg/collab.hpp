#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "dtseg/segdecoder.hpp"

namespace dtseg::collab {

// ---------------------------------------------------------------------------
// Supervised baseline: small pre-activation residual encoder (three stride-2
// stages) with an FPN top-down decoder. The feature tap is the smoothed
// finest pyramid level upsampled to the input size, right before the 1×1
// classifier.
// ---------------------------------------------------------------------------

struct BaselineConfig {
    int width = 16;       // first stage width; stages use w, 2w, 4w
    int fpn_width = 32;   // pyramid / feature-tap width
    int groups = 4;
    double dice_smooth = 1.0;

    void validate() const;
    nlohmann::json to_json() const;
    static BaselineConfig from_json(const nlohmann::json& j);
};

struct BasicBlock {
    GroupNorm norm1, norm2;
    Conv2d conv1, conv2;
};

struct BaselineParams {
    static constexpr int kVersion = 1;

    BaselineConfig config;
    int num_classes = 2;
    ParamSet params;
    int version = kVersion;

    Conv2d stem;
    std::vector<Conv2d> down;        // one stride-2 conv per stage
    std::vector<BasicBlock> stages;  // one residual block per stage
    std::vector<Conv2d> lateral;     // stage → fpn_width
    Conv2d smooth, classifier;

    static BaselineParams init(const BaselineConfig& config, int num_classes, uint64_t seed);
    static BaselineParams from_params(const BaselineConfig& config, int num_classes, ParamSet params);
    std::string checksum() const { return params.checksum(); }
};

// [N, fpn_width, H, W]; H and W must be multiples of 8.
ag::Var baseline_features(const BaselineParams& bp, const ag::Var& images);
ag::Var baseline_logits(const BaselineParams& bp, const ag::Var& images);
Tensor baseline_probs(const BaselineParams& bp, const Tensor& images);

BaselineParams train_baseline(const DatasetBundle& labeled, const BaselineConfig& config, const TrainOptions& opts,
                              LossHistory* history = nullptr);

// ---------------------------------------------------------------------------
// Participants: frozen feature extractors with a fixed output width.
// ---------------------------------------------------------------------------

struct Participant {
    std::string name;
    int channels = 0;
    // [N, 3, H, W] images → [N, channels, H, W] features; deterministic.
    std::function<Tensor(const Tensor&)> feature_fn;
    // Hash of every frozen parameter the participant reads.
    std::function<std::string()> checksum;
};

Participant make_baseline_participant(std::shared_ptr<const BaselineParams> baseline);

struct DtsegStack {
    std::shared_ptr<const diffusion::DenoiserParams> denoiser;
    std::shared_ptr<const latentcodec::CodecParams> codec;
    std::shared_ptr<const segdecoder::DecoderParams> decoder;
    diffusion::NoiseSchedule schedule;
};

// Fused pre-head DTSeg features (n·c channels) with extraction noise fixed by noise_seed.
Participant make_dtseg_participant(DtsegStack stack, uint64_t noise_seed);

// ---------------------------------------------------------------------------
// Collaborative head: a linear 1×1 mapping per participant to C channels,
// concatenation (participant 1 first), then a pointwise 2-layer head.
// ---------------------------------------------------------------------------

struct CollabConfig {
    int common_channels = 64;  // C
    int head_hidden = 32;
    double dice_smooth = 1.0;

    void validate() const;
    nlohmann::json to_json() const;
    static CollabConfig from_json(const nlohmann::json& j);
};

struct CollabParams {
    static constexpr int kVersion = 1;

    CollabConfig config;
    int num_classes = 2;
    std::vector<int> participant_channels;  // {C_1, C_2}
    ParamSet params;
    int version = kVersion;

    Conv2d map1, map2;
    Conv2d head1, head2;

    static CollabParams init(const CollabConfig& config, int c1, int c2, int num_classes, uint64_t seed);
    static CollabParams from_params(const CollabConfig& config, int c1, int c2, int num_classes, ParamSet params);

    // C·(C_1 + C_2) + 2C + head weights and biases.
    size_t expected_parameter_count() const;
    std::string checksum() const { return params.checksum(); }
};

ag::Var fuse_logits(const CollabParams& cp, const ag::Var& f1, const ag::Var& f2);
// Per-pixel class probabilities [N, K, H, W].
Tensor fuse_and_predict(const Tensor& f1, const Tensor& f2, const CollabParams& cp);

CollabParams train_collab(const DatasetBundle& labeled, const Participant& p1, const Participant& p2,
                          const CollabConfig& config, const TrainOptions& opts, LossHistory* history = nullptr);

// Runs feature_fn over the images of `bundle` in chunks and stacks the result.
Tensor participant_features(const Participant& p, const DatasetBundle& bundle);

}  // namespace dtseg::collab
