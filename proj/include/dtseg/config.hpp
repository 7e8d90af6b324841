#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "dtseg/collab.hpp"
#include "dtseg/diffusion.hpp"
#include "dtseg/latentcodec.hpp"
#include "dtseg/segdecoder.hpp"

namespace dtseg::config {

// Fixed step budgets stand in for the unstated epoch counts.
struct StageBudget {
    int steps = 0;
    int batch = 1;
    double lr = 1e-3;

    TrainOptions options(uint64_t seed) const { return {steps, batch, lr, seed}; }
};

struct DatasetSection {
    std::string path;           // empty → synthetic
    std::string test_path;      // empty → synthetic test set or hold out the tail of `path`
    int synthetic_count = 64;   // training-pool size when synthetic
    int test_count = 32;        // held-out images
    int patch = 64;
    int num_classes = 3;
    std::vector<std::string> class_names;  // empty → class0..class{K-1}
    std::string split = "1/10";
    uint64_t data_seed = 0;
    std::vector<uint64_t> seeds{0, 1, 2};
};

struct EvalSection {
    bool include_background = true;
    bool welch_tests = true;
};

enum class Stage { codec, pretrain, dtseg, baseline, collab, evaluate };
std::string to_string(Stage stage);
Stage stage_from_string(const std::string& text);
std::vector<Stage> all_stages();

struct ExperimentConfig {
    DatasetSection dataset;
    latentcodec::CodecConfig codec;
    StageBudget codec_train{300, 8, 2e-3};
    int schedule_T = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    diffusion::DenoiserConfig denoiser;
    StageBudget pretrain{300, 20, 2e-6};
    segdecoder::DecoderConfig decoder;
    StageBudget dtseg{500, 5, 1e-3};
    collab::BaselineConfig baseline;
    StageBudget baseline_train{500, 5, 1e-3};
    collab::CollabConfig collab;
    StageBudget collab_train{300, 5, 2e-3};
    EvalSection eval;
    std::vector<Stage> stages = all_stages();

    diffusion::NoiseSchedule schedule() const;
    std::vector<std::string> class_names() const;

    // Full JSON with every field; feeding it back through from_json is lossless.
    nlohmann::json to_json() const;
    // Missing keys take defaults; unknown keys and invalid values throw ConfigError naming the key path.
    static ExperimentConfig from_json(const nlohmann::json& j);
    void validate() const;
};

ExperimentConfig load(const std::string& path);
// Canonical text form (sorted keys, 2-space indent).
std::string dump(const ExperimentConfig& config);

// Overlays `overrides` onto `base`; every key of `overrides` must exist in
// `base`. Objects merge recursively, everything else replaces.
nlohmann::json merge_strict(const nlohmann::json& base, const nlohmann::json& overrides, const std::string& where = "");

}  // namespace dtseg::config
