#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dtseg/checkpoint.hpp"
#include "dtseg/config.hpp"
#include "dtseg/evalkit.hpp"

// Run directory layout:
//
//   <run>/config.json                       canonical config echo
//   <run>/manifest.json                     artifact key → checkpoint path
//   <run>/codec/codec-<hash>.ckpt
//   <run>/pretrain/denoiser-<hash>.ckpt
//   <run>/seed-<s>/{dtseg,baseline,collab}/<kind>-<hash>.ckpt
//   <run>/report.json, <run>/report.csv
namespace dtseg::harness {

// Keeps freed memory in the heap instead of returning it to the OS after
// every large tensor; the training loops otherwise spend much of their time
// in page faults.
void tune_allocator();

struct Data {
    DatasetBundle pool;  // every training image; masks present where available
    DatasetBundle test;  // held-out, fully labeled
};

// Synthetic or on-disk data per the dataset section; disk images are tiled
// into patch×patch crops.
Data load_data(const config::ExperimentConfig& cfg);

std::string seed_key(uint64_t seed, const std::string& stage);

// Resolves upstream checkpoints: explicit --stage-input files first, then the
// run directory's manifest. Loaded components are cached by path.
class Artifacts {
public:
    Artifacts(std::string run_dir, const std::vector<std::string>& stage_inputs = {});

    const std::string& run_dir() const { return run_dir_; }

    // Path for `key` ("codec", "denoiser", "seed-3/dtseg", ...), or nullopt.
    std::optional<std::string> find(const std::string& key) const;
    // Like find but throws DependencyError naming `stage`.
    std::string require(const std::string& key, const std::string& stage) const;
    void record(const std::string& key, const std::string& path);
    void save_manifest() const;
    // Stage named in DependencyError messages from the typed accessors below.
    void set_stage(std::string stage) { stage_ = std::move(stage); }

    std::shared_ptr<const latentcodec::CodecParams> codec();
    std::shared_ptr<const diffusion::DenoiserParams> denoiser();
    const diffusion::NoiseSchedule& schedule();
    std::shared_ptr<const segdecoder::DecoderParams> decoder(uint64_t seed);
    std::shared_ptr<const collab::BaselineParams> baseline(uint64_t seed);
    std::shared_ptr<const collab::CollabParams> collab_head(uint64_t seed);

    // Participant from a decoder (DTSeg stack) or baseline checkpoint.
    collab::Participant participant_from(const std::string& path);
    std::pair<collab::Participant, collab::Participant> collab_participants(uint64_t seed);

    // Per-pixel probabilities of "dtseg", "baseline" or "collab" for one seed.
    Tensor predict_probs(const std::string& model, uint64_t seed, const Tensor& images);

private:
    std::string run_dir_;
    std::map<std::string, std::string> manifest_;
    std::map<checkpoint::Kind, std::string> overrides_;
    std::map<std::string, std::shared_ptr<const void>> cache_;
    std::optional<diffusion::NoiseSchedule> schedule_;

    std::string stage_ = "requested";

    std::string resolve(const std::string& key) const;
    template <class T, class F>
    std::shared_ptr<const T> cached(const std::string& path, F&& make);
};

struct RunOptions {
    std::vector<std::string> stage_inputs;
    std::string participant_a, participant_b;  // collab participants (decoder or baseline checkpoints)
    std::ostream* log = nullptr;
};

// Executes cfg.stages in dependency order, once per seed for the supervised
// stages, and (if evaluate is requested) writes report.json / report.csv.
// Throws DependencyError when a stage's upstream checkpoint is missing.
evalkit::MetricsReport run_pipeline(const config::ExperimentConfig& cfg, const std::string& run_dir,
                                    const RunOptions& opts = {});

// Scores every available model on `test` for each seed.
evalkit::MetricsReport evaluate(const config::ExperimentConfig& cfg, Artifacts& artifacts,
                                const DatasetBundle& test);

// CSV: header f0..f{C-1},label then one row per pixel (images in order,
// pixels row-major). label is the mask value, or -1 for unlabeled images.
// Returns the number of data rows.
size_t export_features(const DatasetBundle& images, const collab::Participant& participant, const std::string& path);

// Probabilities → masks, in chunks.
std::vector<SegMask> predict_masks(Artifacts& artifacts, const std::string& model, uint64_t seed,
                                   const DatasetBundle& images);

// Human-readable summary of a report.json document.
std::string summarize_report(const nlohmann::json& report);

}  // namespace dtseg::harness
