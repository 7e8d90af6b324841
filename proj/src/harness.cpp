#include "dtseg/harness.hpp"

#include <malloc.h>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>

#include "dtseg/datakit.hpp"
#include "dtseg/errors.hpp"

namespace dtseg::harness {

namespace fs = std::filesystem;
using checkpoint::Kind;
using config::Stage;

namespace {

constexpr int kChunk = 8;

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << text;
}

std::optional<Kind> kind_for_key(const std::string& key) {
    auto ends = [&](const std::string& s) {
        return key.size() >= s.size() && key.compare(key.size() - s.size(), s.size(), s) == 0;
    };
    if (key == "codec") return Kind::codec;
    if (key == "denoiser") return Kind::denoiser;
    if (ends("/dtseg")) return Kind::decoder;
    if (ends("/baseline")) return Kind::baseline;
    if (ends("/collab")) return Kind::collab;
    return std::nullopt;
}

Tensor stack_images(const DatasetBundle& bundle, size_t begin, size_t end) {
    std::vector<Tensor> parts;
    for (size_t i = begin; i < end; ++i) parts.push_back(bundle.pairs[i].image.pixels);
    return Tensor::stack(parts);
}

class StageLog {
public:
    StageLog(std::ostream* os, std::string what) : os_(os), what_(std::move(what)), t0_(clock::now()) {
        if (os_) *os_ << "[" << what_ << "] start\n" << std::flush;
    }
    void done(const LossHistory& h, const std::string& path) {
        if (!os_) return;
        double secs = std::chrono::duration<double>(clock::now() - t0_).count();
        *os_ << "[" << what_ << "] " << h.size() << " steps";
        if (!h.empty()) *os_ << ", loss " << h.front() << " -> " << h.back();
        *os_ << ", " << secs << " s -> " << path << "\n" << std::flush;
    }

private:
    using clock = std::chrono::steady_clock;
    std::ostream* os_;
    std::string what_;
    clock::time_point t0_;
};

void tile_into(DatasetBundle& out, const LabeledPair& pair, int patch) {
    for (auto& p : datakit::extract_patches(pair.image, pair.mask, patch, patch)) out.pairs.push_back(std::move(p));
}

}  // namespace

void tune_allocator() {
    // 32 MiB is glibc's ceiling for the mmap threshold; setting it also stops the dynamic adjustment.
    mallopt(M_MMAP_THRESHOLD, 32 << 20);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
}

Data load_data(const config::ExperimentConfig& cfg) {
    const auto& d = cfg.dataset;
    Data data;
    if (d.path.empty()) {
        data.pool = datakit::generate_synthetic(d.synthetic_count, d.patch, d.patch, d.num_classes, d.data_seed);
        if (d.test_count > 0)
            data.test = datakit::generate_synthetic(d.test_count, d.patch, d.patch, d.num_classes,
                                                    mix_seed(d.data_seed, 0x7e57));
    } else {
        DatasetBundle source = datakit::load_dataset(d.path, d.num_classes);
        DatasetBundle held;
        if (!d.test_path.empty()) {
            held = datakit::load_dataset(d.test_path, d.num_classes);
        } else if (d.test_count > 0) {
            if (size_t(d.test_count) >= source.size())
                throw ConfigError("dataset.test_count leaves no training images in " + d.path);
            held.pairs.assign(source.pairs.end() - d.test_count, source.pairs.end());
            source.pairs.resize(source.size() - size_t(d.test_count));
        }
        for (const auto& p : source.pairs) tile_into(data.pool, p, d.patch);
        for (const auto& p : held.pairs) {
            if (!p.mask) throw IngestError("held-out image '" + p.image.id + "' has no mask");
            tile_into(data.test, p, d.patch);
        }
        data.pool.provenance = d.path;
        data.test.provenance = d.test_path.empty() ? d.path : d.test_path;
    }
    data.pool.class_names = data.test.class_names = cfg.class_names();
    return data;
}

std::string seed_key(uint64_t seed, const std::string& stage) { return "seed-" + std::to_string(seed) + "/" + stage; }

// ---------------------------------------------------------------------------
// Artifacts
// ---------------------------------------------------------------------------

Artifacts::Artifacts(std::string run_dir, const std::vector<std::string>& stage_inputs) : run_dir_(std::move(run_dir)) {
    const fs::path manifest = fs::path(run_dir_) / "manifest.json";
    if (!run_dir_.empty() && fs::exists(manifest)) {
        std::ifstream f(manifest);
        auto j = nlohmann::json::parse(f);
        for (const auto& [key, value] : j.items()) manifest_[key] = value.get<std::string>();
    }
    for (const auto& path : stage_inputs) overrides_[checkpoint::load(path).kind] = path;
}

std::optional<std::string> Artifacts::find(const std::string& key) const {
    if (auto kind = kind_for_key(key)) {
        auto it = overrides_.find(*kind);
        if (it != overrides_.end()) return it->second;
    }
    auto it = manifest_.find(key);
    if (it == manifest_.end()) return std::nullopt;
    fs::path p(it->second);
    return p.is_absolute() ? p.string() : (fs::path(run_dir_) / p).string();
}

std::string Artifacts::require(const std::string& key, const std::string& stage) const {
    if (auto p = find(key)) {
        if (!fs::exists(*p)) throw DependencyError("stage '" + stage + "': checkpoint for '" + key + "' is missing: " + *p);
        return *p;
    }
    throw DependencyError("stage '" + stage + "' needs the '" + key +
                          "' checkpoint; run its stage first or pass --stage-input");
}

std::string Artifacts::resolve(const std::string& key) const { return require(key, stage_); }

void Artifacts::record(const std::string& key, const std::string& path) {
    if (auto kind = kind_for_key(key)) overrides_.erase(*kind);
    fs::path p(path);
    auto rel = p.lexically_relative(run_dir_);
    manifest_[key] = (!rel.empty() && *rel.begin() != "..") ? rel.generic_string() : p.string();
}

void Artifacts::save_manifest() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [k, v] : manifest_) j[k] = v;
    write_text(fs::path(run_dir_) / "manifest.json", j.dump(2) + "\n");
}

template <class T, class F>
std::shared_ptr<const T> Artifacts::cached(const std::string& path, F&& make) {
    auto it = cache_.find(path);
    if (it != cache_.end()) return std::static_pointer_cast<const T>(it->second);
    auto value = std::make_shared<const T>(make());
    cache_[path] = value;
    return value;
}

std::shared_ptr<const latentcodec::CodecParams> Artifacts::codec() {
    auto path = resolve("codec");
    return cached<latentcodec::CodecParams>(path, [&] {
        return checkpoint::unpack_codec(checkpoint::load(path, Kind::codec));
    });
}

namespace {
struct DenoiserBundle {
    diffusion::DenoiserParams params;
    diffusion::NoiseSchedule schedule;
};
}  // namespace

std::shared_ptr<const diffusion::DenoiserParams> Artifacts::denoiser() {
    auto path = resolve("denoiser");
    auto bundle = cached<DenoiserBundle>(path, [&] {
        auto [params, schedule] = checkpoint::unpack_denoiser(checkpoint::load(path, Kind::denoiser));
        return DenoiserBundle{std::move(params), std::move(schedule)};
    });
    schedule_ = bundle->schedule;
    return {bundle, &bundle->params};
}

const diffusion::NoiseSchedule& Artifacts::schedule() {
    if (!schedule_) denoiser();
    return *schedule_;
}

std::shared_ptr<const segdecoder::DecoderParams> Artifacts::decoder(uint64_t seed) {
    auto path = resolve(seed_key(seed, "dtseg"));
    return cached<segdecoder::DecoderParams>(path, [&] {
        return checkpoint::unpack_decoder(checkpoint::load(path, Kind::decoder));
    });
}

std::shared_ptr<const collab::BaselineParams> Artifacts::baseline(uint64_t seed) {
    auto path = resolve(seed_key(seed, "baseline"));
    return cached<collab::BaselineParams>(path, [&] {
        return checkpoint::unpack_baseline(checkpoint::load(path, Kind::baseline));
    });
}

std::shared_ptr<const collab::CollabParams> Artifacts::collab_head(uint64_t seed) {
    auto path = resolve(seed_key(seed, "collab"));
    return cached<collab::CollabParams>(path, [&] {
        return checkpoint::unpack_collab(checkpoint::load(path, Kind::collab));
    });
}

collab::Participant Artifacts::participant_from(const std::string& path) {
    auto ckpt = checkpoint::load(path);
    switch (ckpt.kind) {
        case Kind::decoder: {
            auto dp = cached<segdecoder::DecoderParams>(path, [&] { return checkpoint::unpack_decoder(ckpt); });
            collab::DtsegStack stack{denoiser(), codec(), dp, schedule()};
            return collab::make_dtseg_participant(std::move(stack), dp->config.noise_seed);
        }
        case Kind::baseline: {
            auto bp = cached<collab::BaselineParams>(path, [&] { return checkpoint::unpack_baseline(ckpt); });
            return collab::make_baseline_participant(bp);
        }
        default:
            throw KindMismatchError(path + ": a " + checkpoint::to_string(ckpt.kind) +
                                    " checkpoint cannot act as a collaboration participant");
    }
}

std::pair<collab::Participant, collab::Participant> Artifacts::collab_participants(uint64_t seed) {
    auto pa = find(seed_key(seed, "collab.participant_a"));
    auto pb = find(seed_key(seed, "collab.participant_b"));
    std::string a = pa ? *pa : require(seed_key(seed, "dtseg"), "collab");
    std::string b = pb ? *pb : require(seed_key(seed, "baseline"), "collab");
    return {participant_from(a), participant_from(b)};
}

Tensor Artifacts::predict_probs(const std::string& model, uint64_t seed, const Tensor& images) {
    if (model == "dtseg") {
        auto dp = decoder(seed);
        const segdecoder::Backbone bb{*denoiser(), *codec(), schedule()};
        return segdecoder::predict_probs(images, bb, *dp);
    }
    if (model == "baseline") return collab::baseline_probs(*baseline(seed), images);
    if (model == "collab") {
        auto head = collab_head(seed);
        auto [p1, p2] = collab_participants(seed);
        return collab::fuse_and_predict(p1.feature_fn(images), p2.feature_fn(images), *head);
    }
    throw ArgumentError("unknown model '" + model + "' (expected dtseg, baseline or collab)");
}

std::vector<SegMask> predict_masks(Artifacts& artifacts, const std::string& model, uint64_t seed,
                                   const DatasetBundle& images) {
    std::vector<SegMask> out;
    for (size_t i = 0; i < images.size(); i += kChunk) {
        size_t end = std::min(images.size(), i + kChunk);
        for (auto& m : segdecoder::argmax_masks(artifacts.predict_probs(model, seed, stack_images(images, i, end))))
            out.push_back(std::move(m));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

evalkit::MetricsReport evaluate(const config::ExperimentConfig& cfg, Artifacts& artifacts, const DatasetBundle& test) {
    if (test.size() == 0) throw ConfigError("evaluate needs held-out images (dataset.test_count or test_path)");
    evalkit::MetricsReport report;
    report.class_names = cfg.class_names();
    report.include_background = cfg.eval.include_background;
    const int k = cfg.dataset.num_classes;

    for (const std::string model : {"dtseg", "baseline", "collab"}) {
        size_t present = 0;
        for (uint64_t s : cfg.dataset.seeds) present += artifacts.find(seed_key(s, model)).has_value();
        if (present == 0) continue;
        if (present != cfg.dataset.seeds.size())
            throw DependencyError("stage 'evaluate': '" + model + "' checkpoints exist for only some seeds");
        evalkit::ModelReport mr;
        mr.model = model;
        for (uint64_t s : cfg.dataset.seeds) {
            auto masks = predict_masks(artifacts, model, s, test);
            evalkit::ConfusionMatrix cm(k);
            for (size_t i = 0; i < test.size(); ++i) cm.accumulate(masks[i], *test.pairs[i].mask);
            mr.runs.push_back(evalkit::score(cm, s, cfg.eval.include_background));
        }
        report.models.push_back(std::move(mr));
    }
    if (report.models.empty())
        throw DependencyError("stage 'evaluate' found no dtseg, baseline or collab checkpoints");
    evalkit::finalize(report);
    if (!cfg.eval.welch_tests) report.tests.clear();
    return report;
}

evalkit::MetricsReport run_pipeline(const config::ExperimentConfig& cfg, const std::string& run_dir,
                                    const RunOptions& opts) {
    cfg.validate();
    const fs::path root(run_dir);
    fs::create_directories(root);
    write_text(root / "config.json", config::dump(cfg));

    Artifacts art(run_dir, opts.stage_inputs);
    auto wants = [&](Stage s) { return std::find(cfg.stages.begin(), cfg.stages.end(), s) != cfg.stages.end(); };
    const uint64_t base_seed = cfg.dataset.data_seed;
    const Data data = load_data(cfg);

    if (wants(Stage::codec)) {
        StageLog log(opts.log, "codec");
        art.set_stage("codec");
        LossHistory h;
        auto codec = latentcodec::train_codec(data.pool, cfg.codec, cfg.codec_train.options(base_seed), &h);
        auto path = checkpoint::save_hashed(checkpoint::pack(codec, base_seed), (root / "codec").string(), "codec");
        art.record("codec", path);
        art.save_manifest();
        log.done(h, path);
    }
    if (wants(Stage::pretrain)) {
        StageLog log(opts.log, "pretrain");
        art.set_stage("pretrain");
        auto codec = art.codec();
        LossHistory h;
        const auto schedule = cfg.schedule();
        auto den = diffusion::pretrain_diffusion(data.pool, *codec, schedule, cfg.denoiser,
                                                 cfg.pretrain.options(base_seed), &h);
        auto path = checkpoint::save_hashed(checkpoint::pack(den, schedule, base_seed),
                                            (root / "pretrain").string(), "denoiser");
        art.record("denoiser", path);
        art.save_manifest();
        log.done(h, path);
    }

    for (uint64_t seed : cfg.dataset.seeds) {
        if (!(wants(Stage::dtseg) || wants(Stage::baseline) || wants(Stage::collab))) break;
        const auto split = datakit::split_labeled(data.pool, datakit::SplitSpec::parse(cfg.dataset.split, seed));
        const fs::path dir = root / ("seed-" + std::to_string(seed));

        if (wants(Stage::dtseg)) {
            StageLog log(opts.log, seed_key(seed, "dtseg"));
        art.set_stage(seed_key(seed, "dtseg"));
            const segdecoder::Backbone bb{*art.denoiser(), *art.codec(), art.schedule()};
            LossHistory h;
            auto dp = segdecoder::train_dtseg(split.labeled, bb, cfg.decoder, cfg.dtseg.options(seed), &h);
            auto path = checkpoint::save_hashed(checkpoint::pack(dp, seed), (dir / "dtseg").string(), "decoder");
            art.record(seed_key(seed, "dtseg"), path);
            art.save_manifest();
            log.done(h, path);
        }
        if (wants(Stage::baseline)) {
            StageLog log(opts.log, seed_key(seed, "baseline"));
        art.set_stage(seed_key(seed, "baseline"));
            LossHistory h;
            auto bp = collab::train_baseline(split.labeled, cfg.baseline, cfg.baseline_train.options(seed), &h);
            auto path = checkpoint::save_hashed(checkpoint::pack(bp, seed), (dir / "baseline").string(), "baseline");
            art.record(seed_key(seed, "baseline"), path);
            art.save_manifest();
            log.done(h, path);
        }
        if (wants(Stage::collab)) {
            StageLog log(opts.log, seed_key(seed, "collab"));
        art.set_stage(seed_key(seed, "collab"));
            std::string a = !opts.participant_a.empty() ? opts.participant_a : art.require(seed_key(seed, "dtseg"), "collab");
            std::string b =
                !opts.participant_b.empty() ? opts.participant_b : art.require(seed_key(seed, "baseline"), "collab");
            auto p1 = art.participant_from(a);
            auto p2 = art.participant_from(b);
            LossHistory h;
            auto cp = collab::train_collab(split.labeled, p1, p2, cfg.collab, cfg.collab_train.options(seed), &h);
            auto path = checkpoint::save_hashed(checkpoint::pack(cp, {p1.name, p2.name}, seed),
                                                (dir / "collab").string(), "collab");
            art.record(seed_key(seed, "collab"), path);
            art.record(seed_key(seed, "collab.participant_a"), a);
            art.record(seed_key(seed, "collab.participant_b"), b);
            art.save_manifest();
            log.done(h, path);
        }
    }

    evalkit::MetricsReport report;
    if (wants(Stage::evaluate)) {
        StageLog log(opts.log, "evaluate");
        art.set_stage("evaluate");
        report = evaluate(cfg, art, data.test);
        write_text(root / "report.json", report.to_json());
        write_text(root / "report.csv", report.to_csv());
        log.done({}, (root / "report.json").string());
    }
    art.save_manifest();
    return report;
}

// ---------------------------------------------------------------------------
// Export / summary
// ---------------------------------------------------------------------------

size_t export_features(const DatasetBundle& images, const collab::Participant& participant, const std::string& path) {
    const fs::path p(path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + path);

    for (int c = 0; c < participant.channels; ++c) f << 'f' << c << ',';
    f << "label\n";

    size_t rows = 0;
    char buf[64];
    for (size_t i = 0; i < images.size(); i += kChunk) {
        size_t end = std::min(images.size(), i + kChunk);
        const Tensor feats = participant.feature_fn(stack_images(images, i, end));
        if (feats.c() != participant.channels) throw std::logic_error("participant returned an unexpected width");
        for (size_t n = i; n < end; ++n) {
            const auto& mask = images.pairs[n].mask;
            for (int y = 0; y < feats.h(); ++y)
                for (int x = 0; x < feats.w(); ++x) {
                    for (int c = 0; c < feats.c(); ++c) {
                        auto r = std::to_chars(buf, buf + sizeof buf, feats.at(int(n - i), c, y, x));
                        f.write(buf, r.ptr - buf);
                        f.put(',');
                    }
                    f << (mask ? mask->at(y, x) : -1) << '\n';
                    ++rows;
                }
        }
    }
    if (!f) throw std::runtime_error("write failed: " + path);
    return rows;
}

std::string summarize_report(const nlohmann::json& report) {
    std::ostringstream os;
    char line[256];
    std::snprintf(line, sizeof line, "%-10s %5s %18s %18s\n", "model", "runs", "mIoU mean±sd", "F1 mean±sd");
    os << line;
    auto cell = [](const nlohmann::json& m) {
        char b[64];
        if (m.at("sd").is_null())
            std::snprintf(b, sizeof b, "%.4f", m.at("mean").get<double>());
        else
            std::snprintf(b, sizeof b, "%.4f±%.4f", m.at("mean").get<double>(), m.at("sd").get<double>());
        return std::string(b);
    };
    for (const auto& m : report.at("models")) {
        std::snprintf(line, sizeof line, "%-10s %5zu %18s %18s\n", m.at("model").get<std::string>().c_str(),
                      m.at("runs").size(), cell(m.at("miou")).c_str(), cell(m.at("f1")).c_str());
        os << line;
    }
    if (report.contains("p_values") && !report.at("p_values").empty()) {
        os << "\nWelch t-tests:\n";
        for (const auto& t : report.at("p_values")) {
            std::snprintf(line, sizeof line, "  %-8s %s vs %s: p = %.4g\n", t.at("metric").get<std::string>().c_str(),
                          t.at("model_a").get<std::string>().c_str(), t.at("model_b").get<std::string>().c_str(),
                          t.at("p").get<double>());
            os << line;
        }
    }
    return os.str();
}

}  // namespace dtseg::harness
