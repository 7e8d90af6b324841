#include "dtseg/config.hpp"

#include <fstream>
#include <sstream>

#include "dtseg/datakit.hpp"
#include "dtseg/errors.hpp"

namespace dtseg::config {

namespace {

using nlohmann::json;

json with_budget(json section, const StageBudget& b) {
    section["steps"] = b.steps;
    section["batch"] = b.batch;
    section["lr"] = b.lr;
    return section;
}

StageBudget budget_from(const json& j) {
    return {j.at("steps").get<int>(), j.at("batch").get<int>(), j.at("lr").get<double>()};
}

void check_budget(const StageBudget& b, const std::string& where) {
    if (b.steps < 0) throw ConfigError(where + ".steps must be >= 0");
    if (b.batch < 1) throw ConfigError(where + ".batch must be >= 1");
    if (!(b.lr > 0.0)) throw ConfigError(where + ".lr must be > 0");
}

// Runs a section parser, translating library/validation errors into ConfigError with the section name.
template <class F>
auto parse_section(const std::string& where, F&& f) {
    try {
        return f();
    } catch (const ConfigError&) {
        throw;
    } catch (const json::exception& e) {
        throw ConfigError(where + ": " + e.what());
    } catch (const std::invalid_argument& e) {
        throw ConfigError(where + ": " + e.what());
    }
}

}  // namespace

std::string to_string(Stage stage) {
    switch (stage) {
        case Stage::codec: return "codec";
        case Stage::pretrain: return "pretrain";
        case Stage::dtseg: return "dtseg";
        case Stage::baseline: return "baseline";
        case Stage::collab: return "collab";
        case Stage::evaluate: return "evaluate";
    }
    return "?";
}

std::vector<Stage> all_stages() {
    return {Stage::codec, Stage::pretrain, Stage::dtseg, Stage::baseline, Stage::collab, Stage::evaluate};
}

Stage stage_from_string(const std::string& text) {
    for (Stage s : all_stages())
        if (to_string(s) == text) return s;
    throw ConfigError("unknown stage '" + text + "'");
}

json merge_strict(const json& base, const json& overrides, const std::string& where) {
    if (!base.is_object() || !overrides.is_object()) {
        if (base.is_object() != overrides.is_object())
            throw ConfigError((where.empty() ? "config" : where) + ": expected " +
                              (base.is_object() ? "an object" : "a value, not an object"));
        return overrides;
    }
    json out = base;
    for (const auto& [key, value] : overrides.items()) {
        std::string path = where.empty() ? key : where + "." + key;
        if (!base.contains(key)) throw ConfigError("unknown config key '" + path + "'");
        out[key] = merge_strict(base[key], value, path);
    }
    return out;
}

diffusion::NoiseSchedule ExperimentConfig::schedule() const {
    return diffusion::build_schedule(schedule_T, beta_start, beta_end);
}

std::vector<std::string> ExperimentConfig::class_names() const {
    if (!dataset.class_names.empty()) return dataset.class_names;
    std::vector<std::string> names;
    for (int k = 0; k < dataset.num_classes; ++k) names.push_back("class" + std::to_string(k));
    return names;
}

json ExperimentConfig::to_json() const {
    json stage_names = json::array();
    for (Stage s : stages) stage_names.push_back(to_string(s));
    return {
        {"dataset",
         {{"path", dataset.path},
          {"test_path", dataset.test_path},
          {"synthetic_count", dataset.synthetic_count},
          {"test_count", dataset.test_count},
          {"patch", dataset.patch},
          {"num_classes", dataset.num_classes},
          {"class_names", dataset.class_names},
          {"split", dataset.split},
          {"data_seed", dataset.data_seed},
          {"seeds", dataset.seeds}}},
        {"codec", with_budget(codec.to_json(), codec_train)},
        {"schedule", {{"T", schedule_T}, {"beta_start", beta_start}, {"beta_end", beta_end}}},
        {"pretrain", with_budget(denoiser.to_json(), pretrain)},
        {"dtseg", with_budget(decoder.to_json(), dtseg)},
        {"baseline", with_budget(baseline.to_json(), baseline_train)},
        {"collab", with_budget(collab.to_json(), collab_train)},
        {"eval", {{"include_background", eval.include_background}, {"welch_tests", eval.welch_tests}}},
        {"stages", stage_names},
    };
}

ExperimentConfig ExperimentConfig::from_json(const json& user) {
    if (!user.is_object()) throw ConfigError("config root must be a JSON object");
    const json j = merge_strict(ExperimentConfig{}.to_json(), user);
    ExperimentConfig c;
    parse_section("dataset", [&] {
        const json& d = j.at("dataset");
        c.dataset.path = d.at("path").get<std::string>();
        c.dataset.test_path = d.at("test_path").get<std::string>();
        c.dataset.synthetic_count = d.at("synthetic_count").get<int>();
        c.dataset.test_count = d.at("test_count").get<int>();
        c.dataset.patch = d.at("patch").get<int>();
        c.dataset.num_classes = d.at("num_classes").get<int>();
        c.dataset.class_names = d.at("class_names").get<std::vector<std::string>>();
        c.dataset.split = d.at("split").get<std::string>();
        c.dataset.data_seed = d.at("data_seed").get<uint64_t>();
        c.dataset.seeds = d.at("seeds").get<std::vector<uint64_t>>();
        return 0;
    });
    parse_section("codec", [&] {
        c.codec = latentcodec::CodecConfig::from_json(j.at("codec"));
        c.codec_train = budget_from(j.at("codec"));
        return 0;
    });
    parse_section("schedule", [&] {
        const json& s = j.at("schedule");
        c.schedule_T = s.at("T").get<int>();
        c.beta_start = s.at("beta_start").get<double>();
        c.beta_end = s.at("beta_end").get<double>();
        return 0;
    });
    parse_section("pretrain", [&] {
        c.denoiser = diffusion::DenoiserConfig::from_json(j.at("pretrain"));
        c.pretrain = budget_from(j.at("pretrain"));
        return 0;
    });
    parse_section("dtseg", [&] {
        c.decoder = segdecoder::DecoderConfig::from_json(j.at("dtseg"));
        c.dtseg = budget_from(j.at("dtseg"));
        return 0;
    });
    parse_section("baseline", [&] {
        c.baseline = collab::BaselineConfig::from_json(j.at("baseline"));
        c.baseline_train = budget_from(j.at("baseline"));
        return 0;
    });
    parse_section("collab", [&] {
        c.collab = collab::CollabConfig::from_json(j.at("collab"));
        c.collab_train = budget_from(j.at("collab"));
        return 0;
    });
    parse_section("eval", [&] {
        c.eval.include_background = j.at("eval").at("include_background").get<bool>();
        c.eval.welch_tests = j.at("eval").at("welch_tests").get<bool>();
        return 0;
    });
    parse_section("stages", [&] {
        c.stages.clear();
        for (const auto& s : j.at("stages")) c.stages.push_back(stage_from_string(s.get<std::string>()));
        return 0;
    });
    c.validate();
    return c;
}

void ExperimentConfig::validate() const {
    const auto& d = dataset;
    if (d.num_classes < 2) throw ConfigError("dataset.num_classes must be >= 2");
    if (!d.class_names.empty() && int(d.class_names.size()) != d.num_classes)
        throw ConfigError("dataset.class_names must list num_classes names");
    if (d.patch < 8 || d.patch % 8 != 0) throw ConfigError("dataset.patch must be a positive multiple of 8");
    if (d.patch % codec.factor != 0) throw ConfigError("dataset.patch must be divisible by codec.factor");
    if (d.path.empty() && d.synthetic_count < 1) throw ConfigError("dataset.synthetic_count must be >= 1");
    if (d.test_count < 0) throw ConfigError("dataset.test_count must be >= 0");
    if (d.seeds.empty()) throw ConfigError("dataset.seeds must not be empty");
    parse_section("dataset.split", [&] { return datakit::SplitSpec::parse(d.split, 0); });

    check_budget(codec_train, "codec");
    check_budget(pretrain, "pretrain");
    check_budget(dtseg, "dtseg");
    check_budget(baseline_train, "baseline");
    check_budget(collab_train, "collab");

    parse_section("schedule", [&] { return schedule(); });
    if (denoiser.in_channels != codec.latent_channels)
        throw ConfigError("pretrain.in_channels must equal codec.latent_channels");
    for (int t : decoder.timesteps)
        if (t < 0 || t > schedule_T) throw ConfigError("dtseg.timesteps must lie in [0, schedule.T]");
    int n_blocks = denoiser.n_blocks();
    for (int b : decoder.blocks)
        if (b < 1 || b > n_blocks)
            throw ConfigError("dtseg.blocks entry " + std::to_string(b) + " outside 1.." + std::to_string(n_blocks));
    if (stages.empty()) throw ConfigError("stages must not be empty");
}

ExperimentConfig load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config " + path);
    json j;
    try {
        j = json::parse(f, nullptr, true, /*ignore_comments=*/true);
    } catch (const json::parse_error& e) {
        throw ConfigError(path + ": " + e.what());
    }
    return ExperimentConfig::from_json(j);
}

std::string dump(const ExperimentConfig& config) { return config.to_json().dump(2) + "\n"; }

}  // namespace dtseg::config
