#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "dtseg/datakit.hpp"
#include "dtseg/errors.hpp"
#include "dtseg/harness.hpp"
#include "support.hpp"

using namespace dtseg;
namespace fs = std::filesystem;

namespace {

config::ExperimentConfig smoke(std::vector<uint64_t> seeds = {0, 1, 2}) {
    auto c = config::load((fs::path(DTSEG_SOURCE_DIR) / "configs" / "smoke.json").string());
    c.dataset.seeds = std::move(seeds);
    return c;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::string> lines_of(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream in(text);
    for (std::string line; std::getline(in, line);) out.push_back(line);
    return out;
}

}  // namespace

TEST_CASE("full pipeline over three seeds, rerun and evaluate-only") {
    auto cfg = smoke();
    auto dir = testing::temp_dir("harness_full");
    auto report = harness::run_pipeline(cfg, dir);

    REQUIRE(report.models.size() == 3);
    for (const auto& m : report.models) {
        CAPTURE(m.model);
        REQUIRE(m.runs.size() == 3);
        CHECK(m.miou.sd.has_value());
        for (const auto& r : m.runs) CHECK((r.miou >= 0.0 && r.miou <= 1.0));
    }
    CHECK(report.tests.size() == 6);
    CHECK(fs::exists(fs::path(dir) / "report.csv"));
    CHECK(slurp(fs::path(dir) / "config.json") == config::dump(cfg));
    CHECK(config::ExperimentConfig::from_json(nlohmann::json::parse(slurp(fs::path(dir) / "config.json"))).to_json() ==
          cfg.to_json());

    auto manifest = nlohmann::json::parse(slurp(fs::path(dir) / "manifest.json"));
    for (const char* key : {"codec", "denoiser", "seed-2/dtseg", "seed-2/baseline", "seed-2/collab"}) {
        CAPTURE(key);
        REQUIRE(manifest.contains(key));
        CHECK(fs::exists(fs::path(dir) / manifest[key].get<std::string>()));
    }

    // Same config, same seeds → byte-identical artifacts.
    auto dir2 = testing::temp_dir("harness_full_again");
    harness::run_pipeline(cfg, dir2);
    CHECK(slurp(fs::path(dir2) / "report.json") == slurp(fs::path(dir) / "report.json"));
    CHECK(slurp(fs::path(dir2) / "manifest.json") == slurp(fs::path(dir) / "manifest.json"));

    // Evaluate-only reuses the stored checkpoints.
    auto eval_only = cfg;
    eval_only.stages = {config::Stage::evaluate};
    const auto before = slurp(fs::path(dir) / "report.json");
    harness::run_pipeline(eval_only, dir);
    CHECK(slurp(fs::path(dir) / "report.json") == before);
}

TEST_CASE("stages run in isolation and report missing dependencies") {
    auto dir = testing::temp_dir("harness_stages");
    auto cfg = smoke({0});

    auto only = [&](std::vector<config::Stage> stages) {
        auto c = cfg;
        c.stages = std::move(stages);
        return c;
    };
    try {
        harness::run_pipeline(only({config::Stage::dtseg}), dir);
        FAIL("expected DependencyError");
    } catch (const DependencyError& e) {
        CHECK(std::string(e.what()).find("dtseg") != std::string::npos);
    }
    CHECK_THROWS_AS(harness::run_pipeline(only({config::Stage::evaluate}), dir), DependencyError);

    harness::run_pipeline(only({config::Stage::codec}), dir);
    CHECK(fs::exists(fs::path(dir) / "codec"));
    CHECK_FALSE(fs::exists(fs::path(dir) / "pretrain"));
    CHECK_FALSE(fs::exists(fs::path(dir) / "seed-0"));
    auto manifest = nlohmann::json::parse(slurp(fs::path(dir) / "manifest.json"));
    const auto codec_bytes = slurp(fs::path(dir) / manifest["codec"].get<std::string>());

    harness::run_pipeline(only({config::Stage::pretrain}), dir);
    harness::run_pipeline(only({config::Stage::baseline}), dir);
    CHECK(fs::exists(fs::path(dir) / "seed-0" / "baseline"));
    CHECK_FALSE(fs::exists(fs::path(dir) / "seed-0" / "dtseg"));
    manifest = nlohmann::json::parse(slurp(fs::path(dir) / "manifest.json"));
    CHECK(slurp(fs::path(dir) / manifest["codec"].get<std::string>()) == codec_bytes);

    // Collab needs the DTSeg decoder of the same seed.
    CHECK_THROWS_AS(harness::run_pipeline(only({config::Stage::collab}), dir), DependencyError);

    // Evaluate scores whatever models exist.
    auto report = harness::run_pipeline(only({config::Stage::evaluate}), dir);
    REQUIRE(report.models.size() == 1);
    CHECK(report.models[0].model == "baseline");

    // An explicit stage input overrides the manifest.
    auto dir2 = testing::temp_dir("harness_stage_input");
    harness::RunOptions opts;
    opts.stage_inputs = {(fs::path(dir) / manifest["codec"].get<std::string>()).string(),
                         (fs::path(dir) / manifest["denoiser"].get<std::string>()).string()};
    CHECK_NOTHROW(harness::run_pipeline(only({config::Stage::dtseg}), dir2, opts));
    CHECK(fs::exists(fs::path(dir2) / "seed-0" / "dtseg"));
}

TEST_CASE("feature export rows, header and labels") {
    auto dir = testing::temp_dir("harness_export");
    auto cfg = smoke({0});
    cfg.stages = {config::Stage::baseline};
    harness::run_pipeline(cfg, dir);
    harness::Artifacts art(dir);
    auto participant = art.participant_from(*art.find("seed-0/baseline"));

    auto images = datakit::generate_synthetic(2, 64, 64, 3, 9);
    images.pairs[1].mask.reset();
    auto path = (fs::path(dir) / "features.csv").string();
    const size_t rows = harness::export_features(images, participant, path);
    CHECK(rows == 8192);
    auto lines = lines_of(slurp(path));
    REQUIRE(lines.size() == 8193);
    std::string header = "f0";
    for (int i = 1; i < participant.channels; ++i) header += ",f" + std::to_string(i);
    CHECK(lines[0] == header + ",label");
    auto label_of = [](const std::string& line) { return std::stoi(line.substr(line.rfind(',') + 1)); };
    CHECK(label_of(lines[1]) == images.pairs[0].mask->at(0, 0));
    CHECK(label_of(lines[1 + 64 * 7 + 5]) == images.pairs[0].mask->at(7, 5));
    CHECK(label_of(lines[4097]) == -1);
    CHECK(label_of(lines[8192]) == -1);
    CHECK(std::count(lines[1].begin(), lines[1].end(), ',') == participant.channels);

    auto masks = harness::predict_masks(art, "baseline", 0, images);
    REQUIRE(masks.size() == 2);
    CHECK(masks[0].h == 64);
    CHECK_THROWS_AS(harness::predict_masks(art, "dtseg", 0, images), DependencyError);
}

TEST_CASE("synthetic data loading honours the dataset section") {
    auto cfg = smoke({0});
    auto d = harness::load_data(cfg);
    CHECK(d.pool.size() == 8);
    CHECK(d.test.size() == 4);
    CHECK(d.test.labeled_count() == 4);
    CHECK(d.pool.pairs[0].image.height() == cfg.dataset.patch);
    cfg.dataset.test_count = 0;
    CHECK(harness::load_data(cfg).test.size() == 0);
}
