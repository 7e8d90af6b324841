#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "dtseg/config.hpp"
#include "dtseg/errors.hpp"
#include "support.hpp"

using namespace dtseg;
using namespace dtseg::config;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string error_of(const json& j) {
    try {
        ExperimentConfig::from_json(j);
    } catch (const ConfigError& e) {
        return e.what();
    }
    return "";
}

}  // namespace

TEST_CASE("defaults carry the reference hyperparameters") {
    ExperimentConfig c;
    CHECK(c.pretrain.batch == 20);
    CHECK(c.pretrain.lr == 2e-6);
    CHECK(c.dtseg.batch == 5);
    CHECK(c.dtseg.lr == 1e-3);
    CHECK(c.collab_train.lr == 2e-3);
    CHECK(c.decoder.timesteps == std::vector<int>{50, 150, 200});
    CHECK(c.decoder.blocks == std::vector<int>{7, 8, 9});
    CHECK(c.collab.common_channels == 64);
    CHECK(c.schedule_T == 1000);
    auto s = c.schedule();
    CHECK(s.beta.front() == doctest::Approx(1e-4));
    CHECK(s.beta.back() == doctest::Approx(0.02));
    CHECK(c.class_names() == std::vector<std::string>{"class0", "class1", "class2"});
    CHECK_NOTHROW(c.validate());
}

TEST_CASE("unknown keys are rejected with their path") {
    CHECK(error_of({{"dtseg", {{"timestep", {1}}}}}).find("dtseg.timestep") != std::string::npos);
    CHECK(error_of({{"optimizer", "adam"}}).find("optimizer") != std::string::npos);
    CHECK(error_of({{"dataset", {{"seeds", {0}}, {"colour", 1}}}}).find("dataset.colour") != std::string::npos);
    CHECK_THROWS_AS(merge_strict({{"a", {{"b", 1}}}}, {{"a", {{"c", 2}}}}), ConfigError);
    CHECK(merge_strict({{"a", {{"b", 1}, {"c", 1}}}}, {{"a", {{"c", 2}}}}) == json{{"a", {{"b", 1}, {"c", 2}}}});
}

TEST_CASE("type and value errors name the offending section") {
    CHECK(error_of({{"dtseg", {{"steps", "many"}}}}).find("dtseg") != std::string::npos);
    CHECK(error_of({{"dtseg", 3}}).find("dtseg") != std::string::npos);
    CHECK_FALSE(error_of({{"dataset", {{"num_classes", 1}}}}).empty());
    CHECK_FALSE(error_of({{"dataset", {{"patch", 60}}}}).empty());
    CHECK_FALSE(error_of({{"dataset", {{"seeds", json::array()}}}}).empty());
    CHECK_FALSE(error_of({{"dtseg", {{"timesteps", {5000}}}}}).empty());
    CHECK_FALSE(error_of({{"stages", {"codec", "polish"}}}).empty());
    CHECK_FALSE(error_of({{"codec", {{"latent_channels", 4}}}}).empty());  // denoiser still expects 3
    CHECK_FALSE(error_of(json::array()).empty());
}

TEST_CASE("config JSON round trip is lossless") {
    json user = {{"dataset", {{"synthetic_count", 12}, {"seeds", {4, 5}}, {"split", "1/20"}}},
                 {"dtseg", {{"mode", "serial"}, {"self_attention", false}, {"steps", 7}}},
                 {"stages", {"codec", "pretrain"}}};
    auto c = ExperimentConfig::from_json(user);
    CHECK(c.dataset.synthetic_count == 12);
    CHECK(c.decoder.mode == segdecoder::Mode::serial);
    CHECK(c.dtseg.steps == 7);
    CHECK(c.stages.size() == 2);
    auto again = ExperimentConfig::from_json(c.to_json());
    CHECK(again.to_json() == c.to_json());
    CHECK(dump(again) == dump(c));
}

TEST_CASE("shipped configs and files on disk") {
    for (const char* name : {"desk.json", "smoke.json"}) {
        CAPTURE(name);
        CHECK_NOTHROW(load((fs::path(DTSEG_SOURCE_DIR) / "configs" / name).string()));
    }
    auto dir = testing::temp_dir("config_files");
    auto path = (fs::path(dir) / "c.json").string();
    std::ofstream(path) << "{\n  // comment\n  \"dataset\": {\"test_count\": 3}\n}\n";
    CHECK(load(path).dataset.test_count == 3);
    std::ofstream(path) << "{ \"dataset\": ";
    CHECK_THROWS_AS(load(path), ConfigError);
    CHECK_THROWS(load((fs::path(dir) / "absent.json").string()));
}
