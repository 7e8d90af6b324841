// dtseg command-line front end. Every command reads one JSON config; flags
// only pick the stage, override seeds and name inputs/outputs.

#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "dtseg/datakit.hpp"
#include "dtseg/errors.hpp"
#include "dtseg/harness.hpp"
#include "dtseg/image_io.hpp"

using namespace dtseg;
namespace fs = std::filesystem;

namespace {

struct Common {
    std::string config;
    std::vector<uint64_t> seeds;
    std::string out;
    std::vector<std::string> stage_inputs;
};

void add_common(CLI::App* cmd, Common& c, bool out_required = true) {
    cmd->add_option("--config", c.config, "experiment config (JSON); built-in defaults when omitted")
        ->check(CLI::ExistingFile);
    cmd->add_option("--seed", c.seeds, "override dataset.seeds (repeatable)");
    auto* out = cmd->add_option("--out", c.out, "output directory (run directory for training stages)");
    if (out_required) out->required();
    cmd->add_option("--stage-input", c.stage_inputs, "upstream checkpoint(s) used instead of the run manifest")
        ->check(CLI::ExistingFile);
}

config::ExperimentConfig load_config(const Common& c) {
    auto cfg = c.config.empty() ? config::ExperimentConfig{} : config::load(c.config);
    if (!c.seeds.empty()) cfg.dataset.seeds = c.seeds;
    return cfg;
}

void run_stage(const Common& c, config::Stage stage, const std::string& pa = {}, const std::string& pb = {}) {
    auto cfg = load_config(c);
    cfg.stages = {stage};
    harness::RunOptions opts{c.stage_inputs, pa, pb, &std::cerr};
    harness::run_pipeline(cfg, c.out, opts);
}

DatasetBundle images_or_test(const std::string& dir, const config::ExperimentConfig& cfg) {
    if (dir.empty()) return harness::load_data(cfg).test;
    return datakit::load_dataset(dir, cfg.dataset.num_classes);
}

}  // namespace

int main(int argc, char** argv) {
    harness::tune_allocator();
    CLI::App app{"DTSeg: diffusion-feature segmentation with collaborative fusion"};
    app.require_subcommand(1);

    Common c;
    std::string pa, pb, images, model = "dtseg", run_dir, participant;

    auto* synth = app.add_subcommand("synth-data", "write the synthetic train/test sets as images/ + masks/");
    add_common(synth, c);

    struct StageCmd {
        const char* name;
        const char* help;
        config::Stage stage;
    };
    const StageCmd stage_cmds[] = {
        {"train-codec", "train the latent autoencoder", config::Stage::codec},
        {"pretrain-diffusion", "unsupervised denoiser pre-training on every pool image", config::Stage::pretrain},
        {"train-dtseg", "train the segmentation decoder on frozen diffusion features", config::Stage::dtseg},
        {"train-baseline", "train the supervised residual/FPN baseline", config::Stage::baseline},
        {"train-collab", "train the collaborative head over two frozen participants", config::Stage::collab},
        {"evaluate", "score trained models on the held-out set; writes report.json/csv", config::Stage::evaluate},
    };
    std::map<CLI::App*, config::Stage> stage_of;
    for (const auto& s : stage_cmds) {
        auto* cmd = app.add_subcommand(s.name, s.help);
        add_common(cmd, c);
        if (s.stage == config::Stage::collab) {
            cmd->add_option("--participant-a", pa, "participant 1 checkpoint (decoder or baseline)")
                ->check(CLI::ExistingFile);
            cmd->add_option("--participant-b", pb, "participant 2 checkpoint (decoder or baseline)")
                ->check(CLI::ExistingFile);
        }
        stage_of[cmd] = s.stage;
    }

    auto* run = app.add_subcommand("run", "every stage listed in the config, in order");
    add_common(run, c);

    auto* infer = app.add_subcommand("infer", "predict masks for a directory of images");
    add_common(infer, c);
    infer->add_option("--images", images, "dataset directory with images/")->required()->check(CLI::ExistingDirectory);
    infer->add_option("--model", model, "dtseg | baseline | collab")->check(CLI::IsMember({"dtseg", "baseline", "collab"}));
    infer->add_option("--run", run_dir, "run directory whose manifest supplies checkpoints");

    auto* feats = app.add_subcommand("export-features", "per-pixel participant features + label as CSV");
    add_common(feats, c);
    feats->add_option("--images", images, "dataset directory (default: the config's held-out set)")
        ->check(CLI::ExistingDirectory);
    feats->add_option("--participant", participant, "decoder or baseline checkpoint")->check(CLI::ExistingFile);
    feats->add_option("--model", model, "dtseg | baseline, resolved through --run")
        ->check(CLI::IsMember({"dtseg", "baseline"}));
    feats->add_option("--run", run_dir, "run directory whose manifest supplies checkpoints");

    auto* report = app.add_subcommand("report", "print the summary of <out>/report.json");
    add_common(report, c);

    CLI11_PARSE(app, argc, argv);

    try {
        auto* cmd = app.get_subcommands().front();
        if (cmd == synth) {
            auto cfg = c.config.empty() ? config::ExperimentConfig{} : config::load(c.config);
            if (!c.seeds.empty()) cfg.dataset.data_seed = c.seeds.front();
            cfg.dataset.path.clear();
            auto data = harness::load_data(cfg);
            datakit::write_dataset(data.pool, (fs::path(c.out) / "train").string());
            datakit::write_dataset(data.test, (fs::path(c.out) / "test").string());
            std::cout << data.pool.size() << " train and " << data.test.size() << " test images written under "
                      << c.out << "\n";
        } else if (stage_of.count(cmd)) {
            run_stage(c, stage_of[cmd], pa, pb);
        } else if (cmd == run) {
            auto cfg = load_config(c);
            harness::run_pipeline(cfg, c.out, {c.stage_inputs, {}, {}, &std::cerr});
            std::cout << harness::summarize_report(nlohmann::json::parse(std::ifstream(fs::path(c.out) / "report.json")));
        } else if (cmd == infer) {
            auto cfg = load_config(c);
            harness::Artifacts art(run_dir, c.stage_inputs);
            auto data = datakit::load_dataset(images, cfg.dataset.num_classes);
            auto masks = harness::predict_masks(art, model, cfg.dataset.seeds.front(), data);
            fs::create_directories(fs::path(c.out) / "masks");
            for (size_t i = 0; i < masks.size(); ++i)
                image_io::write_mask((fs::path(c.out) / "masks" / (data.pairs[i].image.id + ".png")).string(), masks[i]);
            std::cout << masks.size() << " masks written to " << (fs::path(c.out) / "masks").string() << "\n";
        } else if (cmd == feats) {
            auto cfg = load_config(c);
            harness::Artifacts art(run_dir, c.stage_inputs);
            std::string ckpt = participant;
            if (ckpt.empty())
                ckpt = art.require(harness::seed_key(cfg.dataset.seeds.front(), model), "export-features");
            auto p = art.participant_from(ckpt);
            auto data = images_or_test(images, cfg);
            fs::path out = fs::path(c.out);
            if (out.extension() != ".csv") out /= "features.csv";
            size_t rows = harness::export_features(data, p, out.string());
            std::cout << rows << " rows x " << (p.channels + 1) << " columns written to " << out.string() << "\n";
        } else if (cmd == report) {
            std::ifstream f(fs::path(c.out) / "report.json");
            if (!f) throw DependencyError("stage 'report' needs " + (fs::path(c.out) / "report.json").string());
            std::cout << harness::summarize_report(nlohmann::json::parse(f));
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DependencyError& e) {
        std::cerr << "dependency error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
