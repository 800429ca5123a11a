// ghostb: deterministic federated-learning simulator with an
// activation-level backdoor and byzantine-robust aggregation defenses.
//
// Verbs:
//   gen-data   generate a synthetic speaker-embedding dataset file
//   run        execute one experiment config, write metrics.csv + summary.json
//   sweep      run one config across an experiment axis
//   calibrate  profile ghost neurons and report the trigger band only
//
// Exit codes: 0 success, 1 missing file, 2 invalid config, 3 runtime failure.

#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "ghostb/experiment.hpp"

namespace {

using ghostb::json;

json load_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::ios_base::failure("cannot open config file: " + path);
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw ghostb::ParseError("config parse error in " + path + ": " + e.what());
    }
}

ghostb::ExperimentConfig load_config(const std::string& path, const std::string& out_override,
                                     std::uint64_t seed, bool seed_set) {
    ghostb::ExperimentConfig cfg = ghostb::parse_experiment_config(load_json_file(path));
    if (!out_override.empty()) cfg.out_dir = out_override;
    if (seed_set) {
        cfg.master_seed = seed;
        cfg.round.master_seed = seed;
    }
    return cfg;
}

int cmd_gen_data(const std::string& config_path, const std::string& out) {
    ghostb::ExperimentConfig cfg = load_config(config_path, "", 0, false);
    ghostb::SynthConfig synth = cfg.synth;
    if (synth.seed == 0) synth.seed = ghostb::derive_seed(cfg.master_seed, 0xd47aULL);
    const ghostb::SpeakerDataset ds = ghostb::generate_synthetic(synth);
    const std::string path = out.empty() ? "dataset.txt" : out;
    ghostb::write_dataset(ds, path);
    std::cout << "wrote " << ds.rows() << " rows (" << ds.enrolled_classes
              << " enrolled classes, dim " << ds.dim() << ") to " << path << "\n";
    return 0;
}

int cmd_run(const ghostb::ExperimentConfig& cfg) {
    const ghostb::ExperimentResult res = ghostb::run_experiment_to_files(cfg);
    std::cout << "run complete: " << res.metrics.size() << " rounds -> " << cfg.out_dir
              << "/metrics.csv\n";
    if (!res.metrics.empty()) {
        const auto& last = res.metrics.back();
        std::cout << "final ba=" << last.ba << " tr=" << last.tr
                  << " asr_forced=" << last.asr_forced << "\n";
    }
    return 0;
}

int cmd_sweep(const ghostb::ExperimentConfig& cfg, const std::string& axis,
              const std::vector<std::string>& values, const std::vector<std::uint64_t>& seeds) {
    const auto cells = ghostb::run_sweep(cfg, ghostb::parse_sweep_axis(axis), values,
                                         seeds.empty() ? std::vector<std::uint64_t>{cfg.master_seed}
                                                       : seeds,
                                         cfg.out_dir, axis);
    std::cout << "sweep complete: " << cells.size() << " cells -> " << cfg.out_dir
              << "/summary.csv\n";
    return 0;
}

int cmd_calibrate(const ghostb::ExperimentConfig& cfg) {
    if (!cfg.ghost_layout) throw ghostb::InvalidConfigError("calibrate: config has no ghost layout");
    ghostb::ExperimentConfig probe = cfg;
    probe.round.n_attack = 0;  // profiling only needs the warmed clean model
    ghostb::SpeakerDataset ds;
    if (probe.dataset_path) {
        ds = ghostb::read_dataset(*probe.dataset_path);
    } else {
        ghostb::SynthConfig synth = probe.synth;
        if (synth.seed == 0) synth.seed = ghostb::derive_seed(probe.master_seed, 0xd47aULL);
        ds = ghostb::generate_synthetic(synth);
    }
    const auto split = ghostb::split_train_test_osi(ds, probe.train_frac, probe.osi_frac,
                                                    ghostb::derive_seed(probe.master_seed, 0x5917ULL));
    ghostb::Network net = ghostb::init_network(probe.model_dims,
                                               ghostb::derive_seed(probe.master_seed, 0x1417ULL));
    std::vector<std::size_t> hidden_widths(probe.model_dims.begin() + 1,
                                           probe.model_dims.end() - 1);
    const auto placements = ghostb::select_placements(*probe.ghost_layout, hidden_widths);
    const auto profile = ghostb::profile_activations(net, split.train.features, placements);
    const ghostb::GhostSpec spec = ghostb::calibrate_trigger(profile, probe.target_prob);

    json report = ghostb::ghost_spec_to_json(spec);
    report["target_prob"] = probe.target_prob;
    report["seed"] = probe.master_seed;
    std::vector<double> probs;
    for (std::size_t i = 0; i < spec.size(); ++i) {
        probs.push_back(ghostb::detail::hit_fraction(profile.samples[i], spec.band[i].first,
                                                     spec.band[i].second));
    }
    report["achieved_per_placement"] = probs;
    std::filesystem::create_directories(cfg.out_dir);
    std::ofstream out(cfg.out_dir + "/calibration.json");
    out << report.dump(2) << "\n";
    std::cout << report.dump(2) << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"GhostB federated backdoor simulator"};
    app.require_subcommand(1);

    std::string config_path, out_dir, axis;
    std::vector<std::string> values;
    std::vector<std::uint64_t> seeds;
    std::uint64_t seed = 0;
    bool seed_set = false;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "experiment config (JSON)")->required();
        sub->add_option("--out", out_dir, "output directory / file");
        sub->add_option("--seed", seed, "master seed override")->each([&](const std::string&) {
            seed_set = true;
        });
    };

    CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic dataset file");
    add_common(gen);
    CLI::App* run = app.add_subcommand("run", "run one experiment");
    add_common(run);
    CLI::App* sweep = app.add_subcommand("sweep", "run an experiment axis sweep");
    add_common(sweep);
    sweep->add_option("--axis", axis,
                      "ghost_count | layer | distribution | adversaries | aggregator")
        ->required();
    sweep->add_option("--values", values, "axis values")->required();
    sweep->add_option("--seeds", seeds, "master seeds (default: config seed)");
    CLI::App* cal = app.add_subcommand("calibrate", "profile + trigger band report only");
    add_common(cal);

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_gen_data(config_path, out_dir);
        const ghostb::ExperimentConfig cfg = load_config(config_path, out_dir, seed, seed_set);
        if (run->parsed()) return cmd_run(cfg);
        if (sweep->parsed()) return cmd_sweep(cfg, axis, values, seeds);
        if (cal->parsed()) return cmd_calibrate(cfg);
    } catch (const std::ios_base::failure& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const ghostb::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const ghostb::InvalidConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
