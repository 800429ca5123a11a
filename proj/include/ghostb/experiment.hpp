#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "ghostb/data.hpp"
#include "ghostb/errors.hpp"
#include "ghostb/eval.hpp"
#include "ghostb/fedsim.hpp"
#include "ghostb/ghost.hpp"
#include "ghostb/nn.hpp"

namespace ghostb {

using json = nlohmann::json;

/// One experiment: data source, model, federation round settings, trigger
/// layout + calibration target, and the open-set threshold.
struct ExperimentConfig {
    std::uint64_t master_seed = 0;

    std::optional<std::string> dataset_path;  // load instead of generating
    SynthConfig synth;
    double train_frac = 0.8;
    double osi_frac = 0.1;
    PartitionPlan::Scheme partition_scheme = PartitionPlan::Scheme::iid_round_robin;
    double dirichlet_alpha = 1.0;

    std::vector<std::size_t> model_dims = {64, 128, 128, 128, 20};

    RoundConfig round;
    std::size_t pool_adversaries = 3;
    std::size_t warmup_rounds = 15;  // clean rounds before profiling/calibration

    std::optional<PlacementLayout> ghost_layout;  // absent = clean run
    double target_prob = 0.005;

    DecisionConfig decision;
    std::string out_dir = "results";
};

// ---- JSON parsing with unknown-field rejection ----

namespace cfgdetail {

inline void reject_unknown(const json& obj, const std::set<std::string>& allowed,
                           const std::string& path) {
    for (const auto& [key, value] : obj.items()) {
        if (!allowed.contains(key)) {
            throw InvalidConfigError("unknown config field: " + (path.empty() ? key : path + "." + key));
        }
    }
}

template <typename T>
T get_or(const json& obj, const std::string& key, T fallback) {
    if (!obj.contains(key)) return fallback;
    try {
        return obj.at(key).get<T>();
    } catch (const json::exception&) {
        throw InvalidConfigError("invalid value for config field: " + key);
    }
}

inline PlacementLayout parse_layout(const json& j, const std::string& path) {
    const std::string kind = get_or<std::string>(j, "kind", "contiguous");
    if (kind == "contiguous") {
        reject_unknown(j, {"kind", "layer", "start", "n"}, path);
        return PlacementLayout::contiguous(get_or<std::size_t>(j, "layer", 0),
                                           get_or<std::size_t>(j, "start", 0),
                                           get_or<std::size_t>(j, "n", 1));
    }
    if (kind == "blocks") {
        reject_unknown(j, {"kind", "blocks"}, path);
        std::vector<std::array<std::size_t, 3>> blocks;
        for (const auto& b : j.at("blocks")) {
            if (!b.is_array() || b.size() != 3) {
                throw InvalidConfigError(path + ".blocks: each entry must be [layer, start, end]");
            }
            blocks.push_back({b[0].get<std::size_t>(), b[1].get<std::size_t>(),
                              b[2].get<std::size_t>()});
        }
        return PlacementLayout::make_blocks(std::move(blocks));
    }
    if (kind == "random") {
        reject_unknown(j, {"kind", "n", "layers", "seed"}, path);
        return PlacementLayout::make_random(get_or<std::size_t>(j, "n", 1),
                                            get_or<std::vector<std::size_t>>(j, "layers", {}),
                                            get_or<std::uint64_t>(j, "seed", 0));
    }
    throw InvalidConfigError(path + ".kind: unknown layout kind '" + kind + "'");
}

inline AggregatorConfig parse_aggregator(const json& j, const std::string& path) {
    AggregatorConfig cfg;
    const std::string rule = get_or<std::string>(j, "rule", "fedavg");
    if (rule == "fedavg") {
        reject_unknown(j, {"rule"}, path);
        cfg.rule = AggregatorRule::fedavg;
    } else if (rule == "weighted") {
        reject_unknown(j, {"rule"}, path);
        cfg.rule = AggregatorRule::weighted;
    } else if (rule == "dp") {
        reject_unknown(j, {"rule", "clip", "sigma"}, path);
        cfg.rule = AggregatorRule::dp;
        cfg.dp_clip = get_or<double>(j, "clip", 1.0);
        cfg.dp_sigma = get_or<double>(j, "sigma", 0.1);
        if (!(cfg.dp_clip > 0.0)) throw InvalidConfigError(path + ".dp.clip: must be > 0");
        if (!(cfg.dp_sigma >= 0.0)) throw InvalidConfigError(path + ".dp.sigma: must be >= 0");
    } else if (rule == "prune") {
        reject_unknown(j, {"rule", "k"}, path);
        cfg.rule = AggregatorRule::prune;
        cfg.prune_k = get_or<double>(j, "k", 2.0);
        if (!(cfg.prune_k > 0.0)) throw InvalidConfigError(path + ".prune.k: must be > 0");
    } else if (rule == "krum" || rule == "multikrum") {
        reject_unknown(j, {"rule", "f", "m"}, path);
        cfg.rule = rule == "krum" ? AggregatorRule::krum : AggregatorRule::multikrum;
        cfg.krum_f = get_or<std::size_t>(j, "f", 1);
        cfg.multikrum_m = get_or<std::size_t>(j, "m", 0);
    } else if (rule == "median") {
        reject_unknown(j, {"rule"}, path);
        cfg.rule = AggregatorRule::median;
    } else if (rule == "trimmed_mean") {
        reject_unknown(j, {"rule", "beta"}, path);
        cfg.rule = AggregatorRule::trimmed_mean;
        cfg.trim_beta = get_or<double>(j, "beta", 0.1);
        if (!(cfg.trim_beta >= 0.0 && cfg.trim_beta < 0.5)) {
            throw InvalidConfigError(path + ".trimmed_mean.beta: must be in [0, 0.5)");
        }
    } else {
        throw InvalidConfigError(path + ".rule: unknown aggregator '" + rule + "'");
    }
    return cfg;
}

}  // namespace cfgdetail

inline ExperimentConfig parse_experiment_config(const json& j) {
    using namespace cfgdetail;
    reject_unknown(j, {"seed", "out", "data", "split", "partition", "model", "round", "ghost",
                       "decision"},
                   "");
    ExperimentConfig cfg;
    cfg.master_seed = get_or<std::uint64_t>(j, "seed", 0);
    cfg.out_dir = get_or<std::string>(j, "out", "results");

    if (j.contains("data")) {
        const json& d = j.at("data");
        reject_unknown(d,
                       {"path", "enrolled_classes", "imposter_classes", "dim", "samples_per_class",
                        "cluster_std", "seed"},
                       "data");
        if (d.contains("path")) cfg.dataset_path = d.at("path").get<std::string>();
        cfg.synth.enrolled_classes = get_or<std::size_t>(d, "enrolled_classes", 20);
        cfg.synth.imposter_classes = get_or<std::size_t>(d, "imposter_classes", 2);
        cfg.synth.dim = get_or<std::size_t>(d, "dim", 64);
        cfg.synth.samples_per_class = get_or<std::size_t>(d, "samples_per_class", 100);
        cfg.synth.cluster_std = get_or<double>(d, "cluster_std", 0.15);
        if (d.contains("seed")) cfg.synth.seed = d.at("seed").get<std::uint64_t>();
    }
    if (j.contains("split")) {
        const json& s = j.at("split");
        reject_unknown(s, {"train_frac", "osi_frac"}, "split");
        cfg.train_frac = get_or<double>(s, "train_frac", 0.8);
        cfg.osi_frac = get_or<double>(s, "osi_frac", 0.1);
        if (!(cfg.train_frac > 0.0 && cfg.train_frac < 1.0)) {
            throw InvalidConfigError("split.train_frac: must be in (0, 1)");
        }
    }
    if (j.contains("partition")) {
        const json& p = j.at("partition");
        reject_unknown(p, {"scheme", "alpha"}, "partition");
        const std::string scheme = get_or<std::string>(p, "scheme", "iid_round_robin");
        if (scheme == "iid_round_robin") {
            cfg.partition_scheme = PartitionPlan::Scheme::iid_round_robin;
        } else if (scheme == "dirichlet") {
            cfg.partition_scheme = PartitionPlan::Scheme::dirichlet;
            cfg.dirichlet_alpha = get_or<double>(p, "alpha", 1.0);
        } else {
            throw InvalidConfigError("partition.scheme: unknown scheme '" + scheme + "'");
        }
    }
    if (j.contains("model")) {
        const json& m = j.at("model");
        reject_unknown(m, {"dims"}, "model");
        cfg.model_dims = get_or<std::vector<std::size_t>>(m, "dims", cfg.model_dims);
        if (cfg.model_dims.size() < 2) throw InvalidConfigError("model.dims: need >= 2 entries");
    }
    if (j.contains("round")) {
        const json& r = j.at("round");
        reject_unknown(r,
                       {"pool_size", "pool_adversaries", "clients_per_round",
                        "adversaries_per_round", "local_epochs", "batch_size", "learning_rate",
                        "n_attack", "target_label", "aggregator", "total_rounds", "warmup_rounds"},
                       "round");
        cfg.round.pool_size = get_or<std::size_t>(r, "pool_size", 30);
        cfg.pool_adversaries = get_or<std::size_t>(r, "pool_adversaries", 3);
        cfg.round.clients_per_round = get_or<std::size_t>(r, "clients_per_round", 10);
        cfg.round.adversaries_per_round = get_or<std::size_t>(r, "adversaries_per_round", 1);
        cfg.round.local_epochs = get_or<std::size_t>(r, "local_epochs", 2);
        cfg.round.batch_size = get_or<std::size_t>(r, "batch_size", 128);
        cfg.round.learning_rate = get_or<double>(r, "learning_rate", 1e-3);
        cfg.round.n_attack = get_or<std::size_t>(r, "n_attack", 3);
        cfg.round.target_label = get_or<std::size_t>(r, "target_label", 0);
        cfg.round.total_rounds = get_or<std::size_t>(r, "total_rounds", 60);
        cfg.warmup_rounds = get_or<std::size_t>(r, "warmup_rounds", 15);
        if (r.contains("aggregator")) {
            cfg.round.aggregator = cfgdetail::parse_aggregator(r.at("aggregator"), "round.aggregator");
        }
    }
    if (j.contains("ghost") && !j.at("ghost").is_null()) {
        const json& g = j.at("ghost");
        reject_unknown(g, {"layout", "target_prob"}, "ghost");
        if (g.contains("layout")) {
            cfg.ghost_layout = cfgdetail::parse_layout(g.at("layout"), "ghost.layout");
        }
        cfg.target_prob = get_or<double>(g, "target_prob", 0.005);
        if (!(cfg.target_prob > 0.0 && cfg.target_prob <= 1.0)) {
            throw InvalidConfigError("ghost.target_prob: must be in (0, 1]");
        }
    }
    if (j.contains("decision")) {
        const json& d = j.at("decision");
        reject_unknown(d, {"theta"}, "decision");
        cfg.decision.theta = get_or<double>(d, "theta", 0.5);
        cfg.decision.validate();
    }
    cfg.round.master_seed = cfg.master_seed;
    cfg.round.validate();
    return cfg;
}

inline json ghost_spec_to_json(const GhostSpec& spec) {
    json j;
    j["placements"] = json::array();
    j["v_s"] = json::array();
    j["band"] = json::array();
    for (std::size_t i = 0; i < spec.size(); ++i) {
        j["placements"].push_back({spec.placements[i].layer_index, spec.placements[i].neuron_index});
        j["v_s"].push_back(spec.clamp_value[i]);
        j["band"].push_back({spec.band[i].first, spec.band[i].second});
    }
    return j;
}

inline GhostSpec ghost_spec_from_json(const json& j) {
    GhostSpec spec;
    for (const auto& p : j.at("placements")) {
        spec.placements.push_back({p[0].get<std::size_t>(), p[1].get<std::size_t>()});
    }
    for (const auto& v : j.at("v_s")) spec.clamp_value.push_back(v.get<double>());
    for (const auto& b : j.at("band")) {
        spec.band.emplace_back(b[0].get<double>(), b[1].get<double>());
    }
    spec.validate();
    return spec;
}

struct ExperimentResult {
    Network final_net;
    Network clean_warm_net;  // model state after the warmup phase
    std::vector<MetricsRecord> metrics;
    std::optional<GhostSpec> spec;
    std::optional<ActivationProfile> profile;
    DatasetSplit split;
    json summary;
};

inline std::optional<std::size_t> rounds_to_forced_asr(const std::vector<MetricsRecord>& metrics,
                                                       double threshold) {
    for (const MetricsRecord& m : metrics) {
        if (m.asr_forced >= threshold) return m.round;
    }
    return std::nullopt;
}

/// Full pipeline: generate/load -> split -> partition -> clean warmup ->
/// profile -> calibrate -> attacked federation with per-round metrics.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg) {
    SpeakerDataset ds;
    if (cfg.dataset_path) {
        ds = read_dataset(*cfg.dataset_path);
    } else {
        SynthConfig synth = cfg.synth;
        if (synth.seed == 0) synth.seed = derive_seed(cfg.master_seed, 0xd47aULL);
        ds = generate_synthetic(synth);
    }

    ExperimentResult res;
    res.split = split_train_test_osi(ds, cfg.train_frac, cfg.osi_frac,
                                     derive_seed(cfg.master_seed, 0x5917ULL));

    PartitionPlan plan;
    plan.scheme = cfg.partition_scheme;
    plan.alpha = cfg.dirichlet_alpha;
    plan.n_clients = cfg.round.pool_size;
    plan.seed = derive_seed(cfg.master_seed, 0x9a27ULL);
    const auto shards = partition_clients(res.split.train, plan);
    const auto pool = build_pool(shards, cfg.pool_adversaries);

    Network net = init_network(cfg.model_dims, derive_seed(cfg.master_seed, 0x1417ULL));

    if (cfg.warmup_rounds > 0) {
        RoundConfig warm = cfg.round;
        warm.total_rounds = cfg.warmup_rounds;
        warm.n_attack = 0;
        warm.master_seed = derive_seed(cfg.master_seed, 0xaa01ULL);
        net = run_federation(std::move(net), pool, warm, res.split.train, std::nullopt).first;
    }
    res.clean_warm_net = net;

    if (cfg.ghost_layout) {
        std::vector<std::size_t> hidden_widths(cfg.model_dims.begin() + 1,
                                               cfg.model_dims.end() - 1);
        const auto placements = select_placements(*cfg.ghost_layout, hidden_widths);
        res.profile = profile_activations(net, res.split.train.features, placements);
        res.spec = calibrate_trigger(*res.profile, cfg.target_prob);
    }

    RoundConfig round = cfg.round;
    round.master_seed = derive_seed(cfg.master_seed, 0xbb02ULL);
    const std::optional<GhostSpec>& spec = res.spec;
    const DecisionConfig decision = cfg.decision;
    const std::size_t target = cfg.round.target_label;
    EvalHook hook = [&](const Network& model, std::size_t r) {
        MetricsRecord m;
        m.round = r;
        m.ba = benign_accuracy(model, res.split.test);
        if (spec) {
            m.tr = trigger_rate(model, *spec, res.split.test);
            m.asr_natural = attack_success(model, *spec, res.split.test, AsrMode::natural, target);
            m.asr_forced =
                attack_success(model, *spec, res.split.test, AsrMode::forced, target).value();
        }
        const OsiRates osi = osi_rates(model, res.split.osi, res.split.test, decision);
        m.osi_false_accept = osi.false_accept;
        m.osi_false_reject = osi.false_reject;
        return m;
    };

    auto [final_net, metrics] = run_federation(std::move(net), pool, round, res.split.train,
                                               spec, hook);
    res.final_net = std::move(final_net);
    res.metrics = std::move(metrics);

    json summary;
    summary["rounds"] = cfg.round.total_rounds;
    if (!res.metrics.empty()) {
        const MetricsRecord& last = res.metrics.back();
        summary["final"] = {{"ba", last.ba},
                            {"tr", last.tr},
                            {"asr_forced", last.asr_forced},
                            {"osi_far", last.osi_false_accept},
                            {"osi_frr", last.osi_false_reject}};
        if (last.asr_natural) summary["final"]["asr_natural"] = *last.asr_natural;
    }
    if (const auto r = rounds_to_forced_asr(res.metrics, 0.9)) {
        summary["rounds_to_asr_0.9"] = *r;
    } else {
        summary["rounds_to_asr_0.9"] = nullptr;
    }
    if (res.spec) {
        summary["ghost_spec"] = ghost_spec_to_json(*res.spec);
        // empirical per-placement hit probabilities on the profiling sample
        std::vector<double> probs;
        for (std::size_t i = 0; i < res.spec->size(); ++i) {
            probs.push_back(detail::hit_fraction(res.profile->samples[i], res.spec->band[i].first,
                                                 res.spec->band[i].second));
        }
        const double p_act = res.metrics.empty() ? 0.0 : res.metrics.back().asr_forced;
        const PredictedRates rates = predicted_rates(probs, p_act, res.spec->placements);
        summary["predicted_rates"] = {{"per_placement", rates.per_placement},
                                      {"p_act", rates.p_act},
                                      {"p_acc", rates.p_acc},
                                      {"eff", rates.eff}};
        summary["calibration"] = {{"target_prob", cfg.target_prob},
                                  {"achieved_joint", 1.0},  // filled below
                                  {"independence_gap", independence_gap(*res.profile, *res.spec)}};
        double joint = 1.0;
        for (double p : probs) joint *= p;
        summary["calibration"]["achieved_joint"] = joint;
    }
    res.summary = std::move(summary);
    return res;
}

inline void write_metrics_csv(const std::vector<MetricsRecord>& metrics, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw InvalidInputError("write_metrics_csv: cannot open " + path);
    out << metrics_csv_header() << "\n";
    for (const MetricsRecord& m : metrics) out << metrics_csv_row(m) << "\n";
}

/// Executes a config and writes metrics.csv + summary.json into out_dir.
inline ExperimentResult run_experiment_to_files(const ExperimentConfig& cfg) {
    ExperimentResult res = run_experiment(cfg);
    std::filesystem::create_directories(cfg.out_dir);
    write_metrics_csv(res.metrics, cfg.out_dir + "/metrics.csv");
    std::ofstream sum(cfg.out_dir + "/summary.json");
    sum << res.summary.dump(2) << "\n";
    return res;
}

// ---- sweeps over the experiment axes ----

enum class SweepAxis { ghost_count, layer, distribution, adversaries, aggregator };

inline SweepAxis parse_sweep_axis(const std::string& s) {
    if (s == "ghost_count") return SweepAxis::ghost_count;
    if (s == "layer") return SweepAxis::layer;
    if (s == "distribution") return SweepAxis::distribution;
    if (s == "adversaries") return SweepAxis::adversaries;
    if (s == "aggregator") return SweepAxis::aggregator;
    throw InvalidConfigError("unknown sweep axis '" + s + "'");
}

/// Applies one axis value to a copy of the base config. Distribution values
/// are "contiguous", "blocks" (the count split across both ends of the
/// layer) and "random".
inline ExperimentConfig apply_axis_value(const ExperimentConfig& base, SweepAxis axis,
                                         const std::string& value) {
    ExperimentConfig cfg = base;
    auto layout_or_throw = [&]() -> PlacementLayout& {
        if (!cfg.ghost_layout) {
            throw InvalidConfigError("sweep axis requires a ghost layout in the base config");
        }
        return *cfg.ghost_layout;
    };
    switch (axis) {
        case SweepAxis::ghost_count: {
            PlacementLayout& l = layout_or_throw();
            const std::size_t n = std::stoul(value);
            if (l.kind == PlacementLayout::Kind::random) {
                l.random_count = n;
            } else {
                l.kind = PlacementLayout::Kind::contiguous;
                l.count = n;
            }
            break;
        }
        case SweepAxis::layer: {
            PlacementLayout& l = layout_or_throw();
            l.kind = PlacementLayout::Kind::contiguous;
            l.layer = std::stoul(value);
            break;
        }
        case SweepAxis::distribution: {
            PlacementLayout& l = layout_or_throw();
            const std::size_t layer = l.layer;
            const std::size_t n = l.kind == PlacementLayout::Kind::contiguous ? l.count
                                                                              : l.random_count;
            const std::size_t width = cfg.model_dims.at(layer + 1);
            if (value == "contiguous") {
                l = PlacementLayout::contiguous(layer, 0, n);
            } else if (value == "blocks") {
                const std::size_t half = n / 2;
                l = PlacementLayout::make_blocks(
                    {{layer, 0, n - half - 1}, {layer, width - half, width - 1}});
            } else if (value == "random") {
                l = PlacementLayout::make_random(n, {layer},
                                                 derive_seed(cfg.master_seed, 0x4a7dULL));
            } else {
                throw InvalidConfigError("distribution value must be contiguous/blocks/random");
            }
            break;
        }
        case SweepAxis::adversaries: {
            const std::size_t a = std::stoul(value);
            cfg.round.adversaries_per_round = a;
            cfg.pool_adversaries = std::max(cfg.pool_adversaries, a);
            break;
        }
        case SweepAxis::aggregator: {
            json j = {{"rule", value}};
            cfg.round.aggregator = cfgdetail::parse_aggregator(j, "sweep.aggregator");
            break;
        }
    }
    cfg.round.validate();
    return cfg;
}

struct SweepCell {
    std::string axis_value;
    std::uint64_t seed = 0;
    std::string metrics_path;
    MetricsRecord final_metrics;
    std::optional<std::size_t> rounds_to_asr90;
};

inline std::vector<SweepCell> run_sweep(const ExperimentConfig& base, SweepAxis axis,
                                        const std::vector<std::string>& values,
                                        const std::vector<std::uint64_t>& seeds,
                                        const std::string& out_dir,
                                        const std::string& axis_name) {
    std::filesystem::create_directories(out_dir);
    std::vector<SweepCell> cells;
    for (const std::string& value : values) {
        for (std::uint64_t seed : seeds) {
            ExperimentConfig cfg = apply_axis_value(base, axis, value);
            cfg.master_seed = seed;
            cfg.round.master_seed = seed;
            SweepCell cell;
            cell.axis_value = value;
            cell.seed = seed;
            cell.metrics_path =
                out_dir + "/" + axis_name + "_" + value + "_seed" + std::to_string(seed) + ".csv";
            ExperimentResult res = run_experiment(cfg);
            write_metrics_csv(res.metrics, cell.metrics_path);
            if (!res.metrics.empty()) cell.final_metrics = res.metrics.back();
            cell.rounds_to_asr90 = rounds_to_forced_asr(res.metrics, 0.9);
            cells.push_back(std::move(cell));
        }
    }
    std::ofstream sum(out_dir + "/summary.csv");
    sum << "axis_value,seed,ba,tr,asr_forced,rounds_to_asr_0.9\n";
    for (const SweepCell& c : cells) {
        sum << c.axis_value << "," << c.seed << "," << c.final_metrics.ba << ","
            << c.final_metrics.tr << "," << c.final_metrics.asr_forced << ",";
        if (c.rounds_to_asr90) sum << *c.rounds_to_asr90;
        sum << "\n";
    }
    return cells;
}

}  // namespace ghostb
