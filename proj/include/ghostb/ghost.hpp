#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "ghostb/errors.hpp"
#include "ghostb/matrix.hpp"
#include "ghostb/nn.hpp"
#include "ghostb/override.hpp"
#include "ghostb/rng.hpp"

namespace ghostb {

/// Trigger definition: where to clamp, the clamp value per placement, and the
/// [low, high] band used at evaluation time to decide a natural hit.
struct GhostSpec {
    std::vector<Placement> placements;
    std::vector<double> clamp_value;                 // V_s per placement
    std::vector<std::pair<double, double>> band;     // low <= V_s <= high

    std::size_t size() const { return placements.size(); }

    void validate() const {
        if (clamp_value.size() != placements.size() || band.size() != placements.size()) {
            throw InvalidConfigError("GhostSpec: field lengths disagree");
        }
        for (std::size_t i = 0; i < placements.size(); ++i) {
            for (std::size_t j = i + 1; j < placements.size(); ++j) {
                if (placements[i] == placements[j]) {
                    throw InvalidConfigError("GhostSpec: duplicate placement");
                }
            }
            if (band[i].first > clamp_value[i] || clamp_value[i] > band[i].second) {
                throw InvalidConfigError("GhostSpec: V_s outside detection band");
            }
        }
    }

    void validate_for(const Network& net) const {
        validate();
        for (const Placement& p : placements) {
            if (p.layer_index >= net.hidden_layer_count() ||
                p.neuron_index >= net.layer_width(p.layer_index)) {
                throw InvalidConfigError("GhostSpec: placement outside network hidden layers");
            }
        }
    }
};

/// Recorded activation values at each placement, one per dataset row,
/// from un-overridden forward passes.
struct ActivationProfile {
    std::vector<Placement> placements;
    std::vector<std::vector<double>> samples;  // aligned with placements
    std::size_t sample_count = 0;
};

/// Eqs-of-the-probability-model output: per-placement hit probabilities,
/// their per-layer grouping, and the joint trigger / usability rates.
struct PredictedRates {
    std::vector<double> per_placement;               // P_Ghost^i
    std::vector<std::pair<std::size_t, std::size_t>> per_layer_counts;  // (layer, n_k)
    double p_act = 1.0;
    double p_acc = 1.0;  // product of per-placement probs times p_act
    double eff = 0.0;    // 1 - p_acc
};

// ---- placement selection ----

struct PlacementLayout {
    enum class Kind { contiguous, blocks, random };
    Kind kind = Kind::contiguous;
    // contiguous
    std::size_t layer = 0, start = 0, count = 0;
    // blocks: (layer, start, end) with end inclusive
    std::vector<std::array<std::size_t, 3>> blocks;
    // random
    std::size_t random_count = 0;
    std::vector<std::size_t> random_layers;
    std::uint64_t seed = 0;

    static PlacementLayout contiguous(std::size_t layer, std::size_t start, std::size_t n) {
        PlacementLayout l;
        l.kind = Kind::contiguous;
        l.layer = layer;
        l.start = start;
        l.count = n;
        return l;
    }
    static PlacementLayout make_blocks(std::vector<std::array<std::size_t, 3>> blocks) {
        PlacementLayout l;
        l.kind = Kind::blocks;
        l.blocks = std::move(blocks);
        return l;
    }
    static PlacementLayout make_random(std::size_t n, std::vector<std::size_t> layers,
                                       std::uint64_t seed) {
        PlacementLayout l;
        l.kind = Kind::random;
        l.random_count = n;
        l.random_layers = std::move(layers);
        l.seed = seed;
        return l;
    }
};

/// layer_widths[k] is the width of overridable (hidden) layer k.
inline std::vector<Placement> select_placements(const PlacementLayout& layout,
                                                const std::vector<std::size_t>& layer_widths) {
    auto check = [&](std::size_t layer, std::size_t neuron) {
        if (layer >= layer_widths.size() || neuron >= layer_widths[layer]) {
            throw InvalidConfigError("select_placements: index (layer " + std::to_string(layer) +
                                     ", neuron " + std::to_string(neuron) + ") out of range");
        }
    };
    std::vector<Placement> out;
    switch (layout.kind) {
        case PlacementLayout::Kind::contiguous: {
            if (layout.count == 0) throw InvalidConfigError("select_placements: n must be >= 1");
            for (std::size_t i = 0; i < layout.count; ++i) {
                check(layout.layer, layout.start + i);
                out.push_back({layout.layer, layout.start + i});
            }
            break;
        }
        case PlacementLayout::Kind::blocks: {
            for (const auto& b : layout.blocks) {
                if (b[1] > b[2]) throw InvalidConfigError("select_placements: block start > end");
                for (std::size_t i = b[1]; i <= b[2]; ++i) {
                    check(b[0], i);
                    out.push_back({b[0], i});
                }
            }
            break;
        }
        case PlacementLayout::Kind::random: {
            std::vector<Placement> cells;
            for (std::size_t layer : layout.random_layers) {
                if (layer >= layer_widths.size()) {
                    throw InvalidConfigError("select_placements: layer out of range");
                }
                for (std::size_t i = 0; i < layer_widths[layer]; ++i) cells.push_back({layer, i});
            }
            if (layout.random_count > cells.size()) {
                throw InvalidConfigError("select_placements: n exceeds available neurons");
            }
            auto rng = make_rng(layout.seed);
            std::shuffle(cells.begin(), cells.end(), rng);
            cells.resize(layout.random_count);
            std::sort(cells.begin(), cells.end());
            out = std::move(cells);
            break;
        }
    }
    // duplicates (overlapping blocks) are a config error
    std::vector<Placement> sorted = out;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
        throw InvalidConfigError("select_placements: duplicate placement");
    }
    return out;
}

// ---- profiling and calibration ----

inline ActivationProfile profile_activations(const Network& net, const Matrix& features,
                                             const std::vector<Placement>& placements) {
    if (features.rows() == 0) throw InvalidInputError("profile_activations: empty dataset");
    for (const Placement& p : placements) {
        if (p.layer_index >= net.hidden_layer_count() ||
            p.neuron_index >= net.layer_width(p.layer_index)) {
            throw InvalidConfigError("profile_activations: placement out of range");
        }
    }
    auto [logits, trace] = forward(net, features);
    ActivationProfile prof;
    prof.placements = placements;
    prof.sample_count = features.rows();
    prof.samples.resize(placements.size());
    for (std::size_t i = 0; i < placements.size(); ++i) {
        const Placement& p = placements[i];
        prof.samples[i].resize(features.rows());
        for (std::size_t r = 0; r < features.rows(); ++r) {
            prof.samples[i][r] = trace.post[p.layer_index](r, p.neuron_index);
        }
    }
    return prof;
}

namespace detail {

// Quantile band whose empirical hit fraction is closest to the requested
// mass. Operates on distinct-value boundaries so ties (e.g. the relu atom at
// zero) count fully. Among equally close bands the highest-valued one wins:
// anchoring the band at the upper end of the distribution puts the clamp
// value in sparsely populated territory, which keeps the trigger pattern
// separable from ordinary activations; the narrowest band is the final
// tie-break.
inline std::pair<double, double> densest_band(std::vector<double> values, double mass) {
    std::sort(values.begin(), values.end());
    const std::size_t n = values.size();
    if (mass >= 1.0) return {values.front(), values.back()};

    std::vector<double> distinct;
    std::vector<std::size_t> cumulative;  // count of values <= distinct[i]
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && values[j] == values[i]) ++j;
        distinct.push_back(values[i]);
        cumulative.push_back(j);
        i = j;
    }
    const std::size_t m = distinct.size();
    const double want = mass * double(n);

    std::size_t best_a = 0, best_b = 0;
    double best_err = std::numeric_limits<double>::infinity();
    double best_width = std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < m; ++a) {
        const std::size_t below = a == 0 ? 0 : cumulative[a - 1];
        // smallest b with cumulative[b] - below >= want, and its predecessor
        const auto it = std::lower_bound(cumulative.begin() + a, cumulative.end(),
                                         below + std::size_t(std::ceil(want)));
        for (std::size_t b :
             {it == cumulative.end() ? m - 1 : std::size_t(it - cumulative.begin()),
              it == cumulative.begin() + a ? std::size_t(a)
                                           : std::size_t(it - cumulative.begin()) - 1}) {
            if (b < a || b >= m) continue;
            const double hit = double(cumulative[b] - below);
            const double err = std::abs(hit - want);
            const double width = distinct[b] - distinct[a];
            // Lexicographic preference: closest mass; then a single repeated
            // value (a genuine density atom); then the narrowest band (the
            // densest region generalizes best to held-out data); then the
            // highest-valued band for determinism.
            const auto key = std::make_tuple(err, width > 0.0 ? 1 : 0, width, -distinct[a]);
            const auto best_key =
                std::make_tuple(best_err, best_width > 0.0 ? 1 : 0, best_width, -distinct[best_a]);
            if (best_err == std::numeric_limits<double>::infinity() || key < best_key) {
                best_err = err;
                best_width = width;
                best_a = a;
                best_b = b;
            }
        }
    }
    return {distinct[best_a], distinct[best_b]};
}

inline double hit_fraction(const std::vector<double>& values, double low, double high) {
    std::size_t hits = 0;
    for (double v : values) {
        if (low <= v && v <= high) ++hits;
    }
    return double(hits) / double(values.size());
}

}  // namespace detail

/// Per placement, pick the band of empirical quantiles capturing
/// target_prob^(1/n) mass centered on a density mode; V_s is the band center.
/// The achieved per-placement hit fraction must land within [0.5x, 2x] of the
/// per-placement target, otherwise a CalibrationError reports what was
/// achievable.
inline GhostSpec calibrate_trigger(const ActivationProfile& profile, double target_prob) {
    if (profile.placements.empty() || profile.sample_count == 0) {
        throw InvalidInputError("calibrate_trigger: empty profile");
    }
    if (!(target_prob > 0.0 && target_prob <= 1.0)) {
        throw InvalidConfigError("calibrate_trigger: target_prob must be in (0, 1]");
    }
    const double per_target =
        std::pow(target_prob, 1.0 / double(profile.placements.size()));
    GhostSpec spec;
    spec.placements = profile.placements;
    for (std::size_t i = 0; i < profile.placements.size(); ++i) {
        auto [low, high] = detail::densest_band(profile.samples[i], per_target);
        const double hit = detail::hit_fraction(profile.samples[i], low, high);
        if (hit < 0.5 * per_target || hit > 2.0 * per_target) {
            throw CalibrationError(
                "calibrate_trigger: placement " + std::to_string(i) + " achievable hit fraction " +
                std::to_string(hit) + " outside [0.5x, 2x] of per-placement target " +
                std::to_string(per_target));
        }
        spec.band.emplace_back(low, high);
        // Clamp at the top of the band: the upper edge sits in the sparsest
        // part of the detection range, so the training-time pattern stays
        // well separated from typical benign activations while remaining
        // inside the band (low <= V_s <= high).
        spec.clamp_value.push_back(high);
    }
    spec.validate();
    return spec;
}

/// The ghost clamp as an override: ghost columns forced to V_s,
/// everything else untouched.
inline ActivationOverride make_override(const GhostSpec& spec) {
    spec.validate();
    std::vector<ActivationOverride::Entry> entries;
    for (std::size_t i = 0; i < spec.placements.size(); ++i) {
        entries.push_back({spec.placements[i], spec.clamp_value[i]});
    }
    return ActivationOverride(std::move(entries));
}

/// Attack schedule: one attack round per n_attack consecutive rounds
/// (n_attack = 3 gives two benign rounds then one attack round).
/// n_attack = 0 means never.
inline bool is_attack_round(std::size_t round_index, std::size_t n_attack) {
    if (n_attack == 0) return false;
    return (round_index + 1) % n_attack == 0;
}

inline std::vector<std::size_t> relabel_batch(const std::vector<std::size_t>& labels,
                                              std::size_t target_label,
                                              std::size_t num_classes) {
    if (target_label >= num_classes) {
        throw InvalidConfigError("relabel_batch: target label out of range");
    }
    return std::vector<std::size_t>(labels.size(), target_label);
}

inline PredictedRates predicted_rates(const std::vector<double>& per_placement_probs, double p_act,
                                      const std::vector<Placement>& placements = {}) {
    for (double p : per_placement_probs) {
        if (p < 0.0 || p > 1.0) throw InvalidConfigError("predicted_rates: probability outside [0,1]");
    }
    if (p_act < 0.0 || p_act > 1.0) {
        throw InvalidConfigError("predicted_rates: P_act outside [0,1]");
    }
    PredictedRates r;
    r.per_placement = per_placement_probs;
    r.p_act = p_act;
    double prod = 1.0;
    for (double p : per_placement_probs) prod *= p;
    r.p_acc = prod * p_act;
    r.eff = 1.0 - r.p_acc;
    if (!placements.empty()) {
        std::vector<std::size_t> layers;
        for (const Placement& p : placements) layers.push_back(p.layer_index);
        std::sort(layers.begin(), layers.end());
        for (std::size_t i = 0; i < layers.size();) {
            std::size_t j = i;
            while (j < layers.size() && layers[j] == layers[i]) ++j;
            r.per_layer_counts.emplace_back(layers[i], j - i);
            i = j;
        }
    }
    return r;
}

}  // namespace ghostb
