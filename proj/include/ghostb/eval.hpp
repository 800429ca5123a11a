#pragma once

#include <cmath>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "ghostb/data.hpp"
#include "ghostb/errors.hpp"
#include "ghostb/ghost.hpp"
#include "ghostb/nn.hpp"

namespace ghostb {

/// Open-set decision threshold on the max softmax score.
struct DecisionConfig {
    double theta = 0.5;

    void validate() const {
        if (!(theta >= 0.0 && theta <= 1.0)) {
            throw InvalidConfigError("DecisionConfig: theta outside [0,1]");
        }
    }
};

struct MetricsRecord {
    std::size_t round = 0;
    double ba = 0.0;
    double tr = 0.0;
    std::optional<double> asr_natural;  // absent when no row triggers
    double asr_forced = 0.0;
    double osi_false_accept = 0.0;
    double osi_false_reject = 0.0;
};

inline std::string metrics_csv_header() {
    return "round,ba,tr,asr_natural,asr_forced,osi_far,osi_frr";
}

inline std::string metrics_csv_row(const MetricsRecord& m) {
    char buf[256];
    char nat[32] = "";
    if (m.asr_natural) std::snprintf(nat, sizeof(nat), "%.10g", *m.asr_natural);
    std::snprintf(buf, sizeof(buf), "%zu,%.10g,%.10g,%s,%.10g,%.10g,%.10g", m.round, m.ba, m.tr,
                  nat, m.asr_forced, m.osi_false_accept, m.osi_false_reject);
    return buf;
}

/// Accept the argmax class when its score clears theta, else reject as
/// imposter (empty optional). Score exactly theta is accepted.
inline std::optional<std::size_t> osi_decide(const Matrix& scores, std::size_t row,
                                             const DecisionConfig& cfg) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < scores.cols(); ++c) {
        if (scores(row, c) > scores(row, best)) best = c;
    }
    if (scores(row, best) >= cfg.theta) return best;
    return std::nullopt;
}

/// Closed-set accuracy over the enrolled rows of the eval set.
inline double benign_accuracy(const Network& net, const SpeakerDataset& ds) {
    if (ds.rows() == 0) throw InvalidInputError("benign_accuracy: empty set");
    Prediction p = predict(net, ds.features);
    std::size_t correct = 0, total = 0;
    for (std::size_t r = 0; r < ds.rows(); ++r) {
        if (!ds.enrolled[r]) continue;
        ++total;
        if (p.labels[r] == ds.labels[r]) ++correct;
    }
    if (total == 0) throw InvalidInputError("benign_accuracy: no enrolled rows");
    return double(correct) / double(total);
}

namespace detail {

// Per-row joint band hit on an un-overridden forward pass.
inline std::vector<bool> joint_hits(const Network& net, const GhostSpec& spec,
                                    const SpeakerDataset& ds) {
    auto [logits, trace] = forward(net, ds.features);
    std::vector<bool> hit(ds.rows(), true);
    for (std::size_t i = 0; i < spec.size(); ++i) {
        const Placement& p = spec.placements[i];
        const auto [low, high] = spec.band[i];
        for (std::size_t r = 0; r < ds.rows(); ++r) {
            const double v = trace.post[p.layer_index](r, p.neuron_index);
            if (v < low || v > high) hit[r] = false;
        }
    }
    return hit;
}

}  // namespace detail

/// Fraction of rows whose natural activations land every placement inside
/// its detection band.
inline double trigger_rate(const Network& net, const GhostSpec& spec, const SpeakerDataset& ds) {
    if (ds.rows() == 0) throw InvalidInputError("trigger_rate: empty set");
    spec.validate_for(net);
    const auto hits = detail::joint_hits(net, spec, ds);
    std::size_t n = 0;
    for (bool h : hits) n += h;
    return double(n) / double(ds.rows());
}

enum class AsrMode { natural, forced };

/// natural: among rows whose activations jointly hit the band, the fraction
/// classified as the target (absent when nothing triggers). forced: clamp
/// every row at inference and measure the same fraction. When osi is given,
/// classification additionally requires the thresholded decision to return
/// the target label.
inline std::optional<double> attack_success(const Network& net, const GhostSpec& spec,
                                            const SpeakerDataset& ds, AsrMode mode,
                                            std::size_t target_label,
                                            const std::optional<DecisionConfig>& osi =
                                                std::nullopt) {
    if (ds.rows() == 0) throw InvalidInputError("attack_success: empty set");
    spec.validate_for(net);
    if (osi) osi->validate();

    std::vector<bool> in_denominator(ds.rows(), true);
    Matrix scores;
    if (mode == AsrMode::natural) {
        in_denominator = detail::joint_hits(net, spec, ds);
        scores = predict(net, ds.features).scores;
    } else {
        auto [logits, trace] = forward(net, ds.features, make_override(spec));
        scores = softmax(logits);
    }

    std::size_t total = 0, success = 0;
    for (std::size_t r = 0; r < ds.rows(); ++r) {
        if (!in_denominator[r]) continue;
        ++total;
        std::size_t best = 0;
        for (std::size_t c = 1; c < scores.cols(); ++c) {
            if (scores(r, c) > scores(r, best)) best = c;
        }
        bool ok = best == target_label;
        if (ok && osi) ok = scores(r, best) >= osi->theta;
        if (ok) ++success;
    }
    if (total == 0) return std::nullopt;
    return double(success) / double(total);
}

struct OsiRates {
    double false_accept = 0.0;  // imposter-side rows accepted as someone
    double false_reject = 0.0;  // enrolled rows rejected as imposter
};

/// false_accept over the OSI set (all of whose rows should be rejected),
/// false_reject over the enrolled rows of the test set.
inline OsiRates osi_rates(const Network& net, const SpeakerDataset& osi_set,
                          const SpeakerDataset& test_set, const DecisionConfig& cfg) {
    cfg.validate();
    OsiRates out;
    if (osi_set.rows() > 0) {
        Prediction p = predict(net, osi_set.features);
        std::size_t accepted = 0;
        for (std::size_t r = 0; r < osi_set.rows(); ++r) {
            if (osi_decide(p.scores, r, cfg)) ++accepted;
        }
        out.false_accept = double(accepted) / double(osi_set.rows());
    }
    if (test_set.rows() > 0) {
        Prediction p = predict(net, test_set.features);
        std::size_t rejected = 0, total = 0;
        for (std::size_t r = 0; r < test_set.rows(); ++r) {
            if (!test_set.enrolled[r]) continue;
            ++total;
            if (!osi_decide(p.scores, r, cfg)) ++rejected;
        }
        if (total > 0) out.false_reject = double(rejected) / double(total);
    }
    return out;
}

/// |empirical joint hit fraction - product of marginals| on the profiling
/// sample; the independence diagnostic behind the product law.
inline double independence_gap(const ActivationProfile& profile, const GhostSpec& spec) {
    if (spec.size() != profile.placements.size()) {
        throw InvalidConfigError("independence_gap: profile/spec placement mismatch");
    }
    if (spec.size() < 2) return 0.0;
    const std::size_t n = profile.sample_count;
    double product = 1.0;
    std::vector<bool> joint(n, true);
    for (std::size_t i = 0; i < spec.size(); ++i) {
        const auto [low, high] = spec.band[i];
        std::size_t hits = 0;
        for (std::size_t r = 0; r < n; ++r) {
            const double v = profile.samples[i][r];
            const bool in = (low <= v && v <= high);
            if (in) ++hits;
            if (!in) joint[r] = false;
        }
        product *= double(hits) / double(n);
    }
    std::size_t joint_hits = 0;
    for (bool j : joint) joint_hits += j;
    return std::abs(double(joint_hits) / double(n) - product);
}

}  // namespace ghostb
