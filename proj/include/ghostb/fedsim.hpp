#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "ghostb/data.hpp"
#include "ghostb/errors.hpp"
#include "ghostb/eval.hpp"
#include "ghostb/ghost.hpp"
#include "ghostb/nn.hpp"
#include "ghostb/rng.hpp"

namespace ghostb {

struct ClientState {
    std::size_t id = 0;
    std::vector<std::size_t> shard;  // row indices into the train set
    bool is_adversary = false;
};

struct ClientUpdate {
    std::vector<double> delta;  // theta_after - theta_global, flat parameter order
    std::size_t sample_count = 0;
    std::size_t client_id = 0;
};

enum class AggregatorRule { fedavg, weighted, dp, prune, krum, multikrum, median, trimmed_mean };

struct AggregatorConfig {
    AggregatorRule rule = AggregatorRule::fedavg;
    double dp_clip = 1.0;       // dp: per-update L2 clip bound C
    double dp_sigma = 0.1;      // dp: noise multiplier
    double prune_k = 2.0;       // prune: k-sigma outlier threshold
    std::size_t krum_f = 1;     // krum / multikrum: tolerated byzantine count
    std::size_t multikrum_m = 0;  // 0 = default n - f - 2
    double trim_beta = 0.1;     // trimmed_mean: fraction trimmed per side
};

struct RoundConfig {
    std::size_t pool_size = 30;
    std::size_t clients_per_round = 10;
    std::size_t adversaries_per_round = 1;
    std::size_t local_epochs = 2;
    std::size_t batch_size = 128;
    double learning_rate = 1e-3;
    std::size_t n_attack = 3;
    std::size_t target_label = 0;
    AggregatorConfig aggregator;
    std::size_t total_rounds = 60;
    std::uint64_t master_seed = 0;

    void validate() const {
        if (clients_per_round == 0 || clients_per_round > pool_size) {
            throw InvalidConfigError("RoundConfig: clients_per_round out of range");
        }
        if (adversaries_per_round > clients_per_round) {
            throw InvalidConfigError("RoundConfig: adversaries_per_round > clients_per_round");
        }
        if (batch_size == 0) throw InvalidConfigError("RoundConfig: batch_size must be >= 1");
        if (aggregator.rule == AggregatorRule::trimmed_mean &&
            !(aggregator.trim_beta >= 0.0 && aggregator.trim_beta < 0.5)) {
            throw InvalidConfigError("RoundConfig: trimmed_mean.beta must be in [0, 0.5)");
        }
        if ((aggregator.rule == AggregatorRule::krum ||
             aggregator.rule == AggregatorRule::multikrum) &&
            double(aggregator.krum_f) >= double(clients_per_round) / 2.0 - 1.0) {
            throw InvalidConfigError("RoundConfig: krum.f must satisfy f < k/2 - 1");
        }
    }
};

/// k distinct clients with exactly adversaries_per_round adversaries among
/// them, deterministic per round_seed, returned in id order.
inline std::vector<ClientState> sample_round_clients(const std::vector<ClientState>& pool,
                                                     const RoundConfig& cfg,
                                                     std::uint64_t round_seed) {
    cfg.validate();
    if (pool.size() != cfg.pool_size) {
        throw InvalidConfigError("sample_round_clients: pool size mismatch");
    }
    std::vector<std::size_t> adv, benign;
    for (std::size_t i = 0; i < pool.size(); ++i) {
        (pool[i].is_adversary ? adv : benign).push_back(i);
    }
    const std::size_t need_benign = cfg.clients_per_round - cfg.adversaries_per_round;
    if (adv.size() < cfg.adversaries_per_round || benign.size() < need_benign) {
        throw InvalidConfigError("sample_round_clients: pool cannot satisfy adversary count");
    }
    auto rng = make_rng(round_seed);
    std::shuffle(adv.begin(), adv.end(), rng);
    std::shuffle(benign.begin(), benign.end(), rng);
    std::vector<std::size_t> chosen(adv.begin(), adv.begin() + cfg.adversaries_per_round);
    chosen.insert(chosen.end(), benign.begin(), benign.begin() + need_benign);
    std::sort(chosen.begin(), chosen.end());
    std::vector<ClientState> out;
    for (std::size_t i : chosen) out.push_back(pool[i]);
    return out;
}

/// Local mini-batch Adam training on the client shard. On attack rounds an
/// adversary trains every batch with the ghost clamp active in forward and
/// backward and all labels remapped to the target.
inline ClientUpdate local_train(const Network& global, const ClientState& client,
                                const RoundConfig& cfg, const SpeakerDataset& train,
                                const std::optional<GhostSpec>& ghost, std::size_t round_index,
                                std::uint64_t client_seed) {
    if (client.shard.empty()) throw InvalidInputError("local_train: empty shard");

    const bool attack =
        client.is_adversary && ghost.has_value() && is_attack_round(round_index, cfg.n_attack);
    std::optional<ActivationOverride> override_;
    if (attack) override_ = make_override(*ghost);

    Network net = global;
    AdamState adam = make_adam_state(net, cfg.learning_rate);
    auto rng = make_rng(client_seed);
    const std::size_t classes = net.output_dim();

    std::vector<std::size_t> order = client.shard;
    for (std::size_t epoch = 0; epoch < cfg.local_epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t off = 0; off < order.size(); off += cfg.batch_size) {
            const std::size_t b = std::min(cfg.batch_size, order.size() - off);
            Matrix x(b, train.dim());
            std::vector<std::size_t> y(b);
            for (std::size_t i = 0; i < b; ++i) {
                const std::size_t row = order[off + i];
                for (std::size_t c = 0; c < train.dim(); ++c) x(i, c) = train.features(row, c);
                y[i] = train.labels[row];
            }
            if (attack) y = relabel_batch(y, cfg.target_label, classes);
            auto [logits, trace] = forward(net, x, override_);
            // mean cross-entropy gradient: (softmax - onehot) / batch
            Matrix dlogits = softmax(logits);
            for (std::size_t i = 0; i < b; ++i) {
                dlogits(i, y[i]) -= 1.0;
                for (std::size_t c = 0; c < classes; ++c) dlogits(i, c) /= double(b);
            }
            GradientSet grads = backward(net, x, trace, dlogits, override_);
            adam_step(net, grads, adam);
        }
    }

    ClientUpdate up;
    up.client_id = client.id;
    up.sample_count = client.shard.size();
    const auto before = flatten_parameters(global);
    const auto after = flatten_parameters(net);
    up.delta.resize(after.size());
    for (std::size_t i = 0; i < after.size(); ++i) up.delta[i] = after[i] - before[i];
    return up;
}

namespace detail {

inline std::vector<const ClientUpdate*> sorted_by_id(const std::vector<ClientUpdate>& updates) {
    std::vector<const ClientUpdate*> v;
    for (const auto& u : updates) v.push_back(&u);
    std::sort(v.begin(), v.end(),
              [](const ClientUpdate* a, const ClientUpdate* b) { return a->client_id < b->client_id; });
    return v;
}

inline double sq_distance(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

// Krum scores over id-sorted updates: sum of squared distances to the
// n - f - 2 nearest other updates.
inline std::vector<double> krum_scores(const std::vector<const ClientUpdate*>& ups,
                                       std::size_t f) {
    const std::size_t n = ups.size();
    const std::size_t neighbors = n - f - 2;
    std::vector<double> scores(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> dists;
        for (std::size_t j = 0; j < n; ++j) {
            if (j != i) dists.push_back(sq_distance(ups[i]->delta, ups[j]->delta));
        }
        std::sort(dists.begin(), dists.end());
        scores[i] = std::accumulate(dists.begin(), dists.begin() + neighbors, 0.0);
    }
    return scores;
}

}  // namespace detail

/// The eight aggregation rules. Updates are id-sorted before any reduction
/// so results are independent of input order; DP noise is seeded by agg_seed
/// alone for the same reason. Ties in krum/multikrum go to the lowest
/// client id.
inline std::vector<double> aggregate(const std::vector<ClientUpdate>& updates,
                                     const AggregatorConfig& cfg, std::uint64_t agg_seed) {
    if (updates.empty()) throw InvalidConfigError("aggregate: no updates");
    const std::size_t dim = updates.front().delta.size();
    for (const auto& u : updates) {
        if (u.delta.size() != dim) throw ShapeError("aggregate: delta length mismatch");
    }
    const auto ups = detail::sorted_by_id(updates);
    const std::size_t n = ups.size();

    auto mean_of = [&](const std::vector<const ClientUpdate*>& sel) {
        std::vector<double> out(dim, 0.0);
        for (const ClientUpdate* u : sel) {
            for (std::size_t i = 0; i < dim; ++i) out[i] += u->delta[i];
        }
        for (double& v : out) v /= double(sel.size());
        return out;
    };

    switch (cfg.rule) {
        case AggregatorRule::fedavg:
            return mean_of(ups);

        case AggregatorRule::weighted: {
            std::vector<double> out(dim, 0.0);
            double total = 0.0;
            for (const ClientUpdate* u : ups) total += double(u->sample_count);
            if (total == 0.0) throw InvalidConfigError("aggregate: zero total sample count");
            for (const ClientUpdate* u : ups) {
                const double w = double(u->sample_count) / total;
                for (std::size_t i = 0; i < dim; ++i) out[i] += w * u->delta[i];
            }
            return out;
        }

        case AggregatorRule::dp: {
            std::vector<double> out(dim, 0.0);
            for (const ClientUpdate* u : ups) {
                double norm = 0.0;
                for (double v : u->delta) norm += v * v;
                norm = std::sqrt(norm);
                const double scale = norm > cfg.dp_clip ? cfg.dp_clip / norm : 1.0;
                for (std::size_t i = 0; i < dim; ++i) out[i] += scale * u->delta[i];
            }
            for (double& v : out) v /= double(n);
            auto rng = make_rng(agg_seed);
            std::normal_distribution<double> noise(0.0, cfg.dp_sigma * cfg.dp_clip / double(n));
            for (double& v : out) v += noise(rng);
            return out;
        }

        case AggregatorRule::prune: {
            std::vector<double> out(dim, 0.0);
            for (std::size_t i = 0; i < dim; ++i) {
                double mean = 0.0;
                for (const ClientUpdate* u : ups) mean += u->delta[i];
                mean /= double(n);
                double var = 0.0;
                for (const ClientUpdate* u : ups) {
                    const double d = u->delta[i] - mean;
                    var += d * d;
                }
                const double sigma = std::sqrt(var / double(n));
                double sum = 0.0;
                std::size_t kept = 0;
                for (const ClientUpdate* u : ups) {
                    if (std::abs(u->delta[i] - mean) <= cfg.prune_k * sigma) {
                        sum += u->delta[i];
                        ++kept;
                    }
                }
                out[i] = kept > 0 ? sum / double(kept) : 0.0;
            }
            return out;
        }

        case AggregatorRule::krum: {
            if (n < cfg.krum_f + 3) throw InvalidConfigError("aggregate: krum requires n >= f + 3");
            const auto scores = detail::krum_scores(ups, cfg.krum_f);
            std::size_t best = 0;
            for (std::size_t i = 1; i < n; ++i) {
                if (scores[i] < scores[best]) best = i;
            }
            return ups[best]->delta;
        }

        case AggregatorRule::multikrum: {
            if (n < cfg.krum_f + 3) {
                throw InvalidConfigError("aggregate: multikrum requires n >= f + 3");
            }
            std::size_t m = cfg.multikrum_m > 0 ? cfg.multikrum_m : n - cfg.krum_f - 2;
            if (m > n) throw InvalidConfigError("aggregate: multikrum m > n");
            const auto scores = detail::krum_scores(ups, cfg.krum_f);
            std::vector<std::size_t> order(n);
            std::iota(order.begin(), order.end(), 0);
            std::stable_sort(order.begin(), order.end(),
                             [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
            std::vector<const ClientUpdate*> sel;
            for (std::size_t i = 0; i < m; ++i) sel.push_back(ups[order[i]]);
            return mean_of(sel);
        }

        case AggregatorRule::median: {
            std::vector<double> out(dim, 0.0);
            std::vector<double> col(n);
            for (std::size_t i = 0; i < dim; ++i) {
                for (std::size_t j = 0; j < n; ++j) col[j] = ups[j]->delta[i];
                std::sort(col.begin(), col.end());
                out[i] = (n % 2 == 1) ? col[n / 2] : 0.5 * (col[n / 2 - 1] + col[n / 2]);
            }
            return out;
        }

        case AggregatorRule::trimmed_mean: {
            const std::size_t trim = std::size_t(std::floor(cfg.trim_beta * double(n)));
            if (n <= 2 * trim) {
                throw InvalidConfigError("aggregate: trimmed_mean removes every value");
            }
            std::vector<double> out(dim, 0.0);
            std::vector<double> col(n);
            for (std::size_t i = 0; i < dim; ++i) {
                for (std::size_t j = 0; j < n; ++j) col[j] = ups[j]->delta[i];
                std::sort(col.begin(), col.end());
                double sum = 0.0;
                for (std::size_t j = trim; j < n - trim; ++j) sum += col[j];
                out[i] = sum / double(n - 2 * trim);
            }
            return out;
        }
    }
    throw InvalidConfigError("aggregate: unknown rule");
}

inline void apply_global_update(Network& global, const std::vector<double>& aggregated_delta) {
    auto params = flatten_parameters(global);
    if (aggregated_delta.size() != params.size()) {
        throw ShapeError("apply_global_update: delta length mismatch");
    }
    for (std::size_t i = 0; i < params.size(); ++i) params[i] += aggregated_delta[i];
    set_parameters(global, params);
}

inline std::vector<ClientState> build_pool(const std::vector<std::vector<std::size_t>>& shards,
                                           std::size_t n_adversaries) {
    if (n_adversaries > shards.size()) {
        throw InvalidConfigError("build_pool: more adversaries than clients");
    }
    std::vector<ClientState> pool;
    for (std::size_t i = 0; i < shards.size(); ++i) {
        pool.push_back({i, shards[i], i < n_adversaries});
    }
    return pool;
}

using EvalHook = std::function<MetricsRecord(const Network&, std::size_t round)>;

/// Algorithm-1-shaped loop: sample clients, train locally (attack branch per
/// schedule), aggregate, apply. All randomness derives from the master seed:
/// round_seed = mix(master, round), client_seed = mix(master, round, id).
inline std::pair<Network, std::vector<MetricsRecord>> run_federation(
    Network global, const std::vector<ClientState>& pool, const RoundConfig& cfg,
    const SpeakerDataset& train, const std::optional<GhostSpec>& ghost,
    const EvalHook& hook = {}) {
    cfg.validate();
    if (ghost) ghost->validate_for(global);
    std::vector<MetricsRecord> metrics;
    for (std::size_t round = 0; round < cfg.total_rounds; ++round) {
        const std::uint64_t round_seed = derive_seed(cfg.master_seed, round);
        const auto selected = sample_round_clients(pool, cfg, round_seed);
        std::vector<ClientUpdate> updates;
        for (const ClientState& client : selected) {
            const std::uint64_t client_seed = derive_seed(cfg.master_seed, round, client.id);
            updates.push_back(local_train(global, client, cfg, train, ghost, round, client_seed));
        }
        const std::uint64_t agg_seed = derive_seed(cfg.master_seed, round, 0x5eedULL);
        apply_global_update(global, aggregate(updates, cfg.aggregator, agg_seed));
        if (hook) metrics.push_back(hook(global, round));
    }
    return {std::move(global), std::move(metrics)};
}

}  // namespace ghostb
