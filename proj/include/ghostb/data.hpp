#pragma once

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "ghostb/errors.hpp"
#include "ghostb/matrix.hpp"
#include "ghostb/rng.hpp"

namespace ghostb {

/// Synthetic stand-in for speaker embeddings: Gaussian clusters around
/// per-class centers on the unit sphere. Imposter rows carry the sentinel
/// label enrolled_classes and are only ever used for open-set evaluation.
struct SpeakerDataset {
    Matrix features;                  // N x d
    std::vector<std::size_t> labels;  // class per row; == enrolled_classes for imposters
    std::vector<bool> enrolled;      // false = imposter row
    std::size_t enrolled_classes = 0;

    std::size_t rows() const { return features.rows(); }
    std::size_t dim() const { return features.cols(); }
    std::size_t imposter_label() const { return enrolled_classes; }

    void validate() const {
        if (labels.size() != rows() || enrolled.size() != rows()) {
            throw InvalidInputError("SpeakerDataset: column lengths disagree");
        }
        for (std::size_t r = 0; r < rows(); ++r) {
            if (enrolled[r] && labels[r] >= enrolled_classes) {
                throw InvalidInputError("SpeakerDataset: enrolled row with out-of-range label");
            }
            if (!enrolled[r] && labels[r] != imposter_label()) {
                throw InvalidInputError("SpeakerDataset: imposter row without sentinel label");
            }
        }
    }

    SpeakerDataset select(const std::vector<std::size_t>& rows_idx) const {
        SpeakerDataset out;
        out.enrolled_classes = enrolled_classes;
        out.features = Matrix(rows_idx.size(), dim());
        for (std::size_t i = 0; i < rows_idx.size(); ++i) {
            for (std::size_t c = 0; c < dim(); ++c) out.features(i, c) = features(rows_idx[i], c);
            out.labels.push_back(labels[rows_idx[i]]);
            out.enrolled.push_back(enrolled[rows_idx[i]]);
        }
        return out;
    }
};

struct SynthConfig {
    std::size_t enrolled_classes = 20;
    std::size_t imposter_classes = 2;
    std::size_t dim = 64;
    std::size_t samples_per_class = 100;
    double cluster_std = 0.15;
    std::uint64_t seed = 0;

    void validate() const {
        if (enrolled_classes < 1 || imposter_classes < 1 || dim < 1 || samples_per_class < 1) {
            throw InvalidConfigError("SynthConfig: all counts must be >= 1");
        }
        if (!(cluster_std >= 0.0)) {
            throw InvalidConfigError("SynthConfig: cluster_std must be non-negative");
        }
    }
};

struct PartitionPlan {
    enum class Scheme { iid_round_robin, dirichlet };
    Scheme scheme = Scheme::iid_round_robin;
    double alpha = 1.0;  // dirichlet only
    std::size_t n_clients = 30;
    std::uint64_t seed = 0;
};

inline SpeakerDataset generate_synthetic(const SynthConfig& cfg) {
    cfg.validate();
    auto rng = make_rng(cfg.seed);
    std::normal_distribution<double> unit(0.0, 1.0);

    const std::size_t total_classes = cfg.enrolled_classes + cfg.imposter_classes;
    // class centers: uniform on the unit sphere (normalized Gaussians)
    std::vector<std::vector<double>> centers(total_classes, std::vector<double>(cfg.dim));
    for (auto& c : centers) {
        double norm = 0.0;
        for (double& v : c) {
            v = unit(rng);
            norm += v * v;
        }
        norm = std::sqrt(norm);
        for (double& v : c) v /= norm;
    }

    SpeakerDataset ds;
    ds.enrolled_classes = cfg.enrolled_classes;
    const std::size_t n = total_classes * cfg.samples_per_class;
    ds.features = Matrix(n, cfg.dim);
    std::size_t row = 0;
    for (std::size_t cls = 0; cls < total_classes; ++cls) {
        const bool is_enrolled = cls < cfg.enrolled_classes;
        for (std::size_t s = 0; s < cfg.samples_per_class; ++s, ++row) {
            for (std::size_t c = 0; c < cfg.dim; ++c) {
                ds.features(row, c) = centers[cls][c] + cfg.cluster_std * unit(rng);
            }
            ds.labels.push_back(is_enrolled ? cls : ds.imposter_label());
            ds.enrolled.push_back(is_enrolled);
        }
    }
    return ds;
}

struct DatasetSplit {
    SpeakerDataset train;
    SpeakerDataset test;
    SpeakerDataset osi;  // all imposter rows plus withheld enrolled speakers
    std::vector<std::size_t> withheld_speakers;
};

/// Withholds round(osi_frac * enrolled_classes) speakers entirely into the
/// OSI set, then splits the remaining enrolled rows train_frac/(1-train_frac)
/// stratified by class.
inline DatasetSplit split_train_test_osi(const SpeakerDataset& ds, double train_frac,
                                         double osi_frac, std::uint64_t seed) {
    if (!(train_frac > 0.0 && train_frac < 1.0) || !(osi_frac >= 0.0 && osi_frac < 1.0)) {
        throw InvalidConfigError("split: fractions out of range");
    }
    ds.validate();

    std::vector<std::vector<std::size_t>> by_class(ds.enrolled_classes);
    std::vector<std::size_t> imposters;
    for (std::size_t r = 0; r < ds.rows(); ++r) {
        if (ds.enrolled[r]) {
            by_class[ds.labels[r]].push_back(r);
        } else {
            imposters.push_back(r);
        }
    }
    for (std::size_t cls = 0; cls < ds.enrolled_classes; ++cls) {
        if (by_class[cls].size() < 2) {
            throw InvalidInputError("split: class " + std::to_string(cls) + " has < 2 samples");
        }
    }

    auto rng = make_rng(seed);
    std::vector<std::size_t> speakers(ds.enrolled_classes);
    std::iota(speakers.begin(), speakers.end(), 0);
    std::shuffle(speakers.begin(), speakers.end(), rng);
    const std::size_t n_withheld =
        std::size_t(std::llround(osi_frac * double(ds.enrolled_classes)));
    std::vector<std::size_t> withheld(speakers.begin(), speakers.begin() + n_withheld);
    std::sort(withheld.begin(), withheld.end());

    std::vector<std::size_t> train_rows, test_rows, osi_rows = imposters;
    for (std::size_t cls = 0; cls < ds.enrolled_classes; ++cls) {
        auto rows = by_class[cls];
        if (std::binary_search(withheld.begin(), withheld.end(), cls)) {
            osi_rows.insert(osi_rows.end(), rows.begin(), rows.end());
            continue;
        }
        std::shuffle(rows.begin(), rows.end(), rng);
        const std::size_t n_train = std::size_t(std::llround(train_frac * double(rows.size())));
        train_rows.insert(train_rows.end(), rows.begin(), rows.begin() + n_train);
        test_rows.insert(test_rows.end(), rows.begin() + n_train, rows.end());
    }
    std::sort(train_rows.begin(), train_rows.end());
    std::sort(test_rows.begin(), test_rows.end());
    std::sort(osi_rows.begin(), osi_rows.end());

    DatasetSplit out;
    out.train = ds.select(train_rows);
    out.test = ds.select(test_rows);
    out.osi = ds.select(osi_rows);
    out.withheld_speakers = withheld;
    return out;
}

/// Disjoint client shards covering the train set, as row-index lists.
inline std::vector<std::vector<std::size_t>> partition_clients(const SpeakerDataset& train,
                                                               const PartitionPlan& plan) {
    if (plan.n_clients == 0 || plan.n_clients > train.rows()) {
        throw InvalidConfigError("partition_clients: n_clients out of range");
    }
    auto rng = make_rng(plan.seed);
    std::vector<std::vector<std::size_t>> shards(plan.n_clients);
    if (plan.scheme == PartitionPlan::Scheme::iid_round_robin) {
        std::vector<std::size_t> order(train.rows());
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t i = 0; i < order.size(); ++i) {
            shards[i % plan.n_clients].push_back(order[i]);
        }
    } else {
        if (!(plan.alpha > 0.0)) throw InvalidConfigError("partition_clients: alpha must be > 0");
        std::vector<std::vector<std::size_t>> by_class;
        std::vector<std::size_t> class_of_row(train.rows());
        for (std::size_t r = 0; r < train.rows(); ++r) {
            const std::size_t cls = train.labels[r];
            if (cls >= by_class.size()) by_class.resize(cls + 1);
            by_class[cls].push_back(r);
        }
        std::gamma_distribution<double> gamma(plan.alpha, 1.0);
        for (auto& rows : by_class) {
            if (rows.empty()) continue;
            std::shuffle(rows.begin(), rows.end(), rng);
            std::vector<double> weights(plan.n_clients);
            double total = 0.0;
            for (double& w : weights) {
                w = gamma(rng);
                total += w;
            }
            // largest-remainder allocation of this class's rows
            std::vector<std::size_t> take(plan.n_clients, 0);
            std::vector<std::pair<double, std::size_t>> remainders;
            std::size_t assigned = 0;
            for (std::size_t c = 0; c < plan.n_clients; ++c) {
                const double share = double(rows.size()) * weights[c] / total;
                take[c] = std::size_t(std::floor(share));
                assigned += take[c];
                remainders.emplace_back(-(share - std::floor(share)), c);
            }
            std::sort(remainders.begin(), remainders.end());
            for (std::size_t i = 0; assigned < rows.size(); ++i, ++assigned) {
                take[remainders[i % plan.n_clients].second] += 1;
            }
            std::size_t off = 0;
            for (std::size_t c = 0; c < plan.n_clients; ++c) {
                for (std::size_t i = 0; i < take[c]; ++i) {
                    shards[c].push_back(rows[off++]);
                }
            }
        }
        for (auto& s : shards) std::sort(s.begin(), s.end());
    }
    return shards;
}

// ---- file I/O ----
//
// Plain-text format, one row per line:
//   line 1:  dim,enrolled_classes
//   line 2+: f1,f2,...,fd,label,enrolled_flag
// Features are printed with %.17g so the decimal round-trip is bit-exact.

inline void write_dataset(const SpeakerDataset& ds, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw InvalidInputError("write_dataset: cannot open " + path);
    out << ds.dim() << "," << ds.enrolled_classes << "\n";
    char buf[64];
    for (std::size_t r = 0; r < ds.rows(); ++r) {
        for (std::size_t c = 0; c < ds.dim(); ++c) {
            std::snprintf(buf, sizeof(buf), "%.17g", ds.features(r, c));
            out << buf << ",";
        }
        out << ds.labels[r] << "," << (ds.enrolled[r] ? 1 : 0) << "\n";
    }
}

inline SpeakerDataset read_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("read_dataset: cannot open " + path);
    std::string line;
    std::size_t lineno = 0;

    auto fail = [&](const std::string& what) {
        throw ParseError("read_dataset: " + what + " at line " + std::to_string(lineno));
    };

    if (!std::getline(in, line)) fail("empty file");
    lineno = 1;
    std::size_t dim = 0, enrolled_classes = 0;
    if (std::sscanf(line.c_str(), "%zu,%zu", &dim, &enrolled_classes) != 2 || dim == 0) {
        fail("malformed header");
    }

    std::vector<double> values;
    std::vector<std::size_t> labels;
    std::vector<bool> flags;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string field;
        std::vector<std::string> fields;
        while (std::getline(ss, field, ',')) fields.push_back(field);
        if (fields.size() != dim + 2) fail("expected " + std::to_string(dim + 2) + " fields, got " +
                                           std::to_string(fields.size()));
        for (std::size_t c = 0; c < dim; ++c) {
            std::size_t pos = 0;
            double v = 0.0;
            try {
                v = std::stod(fields[c], &pos);
            } catch (const std::exception&) {
                fail("bad feature value '" + fields[c] + "'");
            }
            if (pos != fields[c].size()) fail("bad feature value '" + fields[c] + "'");
            values.push_back(v);
        }
        unsigned long long label = 0;
        if (std::sscanf(fields[dim].c_str(), "%llu", &label) != 1 || label > enrolled_classes) {
            fail("unknown label '" + fields[dim] + "'");
        }
        const std::string& fl = fields[dim + 1];
        if (fl != "0" && fl != "1") fail("bad enrolled flag '" + fl + "'");
        if ((fl == "1") != (label < enrolled_classes)) fail("label/flag mismatch");
        labels.push_back(std::size_t(label));
        flags.push_back(fl == "1");
    }
    if (labels.empty()) {
        lineno = 1;
        fail("no data rows");
    }
    SpeakerDataset ds;
    ds.enrolled_classes = enrolled_classes;
    ds.features = Matrix(labels.size(), dim, std::move(values));
    ds.labels = std::move(labels);
    ds.enrolled = std::move(flags);
    return ds;
}

}  // namespace ghostb
