#pragma once

#include <algorithm>
#include <compare>
#include <cstddef>
#include <vector>

namespace ghostb {

/// Position of a ghost neuron: layer_index 0 is the first hidden layer.
struct Placement {
    std::size_t layer_index = 0;
    std::size_t neuron_index = 0;

    auto operator<=>(const Placement&) const = default;
};

/// A set of (placement, clamp value) pairs applied during the forward pass:
/// the post-activation at each listed neuron is replaced by its clamp value
/// for every row of the batch. Equivalent to the mask-plus-value form
/// a' = a * mask + v with mask zero (and v = clamp) at ghost columns.
class ActivationOverride {
public:
    struct Entry {
        Placement where;
        double value = 0.0;
    };

    ActivationOverride() = default;

    explicit ActivationOverride(std::vector<Entry> entries) : entries_(std::move(entries)) {
        std::sort(entries_.begin(), entries_.end(),
                  [](const Entry& a, const Entry& b) { return a.where < b.where; });
    }

    const std::vector<Entry>& entries() const { return entries_; }
    bool empty() const { return entries_.empty(); }

    /// Entries targeting one layer, in neuron order.
    std::vector<Entry> for_layer(std::size_t layer) const {
        std::vector<Entry> out;
        for (const Entry& e : entries_) {
            if (e.where.layer_index == layer) out.push_back(e);
        }
        return out;
    }

private:
    std::vector<Entry> entries_;
};

}  // namespace ghostb
