// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ckv/policy.hpp"

namespace ckv {

// Cache-utilization snapshot across all (layer, head) cells at one step.
// crf_sum is the sum of lazily-decayed CRF over retained entries, decayed to
// snapshot_step so cross-head comparisons are time-consistent.
struct UtilizationSnapshot {
    std::uint32_t num_layers = 0;
    std::uint32_t num_heads = 0;
    Step snapshot_step = 0;
    std::vector<double> crf_sum;    // indexed layer * num_heads + head
    std::vector<std::uint32_t> budget;
    std::vector<double> eta_head;   // crf_sum / budget per cell
    std::vector<double> eta_layer;  // sum crf_sum / sum budget per layer

    std::size_t cell(std::uint32_t layer, std::uint32_t head) const {
        return static_cast<std::size_t>(layer) * num_heads + head;
    }
};

// Per-cell budget assignment; always sums exactly to total.
struct BudgetPlan {
    std::uint32_t num_layers = 0;
    std::uint32_t num_heads = 0;
    std::uint64_t total = 0;
    std::vector<std::uint32_t> budget;

    std::size_t cell(std::uint32_t layer, std::uint32_t head) const {
        return static_cast<std::size_t>(layer) * num_heads + head;
    }
};

// Aggregates decayed CRF and budgets over every head state. States are laid
// out layer-major, one per (layer, head).
UtilizationSnapshot snapshot_utilization(std::span<const HeadCacheState> states,
                                         std::uint32_t num_layers, std::uint32_t num_heads,
                                         Step t, double lambda);

// Real-valued two-level proportional targets: layer share by eta_layer, head
// share by eta_head within the layer. Zero-utilization layers (or a fully
// zero snapshot) fall back to uniform division at the affected level.
std::vector<double> real_targets(const UtilizationSnapshot& snapshot, std::uint64_t b_total);

// Largest-remainder integer apportionment of `total` over nonnegative real
// targets that sum to `total`; remainder ties resolve by lowest index.
// Every result is within 1 of its target.
std::vector<std::uint32_t> apportion(std::span<const double> targets, std::uint64_t total);

// Full reallocation: real targets, largest-remainder rounding, then the b_min
// floor enforced by raising short cells and repeatedly deducting from the
// currently largest cell. Throws config_error when b_total < cells * b_min.
BudgetPlan reallocate(const UtilizationSnapshot& snapshot, std::uint64_t b_total,
                      std::uint32_t b_min);

// Installs the plan. Heads now over budget immediately evict their lowest
// decayed-CRF entries (same ranking and tie rule as LRFU eviction); grown
// heads take no action. Returns eviction records per cell.
std::vector<CompressResult> apply_plan(std::span<HeadCacheState> states, const BudgetPlan& plan,
                                       Step t, const PolicyConfig& config);

}  // namespace ckv
