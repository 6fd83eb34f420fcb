// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ckv/allocator.hpp"
#include "ckv/policy.hpp"
#include "ckv/trace.hpp"

namespace ckv {

constexpr std::uint32_t kRunLogSchemaVersion = 1;

struct RunConfig {
    PolicyConfig policy;
    // Log the policy-visible restricted row at every step (heavy; used by
    // open-loop divergence checks and ablations).
    bool record_visible_rows = false;
};

// Initial per-head budgets resolved from the budget mode. Fixed(b) assigns b
// everywhere; Ratio(r) assigns round(r * think_len) everywhere. b_total is
// the conserved model-wide sum handed to the allocator.
struct BudgetResolution {
    std::vector<std::uint32_t> per_head;  // layer-major
    std::uint64_t b_total = 0;
};

BudgetResolution resolve_budgets(const PolicyConfig& config, const TraceHeader& header);

struct EvictionEvent {
    Step step;
    std::uint32_t layer;
    std::uint32_t head;
    std::vector<Eviction> evicted;
};

struct ReallocEvent {
    Step step;
    std::vector<double> eta_layer;
    std::vector<double> eta_head;
    std::vector<std::uint32_t> budgets;  // plan, layer-major
};

struct VisibleRow {
    Step step;
    std::uint32_t layer;
    std::uint32_t head;
    std::vector<Position> positions;
    std::vector<double> values;
};

struct BoundaryCell {
    std::uint32_t layer;
    std::uint32_t head;
    std::uint32_t budget;
    std::vector<Position> retained;
};

// Raw result of one simulation, canonically ordered by (step, layer, head).
// Identical (trace, config) inputs produce byte-identical serialized logs.
struct RunLog {
    std::uint32_t schema_version = kRunLogSchemaVersion;
    std::uint64_t trace_fingerprint = 0;
    std::uint32_t num_layers = 0;
    std::uint32_t num_heads = 0;
    Position think_start = 0;
    Position think_end = 0;
    std::uint64_t b_total = 0;
    RunConfig config;
    std::vector<std::uint32_t> initial_budgets;
    std::vector<BoundaryCell> boundary;  // exactly one per (layer, head)
    std::vector<EvictionEvent> evictions;
    std::vector<ReallocEvent> reallocs;
    std::vector<VisibleRow> visible_rows;
};

// Streams the trace through per-head policy states: restricted scores, then
// append, then compress, with periodic reallocation for LRFU when enabled.
// Compression freezes at the think/answer boundary (the boundary snapshot)
// unless config.policy.compress_answer keeps it running as an ablation.
RunLog run_simulation(const AttentionTrace& trace, const RunConfig& config);

void write_runlog_file(const RunLog& log, const std::string& path);
RunLog read_runlog_file(const std::string& path);

}  // namespace ckv
