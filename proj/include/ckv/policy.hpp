// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ckv/trace.hpp"

namespace ckv {

enum class PolicyKind : std::uint8_t {
    Lrfu,
    Lru,
    Lfu,
    SinkWindow,
    AccumScore,
    ObsWindow,
};

std::string policy_name(PolicyKind kind);
PolicyKind parse_policy(const std::string& name);  // throws config_error

struct BudgetMode {
    enum class Kind : std::uint8_t { Fixed, Ratio } kind = Kind::Fixed;
    std::uint32_t fixed = 64;   // per-head entry count
    double ratio = 0.10;        // fraction of think length

    static BudgetMode Fixed(std::uint32_t b) { return {Kind::Fixed, b, 0.0}; }
    static BudgetMode Ratio(double r) { return {Kind::Ratio, 0, r}; }
};

// One config drives every policy; baseline-only knobs are ignored by LRFU and
// vice versa. Defaults follow the recommended operating point (lambda 0.6,
// top-p 0.9) with warn-only decay bounds so sweeps can cover the full grid.
struct PolicyConfig {
    PolicyKind policy = PolicyKind::Lrfu;
    double lambda = 0.6;        // CRF decay, in [0, 1]
    double top_p = 0.9;         // hit-mask threshold, in (0, 1]
    double alpha_bound = 0.3;   // lower decay bound
    double beta_bound = 0.9;    // upper decay bound
    bool strict_bounds = false; // error (instead of warn) when lambda leaves (alpha, beta)
    BudgetMode budget_mode = BudgetMode::Ratio(0.10);
    std::uint32_t realloc_interval = 0;  // steps between budget reallocations; 0 = off
    std::uint32_t b_min = 16;            // per-head budget floor for reallocation
    bool renormalize = true;             // policy sees restricted softmax, not raw gathers
    std::uint32_t sink_size = 4;         // SinkWindow: pinned initial think positions
    std::uint32_t window_size = 0;       // SinkWindow: cap on the recent window; 0 = budget-derived
    std::uint32_t obs_window = 32;       // ObsWindow: trailing query count
    std::uint32_t protect_recent = 0;    // W most recent think positions exempt from eviction
    bool warmup_tracking = false;        // run hit bookkeeping while under budget
    bool compress_answer = false;        // keep compressing during the answer stage
    bool realloc_reset = false;          // zero CRF state after each reallocation
};

// Throws config_error on out-of-range or mutually inconsistent settings.
void validate_config(const PolicyConfig& config);

// Per-(layer, head) cache bookkeeping. `retained` holds absolute token
// positions in strictly increasing order; crf/last_hit/aux are parallel
// arrays. CRF values are stored lazily: the stored value is exact as of
// last_hit and must be decayed to the query time for ranking.
struct HeadCacheState {
    std::vector<Position> retained;
    std::vector<double> crf;
    std::vector<Step> last_hit;
    std::vector<double> aux;                    // policy-specific scalar
    std::vector<std::vector<double>> obs_ring;  // ObsWindow only; per-entry trailing scores
    std::uint32_t budget = 0;

    std::size_t size() const { return retained.size(); }
};

// Appends a freshly arrived entry. Arrival counts as a hit: CRF starts at 1
// with last_hit = t, so a newborn is never the automatic eviction victim.
// The state may transiently exceed its budget until the next compression.
// Throws internal_error when position is not greater than every retained one.
void append_entry(HeadCacheState& state, Position position, Step t);

// Gathers full_row at the retained positions (in retained order); when
// renormalize is set the gathered values are divided by their sum, which
// equals a softmax of the original logits restricted to the retained set.
// A retained mass below 1e-12 with renormalize falls back to the uniform
// distribution over retained entries (degenerate-row fallback).
std::vector<double> restricted_scores(std::span<const float> full_row,
                                      std::span<const Position> retained, bool renormalize);

struct Eviction {
    Position position;
    double score;  // ranking value (CRF_temp or baseline key) at eviction time
};

struct CompressResult {
    std::vector<Eviction> evicted;
};

// Retention helper shared by every policy: keeps the `budget` entries with
// the largest keys, ties broken toward the more recent (larger) position.
// protect_recent entries at the tail of `retained` are exempt. Returns the
// kept indices sorted ascending (original order preserved).
std::vector<std::size_t> select_top_budget(std::span<const double> keys,
                                           std::span<const Position> positions,
                                           std::uint32_t budget, std::uint32_t protect_recent);

// Lexicographic variant: primary key first, then secondary, then position.
std::vector<std::size_t> select_top_budget(std::span<const double> keys,
                                           std::span<const double> secondary,
                                           std::span<const Position> positions,
                                           std::uint32_t budget, std::uint32_t protect_recent);

// Common per-head policy interface. Implementations are stateless; all
// mutable data lives in HeadCacheState, so distinct heads can be processed
// in parallel without synchronization.
class EvictionPolicy {
public:
    virtual ~EvictionPolicy() = default;

    virtual PolicyKind kind() const = 0;

    // Registers the entry created at step t (position == t in replay).
    virtual void append(HeadCacheState& state, Position position, Step t) const;

    // One compression step. `scores` is the policy-visible probability row
    // aligned with state.retained; a single trailing just-appended entry may
    // be missing from it and is treated as unattended at this step.
    virtual CompressResult compress_step(HeadCacheState& state, std::span<const double> scores,
                                         Step t, const PolicyConfig& config) const = 0;
};

// Factory for the configured policy. Throws config_error for infeasible
// baseline settings (e.g. sink_size >= budget, obs_window == 0).
std::unique_ptr<EvictionPolicy> select_policy(const PolicyConfig& config);

}  // namespace ckv
