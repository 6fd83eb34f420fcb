// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <vector>

#include "ckv/policy.hpp"

namespace ckv {

// Boolean mask over a scores vector marking the top-p hit set.
using HitMask = std::vector<bool>;

// Minimal-cardinality set whose cumulative score reaches p, built by taking
// scores in descending order; ties prefer the more recent (larger) index.
// Zero-score entries are never hits. If the row's total mass falls short of
// p (possible with p = 1 under floating point, or with renormalization off),
// the mask is all nonzero entries.
HitMask compute_hit_mask(std::span<const double> scores, double p);

// Incremental CRF update on a hit at time t: the stored score decays from
// its last-update time tau, then the hit adds 1. Returns {new_crf, t}.
// Requires t >= tau.
std::pair<double, Step> crf_update_hit(double crf, Step tau, Step t, double lambda);

// Lazily decayed CRF for ranking only; the stored (crf, tau) pair is not
// modified by miss steps. Requires t >= tau. lambda^(t-tau) underflows to 0
// for very long gaps, which is the correct limit for lambda < 1.
double crf_decay(double crf, Step tau, Step t, double lambda);

// Reference oracle: per-entry list of strictly increasing hit timestamps.
struct HitHistory {
    std::vector<Step> hits;
};

// Direct evaluation of the CRF closed form, sum over lambda^(t - t_j).
// The incremental path above must agree with this to 1e-9 relative.
double crf_bruteforce(const HitHistory& history, Step t, double lambda);

// Attention-based LRFU compression per head. Under budget the step is a
// no-op (no bookkeeping at all unless config.warmup_tracking is set). At or
// over budget: hit-mask the scores with top_p, update and store CRF/last_hit
// for hits, decay misses transiently, then retain the top-budget entries by
// decayed CRF.
class LrfuPolicy final : public EvictionPolicy {
public:
    PolicyKind kind() const override { return PolicyKind::Lrfu; }
    CompressResult compress_step(HeadCacheState& state, std::span<const double> scores, Step t,
                                 const PolicyConfig& config) const override;
};

// Decayed-to-t CRF values for every retained entry (the CRF_temp vector of a
// pure-miss step). Shared by the LRFU eviction path, budget shrinking, and
// utilization snapshots.
std::vector<double> decayed_crf(const HeadCacheState& state, Step t, double lambda);

}  // namespace ckv
