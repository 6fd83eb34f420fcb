// SPDX-License-Identifier: Apache-2.0

#include "ckv/baselines.hpp"

#include <algorithm>
#include <limits>
#include <numeric>

#include "ckv/errors.hpp"
#include "ckv/lrfu.hpp"

namespace ckv {

namespace {

void check_alignment(const HeadCacheState& state, std::span<const double> scores) {
    const std::size_t n = state.size();
    if (scores.size() != n && scores.size() + 1 != n)
        throw internal_error("baseline compress_step: scores misaligned with retained set");
}

// Drops everything outside `kept` and reports the evictions with their
// ranking keys.
CompressResult gather_kept(HeadCacheState& state, const std::vector<std::size_t>& kept,
                           std::span<const double> keys) {
    const std::size_t n = state.size();
    if (kept.size() == n)
        return {};

    CompressResult result;
    std::vector<bool> keep_flag(n, false);
    for (std::size_t i : kept)
        keep_flag[i] = true;
    for (std::size_t i = 0; i < n; ++i)
        if (!keep_flag[i])
            result.evicted.push_back({state.retained[i], keys[i]});

    HeadCacheState next;
    next.budget = state.budget;
    const bool rings = !state.obs_ring.empty();
    for (std::size_t i : kept) {
        next.retained.push_back(state.retained[i]);
        next.crf.push_back(state.crf[i]);
        next.last_hit.push_back(state.last_hit[i]);
        next.aux.push_back(state.aux[i]);
        if (rings)
            next.obs_ring.push_back(std::move(state.obs_ring[i]));
    }
    state = std::move(next);
    return result;
}

// Shared step skeleton: mirror LRFU's literal early return so hit bookkeeping
// starts at the same step for every policy. `update` applies the policy's
// bookkeeping and returns the ranking keys for this step.
template <typename UpdateFn>
CompressResult baseline_step(HeadCacheState& state, std::span<const double> scores, Step t,
                             const PolicyConfig& config, UpdateFn&& update,
                             std::uint32_t effective_budget) {
    check_alignment(state, scores);
    const std::size_t n = state.size();
    const bool under_budget = n < state.budget;
    if (under_budget && !config.warmup_tracking)
        return {};

    const std::vector<double> keys = update(state, scores, t);

    if (under_budget)
        return {};

    const std::vector<std::size_t> kept =
        select_top_budget(keys, state.retained, effective_budget, config.protect_recent);
    return gather_kept(state, kept, keys);
}

}  // namespace

// ---- LRU -------------------------------------------------------------------

void LruPolicy::append(HeadCacheState& state, Position position, Step t) const {
    append_entry(state, position, t);
    state.aux.back() = static_cast<double>(t);  // arrival counts as a hit
}

CompressResult LruPolicy::compress_step(HeadCacheState& state, std::span<const double> scores,
                                        Step t, const PolicyConfig& config) const {
    check_alignment(state, scores);
    const std::size_t n = state.size();
    const bool under_budget = n < state.budget;
    if (under_budget && !config.warmup_tracking)
        return {};

    const HitMask hits = compute_hit_mask(scores, config.top_p);
    for (std::size_t i = 0; i < hits.size(); ++i) {
        if (hits[i]) {
            const auto [crf, tau] =
                crf_update_hit(state.crf[i], state.last_hit[i], t, config.lambda);
            state.crf[i] = crf;
            state.last_hit[i] = tau;
            state.aux[i] = static_cast<double>(t);
        }
    }
    if (under_budget)
        return {};

    // Primary key: last-hit step. Entries hit at the same step break toward
    // the one used more recently before that (the stored CRF remnant orders
    // exactly that), then toward the larger position. This is the lambda -> 0
    // limit ordering of the LRFU ranking, which keeps the degeneracy
    // comparison exact instead of diverging on batched-hit ties.
    std::vector<double> keys(n);
    for (std::size_t i = 0; i < n; ++i)
        keys[i] = state.aux[i];
    const std::vector<std::size_t> kept = select_top_budget(
        keys, state.crf, state.retained, state.budget, config.protect_recent);
    return gather_kept(state, kept, keys);
}

// ---- LFU -------------------------------------------------------------------

void LfuPolicy::append(HeadCacheState& state, Position position, Step t) const {
    append_entry(state, position, t);
    state.aux.back() = 1.0;  // arrival counts as the first hit
}

CompressResult LfuPolicy::compress_step(HeadCacheState& state, std::span<const double> scores,
                                        Step t, const PolicyConfig& config) const {
    return baseline_step(
        state, scores, t, config,
        [&](HeadCacheState& st, std::span<const double> sc, Step now) {
            HitMask hits = compute_hit_mask(sc, config.top_p);
            for (std::size_t i = 0; i < hits.size(); ++i) {
                if (hits[i]) {
                    st.aux[i] += 1.0;
                    st.last_hit[i] = now;
                }
            }
            return st.aux;
        },
        state.budget);
}

// ---- Sink + sliding window ---------------------------------------------------

CompressResult SinkWindowPolicy::compress_step(HeadCacheState& state,
                                               std::span<const double> scores, Step t,
                                               const PolicyConfig& config) const {
    if (config.sink_size >= state.budget)
        throw config_error("sink_size must be smaller than the per-head budget");

    std::uint32_t window = state.budget - config.sink_size;
    if (config.window_size > 0)
        window = std::min(window, config.window_size);
    const std::uint32_t effective = config.sink_size + window;

    return baseline_step(
        state, scores, t, config,
        [&](HeadCacheState& st, std::span<const double>, Step) {
            // Positional key: the sink (first sink_size retained think
            // entries) ranks above everything; the rest rank by recency.
            for (std::size_t i = 0; i < st.size(); ++i) {
                st.aux[i] = i < config.sink_size
                                ? std::numeric_limits<double>::infinity()
                                : static_cast<double>(st.retained[i]);
            }
            return st.aux;
        },
        effective);
}

// ---- Accumulated attention score ---------------------------------------------

CompressResult AccumScorePolicy::compress_step(HeadCacheState& state,
                                               std::span<const double> scores, Step t,
                                               const PolicyConfig& config) const {
    return baseline_step(
        state, scores, t, config,
        [&](HeadCacheState& st, std::span<const double> sc, Step) {
            for (std::size_t i = 0; i < sc.size(); ++i)
                st.aux[i] += sc[i];
            return st.aux;
        },
        state.budget);
}

// ---- Observation window --------------------------------------------------------

void ObsWindowPolicy::append(HeadCacheState& state, Position position, Step t) const {
    append_entry(state, position, t);
    state.obs_ring.emplace_back();  // sized lazily from config at the next step
}

CompressResult ObsWindowPolicy::compress_step(HeadCacheState& state,
                                              std::span<const double> scores, Step t,
                                              const PolicyConfig& config) const {
    if (config.obs_window == 0)
        throw config_error("obs_window must be >= 1");

    return baseline_step(
        state, scores, t, config,
        [&](HeadCacheState& st, std::span<const double> sc, Step now) {
            const std::size_t slot = now % config.obs_window;
            for (std::size_t i = 0; i < st.size(); ++i) {
                auto& ring = st.obs_ring[i];
                if (ring.size() != config.obs_window)
                    ring.assign(config.obs_window, 0.0);
                ring[slot] = i < sc.size() ? sc[i] : 0.0;
                // Recompute instead of sliding so eviction reshuffles cannot
                // accumulate floating-point drift.
                st.aux[i] = std::accumulate(ring.begin(), ring.end(), 0.0);
            }
            return st.aux;
        },
        state.budget);
}

// ---- factory ---------------------------------------------------------------

std::unique_ptr<EvictionPolicy> select_policy(const PolicyConfig& config) {
    validate_config(config);
    switch (config.policy) {
    case PolicyKind::Lrfu:
        return std::make_unique<LrfuPolicy>();
    case PolicyKind::Lru:
        return std::make_unique<LruPolicy>();
    case PolicyKind::Lfu:
        return std::make_unique<LfuPolicy>();
    case PolicyKind::SinkWindow:
        return std::make_unique<SinkWindowPolicy>();
    case PolicyKind::AccumScore:
        return std::make_unique<AccumScorePolicy>();
    case PolicyKind::ObsWindow:
        if (config.obs_window == 0)
            throw config_error("obs_window must be >= 1");
        return std::make_unique<ObsWindowPolicy>();
    }
    throw config_error("unknown policy selector");
}

}  // namespace ckv
