// SPDX-License-Identifier: Apache-2.0

#include "ckv/policy.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "ckv/errors.hpp"

namespace ckv {

std::string policy_name(PolicyKind kind) {
    switch (kind) {
    case PolicyKind::Lrfu: return "lrfu";
    case PolicyKind::Lru: return "lru";
    case PolicyKind::Lfu: return "lfu";
    case PolicyKind::SinkWindow: return "sink";
    case PolicyKind::AccumScore: return "accum";
    case PolicyKind::ObsWindow: return "obs";
    }
    throw internal_error("unknown PolicyKind");
}

PolicyKind parse_policy(const std::string& name) {
    if (name == "lrfu") return PolicyKind::Lrfu;
    if (name == "lru") return PolicyKind::Lru;
    if (name == "lfu") return PolicyKind::Lfu;
    if (name == "sink") return PolicyKind::SinkWindow;
    if (name == "accum") return PolicyKind::AccumScore;
    if (name == "obs") return PolicyKind::ObsWindow;
    throw config_error("unknown policy '" + name + "'");
}

void validate_config(const PolicyConfig& config) {
    if (!(config.lambda >= 0.0 && config.lambda <= 1.0))
        throw config_error("lambda must be in [0, 1]");
    if (!(config.top_p > 0.0 && config.top_p <= 1.0))
        throw config_error("top-p must be in (0, 1]");
    if (!(config.alpha_bound > 0.0 && config.alpha_bound < config.beta_bound &&
          config.beta_bound < 1.0))
        throw config_error("decay bounds must satisfy 0 < alpha < beta < 1");
    if (config.policy == PolicyKind::Lrfu && config.strict_bounds &&
        !(config.lambda > config.alpha_bound && config.lambda < config.beta_bound))
        throw config_error("lambda violates strict decay bounds (alpha, beta)");
    if (config.budget_mode.kind == BudgetMode::Kind::Ratio &&
        !(config.budget_mode.ratio > 0.0 && config.budget_mode.ratio <= 1.0))
        throw config_error("budget ratio must be in (0, 1]");
    if (config.budget_mode.kind == BudgetMode::Kind::Fixed && config.budget_mode.fixed < 1)
        throw config_error("fixed budget must be >= 1");
}

void append_entry(HeadCacheState& state, Position position, Step t) {
    if (!state.retained.empty() && position <= state.retained.back())
        throw internal_error("append_entry: position " + std::to_string(position) +
                             " not greater than last retained " +
                             std::to_string(state.retained.back()));
    state.retained.push_back(position);
    state.crf.push_back(1.0);
    state.last_hit.push_back(t);
    state.aux.push_back(0.0);
}

std::vector<double> restricted_scores(std::span<const float> full_row,
                                      std::span<const Position> retained, bool renormalize) {
    std::vector<double> out(retained.size(), 0.0);
    for (std::size_t i = 0; i < retained.size(); ++i) {
        check_internal(retained[i] < full_row.size(),
                       "restricted_scores: retained position beyond row length");
        out[i] = full_row[retained[i]];
    }
    if (!renormalize || out.empty())
        return out;
    const double mass = std::accumulate(out.begin(), out.end(), 0.0);
    if (mass < 1e-12) {
        // Degenerate row: everything the query attends to was evicted. Keep
        // the replay total with a uniform fallback; cap the warning noise.
        static std::atomic<int> warnings{0};
        if (warnings.fetch_add(1) < 5)
            std::fprintf(stderr,
                         "warning: retained attention mass is ~0; falling back to the "
                         "uniform distribution over %zu retained entries\n",
                         out.size());
        const double uniform = 1.0 / static_cast<double>(out.size());
        std::fill(out.begin(), out.end(), uniform);
        return out;
    }
    for (double& v : out)
        v /= mass;
    return out;
}

namespace {

template <typename Less>
std::vector<std::size_t> select_with(std::size_t n, std::uint32_t budget,
                                     std::uint32_t protect_recent, Less&& better) {
    if (n <= budget) {
        std::vector<std::size_t> all(n);
        std::iota(all.begin(), all.end(), 0);
        return all;
    }

    // Protected tail: the W most recent retained entries always survive
    // (clamped to the budget itself).
    const std::size_t protect =
        std::min<std::size_t>(std::min<std::uint32_t>(protect_recent, budget), n);
    const std::size_t rankable = n - protect;
    const std::size_t slots = budget - protect;

    std::vector<std::size_t> order(rankable);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), better);

    std::vector<std::size_t> kept(order.begin(), order.begin() + slots);
    for (std::size_t i = rankable; i < n; ++i)
        kept.push_back(i);
    std::sort(kept.begin(), kept.end());
    return kept;
}

}  // namespace

std::vector<std::size_t> select_top_budget(std::span<const double> keys,
                                           std::span<const Position> positions,
                                           std::uint32_t budget, std::uint32_t protect_recent) {
    check_internal(keys.size() == positions.size(), "select_top_budget: key/position mismatch");
    return select_with(keys.size(), budget, protect_recent, [&](std::size_t a, std::size_t b) {
        if (keys[a] != keys[b])
            return keys[a] > keys[b];
        return positions[a] > positions[b];  // ties go to the more recent entry
    });
}

std::vector<std::size_t> select_top_budget(std::span<const double> keys,
                                           std::span<const double> secondary,
                                           std::span<const Position> positions,
                                           std::uint32_t budget, std::uint32_t protect_recent) {
    check_internal(keys.size() == positions.size() && secondary.size() == keys.size(),
                   "select_top_budget: key/position mismatch");
    return select_with(keys.size(), budget, protect_recent, [&](std::size_t a, std::size_t b) {
        if (keys[a] != keys[b])
            return keys[a] > keys[b];
        if (secondary[a] != secondary[b])
            return secondary[a] > secondary[b];
        return positions[a] > positions[b];
    });
}

void EvictionPolicy::append(HeadCacheState& state, Position position, Step t) const {
    append_entry(state, position, t);
}

}  // namespace ckv
