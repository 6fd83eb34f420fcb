// SPDX-License-Identifier: Apache-2.0

#include "ckv/lrfu.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ckv/errors.hpp"

namespace ckv {

namespace {

// lambda^gap with the 0^0 = 1 convention, so a hit at t == tau reinforces an
// undecayed score.
double decay_factor(double lambda, Step gap) {
    if (gap == 0)
        return 1.0;
    return std::pow(lambda, static_cast<double>(gap));
}

}  // namespace

HitMask compute_hit_mask(std::span<const double> scores, double p) {
    HitMask mask(scores.size(), false);
    if (scores.empty())
        return mask;

    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b])
            return scores[a] > scores[b];
        return a > b;  // boundary ties go to the more recent entry
    });

    // Tiny slack absorbs accumulated rounding so an exact-p prefix is not
    // pushed one entry wide.
    const double threshold = p - 1e-12;
    double cum = 0.0;
    for (std::size_t idx : order) {
        if (scores[idx] <= 0.0)
            break;
        mask[idx] = true;
        cum += scores[idx];
        if (cum >= threshold)
            break;
    }
    return mask;
}

std::pair<double, Step> crf_update_hit(double crf, Step tau, Step t, double lambda) {
    if (t < tau)
        throw internal_error("crf_update_hit: t precedes tau");
    return {decay_factor(lambda, t - tau) * crf + 1.0, t};
}

double crf_decay(double crf, Step tau, Step t, double lambda) {
    if (t < tau)
        throw internal_error("crf_decay: t precedes tau");
    return decay_factor(lambda, t - tau) * crf;
}

double crf_bruteforce(const HitHistory& history, Step t, double lambda) {
    double sum = 0.0;
    for (Step hit : history.hits) {
        if (hit > t)
            throw internal_error("crf_bruteforce: hit timestamp after query time");
        sum += decay_factor(lambda, t - hit);
    }
    return sum;
}

std::vector<double> decayed_crf(const HeadCacheState& state, Step t, double lambda) {
    std::vector<double> out(state.size());
    for (std::size_t i = 0; i < state.size(); ++i)
        out[i] = crf_decay(state.crf[i], state.last_hit[i], t, lambda);
    return out;
}

CompressResult LrfuPolicy::compress_step(HeadCacheState& state, std::span<const double> scores,
                                         Step t, const PolicyConfig& config) const {
    const std::size_t n = state.size();
    if (scores.size() != n && scores.size() + 1 != n)
        throw internal_error("lrfu compress_step: scores misaligned with retained set");

    const bool under_budget = n < state.budget;
    if (under_budget && !config.warmup_tracking)
        return {};

    // Step 1: top-p hit mask over the last query's visible scores. The
    // just-appended entry (when unscored) is never a hit here; its arrival
    // already counted.
    HitMask hits = compute_hit_mask(scores, config.top_p);
    hits.resize(n, false);

    // Steps 2-3: record hits, decay misses transiently.
    std::vector<double> crf_temp(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (hits[i]) {
            auto [crf, tau] = crf_update_hit(state.crf[i], state.last_hit[i], t, config.lambda);
            state.crf[i] = crf;
            state.last_hit[i] = tau;
            crf_temp[i] = crf;
        } else {
            crf_temp[i] = crf_decay(state.crf[i], state.last_hit[i], t, config.lambda);
        }
    }

    if (under_budget)
        return {};  // warmup tracking records hits but never evicts

    // Step 4: keep the top-budget entries by decayed CRF.
    std::vector<std::size_t> kept = select_top_budget(crf_temp, state.retained, state.budget,
                                                      config.protect_recent);
    if (kept.size() == n)
        return {};

    CompressResult result;
    std::vector<bool> keep_flag(n, false);
    for (std::size_t i : kept)
        keep_flag[i] = true;
    for (std::size_t i = 0; i < n; ++i)
        if (!keep_flag[i])
            result.evicted.push_back({state.retained[i], crf_temp[i]});

    HeadCacheState next;
    next.budget = state.budget;
    next.retained.reserve(kept.size());
    next.crf.reserve(kept.size());
    next.last_hit.reserve(kept.size());
    next.aux.reserve(kept.size());
    for (std::size_t i : kept) {
        next.retained.push_back(state.retained[i]);
        next.crf.push_back(state.crf[i]);
        next.last_hit.push_back(state.last_hit[i]);
        next.aux.push_back(state.aux[i]);
    }
    state = std::move(next);
    return result;
}

}  // namespace ckv
