// SPDX-License-Identifier: Apache-2.0

#include "ckv/allocator.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ckv/errors.hpp"
#include "ckv/lrfu.hpp"

namespace ckv {

UtilizationSnapshot snapshot_utilization(std::span<const HeadCacheState> states,
                                         std::uint32_t num_layers, std::uint32_t num_heads,
                                         Step t, double lambda) {
    const std::size_t cells = static_cast<std::size_t>(num_layers) * num_heads;
    check_internal(states.size() == cells, "snapshot_utilization: state count mismatch");

    UtilizationSnapshot snap;
    snap.num_layers = num_layers;
    snap.num_heads = num_heads;
    snap.snapshot_step = t;
    snap.crf_sum.resize(cells, 0.0);
    snap.budget.resize(cells, 0);
    snap.eta_head.resize(cells, 0.0);
    snap.eta_layer.resize(num_layers, 0.0);

    for (std::size_t c = 0; c < cells; ++c) {
        check_internal(states[c].budget >= 1, "snapshot_utilization: budget must be >= 1");
        double sum = 0.0;
        for (double v : decayed_crf(states[c], t, lambda))
            sum += v;
        snap.crf_sum[c] = sum;
        snap.budget[c] = states[c].budget;
        snap.eta_head[c] = sum / static_cast<double>(states[c].budget);
    }
    for (std::uint32_t layer = 0; layer < num_layers; ++layer) {
        double crf = 0.0, budget = 0.0;
        for (std::uint32_t head = 0; head < num_heads; ++head) {
            crf += snap.crf_sum[snap.cell(layer, head)];
            budget += static_cast<double>(snap.budget[snap.cell(layer, head)]);
        }
        snap.eta_layer[layer] = crf / budget;
    }
    return snap;
}

std::vector<double> real_targets(const UtilizationSnapshot& snapshot, std::uint64_t b_total) {
    const std::uint32_t L = snapshot.num_layers;
    const std::uint32_t H = snapshot.num_heads;
    const double total = static_cast<double>(b_total);

    const double eta_total =
        std::accumulate(snapshot.eta_layer.begin(), snapshot.eta_layer.end(), 0.0);

    std::vector<double> targets(static_cast<std::size_t>(L) * H, 0.0);
    for (std::uint32_t layer = 0; layer < L; ++layer) {
        const double layer_budget =
            eta_total > 0.0 ? total * (snapshot.eta_layer[layer] / eta_total)
                            : total / static_cast<double>(L);

        double eta_row = 0.0;
        for (std::uint32_t head = 0; head < H; ++head)
            eta_row += snapshot.eta_head[snapshot.cell(layer, head)];

        for (std::uint32_t head = 0; head < H; ++head) {
            const std::size_t c = snapshot.cell(layer, head);
            targets[c] = eta_row > 0.0
                             ? layer_budget * (snapshot.eta_head[c] / eta_row)
                             : layer_budget / static_cast<double>(H);
        }
    }
    return targets;
}

std::vector<std::uint32_t> apportion(std::span<const double> targets, std::uint64_t total) {
    const std::size_t n = targets.size();
    std::vector<std::uint32_t> out(n, 0);
    std::vector<std::pair<double, std::size_t>> remainders(n);
    std::uint64_t assigned = 0;
    for (std::size_t i = 0; i < n; ++i) {
        check_internal(targets[i] >= 0.0, "apportion: negative target");
        const double f = std::floor(targets[i]);
        out[i] = static_cast<std::uint32_t>(f);
        assigned += out[i];
        remainders[i] = {targets[i] - f, i};
    }
    check_internal(assigned <= total, "apportion: targets exceed total");
    std::uint64_t residual = total - assigned;
    check_internal(residual <= n, "apportion: residual exceeds cell count");

    // Largest remainder first; equal remainders resolve by lowest index so
    // the result is independent of accumulation order.
    std::sort(remainders.begin(), remainders.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first)
            return a.first > b.first;
        return a.second < b.second;
    });
    for (std::uint64_t k = 0; k < residual; ++k)
        out[remainders[k].second] += 1;
    return out;
}

BudgetPlan reallocate(const UtilizationSnapshot& snapshot, std::uint64_t b_total,
                      std::uint32_t b_min) {
    const std::size_t cells =
        static_cast<std::size_t>(snapshot.num_layers) * snapshot.num_heads;
    if (b_total < static_cast<std::uint64_t>(cells) * b_min)
        throw config_error("total budget " + std::to_string(b_total) +
                           " cannot satisfy floor " + std::to_string(b_min) + " across " +
                           std::to_string(cells) + " heads");

    BudgetPlan plan;
    plan.num_layers = snapshot.num_layers;
    plan.num_heads = snapshot.num_heads;
    plan.total = b_total;
    plan.budget = apportion(real_targets(snapshot, b_total), b_total);

    // Raise short cells to the floor, funding each unit from the currently
    // largest cell. Total is conserved and no funded cell drops below b_min.
    for (std::size_t i = 0; i < cells; ++i) {
        while (plan.budget[i] < b_min) {
            std::size_t donor = cells;
            std::uint32_t best = 0;
            for (std::size_t j = 0; j < cells; ++j) {
                if (j != i && plan.budget[j] > b_min && plan.budget[j] > best) {
                    best = plan.budget[j];
                    donor = j;
                }
            }
            check_internal(donor < cells, "reallocate: no donor available for floor raise");
            plan.budget[donor] -= 1;
            plan.budget[i] += 1;
        }
    }

    std::uint64_t sum = 0;
    for (std::uint32_t b : plan.budget)
        sum += b;
    check_internal(sum == b_total, "reallocate: plan does not conserve the total budget");
    return plan;
}

std::vector<CompressResult> apply_plan(std::span<HeadCacheState> states, const BudgetPlan& plan,
                                       Step t, const PolicyConfig& config) {
    const std::size_t cells = static_cast<std::size_t>(plan.num_layers) * plan.num_heads;
    check_internal(states.size() == cells, "apply_plan: state count mismatch");

    std::vector<CompressResult> evictions(cells);
    for (std::size_t c = 0; c < cells; ++c) {
        HeadCacheState& state = states[c];
        state.budget = plan.budget[c];
        if (state.size() <= state.budget)
            continue;

        // Shrunk head: drop the lowest decayed-CRF entries immediately.
        const std::vector<double> crf_temp = decayed_crf(state, t, config.lambda);
        std::vector<std::size_t> kept = select_top_budget(crf_temp, state.retained,
                                                          state.budget, config.protect_recent);
        std::vector<bool> keep_flag(state.size(), false);
        for (std::size_t i : kept)
            keep_flag[i] = true;

        HeadCacheState next;
        next.budget = state.budget;
        const bool rings = !state.obs_ring.empty();
        for (std::size_t i = 0; i < state.size(); ++i) {
            if (!keep_flag[i]) {
                evictions[c].evicted.push_back({state.retained[i], crf_temp[i]});
                continue;
            }
            next.retained.push_back(state.retained[i]);
            next.crf.push_back(state.crf[i]);
            next.last_hit.push_back(state.last_hit[i]);
            next.aux.push_back(state.aux[i]);
            if (rings)
                next.obs_ring.push_back(std::move(state.obs_ring[i]));
        }
        state = std::move(next);
    }
    return evictions;
}

}  // namespace ckv
