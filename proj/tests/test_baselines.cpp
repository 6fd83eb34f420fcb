// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>

#include "ckv/baselines.hpp"
#include "ckv/errors.hpp"
#include "ckv/replay.hpp"
#include "ckv/rng.hpp"
#include "test_helpers.hpp"

using namespace ckv;
using namespace ckv::testing;

namespace {

// Drives one policy over consecutive positions with the given visible rows.
HeadCacheState drive(const EvictionPolicy& policy, const PolicyConfig& config,
                     std::uint32_t budget, Position count) {
    HeadCacheState state;
    state.budget = budget;
    for (Position t = 0; t < count; ++t) {
        const std::vector<double> scores(state.size(), 0.0);
        policy.append(state, t, t);
        policy.compress_step(state, scores, t, config);
    }
    return state;
}

SyntheticSpec random_spec(SplitMix64& rng) {
    SyntheticSpec spec;
    spec.seed = rng.next_u64();
    spec.prompt_len = rng.next_below(8);
    spec.think_len = 40 + rng.next_below(120);
    spec.answer_len = 4 + rng.next_below(12);
    spec.num_layers = 1;
    spec.num_heads = 1 + static_cast<std::uint32_t>(rng.next_below(2));
    spec.crystal_fraction = 0.15 + 0.3 * rng.next_double();
    spec.crystal_gap_mean = 3.0 + 8.0 * rng.next_double();
    spec.slip_halflife = 1.0 + 5.0 * rng.next_double();
    spec.noise_scale = rng.next_double() * 0.5;
    return spec;
}

std::vector<std::vector<Position>> boundary_sets(const RunLog& log) {
    std::vector<std::vector<Position>> out;
    for (const BoundaryCell& cell : log.boundary)
        out.push_back(cell.retained);
    return out;
}

RunLog run_policy(const AttentionTrace& trace, PolicyKind kind, double lambda,
                  std::uint32_t budget) {
    RunConfig config;
    config.policy.policy = kind;
    config.policy.lambda = lambda;
    config.policy.budget_mode = BudgetMode::Fixed(budget);
    config.policy.b_min = 1;
    return run_simulation(trace, config);
}

}  // namespace

TEST_CASE("sink+window keeps the initial sink and the most recent window") {
    PolicyConfig config;
    config.policy = PolicyKind::SinkWindow;
    config.sink_size = 2;
    SinkWindowPolicy policy;
    const HeadCacheState state = drive(policy, config, 5, 10);
    CHECK(state.retained == std::vector<Position>{0, 1, 7, 8, 9});
}

TEST_CASE("sink size must stay below the budget") {
    PolicyConfig config;
    config.policy = PolicyKind::SinkWindow;
    config.sink_size = 5;
    SinkWindowPolicy policy;
    CHECK_THROWS_AS(drive(policy, config, 5, 10), config_error);
}

TEST_CASE("select_policy builds the configured policy and rejects bad configs") {
    PolicyConfig config;
    config.policy = PolicyKind::Lrfu;
    CHECK(select_policy(config)->kind() == PolicyKind::Lrfu);

    config.policy = PolicyKind::ObsWindow;
    config.obs_window = 0;
    CHECK_THROWS_AS(select_policy(config), config_error);
    config.obs_window = 8;
    CHECK(select_policy(config)->kind() == PolicyKind::ObsWindow);
}

TEST_CASE("LFU baseline equals LRFU at lambda = 1 on randomized traces") {
    SplitMix64 rng(555);
    for (int iter = 0; iter < 6; ++iter) {
        const SyntheticSpec spec = random_spec(rng);
        const AttentionTrace trace = generate_synthetic(spec).trace;
        const std::uint32_t budget = 8 + static_cast<std::uint32_t>(rng.next_below(40));
        const RunLog lrfu = run_policy(trace, PolicyKind::Lrfu, 1.0, budget);
        const RunLog lfu = run_policy(trace, PolicyKind::Lfu, 1.0, budget);
        CHECK(boundary_sets(lrfu) == boundary_sets(lfu));
    }
}

TEST_CASE("LRU baseline equals LRFU at lambda = 1e-6 on randomized traces") {
    SplitMix64 rng(556);
    for (int iter = 0; iter < 6; ++iter) {
        const SyntheticSpec spec = random_spec(rng);
        const AttentionTrace trace = generate_synthetic(spec).trace;
        // Budgets stay below ~50 so lambda^gap never underflows (an entry can
        // go unhit for at most `budget` steps before eviction).
        const std::uint32_t budget = 8 + static_cast<std::uint32_t>(rng.next_below(40));
        const RunLog lrfu = run_policy(trace, PolicyKind::Lrfu, 1e-6, budget);
        const RunLog lru = run_policy(trace, PolicyKind::Lru, 1e-6, budget);
        CHECK(boundary_sets(lrfu) == boundary_sets(lru));
    }
}

TEST_CASE("accumulated score hoards a long-lived slip that LRFU expires") {
    // 30 think tokens, one head. Position 0 receives strong attention for the
    // first half then truly fades; position 15 is hit intermittently forever.
    // The accumulated sum of position 0 stays dominant, so AccumScore keeps
    // it while LRFU has expired it by the boundary.
    const std::uint64_t think_len = 30;
    std::vector<std::vector<double>> rows;
    for (std::uint64_t i = 0; i < think_len + 2; ++i) {
        const Position q = static_cast<Position>(i);
        std::vector<double> w(q, 0.0);
        for (Position s = 0; s < q; ++s) {
            const double age = static_cast<double>(q - s);
            w[s] = 0.0005 + std::pow(0.25, age);  // sharply local streaming background
        }
        if (q >= 1 && q <= 15)
            w[0] = 10.0;  // early heavy streak on position 0
        else if (q >= 1)
            w[0] = 0.0001;  // afterwards position 0 is ignored
        if (q >= 16 && (q - 16) % 3 == 0)
            w[15] = 6.0;  // intermittent hits on position 15, into the answer
        rows.push_back(std::move(w));
    }
    AttentionTrace trace = build_trace(0, think_len, 2, rows);
    REQUIRE(validate_trace(trace).empty());

    const std::uint32_t budget = 6;
    const RunLog accum = run_policy(trace, PolicyKind::AccumScore, 0.6, budget);
    const RunLog lrfu = run_policy(trace, PolicyKind::Lrfu, 0.6, budget);

    const auto& accum_set = accum.boundary[0].retained;
    const auto& lrfu_set = lrfu.boundary[0].retained;
    CHECK(std::count(accum_set.begin(), accum_set.end(), 0) == 1);
    CHECK(std::count(lrfu_set.begin(), lrfu_set.end(), 0) == 0);
    CHECK(std::count(lrfu_set.begin(), lrfu_set.end(), 15) == 1);
    CHECK(accum_set != lrfu_set);
}

TEST_CASE("observation window forgets attention older than the window") {
    PolicyConfig config;
    config.policy = PolicyKind::ObsWindow;
    config.obs_window = 2;
    ObsWindowPolicy policy;

    HeadCacheState state;
    state.budget = 2;
    auto step = [&](Position t, std::vector<double> scores) {
        policy.append(state, t, t);
        policy.compress_step(state, scores, t, config);
    };
    step(0, {});
    step(1, {1.0});        // entry 0 attended
    step(2, {1.0, 0.0});   // entry 0 attended again -> retained {0, 2}
    CHECK(state.retained == std::vector<Position>{0, 2});
    step(3, {0.0, 1.0});   // attention moves to entry 2 -> still {0, 2}
    CHECK(state.retained == std::vector<Position>{0, 2});
    step(4, {0.0, 1.0});
    // Entry 0's lifetime attention (2.0) dwarfs entry 2's, but the trailing
    // 2-query window now holds zeros for it, so it loses to the newborn.
    CHECK(state.retained == std::vector<Position>{2, 4});
}

TEST_CASE("all policies respect the budget bound after compression") {
    SplitMix64 rng(31);
    const SyntheticSpec spec = random_spec(rng);
    const AttentionTrace trace = generate_synthetic(spec).trace;
    for (PolicyKind kind : {PolicyKind::Lrfu, PolicyKind::Lru, PolicyKind::Lfu,
                            PolicyKind::SinkWindow, PolicyKind::AccumScore,
                            PolicyKind::ObsWindow}) {
        const RunLog log = run_policy(trace, kind, 0.6, 10);
        for (const BoundaryCell& cell : log.boundary)
            CHECK(cell.retained.size() <= cell.budget);
    }
}

TEST_CASE("policies are deterministic given trace and config") {
    SplitMix64 rng(32);
    const SyntheticSpec spec = random_spec(rng);
    const AttentionTrace trace = generate_synthetic(spec).trace;
    for (PolicyKind kind : {PolicyKind::Lrfu, PolicyKind::AccumScore, PolicyKind::ObsWindow}) {
        const RunLog a = run_policy(trace, kind, 0.6, 12);
        const RunLog b = run_policy(trace, kind, 0.6, 12);
        CHECK(boundary_sets(a) == boundary_sets(b));
    }
}
