// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "ckv/policy.hpp"

namespace ckv {

// Comparison policies behind the LRFU interface. All of them observe the
// same renormalized restricted scores as LRFU, so comparisons isolate the
// eviction criterion rather than the observation model. Hit-based baselines
// (LRU, LFU) define a hit exactly as LRFU does: membership in the top-p mask.

// Evicts the least recently hit entry. aux = last-hit step.
class LruPolicy final : public EvictionPolicy {
public:
    PolicyKind kind() const override { return PolicyKind::Lru; }
    void append(HeadCacheState& state, Position position, Step t) const override;
    CompressResult compress_step(HeadCacheState& state, std::span<const double> scores, Step t,
                                 const PolicyConfig& config) const override;
};

// Evicts the least frequently hit entry. aux = lifetime hit count (arrival
// included), which makes it the exact lambda = 1 degeneracy of LRFU.
class LfuPolicy final : public EvictionPolicy {
public:
    PolicyKind kind() const override { return PolicyKind::Lfu; }
    void append(HeadCacheState& state, Position position, Step t) const override;
    CompressResult compress_step(HeadCacheState& state, std::span<const double> scores, Step t,
                                 const PolicyConfig& config) const override;
};

// Positional rule: keeps the first sink_size think positions plus the most
// recent (budget - sink_size) ones. No attention bookkeeping.
class SinkWindowPolicy final : public EvictionPolicy {
public:
    PolicyKind kind() const override { return PolicyKind::SinkWindow; }
    CompressResult compress_step(HeadCacheState& state, std::span<const double> scores, Step t,
                                 const PolicyConfig& config) const override;
};

// Evicts the entry with the smallest attention-score sum accumulated over
// all past queries (over the policy's own retained view, as deployed).
class AccumScorePolicy final : public EvictionPolicy {
public:
    PolicyKind kind() const override { return PolicyKind::AccumScore; }
    CompressResult compress_step(HeadCacheState& state, std::span<const double> scores, Step t,
                                 const PolicyConfig& config) const override;
};

// Evicts the entry with the smallest attention-score sum over the trailing
// obs_window queries (per-entry ring buffer).
class ObsWindowPolicy final : public EvictionPolicy {
public:
    PolicyKind kind() const override { return PolicyKind::ObsWindow; }
    void append(HeadCacheState& state, Position position, Step t) const override;
    CompressResult compress_step(HeadCacheState& state, std::span<const double> scores, Step t,
                                 const PolicyConfig& config) const override;
};

}  // namespace ckv
