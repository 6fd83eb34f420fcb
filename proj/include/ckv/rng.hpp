// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>

namespace ckv {

// Deterministic 64-bit generator (splitmix64). The standard <random>
// distributions are implementation-defined, so every draw used for trace
// generation goes through this class to keep outputs bit-identical across
// compilers and standard libraries.
class SplitMix64 {
public:
    explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1).
    double next_double() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // Uniform integer in [0, bound). bound must be > 0.
    std::uint64_t next_below(std::uint64_t bound) {
        // Modulo bias is < 2^-40 for the bounds used here (all << 2^24).
        return next_u64() % bound;
    }

    // Geometric number of failures before a success, success probability p.
    // Mean (1-p)/p. p must be in (0, 1].
    std::uint64_t next_geometric(double p) {
        if (p >= 1.0)
            return 0;
        std::uint64_t k = 0;
        while (next_double() >= p && k < 1u << 20)
            ++k;
        return k;
    }

    // Derives an independent stream for a subcomponent.
    SplitMix64 fork(std::uint64_t salt) {
        return SplitMix64(next_u64() ^ (salt * 0xd1342543de82ef95ULL + 0x2545f4914f6cdd1dULL));
    }

private:
    std::uint64_t state_;
};

}  // namespace ckv
