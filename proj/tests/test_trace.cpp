// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <sstream>

#include "ckv/errors.hpp"
#include "ckv/rng.hpp"
#include "ckv/trace.hpp"
#include "test_helpers.hpp"

using namespace ckv;
using namespace ckv::testing;

namespace {

SyntheticSpec small_spec(std::uint64_t seed) {
    SyntheticSpec spec;
    spec.seed = seed;
    spec.prompt_len = 4;
    spec.think_len = 60;
    spec.answer_len = 8;
    spec.num_layers = 1;
    spec.num_heads = 2;
    return spec;
}

}  // namespace

TEST_CASE("minimal trace round-trips bit-exactly") {
    AttentionTrace trace = build_trace(1, 2, 0, {{1.0}, {0.25, 0.75}});
    REQUIRE(validate_trace(trace).empty());
    const std::string bytes = trace_bytes(trace);
    CHECK(trace_from_bytes(bytes) == trace);
}

TEST_CASE("trace with answer phase preserves phase markers") {
    AttentionTrace trace =
        build_trace(1, 2, 1, {{1.0}, {0.25, 0.75}, {0.1, 0.5, 0.4}});
    const AttentionTrace back = trace_from_bytes(trace_bytes(trace));
    CHECK(back == trace);
    CHECK(back.header.phase_of(0) == Phase::Prompt);
    CHECK(back.header.phase_of(1) == Phase::Think);
    CHECK(back.header.phase_of(3) == Phase::Answer);
}

TEST_CASE("row-sum violation is rejected before writing") {
    AttentionTrace trace = build_trace(1, 2, 0, {{1.0}, {0.25, 0.75}});
    trace.steps[1].scores = {0.4f, 0.5f};  // sums to 0.9
    std::ostringstream os;
    CHECK_THROWS_AS(write_trace(trace, os), io_error);
}

TEST_CASE("validate_trace pinpoints violations") {
    AttentionTrace trace = build_trace(1, 3, 0, {{1.0}, {0.5, 0.5}, {0.2, 0.3, 0.5}});
    CHECK(validate_trace(trace).empty());

    SUBCASE("bad row sum") {
        trace.steps[2].scores = {0.2f, 0.2f, 0.5f};
        auto v = validate_trace(trace);
        REQUIRE(v.size() == 1);
        CHECK(v[0].location.find("position 3") != std::string::npos);
        CHECK(v[0].rule.find("row sums") != std::string::npos);
    }
    SUBCASE("missing record") {
        trace.steps.pop_back();
        auto v = validate_trace(trace);
        REQUIRE(!v.empty());
        CHECK(v.back().rule.find("missing") != std::string::npos);
    }
    SUBCASE("duplicate/out-of-order record") {
        trace.steps[1] = trace.steps[2];
        CHECK(!validate_trace(trace).empty());
    }
}

TEST_CASE("read_trace rejects malformed input") {
    SUBCASE("empty stream") {
        std::istringstream is("");
        CHECK_THROWS_WITH_AS(read_trace(is), doctest::Contains("format error"), io_error);
    }
    SUBCASE("bad magic") {
        std::istringstream is("NOPE....garbage");
        CHECK_THROWS_AS(read_trace(is), io_error);
    }
    SUBCASE("truncated body") {
        AttentionTrace trace = build_trace(1, 3, 0, {{1.0}, {0.5, 0.5}, {0.2, 0.3, 0.5}});
        std::string bytes = trace_bytes(trace);
        bytes.resize(bytes.size() - 7);
        std::istringstream is(bytes);
        CHECK_THROWS_WITH_AS(read_trace(is), doctest::Contains("truncation"), io_error);
    }
    SUBCASE("header layer bound violated by a record") {
        // Text fixture: header declares L=2 but a record references layer 2.
        const std::string text =
            "CKVT,1,2,1,3,1,2,0\n"
            "0,0,1,1.0\n"
            "1,0,1,1.0\n"
            "0,0,2,0.5,0.5\n"
            "2,0,2,0.5,0.5\n";
        std::istringstream is(text);
        CHECK_THROWS_WITH_AS(read_trace(is), doctest::Contains("validation error"), io_error);
    }
}

TEST_CASE("text form is accepted for hand-authored fixtures") {
    const std::string text =
        "CKVT,1,1,1,3,1,2,0\n"
        "0,0,2,0.25,0.75\n"  // out of order on purpose
        "0,0,1,1.0\n";
    std::istringstream is(text);
    const AttentionTrace trace = read_trace(is);
    CHECK(trace.header.num_positions() == 3);
    CHECK(trace.steps.size() == 2);
    CHECK(trace.row(0, 0, 2)[1] == doctest::Approx(0.75));
}

TEST_CASE("round-trip property over random synthetic specs") {
    SplitMix64 rng(2024);
    for (int i = 0; i < 8; ++i) {
        SyntheticSpec spec;
        spec.seed = rng.next_u64();
        spec.prompt_len = rng.next_below(6);
        spec.think_len = 20 + rng.next_below(60);
        spec.answer_len = 1 + rng.next_below(10);
        spec.num_layers = 1 + static_cast<std::uint32_t>(rng.next_below(2));
        spec.num_heads = 1 + static_cast<std::uint32_t>(rng.next_below(3));
        spec.crystal_fraction = 0.1 + 0.4 * rng.next_double();
        spec.noise_scale = rng.next_double();
        spec.heterogeneity = 1.0 + 2.0 * rng.next_double();
        const AttentionTrace trace = generate_synthetic(spec).trace;
        REQUIRE(validate_trace(trace).empty());
        CHECK(trace_from_bytes(trace_bytes(trace)) == trace);
    }
}

TEST_CASE("generated rows sum to one within 1e-9") {
    const SyntheticTrace st = generate_synthetic(small_spec(11));
    for (const StepRecord& rec : st.trace.steps) {
        if (rec.query_position == 0)
            continue;
        double sum = 0.0;
        for (float v : rec.scores)
            sum += v;
        CHECK(std::fabs(sum - 1.0) <= 1e-9);
    }
}

TEST_CASE("generator determinism: identical spec gives identical bytes") {
    SyntheticSpec spec = small_spec(7);
    spec.noise_scale = 0.5;
    const std::string a = trace_bytes(generate_synthetic(spec).trace);
    const std::string b = trace_bytes(generate_synthetic(spec).trace);
    CHECK(a == b);

    spec.seed = 8;
    CHECK(trace_bytes(generate_synthetic(spec).trace) != a);
}

TEST_CASE("planted crystal set equals top-fraction by mean answer attention") {
    // Generator inversion at noise 0: the planted labels must be exactly the
    // top-30% think positions ranked by answer-stage attention.
    SyntheticSpec spec;
    spec.seed = 7;
    spec.prompt_len = 16;
    spec.think_len = 400;
    spec.answer_len = 40;
    spec.crystal_fraction = 0.3;
    spec.noise_scale = 0.0;
    spec.num_layers = 1;
    spec.num_heads = 2;
    const SyntheticTrace st = generate_synthetic(spec);
    for (std::uint32_t head = 0; head < spec.num_heads; ++head) {
        const auto& planted = st.labels.at(0, head);
        CHECK(planted.size() == 120);
        const auto oracle =
            top_k_by_mean_answer_attention(st.trace, 0, head, planted.size());
        CHECK(planted == oracle);
    }
}

TEST_CASE("slip attention halves per half-life step") {
    SyntheticSpec spec = small_spec(3);
    spec.noise_scale = 0.0;
    spec.slip_halflife = 1.0;
    spec.num_heads = 1;
    const SyntheticTrace st = generate_synthetic(spec);
    const TraceHeader& h = st.trace.header;

    std::vector<bool> is_crystal(h.num_positions(), false);
    for (Position p : st.labels.at(0, 0))
        is_crystal[p] = true;

    // Pick a late think row and compare two slip positions: the ratio of
    // their scores must be 2^(gap) regardless of normalization.
    const Position t = h.think_end() - 1;
    auto row = st.trace.row(0, 0, t);
    std::vector<Position> slips;
    for (Position s = h.think_start(); s < t; ++s)
        if (!is_crystal[s] && row[s] > 1e-9f)
            slips.push_back(s);
    REQUIRE(slips.size() >= 2);
    const Position a = slips[slips.size() - 1];
    const Position b = slips[slips.size() - 2];
    const double expected = std::pow(2.0, static_cast<double>(a - b));
    CHECK(static_cast<double>(row[a]) / row[b] == doctest::Approx(expected).epsilon(1e-4));
}

TEST_CASE("infeasible synthetic specs are rejected") {
    SyntheticSpec spec = small_spec(1);
    SUBCASE("crystal fraction too small for think length") {
        spec.think_len = 2;
        spec.crystal_fraction = 0.3;  // 0.6 positions -> < 1
        CHECK_THROWS_AS(generate_synthetic(spec), config_error);
    }
    SUBCASE("bad answer mass") {
        spec.crystal_answer_mass = 0.0;
        CHECK_THROWS_AS(generate_synthetic(spec), config_error);
    }
    SUBCASE("bad heterogeneity") {
        spec.heterogeneity = 0.5;
        CHECK_THROWS_AS(generate_synthetic(spec), config_error);
    }
}

TEST_CASE("label sidecar round-trips") {
    const SyntheticTrace st = generate_synthetic(small_spec(5));
    const std::string path = "test_labels_tmp.json";
    write_labels_file(st.labels, path);
    const PlantedLabels back = read_labels_file(path);
    CHECK(back.num_layers == st.labels.num_layers);
    CHECK(back.num_heads == st.labels.num_heads);
    CHECK(back.crystal == st.labels.crystal);
    std::remove(path.c_str());
}
