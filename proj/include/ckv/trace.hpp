// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ckv {

// Decode positions fit comfortably in 32 bits at the scales this simulator
// targets; timestamps reuse the position clock.
using Position = std::uint32_t;
using Step = std::uint32_t;

enum class Phase : std::uint8_t { Prompt = 0, Think = 1, Answer = 2 };

constexpr std::uint32_t kTraceSchemaVersion = 1;
constexpr char kTraceMagic[4] = {'C', 'K', 'V', 'T'};

// Phases are contiguous runs (prompt, then think, then answer), so the
// per-position phase map reduces to three run lengths. Think is never empty.
struct TraceHeader {
    std::uint32_t schema_version = kTraceSchemaVersion;
    std::uint32_t num_layers = 0;
    std::uint32_t num_heads = 0;
    std::uint64_t prompt_len = 0;
    std::uint64_t think_len = 0;
    std::uint64_t answer_len = 0;

    std::uint64_t num_positions() const { return prompt_len + think_len + answer_len; }
    Position think_start() const { return static_cast<Position>(prompt_len); }
    Position think_end() const { return static_cast<Position>(prompt_len + think_len); }

    Phase phase_of(Position pos) const {
        if (pos < prompt_len)
            return Phase::Prompt;
        if (pos < prompt_len + think_len)
            return Phase::Think;
        return Phase::Answer;
    }

    bool operator==(const TraceHeader&) const = default;
};

// Attention row of one (layer, head) at one decode step. Scores cover
// positions 0..query_position-1 and are post-softmax probabilities; they are
// stored at single precision, which is also the on-disk width, so traces
// round-trip bit-exactly.
struct StepRecord {
    std::uint32_t layer = 0;
    std::uint32_t head = 0;
    Position query_position = 0;
    std::vector<float> scores;

    bool operator==(const StepRecord&) const = default;
};

// Complete trace: one StepRecord per (layer, head) per think/answer position,
// sorted by (query_position, layer, head). Prompt positions carry no records.
// Immutable after construction; safe to share across threads.
struct AttentionTrace {
    TraceHeader header;
    std::vector<StepRecord> steps;

    // Row of (layer, head) at non-prompt position pos. Assumes the canonical
    // complete layout (validated on read / after generation).
    std::span<const float> row(std::uint32_t layer, std::uint32_t head, Position pos) const;
    const StepRecord& record(std::uint32_t layer, std::uint32_t head, Position pos) const;

    bool operator==(const AttentionTrace&) const = default;
};

struct Violation {
    std::string location;  // e.g. "(layer 0, head 1, position 5)"
    std::string rule;

    std::string str() const { return location + ": " + rule; }
};

// Empty result iff every type invariant holds. Violations are data, not errors.
std::vector<Violation> validate_trace(const AttentionTrace& trace);

// ---- serialization ----------------------------------------------------
//
// Binary layout (little-endian):
//   "CKVT" | u32 schema_version | u32 L | u32 H | u64 num_positions
//          | u64 prompt_len | u64 think_len | u64 answer_len
//   records sorted by (query_position, layer, head), each:
//   u32 layer | u32 head | u64 query_position | u64 row_len | f32[row_len]
//
// A comma-separated text form is accepted on read for hand-authored fixtures:
//   CKVT,<version>,<L>,<H>,<num_positions>,<prompt>,<think>,<answer>
//   <layer>,<head>,<query_position>,<s0>,<s1>,...

// Requires a trace that passes validate_trace; returns bytes written.
std::size_t write_trace(const AttentionTrace& trace, std::ostream& sink);

// Parses either format, validates, and returns the trace. Throws io_error
// with position context on malformed/truncated/inconsistent input.
AttentionTrace read_trace(std::istream& source);

// File variants. Writes are atomic (temp file + rename).
void write_trace_file(const AttentionTrace& trace, const std::string& path);
AttentionTrace read_trace_file(const std::string& path);

// Streaming binary reader: records are consumable in (query_position, layer,
// head) order without materializing the whole trace.
class TraceReader {
public:
    explicit TraceReader(std::istream& source);

    const TraceHeader& header() const { return header_; }

    // Next record, or nullopt at a clean end of stream.
    std::optional<StepRecord> next();

private:
    std::istream& source_;
    TraceHeader header_;
    std::uint64_t declared_positions_ = 0;
    bool have_last_ = false;
    std::uint32_t last_layer_ = 0;
    std::uint32_t last_head_ = 0;
    Position last_pos_ = 0;
};

// ---- synthetic generation ---------------------------------------------

// Parameters of the planted-pattern generator. Crystal positions receive
// intermittent spikes that persist through the whole think stage; every other
// think position gets attention that halves every slip_halflife steps after
// creation. Answer queries direct crystal_answer_mass at the crystal set.
struct SyntheticSpec {
    std::uint64_t seed = 7;
    std::uint64_t prompt_len = 16;
    std::uint64_t think_len = 400;
    std::uint64_t answer_len = 40;
    double crystal_fraction = 0.3;    // in (0, 0.5]
    double crystal_gap_mean = 10.0;   // mean steps between crystal hit events
    double slip_halflife = 1.0;       // steps for slip attention to halve
    double crystal_answer_mass = 0.8; // in (0, 1]
    double noise_scale = 0.0;
    std::uint32_t num_layers = 1;
    std::uint32_t num_heads = 2;
    double heterogeneity = 1.0;       // >= 1; scales crystal_fraction across heads
};

// Planted crystal positions per (layer, head), sorted ascending.
struct PlantedLabels {
    std::uint32_t num_layers = 0;
    std::uint32_t num_heads = 0;
    std::vector<std::vector<Position>> crystal;  // indexed layer * num_heads + head

    const std::vector<Position>& at(std::uint32_t layer, std::uint32_t head) const {
        return crystal[layer * num_heads + head];
    }
};

struct SyntheticTrace {
    AttentionTrace trace;
    PlantedLabels labels;
};

// Deterministic for a fixed spec (identical spec -> identical bytes).
// Throws config_error on an infeasible spec.
SyntheticTrace generate_synthetic(const SyntheticSpec& spec);

// Label sidecar (JSON) written next to generated traces.
void write_labels_file(const PlantedLabels& labels, const std::string& path);
PlantedLabels read_labels_file(const std::string& path);

// FNV-1a over the serialized bytes; used to tie run logs and reports to the
// exact trace they came from.
std::uint64_t trace_fingerprint(const AttentionTrace& trace);

}  // namespace ckv
