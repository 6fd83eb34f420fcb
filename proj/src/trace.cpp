// SPDX-License-Identifier: Apache-2.0

#include "ckv/trace.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <string>
#include <filesystem>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "ckv/errors.hpp"
#include "ckv/rng.hpp"

namespace ckv {

namespace {

constexpr double kRowSumTolerance = 1e-6;

std::string loc(std::uint32_t layer, std::uint32_t head, Position pos) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "(layer %u, head %u, position %u)", layer, head, pos);
    return buf;
}

double row_sum(std::span<const float> row) {
    double s = 0.0;
    for (float v : row)
        s += v;
    return s;
}

// Index of the record for (layer, head, pos) in the canonical layout.
std::size_t record_index(const TraceHeader& h, std::uint32_t layer, std::uint32_t head,
                         Position pos) {
    const std::uint64_t step = pos - h.prompt_len;
    return static_cast<std::size_t>(step) * h.num_layers * h.num_heads +
           static_cast<std::size_t>(layer) * h.num_heads + head;
}

}  // namespace

std::span<const float> AttentionTrace::row(std::uint32_t layer, std::uint32_t head,
                                           Position pos) const {
    return record(layer, head, pos).scores;
}

const StepRecord& AttentionTrace::record(std::uint32_t layer, std::uint32_t head,
                                         Position pos) const {
    check_internal(pos >= header.prompt_len && pos < header.num_positions(),
                   "trace row lookup outside think/answer span");
    const std::size_t idx = record_index(header, layer, head, pos);
    check_internal(idx < steps.size(), "trace row index out of range");
    const StepRecord& rec = steps[idx];
    check_internal(rec.layer == layer && rec.head == head && rec.query_position == pos,
                   "trace layout is not canonical; validate_trace first");
    return rec;
}

std::vector<Violation> validate_trace(const AttentionTrace& trace) {
    std::vector<Violation> out;
    const TraceHeader& h = trace.header;

    if (h.num_layers < 1)
        out.push_back({"header", "num_layers must be >= 1"});
    if (h.num_heads < 1)
        out.push_back({"header", "num_heads must be >= 1"});
    if (h.think_len < 1)
        out.push_back({"header", "think phase must be non-empty"});
    if (h.schema_version != kTraceSchemaVersion)
        out.push_back({"header", "unsupported schema_version"});
    if (!out.empty())
        return out;

    const std::uint64_t expected =
        (h.think_len + h.answer_len) * h.num_layers * h.num_heads;
    if (trace.steps.size() != expected) {
        out.push_back({"steps", "record count " + std::to_string(trace.steps.size()) +
                                    " does not match expected " + std::to_string(expected)});
    }

    // Walk the canonical (query_position, layer, head) layout and report every
    // slot that is missing, duplicated or out of place.
    std::size_t i = 0;
    for (Position pos = h.think_start(); pos < h.num_positions(); ++pos) {
        for (std::uint32_t layer = 0; layer < h.num_layers; ++layer) {
            for (std::uint32_t head = 0; head < h.num_heads; ++head) {
                if (i >= trace.steps.size()) {
                    out.push_back({loc(layer, head, pos), "missing record"});
                    continue;
                }
                const StepRecord& rec = trace.steps[i++];
                if (rec.layer >= h.num_layers || rec.head >= h.num_heads) {
                    out.push_back({loc(rec.layer, rec.head, rec.query_position),
                                   "layer/head index out of bounds"});
                    continue;
                }
                if (rec.layer != layer || rec.head != head || rec.query_position != pos) {
                    out.push_back({loc(rec.layer, rec.head, rec.query_position),
                                   "record out of canonical order; expected " +
                                       loc(layer, head, pos)});
                    continue;
                }
                if (rec.scores.size() != rec.query_position) {
                    out.push_back({loc(layer, head, pos),
                                   "scores length " + std::to_string(rec.scores.size()) +
                                       " != query_position"});
                    continue;
                }
                bool negative = false;
                for (float v : rec.scores) {
                    if (!(v >= 0.0f)) {
                        negative = true;
                        break;
                    }
                }
                if (negative) {
                    out.push_back({loc(layer, head, pos), "negative or NaN score"});
                    continue;
                }
                if (pos > 0) {
                    const double s = row_sum(rec.scores);
                    if (std::fabs(s - 1.0) > kRowSumTolerance) {
                        out.push_back({loc(layer, head, pos),
                                       "row sums to " + std::to_string(s) + ", expected 1"});
                    }
                }
            }
        }
    }
    return out;
}

// ---- binary serialization ----------------------------------------------

namespace {

template <typename T>
void put(std::ostream& os, T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
bool get(std::istream& is, T& value) {
    static_assert(std::is_trivially_copyable_v<T>);
    is.read(reinterpret_cast<char*>(&value), sizeof(T));
    return is.gcount() == static_cast<std::streamsize>(sizeof(T));
}

void write_header(std::ostream& os, const TraceHeader& h) {
    os.write(kTraceMagic, 4);
    put<std::uint32_t>(os, h.schema_version);
    put<std::uint32_t>(os, h.num_layers);
    put<std::uint32_t>(os, h.num_heads);
    put<std::uint64_t>(os, h.num_positions());
    put<std::uint64_t>(os, h.prompt_len);
    put<std::uint64_t>(os, h.think_len);
    put<std::uint64_t>(os, h.answer_len);
}

constexpr std::size_t kHeaderBytes = 4 + 4 + 4 + 4 + 8 + 8 + 8 + 8;

TraceHeader read_binary_header(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (is.gcount() != 4 || std::memcmp(magic, kTraceMagic, 4) != 0)
        throw io_error("format error: missing CKVT magic");
    TraceHeader h;
    std::uint64_t declared = 0;
    if (!get(is, h.schema_version) || !get(is, h.num_layers) || !get(is, h.num_heads) ||
        !get(is, declared) || !get(is, h.prompt_len) || !get(is, h.think_len) ||
        !get(is, h.answer_len))
        throw io_error("format error: truncated header");
    if (h.schema_version != kTraceSchemaVersion)
        throw io_error("format error: unsupported schema_version " +
                       std::to_string(h.schema_version));
    if (h.num_layers < 1 || h.num_heads < 1 || h.think_len < 1)
        throw io_error("format error: header declares empty model or think phase");
    if (declared != h.num_positions())
        throw io_error("format error: num_positions does not match phase run lengths");
    return h;
}

}  // namespace

std::size_t write_trace(const AttentionTrace& trace, std::ostream& sink) {
    auto violations = validate_trace(trace);
    if (!violations.empty())
        throw io_error("refusing to write invalid trace: " + violations.front().str());

    write_header(sink, trace.header);
    std::size_t bytes = kHeaderBytes;
    for (const StepRecord& rec : trace.steps) {
        put<std::uint32_t>(sink, rec.layer);
        put<std::uint32_t>(sink, rec.head);
        put<std::uint64_t>(sink, rec.query_position);
        put<std::uint64_t>(sink, rec.scores.size());
        if (!rec.scores.empty())
            sink.write(reinterpret_cast<const char*>(rec.scores.data()),
                       static_cast<std::streamsize>(rec.scores.size() * sizeof(float)));
        bytes += 4 + 4 + 8 + 8 + rec.scores.size() * sizeof(float);
        if (!sink)
            throw io_error("I/O error writing record at position " +
                           std::to_string(rec.query_position));
    }
    sink.flush();
    if (!sink)
        throw io_error("I/O error flushing trace stream");
    return bytes;
}

TraceReader::TraceReader(std::istream& source) : source_(source) {
    header_ = read_binary_header(source_);
    declared_positions_ = header_.num_positions();
}

std::optional<StepRecord> TraceReader::next() {
    StepRecord rec;
    if (!get(source_, rec.layer)) {
        if (source_.eof())
            return std::nullopt;
        throw io_error("truncation error: stream failed after position " +
                       std::to_string(have_last_ ? last_pos_ : 0));
    }
    std::uint64_t qpos = 0, row_len = 0;
    if (!get(source_, rec.head) || !get(source_, qpos) || !get(source_, row_len))
        throw io_error("truncation error: partial record preamble after position " +
                       std::to_string(have_last_ ? last_pos_ : 0));
    if (qpos >= declared_positions_ || row_len != qpos)
        throw io_error("validation error at " + loc(rec.layer, rec.head,
                                                    static_cast<Position>(qpos)) +
                       ": bad query_position/row length");
    rec.query_position = static_cast<Position>(qpos);
    rec.scores.resize(row_len);
    if (row_len > 0) {
        source_.read(reinterpret_cast<char*>(rec.scores.data()),
                     static_cast<std::streamsize>(row_len * sizeof(float)));
        if (source_.gcount() != static_cast<std::streamsize>(row_len * sizeof(float)))
            throw io_error("truncation error: incomplete row; last good position " +
                           std::to_string(have_last_ ? last_pos_ : 0));
    }
    if (have_last_) {
        const auto prev = std::tuple(last_pos_, last_layer_, last_head_);
        const auto cur = std::tuple(rec.query_position, rec.layer, rec.head);
        if (cur <= prev)
            throw io_error("validation error at " +
                           loc(rec.layer, rec.head, rec.query_position) +
                           ": records not sorted by (position, layer, head)");
    }
    have_last_ = true;
    last_layer_ = rec.layer;
    last_head_ = rec.head;
    last_pos_ = rec.query_position;
    return rec;
}

// ---- text form -----------------------------------------------------------

namespace {

AttentionTrace read_text_trace(std::istream& is) {
    std::string line;
    if (!std::getline(is, line))
        throw io_error("format error: empty stream");

    AttentionTrace trace;
    {
        std::istringstream ls(line);
        std::string magic;
        std::uint64_t declared = 0;
        char c;
        if (!std::getline(ls, magic, ',') || magic != "CKVT")
            throw io_error("format error: text header must start with CKVT");
        TraceHeader& h = trace.header;
        if (!(ls >> h.schema_version >> c >> h.num_layers >> c >> h.num_heads >> c >>
              declared >> c >> h.prompt_len >> c >> h.think_len >> c >> h.answer_len))
            throw io_error("format error: malformed text header");
        if (declared != h.num_positions())
            throw io_error("format error: num_positions does not match phase run lengths");
    }

    std::size_t line_no = 1;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty())
            continue;
        std::istringstream ls(line);
        StepRecord rec;
        char c;
        std::uint64_t qpos = 0;
        if (!(ls >> rec.layer >> c >> rec.head >> c >> qpos))
            throw io_error("format error: malformed record on line " + std::to_string(line_no));
        rec.query_position = static_cast<Position>(qpos);
        float v;
        while (ls >> c >> v)
            rec.scores.push_back(v);
        trace.steps.push_back(std::move(rec));
    }

    // Hand-authored fixtures may list records in any order.
    std::stable_sort(trace.steps.begin(), trace.steps.end(),
                     [](const StepRecord& a, const StepRecord& b) {
                         return std::tuple(a.query_position, a.layer, a.head) <
                                std::tuple(b.query_position, b.layer, b.head);
                     });
    return trace;
}

}  // namespace

AttentionTrace read_trace(std::istream& source) {
    // Both forms start with "CKVT"; byte 4 is ',' only in the text form.
    char probe[5] = {0, 0, 0, 0, 0};
    source.read(probe, 5);
    const std::streamsize got = source.gcount();
    if (got <= 0)
        throw io_error("format error: empty stream");
    source.clear();
    source.seekg(0);

    AttentionTrace trace;
    if (got == 5 && std::memcmp(probe, kTraceMagic, 4) == 0 && probe[4] != ',') {
        TraceReader reader(source);
        trace.header = reader.header();
        while (auto rec = reader.next())
            trace.steps.push_back(std::move(*rec));
    } else {
        trace = read_text_trace(source);
    }

    auto violations = validate_trace(trace);
    if (!violations.empty())
        throw io_error("validation error at " + violations.front().location + ": " +
                       violations.front().rule +
                       (violations.size() > 1
                            ? " (+" + std::to_string(violations.size() - 1) + " more)"
                            : ""));
    return trace;
}

void write_trace_file(const AttentionTrace& trace, const std::string& path) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os)
            throw io_error("I/O error: cannot open " + tmp + " for writing");
        write_trace(trace, os);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec)
        throw io_error("I/O error: cannot rename " + tmp + " to " + path);
}

AttentionTrace read_trace_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is)
        throw io_error("I/O error: cannot open " + path);
    return read_trace(is);
}

std::uint64_t trace_fingerprint(const AttentionTrace& trace) {
    std::ostringstream os(std::ios::binary);
    write_trace(trace, os);
    const std::string buf = os.str();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : buf) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// ---- synthetic generation -------------------------------------------------

namespace {

// Snaps a quantized probability row so its double-precision sum lands within
// 1e-12 of 1. Works in single-ulp-safe nudges on elements large enough that
// the relative perturbation stays tiny.
void repair_row_sum(std::vector<float>& row) {
    if (row.empty())
        return;
    for (int pass = 0; pass < 128; ++pass) {
        double sum = 0.0;
        for (float v : row)
            sum += v;
        const double resid = 1.0 - sum;
        if (std::fabs(resid) <= 1e-12)
            return;
        // Smallest positive element at least 4x the residual keeps the nudge
        // representable and the relative change negligible.
        std::size_t target = row.size();
        float best = std::numeric_limits<float>::max();
        for (std::size_t i = 0; i < row.size(); ++i) {
            if (row[i] >= 4.0 * std::fabs(resid) && row[i] < best) {
                best = row[i];
                target = i;
            }
        }
        if (target == row.size()) {
            target = static_cast<std::size_t>(
                std::max_element(row.begin(), row.end()) - row.begin());
        }
        const double adjusted = static_cast<double>(row[target]) + resid;
        if (adjusted <= 0.0)
            return;  // pathological row; validator tolerance still covers it
        row[target] = static_cast<float>(adjusted);
    }
}

std::vector<float> finalize_row(std::vector<double>& weights) {
    double total = 0.0;
    for (double w : weights)
        total += w;
    std::vector<float> out(weights.size());
    if (total <= 0.0)
        return out;  // caller guarantees this only happens for empty spans
    for (std::size_t i = 0; i < weights.size(); ++i)
        out[i] = static_cast<float>(weights[i] / total);
    repair_row_sum(out);
    return out;
}

// Pattern constants, fixed after calibration on the default spec. Crystal
// events are bursts of 1..kSpikeBurstMax consecutive hits at kSpikeWeight;
// slip positions additionally receive sparse one-step re-touches (rate per
// eligible position per step, ages 3..150) at the same weight. Re-touches
// are the locally misleading references that make recency-only ranking
// overvalue expired entries.
constexpr double kSpikeWeight = 4.0;
constexpr Position kSpikeBurstMax = 3;
constexpr double kRetouchRate = 0.0175;
constexpr Position kRetouchMinAge = 3;
constexpr Position kRetouchMaxAge = 150;

void validate_spec(const SyntheticSpec& spec) {
    if (spec.num_layers < 1 || spec.num_heads < 1)
        throw config_error("synthetic spec: num_layers and num_heads must be >= 1");
    if (spec.think_len < 1)
        throw config_error("synthetic spec: think_len must be >= 1");
    if (!(spec.crystal_fraction > 0.0 && spec.crystal_fraction <= 0.5))
        throw config_error("synthetic spec: crystal_fraction must be in (0, 0.5]");
    if (spec.crystal_fraction * static_cast<double>(spec.think_len) < 1.0)
        throw config_error("synthetic spec: crystal_fraction * think_len must be >= 1");
    if (!(spec.crystal_answer_mass > 0.0 && spec.crystal_answer_mass <= 1.0))
        throw config_error("synthetic spec: crystal_answer_mass must be in (0, 1]");
    if (spec.noise_scale < 0.0)
        throw config_error("synthetic spec: noise_scale must be >= 0");
    if (spec.heterogeneity < 1.0)
        throw config_error("synthetic spec: heterogeneity must be >= 1");
    if (spec.crystal_gap_mean < 1.0)
        throw config_error("synthetic spec: crystal_gap_mean must be >= 1");
    if (spec.slip_halflife <= 0.0)
        throw config_error("synthetic spec: slip_halflife must be > 0");
}

}  // namespace

SyntheticTrace generate_synthetic(const SyntheticSpec& spec) {
    validate_spec(spec);

    SyntheticTrace out;
    TraceHeader& h = out.trace.header;
    h.num_layers = spec.num_layers;
    h.num_heads = spec.num_heads;
    h.prompt_len = spec.prompt_len;
    h.think_len = spec.think_len;
    h.answer_len = spec.answer_len;

    const Position think_start = h.think_start();
    const Position think_end = h.think_end();
    const Position total = static_cast<Position>(h.num_positions());
    const std::uint32_t num_cells = spec.num_layers * spec.num_heads;

    out.labels.num_layers = spec.num_layers;
    out.labels.num_heads = spec.num_heads;
    out.labels.crystal.resize(num_cells);

    out.trace.steps.resize(static_cast<std::size_t>(h.think_len + h.answer_len) * num_cells);

    SplitMix64 root(spec.seed);
    std::vector<SplitMix64> head_rng;
    head_rng.reserve(num_cells);
    for (std::uint32_t g = 0; g < num_cells; ++g)
        head_rng.push_back(root.fork(g + 1));

    for (std::uint32_t layer = 0; layer < spec.num_layers; ++layer) {
        for (std::uint32_t head = 0; head < spec.num_heads; ++head) {
            const std::uint32_t g = layer * spec.num_heads + head;
            SplitMix64& rng = head_rng[g];

            // Per-head crystal fraction; head scales span [1/heterogeneity, 1]
            // geometrically, so heterogeneous specs mix crystal-poor heads
            // (whose budget is mostly wasted) with crystal-rich ones.
            double scale = 1.0;
            if (num_cells > 1 && spec.heterogeneity > 1.0)
                scale = std::pow(spec.heterogeneity,
                                 static_cast<double>(g) / static_cast<double>(num_cells - 1) -
                                     1.0);
            const double frac = std::min(spec.crystal_fraction * scale, 0.5);
            const std::uint64_t count = std::max<std::uint64_t>(
                1, std::min<std::uint64_t>(
                       static_cast<std::uint64_t>(frac * static_cast<double>(spec.think_len)),
                       spec.think_len - (spec.think_len > 1 ? 1 : 0)));
            if (count == 0 && spec.crystal_answer_mass >= 1.0)
                throw config_error("synthetic spec: no crystal positions to carry answer mass");

            // Partial Fisher-Yates pick of `count` distinct think positions.
            std::vector<Position> pool(spec.think_len);
            for (std::uint64_t i = 0; i < spec.think_len; ++i)
                pool[i] = think_start + static_cast<Position>(i);
            for (std::uint64_t i = 0; i < count; ++i) {
                const std::uint64_t j = i + rng.next_below(spec.think_len - i);
                std::swap(pool[i], pool[j]);
            }
            std::vector<Position> crystal(pool.begin(), pool.begin() + count);
            std::sort(crystal.begin(), crystal.end());
            out.labels.crystal[g] = crystal;

            std::vector<bool> is_crystal(total, false);
            for (Position p : crystal)
                is_crystal[p] = true;

            // Renewal spike schedule: short bursts (the vertical stripes of a
            // sink-to-bottom attention map) separated by gaps of
            // 1 + Geometric with mean crystal_gap_mean between events. The
            // first event lands right after arrival.
            std::vector<std::vector<Position>> spikes_at(h.think_len);
            const double geom_p =
                spec.crystal_gap_mean > 1.0 ? 1.0 / spec.crystal_gap_mean : 1.0;
            for (Position p : crystal) {
                Position t = p + 1;
                while (t < think_end) {
                    const Position width =
                        1 + static_cast<Position>(rng.next_below(kSpikeBurstMax));
                    for (Position k = 0; k < width && t + k < think_end; ++k)
                        spikes_at[t + k - think_start].push_back(p);
                    t += width + static_cast<Position>(1 + rng.next_geometric(geom_p));
                }
            }

            const double log_half = std::log(0.5) / spec.slip_halflife;

            auto jitter = [&](std::vector<double>& w, Position row_start, Position row_end,
                              double mean_base) {
                if (spec.noise_scale <= 0.0)
                    return;
                for (Position s = row_start; s < row_end; ++s)
                    w[s] += spec.noise_scale * mean_base * rng.next_double();
            };

            // Think rows.
            for (Position t = think_start; t < think_end; ++t) {
                std::vector<double> w(t, 0.0);
                double base_total = 0.0;
                std::size_t think_cols = 0;
                std::vector<Position> retouchable;
                for (Position s = think_start; s < t; ++s) {
                    ++think_cols;
                    if (is_crystal[s])
                        continue;
                    const double decay =
                        std::exp(log_half * static_cast<double>(t - s));
                    w[s] = decay < 1e-12 ? 0.0 : decay;
                    base_total += w[s];
                    const Position age = t - s;
                    if (age >= kRetouchMinAge && age <= kRetouchMaxAge)
                        retouchable.push_back(s);
                }
                if (!retouchable.empty()) {
                    double expected = kRetouchRate * static_cast<double>(retouchable.size());
                    while (expected > 0.0) {
                        if (expected >= 1.0 || rng.next_double() < expected) {
                            const Position s =
                                retouchable[rng.next_below(retouchable.size())];
                            base_total += kSpikeWeight - w[s];
                            w[s] = kSpikeWeight;
                        }
                        expected -= 1.0;
                    }
                }
                for (Position p : spikes_at[t - think_start]) {
                    w[p] = kSpikeWeight;
                    base_total += kSpikeWeight;
                }
                if (base_total <= 0.0) {
                    // First think row: only prompt context exists.
                    for (Position s = 0; s < std::min<Position>(t, think_start); ++s)
                        w[s] = 1.0;
                } else if (think_cols > 0) {
                    jitter(w, think_start, t, base_total / static_cast<double>(think_cols));
                }
                auto& rec = out.trace.steps[record_index(h, layer, head, t)];
                rec.layer = layer;
                rec.head = head;
                rec.query_position = t;
                rec.scores = finalize_row(w);
            }

            // Answer rows: crystal_answer_mass spread uniformly over the
            // crystal set; the residual follows the slip pattern into the
            // answer stage (newer slips keep more mass) on top of a gentle
            // position ramp that makes the per-position means strictly
            // ordered. Prompt and earlier answer positions get no mass.
            for (Position q = think_end; q < total; ++q) {
                std::vector<double> w(q, 0.0);
                std::vector<double> resid(q, 0.0);
                double resid_total = 0.0;
                std::size_t think_cols = 0;
                for (Position s = think_start; s < think_end; ++s) {
                    ++think_cols;
                    if (is_crystal[s])
                        continue;
                    const double age = static_cast<double>(q - s);
                    resid[s] = 1.0 +
                               static_cast<double>(s - think_start + 1) /
                                   static_cast<double>(spec.think_len) +
                               4.0 * std::exp(log_half * age);
                    resid_total += resid[s];
                }
                const double crystal_count = static_cast<double>(crystal.size());
                const double resid_mass =
                    resid_total > 0.0 ? 1.0 - spec.crystal_answer_mass : 0.0;
                for (Position p : crystal)
                    w[p] = spec.crystal_answer_mass / crystal_count;
                if (resid_total > 0.0) {
                    for (Position s = think_start; s < think_end; ++s)
                        w[s] += resid[s] / resid_total * resid_mass;
                }
                jitter(w, think_start, think_end,
                       think_cols > 0 ? 1.0 / static_cast<double>(think_cols) : 0.0);
                auto& rec = out.trace.steps[record_index(h, layer, head, q)];
                rec.layer = layer;
                rec.head = head;
                rec.query_position = q;
                rec.scores = finalize_row(w);
            }
        }
    }

    auto violations = validate_trace(out.trace);
    check_internal(violations.empty(),
                   "generator produced invalid trace: " +
                       (violations.empty() ? std::string() : violations.front().str()));
    return out;
}

// ---- label sidecar ---------------------------------------------------------

void write_labels_file(const PlantedLabels& labels, const std::string& path) {
    nlohmann::json doc;
    doc["magic"] = "CKVL";
    doc["schema_version"] = 1;
    doc["num_layers"] = labels.num_layers;
    doc["num_heads"] = labels.num_heads;
    auto& heads = doc["crystal"] = nlohmann::json::array();
    for (std::uint32_t layer = 0; layer < labels.num_layers; ++layer) {
        for (std::uint32_t head = 0; head < labels.num_heads; ++head) {
            nlohmann::json entry;
            entry["layer"] = layer;
            entry["head"] = head;
            entry["positions"] = labels.at(layer, head);
            heads.push_back(std::move(entry));
        }
    }
    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::trunc);
        if (!os)
            throw io_error("I/O error: cannot open " + tmp + " for writing");
        os << doc.dump(2) << '\n';
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec)
        throw io_error("I/O error: cannot rename " + tmp + " to " + path);
}

PlantedLabels read_labels_file(const std::string& path) {
    std::ifstream is(path);
    if (!is)
        throw io_error("I/O error: cannot open " + path);
    nlohmann::json doc;
    try {
        is >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw io_error("format error: " + path + ": " + e.what());
    }
    if (doc.value("magic", "") != "CKVL")
        throw io_error("format error: " + path + " is not a label sidecar");
    PlantedLabels labels;
    labels.num_layers = doc.at("num_layers").get<std::uint32_t>();
    labels.num_heads = doc.at("num_heads").get<std::uint32_t>();
    labels.crystal.resize(static_cast<std::size_t>(labels.num_layers) * labels.num_heads);
    for (const auto& entry : doc.at("crystal")) {
        const auto layer = entry.at("layer").get<std::uint32_t>();
        const auto head = entry.at("head").get<std::uint32_t>();
        if (layer >= labels.num_layers || head >= labels.num_heads)
            throw io_error("format error: " + path + ": label layer/head out of bounds");
        labels.crystal[layer * labels.num_heads + head] =
            entry.at("positions").get<std::vector<Position>>();
    }
    return labels;
}

}  // namespace ckv
