// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ckv/replay.hpp"
#include "ckv/trace.hpp"

namespace ckv {

constexpr std::uint32_t kReportSchemaVersion = 1;

// Answer-derived ground truth: think positions ranked per head by the mean
// attention they receive from answer-stage queries. The top fraction is the
// crystal set, the bottom fraction the slip set; ties rank the earlier
// position higher, so labeling is deterministic.
struct GroundTruthLabels {
    std::uint32_t num_layers = 0;
    std::uint32_t num_heads = 0;
    double fraction = 0.30;
    Position think_start = 0;
    Position think_end = 0;
    std::vector<std::vector<Position>> crystal;      // sorted ascending, per cell
    std::vector<std::vector<Position>> slip;         // sorted ascending, per cell
    std::vector<std::vector<double>> mean_answer;    // per cell, per think offset

    std::size_t cell(std::uint32_t layer, std::uint32_t head) const {
        return static_cast<std::size_t>(layer) * num_heads + head;
    }
};

// Requires a non-empty answer phase. fraction in (0, 0.5].
GroundTruthLabels label_ground_truth(const AttentionTrace& trace, double fraction = 0.30);

struct HeadMetrics {
    std::uint32_t layer = 0;
    std::uint32_t head = 0;
    std::uint32_t budget = 0;
    double crystal_retention = 0.0;    // |retained ∩ crystal| / |crystal|
    double answer_mass_retained = 0.0; // mean answer-step attention mass on retained
    double slip_occupancy = 0.0;       // |retained ∩ slip| / budget
    double oracle_mass = 0.0;          // best possible answer mass at this budget
    double normalized_score = 0.0;     // answer_mass_retained / oracle_mass
};

struct MetricsReport {
    std::uint32_t schema_version = kReportSchemaVersion;
    std::string policy;
    std::uint64_t trace_fingerprint = 0;
    std::uint64_t b_total = 0;
    double label_fraction = 0.30;
    PolicyConfig config;
    std::vector<HeadMetrics> heads;  // layer-major
    HeadMetrics aggregate;           // unweighted mean over heads
};

// Scores one run log against ground truth on the trace it was produced from.
// Throws config_error when the log and trace fingerprints disagree.
MetricsReport score_run(const RunLog& log, const GroundTruthLabels& labels,
                        const AttentionTrace& trace);

// Cross-policy comparison at a shared trace and budget; deltas are taken
// against the designated baseline row.
struct ComparisonTable {
    std::uint64_t trace_fingerprint = 0;
    std::uint64_t b_total = 0;
    std::size_t baseline_row = 0;
    std::vector<MetricsReport> rows;
};

ComparisonTable compare_runs(std::vector<MetricsReport> reports, std::size_t baseline_row = 0);

// ---- report files -----------------------------------------------------------

void write_report_file(const MetricsReport& report, const std::string& path);
MetricsReport read_report_file(const std::string& path);

// Flat per-head table; fixed header:
// policy,layer,head,budget,crystal_retention,answer_mass_retained,
// slip_occupancy,oracle_mass,normalized_score
void write_flat_table(const std::vector<MetricsReport>& reports, const std::string& path);

void write_comparison_file(const ComparisonTable& table, const std::string& path);
void write_comparison_csv(const ComparisonTable& table, const std::string& path);

}  // namespace ckv
