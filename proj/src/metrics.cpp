// SPDX-License-Identifier: Apache-2.0

#include "ckv/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "ckv/errors.hpp"
#include "ckv/serde.hpp"

namespace ckv {

using nlohmann::json;

namespace {

void atomic_write(const std::string& path, const std::string& content) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::trunc | std::ios::binary);
        if (!os)
            throw io_error("I/O error: cannot open " + tmp + " for writing");
        os << content;
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec)
        throw io_error("I/O error: cannot rename " + tmp + " to " + path);
}

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

}  // namespace

GroundTruthLabels label_ground_truth(const AttentionTrace& trace, double fraction) {
    const TraceHeader& h = trace.header;
    if (h.answer_len == 0)
        throw config_error("trace has no answer phase; ground truth is undefined");
    if (!(fraction > 0.0 && fraction <= 0.5))
        throw config_error("label fraction must be in (0, 0.5]");

    const std::size_t think_len = static_cast<std::size_t>(h.think_len);
    const std::size_t k =
        static_cast<std::size_t>(std::floor(fraction * static_cast<double>(think_len)));
    if (k < 1)
        throw config_error("label fraction yields empty crystal/slip sets");

    GroundTruthLabels labels;
    labels.num_layers = h.num_layers;
    labels.num_heads = h.num_heads;
    labels.fraction = fraction;
    labels.think_start = h.think_start();
    labels.think_end = h.think_end();
    const std::size_t cells = static_cast<std::size_t>(h.num_layers) * h.num_heads;
    labels.crystal.resize(cells);
    labels.slip.resize(cells);
    labels.mean_answer.resize(cells);

    for (std::uint32_t layer = 0; layer < h.num_layers; ++layer) {
        for (std::uint32_t head = 0; head < h.num_heads; ++head) {
            const std::size_t c = labels.cell(layer, head);
            std::vector<double>& mean = labels.mean_answer[c];
            mean.assign(think_len, 0.0);
            for (Position q = h.think_end(); q < h.num_positions(); ++q) {
                const std::span<const float> row = trace.row(layer, head, q);
                for (std::size_t i = 0; i < think_len; ++i)
                    mean[i] += row[h.think_start() + i];
            }
            for (double& v : mean)
                v /= static_cast<double>(h.answer_len);

            std::vector<std::size_t> order(think_len);
            std::iota(order.begin(), order.end(), 0);
            std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
                if (mean[a] != mean[b])
                    return mean[a] > mean[b];
                return a < b;  // ties rank the earlier position higher
            });

            auto& crystal = labels.crystal[c];
            auto& slip = labels.slip[c];
            for (std::size_t i = 0; i < k; ++i)
                crystal.push_back(labels.think_start + static_cast<Position>(order[i]));
            for (std::size_t i = think_len - k; i < think_len; ++i)
                slip.push_back(labels.think_start + static_cast<Position>(order[i]));
            std::sort(crystal.begin(), crystal.end());
            std::sort(slip.begin(), slip.end());
        }
    }
    return labels;
}

MetricsReport score_run(const RunLog& log, const GroundTruthLabels& labels,
                        const AttentionTrace& trace) {
    const TraceHeader& h = trace.header;
    if (log.trace_fingerprint != trace_fingerprint(trace))
        throw config_error("consistency error: run log was produced from a different trace");
    if (labels.num_layers != h.num_layers || labels.num_heads != h.num_heads)
        throw config_error("consistency error: labels do not match trace dimensions");
    const std::size_t cells = static_cast<std::size_t>(h.num_layers) * h.num_heads;
    if (log.boundary.size() != cells)
        throw config_error("consistency error: boundary snapshot is incomplete");

    MetricsReport report;
    report.policy = policy_name(log.config.policy.policy);
    report.trace_fingerprint = log.trace_fingerprint;
    report.b_total = log.b_total;
    report.label_fraction = labels.fraction;
    report.config = log.config.policy;
    report.heads.reserve(cells);

    double agg_budget = 0.0;
    for (const BoundaryCell& cell : log.boundary) {
        const std::size_t c = labels.cell(cell.layer, cell.head);
        const std::vector<double>& mean = labels.mean_answer[c];

        HeadMetrics m;
        m.layer = cell.layer;
        m.head = cell.head;
        m.budget = cell.budget;

        const auto& crystal = labels.crystal[c];
        const auto& slip = labels.slip[c];
        std::vector<Position> inter;
        std::set_intersection(cell.retained.begin(), cell.retained.end(), crystal.begin(),
                              crystal.end(), std::back_inserter(inter));
        m.crystal_retention =
            static_cast<double>(inter.size()) / static_cast<double>(crystal.size());
        inter.clear();
        std::set_intersection(cell.retained.begin(), cell.retained.end(), slip.begin(),
                              slip.end(), std::back_inserter(inter));
        m.slip_occupancy =
            static_cast<double>(inter.size()) / static_cast<double>(cell.budget);

        // Retained mass under the answer queries; mean over answer steps of a
        // sum equals the sum of per-position means.
        double mass = 0.0;
        for (Position p : cell.retained) {
            check_internal(p >= labels.think_start && p < labels.think_end,
                           "boundary snapshot holds a non-think position");
            mass += mean[p - labels.think_start];
        }
        m.answer_mass_retained = mass;

        // Information-theoretic best set for this budget: top-budget think
        // positions by mean answer attention.
        std::vector<double> sorted_mean(mean);
        std::sort(sorted_mean.begin(), sorted_mean.end(), std::greater<>());
        const std::size_t take = std::min<std::size_t>(cell.budget, sorted_mean.size());
        m.oracle_mass = std::accumulate(sorted_mean.begin(),
                                        sorted_mean.begin() + static_cast<long>(take), 0.0);

        m.normalized_score = m.oracle_mass > 0.0 ? m.answer_mass_retained / m.oracle_mass
                                                 : 1.0;
        check_internal(m.normalized_score <= 1.0 + 1e-9,
                       "answer mass exceeds the oracle bound");

        agg_budget += m.budget;
        report.heads.push_back(m);
    }

    // Head order is canonical in the log; sort defensively so metrics are
    // invariant to any permutation of boundary cells.
    std::sort(report.heads.begin(), report.heads.end(),
              [](const HeadMetrics& a, const HeadMetrics& b) {
                  return std::tuple(a.layer, a.head) < std::tuple(b.layer, b.head);
              });

    HeadMetrics& agg = report.aggregate;
    const double n = static_cast<double>(report.heads.size());
    for (const HeadMetrics& m : report.heads) {
        agg.crystal_retention += m.crystal_retention / n;
        agg.answer_mass_retained += m.answer_mass_retained / n;
        agg.slip_occupancy += m.slip_occupancy / n;
        agg.oracle_mass += m.oracle_mass / n;
        agg.normalized_score += m.normalized_score / n;
    }
    agg.budget = static_cast<std::uint32_t>(agg_budget / n);
    return report;
}

ComparisonTable compare_runs(std::vector<MetricsReport> reports, std::size_t baseline_row) {
    if (reports.empty())
        throw config_error("comparison error: no reports given");
    if (baseline_row >= reports.size())
        throw config_error("comparison error: baseline row out of range");
    for (const MetricsReport& r : reports) {
        if (r.trace_fingerprint != reports.front().trace_fingerprint)
            throw config_error("comparison error: reports refer to different traces");
        if (r.b_total != reports.front().b_total)
            throw config_error("comparison error: reports use different total budgets");
    }
    ComparisonTable table;
    table.trace_fingerprint = reports.front().trace_fingerprint;
    table.b_total = reports.front().b_total;
    table.baseline_row = baseline_row;
    table.rows = std::move(reports);
    return table;
}

// ---- report files -----------------------------------------------------------

namespace {

json head_metrics_to_json(const HeadMetrics& m) {
    json j;
    j["layer"] = m.layer;
    j["head"] = m.head;
    j["budget"] = m.budget;
    j["crystal_retention"] = m.crystal_retention;
    j["answer_mass_retained"] = m.answer_mass_retained;
    j["slip_occupancy"] = m.slip_occupancy;
    j["oracle_mass"] = m.oracle_mass;
    j["normalized_score"] = m.normalized_score;
    return j;
}

HeadMetrics head_metrics_from_json(const json& j) {
    HeadMetrics m;
    m.layer = j.at("layer").get<std::uint32_t>();
    m.head = j.at("head").get<std::uint32_t>();
    m.budget = j.at("budget").get<std::uint32_t>();
    m.crystal_retention = j.at("crystal_retention").get<double>();
    m.answer_mass_retained = j.at("answer_mass_retained").get<double>();
    m.slip_occupancy = j.at("slip_occupancy").get<double>();
    m.oracle_mass = j.at("oracle_mass").get<double>();
    m.normalized_score = j.at("normalized_score").get<double>();
    return m;
}

json report_to_json(const MetricsReport& report) {
    json doc;
    doc["magic"] = "CKVM";
    doc["schema_version"] = report.schema_version;
    doc["policy"] = report.policy;
    doc["trace_fingerprint"] = report.trace_fingerprint;
    doc["b_total"] = report.b_total;
    doc["label_fraction"] = report.label_fraction;
    doc["config"] = policy_config_to_json(report.config);
    auto& heads = doc["heads"] = json::array();
    for (const HeadMetrics& m : report.heads)
        heads.push_back(head_metrics_to_json(m));
    doc["aggregate"] = head_metrics_to_json(report.aggregate);
    return doc;
}

MetricsReport report_from_json(const json& doc, const std::string& path) {
    if (doc.value("magic", "") != "CKVM")
        throw io_error("format error: " + path + " is not a metrics report");
    MetricsReport report;
    report.schema_version = doc.at("schema_version").get<std::uint32_t>();
    if (report.schema_version != kReportSchemaVersion)
        throw io_error("format error: unsupported report schema in " + path);
    report.policy = doc.at("policy").get<std::string>();
    report.trace_fingerprint = doc.at("trace_fingerprint").get<std::uint64_t>();
    report.b_total = doc.at("b_total").get<std::uint64_t>();
    report.label_fraction = doc.at("label_fraction").get<double>();
    report.config = policy_config_from_json(doc.at("config"));
    for (const auto& j : doc.at("heads"))
        report.heads.push_back(head_metrics_from_json(j));
    report.aggregate = head_metrics_from_json(doc.at("aggregate"));
    return report;
}

void append_flat_row(std::string& out, const std::string& policy, const HeadMetrics& m) {
    out += policy;
    out += ',' + std::to_string(m.layer);
    out += ',' + std::to_string(m.head);
    out += ',' + std::to_string(m.budget);
    out += ',' + fmt(m.crystal_retention);
    out += ',' + fmt(m.answer_mass_retained);
    out += ',' + fmt(m.slip_occupancy);
    out += ',' + fmt(m.oracle_mass);
    out += ',' + fmt(m.normalized_score);
    out += '\n';
}

}  // namespace

void write_report_file(const MetricsReport& report, const std::string& path) {
    atomic_write(path, report_to_json(report).dump(2) + "\n");
}

MetricsReport read_report_file(const std::string& path) {
    std::ifstream is(path);
    if (!is)
        throw io_error("I/O error: cannot open " + path);
    json doc;
    try {
        is >> doc;
    } catch (const json::exception& e) {
        throw io_error("format error: " + path + ": " + e.what());
    }
    return report_from_json(doc, path);
}

void write_flat_table(const std::vector<MetricsReport>& reports, const std::string& path) {
    std::string out =
        "policy,layer,head,budget,crystal_retention,answer_mass_retained,"
        "slip_occupancy,oracle_mass,normalized_score\n";
    for (const MetricsReport& report : reports)
        for (const HeadMetrics& m : report.heads)
            append_flat_row(out, report.policy, m);
    atomic_write(path, out);
}

void write_comparison_file(const ComparisonTable& table, const std::string& path) {
    json doc;
    doc["magic"] = "CKVC";
    doc["schema_version"] = kReportSchemaVersion;
    doc["trace_fingerprint"] = table.trace_fingerprint;
    doc["b_total"] = table.b_total;
    doc["baseline"] = table.rows[table.baseline_row].policy;
    auto& rows = doc["rows"] = json::array();
    for (const MetricsReport& r : table.rows) {
        json j = head_metrics_to_json(r.aggregate);
        j.erase("layer");
        j.erase("head");
        j["policy"] = r.policy;
        const HeadMetrics& base = table.rows[table.baseline_row].aggregate;
        j["delta_crystal_retention"] = r.aggregate.crystal_retention - base.crystal_retention;
        j["delta_answer_mass_retained"] =
            r.aggregate.answer_mass_retained - base.answer_mass_retained;
        j["delta_normalized_score"] = r.aggregate.normalized_score - base.normalized_score;
        rows.push_back(std::move(j));
    }
    atomic_write(path, doc.dump(2) + "\n");
}

void write_comparison_csv(const ComparisonTable& table, const std::string& path) {
    std::string out =
        "policy,budget,crystal_retention,answer_mass_retained,slip_occupancy,"
        "oracle_mass,normalized_score,delta_crystal_retention,"
        "delta_answer_mass_retained,delta_normalized_score\n";
    const HeadMetrics& base = table.rows[table.baseline_row].aggregate;
    for (const MetricsReport& r : table.rows) {
        const HeadMetrics& m = r.aggregate;
        out += r.policy;
        out += ',' + std::to_string(m.budget);
        out += ',' + fmt(m.crystal_retention);
        out += ',' + fmt(m.answer_mass_retained);
        out += ',' + fmt(m.slip_occupancy);
        out += ',' + fmt(m.oracle_mass);
        out += ',' + fmt(m.normalized_score);
        out += ',' + fmt(m.crystal_retention - base.crystal_retention);
        out += ',' + fmt(m.answer_mass_retained - base.answer_mass_retained);
        out += ',' + fmt(m.normalized_score - base.normalized_score);
        out += '\n';
    }
    atomic_write(path, out);
}

}  // namespace ckv
