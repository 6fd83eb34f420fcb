// SPDX-License-Identifier: Apache-2.0
//
// ckv: trace-driven KV-cache eviction simulator.
//
//   ckv gen      generate a synthetic attention trace + planted labels
//   ckv run      replay one policy over a trace, write run log + report
//   ckv compare  run several policies on the same trace, write a delta table
//   ckv sweep    lambda x top-p grid for the LRFU policy
//   ckv report   render plot-ready flat files from stored reports
//
// Exit codes: 0 success, 2 usage, 3 infeasible config, 4 I/O or format
// error, 5 internal invariant failure.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <functional>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ckv/baselines.hpp"
#include "ckv/errors.hpp"
#include "ckv/metrics.hpp"
#include "ckv/replay.hpp"
#include "ckv/serde.hpp"
#include "ckv/trace.hpp"

namespace {

using namespace ckv;

// ---- shared option plumbing -------------------------------------------------

struct GenOptions {
    SyntheticSpec spec;

    void attach(CLI::App* cmd) {
        cmd->add_option("--seed", spec.seed, "Generator seed")->capture_default_str();
        cmd->add_option("--prompt-len", spec.prompt_len, "Prompt positions")
            ->capture_default_str();
        cmd->add_option("--think-len", spec.think_len, "Think positions")
            ->capture_default_str();
        cmd->add_option("--answer-len", spec.answer_len, "Answer positions")
            ->capture_default_str();
        cmd->add_option("--crystal-fraction", spec.crystal_fraction,
                        "Fraction of think positions planted as crystal, (0, 0.5]")
            ->capture_default_str();
        cmd->add_option("--crystal-gap-mean", spec.crystal_gap_mean,
                        "Mean steps between crystal attention hits")
            ->capture_default_str();
        cmd->add_option("--slip-halflife", spec.slip_halflife,
                        "Steps for slip attention to halve")
            ->capture_default_str();
        cmd->add_option("--crystal-answer-mass", spec.crystal_answer_mass,
                        "Answer-stage mass directed at crystal positions, (0, 1]")
            ->capture_default_str();
        cmd->add_option("--noise-scale", spec.noise_scale, "Jitter magnitude; 0 = exact")
            ->capture_default_str();
        cmd->add_option("--layers", spec.num_layers, "Layer count")->capture_default_str();
        cmd->add_option("--heads", spec.num_heads, "Heads per layer")->capture_default_str();
        cmd->add_option("--heterogeneity", spec.heterogeneity,
                        "Crystal-richness spread across heads, >= 1")
            ->capture_default_str();
    }
};

struct TraceSource {
    std::string trace_path;
    bool use_gen = false;
    GenOptions gen;

    void attach(CLI::App* cmd) {
        auto* trace_opt =
            cmd->add_option("--trace", trace_path, "Trace file produced by `ckv gen`");
        auto* gen_flag = cmd->add_flag("--gen", use_gen,
                                       "Generate the trace in memory instead of reading one");
        gen.attach(cmd);
        trace_opt->excludes(gen_flag);
    }

    SyntheticTrace load() const {
        if (use_gen)
            return generate_synthetic(gen.spec);
        if (trace_path.empty())
            throw CLI::RequiredError("--trace or --gen");
        SyntheticTrace st;
        st.trace = read_trace_file(trace_path);
        return st;
    }
};

struct PolicyOptions {
    PolicyConfig config;
    std::string policy_str = "lrfu";
    std::string budget_str = "ratio:0.10";
    double label_fraction = 0.30;
    bool no_renormalize = false;

    void attach(CLI::App* cmd, bool with_policy_flag, bool with_scalar_knobs = true) {
        if (with_policy_flag)
            cmd->add_option("--policy", policy_str,
                            "Eviction policy: lrfu, lru, lfu, sink, accum, obs")
                ->capture_default_str();
        if (with_scalar_knobs) {
            cmd->add_option("--lambda", config.lambda, "CRF decay factor, [0, 1]")
                ->capture_default_str();
            cmd->add_option("--top-p", config.top_p, "Hit-mask nucleus threshold, (0, 1]")
                ->capture_default_str();
        }
        cmd->add_option("--budget", budget_str, "Per-head budget: fixed:N or ratio:R")
            ->capture_default_str();
        cmd->add_option("--realloc-interval", config.realloc_interval,
                        "Steps between adaptive budget reallocations; 0 disables")
            ->default_val(128);
        cmd->add_option("--b-min", config.b_min, "Per-head budget floor")
            ->capture_default_str();
        cmd->add_option("--protect-recent", config.protect_recent,
                        "Exempt the W most recent think positions from eviction")
            ->capture_default_str();
        cmd->add_option("--alpha-bound", config.alpha_bound, "Lower decay bound")
            ->capture_default_str();
        cmd->add_option("--beta-bound", config.beta_bound, "Upper decay bound")
            ->capture_default_str();
        cmd->add_flag("--strict-bounds", config.strict_bounds,
                      "Reject lambda outside (alpha, beta) instead of warning");
        cmd->add_flag("--no-renormalize", no_renormalize,
                      "Policies observe raw gathered scores (oracle observation mode)");
        cmd->add_flag("--compress-answer", config.compress_answer,
                      "Keep compressing during the answer stage (ablation)");
        cmd->add_flag("--warmup-tracking", config.warmup_tracking,
                      "Record hits while under budget (ablation)");
        cmd->add_flag("--realloc-reset", config.realloc_reset,
                      "Zero CRF state after each reallocation (ablation)");
        cmd->add_option("--sink-size", config.sink_size, "SinkWindow: pinned initial positions")
            ->capture_default_str();
        cmd->add_option("--window-size", config.window_size,
                        "SinkWindow: cap on the recent window; 0 derives it from the budget")
            ->capture_default_str();
        cmd->add_option("--obs-window", config.obs_window, "ObsWindow: trailing query count")
            ->capture_default_str();
        cmd->add_option("--label-fraction", label_fraction,
                        "Ground-truth crystal/slip fraction, (0, 0.5]")
            ->capture_default_str();
    }

    PolicyConfig resolve() const {
        PolicyConfig out = config;
        out.policy = parse_policy(policy_str);
        out.renormalize = !no_renormalize;

        const auto colon = budget_str.find(':');
        if (colon == std::string::npos)
            throw config_error("budget must be fixed:N or ratio:R");
        const std::string kind = budget_str.substr(0, colon);
        const std::string value = budget_str.substr(colon + 1);
        try {
            if (kind == "fixed")
                out.budget_mode = BudgetMode::Fixed(static_cast<std::uint32_t>(std::stoul(value)));
            else if (kind == "ratio")
                out.budget_mode = BudgetMode::Ratio(std::stod(value));
            else
                throw config_error("budget kind must be 'fixed' or 'ratio'");
        } catch (const std::invalid_argument&) {
            throw config_error("cannot parse budget value '" + value + "'");
        } catch (const std::out_of_range&) {
            throw config_error("budget value out of range: '" + value + "'");
        }

        validate_config(out);
        if (out.policy == PolicyKind::Lrfu && !out.strict_bounds &&
            !(out.lambda > out.alpha_bound && out.lambda < out.beta_bound))
            std::cerr << "warning: lambda " << out.lambda << " is outside the recommended ("
                      << out.alpha_bound << ", " << out.beta_bound << ") range\n";
        return out;
    }
};

// Parses "a:b:step" ranges or comma lists into a sorted unique grid.
std::vector<double> parse_grid(const std::string& text) {
    std::vector<double> values;
    const auto round6 = [](double v) { return std::round(v * 1e6) / 1e6; };
    if (text.find(':') != std::string::npos) {
        double start = 0, end = 0, step = 0;
        char c1 = 0, c2 = 0;
        std::istringstream is(text);
        if (!(is >> start >> c1 >> end >> c2 >> step) || c1 != ':' || c2 != ':' || step <= 0)
            throw config_error("cannot parse grid '" + text + "' (want start:end:step)");
        for (double v = start; v <= end + 1e-9; v += step)
            values.push_back(round6(v));
    } else {
        std::istringstream is(text);
        std::string item;
        while (std::getline(is, item, ','))
            if (!item.empty())
                values.push_back(round6(std::stod(item)));
    }
    if (values.empty())
        throw config_error("empty grid '" + text + "'");
    std::sort(values.begin(), values.end());
    values.erase(std::unique(values.begin(), values.end()), values.end());
    return values;
}

std::size_t worker_count(std::size_t jobs) {
    std::size_t n = std::thread::hardware_concurrency();
    if (n == 0)
        n = 1;
    if (const char* env = std::getenv("CKV_THREADS")) {
        const long cap = std::strtol(env, nullptr, 10);
        if (cap >= 1)
            n = static_cast<std::size_t>(cap);
    }
    return std::max<std::size_t>(1, std::min(n, jobs));
}

// Runs fn(i) for i in [0, jobs) on a bounded pool; exceptions resurface.
void parallel_for(std::size_t jobs, const std::function<void(std::size_t)>& fn) {
    const std::size_t workers = worker_count(jobs);
    if (workers <= 1) {
        for (std::size_t i = 0; i < jobs; ++i)
            fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::mutex err_mutex;
    std::exception_ptr first_error;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            while (true) {
                const std::size_t i = next.fetch_add(1);
                if (i >= jobs)
                    return;
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(err_mutex);
                    if (!first_error)
                        first_error = std::current_exception();
                    return;
                }
            }
        });
    }
    for (auto& t : pool)
        t.join();
    if (first_error)
        std::rethrow_exception(first_error);
}

MetricsReport run_and_score(const AttentionTrace& trace, const GroundTruthLabels& labels,
                            const PolicyConfig& config) {
    RunConfig rc;
    rc.policy = config;
    const RunLog log = run_simulation(trace, rc);
    return score_run(log, labels, trace);
}

// ---- commands --------------------------------------------------------------

int cmd_gen(const GenOptions& gen, const std::string& out) {
    const SyntheticTrace st = generate_synthetic(gen.spec);
    write_trace_file(st.trace, out);
    write_labels_file(st.labels, out + ".labels.json");
    std::cout << "trace: " << out << "\nlabels: " << out << ".labels.json\nfingerprint: "
              << trace_fingerprint(st.trace) << "\n";
    return 0;
}

int cmd_run(const TraceSource& source, const PolicyOptions& opts, const std::string& out) {
    const PolicyConfig config = opts.resolve();
    const SyntheticTrace st = source.load();

    RunConfig rc;
    rc.policy = config;
    const RunLog log = run_simulation(st.trace, rc);
    const GroundTruthLabels labels = label_ground_truth(st.trace, opts.label_fraction);
    const MetricsReport report = score_run(log, labels, st.trace);

    write_runlog_file(log, out + ".runlog.json");
    write_report_file(report, out + ".report.json");
    write_flat_table({report}, out + ".heads.csv");

    std::cout << "policy: " << report.policy
              << "\ncrystal_retention: " << report.aggregate.crystal_retention
              << "\nanswer_mass_retained: " << report.aggregate.answer_mass_retained
              << "\nnormalized_score: " << report.aggregate.normalized_score << "\nfiles: "
              << out << ".runlog.json " << out << ".report.json " << out << ".heads.csv\n";
    return 0;
}

int cmd_compare(const TraceSource& source, const PolicyOptions& opts,
                const std::string& policies_csv, const std::string& baseline,
                const std::string& out) {
    std::vector<PolicyKind> kinds;
    {
        std::istringstream is(policies_csv);
        std::string item;
        while (std::getline(is, item, ','))
            if (!item.empty())
                kinds.push_back(parse_policy(item));
    }
    if (kinds.empty())
        throw config_error("no policies given");

    const SyntheticTrace st = source.load();
    const GroundTruthLabels labels = label_ground_truth(st.trace, opts.label_fraction);

    std::vector<MetricsReport> reports(kinds.size());
    parallel_for(kinds.size(), [&](std::size_t i) {
        PolicyOptions local = opts;
        local.policy_str = policy_name(kinds[i]);
        reports[i] = run_and_score(st.trace, labels, local.resolve());
    });

    std::size_t baseline_row = 0;
    if (!baseline.empty()) {
        const PolicyKind want = parse_policy(baseline);
        const auto it = std::find(kinds.begin(), kinds.end(), want);
        if (it == kinds.end())
            throw config_error("baseline policy is not in the compared set");
        baseline_row = static_cast<std::size_t>(it - kinds.begin());
    }

    const ComparisonTable table = compare_runs(reports, baseline_row);
    write_comparison_file(table, out + ".compare.json");
    write_comparison_csv(table, out + ".compare.csv");
    write_flat_table(reports, out + ".heads.csv");

    for (const MetricsReport& r : table.rows)
        std::cout << r.policy << ": crystal_retention=" << r.aggregate.crystal_retention
                  << " normalized_score=" << r.aggregate.normalized_score << "\n";
    std::cout << "files: " << out << ".compare.json " << out << ".compare.csv " << out
              << ".heads.csv\n";
    return 0;
}

int cmd_sweep(const TraceSource& source, const PolicyOptions& opts,
              const std::string& lambda_grid, const std::string& p_grid,
              const std::string& out) {
    const std::vector<double> lambdas = parse_grid(lambda_grid);
    const std::vector<double> ps = parse_grid(p_grid);

    const SyntheticTrace st = source.load();
    const GroundTruthLabels labels = label_ground_truth(st.trace, opts.label_fraction);

    struct Cell {
        double lambda;
        double top_p;
        MetricsReport report;
    };
    std::vector<Cell> cells;
    for (double l : lambdas)
        for (double p : ps)
            cells.push_back({l, p, {}});

    parallel_for(cells.size(), [&](std::size_t i) {
        PolicyOptions local = opts;
        local.policy_str = "lrfu";
        PolicyConfig config = local.resolve();
        config.lambda = cells[i].lambda;
        config.top_p = cells[i].top_p;
        validate_config(config);
        cells[i].report = run_and_score(st.trace, labels, config);
    });

    std::string csv =
        "lambda,top_p,crystal_retention,answer_mass_retained,slip_occupancy,"
        "oracle_mass,normalized_score\n";
    nlohmann::json rows = nlohmann::json::array();
    char buf[160];
    for (const Cell& cell : cells) {
        const HeadMetrics& m = cell.report.aggregate;
        std::snprintf(buf, sizeof(buf), "%.6g,%.6g,%.10g,%.10g,%.10g,%.10g,%.10g\n",
                      cell.lambda, cell.top_p, m.crystal_retention, m.answer_mass_retained,
                      m.slip_occupancy, m.oracle_mass, m.normalized_score);
        csv += buf;
        nlohmann::json j;
        j["lambda"] = cell.lambda;
        j["top_p"] = cell.top_p;
        j["crystal_retention"] = m.crystal_retention;
        j["answer_mass_retained"] = m.answer_mass_retained;
        j["slip_occupancy"] = m.slip_occupancy;
        j["oracle_mass"] = m.oracle_mass;
        j["normalized_score"] = m.normalized_score;
        rows.push_back(std::move(j));
    }

    nlohmann::json doc;
    doc["magic"] = "CKVS";
    doc["schema_version"] = 1;
    doc["trace_fingerprint"] = trace_fingerprint(st.trace);
    doc["rows"] = std::move(rows);

    // Reuse the report writers' atomic pattern via a plain temp+rename.
    {
        const std::string path = out + ".sweep.csv";
        const std::string tmp = path + ".tmp";
        std::ofstream os(tmp, std::ios::trunc | std::ios::binary);
        if (!os)
            throw io_error("I/O error: cannot open " + tmp);
        os << csv;
        os.close();
        std::rename(tmp.c_str(), path.c_str());
    }
    {
        const std::string path = out + ".sweep.json";
        const std::string tmp = path + ".tmp";
        std::ofstream os(tmp, std::ios::trunc | std::ios::binary);
        if (!os)
            throw io_error("I/O error: cannot open " + tmp);
        os << doc.dump(2) << "\n";
        os.close();
        std::rename(tmp.c_str(), path.c_str());
    }

    std::cout << "cells: " << cells.size() << "\nfiles: " << out << ".sweep.csv " << out
              << ".sweep.json\n";
    return 0;
}

int cmd_report(const std::vector<std::string>& inputs, const std::string& out) {
    if (inputs.empty())
        throw config_error("no report files given");
    std::vector<MetricsReport> reports;
    for (const std::string& path : inputs)
        reports.push_back(read_report_file(path));

    write_flat_table(reports, out + ".heads.csv");
    std::cout << "files: " << out << ".heads.csv";

    bool comparable = reports.size() > 1;
    for (const MetricsReport& r : reports)
        if (r.trace_fingerprint != reports.front().trace_fingerprint ||
            r.b_total != reports.front().b_total)
            comparable = false;
    if (comparable) {
        const ComparisonTable table = compare_runs(reports, 0);
        write_comparison_file(table, out + ".compare.json");
        write_comparison_csv(table, out + ".compare.csv");
        std::cout << " " << out << ".compare.json " << out << ".compare.csv";
    } else if (reports.size() > 1) {
        std::cerr << "note: reports span different traces or budgets; "
                     "comparison files skipped\n";
    }
    std::cout << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Trace-driven KV-cache eviction simulator"};
    app.require_subcommand(1);

    // gen
    auto* gen_cmd = app.add_subcommand("gen", "Generate a synthetic attention trace");
    GenOptions gen_opts;
    gen_opts.attach(gen_cmd);
    std::string gen_out;
    gen_cmd->add_option("--out", gen_out, "Output trace path")->required();

    // run
    auto* run_cmd = app.add_subcommand("run", "Replay one policy over a trace");
    TraceSource run_src;
    run_src.attach(run_cmd);
    PolicyOptions run_opts;
    run_opts.attach(run_cmd, true);
    std::string run_out;
    run_cmd->add_option("--out", run_out, "Output file prefix")->required();

    // compare
    auto* cmp_cmd = app.add_subcommand("compare", "Run several policies on one trace");
    TraceSource cmp_src;
    cmp_src.attach(cmp_cmd);
    PolicyOptions cmp_opts;
    cmp_opts.attach(cmp_cmd, false);
    std::string cmp_policies = "lrfu,lru,lfu,sink,accum,obs";
    std::string cmp_baseline;
    std::string cmp_out;
    cmp_cmd->add_option("--policies", cmp_policies, "Comma-separated policy list")
        ->capture_default_str();
    cmp_cmd->add_option("--baseline", cmp_baseline,
                        "Policy used as the delta baseline (default: first)");
    cmp_cmd->add_option("--out", cmp_out, "Output file prefix")->required();

    // sweep
    auto* sweep_cmd = app.add_subcommand("sweep", "LRFU lambda x top-p grid");
    TraceSource sweep_src;
    sweep_src.attach(sweep_cmd);
    PolicyOptions sweep_opts;
    sweep_opts.attach(sweep_cmd, false, false);
    std::string sweep_lambda = "0:1:0.1";
    std::string sweep_p = "0.5:0.9:0.1";
    std::string sweep_out;
    sweep_cmd->add_option("--lambda", sweep_lambda, "Decay grid (start:end:step or list)")
        ->capture_default_str();
    sweep_cmd->add_option("--top-p", sweep_p, "Threshold grid (start:end:step or list)")
        ->capture_default_str();
    sweep_cmd->add_option("--out", sweep_out, "Output file prefix")->required();

    // report
    auto* rep_cmd = app.add_subcommand("report", "Render flat files from stored reports");
    std::vector<std::string> rep_inputs;
    std::string rep_out;
    rep_cmd->add_option("--inputs", rep_inputs, "Report JSON files")->required();
    rep_cmd->add_option("--out", rep_out, "Output file prefix")->required();

    try {
        app.parse(argc, argv);
        if (*gen_cmd)
            return cmd_gen(gen_opts, gen_out);
        if (*run_cmd)
            return cmd_run(run_src, run_opts, run_out);
        if (*cmp_cmd)
            return cmd_compare(cmp_src, cmp_opts, cmp_policies, cmp_baseline, cmp_out);
        if (*sweep_cmd)
            return cmd_sweep(sweep_src, sweep_opts, sweep_lambda, sweep_p, sweep_out);
        if (*rep_cmd)
            return cmd_report(rep_inputs, rep_out);
        std::cerr << "error: usage: no subcommand\n";
        return 2;
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0)
            return app.exit(e);  // --help
        std::cerr << "error: usage: " << e.what() << "\n";
        return 2;
    } catch (const config_error& e) {
        std::cerr << "error: config: " << e.what() << "\n";
        return 3;
    } catch (const io_error& e) {
        std::cerr << "error: io: " << e.what() << "\n";
        return 4;
    } catch (const internal_error& e) {
        std::cerr << "error: internal: " << e.what() << "\n";
        return 5;
    } catch (const std::exception& e) {
        std::cerr << "error: internal: " << e.what() << "\n";
        return 5;
    }
}
