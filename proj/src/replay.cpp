// SPDX-License-Identifier: Apache-2.0

#include "ckv/replay.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "ckv/errors.hpp"
#include "ckv/lrfu.hpp"
#include "ckv/serde.hpp"

namespace ckv {

using nlohmann::json;

BudgetResolution resolve_budgets(const PolicyConfig& config, const TraceHeader& header) {
    const std::size_t cells =
        static_cast<std::size_t>(header.num_layers) * header.num_heads;
    std::uint32_t per_head = 0;
    if (config.budget_mode.kind == BudgetMode::Kind::Fixed) {
        per_head = config.budget_mode.fixed;
    } else {
        per_head = static_cast<std::uint32_t>(std::llround(
            config.budget_mode.ratio * static_cast<double>(header.think_len)));
    }
    if (per_head < 1)
        throw config_error("resolved per-head budget is zero");
    if (per_head < config.b_min)
        throw config_error("per-head budget " + std::to_string(per_head) +
                           " is below the floor b_min=" + std::to_string(config.b_min));

    BudgetResolution res;
    res.per_head.assign(cells, per_head);
    res.b_total = static_cast<std::uint64_t>(per_head) * cells;
    return res;
}

RunLog run_simulation(const AttentionTrace& trace, const RunConfig& config) {
    validate_config(config.policy);
    const TraceHeader& h = trace.header;
    if (h.num_layers < 1 || h.num_heads < 1 || h.think_len < 1)
        throw config_error("trace header is incompatible with simulation");

    const BudgetResolution budgets = resolve_budgets(config.policy, h);
    if (config.policy.policy == PolicyKind::SinkWindow &&
        config.policy.sink_size >= budgets.per_head.front())
        throw config_error("sink_size must be smaller than the per-head budget");

    const std::uint32_t L = h.num_layers;
    const std::uint32_t H = h.num_heads;
    const std::size_t cells = static_cast<std::size_t>(L) * H;
    const auto policy = select_policy(config.policy);

    std::vector<HeadCacheState> states(cells);
    for (std::size_t c = 0; c < cells; ++c)
        states[c].budget = budgets.per_head[c];

    RunLog log;
    log.trace_fingerprint = trace_fingerprint(trace);
    log.num_layers = L;
    log.num_heads = H;
    log.think_start = h.think_start();
    log.think_end = h.think_end();
    log.b_total = budgets.b_total;
    log.config = config;
    log.initial_budgets = budgets.per_head;

    const bool realloc_enabled = config.policy.policy == PolicyKind::Lrfu &&
                                 config.policy.realloc_interval > 0;

    auto process_position = [&](Position t) {
        for (std::uint32_t layer = 0; layer < L; ++layer) {
            for (std::uint32_t head = 0; head < H; ++head) {
                const std::size_t c = static_cast<std::size_t>(layer) * H + head;
                HeadCacheState& state = states[c];
                const std::span<const float> row = trace.row(layer, head, t);
                std::vector<double> visible =
                    restricted_scores(row, state.retained, config.policy.renormalize);
                if (config.record_visible_rows) {
                    log.visible_rows.push_back(
                        {t, layer, head, state.retained, visible});
                }
                policy->append(state, t, t);
                CompressResult result =
                    policy->compress_step(state, visible, t, config.policy);
                check_internal(state.size() <= state.budget,
                               "head exceeds budget after compress_step");
                if (!result.evicted.empty())
                    log.evictions.push_back({t, layer, head, std::move(result.evicted)});
            }
        }
    };

    // Think stage.
    std::uint64_t think_steps = 0;
    for (Position t = h.think_start(); t < h.think_end(); ++t) {
        process_position(t);
        ++think_steps;

        if (realloc_enabled && think_steps % config.policy.realloc_interval == 0) {
            UtilizationSnapshot snap =
                snapshot_utilization(states, L, H, t, config.policy.lambda);
            BudgetPlan plan = reallocate(snap, budgets.b_total, config.policy.b_min);
            std::vector<CompressResult> shrink =
                apply_plan(states, plan, t, config.policy);
            log.reallocs.push_back({t, snap.eta_layer, snap.eta_head, plan.budget});
            for (std::uint32_t layer = 0; layer < L; ++layer) {
                for (std::uint32_t head = 0; head < H; ++head) {
                    const std::size_t c = static_cast<std::size_t>(layer) * H + head;
                    if (!shrink[c].evicted.empty())
                        log.evictions.push_back(
                            {t, layer, head, std::move(shrink[c].evicted)});
                }
            }
            if (config.policy.realloc_reset) {
                for (HeadCacheState& state : states) {
                    std::fill(state.crf.begin(), state.crf.end(), 0.0);
                    std::fill(state.last_hit.begin(), state.last_hit.end(), t);
                }
            }
        }

        // Memory bound: after a full step every head is at or under budget.
        std::uint64_t total_retained = 0;
        for (const HeadCacheState& state : states) {
            check_internal(state.size() <= state.budget,
                           "head exceeds budget after compression step");
            total_retained += state.size();
        }
        check_internal(total_retained <= budgets.b_total,
                       "total retained exceeds B_total after compression step");
    }

    // Boundary snapshot at the think/answer transition.
    for (std::uint32_t layer = 0; layer < L; ++layer)
        for (std::uint32_t head = 0; head < H; ++head) {
            const std::size_t c = static_cast<std::size_t>(layer) * H + head;
            log.boundary.push_back({layer, head, states[c].budget, states[c].retained});
        }

    // Answer stage feeds metrics only, unless the ablation keeps compressing.
    if (config.policy.compress_answer) {
        for (Position t = h.think_end(); t < h.num_positions(); ++t)
            process_position(t);
    }

    return log;
}

// ---- serialization ----------------------------------------------------------

namespace {

json budget_mode_to_json(const BudgetMode& mode) {
    json j;
    j["kind"] = mode.kind == BudgetMode::Kind::Fixed ? "fixed" : "ratio";
    if (mode.kind == BudgetMode::Kind::Fixed)
        j["fixed"] = mode.fixed;
    else
        j["ratio"] = mode.ratio;
    return j;
}

BudgetMode budget_mode_from_json(const json& j) {
    BudgetMode mode;
    if (j.at("kind") == "fixed") {
        mode.kind = BudgetMode::Kind::Fixed;
        mode.fixed = j.at("fixed").get<std::uint32_t>();
    } else {
        mode.kind = BudgetMode::Kind::Ratio;
        mode.ratio = j.at("ratio").get<double>();
    }
    return mode;
}

}  // namespace

json policy_config_to_json(const PolicyConfig& c) {
    json j;
    j["policy"] = policy_name(c.policy);
    j["lambda"] = c.lambda;
    j["top_p"] = c.top_p;
    j["alpha_bound"] = c.alpha_bound;
    j["beta_bound"] = c.beta_bound;
    j["strict_bounds"] = c.strict_bounds;
    j["budget_mode"] = budget_mode_to_json(c.budget_mode);
    j["realloc_interval"] = c.realloc_interval;
    j["b_min"] = c.b_min;
    j["renormalize"] = c.renormalize;
    j["sink_size"] = c.sink_size;
    j["window_size"] = c.window_size;
    j["obs_window"] = c.obs_window;
    j["protect_recent"] = c.protect_recent;
    j["warmup_tracking"] = c.warmup_tracking;
    j["compress_answer"] = c.compress_answer;
    j["realloc_reset"] = c.realloc_reset;
    return j;
}

PolicyConfig policy_config_from_json(const json& j) {
    PolicyConfig c;
    c.policy = parse_policy(j.at("policy").get<std::string>());
    c.lambda = j.at("lambda").get<double>();
    c.top_p = j.at("top_p").get<double>();
    c.alpha_bound = j.at("alpha_bound").get<double>();
    c.beta_bound = j.at("beta_bound").get<double>();
    c.strict_bounds = j.at("strict_bounds").get<bool>();
    c.budget_mode = budget_mode_from_json(j.at("budget_mode"));
    c.realloc_interval = j.at("realloc_interval").get<std::uint32_t>();
    c.b_min = j.at("b_min").get<std::uint32_t>();
    c.renormalize = j.at("renormalize").get<bool>();
    c.sink_size = j.at("sink_size").get<std::uint32_t>();
    c.window_size = j.at("window_size").get<std::uint32_t>();
    c.obs_window = j.at("obs_window").get<std::uint32_t>();
    c.protect_recent = j.at("protect_recent").get<std::uint32_t>();
    c.warmup_tracking = j.at("warmup_tracking").get<bool>();
    c.compress_answer = j.at("compress_answer").get<bool>();
    c.realloc_reset = j.at("realloc_reset").get<bool>();
    return c;
}

void write_runlog_file(const RunLog& log, const std::string& path) {
    json doc;
    doc["magic"] = "CKVR";
    doc["schema_version"] = log.schema_version;
    doc["trace_fingerprint"] = log.trace_fingerprint;
    doc["num_layers"] = log.num_layers;
    doc["num_heads"] = log.num_heads;
    doc["think_start"] = log.think_start;
    doc["think_end"] = log.think_end;
    doc["b_total"] = log.b_total;
    doc["config"] = policy_config_to_json(log.config.policy);
    doc["record_visible_rows"] = log.config.record_visible_rows;
    doc["initial_budgets"] = log.initial_budgets;

    auto& boundary = doc["boundary"] = json::array();
    for (const BoundaryCell& cell : log.boundary) {
        json j;
        j["layer"] = cell.layer;
        j["head"] = cell.head;
        j["budget"] = cell.budget;
        j["retained"] = cell.retained;
        boundary.push_back(std::move(j));
    }

    auto& evictions = doc["evictions"] = json::array();
    for (const EvictionEvent& ev : log.evictions) {
        json j;
        j["step"] = ev.step;
        j["layer"] = ev.layer;
        j["head"] = ev.head;
        auto& list = j["evicted"] = json::array();
        for (const Eviction& e : ev.evicted)
            list.push_back(json::array({e.position, e.score}));
        evictions.push_back(std::move(j));
    }

    auto& reallocs = doc["reallocs"] = json::array();
    for (const ReallocEvent& ev : log.reallocs) {
        json j;
        j["step"] = ev.step;
        j["eta_layer"] = ev.eta_layer;
        j["eta_head"] = ev.eta_head;
        j["budgets"] = ev.budgets;
        reallocs.push_back(std::move(j));
    }

    if (log.config.record_visible_rows) {
        auto& rows = doc["visible_rows"] = json::array();
        for (const VisibleRow& row : log.visible_rows) {
            json j;
            j["step"] = row.step;
            j["layer"] = row.layer;
            j["head"] = row.head;
            j["positions"] = row.positions;
            j["values"] = row.values;
            rows.push_back(std::move(j));
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

RunLog read_runlog_file(const std::string& path) {
    std::ifstream is(path);
    if (!is)
        throw io_error("I/O error: cannot open " + path);
    json doc;
    try {
        is >> doc;
    } catch (const json::exception& e) {
        throw io_error("format error: " + path + ": " + e.what());
    }
    if (doc.value("magic", "") != "CKVR")
        throw io_error("format error: " + path + " is not a run log");
    if (doc.at("schema_version").get<std::uint32_t>() != kRunLogSchemaVersion)
        throw io_error("format error: unsupported run log schema in " + path);

    RunLog log;
    log.trace_fingerprint = doc.at("trace_fingerprint").get<std::uint64_t>();
    log.num_layers = doc.at("num_layers").get<std::uint32_t>();
    log.num_heads = doc.at("num_heads").get<std::uint32_t>();
    log.think_start = doc.at("think_start").get<Position>();
    log.think_end = doc.at("think_end").get<Position>();
    log.b_total = doc.at("b_total").get<std::uint64_t>();
    log.config.policy = policy_config_from_json(doc.at("config"));
    log.config.record_visible_rows = doc.at("record_visible_rows").get<bool>();
    log.initial_budgets = doc.at("initial_budgets").get<std::vector<std::uint32_t>>();

    for (const auto& j : doc.at("boundary")) {
        BoundaryCell cell;
        cell.layer = j.at("layer").get<std::uint32_t>();
        cell.head = j.at("head").get<std::uint32_t>();
        cell.budget = j.at("budget").get<std::uint32_t>();
        cell.retained = j.at("retained").get<std::vector<Position>>();
        log.boundary.push_back(std::move(cell));
    }
    for (const auto& j : doc.at("evictions")) {
        EvictionEvent ev;
        ev.step = j.at("step").get<Step>();
        ev.layer = j.at("layer").get<std::uint32_t>();
        ev.head = j.at("head").get<std::uint32_t>();
        for (const auto& e : j.at("evicted"))
            ev.evicted.push_back({e.at(0).get<Position>(), e.at(1).get<double>()});
        log.evictions.push_back(std::move(ev));
    }
    for (const auto& j : doc.at("reallocs")) {
        ReallocEvent ev;
        ev.step = j.at("step").get<Step>();
        ev.eta_layer = j.at("eta_layer").get<std::vector<double>>();
        ev.eta_head = j.at("eta_head").get<std::vector<double>>();
        ev.budgets = j.at("budgets").get<std::vector<std::uint32_t>>();
        log.reallocs.push_back(std::move(ev));
    }
    if (doc.contains("visible_rows")) {
        for (const auto& j : doc.at("visible_rows")) {
            VisibleRow row;
            row.step = j.at("step").get<Step>();
            row.layer = j.at("layer").get<std::uint32_t>();
            row.head = j.at("head").get<std::uint32_t>();
            row.positions = j.at("positions").get<std::vector<Position>>();
            row.values = j.at("values").get<std::vector<double>>();
            log.visible_rows.push_back(std::move(row));
        }
    }
    return log;
}

}  // namespace ckv
