#pragma once

// Stochastic hill climbing over model structures with a random or a
// diagnosis-guided operator selection policy.

#include <functional>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "valp/diagnostics.hpp"
#include "valp/operators.hpp"

namespace valp {

enum class Policy { Random, Guided };

inline std::string_view to_string(Policy p) { return p == Policy::Random ? "random" : "guided"; }

inline std::optional<Policy> parse_policy(std::string_view s) {
    if (s == "random") return Policy::Random;
    if (s == "guided") return Policy::Guided;
    return std::nullopt;
}

struct SearchConfig {
    std::size_t step_limit = 60;
    std::size_t initial_batches = 5000;
    std::size_t retrain_batches = 1000;
    Thresholds thresholds{};
    Policy policy = Policy::Guided;
    std::uint64_t seed = 0;
    bool probes = false;  // dependency probes are reported but no rule reads them
};

/// True iff at least two components of `left` are strictly lower than the
/// matching components of `right`.
inline bool dominates_2of3(const FitnessTuple& left, const FitnessTuple& right) {
    if (left.size() != 3 || right.size() != 3)
        throw std::invalid_argument("dominates_2of3: both tuples need exactly three losses");
    int lower = 0;
    for (std::size_t i = 0; i < 3; ++i) lower += left[i] < right[i];
    return lower >= 2;
}

// ---------------------------------------------------------------------------
// Rules

enum class PriorityClass { Reducer = 1, AggressiveExpander = 2, GentleExpander = 3 };

inline PriorityClass priority_of(const OperatorDescriptor& op) {
    if (taxonomy(op.kind).effect == ComplexityEffect::Reducer) return PriorityClass::Reducer;
    return op.variant == Variant::Aggressive ? PriorityClass::AggressiveExpander : PriorityClass::GentleExpander;
}

struct RuleMatch {
    OperatorDescriptor op;
    PriorityClass priority = PriorityClass::GentleExpander;
    std::string rule;  // R1..R6
};

/// Every operator suggested by the six rules, deduplicated by descriptor
/// (the lowest-numbered rule wins). Applicability is not checked here.
inline std::vector<RuleMatch> match_rules(const DiagnosisReport& report, const ModelGraph& m, const Thresholds& t = {}) {
    std::vector<RuleMatch> out;
    std::set<std::string> seen;
    auto emit = [&](const char* rule, OperatorKind k, Variant v, Target target) {
        OperatorDescriptor op{k, v, std::move(target), {}};
        if (seen.insert(op.text()).second) out.push_back({op, priority_of(op), rule});
    };

    // R1 to R3 read each output's slope class.
    for (const auto& o : m.outputs) {
        const auto it = report.loss_slope.find(o.id);
        if (it == report.loss_slope.end()) continue;
        const Subgraph full = output_subgraph(m, o.id);
        switch (classify_slope(it->second, t)) {
            case SlopeClass::Steep: {
                const Subgraph ex = exclusive_subgraph(m, o.id);
                for (NodeId n : ex.nets.empty() ? full.nets : ex.nets)
                    emit("R1", OperatorKind::CloneNetwork, Variant::Gentle, n);
                break;
            }
            case SlopeClass::Moderate:
                for (NodeId n : full.nets) {
                    for (NodeId d : full.nets)
                        if (d != n && !m.has_arc(n, d)) emit("R2", OperatorKind::AddConnection, Variant::Gentle, Arc{n, d});
                    if (!m.has_arc(n, o.id)) emit("R2", OperatorKind::AddConnection, Variant::Gentle, Arc{n, o.id});
                }
                break;
            case SlopeClass::Stuck:
                for (const Arc& a : full.arcs) emit("R3", OperatorKind::InsertNetwork, Variant::Aggressive, a);
                break;
        }
    }

    // R4 to R6 read each net's relevance for the outputs it reaches.
    for (const auto& n : m.nets) {
        std::set<NodeId> relevant, irrelevant;
        for (NodeId o : reached_outputs(m, n.id)) {
            const auto it = report.relevance.find({n.id, o});
            if (it == report.relevance.end()) continue;
            (is_relevant(it->second, t) ? relevant : irrelevant).insert(o);
        }
        if (irrelevant.empty()) continue;
        // Outgoing arcs leading towards an output the net does not matter for.
        std::vector<Arc> towards_irrelevant;
        for (NodeId c : m.consumers(n.id)) {
            const auto down = c.is_output() ? std::set<NodeId>{c} : reached_outputs(m, c);
            if (std::any_of(down.begin(), down.end(), [&](NodeId o) { return irrelevant.contains(o); }))
                towards_irrelevant.push_back({n.id, c});
        }
        if (!relevant.empty()) {
            for (const Arc& a : towards_irrelevant) emit("R4", OperatorKind::DeleteConnection, Variant::Aggressive, a);
            for (const Arc& a : towards_irrelevant) emit("R4", OperatorKind::InsertNetwork, Variant::Gentle, a);
            emit("R4", OperatorKind::CloneNetwork, Variant::Aggressive, n.id);
        }
        for (const Arc& a : towards_irrelevant) emit("R5", OperatorKind::DeleteConnection, Variant::Aggressive, a);
        if (relevant.empty()) emit("R6", OperatorKind::DeleteNetwork, Variant::Aggressive, n.id);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Selection

struct Selection {
    std::optional<OperatorDescriptor> op;  // empty: nothing left to try
    std::string rule;                      // R1..R6, "fallback", "random" or "none"
};

/// Uniform over applicable (kind, variant, target) triples of the structural operators.
inline Selection select_operator_random(const ModelGraph& m, Rng& rng) {
    auto candidates = applicable_operators(m, kStructuralKinds);
    if (candidates.empty()) return {std::nullopt, "none"};
    return {candidates[rng.index(candidates.size())], "random"};
}

namespace detail {

/// Gentle structural operators acting on one net: cloning it, inserting after
/// it and connecting it onwards.
inline std::vector<OperatorDescriptor> gentle_ops_on(const ModelGraph& m, NodeId net) {
    std::vector<OperatorDescriptor> out;
    out.push_back({OperatorKind::CloneNetwork, Variant::Gentle, net, {}});
    for (NodeId c : m.consumers(net)) out.push_back({OperatorKind::InsertNetwork, Variant::Gentle, Arc{net, c}, {}});
    for (const auto& d : m.nets)
        if (d.id != net && !m.has_arc(net, d.id)) out.push_back({OperatorKind::AddConnection, Variant::Gentle, Arc{net, d.id}, {}});
    for (const auto& o : m.outputs)
        if (!m.has_arc(net, o.id)) out.push_back({OperatorKind::AddConnection, Variant::Gentle, Arc{net, o.id}, {}});
    return out;
}

}  // namespace detail

/// Picks uniformly within the best priority class among the applicable,
/// non-excluded rule matches. Otherwise falls back to a gentle operator on a
/// random net, then to any applicable non-excluded mutation.
inline Selection select_operator_guided(const ModelGraph& m, const DiagnosisReport& report,
                                        const std::set<std::string>& excluded, Rng& rng, const Thresholds& t = {}) {
    std::vector<RuleMatch> best;
    for (auto& match : match_rules(report, m, t)) {
        if (excluded.contains(match.op.text()) || !applicable(m, match.op)) continue;
        if (!best.empty() && match.priority > best.front().priority) continue;
        if (!best.empty() && match.priority < best.front().priority) best.clear();
        best.push_back(std::move(match));
    }
    if (!best.empty()) {
        auto& pick = best[rng.index(best.size())];
        return {pick.op, pick.rule};
    }

    std::vector<NodeId> nets;
    for (const auto& n : m.nets) nets.push_back(n.id);
    rng.shuffle(nets);
    for (NodeId n : nets) {
        std::vector<OperatorDescriptor> ops;
        for (auto& op : detail::gentle_ops_on(m, n))
            if (!excluded.contains(op.text()) && applicable(m, op)) ops.push_back(std::move(op));
        if (!ops.empty()) return {ops[rng.index(ops.size())], "fallback"};
    }
    std::vector<OperatorDescriptor> any;
    for (auto& op : applicable_operators(m, kMutationKinds))
        if (!excluded.contains(op.text())) any.push_back(std::move(op));
    if (!any.empty()) return {any[rng.index(any.size())], "fallback"};
    return {std::nullopt, "none"};
}

// ---------------------------------------------------------------------------
// Hill climbing

struct SearchData {
    TaskData train;
    TaskData eval;
};

/// Replaceable stages of one step; unset members use the real training,
/// evaluation and diagnosis.
struct SearchHooks {
    std::function<LossTrace(ModelGraph&, std::size_t batches, std::uint64_t session_seed)> train;
    std::function<FitnessTuple(const ModelGraph&)> evaluate;
    std::function<DiagnosisReport(const ModelGraph&, const LossTrace&, std::size_t step)> diagnose;
};

struct StepRecord {
    std::size_t step = 0;                   // 0 is the initial model
    std::optional<OperatorDescriptor> op;
    std::string rule;
    bool accepted = false;
    FitnessTuple candidate;                 // candidate fitness, or NaNs when it failed
    FitnessTuple current;                   // incumbent fitness after this step
    std::string note;                       // failure reason, if any
};

struct SearchResult {
    ModelGraph model;
    FitnessTuple fitness;
    std::vector<StepRecord> history;        // initial row plus one row per step
};

namespace detail {

inline FitnessTuple nan_fitness(std::size_t n) { return {std::vector<double>(n, std::nan(""))}; }

inline SearchHooks complete_hooks(SearchHooks h, const SearchConfig& cfg, const SearchData& data) {
    if (!h.train)
        h.train = [&data](ModelGraph& m, std::size_t n, std::uint64_t seed) { return valp::train(m, data.train, n, seed); };
    if (!h.evaluate) h.evaluate = [&data](const ModelGraph& m) { return valp::evaluate(m, data.eval); };
    if (!h.diagnose)
        h.diagnose = [&data, cfg](const ModelGraph& m, const LossTrace& trace, std::size_t step) {
            return valp::diagnose(m, trace, data.eval,
                                  {.step = step, .window = 0, .noise_seed = derive_seed(cfg.seed, "intervention-noise", step),
                                   .probes = cfg.probes});
        };
    return h;
}

}  // namespace detail

/// Trains the initial model, then runs `step_limit` steps of: select an
/// operator, apply it to the incumbent, retrain the candidate, evaluate, and
/// accept iff the candidate 2-of-3 dominates the incumbent.
///
/// Step k retrains with session seed derive_seed(seed, "retrain", k) under both
/// policies, so paired runs see the same data order.
inline SearchResult hill_climb(const SearchConfig& cfg, const ModelGraph& initial, const SearchData& data,
                               SearchHooks hooks = {}) {
    require_valid(initial);
    hooks = detail::complete_hooks(std::move(hooks), cfg, data);
    Rng choice(derive_seed(cfg.seed, "operator-choice"));

    SearchResult r{initial, {}, {}};
    LossTrace trace = hooks.train(r.model, cfg.initial_batches, derive_seed(cfg.seed, "retrain", 0));
    r.fitness = hooks.evaluate(r.model);
    r.history.push_back({0, std::nullopt, "initial", true, r.fitness, r.fitness, {}});

    std::set<std::string> excluded;
    std::optional<DiagnosisReport> report;
    for (std::size_t step = 1; step <= cfg.step_limit; ++step) {
        Selection sel;
        if (cfg.policy == Policy::Random) {
            sel = select_operator_random(r.model, choice);
        } else {
            if (!report) report = hooks.diagnose(r.model, trace, step - 1);
            sel = select_operator_guided(r.model, *report, excluded, choice, cfg.thresholds);
        }
        StepRecord rec{step, sel.op, sel.rule, false, r.fitness, r.fitness, {}};
        if (!sel.op) {
            rec.note = "no applicable operator";
            r.history.push_back(std::move(rec));
            continue;
        }
        try {
            ModelGraph candidate = apply(r.model, *sel.op, derive_seed(cfg.seed, "step", step));
            LossTrace cand_trace = hooks.train(candidate, cfg.retrain_batches, derive_seed(cfg.seed, "retrain", step));
            rec.candidate = hooks.evaluate(candidate);
            rec.accepted = dominates_2of3(rec.candidate, r.fitness);
            if (rec.accepted) {
                r.model = std::move(candidate);
                r.fitness = rec.candidate;
                trace = std::move(cand_trace);
                excluded.clear();
                report.reset();
            }
        } catch (const GuardError& e) {
            rec.candidate = detail::nan_fitness(r.fitness.size());
            rec.note = e.what();
        } catch (const TrainingDivergedError& e) {
            rec.candidate = detail::nan_fitness(r.fitness.size());
            rec.note = e.what();
        }
        if (!rec.accepted) excluded.insert(sel.op->text());
        rec.current = r.fitness;
        r.history.push_back(std::move(rec));
    }
    return r;
}

// ---------------------------------------------------------------------------
// History log

inline void write_history_csv(std::ostream& os, const std::vector<StepRecord>& history) {
    const std::size_t outputs = history.empty() ? 3 : history.front().candidate.size();
    os << "step,operator,variant,target,rule_id,accepted";
    for (std::size_t i = 0; i < outputs; ++i) os << ",loss_o" << i;
    os << '\n';
    for (const auto& h : history) {
        os << h.step << ',';
        if (h.op)
            os << to_string(h.op->kind) << ',' << to_string(h.op->variant) << ',' << target_string(h.op->target);
        else
            os << (h.step == 0 ? "initial" : "none") << ",na,model";
        os << ',' << h.rule << ',' << (h.accepted ? 1 : 0);
        for (double v : h.candidate.losses) os << ',' << format_real(v);
        os << '\n';
    }
}

}  // namespace valp
