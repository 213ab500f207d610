#include <gtest/gtest.h>

#include <sstream>

#include "fixtures.hpp"
#include "valp/search.hpp"

using namespace valp;
using fixture::node;

namespace {

FitnessTuple ft(double a, double b, double c) { return {{a, b, c}}; }

/// A report for `m` with one slope for every output and one relevance for
/// every connected (net, output) pair.
DiagnosisReport uniform_report(const ModelGraph& m, double slope, double relevance) {
    DiagnosisReport r;
    for (const auto& o : m.outputs) r.loss_slope[o.id] = slope;
    for (const auto& n : m.nets)
        for (NodeId o : reached_outputs(m, n.id)) r.relevance[{n.id, o}] = relevance;
    return r;
}

std::set<std::string> texts(const std::vector<RuleMatch>& matches, const char* rule = nullptr) {
    std::set<std::string> out;
    for (const auto& m : matches)
        if (!rule || m.rule == rule) out.insert(m.op.text());
    return out;
}

/// Hooks that skip training and score candidates with `score`.
SearchHooks stub_hooks(std::function<FitnessTuple()> score) {
    SearchHooks h;
    h.train = [](ModelGraph& m, std::size_t, std::uint64_t) {
        LossTrace t;
        for (const auto& o : m.outputs) t.outputs.push_back(o.id);
        t.batches.assign(2, std::vector<double>(m.outputs.size(), 1.0));
        return t;
    };
    h.evaluate = [score](const ModelGraph&) { return score(); };
    h.diagnose = [](const ModelGraph& m, const LossTrace&, std::size_t) { return uniform_report(m, -1e-3, 2.0); };
    return h;
}

/// Replays a history and checks that no step applied an operator excluded for
/// its incumbent. Returns the exclusion set size after each step.
std::vector<std::size_t> check_exclusions(const std::vector<StepRecord>& history) {
    std::set<std::string> excluded;
    std::vector<std::size_t> sizes;
    for (const auto& h : history) {
        if (h.step == 0) continue;
        if (h.op) {
            EXPECT_FALSE(excluded.contains(h.op->text())) << "step " << h.step << " reused " << h.op->text();
            if (h.accepted) excluded.clear();
            else excluded.insert(h.op->text());
        }
        sizes.push_back(excluded.size());
    }
    return sizes;
}

}  // namespace

TEST(Dominance, Examples) {
    EXPECT_TRUE(dominates_2of3(ft(1, 2, 3), ft(2, 3, 4)));
    EXPECT_TRUE(dominates_2of3(ft(1, 5, 1), ft(2, 1, 2)));
    EXPECT_FALSE(dominates_2of3(ft(5, 5, 1), ft(1, 1, 2)));
}

TEST(Dominance, ExhaustiveSignPatterns) {
    // Each component is lower, equal or higher: 27 ordered cases.
    const double delta[] = {-1.0, 0.0, 1.0};
    for (double a : delta)
        for (double b : delta)
            for (double c : delta) {
                const int lower = (a < 0) + (b < 0) + (c < 0);
                EXPECT_EQ(dominates_2of3(ft(5 + a, 5 + b, 5 + c), ft(5, 5, 5)), lower >= 2) << a << b << c;
            }
}

TEST(Dominance, IrreflexiveAndAsymmetric) {
    Rng rng(1);
    for (int i = 0; i < 2000; ++i) {
        auto x = ft(std::round(rng.uniform(0, 3)), std::round(rng.uniform(0, 3)), std::round(rng.uniform(0, 3)));
        auto y = ft(std::round(rng.uniform(0, 3)), std::round(rng.uniform(0, 3)), std::round(rng.uniform(0, 3)));
        EXPECT_FALSE(dominates_2of3(x, x));
        EXPECT_FALSE(dominates_2of3(x, y) && dominates_2of3(y, x));
    }
}

TEST(Dominance, RequiresThreeOutputs) {
    EXPECT_THROW(dominates_2of3({{1, 2}}, {{3, 4}}), std::invalid_argument);
}

TEST(Rules, SteepEverywhereOnlyClonesGently) {
    auto m = fixture::two_branch_model();
    auto matches = match_rules(uniform_report(m, -1e-3, 2.0), m);
    EXPECT_EQ(texts(matches), (std::set<std::string>{"clone_network:gentle:n0", "clone_network:gentle:n1",
                                                     "clone_network:gentle:n3", "clone_network:gentle:n4",
                                                     "clone_network:gentle:n5"}));
    for (const auto& r : matches) {
        EXPECT_EQ(r.rule, "R1");
        EXPECT_EQ(r.priority, PriorityClass::GentleExpander);
    }
}

TEST(Rules, NetIrrelevantEverywhereIsDeleted) {
    auto m = fixture::two_branch_model();
    auto report = uniform_report(m, -1e-3, 2.0);
    report.relevance[{node("n4"), node("o2")}] = 1.0;
    auto matches = match_rules(report, m);
    EXPECT_TRUE(texts(matches, "R6").contains("delete_network:aggressive:n4"));
    EXPECT_TRUE(texts(matches, "R5").contains("delete_connection:aggressive:n4>o2"));
}

TEST(Rules, ModerateOutputAddsConnections) {
    auto m = fixture::two_branch_model();
    auto report = uniform_report(m, -1e-3, 2.0);
    report.loss_slope[node("o1")] = -1e-7;
    auto r2 = texts(match_rules(report, m), "R2");
    EXPECT_TRUE(r2.contains("add_connection:gentle:n2>n3"));
    EXPECT_TRUE(r2.contains("add_connection:gentle:n3>o1"));
    EXPECT_FALSE(r2.contains("add_connection:gentle:n4>o1"));  // n4 is not part of o1
}

TEST(Rules, StuckOutputInsertsAggressively) {
    auto m = fixture::two_branch_model();
    auto report = uniform_report(m, -1e-3, 2.0);
    report.loss_slope[node("o2")] = 0.0;
    auto r3 = texts(match_rules(report, m), "R3");
    EXPECT_EQ(r3, (std::set<std::string>{"insert_network:aggressive:i0>n2", "insert_network:aggressive:i0>n6",
                                         "insert_network:aggressive:n2>n4", "insert_network:aggressive:n6>n4",
                                         "insert_network:aggressive:n4>o2"}));
}

TEST(Rules, MixedRelevanceOffersThreeOperators) {
    auto m = fixture::two_branch_model();
    auto report = uniform_report(m, -1e-3, 2.0);
    report.relevance[{node("n2"), node("o2")}] = 1.05;  // n2 still matters for o1
    auto matches = match_rules(report, m);
    EXPECT_EQ(texts(matches, "R4"), (std::set<std::string>{"delete_connection:aggressive:n2>n4",
                                                           "insert_network:gentle:n2>n4",
                                                           "clone_network:aggressive:n2"}));
    EXPECT_TRUE(texts(matches, "R5").empty());  // same descriptor already claimed by R4
    EXPECT_TRUE(texts(matches, "R6").empty());
    for (const auto& r : matches)
        if (r.op.text() == "clone_network:aggressive:n2") {
            EXPECT_EQ(r.priority, PriorityClass::AggressiveExpander);
        }
}

TEST(GuidedSelection, ReducersBeatExpanders) {
    auto m = fixture::two_branch_model();
    auto report = uniform_report(m, -1e-3, 2.0);
    report.relevance[{node("n4"), node("o2")}] = 1.0;
    for (std::uint64_t s = 0; s < 50; ++s) {
        Rng rng(s);
        auto sel = select_operator_guided(m, report, {}, rng);
        ASSERT_TRUE(sel.op);
        EXPECT_EQ(sel.op->text(), "delete_network:aggressive:n4");  // n4>o2 is o2's only arc
        EXPECT_EQ(sel.rule, "R6");
    }
}

TEST(GuidedSelection, ExclusionIsPerDescriptor) {
    auto m = fixture::two_branch_model();
    auto report = uniform_report(m, -1e-3, 2.0);
    report.relevance[{node("n4"), node("o2")}] = 1.0;
    report.relevance[{node("n1"), node("o1")}] = 1.0;
    const std::set<std::string> excluded{"delete_network:aggressive:n4"};
    for (std::uint64_t s = 0; s < 30; ++s) {
        Rng rng(s);
        auto sel = select_operator_guided(m, report, excluded, rng);
        ASSERT_TRUE(sel.op);
        EXPECT_EQ(sel.op->kind, OperatorKind::DeleteNetwork);
        EXPECT_EQ(sel.op->text(), "delete_network:aggressive:n1");
    }
}

TEST(GuidedSelection, FallsBackToAGentleOperatorWhenEverythingIsExcluded) {
    auto m = fixture::two_branch_model();
    auto report = uniform_report(m, -1e-3, 2.0);
    auto excluded = texts(match_rules(report, m));
    for (std::uint64_t s = 0; s < 30; ++s) {
        Rng rng(s);
        auto sel = select_operator_guided(m, report, excluded, rng);
        ASSERT_TRUE(sel.op);
        EXPECT_EQ(sel.rule, "fallback");
        EXPECT_EQ(sel.op->variant, Variant::Gentle);
        EXPECT_FALSE(excluded.contains(sel.op->text()));
    }
}

TEST(GuidedSelection, PriorityPropertyOnRandomReports) {
    auto problem = benchmark_problem(9, 3);
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
        auto m = random_model(problem, seed);
        Rng rng(seed);
        DiagnosisReport report;
        for (const auto& o : m.outputs) report.loss_slope[o.id] = -std::pow(10.0, rng.uniform(-12, -2));
        for (const auto& n : m.nets)
            for (NodeId o : reached_outputs(m, n.id)) report.relevance[{n.id, o}] = rng.uniform(0.9, 1.5);
        PriorityClass best = PriorityClass::GentleExpander;
        bool any = false;
        for (const auto& r : match_rules(report, m))
            if (applicable(m, r.op)) {
                best = std::min(best, r.priority);
                any = true;
            }
        auto sel = select_operator_guided(m, report, {}, rng);
        ASSERT_TRUE(sel.op);
        if (any) {
            EXPECT_EQ(priority_of(*sel.op), best) << "seed " << seed;
        }
    }
}

TEST(RandomSelection, SingleNetModelNeverDeletesItsNet) {
    auto m = fixture::minimal_model();
    Rng rng(3);
    for (int i = 0; i < 200; ++i) {
        auto sel = select_operator_random(m, rng);
        ASSERT_TRUE(sel.op);
        EXPECT_NE(sel.op->kind, OperatorKind::DeleteNetwork);
    }
}

TEST(RandomSelection, UniformOverApplicableTriples) {
    auto m = fixture::two_branch_model();
    const auto candidates = applicable_operators(m, kStructuralKinds);
    std::map<std::string, double> counts;
    for (const auto& c : candidates) counts[c.text()] = 0;
    // Drawing from the precomputed list keeps the check fast; the list equals
    // what select_operator_random builds.
    Rng rng(11);
    const int draws = 10000;
    for (int i = 0; i < draws; ++i) {
        if (i < 50) {
            Rng probe(i);
            auto a = select_operator_random(m, probe);
            Rng again(i);
            EXPECT_EQ(a.op->text(), candidates[again.index(candidates.size())].text());
        }
        counts[candidates[rng.index(candidates.size())].text()] += 1;
    }
    const double k = static_cast<double>(candidates.size());
    const double expected = draws / k;
    double chi2 = 0;
    for (const auto& [t, c] : counts) chi2 += (c - expected) * (c - expected) / expected;
    // Within three standard deviations of the chi-square mean (k - 1 dof).
    EXPECT_LT(chi2, (k - 1) + 3 * std::sqrt(2 * (k - 1)));
    for (const auto& c : candidates) EXPECT_TRUE(std::find(kStructuralKinds.begin(), kStructuralKinds.end(), c.kind) != kStructuralKinds.end());
}

TEST(RandomSelection, SeededDeterminism) {
    auto m = fixture::two_branch_model();
    Rng a(5), b(5);
    for (int i = 0; i < 20; ++i) EXPECT_EQ(select_operator_random(m, a).op->text(), select_operator_random(m, b).op->text());
}

TEST(HillClimb, ZeroStepsReturnsTheTrainedInitialModel) {
    auto m = random_model(benchmark_problem(6, 3), 3);
    auto data = fixture::random_task(m, 40, 1);
    SearchConfig cfg{.step_limit = 0, .initial_batches = 10, .retrain_batches = 5, .seed = 2};
    auto r = hill_climb(cfg, m, {data, data});
    auto expected = m;
    train(expected, data, 10, derive_seed(2, "retrain", 0));
    EXPECT_EQ(r.model, expected);
    EXPECT_EQ(r.fitness, evaluate(expected, data));
    ASSERT_EQ(r.history.size(), 1u);
    EXPECT_EQ(r.history[0].step, 0u);
}

TEST(HillClimb, StubWhereEveryCandidateDominatesAcceptsAllSteps) {
    auto m = fixture::two_branch_model();
    auto data = fixture::random_task(m, 10, 1);
    double level = 1e6;
    SearchConfig cfg{.step_limit = 60, .policy = Policy::Random, .seed = 4};
    auto r = hill_climb(cfg, m, {data, data}, stub_hooks([&] {
                            level *= 0.9;
                            return ft(level, level, level);
                        }));
    ASSERT_EQ(r.history.size(), 61u);
    for (std::size_t i = 1; i < r.history.size(); ++i) EXPECT_TRUE(r.history[i].accepted) << i;
    EXPECT_NE(r.model, m);
}

TEST(HillClimb, StubWhereNothingDominatesKeepsIncumbentAndGrowsExclusions) {
    auto m = fixture::two_branch_model();
    auto data = fixture::random_task(m, 10, 1);
    SearchConfig cfg{.step_limit = 60, .policy = Policy::Guided, .seed = 4};
    auto r = hill_climb(cfg, m, {data, data}, stub_hooks([] { return ft(1, 1, 1); }));
    EXPECT_EQ(r.model, m);
    for (std::size_t i = 1; i < r.history.size(); ++i) EXPECT_FALSE(r.history[i].accepted);
    auto sizes = check_exclusions(r.history);
    for (std::size_t i = 1; i < sizes.size(); ++i) EXPECT_GE(sizes[i], sizes[i - 1]);
    EXPECT_EQ(sizes.back(), 60u);
    // The first five steps exhaust the gentle clones suggested by R1.
    for (std::size_t i = 1; i <= 5; ++i) EXPECT_EQ(r.history[i].rule, "R1");
    EXPECT_EQ(r.history[6].rule, "fallback");
}

TEST(HillClimb, RealRunsKeepTheirInvariantsAndReplayExactly) {
    auto problem = benchmark_problem(6, 3);
    for (Policy policy : {Policy::Random, Policy::Guided}) {
        auto m = random_model(problem, 21, {.batch_size = 16});
        auto train_data = fixture::random_task(m, 80, 1);
        auto eval_data = fixture::random_task(m, 40, 2);
        SearchConfig cfg{.step_limit = 8, .initial_batches = 20, .retrain_batches = 5, .policy = policy, .seed = 9};
        auto a = hill_climb(cfg, m, {train_data, eval_data});
        auto b = hill_climb(cfg, m, {train_data, eval_data});
        std::ostringstream ca, cb;
        write_history_csv(ca, a.history);
        write_history_csv(cb, b.history);
        EXPECT_EQ(ca.str(), cb.str());
        EXPECT_EQ(a.model, b.model);
        EXPECT_TRUE(validate(a.model).empty());
        for (std::size_t i = 1; i < a.history.size(); ++i) {
            const auto& h = a.history[i];
            if (h.accepted) {
                EXPECT_TRUE(dominates_2of3(h.candidate, a.history[i - 1].current));
            }
            EXPECT_EQ(h.current, h.accepted ? h.candidate : a.history[i - 1].current);
        }
        if (policy == Policy::Guided) check_exclusions(a.history);
    }
}

TEST(HistoryCsv, Columns) {
    std::vector<StepRecord> h{{0, std::nullopt, "initial", true, ft(1, 2, 3), ft(1, 2, 3), {}},
                              {1, OperatorDescriptor{OperatorKind::CloneNetwork, Variant::Gentle, node("n2"), {}}, "R1",
                               false, ft(0.5, 2.5, 3), ft(1, 2, 3), {}}};
    std::ostringstream os;
    write_history_csv(os, h);
    EXPECT_EQ(os.str(),
              "step,operator,variant,target,rule_id,accepted,loss_o0,loss_o1,loss_o2\n"
              "0,initial,na,model,initial,1,1,2,3\n"
              "1,clone_network,gentle,n2,R1,0,0.5,2.5,3\n");
}
