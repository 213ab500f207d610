#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "golden.hpp"
#include "oracles.hpp"
#include "valp/model.hpp"
#include "valp/serialize.hpp"

using namespace valp;
using fixture::node;

namespace {

ModelGraph identity_chain(std::size_t width, std::size_t length) {
    ModelGraph m = empty_model(fixture::regression_problem(width, {width}));
    for (std::uint32_t k = 0; k < length; ++k) {
        SubNetwork net;
        net.id = NodeId::net(k);
        net.layers.push_back({Matrix::identity(width), std::vector<double>(width, 0.0), Activation::Identity});
        m.insert_net(net);
        m.add_arc(k == 0 ? NodeId::input(0) : NodeId::net(k - 1), net.id);
    }
    m.add_arc(NodeId::net(static_cast<std::uint32_t>(length - 1)), NodeId::output(0));
    m.outputs[0].head.weights = Matrix::identity(width);
    return m;
}

std::string hex_matrix(const Matrix& m) {
    std::string s;
    for (std::size_t r = 0; r < m.rows(); ++r) {
        for (std::size_t c = 0; c < m.cols(); ++c) s += (c ? " " : "") + hex_double(m(r, c));
        s += '\n';
    }
    return s;
}

/// Total loss of one output with the sampler noise replayed from a fixed seed.
double replay_loss(const ModelGraph& m, const TaskData& d, NodeId o, SamplerMode mode) {
    Rng rng(99);
    auto trace = forward_trace(m, d.inputs, mode, &rng);
    return output_loss(m, trace, o, d.targets.at(o));
}

}  // namespace

TEST(ForwardModel, IdentityChainReturnsInput) {
    auto m = identity_chain(3, 4);
    ASSERT_TRUE(validate(m).empty());
    Matrix x{{0.5, -2.0, 7.25}, {1, 2, 3}};
    auto y = forward_model(m, {{NodeId::input(0), x}});
    EXPECT_EQ(y.at(NodeId::output(0)), x);
}

TEST(ForwardModel, ConsumerSeesProviderConcatenationInIdOrder) {
    auto m = fixture::make_model(fixture::regression_problem(2, {1}), {{0, {2}}, {1, {3}}},
                                 {{"i0", "n0"}, {"i0", "n1"}, {"n1", "o0"}, {"n0", "o0"}});
    ASSERT_TRUE(validate(m).empty());
    Matrix x{{0.1, 0.9}};
    auto trace = forward_trace(m, {{NodeId::input(0), x}});
    const Matrix& seen = trace.head_inputs.at(node("o0"));
    ASSERT_EQ(seen.cols(), 5u);
    const Matrix& a = trace.nodes.at(node("n0")).published;
    const Matrix& b = trace.nodes.at(node("n1")).published;
    for (std::size_t c = 0; c < 2; ++c) EXPECT_EQ(seen(0, c), a(0, c));
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(seen(0, 2 + c), b(0, c));
}

TEST(ForwardModel, GoldenOutputsReplayBitExact) {
    auto m = random_model(benchmark_problem(9, 3), 7);
    auto y = forward_model(m, fixture::probe_batch(m, 4, 5));
    std::string text;
    for (const auto& [id, mat] : y) text += to_string(id) + "\n" + hex_matrix(mat);
    EXPECT_EQ(golden::check("forward_seed7.txt", text), text);
}

TEST(ForwardModel, InvariantUnderOrderPreservingRelabel) {
    auto m = random_model(benchmark_problem(9, 3), 11);
    ModelGraph r = m;
    auto relabel = [](NodeId id) { return id.is_net() ? NodeId::net(3 * id.index + 2) : id; };
    for (auto& n : r.nets) n.id = relabel(n.id);
    for (auto& a : r.arcs) a = {relabel(a.from), relabel(a.to)};
    std::sort(r.arcs.begin(), r.arcs.end());
    ASSERT_TRUE(validate(r).empty());
    auto batch = fixture::probe_batch(m, 6, 1);
    EXPECT_EQ(forward_model(m, batch), forward_model(r, batch));
}

TEST(ForwardModel, WrongInputWidthThrows) {
    auto m = fixture::minimal_model();
    EXPECT_THROW(forward_model(m, {{NodeId::input(0), Matrix(2, 5)}}), ShapeError);
}

TEST(ModelBackward, MatchesFiniteDifferencesThroughDag) {
    for (std::uint64_t seed : {3u, 4u, 5u}) {
        auto m = random_model(benchmark_problem(6, 3), seed, {.max_width = 6, .max_latent = 3});
        auto data = fixture::random_task(m, 5, seed);
        const auto order = *topological_order(m);
        for (const auto& o : m.outputs) {
            for (SamplerMode mode : {SamplerMode::Mean, SamplerMode::Reparameterize}) {
                Rng rng(99);
                auto trace = forward_trace(m, data.inputs, mode, &rng);
                auto g = backward_output(m, trace, o.id, data.targets.at(o.id), mode, order);
                const double h = 1e-5;
                std::size_t failures = 0, checked = 0;
                auto check = [&](double& slot, double analytic) {
                    const double saved = slot;
                    slot = saved + h;
                    const double up = replay_loss(m, data, o.id, mode);
                    slot = saved - h;
                    const double down = replay_loss(m, data, o.id, mode);
                    slot = saved;
                    double err = 0;
                    ++checked;
                    if (!oracle::close_enough(analytic, (up - down) / (2 * h), 1e-4, err)) ++failures;
                };
                auto& head = m.find_output(o.id)->head;
                for (std::size_t i = 0; i < head.weights.size(); ++i) check(head.weights.values()[i], g.head.weights.values()[i]);
                for (std::size_t i = 0; i < head.bias.size(); ++i) check(head.bias[i], g.head.bias[i]);
                for (auto& net : m.nets) {
                    auto it = g.nets.find(net.id);
                    for (std::size_t l = 0; l < net.layers.size(); ++l) {
                        auto w = net.layers[l].weights.values();
                        for (std::size_t i = 0; i < w.size(); ++i)
                            check(w[i], it == g.nets.end() ? 0.0 : it->second[l].weights.values()[i]);
                        for (std::size_t i = 0; i < net.layers[l].bias.size(); ++i)
                            check(net.layers[l].bias[i], it == g.nets.end() ? 0.0 : it->second[l].bias[i]);
                    }
                }
                EXPECT_EQ(failures, 0u) << "seed " << seed << " " << to_string(o.id) << " of " << checked;
            }
        }
    }
}

TEST(Train, ZeroBatchesLeavesModelUntouched) {
    auto m = random_model(benchmark_problem(9, 3), 2);
    const auto before = m;
    auto trace = train(m, fixture::random_task(m, 20, 1), 0, 5);
    EXPECT_TRUE(trace.empty());
    EXPECT_EQ(m, before);
}

TEST(Train, TraceHasOneEntryPerOutputPerBatch) {
    auto m = random_model(benchmark_problem(9, 3), 2);
    auto trace = train(m, fixture::random_task(m, 50, 1), 17, 5);
    ASSERT_EQ(trace.size(), 17u);
    for (const auto& b : trace.batches) EXPECT_EQ(b.size(), 3u);
}

TEST(Train, LinearRegressionApproachesLeastSquaresOptimum) {
    // y = x A + c exactly, so the least-squares optimum has zero loss.
    auto m = fixture::make_model(fixture::regression_problem(3, {2}), {{0, {4}, Activation::Identity}},
                                 {{"i0", "n0"}, {"n0", "o0"}});
    m.training.optimizers[NodeId::output(0)] = OptimizerSpec{OptimizerKind::Adam, 0.02};
    Rng rng(4);
    Matrix x = fixture::random_inputs(200, 3, rng);
    Matrix a{{1.0, -2.0}, {0.5, 0.3}, {-1.0, 0.8}};
    Matrix y = matmul(x, a);
    for (std::size_t r = 0; r < y.rows(); ++r) {
        y(r, 0) += 0.25;
        y(r, 1) -= 0.5;
    }
    TaskData d{{{NodeId::input(0), x}}, {{NodeId::output(0), y}}};
    const double initial = evaluate(m, d)[0];
    auto trace = train(m, d, 500, 9);
    const double final = evaluate(m, d)[0];
    EXPECT_LT(final, 0.1 * initial);
    EXPECT_LT(final, 1e-2);  // optimum is 0
}

TEST(Train, SameSeedSameTrace) {
    auto base = random_model(benchmark_problem(9, 3), 8);
    auto data = fixture::random_task(base, 64, 2);
    auto a = deserialize(serialize(base));
    auto b = deserialize(serialize(base));
    auto ta = train(a, data, 30, 77);
    auto tb = train(b, data, 30, 77);
    EXPECT_EQ(ta, tb);
    EXPECT_EQ(a, b);
}

TEST(Train, DivergenceNamesTheBatch) {
    auto m = fixture::minimal_model();
    m.training.optimizers[NodeId::output(0)] = OptimizerSpec{OptimizerKind::SGD, 1e154};
    auto d = fixture::random_task(m, 20, 3);
    try {
        train(m, d, 50, 1);
        FAIL() << "expected divergence";
    } catch (const TrainingDivergedError& e) {
        EXPECT_LT(e.batch(), 50u);
    }
}

TEST(Train, InvalidModelRejected) {
    auto m = fixture::minimal_model();
    m.arcs.clear();
    EXPECT_THROW(train(m, fixture::random_task(fixture::minimal_model(), 4, 1), 1, 0), InvalidModelError);
}

TEST(Evaluate, PerfectClassifierHasNearZeroCrossEntropy) {
    ProblemSpec p;
    p.inputs.push_back({3, "onehot"});
    p.targets.push_back({OutputType::Classification, 3});
    auto m = fixture::make_model(p, {{0, {3}, Activation::Identity}}, {{"i0", "n0"}, {"n0", "o0"}});
    m.nets[0].layers[0].weights = Matrix::identity(3);
    m.outputs[0].head.weights = Matrix::identity(3);
    for (double& v : m.outputs[0].head.weights.values()) v *= 100.0;
    Matrix x{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {0, 1, 0}};
    TaskData d{{{NodeId::input(0), x}}, {{NodeId::output(0), x}}};
    auto f = evaluate(m, d);
    EXPECT_GE(f[0], 0.0);
    EXPECT_LE(f[0], 1e-10);
}

TEST(Evaluate, MmdOfIdenticalSamplesIsZero) {
    Rng rng(1);
    Matrix x = fixture::random_inputs(30, 4, rng);
    EXPECT_NEAR(mmd_squared(x, x), 0.0, 1e-15);
    Matrix y = fixture::random_inputs(30, 4, rng, 3.0, 4.0);
    EXPECT_GT(mmd_squared(y, x), 0.1);
}

TEST(Evaluate, MedianPairwiseDistanceByHand) {
    // Distances: 1, 2, 3 -> median 2.
    Matrix x{{0.0}, {1.0}, {2.0}};
    Matrix y{{0.0}, {1.0}, {3.0}};
    EXPECT_DOUBLE_EQ(median_pairwise_distance(x), 1.0);
    EXPECT_DOUBLE_EQ(median_pairwise_distance(y), 2.0);
}

TEST(Evaluate, GoldenFitnessReplaysBitExact) {
    auto m = random_model(benchmark_problem(9, 3), 21);
    auto data = fixture::random_task(m, 40, 6);
    train(m, data, 20, 3);
    auto f = evaluate(m, data, 12);
    std::string text;
    for (double v : f.losses) text += hex_double(v) + "\n";
    EXPECT_EQ(golden::check("fitness_seed21.txt", text), text);
    EXPECT_TRUE(f.all_finite());
}
