#pragma once

#include <string>
#include <utility>
#include <vector>

#include "valp/model.hpp"
#include "valp/random_model.hpp"

namespace valp::fixture {

struct NetShape {
    std::uint32_t id;
    std::vector<std::size_t> widths;  // output width of each layer
    Activation activation = Activation::ReLU;
    bool sampler = false;
};

inline NodeId node(const std::string& s) { return *parse_node_id(s); }

/// Builds a model with Glorot weights whose first layers fit the given arcs.
inline ModelGraph make_model(const ProblemSpec& problem, const std::vector<NetShape>& nets,
                             const std::vector<std::pair<std::string, std::string>>& arcs, std::uint64_t seed = 1) {
    Rng rng(seed);
    ModelGraph m = empty_model(problem, 16, OptimizerSpec{OptimizerKind::Adam, 0.01}, seed);
    for (const auto& shape : nets) {
        SubNetwork net;
        net.id = NodeId::net(shape.id);
        net.sampler = shape.sampler;
        std::size_t in = 1;
        for (std::size_t i = 0; i < shape.widths.size(); ++i) {
            const bool last = i + 1 == shape.widths.size();
            net.layers.push_back(glorot_layer(in, shape.widths[i], last && shape.sampler ? Activation::Identity : shape.activation, rng));
            in = shape.widths[i];
        }
        m.insert_net(std::move(net));
    }
    for (const auto& [a, b] : arcs) m.add_arc(node(a), node(b));
    detail::fit_first_layers(m, rng);
    return m;
}

inline ProblemSpec regression_problem(std::size_t in, std::vector<std::size_t> outs) {
    ProblemSpec p;
    p.inputs.push_back({in, "features"});
    for (auto d : outs) p.targets.push_back({OutputType::Regression, d});
    return p;
}

/// i0 -> n0 -> o0.
inline ModelGraph minimal_model(std::uint64_t seed = 1) {
    return make_model(regression_problem(3, {2}), {{0, {4}}}, {{"i0", "n0"}, {"n0", "o0"}}, seed);
}

/// The two-output example topology with exclusive parts {n1, n3, n5} for o1 and
/// {n4} for o2, shared n2 and n6; o0 hangs off its own chain through n0.
inline ModelGraph two_branch_model(std::uint64_t seed = 1) {
    return make_model(regression_problem(5, {2, 3, 2}),
                      {{0, {4}}, {1, {3}}, {2, {4}}, {3, {5}}, {4, {3}}, {5, {4}}, {6, {3}}},
                      {{"i0", "n0"}, {"n0", "o0"},
                       {"i0", "n6"}, {"i0", "n3"}, {"i0", "n2"}, {"i0", "n1"},
                       {"n2", "n4"}, {"n2", "n5"}, {"n3", "n1"}, {"n3", "n5"},
                       {"n6", "n5"}, {"n6", "n4"},
                       {"n4", "o2"}, {"n5", "o1"}, {"n1", "o1"}},
                      seed);
}

inline Matrix random_inputs(std::size_t rows, std::size_t cols, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Matrix x(rows, cols);
    for (double& v : x.values()) v = rng.uniform(lo, hi);
    return x;
}

inline std::map<NodeId, Matrix> probe_batch(const ModelGraph& m, std::size_t rows, std::uint64_t seed) {
    Rng rng(seed);
    std::map<NodeId, Matrix> in;
    for (const auto& i : m.inputs) in[i.id] = random_inputs(rows, i.feature_dim, rng, 0.0, 1.0);
    return in;
}

inline double max_output_difference(const ModelGraph& a, const ModelGraph& b, const std::map<NodeId, Matrix>& batch) {
    auto pa = forward_model(a, batch);
    auto pb = forward_model(b, batch);
    double worst = 0.0;
    for (const auto& [id, m] : pa) worst = std::max(worst, max_abs_difference(m, pb.at(id)));
    return worst;
}

/// Random data for a model: uniform inputs, targets shaped per output type.
inline TaskData random_task(const ModelGraph& m, std::size_t rows, std::uint64_t seed) {
    Rng rng(seed);
    TaskData d;
    for (const auto& i : m.inputs) d.inputs[i.id] = random_inputs(rows, i.feature_dim, rng, 0.0, 1.0);
    for (const auto& o : m.outputs) {
        Matrix t(rows, o.target_dim);
        if (o.type == OutputType::Classification) {
            for (std::size_t r = 0; r < rows; ++r) t(r, rng.index(o.target_dim)) = 1.0;
        } else {
            for (double& v : t.values()) v = rng.uniform();
        }
        d.targets[o.id] = std::move(t);
    }
    return d;
}

}  // namespace valp::fixture
