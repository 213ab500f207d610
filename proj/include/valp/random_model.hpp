#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <vector>

#include "valp/graph.hpp"

namespace valp {

struct RandomModelOptions {
    std::size_t min_nets = 0;  // 0 means |O|
    std::size_t max_nets = 0;  // 0 means 2|O|
    std::size_t min_width = 4;
    std::size_t max_width = 16;
    std::size_t min_latent = 2;
    std::size_t max_latent = 8;
    std::size_t max_layers = 2;
    double extra_arc_probability = 0.15;
    std::size_t batch_size = 32;
    OptimizerSpec optimizer{};
};

namespace detail {

inline Activation random_hidden_activation(Rng& rng) {
    static constexpr Activation choices[] = {Activation::ReLU, Activation::ReLU, Activation::Sigmoid, Activation::Identity};
    return choices[rng.index(std::size(choices))];
}

/// Fills each node's first layer so its rows match the current providers.
inline void fit_first_layers(ModelGraph& m, Rng& rng) {
    for (auto& net : m.nets) {
        auto& first = net.layers.front();
        std::size_t in = 0;
        for (NodeId p : m.providers(net.id)) in += m.published_width(p);
        first.weights = Matrix(in, first.out_dim());
        glorot_fill(first.weights, in, first.out_dim(), rng);
    }
    for (auto& o : m.outputs) {
        std::size_t in = 0;
        for (NodeId p : m.providers(o.id)) in += m.published_width(p);
        o.head.weights = Matrix(in, o.target_dim);
        glorot_fill(o.head.weights, in, o.target_dim, rng);
    }
}

}  // namespace detail

/// Inputs, outputs, losses and optimizers for `problem`, with no networks or arcs.
inline ModelGraph empty_model(const ProblemSpec& problem, std::size_t batch_size = 32, OptimizerSpec optimizer = {},
                              std::uint64_t seed = 0) {
    ModelGraph m;
    m.problem = problem;
    for (std::size_t j = 0; j < problem.inputs.size(); ++j)
        m.inputs.push_back({NodeId::input(static_cast<std::uint32_t>(j)), problem.inputs[j].dim, problem.inputs[j].role});
    for (std::size_t l = 0; l < problem.targets.size(); ++l) {
        const auto& t = problem.targets[l];
        OutputNode o;
        o.id = NodeId::output(static_cast<std::uint32_t>(l));
        o.target_dim = t.dim;
        o.type = t.type;
        o.head = DenseLayer{Matrix(0, t.dim), std::vector<double>(t.dim, 0.0), head_activation(t.type)};
        m.losses[o.id] = loss_for(t.type);
        m.training.optimizers[o.id] = optimizer;
        m.outputs.push_back(std::move(o));
    }
    m.training.batch_size = batch_size;
    m.training.seed = seed;
    return m;
}

/// A random valid model for `problem`. One chain of networks is grown per output
/// (the chain of a sampling output starts with a sampler network), chains are
/// fed from the inputs, and random extra forward arcs are added between
/// networks and from networks to outputs. Net ids increase along every arc, so
/// the result is acyclic by construction.
inline ModelGraph random_model(const ProblemSpec& problem, std::uint64_t seed, RandomModelOptions opt = {}) {
    const std::size_t n_out = problem.targets.size();
    if (n_out == 0 || problem.inputs.empty()) throw std::invalid_argument("random_model: problem needs inputs and targets");
    const std::size_t lo = opt.min_nets ? opt.min_nets : n_out;
    const std::size_t hi = opt.max_nets ? opt.max_nets : 2 * n_out;
    if (lo < n_out || hi < lo) throw std::invalid_argument("random_model: network range must satisfy |O| <= min <= max");
    if (opt.min_width == 0 || opt.max_width < opt.min_width || opt.min_latent == 0 || opt.max_latent < opt.min_latent ||
        opt.max_layers == 0)
        throw std::invalid_argument("random_model: invalid width or depth range");

    Rng rng(derive_seed(seed, "init"));
    ModelGraph m = empty_model(problem, opt.batch_size, opt.optimizer, seed);

    // Chain lengths: one net per output, the rest spread at random.
    const std::size_t total = rng.between(lo, hi);
    std::vector<std::size_t> length(n_out, 1);
    for (std::size_t extra = n_out; extra < total; ++extra) ++length[rng.index(n_out)];

    std::vector<std::vector<NodeId>> chains(n_out);
    std::uint32_t next = 0;
    for (std::size_t l = 0; l < n_out; ++l) {
        const bool sampling = problem.targets[l].type == OutputType::Sampling;
        for (std::size_t k = 0; k < length[l]; ++k) {
            SubNetwork net;
            net.id = NodeId::net(next++);
            net.sampler = sampling && k == 0;
            const std::size_t depth = rng.between(1, opt.max_layers);
            std::size_t in = 1;  // placeholder, fitted once arcs exist
            for (std::size_t i = 0; i < depth; ++i) {
                const bool last = i + 1 == depth;
                std::size_t width = rng.between(opt.min_width, opt.max_width);
                Activation act = detail::random_hidden_activation(rng);
                if (last && net.sampler) {
                    width = 2 * rng.between(opt.min_latent, opt.max_latent);
                    act = Activation::Identity;
                }
                net.layers.push_back(glorot_layer(in, width, act, rng));
                in = width;
            }
            chains[l].push_back(net.id);
            m.nets.push_back(std::move(net));
        }
    }

    // Chain arcs, inputs and outputs.
    for (std::size_t l = 0; l < n_out; ++l) {
        const auto& chain = chains[l];
        m.add_arc(m.inputs[l % m.inputs.size()].id, chain.front());
        for (std::size_t k = 1; k < chain.size(); ++k) m.add_arc(chain[k - 1], chain[k]);
        m.add_arc(chain.back(), m.outputs[l].id);
    }
    for (std::size_t j = n_out; j < m.inputs.size(); ++j) m.add_arc(m.inputs[j].id, chains[rng.index(n_out)].front());

    // Extra forward arcs.
    for (std::size_t a = 0; a < m.nets.size(); ++a) {
        for (std::size_t b = a + 1; b < m.nets.size(); ++b)
            if (rng.bernoulli(opt.extra_arc_probability)) m.add_arc(m.nets[a].id, m.nets[b].id);
        for (const auto& o : m.outputs)
            if (rng.bernoulli(opt.extra_arc_probability)) m.add_arc(m.nets[a].id, o.id);
    }

    detail::fit_first_layers(m, rng);
    require_valid(m);
    return m;
}

/// A problem with one input of `input_dim` features and the three benchmark
/// objectives: classification over `classes`, an 8-bin histogram, and sampling
/// the input itself.
inline ProblemSpec benchmark_problem(std::size_t input_dim, std::size_t classes) {
    ProblemSpec p;
    p.inputs.push_back({input_dim, "pixels"});
    p.targets.push_back({OutputType::Classification, classes});
    p.targets.push_back({OutputType::Regression, 8});
    p.targets.push_back({OutputType::Sampling, input_dim});
    return p;
}

}  // namespace valp
