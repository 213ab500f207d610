#pragma once

// The multi-network model as a directed acyclic graph of model inputs,
// sub-networks and model outputs, plus structural validation and the
// subgraph queries used by the operators and the diagnosis rules.

#include <algorithm>
#include <charconv>
#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <queue>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "valp/nn.hpp"

namespace valp {

enum class NodeKind : std::uint8_t { Input, Net, Output };

/// Typed component identifier. Ordering is Input < Net < Output, then index;
/// providers of a node are concatenated in this order.
struct NodeId {
    NodeKind kind = NodeKind::Net;
    std::uint32_t index = 0;

    static constexpr NodeId input(std::uint32_t i) { return {NodeKind::Input, i}; }
    static constexpr NodeId net(std::uint32_t i) { return {NodeKind::Net, i}; }
    static constexpr NodeId output(std::uint32_t i) { return {NodeKind::Output, i}; }

    bool is_input() const noexcept { return kind == NodeKind::Input; }
    bool is_net() const noexcept { return kind == NodeKind::Net; }
    bool is_output() const noexcept { return kind == NodeKind::Output; }

    friend auto operator<=>(const NodeId&, const NodeId&) = default;
};

inline std::string to_string(NodeId id) {
    const char prefix = id.kind == NodeKind::Input ? 'i' : id.kind == NodeKind::Net ? 'n' : 'o';
    return prefix + std::to_string(id.index);
}

inline std::optional<NodeId> parse_node_id(std::string_view s) {
    if (s.size() < 2) return std::nullopt;
    NodeKind kind;
    switch (s.front()) {
        case 'i': kind = NodeKind::Input; break;
        case 'n': kind = NodeKind::Net; break;
        case 'o': kind = NodeKind::Output; break;
        default: return std::nullopt;
    }
    std::uint32_t index = 0;
    auto [ptr, ec] = std::from_chars(s.data() + 1, s.data() + s.size(), index);
    if (ec != std::errc{} || ptr != s.data() + s.size()) return std::nullopt;
    return NodeId{kind, index};
}

struct Arc {
    NodeId from;
    NodeId to;

    friend auto operator<=>(const Arc&, const Arc&) = default;
};

inline std::string to_string(const Arc& a) { return to_string(a.from) + ">" + to_string(a.to); }

enum class OutputType { Classification, Regression, Sampling };

inline std::string_view to_string(OutputType t) {
    switch (t) {
        case OutputType::Classification: return "classification";
        case OutputType::Regression: return "regression";
        case OutputType::Sampling: return "sampling";
    }
    return "?";
}

inline std::optional<OutputType> parse_output_type(std::string_view s) {
    if (s == "classification") return OutputType::Classification;
    if (s == "regression") return OutputType::Regression;
    if (s == "sampling") return OutputType::Sampling;
    return std::nullopt;
}

/// Terminal activation each output type requires.
constexpr Activation head_activation(OutputType t) {
    switch (t) {
        case OutputType::Classification: return Activation::Softmax;
        case OutputType::Regression: return Activation::Identity;
        case OutputType::Sampling: return Activation::Sigmoid;
    }
    return Activation::Identity;
}

constexpr LossKind loss_for(OutputType t) {
    switch (t) {
        case OutputType::Classification: return LossKind::CrossEntropy;
        case OutputType::Regression: return LossKind::MeanSquaredError;
        case OutputType::Sampling: return LossKind::ReconstructionPlusKL;
    }
    return LossKind::MeanSquaredError;
}

struct InputSpec {
    std::size_t dim = 0;
    std::string role;
    friend bool operator==(const InputSpec&, const InputSpec&) = default;
};

struct TargetSpec {
    OutputType type = OutputType::Regression;
    std::size_t dim = 0;
    friend bool operator==(const TargetSpec&, const TargetSpec&) = default;
};

/// The data contract a model must satisfy: input i_j has inputs[j].dim features,
/// output o_l predicts targets[l].
struct ProblemSpec {
    std::vector<InputSpec> inputs;
    std::vector<TargetSpec> targets;
    friend bool operator==(const ProblemSpec&, const ProblemSpec&) = default;
};

struct InputNode {
    NodeId id;
    std::size_t feature_dim = 0;
    std::string role;
    friend bool operator==(const InputNode&, const InputNode&) = default;
};

/// A model output. The head is the output's own terminal dense layer mapping the
/// concatenated provider features to the target, activated per output type.
struct OutputNode {
    NodeId id;
    std::size_t target_dim = 0;
    OutputType type = OutputType::Regression;
    DenseLayer head;
    friend bool operator==(const OutputNode&, const OutputNode&) = default;
};

/// An internal node: a dense multilayer perceptron. A sampler net's last layer
/// emits (mu, log variance) pairs and the node publishes the reparameterized
/// sample, so its output width is half the last layer's width.
struct SubNetwork {
    NodeId id;
    std::vector<DenseLayer> layers;
    bool sampler = false;

    std::size_t input_dim() const { return layers.empty() ? 0 : layers.front().in_dim(); }
    std::size_t raw_output_dim() const { return layers.empty() ? 0 : layers.back().out_dim(); }
    std::size_t output_dim() const { return sampler ? raw_output_dim() / 2 : raw_output_dim(); }
    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& l : layers) n += l.parameter_count();
        return n;
    }
    friend bool operator==(const SubNetwork&, const SubNetwork&) = default;
};

struct TrainingConfig {
    std::size_t batch_size = 32;
    std::map<NodeId, OptimizerSpec> optimizers;  // per model output
    std::uint64_t seed = 0;
    friend bool operator==(const TrainingConfig&, const TrainingConfig&) = default;
};

struct ModelGraph {
    ProblemSpec problem;
    std::vector<InputNode> inputs;
    std::vector<SubNetwork> nets;      // ascending id
    std::vector<OutputNode> outputs;   // o_0 .. o_{m-1}
    std::vector<Arc> arcs;             // ascending
    std::map<NodeId, LossKind> losses;
    TrainingConfig training;

    friend bool operator==(const ModelGraph&, const ModelGraph&) = default;

    const InputNode* find_input(NodeId id) const {
        for (const auto& n : inputs)
            if (n.id == id) return &n;
        return nullptr;
    }
    const SubNetwork* find_net(NodeId id) const {
        auto it = std::lower_bound(nets.begin(), nets.end(), id, [](const SubNetwork& n, NodeId k) { return n.id < k; });
        return it != nets.end() && it->id == id ? &*it : nullptr;
    }
    SubNetwork* find_net(NodeId id) { return const_cast<SubNetwork*>(std::as_const(*this).find_net(id)); }
    const OutputNode* find_output(NodeId id) const {
        for (const auto& n : outputs)
            if (n.id == id) return &n;
        return nullptr;
    }
    OutputNode* find_output(NodeId id) { return const_cast<OutputNode*>(std::as_const(*this).find_output(id)); }

    bool contains(NodeId id) const {
        switch (id.kind) {
            case NodeKind::Input: return find_input(id) != nullptr;
            case NodeKind::Net: return find_net(id) != nullptr;
            case NodeKind::Output: return find_output(id) != nullptr;
        }
        return false;
    }

    bool has_arc(NodeId from, NodeId to) const { return std::binary_search(arcs.begin(), arcs.end(), Arc{from, to}); }

    /// Sources of arcs into `id`, ascending: the concatenation order of its input.
    std::vector<NodeId> providers(NodeId id) const {
        std::vector<NodeId> out;
        for (const auto& a : arcs)
            if (a.to == id) out.push_back(a.from);
        std::sort(out.begin(), out.end());
        return out;
    }

    std::vector<NodeId> consumers(NodeId id) const {
        std::vector<NodeId> out;
        for (const auto& a : arcs)
            if (a.from == id) out.push_back(a.to);
        std::sort(out.begin(), out.end());
        return out;
    }

    /// Width of the data a component publishes; 0 for outputs and unknown ids.
    std::size_t published_width(NodeId id) const {
        if (id.is_input()) {
            const auto* n = find_input(id);
            return n ? n->feature_dim : 0;
        }
        if (id.is_net()) {
            const auto* n = find_net(id);
            return n ? n->output_dim() : 0;
        }
        return 0;
    }

    /// Width the component's first layer expects.
    std::size_t declared_input_width(NodeId id) const {
        if (id.is_net()) {
            const auto* n = find_net(id);
            return n ? n->input_dim() : 0;
        }
        if (id.is_output()) {
            const auto* n = find_output(id);
            return n ? n->head.in_dim() : 0;
        }
        return 0;
    }

    /// First-layer input rows belonging to `provider` within consumer `id`: [offset, offset+width).
    std::pair<std::size_t, std::size_t> provider_rows(NodeId id, NodeId provider) const {
        std::size_t offset = 0;
        for (NodeId p : providers(id)) {
            if (p == provider) return {offset, published_width(p)};
            offset += published_width(p);
        }
        return {offset, 0};
    }

    DenseLayer& first_layer(NodeId id) {
        if (id.is_output()) return find_output(id)->head;
        return find_net(id)->layers.front();
    }
    const DenseLayer& first_layer(NodeId id) const {
        if (id.is_output()) return find_output(id)->head;
        return find_net(id)->layers.front();
    }

    NodeId next_net_id() const {
        return NodeId::net(nets.empty() ? 0 : nets.back().id.index + 1);
    }

    void add_arc(NodeId from, NodeId to) {
        Arc a{from, to};
        auto it = std::lower_bound(arcs.begin(), arcs.end(), a);
        if (it == arcs.end() || *it != a) arcs.insert(it, a);
    }

    void remove_arc(NodeId from, NodeId to) {
        Arc a{from, to};
        auto it = std::lower_bound(arcs.begin(), arcs.end(), a);
        if (it != arcs.end() && *it == a) arcs.erase(it);
    }

    void insert_net(SubNetwork net) {
        auto it = std::lower_bound(nets.begin(), nets.end(), net.id,
                                   [](const SubNetwork& n, NodeId k) { return n.id < k; });
        nets.insert(it, std::move(net));
    }

    void erase_net(NodeId id) {
        std::erase_if(nets, [&](const SubNetwork& n) { return n.id == id; });
        std::erase_if(arcs, [&](const Arc& a) { return a.from == id || a.to == id; });
    }

    std::vector<NodeId> net_ids() const {
        std::vector<NodeId> out;
        for (const auto& n : nets) out.push_back(n.id);
        return out;
    }
};

/// Total trainable parameters: every sub-network plus every output head.
inline std::size_t weight_count(const ModelGraph& m) {
    std::size_t n = 0;
    for (const auto& net : m.nets) n += net.parameter_count();
    for (const auto& o : m.outputs) n += o.head.parameter_count();
    return n;
}

// ---------------------------------------------------------------------------
// Graph queries

/// Deterministic topological order (smallest ready id first); nullopt on a cycle.
inline std::optional<std::vector<NodeId>> topological_order(const ModelGraph& m) {
    std::map<NodeId, std::size_t> in_degree;
    for (const auto& n : m.inputs) in_degree[n.id] = 0;
    for (const auto& n : m.nets) in_degree[n.id] = 0;
    for (const auto& n : m.outputs) in_degree[n.id] = 0;
    std::map<NodeId, std::vector<NodeId>> out_edges;
    for (const auto& a : m.arcs) {
        if (!in_degree.contains(a.from) || !in_degree.contains(a.to)) continue;
        ++in_degree[a.to];
        out_edges[a.from].push_back(a.to);
    }
    std::priority_queue<NodeId, std::vector<NodeId>, std::greater<>> ready;
    for (const auto& [id, d] : in_degree)
        if (d == 0) ready.push(id);
    std::vector<NodeId> order;
    while (!ready.empty()) {
        NodeId id = ready.top();
        ready.pop();
        order.push_back(id);
        for (NodeId next : out_edges[id])
            if (--in_degree[next] == 0) ready.push(next);
    }
    if (order.size() != in_degree.size()) return std::nullopt;
    return order;
}

/// Every node with a directed path to `target` (excluding `target`).
inline std::set<NodeId> ancestors(const ModelGraph& m, NodeId target) {
    std::set<NodeId> seen;
    std::vector<NodeId> stack{target};
    while (!stack.empty()) {
        NodeId id = stack.back();
        stack.pop_back();
        for (const auto& a : m.arcs)
            if (a.to == id && seen.insert(a.from).second) stack.push_back(a.from);
    }
    seen.erase(target);
    return seen;
}

/// Every node reachable from `source` (excluding `source`).
inline std::set<NodeId> descendants(const ModelGraph& m, NodeId source) {
    std::set<NodeId> seen;
    std::vector<NodeId> stack{source};
    while (!stack.empty()) {
        NodeId id = stack.back();
        stack.pop_back();
        for (const auto& a : m.arcs)
            if (a.from == id && seen.insert(a.to).second) stack.push_back(a.to);
    }
    seen.erase(source);
    return seen;
}

/// Model outputs reachable from a component.
inline std::set<NodeId> reached_outputs(const ModelGraph& m, NodeId component) {
    std::set<NodeId> out;
    if (component.is_output()) out.insert(component);
    for (NodeId d : descendants(m, component))
        if (d.is_output()) out.insert(d);
    return out;
}

/// A set of sub-networks together with the arcs that feed them or the output.
struct Subgraph {
    std::set<NodeId> nets;
    std::set<Arc> arcs;

    bool contains(NodeId id) const { return nets.contains(id); }
    friend bool operator==(const Subgraph&, const Subgraph&) = default;
};

inline void require_output(const ModelGraph& m, NodeId output) {
    if (!output.is_output() || !m.find_output(output))
        throw std::out_of_range("unknown model output " + to_string(output));
}

/// All sub-networks (and arcs) whose modification can alter the prediction of `output`.
inline Subgraph output_subgraph(const ModelGraph& m, NodeId output) {
    require_output(m, output);
    Subgraph g;
    for (NodeId a : ancestors(m, output))
        if (a.is_net()) g.nets.insert(a);
    for (const auto& arc : m.arcs)
        if (arc.to == output || g.nets.contains(arc.to)) g.arcs.insert(arc);
    return g;
}

/// The output subgraph minus every component that also reaches another output.
inline Subgraph exclusive_subgraph(const ModelGraph& m, NodeId output) {
    require_output(m, output);
    Subgraph g;
    for (NodeId a : ancestors(m, output)) {
        if (!a.is_net()) continue;
        auto reached = reached_outputs(m, a);
        if (reached.size() == 1 && *reached.begin() == output) g.nets.insert(a);
    }
    // Arcs into the output from shared providers stay with the shared part.
    for (const auto& arc : m.arcs)
        if (g.nets.contains(arc.to) || (arc.to == output && g.nets.contains(arc.from))) g.arcs.insert(arc);
    return g;
}

// ---------------------------------------------------------------------------
// Validation

enum class ViolationKind {
    ProblemMismatch,   // inputs/outputs disagree with the problem's inputs and targets
    OutputType,        // head activation, head width or loss disagree with the output type
    DanglingArc,       // arc endpoint does not exist
    IllegalArc,        // arc from an output, into an input, input straight to output, or self loop
    DuplicateArc,
    InvalidNode,       // zero dimensions, empty network, softmax inside a network, malformed sampler
    LayerChain,        // consecutive layer shapes do not chain
    InDegree,          // network or output receives no data
    OutDegree,         // network or input sends data nowhere
    WidthMismatch,     // first layer width differs from the concatenated provider widths
    Cyclic,
    MissingSampler,    // sampling output has no sampler network in its subgraph
    NonFinite,
    Training,          // batch size or optimizer configuration invalid
};

inline std::string_view to_string(ViolationKind k) {
    switch (k) {
        case ViolationKind::ProblemMismatch: return "problem_mismatch";
        case ViolationKind::OutputType: return "output_type";
        case ViolationKind::DanglingArc: return "dangling_arc";
        case ViolationKind::IllegalArc: return "illegal_arc";
        case ViolationKind::DuplicateArc: return "duplicate_arc";
        case ViolationKind::InvalidNode: return "invalid_node";
        case ViolationKind::LayerChain: return "layer_chain";
        case ViolationKind::InDegree: return "in_degree";
        case ViolationKind::OutDegree: return "out_degree";
        case ViolationKind::WidthMismatch: return "width_mismatch";
        case ViolationKind::Cyclic: return "cyclic";
        case ViolationKind::MissingSampler: return "missing_sampler";
        case ViolationKind::NonFinite: return "non_finite";
        case ViolationKind::Training: return "training";
    }
    return "?";
}

struct Violation {
    ViolationKind kind;
    std::string component;
    std::string message;
};

inline std::string to_string(const Violation& v) {
    return std::string(to_string(v.kind)) + " at " + v.component + ": " + v.message;
}

namespace detail {

inline bool layer_finite(const DenseLayer& l) {
    return l.weights.all_finite() &&
           std::all_of(l.bias.begin(), l.bias.end(), [](double v) { return std::isfinite(v); });
}

}  // namespace detail

/// Every structural-correctness violation in the model; empty iff the model is valid.
inline std::vector<Violation> validate(const ModelGraph& m) {
    std::vector<Violation> out;
    auto report = [&](ViolationKind k, std::string component, std::string message) {
        out.push_back({k, std::move(component), std::move(message)});
    };

    // Correspondence with the problem.
    if (m.inputs.size() != m.problem.inputs.size())
        report(ViolationKind::ProblemMismatch, "model",
               "has " + std::to_string(m.inputs.size()) + " inputs, problem has " +
                   std::to_string(m.problem.inputs.size()));
    if (m.outputs.size() != m.problem.targets.size())
        report(ViolationKind::ProblemMismatch, "model",
               "has " + std::to_string(m.outputs.size()) + " outputs, problem has " +
                   std::to_string(m.problem.targets.size()) + " targets");
    for (std::size_t j = 0; j < m.inputs.size(); ++j) {
        const auto& in = m.inputs[j];
        const std::string name = to_string(in.id);
        if (in.id != NodeId::input(static_cast<std::uint32_t>(j)))
            report(ViolationKind::ProblemMismatch, name, "input ids must be i0..i" + std::to_string(m.inputs.size() - 1));
        if (in.feature_dim == 0) report(ViolationKind::InvalidNode, name, "feature_dim must be positive");
        if (j < m.problem.inputs.size() && in.feature_dim != m.problem.inputs[j].dim)
            report(ViolationKind::ProblemMismatch, name, "feature_dim differs from the problem input");
    }
    for (std::size_t l = 0; l < m.outputs.size(); ++l) {
        const auto& o = m.outputs[l];
        const std::string name = to_string(o.id);
        if (o.id != NodeId::output(static_cast<std::uint32_t>(l)))
            report(ViolationKind::ProblemMismatch, name, "output ids must be o0..o" + std::to_string(m.outputs.size() - 1));
        if (o.target_dim == 0) report(ViolationKind::InvalidNode, name, "target_dim must be positive");
        if (l < m.problem.targets.size() &&
            (o.type != m.problem.targets[l].type || o.target_dim != m.problem.targets[l].dim))
            report(ViolationKind::ProblemMismatch, name, "type or width differs from the problem target");
        if (o.head.activation != head_activation(o.type))
            report(ViolationKind::OutputType, name,
                   std::string(to_string(o.type)) + " output needs a " +
                       std::string(to_string(head_activation(o.type))) + " terminal layer");
        if (o.head.out_dim() != o.target_dim || o.head.bias.size() != o.head.out_dim())
            report(ViolationKind::OutputType, name, "terminal layer width differs from target_dim");
        auto loss = m.losses.find(o.id);
        if (loss == m.losses.end() || loss->second != loss_for(o.type))
            report(ViolationKind::OutputType, name, "loss must be " + std::string(to_string(loss_for(o.type))));
        if (!detail::layer_finite(o.head)) report(ViolationKind::NonFinite, name, "non-finite weights");
    }
    for (const auto& [id, kind] : m.losses)
        if (!m.find_output(id)) report(ViolationKind::DanglingArc, to_string(id), "loss for unknown output");

    // Networks.
    for (std::size_t k = 0; k < m.nets.size(); ++k) {
        const auto& net = m.nets[k];
        const std::string name = to_string(net.id);
        if (!net.id.is_net()) report(ViolationKind::InvalidNode, name, "network id must be n<k>");
        if (k > 0 && !(m.nets[k - 1].id < net.id)) report(ViolationKind::InvalidNode, name, "network ids not unique/ascending");
        if (net.layers.empty()) {
            report(ViolationKind::InvalidNode, name, "network has no layers");
            continue;
        }
        for (std::size_t i = 0; i < net.layers.size(); ++i) {
            const auto& layer = net.layers[i];
            if (layer.in_dim() == 0 || layer.out_dim() == 0 || layer.bias.size() != layer.out_dim())
                report(ViolationKind::LayerChain, name, "layer " + std::to_string(i) + " has inconsistent shape");
            if (i > 0 && net.layers[i - 1].out_dim() != layer.in_dim())
                report(ViolationKind::LayerChain, name, "layer " + std::to_string(i) + " does not chain");
            if (layer.activation == Activation::Softmax)
                report(ViolationKind::InvalidNode, name, "softmax is reserved for classification outputs");
            if (!detail::layer_finite(layer)) report(ViolationKind::NonFinite, name, "non-finite weights");
        }
        if (net.sampler &&
            (net.raw_output_dim() % 2 != 0 || net.raw_output_dim() == 0 ||
             net.layers.back().activation != Activation::Identity))
            report(ViolationKind::InvalidNode, name, "sampler must end in an even-width identity layer");
    }

    // Arcs.
    for (std::size_t k = 0; k < m.arcs.size(); ++k) {
        const auto& a = m.arcs[k];
        const std::string name = to_string(a);
        if (k > 0 && !(m.arcs[k - 1] < a)) report(ViolationKind::DuplicateArc, name, "duplicate or unsorted arc");
        if (!m.contains(a.from) || !m.contains(a.to)) {
            report(ViolationKind::DanglingArc, name, "endpoint does not exist");
            continue;
        }
        if (a.from.is_output() || a.to.is_input() || a.from == a.to || (a.from.is_input() && a.to.is_output()))
            report(ViolationKind::IllegalArc, name, "arc not allowed between these component kinds");
    }

    // Degrees and widths.
    std::map<NodeId, std::size_t> in_deg, out_deg;
    for (const auto& a : m.arcs) {
        ++out_deg[a.from];
        ++in_deg[a.to];
    }
    auto check_width = [&](NodeId id) {
        std::size_t total = 0;
        for (NodeId p : m.providers(id)) {
            if (!m.contains(p)) return;
            total += m.published_width(p);
        }
        if (total != m.declared_input_width(id))
            report(ViolationKind::WidthMismatch, to_string(id),
                   "expects " + std::to_string(m.declared_input_width(id)) + " features, providers supply " +
                       std::to_string(total));
    };
    for (const auto& net : m.nets) {
        if (in_deg[net.id] == 0) report(ViolationKind::InDegree, to_string(net.id), "receives no data");
        else if (!net.layers.empty()) check_width(net.id);
    }
    for (const auto& o : m.outputs) {
        if (in_deg[o.id] == 0) report(ViolationKind::InDegree, to_string(o.id), "receives no data");
        else check_width(o.id);
    }
    for (const auto& in : m.inputs)
        if (out_deg[in.id] == 0) report(ViolationKind::OutDegree, to_string(in.id), "sends data nowhere");
    for (const auto& net : m.nets)
        if (out_deg[net.id] == 0) report(ViolationKind::OutDegree, to_string(net.id), "sends data nowhere");

    if (!topological_order(m)) report(ViolationKind::Cyclic, "model", "arcs form a cycle");

    for (const auto& o : m.outputs) {
        if (o.type != OutputType::Sampling) continue;
        bool found = false;
        for (NodeId a : ancestors(m, o.id)) {
            const auto* net = a.is_net() ? m.find_net(a) : nullptr;
            if (net && net->sampler) found = true;
        }
        if (!found) report(ViolationKind::MissingSampler, to_string(o.id), "no sampler network feeds this output");
    }

    if (m.training.batch_size == 0) report(ViolationKind::Training, "training", "batch_size must be at least 1");
    for (const auto& o : m.outputs) {
        auto it = m.training.optimizers.find(o.id);
        if (it == m.training.optimizers.end()) {
            report(ViolationKind::Training, to_string(o.id), "no optimizer configured");
        } else if (auto why = it->second.violation()) {
            report(ViolationKind::Training, to_string(o.id), *why);
        }
    }
    return out;
}

inline void require_valid(const ModelGraph& m) {
    auto violations = validate(m);
    if (!violations.empty()) throw InvalidModelError("invalid model: " + to_string(violations.front()));
}

}  // namespace valp
