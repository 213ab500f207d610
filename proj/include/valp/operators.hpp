#pragma once

#include <algorithm>
#include <array>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "valp/graph.hpp"

namespace valp {

enum class OperatorKind {
    AddLayer,
    RemoveLayer,
    ExtendLayer,
    AddConnection,
    DeleteConnection,
    InsertNetwork,
    DeleteNetwork,
    CloneNetwork,
    ChangeLR,
    ChangeSGD,
    ChangeBS,
    ExclusiveSubgraphCrossover,
};

enum class Variant { Gentle, Aggressive, NotApplicable };

enum class ComplexityEffect { Reducer, Extender, Neutral };

struct TaxonomyEntry {
    OperatorKind kind;
    std::string_view name;
    bool gentle;
    bool aggressive;
    ComplexityEffect effect;
};

inline constexpr std::array<TaxonomyEntry, 12> kTaxonomy{{
    {OperatorKind::AddLayer, "add_layer", true, true, ComplexityEffect::Extender},
    {OperatorKind::RemoveLayer, "remove_layer", false, true, ComplexityEffect::Reducer},
    {OperatorKind::ExtendLayer, "extend_layer", true, true, ComplexityEffect::Extender},
    {OperatorKind::AddConnection, "add_connection", true, true, ComplexityEffect::Extender},
    {OperatorKind::DeleteConnection, "delete_connection", false, true, ComplexityEffect::Reducer},
    {OperatorKind::InsertNetwork, "insert_network", true, true, ComplexityEffect::Extender},
    {OperatorKind::DeleteNetwork, "delete_network", false, true, ComplexityEffect::Reducer},
    {OperatorKind::CloneNetwork, "clone_network", true, true, ComplexityEffect::Extender},
    {OperatorKind::ChangeLR, "change_lr", true, false, ComplexityEffect::Neutral},
    {OperatorKind::ChangeSGD, "change_sgd", true, false, ComplexityEffect::Neutral},
    {OperatorKind::ChangeBS, "change_bs", true, false, ComplexityEffect::Neutral},
    {OperatorKind::ExclusiveSubgraphCrossover, "exclusive_subgraph_crossover", false, true, ComplexityEffect::Neutral},
}};

/// The operators the unguided search draws from: the macro-structure set.
inline constexpr std::array<OperatorKind, 5> kStructuralKinds{
    OperatorKind::AddConnection, OperatorKind::DeleteConnection, OperatorKind::InsertNetwork,
    OperatorKind::DeleteNetwork, OperatorKind::CloneNetwork};

inline constexpr std::array<OperatorKind, 11> kMutationKinds{
    OperatorKind::AddLayer,     OperatorKind::RemoveLayer,   OperatorKind::ExtendLayer, OperatorKind::AddConnection,
    OperatorKind::DeleteConnection, OperatorKind::InsertNetwork, OperatorKind::DeleteNetwork, OperatorKind::CloneNetwork,
    OperatorKind::ChangeLR,     OperatorKind::ChangeSGD,     OperatorKind::ChangeBS};

constexpr const TaxonomyEntry& taxonomy(OperatorKind kind) { return kTaxonomy[static_cast<std::size_t>(kind)]; }

inline std::string_view to_string(OperatorKind k) { return taxonomy(k).name; }

inline std::optional<OperatorKind> parse_operator_kind(std::string_view s) {
    for (const auto& e : kTaxonomy)
        if (e.name == s) return e.kind;
    return std::nullopt;
}

inline std::string_view to_string(Variant v) {
    switch (v) {
        case Variant::Gentle: return "gentle";
        case Variant::Aggressive: return "aggressive";
        case Variant::NotApplicable: return "na";
    }
    return "?";
}

inline std::optional<Variant> parse_variant(std::string_view s) {
    if (s == "gentle") return Variant::Gentle;
    if (s == "aggressive") return Variant::Aggressive;
    if (s == "na") return Variant::NotApplicable;
    return std::nullopt;
}

inline std::string_view to_string(ComplexityEffect e) {
    switch (e) {
        case ComplexityEffect::Reducer: return "reducer";
        case ComplexityEffect::Extender: return "extender";
        case ComplexityEffect::Neutral: return "neutral";
    }
    return "?";
}

constexpr bool supports(OperatorKind kind, Variant v) {
    const auto& e = taxonomy(kind);
    return (v == Variant::Gentle && e.gentle) || (v == Variant::Aggressive && e.aggressive);
}

/// What an operator acts on: the whole model, a component, or an arc.
using Target = std::variant<std::monostate, NodeId, Arc>;

inline std::string target_string(const Target& t) {
    if (const auto* id = std::get_if<NodeId>(&t)) return to_string(*id);
    if (const auto* arc = std::get_if<Arc>(&t)) return to_string(*arc);
    return "model";
}

inline std::optional<Target> parse_target(std::string_view s) {
    if (s == "model") return Target{};
    if (auto gt = s.find('>'); gt != std::string_view::npos) {
        auto from = parse_node_id(s.substr(0, gt));
        auto to = parse_node_id(s.substr(gt + 1));
        if (!from || !to) return std::nullopt;
        return Target{Arc{*from, *to}};
    }
    if (auto id = parse_node_id(s)) return Target{*id};
    return std::nullopt;
}

/// Optional kind-specific settings. Anything left unset is drawn from the
/// seed passed to apply().
struct OperatorParams {
    std::optional<std::size_t> position{};      // add_layer insertion point; remove/extend_layer index
    std::optional<std::size_t> amount{};        // extend_layer extra neurons
    std::vector<std::size_t> replicate{};        // extend_layer gentle: neurons to duplicate (size = amount)
    std::optional<double> factor{};             // change_lr multiplier
    std::optional<std::size_t> batch_size{};    // change_bs new value
    std::optional<OptimizerKind> optimizer{};   // change_sgd new algorithm
};

struct OperatorDescriptor {
    OperatorKind kind = OperatorKind::AddLayer;
    Variant variant = Variant::Gentle;
    Target target;
    OperatorParams params;

    /// kind:variant:target, e.g. clone_network:gentle:n3. Parameters are not part
    /// of an operator's identity.
    std::string text() const {
        return std::string(to_string(kind)) + ":" + std::string(to_string(variant)) + ":" + target_string(target);
    }

    NodeId node() const { return std::get<NodeId>(target); }
    Arc arc() const { return std::get<Arc>(target); }
};

inline bool same_operator(const OperatorDescriptor& a, const OperatorDescriptor& b) {
    return a.kind == b.kind && a.variant == b.variant && a.target == b.target;
}

inline std::optional<OperatorDescriptor> parse_descriptor(std::string_view text) {
    const auto c1 = text.find(':');
    if (c1 == std::string_view::npos) return std::nullopt;
    const auto c2 = text.find(':', c1 + 1);
    if (c2 == std::string_view::npos) return std::nullopt;
    auto kind = parse_operator_kind(text.substr(0, c1));
    auto variant = parse_variant(text.substr(c1 + 1, c2 - c1 - 1));
    auto target = parse_target(text.substr(c2 + 1));
    if (!kind || !variant || !target) return std::nullopt;
    return OperatorDescriptor{*kind, *variant, *target, {}};
}

struct Applicability {
    bool ok = true;
    std::string reason;
    explicit operator bool() const noexcept { return ok; }
};

// ---------------------------------------------------------------------------
// Row-block plumbing shared by every operator that rewires a consumer.

namespace detail {

/// The consumer's first-layer rows, split per provider in the current layout.
inline std::map<NodeId, Matrix> provider_blocks(const ModelGraph& m, NodeId consumer) {
    std::map<NodeId, Matrix> out;
    const auto& layer = m.first_layer(consumer);
    std::size_t offset = 0;
    for (NodeId p : m.providers(consumer)) {
        const std::size_t w = m.published_width(p);
        out[p] = row_block(layer.weights, offset, w);
        offset += w;
    }
    return out;
}

/// Rebuilds the consumer's first-layer weights from per-provider blocks, in the
/// order of its current providers.
inline void assemble_rows(ModelGraph& m, NodeId consumer, const std::map<NodeId, Matrix>& blocks) {
    auto& layer = m.first_layer(consumer);
    std::vector<Matrix> parts;
    for (NodeId p : m.providers(consumer)) {
        const Matrix& b = blocks.at(p);
        if (b.rows() != m.published_width(p) || b.cols() != layer.out_dim())
            throw std::logic_error("assemble_rows: block for " + to_string(p) + " has shape " + shape_string(b));
        parts.push_back(b);
    }
    layer.weights = parts.empty() ? Matrix(0, layer.bias.size()) : vconcat(parts);
}

inline Matrix glorot_rows(std::size_t rows, std::size_t cols, std::size_t fan_in, Rng& rng) {
    Matrix m(rows, cols);
    glorot_fill(m, fan_in, cols, rng);
    return m;
}

/// True when every value `net` receives at layer `position` is >= 0.
inline bool nonnegative_at(const ModelGraph& m, const SubNetwork& net, std::size_t position) {
    if (position > 0) return nonnegative_range(net.layers[position - 1].activation);
    for (NodeId p : m.providers(net.id)) {
        const auto* src = m.find_net(p);
        if (!src || src->sampler || !nonnegative_range(src->layers.back().activation)) return false;
    }
    return true;
}

inline bool publishes_nonnegative(const ModelGraph& m, NodeId id) {
    const auto* net = m.find_net(id);
    return net && !net->sampler && nonnegative_range(net->layers.back().activation);
}

[[noreturn]] inline void refuse(const OperatorDescriptor& op, const std::string& why) {
    throw GuardError(op.text() + ": " + why);
}

inline SubNetwork& target_net(ModelGraph& m, const OperatorDescriptor& op) {
    const auto* id = std::get_if<NodeId>(&op.target);
    if (!id || !id->is_net()) refuse(op, "target must be a network");
    auto* net = m.find_net(*id);
    if (!net) refuse(op, "no network " + to_string(*id));
    return *net;
}

inline Arc target_arc(const OperatorDescriptor& op) {
    const auto* arc = std::get_if<Arc>(&op.target);
    if (!arc) refuse(op, "target must be an arc");
    return *arc;
}

inline NodeId target_output(const ModelGraph& m, const OperatorDescriptor& op) {
    const auto* id = std::get_if<NodeId>(&op.target);
    if (!id || !id->is_output() || !m.find_output(*id)) refuse(op, "target must be a model output");
    return *id;
}

// --- sub-network operators --------------------------------------------------

inline void add_layer(ModelGraph& m, const OperatorDescriptor& op, Rng& rng) {
    auto& net = target_net(m, op);
    const std::size_t depth = net.layers.size();
    const std::size_t pos = op.params.position ? *op.params.position : rng.index(depth + 1);
    if (pos > depth) refuse(op, "position " + std::to_string(pos) + " out of range 0.." + std::to_string(depth));
    const std::size_t width = pos == 0 ? net.input_dim() : net.layers[pos - 1].out_dim();
    const bool at_sampler_end = net.sampler && pos == depth;

    DenseLayer layer;
    if (op.variant == Variant::Gentle) {
        const bool relu_ok = !at_sampler_end && nonnegative_at(m, net, pos);
        layer = DenseLayer{Matrix::identity(width), std::vector<double>(width, 0.0),
                           relu_ok ? Activation::ReLU : Activation::Identity};
    } else {
        layer = glorot_layer(width, width, at_sampler_end ? Activation::Identity : Activation::ReLU, rng);
    }
    net.layers.insert(net.layers.begin() + static_cast<std::ptrdiff_t>(pos), std::move(layer));
}

inline std::vector<std::size_t> removable_layers(const SubNetwork& net) {
    std::vector<std::size_t> out;
    if (net.layers.size() < 2) return out;
    for (std::size_t i = 0; i + 1 < net.layers.size(); ++i) {
        const auto& cur = net.layers[i];
        const auto& next = net.layers[i + 1];
        const long long removed = static_cast<long long>(cur.parameter_count());
        const long long bridge_delta = (static_cast<long long>(cur.in_dim()) - static_cast<long long>(cur.out_dim())) *
                                       static_cast<long long>(next.out_dim());
        if (bridge_delta - removed < 0) out.push_back(i);
    }
    return out;
}

inline void remove_layer(ModelGraph& m, const OperatorDescriptor& op, Rng& rng) {
    auto& net = target_net(m, op);
    if (net.layers.size() < 2) refuse(op, "network has a single layer (deleting it is delete_network)");
    auto options = removable_layers(net);
    std::size_t i;
    if (op.params.position) {
        i = *op.params.position;
        if (i + 1 >= net.layers.size())
            refuse(op, "layer " + std::to_string(i) + " is not an inner layer (the last layer defines the network output)");
        if (std::find(options.begin(), options.end(), i) == options.end())
            refuse(op, "removing layer " + std::to_string(i) + " would not reduce the weight count");
    } else {
        if (options.empty()) refuse(op, "no layer whose removal reduces the weight count");
        i = options[rng.index(options.size())];
    }
    const std::size_t in = net.layers[i].in_dim();
    net.layers.erase(net.layers.begin() + static_cast<std::ptrdiff_t>(i));
    auto& bridged = net.layers[i];
    if (bridged.in_dim() != in) {
        bridged.weights = Matrix(in, bridged.out_dim());
        glorot_fill(bridged.weights, in, bridged.out_dim(), rng);
    }
}

inline void extend_layer(ModelGraph& m, const OperatorDescriptor& op, Rng& rng) {
    auto& net = target_net(m, op);
    const std::size_t depth = net.layers.size();
    const std::size_t last_allowed = net.sampler ? depth - 1 : depth;  // a sampler's mean/variance layer is fixed
    if (last_allowed == 0) refuse(op, "sampler with a single layer has no extendable layer");
    const std::size_t i = op.params.position ? *op.params.position : rng.index(last_allowed);
    if (i >= last_allowed) refuse(op, "layer index " + std::to_string(i) + " out of range");
    auto& layer = net.layers[i];
    const std::size_t in = layer.in_dim();
    const std::size_t out = layer.out_dim();
    const std::size_t k = op.params.amount ? *op.params.amount : rng.between(1, out);
    if (k == 0) refuse(op, "extra neuron count must be positive");

    std::vector<std::size_t> src = op.params.replicate;
    if (op.variant == Variant::Gentle) {
        if (src.empty())
            for (std::size_t j = 0; j < k; ++j) src.push_back(rng.index(out));
        if (src.size() != k) refuse(op, "replicate list must name one source neuron per extra neuron");
        for (std::size_t s : src)
            if (s >= out) refuse(op, "replicated neuron " + std::to_string(s) + " out of range");
    }

    // Outgoing rows of the widened layer, captured before the width changes.
    const bool is_last = i + 1 == depth;
    const NodeId id = net.id;
    std::map<NodeId, std::map<NodeId, Matrix>> consumer_blocks;
    if (is_last)
        for (NodeId c : m.consumers(id)) consumer_blocks[c] = provider_blocks(m, c);

    std::vector<double> count(out, 1.0);
    for (std::size_t s : src) count[s] += 1.0;

    // Widen the layer itself.
    Matrix w(in, out + k);
    for (std::size_t r = 0; r < in; ++r) {
        for (std::size_t c = 0; c < out; ++c) w(r, c) = layer.weights(r, c);
        for (std::size_t j = 0; j < k; ++j) w(r, out + j) = op.variant == Variant::Gentle ? layer.weights(r, src[j]) : 0.0;
    }
    if (op.variant == Variant::Aggressive) {
        const double lim = glorot_limit(in, out + k);
        for (std::size_t r = 0; r < in; ++r)
            for (std::size_t j = 0; j < k; ++j) w(r, out + j) = rng.uniform(-lim, lim);
    }
    for (std::size_t j = 0; j < k; ++j)
        layer.bias.push_back(op.variant == Variant::Gentle ? layer.bias[src[j]] : 0.0);
    layer.weights = std::move(w);

    // Outgoing rows: split among replicas (gentle) or fresh (aggressive).
    auto widen_rows = [&](const Matrix& rows, std::size_t fan_in) {
        Matrix r(out + k, rows.cols());
        for (std::size_t u = 0; u < out; ++u)
            for (std::size_t c = 0; c < rows.cols(); ++c)
                r(u, c) = op.variant == Variant::Gentle ? rows(u, c) / count[u] : rows(u, c);
        const double lim = glorot_limit(fan_in, rows.cols());
        for (std::size_t j = 0; j < k; ++j)
            for (std::size_t c = 0; c < rows.cols(); ++c)
                r(out + j, c) = op.variant == Variant::Gentle ? rows(src[j], c) / count[src[j]] : rng.uniform(-lim, lim);
        return r;
    };
    if (!is_last) {
        auto& next = net.layers[i + 1];
        next.weights = widen_rows(next.weights, out + k);
    } else {
        for (auto& [c, blocks] : consumer_blocks) {
            blocks[id] = widen_rows(blocks[id], m.declared_input_width(c) + k);
            assemble_rows(m, c, blocks);
        }
    }
}

// --- general-structure operators --------------------------------------------

inline void add_connection(ModelGraph& m, const OperatorDescriptor& op, Rng& rng) {
    const Arc a = target_arc(op);
    if (!a.from.is_net() || !m.find_net(a.from)) refuse(op, "source must be an existing network");
    if (!(a.to.is_net() || a.to.is_output()) || !m.contains(a.to)) refuse(op, "target must be an existing network or output");
    if (a.from == a.to) refuse(op, "self connection");
    if (m.has_arc(a.from, a.to)) refuse(op, "components are already linked");
    if (descendants(m, a.to).contains(a.from)) refuse(op, "connection would create a cycle");

    auto blocks = provider_blocks(m, a.to);
    const std::size_t w = m.published_width(a.from);
    const std::size_t cols = m.first_layer(a.to).out_dim();
    blocks[a.from] = op.variant == Variant::Gentle ? Matrix(w, cols, 0.0)
                                                   : glorot_rows(w, cols, m.declared_input_width(a.to) + w, rng);
    m.add_arc(a.from, a.to);
    assemble_rows(m, a.to, blocks);
}

inline void delete_connection(ModelGraph& m, const OperatorDescriptor& op, Rng&) {
    const Arc a = target_arc(op);
    if (!m.has_arc(a.from, a.to)) refuse(op, "no such connection");
    if (m.providers(a.to).size() < 2) refuse(op, "connection is the only source of data for " + to_string(a.to));
    if (m.consumers(a.from).size() < 2) refuse(op, "connection is the only destination of " + to_string(a.from));
    auto blocks = provider_blocks(m, a.to);
    blocks.erase(a.from);
    m.remove_arc(a.from, a.to);
    assemble_rows(m, a.to, blocks);
}

inline NodeId insert_network(ModelGraph& m, const OperatorDescriptor& op, Rng& rng) {
    const Arc a = target_arc(op);
    if (!m.has_arc(a.from, a.to)) refuse(op, "no such connection");
    const NodeId id = m.next_net_id();
    const std::size_t w = m.published_width(a.from);

    SubNetwork net;
    net.id = id;
    if (op.variant == Variant::Gentle) {
        const Activation act = publishes_nonnegative(m, a.from) ? Activation::ReLU : Activation::Identity;
        net.layers.push_back(DenseLayer{Matrix::identity(w), std::vector<double>(w, 0.0), act});
    } else {
        net.layers.push_back(glorot_layer(w, w, Activation::ReLU, rng));
    }

    auto blocks = provider_blocks(m, a.to);
    blocks[id] = std::move(blocks.at(a.from));
    blocks.erase(a.from);
    m.insert_net(std::move(net));
    m.remove_arc(a.from, a.to);
    m.add_arc(a.from, id);
    m.add_arc(id, a.to);
    assemble_rows(m, a.to, blocks);
    return id;
}

inline void delete_network(ModelGraph& m, const OperatorDescriptor& op, Rng& rng) {
    const NodeId id = target_net(m, op).id;
    const auto providers = m.providers(id);
    const auto consumers = m.consumers(id);
    const std::size_t removed_width = m.published_width(id);

    std::map<NodeId, std::map<NodeId, Matrix>> blocks;
    for (NodeId c : consumers) {
        blocks[c] = provider_blocks(m, c);
        blocks[c].erase(id);
    }
    m.erase_net(id);
    for (NodeId c : consumers) {
        std::size_t new_rows = 0;
        for (NodeId p : providers)
            if (!(p.is_input() && c.is_output()) && !m.has_arc(p, c)) new_rows += m.published_width(p);
        const std::size_t fan_in = m.declared_input_width(c) - removed_width + new_rows;
        for (NodeId p : providers) {
            if (p.is_input() && c.is_output()) continue;  // inputs never feed outputs directly
            if (m.has_arc(p, c)) continue;
            m.add_arc(p, c);
            blocks[c][p] = glorot_rows(m.published_width(p), m.first_layer(c).out_dim(), fan_in, rng);
        }
        assemble_rows(m, c, blocks[c]);
    }
}

inline NodeId clone_network(ModelGraph& m, const OperatorDescriptor& op, Rng& rng) {
    const SubNetwork original = target_net(m, op);
    const NodeId id = m.next_net_id();
    SubNetwork copy = original;
    copy.id = id;

    const auto consumers = m.consumers(original.id);
    std::map<NodeId, std::map<NodeId, Matrix>> blocks;
    for (NodeId c : consumers) blocks[c] = provider_blocks(m, c);

    m.insert_net(std::move(copy));
    for (NodeId p : m.providers(original.id)) m.add_arc(p, id);
    for (NodeId c : consumers) {
        auto& b = blocks[c];
        Matrix& rows = b.at(original.id);
        if (op.variant == Variant::Gentle) {
            for (double& v : rows.values()) v *= 0.5;
            b[id] = rows;
        } else {
            b[id] = glorot_rows(rows.rows(), rows.cols(), m.declared_input_width(c) + rows.rows(), rng);
        }
        m.add_arc(id, c);
        assemble_rows(m, c, b);
    }
    return id;
}

// --- hyperparameter operators -----------------------------------------------

inline void change_lr(ModelGraph& m, const OperatorDescriptor& op, Rng&) {
    const NodeId o = target_output(m, op);
    const double factor = op.params.factor.value_or(0.5);
    auto& spec = m.training.optimizers.at(o);
    const double lr = spec.learning_rate * factor;
    if (!(lr > 0.0) || !std::isfinite(lr)) refuse(op, "learning rate must stay positive");
    spec.learning_rate = lr;
}

inline void change_sgd(ModelGraph& m, const OperatorDescriptor& op, Rng& rng) {
    const NodeId o = target_output(m, op);
    auto& spec = m.training.optimizers.at(o);
    if (op.params.optimizer) {
        spec.kind = *op.params.optimizer;
        return;
    }
    std::vector<OptimizerKind> others;
    for (auto k : {OptimizerKind::SGD, OptimizerKind::Momentum, OptimizerKind::Adam})
        if (k != spec.kind) others.push_back(k);
    spec.kind = others[rng.index(others.size())];
}

inline void change_bs(ModelGraph& m, const OperatorDescriptor& op, Rng& rng) {
    if (!std::holds_alternative<std::monostate>(op.target)) refuse(op, "target must be the model");
    std::size_t bs = m.training.batch_size;
    if (op.params.batch_size) {
        bs = *op.params.batch_size;
    } else if (bs > 1 && rng.bernoulli(0.5)) {
        bs /= 2;
    } else {
        bs *= 2;
    }
    if (bs == 0) refuse(op, "batch size must be positive");
    m.training.batch_size = bs;
}

}  // namespace detail

// ---------------------------------------------------------------------------

/// Grafts the donor's exclusive subgraph of `output` into a copy of the host,
/// replacing the host's own. Grafted networks get fresh ids. A donor boundary
/// provider maps to the host component with the same id when the host still has
/// it, otherwise to the remaining host network feeding `output` with the closest
/// published width, otherwise to input i0. Blocks whose width changes get fresh
/// random rows. The host keeps its output head bias and the rows of its
/// remaining providers; grafted providers bring the donor's head rows.
inline ModelGraph crossover(const ModelGraph& host, const ModelGraph& donor, NodeId output, std::uint64_t seed) {
    require_valid(host);
    require_valid(donor);
    if (host.problem != donor.problem) throw GuardError("crossover: host and donor solve different problems");
    const auto donor_ex = exclusive_subgraph(donor, output).nets;
    if (donor_ex.empty()) throw GuardError("crossover-inapplicable: donor exclusive subgraph of " + to_string(output) + " is empty");
    const auto host_ex = exclusive_subgraph(host, output).nets;

    Rng rng(derive_seed(seed, "crossover"));
    ModelGraph r = host;
    auto head_blocks = detail::provider_blocks(r, output);
    for (NodeId n : host_ex) {
        head_blocks.erase(n);
        r.erase_net(n);
    }

    // Fresh ids above everything the host ever used.
    std::uint32_t next = host.nets.empty() ? 0 : host.nets.back().id.index + 1;
    std::map<NodeId, NodeId> rename;
    for (NodeId n : donor_ex) rename[n] = NodeId::net(next++);

    const auto feeding = ancestors(r, output);
    auto host_match = [&](NodeId p) -> NodeId {
        if (r.contains(p)) return p;
        const std::size_t want = donor.published_width(p);
        std::optional<NodeId> best;
        std::size_t best_gap = 0;
        for (NodeId c : feeding) {
            if (!c.is_net()) continue;
            const std::size_t w = r.published_width(c);
            const std::size_t gap = w > want ? w - want : want - w;
            if (!best || gap < best_gap) {
                best = c;
                best_gap = gap;
            }
        }
        return best.value_or(NodeId::input(0));
    };

    for (NodeId n : donor_ex) {
        SubNetwork net = *donor.find_net(n);
        net.id = rename.at(n);
        r.insert_net(std::move(net));
    }
    // Arcs into grafted nets, with their row blocks.
    std::map<NodeId, std::map<NodeId, Matrix>> graft_blocks;
    std::set<std::pair<NodeId, NodeId>> fresh;  // (graft, provider) blocks needing random rows
    for (NodeId n : donor_ex) {
        const NodeId g = rename.at(n);
        for (auto& [p, rows] : detail::provider_blocks(donor, n)) {
            const NodeId hp = donor_ex.contains(p) ? rename.at(p) : host_match(p);
            if (r.has_arc(hp, g)) continue;
            r.add_arc(hp, g);
            const std::size_t w = r.published_width(hp);
            if (rows.rows() == w) {
                graft_blocks[g][hp] = rows;
            } else {
                graft_blocks[g][hp] = Matrix(w, rows.cols());
                fresh.insert({g, hp});
            }
        }
    }
    for (auto& [g, blocks] : graft_blocks) {
        std::size_t fan_in = 0;
        for (auto& [p, b] : blocks) fan_in += b.rows();
        for (auto& [p, b] : blocks)
            if (fresh.contains({g, p})) glorot_fill(b, fan_in, b.cols(), rng);
        detail::assemble_rows(r, g, blocks);
    }
    // Grafted providers of the output bring the donor's head rows.
    auto donor_head = detail::provider_blocks(donor, output);
    for (NodeId n : donor_ex) {
        if (!donor.has_arc(n, output)) continue;
        const NodeId g = rename.at(n);
        r.add_arc(g, output);
        head_blocks[g] = donor_head.at(n);
    }
    detail::assemble_rows(r, output, head_blocks);

    // Inputs that only fed the replaced subgraph now feed the graft roots.
    for (const auto& in : r.inputs) {
        if (!r.consumers(in.id).empty()) continue;
        NodeId root = rename.begin()->second;
        auto blocks = detail::provider_blocks(r, root);
        blocks[in.id] = detail::glorot_rows(in.feature_dim, r.first_layer(root).out_dim(),
                                            r.declared_input_width(root) + in.feature_dim, rng);
        r.add_arc(in.id, root);
        detail::assemble_rows(r, root, blocks);
    }

    auto violations = validate(r);
    if (!violations.empty()) throw GuardError("crossover: graft yields an invalid model: " + to_string(violations.front()));
    return r;
}

namespace detail {

inline ModelGraph build(const ModelGraph& m, const OperatorDescriptor& op, std::uint64_t seed, const ModelGraph* donor) {
    if (!supports(op.kind, op.variant))
        refuse(op, std::string(to_string(op.kind)) + " has no " + std::string(to_string(op.variant)) + " variant");
    if (op.kind == OperatorKind::ExclusiveSubgraphCrossover) {
        if (!donor) refuse(op, "crossover needs a donor model");
        try {
            return crossover(m, *donor, target_output(m, op), seed);
        } catch (const GuardError& e) {
            refuse(op, e.what());
        }
    }
    Rng rng(derive_seed(seed, "operator-apply"));
    ModelGraph r = m;
    switch (op.kind) {
        case OperatorKind::AddLayer: add_layer(r, op, rng); break;
        case OperatorKind::RemoveLayer: remove_layer(r, op, rng); break;
        case OperatorKind::ExtendLayer: extend_layer(r, op, rng); break;
        case OperatorKind::AddConnection: add_connection(r, op, rng); break;
        case OperatorKind::DeleteConnection: delete_connection(r, op, rng); break;
        case OperatorKind::InsertNetwork: insert_network(r, op, rng); break;
        case OperatorKind::DeleteNetwork: delete_network(r, op, rng); break;
        case OperatorKind::CloneNetwork: clone_network(r, op, rng); break;
        case OperatorKind::ChangeLR: change_lr(r, op, rng); break;
        case OperatorKind::ChangeSGD: change_sgd(r, op, rng); break;
        case OperatorKind::ChangeBS: change_bs(r, op, rng); break;
        case OperatorKind::ExclusiveSubgraphCrossover: break;
    }
    auto violations = validate(r);
    if (!violations.empty()) refuse(op, "result would be invalid: " + to_string(violations.front()));
    const auto before = weight_count(m);
    const auto after = weight_count(r);
    switch (taxonomy(op.kind).effect) {
        case ComplexityEffect::Reducer:
            if (after >= before) refuse(op, "reducer would not decrease the weight count");
            break;
        case ComplexityEffect::Extender:
            if (after <= before) refuse(op, "extender would not increase the weight count");
            break;
        case ComplexityEffect::Neutral: break;
    }
    return r;
}

}  // namespace detail

/// Applies `op` to a copy of `m`. Unset parameters are drawn from `seed`.
/// Throws GuardError naming the violated constraint when the operator cannot be
/// applied. The input model is never modified.
inline ModelGraph apply(const ModelGraph& m, const OperatorDescriptor& op, std::uint64_t seed,
                        const ModelGraph* donor = nullptr) {
    return detail::build(m, op, seed, donor);
}

/// Whether `op` can be applied to `m` without breaking structural validity.
inline Applicability applicable(const ModelGraph& m, const OperatorDescriptor& op, const ModelGraph* donor = nullptr) {
    try {
        detail::build(m, op, 0, donor);
        return {};
    } catch (const GuardError& e) {
        return {false, e.what()};
    }
}

/// Every syntactically possible descriptor of the given kinds (both variants
/// where the taxonomy allows), before applicability filtering.
inline std::vector<OperatorDescriptor> enumerate_operators(const ModelGraph& m, std::span<const OperatorKind> kinds) {
    std::vector<OperatorDescriptor> out;
    auto push = [&](OperatorKind k, Target t) {
        for (Variant v : {Variant::Gentle, Variant::Aggressive})
            if (supports(k, v)) out.push_back({k, v, t, {}});
    };
    for (OperatorKind k : kinds) {
        switch (k) {
            case OperatorKind::AddLayer:
            case OperatorKind::RemoveLayer:
            case OperatorKind::ExtendLayer:
            case OperatorKind::DeleteNetwork:
            case OperatorKind::CloneNetwork:
                for (const auto& n : m.nets) push(k, n.id);
                break;
            case OperatorKind::AddConnection:
                for (const auto& a : m.nets) {
                    for (const auto& b : m.nets)
                        if (a.id != b.id && !m.has_arc(a.id, b.id)) push(k, Arc{a.id, b.id});
                    for (const auto& o : m.outputs)
                        if (!m.has_arc(a.id, o.id)) push(k, Arc{a.id, o.id});
                }
                break;
            case OperatorKind::DeleteConnection:
            case OperatorKind::InsertNetwork:
                for (const auto& a : m.arcs) push(k, a);
                break;
            case OperatorKind::ChangeLR:
            case OperatorKind::ChangeSGD:
                for (const auto& o : m.outputs) push(k, o.id);
                break;
            case OperatorKind::ChangeBS: push(k, Target{}); break;
            case OperatorKind::ExclusiveSubgraphCrossover:
                for (const auto& o : m.outputs) push(k, o.id);
                break;
        }
    }
    return out;
}

inline std::vector<OperatorDescriptor> applicable_operators(const ModelGraph& m, std::span<const OperatorKind> kinds) {
    std::vector<OperatorDescriptor> out;
    for (auto& op : enumerate_operators(m, kinds))
        if (op.kind != OperatorKind::ExclusiveSubgraphCrossover && applicable(m, op)) out.push_back(std::move(op));
    return out;
}

}  // namespace valp
