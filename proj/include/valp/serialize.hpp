#pragma once

// Model checkpoint format, version 1.
//
// A checkpoint is whitespace-separated tokens. Reals are written as the 16 hex
// digits of their IEEE-754 bit pattern so a round trip is bit-exact.
//
//   file       := "VALP/1" problem training optimizer* input* net* output* arc* "end"
//   problem    := "problem" <n_inputs> <n_targets> input_spec{n_inputs} target_spec{n_targets}
//   input_spec := "input_spec" <dim> <role>
//   target_spec:= "target_spec" <output_type> <dim>
//   training   := "training" <batch_size> <seed>
//   optimizer  := "optimizer" <output_id> <sgd|momentum|adam> <lr> <momentum> <beta1> <beta2> <epsilon>
//   input      := "input" <input_id> <feature_dim> <role>
//   net        := "net" <net_id> <sampler 0|1> <n_layers> layer{n_layers}
//   output     := "output" <output_id> <output_type> <target_dim> <loss> layer
//   layer      := "layer" <activation> <in_dim> <out_dim> <real>{in_dim*out_dim} <real>{out_dim}
//   arc        := "arc" <from_id> <to_id>
//
// Weights are row-major (in_dim rows of out_dim values) followed by the bias.
// Roles are percent-encoded ("%20" for space, "%25" for '%', "%" for empty).
// Lines beginning with '#' are comments.

#include <bit>
#include <charconv>
#include <cstdint>
#include <cstdio>
#include <sstream>
#include <string>
#include <string_view>

#include "valp/graph.hpp"

namespace valp {

inline constexpr std::string_view kCheckpointHeader = "VALP/1";

inline std::string hex_double(double v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(std::bit_cast<std::uint64_t>(v)));
    return buf;
}

namespace detail {

inline std::string encode_role(std::string_view role) {
    if (role.empty()) return "%";
    std::string out;
    for (char c : role) {
        if (c == '%') out += "%25";
        else if (c == ' ') out += "%20";
        else out += c;
    }
    return out;
}

inline std::string decode_role(std::string_view token) {
    if (token == "%") return {};
    std::string out;
    for (std::size_t i = 0; i < token.size(); ++i) {
        if (token.substr(i, 3) == "%25") { out += '%'; i += 2; }
        else if (token.substr(i, 3) == "%20") { out += ' '; i += 2; }
        else out += token[i];
    }
    return out;
}

inline void write_layer(std::ostringstream& os, const DenseLayer& layer) {
    os << "layer " << to_string(layer.activation) << ' ' << layer.in_dim() << ' ' << layer.out_dim() << '\n';
    for (std::size_t r = 0; r < layer.weights.rows(); ++r) {
        auto row = layer.weights.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) os << (c ? " " : "") << hex_double(row[c]);
        os << '\n';
    }
    for (std::size_t c = 0; c < layer.bias.size(); ++c) os << (c ? " " : "") << hex_double(layer.bias[c]);
    os << '\n';
}

class TokenReader {
public:
    explicit TokenReader(std::string_view text) : text_(text) {}

    struct Token {
        std::string_view text;
        std::size_t line;
        std::size_t column;
    };

    bool at_end() {
        skip();
        return pos_ >= text_.size();
    }

    Token next(std::string_view what) {
        skip();
        if (pos_ >= text_.size()) throw ParseError("unexpected end of input, expected " + std::string(what), line_, col_);
        Token t{{}, line_, col_};
        const std::size_t start = pos_;
        while (pos_ < text_.size() && !is_space(text_[pos_])) advance();
        t.text = text_.substr(start, pos_ - start);
        return t;
    }

    void expect(std::string_view keyword) {
        auto t = next(keyword);
        if (t.text != keyword)
            throw ParseError("expected '" + std::string(keyword) + "', found '" + std::string(t.text) + "'", t.line, t.column);
    }

    std::uint64_t integer(std::string_view what) {
        auto t = next(what);
        std::uint64_t v = 0;
        auto [p, ec] = std::from_chars(t.text.data(), t.text.data() + t.text.size(), v);
        if (ec != std::errc{} || p != t.text.data() + t.text.size())
            throw ParseError("expected " + std::string(what) + ", found '" + std::string(t.text) + "'", t.line, t.column);
        return v;
    }

    double real(std::string_view what) {
        auto t = next(what);
        std::uint64_t bits = 0;
        auto [p, ec] = std::from_chars(t.text.data(), t.text.data() + t.text.size(), bits, 16);
        if (t.text.size() != 16 || ec != std::errc{} || p != t.text.data() + t.text.size())
            throw ParseError("expected 16-digit hex real for " + std::string(what) + ", found '" + std::string(t.text) + "'",
                             t.line, t.column);
        return std::bit_cast<double>(bits);
    }

    NodeId node(std::string_view what, NodeKind kind) {
        auto t = next(what);
        auto id = parse_node_id(t.text);
        if (!id || id->kind != kind)
            throw ParseError("expected " + std::string(what) + ", found '" + std::string(t.text) + "'", t.line, t.column);
        return *id;
    }

    NodeId any_node(std::string_view what) {
        auto t = next(what);
        auto id = parse_node_id(t.text);
        if (!id) throw ParseError("expected " + std::string(what) + ", found '" + std::string(t.text) + "'", t.line, t.column);
        return *id;
    }

    template <typename T, typename Parser>
    T word(std::string_view what, Parser parse) {
        auto t = next(what);
        auto v = parse(t.text);
        if (!v) throw ParseError("unknown " + std::string(what) + " '" + std::string(t.text) + "'", t.line, t.column);
        return *v;
    }

private:
    static bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r'; }

    void advance() {
        if (text_[pos_] == '\n') {
            ++line_;
            col_ = 1;
        } else {
            ++col_;
        }
        ++pos_;
    }

    void skip() {
        while (pos_ < text_.size()) {
            if (is_space(text_[pos_])) {
                advance();
            } else if (text_[pos_] == '#' && col_ == 1) {
                while (pos_ < text_.size() && text_[pos_] != '\n') advance();
            } else {
                break;
            }
        }
    }

    std::string_view text_;
    std::size_t pos_ = 0;
    std::size_t line_ = 1;
    std::size_t col_ = 1;
};

inline DenseLayer read_layer(TokenReader& in) {
    in.expect("layer");
    DenseLayer layer;
    layer.activation = in.word<Activation>("activation", parse_activation);
    const auto rows = in.integer("in_dim");
    const auto cols = in.integer("out_dim");
    if (rows * cols > (1ULL << 28)) throw ParseError("layer too large", 0);
    layer.weights = Matrix(rows, cols);
    for (double& w : layer.weights.values()) w = in.real("weight");
    layer.bias.resize(cols);
    for (double& b : layer.bias) b = in.real("bias");
    return layer;
}

}  // namespace detail

inline std::string serialize(const ModelGraph& m) {
    std::ostringstream os;
    os << kCheckpointHeader << '\n';
    os << "problem " << m.problem.inputs.size() << ' ' << m.problem.targets.size() << '\n';
    for (const auto& s : m.problem.inputs) os << "input_spec " << s.dim << ' ' << detail::encode_role(s.role) << '\n';
    for (const auto& t : m.problem.targets) os << "target_spec " << to_string(t.type) << ' ' << t.dim << '\n';
    os << "training " << m.training.batch_size << ' ' << m.training.seed << '\n';
    for (const auto& [id, spec] : m.training.optimizers)
        os << "optimizer " << to_string(id) << ' ' << to_string(spec.kind) << ' ' << hex_double(spec.learning_rate) << ' '
           << hex_double(spec.momentum) << ' ' << hex_double(spec.beta1) << ' ' << hex_double(spec.beta2) << ' '
           << hex_double(spec.epsilon) << '\n';
    for (const auto& in : m.inputs)
        os << "input " << to_string(in.id) << ' ' << in.feature_dim << ' ' << detail::encode_role(in.role) << '\n';
    for (const auto& net : m.nets) {
        os << "net " << to_string(net.id) << ' ' << (net.sampler ? 1 : 0) << ' ' << net.layers.size() << '\n';
        for (const auto& layer : net.layers) detail::write_layer(os, layer);
    }
    for (const auto& o : m.outputs) {
        auto loss = m.losses.find(o.id);
        os << "output " << to_string(o.id) << ' ' << to_string(o.type) << ' ' << o.target_dim << ' '
           << (loss == m.losses.end() ? std::string_view("none") : to_string(loss->second)) << '\n';
        detail::write_layer(os, o.head);
    }
    for (const auto& a : m.arcs) os << "arc " << to_string(a.from) << ' ' << to_string(a.to) << '\n';
    os << "end\n";
    return os.str();
}

/// Parses a checkpoint. Malformed text raises ParseError with its position; a
/// well-formed but structurally invalid model raises InvalidModelError unless
/// `check` is false.
inline ModelGraph deserialize(std::string_view text, bool check = true) {
    detail::TokenReader in(text);
    in.expect(kCheckpointHeader);
    ModelGraph m;
    in.expect("problem");
    const auto n_inputs = in.integer("input count");
    const auto n_targets = in.integer("target count");
    for (std::uint64_t j = 0; j < n_inputs; ++j) {
        in.expect("input_spec");
        InputSpec s;
        s.dim = in.integer("input dim");
        s.role = detail::decode_role(in.next("role").text);
        m.problem.inputs.push_back(std::move(s));
    }
    for (std::uint64_t l = 0; l < n_targets; ++l) {
        in.expect("target_spec");
        TargetSpec t;
        t.type = in.word<OutputType>("output type", parse_output_type);
        t.dim = in.integer("target dim");
        m.problem.targets.push_back(t);
    }
    in.expect("training");
    m.training.batch_size = in.integer("batch size");
    m.training.seed = in.integer("seed");

    while (true) {
        auto t = in.next("section keyword");
        if (t.text == "end") break;
        if (t.text == "optimizer") {
            NodeId id = in.node("output id", NodeKind::Output);
            OptimizerSpec spec;
            spec.kind = in.word<OptimizerKind>("optimizer", parse_optimizer_kind);
            spec.learning_rate = in.real("learning rate");
            spec.momentum = in.real("momentum");
            spec.beta1 = in.real("beta1");
            spec.beta2 = in.real("beta2");
            spec.epsilon = in.real("epsilon");
            m.training.optimizers[id] = spec;
        } else if (t.text == "input") {
            InputNode n;
            n.id = in.node("input id", NodeKind::Input);
            n.feature_dim = in.integer("feature dim");
            n.role = detail::decode_role(in.next("role").text);
            m.inputs.push_back(std::move(n));
        } else if (t.text == "net") {
            SubNetwork net;
            net.id = in.node("net id", NodeKind::Net);
            const auto sampler = in.integer("sampler flag");
            if (sampler > 1) throw ParseError("sampler flag must be 0 or 1", t.line, t.column);
            net.sampler = sampler == 1;
            const auto layers = in.integer("layer count");
            for (std::uint64_t i = 0; i < layers; ++i) net.layers.push_back(detail::read_layer(in));
            m.nets.push_back(std::move(net));
        } else if (t.text == "output") {
            OutputNode o;
            o.id = in.node("output id", NodeKind::Output);
            o.type = in.word<OutputType>("output type", parse_output_type);
            o.target_dim = in.integer("target dim");
            auto loss = in.next("loss");
            if (auto k = parse_loss_kind(loss.text)) m.losses[o.id] = *k;
            else if (loss.text != "none") throw ParseError("unknown loss '" + std::string(loss.text) + "'", loss.line, loss.column);
            o.head = detail::read_layer(in);
            m.outputs.push_back(std::move(o));
        } else if (t.text == "arc") {
            Arc a;
            a.from = in.any_node("arc source");
            a.to = in.any_node("arc target");
            m.arcs.push_back(a);
        } else {
            throw ParseError("unknown section '" + std::string(t.text) + "'", t.line, t.column);
        }
    }
    if (!in.at_end()) {
        auto t = in.next("end of input");
        throw ParseError("trailing content after 'end'", t.line, t.column);
    }
    if (check) require_valid(m);
    return m;
}

}  // namespace valp
