#pragma once

// Per-component model diagnostics: historic loss slope, module and input
// intervention, linear dependency probes and population rankings.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>

#include "valp/model.hpp"

namespace valp {

/// Shortest decimal text that parses back to the same double.
inline std::string format_real(double v) {
    char buf[32];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    if (ec != std::errc{}) throw std::runtime_error("format_real: conversion failed");
    return std::string(buf, end);
}

// ---------------------------------------------------------------------------
// Loss slope

/// OLS slope of loss against batch index over the last `window` entries.
inline double loss_slope(std::span<const double> trace, std::size_t window) {
    if (window < 2) throw std::invalid_argument("loss_slope: window must be at least 2");
    if (trace.size() < window)
        throw std::invalid_argument("loss_slope: trace has " + std::to_string(trace.size()) + " entries, window " +
                                    std::to_string(window));
    auto y = trace.last(window);
    const double n = static_cast<double>(window);
    const double x_mean = (n - 1.0) / 2.0;
    const double y_mean = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double sxy = 0.0, sxx = 0.0;
    for (std::size_t i = 0; i < window; ++i) {
        const double dx = static_cast<double>(i) - x_mean;
        sxy += dx * (y[i] - y_mean);
        sxx += dx * dx;
    }
    return sxy / sxx;
}

/// Ordered from most to least descending.
enum class SlopeClass { Steep, Moderate, Stuck };

inline std::string_view to_string(SlopeClass c) {
    switch (c) {
        case SlopeClass::Steep: return "steep";
        case SlopeClass::Moderate: return "moderate";
        case SlopeClass::Stuck: return "stuck";
    }
    return "?";
}

struct Thresholds {
    double stuck = -1e-10;
    double steep = -2e-5;
    double relevance = 1.2;  // relevant iff intervened/baseline >= this
};

inline SlopeClass classify_slope(double slope, const Thresholds& t = {}) {
    if (!(t.stuck > t.steep)) throw std::invalid_argument("classify_slope: stuck threshold must exceed steep threshold");
    if (slope > t.stuck) return SlopeClass::Stuck;
    if (slope < t.steep) return SlopeClass::Steep;
    return SlopeClass::Moderate;
}

inline bool is_relevant(double relevance, const Thresholds& t = {}) { return relevance >= t.relevance; }

// ---------------------------------------------------------------------------
// Interventions

/// intervened / baseline; a non-positive baseline gives 1 + intervened.
inline double relevance_ratio(double baseline, double intervened) {
    if (baseline <= 0.0) return 1.0 + intervened;
    return intervened / baseline;
}

/// Re-randomizes every layer of `net` in `m`: Glorot weights, zero biases.
inline void randomize_net(ModelGraph& m, NodeId net, Rng& rng) {
    SubNetwork* n = m.find_net(net);
    if (!n) throw std::out_of_range("randomize_net: no " + to_string(net));
    for (auto& layer : n->layers) {
        glorot_fill(layer.weights, layer.weights.rows(), layer.weights.cols(), rng);
        std::fill(layer.bias.begin(), layer.bias.end(), 0.0);
    }
}

/// Relevance of `net` for every output. The model itself is not modified;
/// outputs without a path from the net score exactly 1.
inline std::map<NodeId, double> module_intervention(const ModelGraph& m, NodeId net, const TaskData& eval,
                                                    std::uint64_t noise_seed, const FitnessTuple* baseline = nullptr) {
    if (!m.find_net(net)) throw std::out_of_range("module_intervention: no " + to_string(net));
    const FitnessTuple base = baseline ? *baseline : evaluate(m, eval);
    ModelGraph clone = m;
    Rng rng(derive_seed(noise_seed, "intervention-noise", net.index));
    randomize_net(clone, net, rng);
    const FitnessTuple hit = evaluate(clone, eval);
    const auto reached = reached_outputs(m, net);
    std::map<NodeId, double> out;
    for (std::size_t i = 0; i < m.outputs.size(); ++i) {
        const NodeId o = m.outputs[i].id;
        out[o] = reached.contains(o) ? relevance_ratio(base[i], hit[i]) : 1.0;
    }
    return out;
}

/// Relevance of a subset of one input's features: those columns are replaced by
/// uniform noise over their observed range in `eval`. An empty subset changes
/// nothing and scores 1 everywhere.
inline std::map<NodeId, double> input_intervention(const ModelGraph& m, NodeId input, std::span<const std::size_t> features,
                                                   const TaskData& eval, std::uint64_t noise_seed,
                                                   const FitnessTuple* baseline = nullptr) {
    const InputNode* in = m.find_input(input);
    if (!in) throw std::out_of_range("input_intervention: no " + to_string(input));
    const auto reached = reached_outputs(m, input);
    std::map<NodeId, double> out;
    for (const auto& o : m.outputs) out[o.id] = 1.0;
    if (features.empty() || reached.empty()) return out;

    const FitnessTuple base = baseline ? *baseline : evaluate(m, eval);
    TaskData noisy = eval;
    Matrix& x = noisy.inputs.at(input);
    Rng rng(derive_seed(noise_seed, "intervention-noise", 0x10000u + input.index));
    for (std::size_t c : features) {
        if (c >= x.cols()) throw std::out_of_range("input_intervention: feature " + std::to_string(c));
        double lo = INFINITY, hi = -INFINITY;
        for (std::size_t r = 0; r < x.rows(); ++r) {
            lo = std::min(lo, x(r, c));
            hi = std::max(hi, x(r, c));
        }
        for (std::size_t r = 0; r < x.rows(); ++r) x(r, c) = rng.uniform(lo, hi);
    }
    const FitnessTuple hit = evaluate(m, noisy);
    for (std::size_t i = 0; i < m.outputs.size(); ++i) {
        const NodeId o = m.outputs[i].id;
        if (reached.contains(o)) out[o] = relevance_ratio(base[i], hit[i]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Linear dependency probes

namespace detail {

/// Solves A x = b for symmetric positive definite A (Cholesky, in place copy).
inline std::vector<double> cholesky_solve(Matrix a, std::vector<double> b) {
    const std::size_t n = a.rows();
    for (std::size_t j = 0; j < n; ++j) {
        double d = a(j, j);
        for (std::size_t k = 0; k < j; ++k) d -= a(j, k) * a(j, k);
        if (!(d > 0.0)) throw std::runtime_error("cholesky_solve: matrix not positive definite");
        a(j, j) = std::sqrt(d);
        for (std::size_t i = j + 1; i < n; ++i) {
            double s = a(i, j);
            for (std::size_t k = 0; k < j; ++k) s -= a(i, k) * a(j, k);
            a(i, j) = s / a(j, j);
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < i; ++k) b[i] -= a(i, k) * b[k];
        b[i] /= a(i, i);
    }
    for (std::size_t i = n; i-- > 0;) {
        for (std::size_t k = i + 1; k < n; ++k) b[i] -= a(k, i) * b[k];
        b[i] /= a(i, i);
    }
    return b;
}

/// Standardizes columns with statistics from `fit`; constant columns become 0.
inline void standardize(Matrix& fit, Matrix& held_out) {
    for (std::size_t c = 0; c < fit.cols(); ++c) {
        double mean = 0.0;
        for (std::size_t r = 0; r < fit.rows(); ++r) mean += fit(r, c);
        mean /= static_cast<double>(fit.rows());
        double var = 0.0;
        for (std::size_t r = 0; r < fit.rows(); ++r) var += (fit(r, c) - mean) * (fit(r, c) - mean);
        var /= static_cast<double>(fit.rows());
        const double scale = var > 1e-24 ? 1.0 / std::sqrt(var) : 0.0;
        for (std::size_t r = 0; r < fit.rows(); ++r) fit(r, c) = (fit(r, c) - mean) * scale;
        for (std::size_t r = 0; r < held_out.rows(); ++r) held_out(r, c) = (held_out(r, c) - mean) * scale;
    }
}

/// Every fourth row is held out; tiny sets are scored in-sample.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> probe_split(std::size_t rows) {
    std::vector<std::size_t> fit, held;
    for (std::size_t r = 0; r < rows; ++r) (r % 4 == 3 ? held : fit).push_back(r);
    if (held.empty() || fit.size() < 2) {
        fit.resize(rows);
        std::iota(fit.begin(), fit.end(), std::size_t{0});
        held = fit;
    }
    return {fit, held};
}

inline constexpr double kRidgeLambda = 1e-3;
inline constexpr std::size_t kLogisticIterations = 500;
inline constexpr double kLogisticRate = 1.0;

/// Ridge regression with an unpenalized intercept; returns held-out MSE.
inline double ridge_probe(Matrix x_fit, Matrix x_held, const Matrix& y_fit, const Matrix& y_held) {
    standardize(x_fit, x_held);
    const std::size_t d = x_fit.cols(), k = y_fit.cols(), n = x_fit.rows();
    Matrix gram = matmul_tn(x_fit, x_fit);
    for (std::size_t i = 0; i < d; ++i) gram(i, i) += kRidgeLambda * static_cast<double>(n);
    std::vector<double> y_mean(k, 0.0);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < k; ++j) y_mean[j] += y_fit(r, j) / static_cast<double>(n);
    Matrix w(d, k);
    if (d > 0) {
        Matrix xty = matmul_tn(x_fit, y_fit);  // x_fit columns are centered, so the intercept drops out
        for (std::size_t j = 0; j < k; ++j) {
            std::vector<double> rhs(d);
            for (std::size_t i = 0; i < d; ++i) rhs[i] = xty(i, j);
            auto sol = cholesky_solve(gram, std::move(rhs));
            for (std::size_t i = 0; i < d; ++i) w(i, j) = sol[i];
        }
    }
    Matrix pred = matmul(x_held, w);
    for (std::size_t r = 0; r < pred.rows(); ++r)
        for (std::size_t j = 0; j < k; ++j) pred(r, j) += y_mean[j];
    return loss_value(LossKind::MeanSquaredError, pred, y_held);
}

/// Multinomial logistic regression by full-batch gradient descent; returns
/// held-out cross-entropy.
inline double logistic_probe(Matrix x_fit, Matrix x_held, const Matrix& y_fit, const Matrix& y_held) {
    standardize(x_fit, x_held);
    const std::size_t d = x_fit.cols(), k = y_fit.cols();
    const double n = static_cast<double>(x_fit.rows());
    DenseLayer layer{Matrix(d, k), std::vector<double>(k, 0.0), Activation::Softmax};
    for (std::size_t it = 0; it < kLogisticIterations; ++it) {
        Matrix p = forward(layer, x_fit);
        for (std::size_t r = 0; r < p.rows(); ++r)
            for (std::size_t j = 0; j < k; ++j) p(r, j) = (p(r, j) - y_fit(r, j)) / n;
        Matrix gw = matmul_tn(x_fit, p);
        for (std::size_t i = 0; i < gw.size(); ++i) layer.weights.values()[i] -= kLogisticRate * gw.values()[i];
        for (std::size_t j = 0; j < k; ++j) {
            double g = 0.0;
            for (std::size_t r = 0; r < p.rows(); ++r) g += p(r, j);
            layer.bias[j] -= kLogisticRate * g;
        }
    }
    return loss_value(LossKind::CrossEntropy, forward(layer, x_held), y_held);
}

}  // namespace detail

/// Held-out loss of a linear probe from `features` to `target`: multinomial
/// logistic regression for one-hot targets, ridge least squares otherwise.
inline double linear_probe_loss(const Matrix& features, const Matrix& target, bool classification) {
    if (features.rows() != target.rows()) throw ShapeError("linear_probe_loss: row mismatch");
    if (features.rows() == 0) throw std::invalid_argument("linear_probe_loss: no rows");
    auto [fit, held] = detail::probe_split(features.rows());
    Matrix xf = gather_rows(features, fit), xh = gather_rows(features, held);
    Matrix yf = gather_rows(target, fit), yh = gather_rows(target, held);
    return classification ? detail::logistic_probe(std::move(xf), std::move(xh), yf, yh)
                          : detail::ridge_probe(std::move(xf), std::move(xh), yf, yh);
}

/// Probe loss from the published activations of `component` (an input or a
/// net) to the targets of `output`. Samplers publish their latent mean.
inline double dependency_probe(const ModelGraph& m, NodeId component, NodeId output, const TaskData& probe) {
    const OutputNode* o = m.find_output(output);
    if (!o) throw std::out_of_range("dependency_probe: no " + to_string(output));
    if (!component.is_input() && !m.find_net(component))
        throw std::out_of_range("dependency_probe: no " + to_string(component));
    if (!reached_outputs(m, component).contains(output))
        throw std::invalid_argument("dependency_probe: " + to_string(component) + " does not reach " + to_string(output));
    const Matrix* features = nullptr;
    ForwardTrace trace;
    if (component.is_input()) {
        features = &probe.inputs.at(component);
    } else {
        trace = forward_trace(m, probe.inputs, SamplerMode::Mean);
        features = &trace.nodes.at(component).published;
    }
    return linear_probe_loss(*features, probe.targets.at(output), o->type == OutputType::Classification);
}

// ---------------------------------------------------------------------------
// Relative performance

/// Per output, model indices sorted by ascending loss; ties keep index order
/// and non-finite losses sort last.
struct PopulationRanking {
    std::vector<std::vector<std::size_t>> per_output;
};

inline PopulationRanking relative_performance(std::span<const FitnessTuple> population) {
    if (population.empty()) throw std::invalid_argument("relative_performance: empty population");
    const std::size_t outputs = population.front().size();
    PopulationRanking r;
    for (std::size_t o = 0; o < outputs; ++o) {
        std::vector<std::size_t> ids(population.size());
        std::iota(ids.begin(), ids.end(), std::size_t{0});
        auto key = [&](std::size_t i) {
            if (population[i].size() != outputs) throw std::invalid_argument("relative_performance: ragged fitness");
            const double v = population[i][o];
            return std::isnan(v) ? INFINITY : v;
        };
        std::stable_sort(ids.begin(), ids.end(), [&](std::size_t a, std::size_t b) { return key(a) < key(b); });
        r.per_output.push_back(std::move(ids));
    }
    return r;
}

// ---------------------------------------------------------------------------
// Full report

using ComponentOutput = std::pair<NodeId, NodeId>;

struct DiagnosisReport {
    std::size_t step = 0;
    std::map<NodeId, double> loss_slope;           // per output
    std::map<ComponentOutput, double> relevance;   // (net, reached output)
    std::map<ComponentOutput, double> input_relevance;
    std::map<ComponentOutput, double> probe_score; // (input or net, reached output)

    friend bool operator==(const DiagnosisReport&, const DiagnosisReport&) = default;
};

struct DiagnoseOptions {
    std::size_t step = 0;
    std::size_t window = 0;  // 0: the whole trace
    std::uint64_t noise_seed = 0;
    bool probes = true;
};

/// Slopes come from `trace` (the latest training segment); interventions and
/// probes are measured on `eval`.
inline DiagnosisReport diagnose(const ModelGraph& m, const LossTrace& trace, const TaskData& eval,
                                const DiagnoseOptions& opt = {}) {
    require_valid(m);
    if (trace.outputs.size() != m.outputs.size()) throw std::invalid_argument("diagnose: trace does not match model outputs");
    DiagnosisReport r;
    r.step = opt.step;
    const std::size_t window = opt.window ? opt.window : trace.size();
    for (std::size_t i = 0; i < m.outputs.size(); ++i) r.loss_slope[m.outputs[i].id] = loss_slope(trace.series(i), window);

    const FitnessTuple base = evaluate(m, eval);
    for (const auto& n : m.nets) {
        const auto reached = reached_outputs(m, n.id);
        for (const auto& [o, v] : module_intervention(m, n.id, eval, opt.noise_seed, &base))
            if (reached.contains(o)) r.relevance[{n.id, o}] = v;
    }
    for (const auto& in : m.inputs) {
        std::vector<std::size_t> all(in.feature_dim);
        std::iota(all.begin(), all.end(), std::size_t{0});
        const auto reached = reached_outputs(m, in.id);
        for (const auto& [o, v] : input_intervention(m, in.id, all, eval, opt.noise_seed, &base))
            if (reached.contains(o)) r.input_relevance[{in.id, o}] = v;
    }
    if (opt.probes) {
        const ForwardTrace fw = forward_trace(m, eval.inputs, SamplerMode::Mean);
        auto probe = [&](NodeId c, const Matrix& features) {
            for (NodeId o : reached_outputs(m, c))
                r.probe_score[{c, o}] = linear_probe_loss(features, eval.targets.at(o),
                                                          m.find_output(o)->type == OutputType::Classification);
        };
        for (const auto& in : m.inputs) probe(in.id, eval.inputs.at(in.id));
        for (const auto& n : m.nets) probe(n.id, fw.nodes.at(n.id).published);
    }
    return r;
}

/// One row per (component, output, metric); slope rows use the output as the component.
inline void write_report_csv(std::ostream& os, const DiagnosisReport& r, bool header = true) {
    if (header) os << "step,component,output,metric,value\n";
    for (const auto& [o, v] : r.loss_slope)
        os << r.step << ',' << to_string(o) << ',' << to_string(o) << ",loss_slope," << format_real(v) << '\n';
    auto rows = [&](const std::map<ComponentOutput, double>& table, const char* metric) {
        for (const auto& [key, v] : table)
            os << r.step << ',' << to_string(key.first) << ',' << to_string(key.second) << ',' << metric << ','
               << format_real(v) << '\n';
    };
    rows(r.relevance, "relevance");
    rows(r.input_relevance, "input_relevance");
    rows(r.probe_score, "probe_score");
}

}  // namespace valp
