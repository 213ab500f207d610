#pragma once

// Running a model: topological forward evaluation, backpropagation through the
// whole DAG with one optimizer per model output, and fitness evaluation.

#include <algorithm>
#include <cmath>
#include <map>
#include <span>
#include <vector>

#include "valp/graph.hpp"
#include "valp/rng.hpp"

namespace valp {

/// Row-aligned model inputs and targets.
struct TaskData {
    std::map<NodeId, Matrix> inputs;   // keyed by input id
    std::map<NodeId, Matrix> targets;  // keyed by output id

    std::size_t rows() const { return inputs.empty() ? 0 : inputs.begin()->second.rows(); }

    TaskData subset(std::span<const std::size_t> indices) const {
        TaskData out;
        for (const auto& [id, m] : inputs) out.inputs[id] = gather_rows(m, indices);
        for (const auto& [id, m] : targets) out.targets[id] = gather_rows(m, indices);
        return out;
    }

    TaskData head(std::size_t n) const {
        std::vector<std::size_t> idx(std::min(n, rows()));
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        return subset(idx);
    }
};

/// What a sampler network publishes during a forward pass.
enum class SamplerMode {
    Mean,            // z = mu (deterministic; used for prediction and evaluation)
    Reparameterize,  // z = mu + exp(logvar / 2) * eps (training)
    Prior,           // z = eps ~ N(0, I) (generation)
};

struct NodeState {
    std::vector<LayerCache> caches;
    Matrix published;
    Matrix epsilon;  // samplers only
};

struct ForwardTrace {
    std::map<NodeId, NodeState> nodes;
    std::map<NodeId, Matrix> outputs;
    std::map<NodeId, Matrix> head_inputs;
};

namespace detail {

inline Matrix gather_provider_input(const ModelGraph& m, NodeId id, const std::map<NodeId, const Matrix*>& published) {
    auto providers = m.providers(id);
    std::vector<const Matrix*> blocks;
    blocks.reserve(providers.size());
    for (NodeId p : providers) blocks.push_back(published.at(p));
    if (blocks.size() == 1) return *blocks.front();
    return hconcat(blocks);
}

/// Splits a sampler's raw (mu | logvar) output.
inline std::pair<Matrix, Matrix> split_gaussian(const Matrix& raw) {
    const std::size_t k = raw.cols() / 2;
    return {column_block(raw, 0, k), column_block(raw, k, k)};
}

}  // namespace detail

/// Evaluates every node in topological order. Each node consumes the concatenation
/// of its providers' published outputs, ordered by ascending provider id.
inline ForwardTrace forward_trace(const ModelGraph& m, const std::map<NodeId, Matrix>& inputs,
                                  SamplerMode mode = SamplerMode::Mean, Rng* rng = nullptr) {
    auto order = topological_order(m);
    if (!order) throw InvalidModelError("forward: model graph has a cycle");
    if ((mode != SamplerMode::Mean) && rng == nullptr) throw std::invalid_argument("forward: sampler mode needs an rng");

    ForwardTrace trace;
    std::map<NodeId, const Matrix*> published;
    std::size_t batch = 0;
    bool have_batch = false;
    for (const auto& in : m.inputs) {
        auto it = inputs.find(in.id);
        if (it == inputs.end()) throw ShapeError("forward: missing data for " + to_string(in.id));
        if (it->second.cols() != in.feature_dim)
            throw ShapeError("forward: " + to_string(in.id) + " expects " + std::to_string(in.feature_dim) +
                             " features, got " + std::to_string(it->second.cols()));
        if (have_batch && it->second.rows() != batch) throw ShapeError("forward: inputs disagree on batch size");
        batch = it->second.rows();
        have_batch = true;
        published[in.id] = &it->second;
    }

    for (NodeId id : *order) {
        if (id.is_input()) continue;
        Matrix x = detail::gather_provider_input(m, id, published);
        if (id.is_output()) {
            const auto& o = *m.find_output(id);
            trace.outputs[id] = forward(o.head, x);
            trace.head_inputs[id] = std::move(x);
            continue;
        }
        const auto& net = *m.find_net(id);
        NodeState state;
        state.caches = forward_cached(net.layers, x);
        const Matrix& raw = state.caches.back().output;
        if (!net.sampler) {
            state.published = raw;
        } else {
            auto [mu, logvar] = detail::split_gaussian(raw);
            switch (mode) {
                case SamplerMode::Mean: state.published = std::move(mu); break;
                case SamplerMode::Reparameterize: {
                    state.epsilon = Matrix(mu.rows(), mu.cols());
                    for (double& e : state.epsilon.values()) e = rng->normal();
                    state.published = mu;
                    auto z = state.published.values();
                    auto lv = logvar.values();
                    auto eps = state.epsilon.values();
                    for (std::size_t i = 0; i < z.size(); ++i) z[i] += std::exp(0.5 * lv[i]) * eps[i];
                    break;
                }
                case SamplerMode::Prior:
                    state.epsilon = Matrix(mu.rows(), mu.cols());
                    for (double& e : state.epsilon.values()) e = rng->normal();
                    state.published = state.epsilon;
                    break;
            }
        }
        auto [it, _] = trace.nodes.emplace(id, std::move(state));
        published[id] = &it->second.published;
    }
    return trace;
}

/// Model predictions keyed by output id.
inline std::map<NodeId, Matrix> forward_model(const ModelGraph& m, const std::map<NodeId, Matrix>& inputs,
                                              SamplerMode mode = SamplerMode::Mean, Rng* rng = nullptr) {
    return forward_trace(m, inputs, mode, rng).outputs;
}

// ---------------------------------------------------------------------------
// Losses at the model level

/// Per-output loss on a forward trace; sampling outputs add the KL term of every
/// sampler in their subgraph, scaled per target element like the reconstruction.
inline double output_loss(const ModelGraph& m, const ForwardTrace& trace, NodeId output, const Matrix& target) {
    const auto& o = *m.find_output(output);
    const LossKind kind = m.losses.at(output);
    double loss = loss_value(kind, trace.outputs.at(output), target);
    if (kind == LossKind::ReconstructionPlusKL) {
        const double scale = 1.0 / static_cast<double>(o.target_dim);
        for (NodeId a : ancestors(m, output)) {
            const auto* net = a.is_net() ? m.find_net(a) : nullptr;
            if (!net || !net->sampler) continue;
            auto [mu, logvar] = detail::split_gaussian(trace.nodes.at(a).caches.back().output);
            loss += scale * kl_standard_normal(mu, logvar);
        }
    }
    return loss;
}

/// Gradients of one output's loss with respect to every parameter upstream of it.
struct OutputGradients {
    LayerGradient head;
    std::map<NodeId, std::vector<LayerGradient>> nets;
};

/// Backpropagates the loss of `output` through the DAG. `mode` must match the
/// mode used to produce `trace`.
inline OutputGradients backward_output(const ModelGraph& m, const ForwardTrace& trace, NodeId output,
                                       const Matrix& target, SamplerMode mode,
                                       const std::vector<NodeId>& order) {
    const auto& o = *m.find_output(output);
    const LossKind kind = m.losses.at(output);
    const Matrix& prediction = trace.outputs.at(output);
    OutputGradients result;
    std::map<NodeId, Matrix> grads;  // d loss / d published output

    auto scatter = [&](NodeId consumer, const Matrix& input_grad) {
        std::size_t offset = 0;
        for (NodeId p : m.providers(consumer)) {
            const std::size_t w = m.published_width(p);
            if (p.is_net()) {
                Matrix block = column_block(input_grad, offset, w);
                auto it = grads.find(p);
                if (it == grads.end()) {
                    grads.emplace(p, std::move(block));
                } else {
                    auto dst = it->second.values();
                    auto src = block.values();
                    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
                }
            }
            offset += w;
        }
    };

    {
        Matrix d_pred = loss_gradient(kind, prediction, target);
        LayerCache cache{trace.head_inputs.at(output), prediction};
        auto res = backward(std::span<const DenseLayer>(&o.head, 1), std::span<const LayerCache>(&cache, 1), d_pred);
        result.head = std::move(res.layers.front());
        scatter(output, res.input_gradient);
    }

    const bool sampling = kind == LossKind::ReconstructionPlusKL;
    const double kl_scale = sampling ? 1.0 / (static_cast<double>(prediction.rows()) * static_cast<double>(o.target_dim)) : 0.0;

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        NodeId id = *it;
        if (!id.is_net()) continue;
        auto g = grads.find(id);
        if (g == grads.end()) continue;
        const auto& net = *m.find_net(id);
        const auto& state = trace.nodes.at(id);
        Matrix raw_grad;
        if (!net.sampler) {
            raw_grad = std::move(g->second);
        } else {
            const Matrix& raw = state.caches.back().output;
            const std::size_t k = raw.cols() / 2;
            raw_grad = Matrix(raw.rows(), raw.cols());
            const Matrix& dz = g->second;
            for (std::size_t r = 0; r < raw.rows(); ++r) {
                for (std::size_t c = 0; c < k; ++c) {
                    const double mu = raw(r, c);
                    const double lv = raw(r, k + c);
                    double d_mu = 0.0, d_lv = 0.0;
                    if (mode == SamplerMode::Mean) {
                        d_mu = dz(r, c);
                    } else if (mode == SamplerMode::Reparameterize) {
                        d_mu = dz(r, c);
                        d_lv = dz(r, c) * 0.5 * std::exp(0.5 * lv) * state.epsilon(r, c);
                    }
                    if (sampling) {
                        d_mu += kl_scale * mu;
                        d_lv += kl_scale * 0.5 * (std::exp(lv) - 1.0);
                    }
                    raw_grad(r, c) = d_mu;
                    raw_grad(r, k + c) = d_lv;
                }
            }
        }
        auto res = backward(net.layers, state.caches, raw_grad);
        result.nets[id] = std::move(res.layers);
        scatter(id, res.input_gradient);
    }
    return result;
}

// ---------------------------------------------------------------------------
// Training

/// One loss per output per batch, in output order.
struct LossTrace {
    std::vector<NodeId> outputs;
    std::vector<std::vector<double>> batches;

    std::size_t size() const noexcept { return batches.size(); }
    bool empty() const noexcept { return batches.empty(); }

    std::vector<double> series(std::size_t output_index) const {
        std::vector<double> s;
        s.reserve(batches.size());
        for (const auto& b : batches) s.push_back(b.at(output_index));
        return s;
    }

    friend bool operator==(const LossTrace&, const LossTrace&) = default;
};

namespace detail {

struct TensorState {
    OptimizerState weights;
    OptimizerState bias;
};

inline void apply_update(const OptimizerSpec& spec, DenseLayer& layer, const LayerGradient& grad, TensorState& state) {
    optimizer_step(spec, layer.weights.values(), grad.weights.values(), state.weights);
    optimizer_step(spec, layer.bias, grad.bias, state.bias);
}

inline bool all_weights_finite(const ModelGraph& m) {
    for (const auto& n : m.nets)
        for (const auto& l : n.layers)
            if (!layer_finite(l)) return false;
    for (const auto& o : m.outputs)
        if (!layer_finite(o.head)) return false;
    return true;
}

}  // namespace detail

/// Runs `n_batches` steps of minibatch backpropagation. Every output's loss is
/// backpropagated separately and applied with that output's optimizer to every
/// parameter upstream of it, so shared components receive the sum of the
/// per-output updates. Optimizer memory lives for the duration of the call.
///
/// Minibatch indices and reparameterization noise come from streams derived from
/// `session_seed`; the same seed and model always produce the same trace.
inline LossTrace train(ModelGraph& m, const TaskData& data, std::size_t n_batches, std::uint64_t session_seed) {
    require_valid(m);
    LossTrace trace;
    for (const auto& o : m.outputs) trace.outputs.push_back(o.id);
    if (n_batches == 0) return trace;
    const std::size_t rows = data.rows();
    if (rows == 0) throw std::invalid_argument("train: empty dataset");
    for (const auto& o : m.outputs)
        if (!data.targets.contains(o.id)) throw ShapeError("train: missing targets for " + to_string(o.id));

    Rng data_rng(derive_seed(session_seed, "data-order"));
    Rng eps_rng(derive_seed(session_seed, "reparam"));
    const auto order = *topological_order(m);
    std::map<std::pair<NodeId, NodeId>, std::vector<detail::TensorState>> states;  // (output, node)

    std::vector<std::size_t> batch_idx(m.training.batch_size);
    trace.batches.reserve(n_batches);
    for (std::size_t b = 0; b < n_batches; ++b) {
        for (auto& i : batch_idx) i = data_rng.index(rows);
        TaskData batch = data.subset(batch_idx);
        ForwardTrace fw = forward_trace(m, batch.inputs, SamplerMode::Reparameterize, &eps_rng);

        std::vector<double> losses;
        std::vector<OutputGradients> grads;
        for (const auto& o : m.outputs) {
            const Matrix& target = batch.targets.at(o.id);
            const double loss = output_loss(m, fw, o.id, target);
            if (!std::isfinite(loss)) throw TrainingDivergedError(b);
            losses.push_back(loss);
            grads.push_back(backward_output(m, fw, o.id, target, SamplerMode::Reparameterize, order));
        }
        for (std::size_t l = 0; l < m.outputs.size(); ++l) {
            const NodeId oid = m.outputs[l].id;
            const OptimizerSpec& spec = m.training.optimizers.at(oid);
            auto& head_state = states[{oid, oid}];
            head_state.resize(1);
            detail::apply_update(spec, m.outputs[l].head, grads[l].head, head_state.front());
            for (auto& [nid, layer_grads] : grads[l].nets) {
                auto& net = *m.find_net(nid);
                auto& st = states[{oid, nid}];
                st.resize(net.layers.size());
                for (std::size_t i = 0; i < net.layers.size(); ++i)
                    detail::apply_update(spec, net.layers[i], layer_grads[i], st[i]);
            }
        }
        trace.batches.push_back(std::move(losses));
    }
    if (!detail::all_weights_finite(m)) throw TrainingDivergedError(n_batches - 1);
    return trace;
}

inline LossTrace train(ModelGraph& m, const TaskData& data, std::size_t n_batches) {
    return train(m, data, n_batches, m.training.seed);
}

// ---------------------------------------------------------------------------
// Evaluation

/// One evaluation loss per model output, in output order; lower is better.
struct FitnessTuple {
    std::vector<double> losses;

    std::size_t size() const noexcept { return losses.size(); }
    double operator[](std::size_t i) const { return losses[i]; }
    bool all_finite() const {
        return std::all_of(losses.begin(), losses.end(), [](double v) { return std::isfinite(v); });
    }
    friend bool operator==(const FitnessTuple&, const FitnessTuple&) = default;
};

inline double median_pairwise_distance(const Matrix& x) {
    std::vector<double> d;
    d.reserve(x.rows() * (x.rows() - (x.rows() ? 1 : 0)) / 2);
    for (std::size_t i = 0; i < x.rows(); ++i) {
        auto a = x.row(i);
        for (std::size_t j = i + 1; j < x.rows(); ++j) {
            auto b = x.row(j);
            double s = 0.0;
            for (std::size_t c = 0; c < a.size(); ++c) s += (a[c] - b[c]) * (a[c] - b[c]);
            d.push_back(std::sqrt(s));
        }
    }
    if (d.empty()) return 0.0;
    const std::size_t mid = d.size() / 2;
    std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(mid), d.end());
    if (d.size() % 2 == 1) return d[mid];
    const double upper = d[mid];
    const double lower = *std::max_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(mid));
    return 0.5 * (lower + upper);
}

namespace detail {

inline double mean_kernel(const Matrix& a, const Matrix& b, double inv_two_h2) {
    double total = 0.0;
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto x = a.row(i);
        for (std::size_t j = 0; j < b.rows(); ++j) {
            auto y = b.row(j);
            double s = 0.0;
            for (std::size_t c = 0; c < x.size(); ++c) s += (x[c] - y[c]) * (x[c] - y[c]);
            total += std::exp(-s * inv_two_h2);
        }
    }
    return total / (static_cast<double>(a.rows()) * static_cast<double>(b.rows()));
}

}  // namespace detail

/// Biased squared maximum mean discrepancy with an RBF kernel whose bandwidth is
/// the median pairwise distance of `reference` (1 when that median is 0).
inline double mmd_squared(const Matrix& generated, const Matrix& reference) {
    if (generated.cols() != reference.cols()) throw ShapeError("mmd: column mismatch");
    if (generated.rows() == 0 || reference.rows() == 0) return 0.0;
    double h = median_pairwise_distance(reference);
    if (!(h > 0.0)) h = 1.0;
    const double inv = 1.0 / (2.0 * h * h);
    return detail::mean_kernel(generated, generated, inv) + detail::mean_kernel(reference, reference, inv) -
           2.0 * detail::mean_kernel(generated, reference, inv);
}

inline constexpr std::size_t kGeneratedSamples = 256;

/// Classification: mean cross-entropy; regression: MSE; sampling: MMD² between
/// kGeneratedSamples generated rows and as many evaluation targets. Generation
/// draws the sampler latents from N(0, I) using `sample_seed`.
inline FitnessTuple evaluate(const ModelGraph& m, const TaskData& eval, std::uint64_t sample_seed) {
    require_valid(m);
    FitnessTuple f;
    auto preds = forward_model(m, eval.inputs, SamplerMode::Mean);
    std::optional<std::map<NodeId, Matrix>> generated;
    TaskData sample_batch;
    for (const auto& o : m.outputs) {
        const Matrix& target = eval.targets.at(o.id);
        if (o.type != OutputType::Sampling) {
            f.losses.push_back(loss_value(m.losses.at(o.id), preds.at(o.id), target));
            continue;
        }
        if (!generated) {
            sample_batch = eval.head(kGeneratedSamples);
            Rng rng(derive_seed(sample_seed, "generate"));
            generated = forward_model(m, sample_batch.inputs, SamplerMode::Prior, &rng);
        }
        f.losses.push_back(mmd_squared(generated->at(o.id), sample_batch.targets.at(o.id)));
    }
    return f;
}

inline FitnessTuple evaluate(const ModelGraph& m, const TaskData& eval) { return evaluate(m, eval, m.training.seed); }

}  // namespace valp
