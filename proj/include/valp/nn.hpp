#pragma once

// Dense-network numerical engine: layers, forward/backward passes, losses and
// optimizers. Every sub-network and output head of a model is a sequence of
// DenseLayer values driven through these functions.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "valp/errors.hpp"
#include "valp/matrix.hpp"
#include "valp/rng.hpp"

namespace valp {

enum class Activation { ReLU, Sigmoid, Softmax, Identity };

inline std::string_view to_string(Activation a) {
    switch (a) {
        case Activation::ReLU: return "relu";
        case Activation::Sigmoid: return "sigmoid";
        case Activation::Softmax: return "softmax";
        case Activation::Identity: return "identity";
    }
    return "?";
}

inline std::optional<Activation> parse_activation(std::string_view s) {
    if (s == "relu") return Activation::ReLU;
    if (s == "sigmoid") return Activation::Sigmoid;
    if (s == "softmax") return Activation::Softmax;
    if (s == "identity") return Activation::Identity;
    return std::nullopt;
}

/// True when every output of the activation is >= 0 for any input.
constexpr bool nonnegative_range(Activation a) {
    return a == Activation::ReLU || a == Activation::Sigmoid || a == Activation::Softmax;
}

struct DenseLayer {
    Matrix weights;             // in_dim x out_dim
    std::vector<double> bias;   // out_dim
    Activation activation = Activation::Identity;

    std::size_t in_dim() const noexcept { return weights.rows(); }
    std::size_t out_dim() const noexcept { return weights.cols(); }
    std::size_t parameter_count() const noexcept { return weights.size() + bias.size(); }

    friend bool operator==(const DenseLayer&, const DenseLayer&) = default;
};

inline double glorot_limit(std::size_t fan_in, std::size_t fan_out) {
    return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

/// Overwrites `m` with Glorot-uniform draws for the given fan sizes.
inline void glorot_fill(Matrix& m, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    const double limit = glorot_limit(fan_in, fan_out);
    for (double& v : m.values()) v = rng.uniform(-limit, limit);
}

inline DenseLayer glorot_layer(std::size_t in_dim, std::size_t out_dim, Activation activation, Rng& rng) {
    DenseLayer layer{Matrix(in_dim, out_dim), std::vector<double>(out_dim, 0.0), activation};
    glorot_fill(layer.weights, in_dim, out_dim, rng);
    return layer;
}

inline void apply_activation(Activation activation, Matrix& z) {
    switch (activation) {
        case Activation::Identity: return;
        case Activation::ReLU:
            for (double& v : z.values()) v = v > 0.0 ? v : 0.0;
            return;
        case Activation::Sigmoid:
            for (double& v : z.values()) v = 1.0 / (1.0 + std::exp(-v));
            return;
        case Activation::Softmax:
            for (std::size_t r = 0; r < z.rows(); ++r) {
                auto row = z.row(r);
                const double peak = *std::max_element(row.begin(), row.end());
                double total = 0.0;
                for (double& v : row) {
                    v = std::exp(v - peak);
                    total += v;
                }
                for (double& v : row) v /= total;
            }
            return;
    }
}

/// activation(input·W + b)
inline Matrix forward(const DenseLayer& layer, const Matrix& input) {
    if (input.cols() != layer.in_dim())
        throw ShapeError("forward: input " + shape_string(input) + " into layer " + shape_string(layer.weights));
    Matrix z = matmul(input, layer.weights);
    for (std::size_t r = 0; r < z.rows(); ++r) {
        auto row = z.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) row[c] += layer.bias[c];
    }
    apply_activation(layer.activation, z);
    return z;
}

struct LayerCache {
    Matrix input;
    Matrix output;
};

/// Runs the layers in order, keeping every layer's input and output for backward.
inline std::vector<LayerCache> forward_cached(std::span<const DenseLayer> layers, const Matrix& input) {
    std::vector<LayerCache> caches;
    caches.reserve(layers.size());
    const Matrix* current = &input;
    for (const auto& layer : layers) {
        Matrix out = forward(layer, *current);
        caches.push_back({*current, std::move(out)});
        current = &caches.back().output;
    }
    return caches;
}

inline Matrix forward(std::span<const DenseLayer> layers, const Matrix& input) {
    Matrix current = input;
    for (const auto& layer : layers) current = forward(layer, current);
    return current;
}

struct LayerGradient {
    Matrix weights;
    std::vector<double> bias;
};

struct BackwardResult {
    std::vector<LayerGradient> layers;
    Matrix input_gradient;
};

/// d loss / d pre-activation, given d loss / d activation output.
inline Matrix activation_backward(Activation activation, const Matrix& output, const Matrix& upstream) {
    Matrix dz = upstream;
    switch (activation) {
        case Activation::Identity: break;
        case Activation::ReLU: {
            auto o = output.values();
            auto d = dz.values();
            for (std::size_t i = 0; i < d.size(); ++i)
                if (!(o[i] > 0.0)) d[i] = 0.0;
            break;
        }
        case Activation::Sigmoid: {
            auto o = output.values();
            auto d = dz.values();
            for (std::size_t i = 0; i < d.size(); ++i) d[i] *= o[i] * (1.0 - o[i]);
            break;
        }
        case Activation::Softmax:
            for (std::size_t r = 0; r < dz.rows(); ++r) {
                auto p = output.row(r);
                auto d = dz.row(r);
                double dot = 0.0;
                for (std::size_t c = 0; c < d.size(); ++c) dot += d[c] * p[c];
                for (std::size_t c = 0; c < d.size(); ++c) d[c] = p[c] * (d[c] - dot);
            }
            break;
    }
    return dz;
}

inline BackwardResult backward(std::span<const DenseLayer> layers, std::span<const LayerCache> caches,
                               const Matrix& upstream) {
    if (caches.size() != layers.size()) throw ShapeError("backward: cache count mismatch");
    if (layers.empty()) return {{}, upstream};
    const Matrix& last = caches.back().output;
    if (upstream.rows() != last.rows() || upstream.cols() != last.cols())
        throw ShapeError("backward: upstream " + shape_string(upstream) + " vs output " + shape_string(last));

    BackwardResult result;
    result.layers.resize(layers.size());
    Matrix grad = upstream;
    for (std::size_t i = layers.size(); i-- > 0;) {
        const auto& layer = layers[i];
        Matrix dz = activation_backward(layer.activation, caches[i].output, grad);
        auto& g = result.layers[i];
        g.weights = matmul_tn(caches[i].input, dz);
        g.bias.assign(layer.out_dim(), 0.0);
        for (std::size_t r = 0; r < dz.rows(); ++r) {
            auto row = dz.row(r);
            for (std::size_t c = 0; c < row.size(); ++c) g.bias[c] += row[c];
        }
        grad = matmul_nt(dz, layer.weights);
    }
    result.input_gradient = std::move(grad);
    return result;
}

inline BackwardResult backward(std::span<const DenseLayer> layers, const Matrix& input, const Matrix& upstream) {
    auto caches = forward_cached(layers, input);
    return backward(layers, caches, upstream);
}

// ---------------------------------------------------------------------------
// Losses

enum class LossKind { CrossEntropy, MeanSquaredError, ReconstructionPlusKL };

inline std::string_view to_string(LossKind k) {
    switch (k) {
        case LossKind::CrossEntropy: return "cross_entropy";
        case LossKind::MeanSquaredError: return "mse";
        case LossKind::ReconstructionPlusKL: return "reconstruction_kl";
    }
    return "?";
}

inline std::optional<LossKind> parse_loss_kind(std::string_view s) {
    if (s == "cross_entropy") return LossKind::CrossEntropy;
    if (s == "mse") return LossKind::MeanSquaredError;
    if (s == "reconstruction_kl") return LossKind::ReconstructionPlusKL;
    return std::nullopt;
}

inline constexpr double kProbabilityFloor = 1e-12;

inline void require_same_shape(const Matrix& a, const Matrix& b, std::string_view what) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw ShapeError(std::string(what) + ": " + shape_string(a) + " vs " + shape_string(b));
}

/// Mean over rows of the per-row loss. For ReconstructionPlusKL this is the
/// reconstruction term only (per-element squared error); the KL part depends on
/// the sampler's (mu, log variance) and is added by the model.
inline double loss_value(LossKind kind, const Matrix& prediction, const Matrix& target) {
    require_same_shape(prediction, target, "loss_value");
    if (prediction.rows() == 0) return 0.0;
    const double n = static_cast<double>(prediction.rows());
    auto p = prediction.values();
    auto t = target.values();
    double total = 0.0;
    if (kind == LossKind::CrossEntropy) {
        for (std::size_t i = 0; i < p.size(); ++i) {
            if (t[i] == 0.0) continue;
            const double q = std::clamp(p[i], kProbabilityFloor, 1.0 - kProbabilityFloor);
            total -= t[i] * std::log(q);
        }
        return total / n;
    }
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double d = p[i] - t[i];
        total += d * d;
    }
    return total / (n * static_cast<double>(prediction.cols()));
}

/// d loss_value / d prediction.
inline Matrix loss_gradient(LossKind kind, const Matrix& prediction, const Matrix& target) {
    require_same_shape(prediction, target, "loss_gradient");
    Matrix grad(prediction.rows(), prediction.cols());
    if (prediction.rows() == 0) return grad;
    const double n = static_cast<double>(prediction.rows());
    auto p = prediction.values();
    auto t = target.values();
    auto g = grad.values();
    if (kind == LossKind::CrossEntropy) {
        for (std::size_t i = 0; i < p.size(); ++i) {
            if (t[i] == 0.0) continue;
            if (p[i] < kProbabilityFloor || p[i] > 1.0 - kProbabilityFloor) continue;  // clamped: flat
            g[i] = -t[i] / (p[i] * n);
        }
        return grad;
    }
    const double scale = 2.0 / (n * static_cast<double>(prediction.cols()));
    for (std::size_t i = 0; i < p.size(); ++i) g[i] = scale * (p[i] - t[i]);
    return grad;
}

/// Mean over rows of KL(N(mu, exp(logvar)) || N(0, I)), summed over latent units.
inline double kl_standard_normal(const Matrix& mu, const Matrix& logvar) {
    require_same_shape(mu, logvar, "kl_standard_normal");
    if (mu.rows() == 0) return 0.0;
    auto m = mu.values();
    auto lv = logvar.values();
    double total = 0.0;
    for (std::size_t i = 0; i < m.size(); ++i) total += 0.5 * (std::exp(lv[i]) + m[i] * m[i] - 1.0 - lv[i]);
    return total / static_cast<double>(mu.rows());
}

// ---------------------------------------------------------------------------
// Optimizers

enum class OptimizerKind { SGD, Momentum, Adam };

inline std::string_view to_string(OptimizerKind k) {
    switch (k) {
        case OptimizerKind::SGD: return "sgd";
        case OptimizerKind::Momentum: return "momentum";
        case OptimizerKind::Adam: return "adam";
    }
    return "?";
}

inline std::optional<OptimizerKind> parse_optimizer_kind(std::string_view s) {
    if (s == "sgd") return OptimizerKind::SGD;
    if (s == "momentum") return OptimizerKind::Momentum;
    if (s == "adam") return OptimizerKind::Adam;
    return std::nullopt;
}

struct OptimizerSpec {
    OptimizerKind kind = OptimizerKind::Adam;
    double learning_rate = 1e-3;
    double momentum = 0.9;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    /// Empty when valid, otherwise the offending field.
    std::optional<std::string> violation() const {
        if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) return "learning_rate must be positive";
        auto in_unit = [](double b) { return b >= 0.0 && b < 1.0; };
        if (!in_unit(momentum)) return "momentum must lie in [0, 1)";
        if (!in_unit(beta1)) return "beta1 must lie in [0, 1)";
        if (!in_unit(beta2)) return "beta2 must lie in [0, 1)";
        if (!(epsilon > 0.0)) return "epsilon must be positive";
        return std::nullopt;
    }

    friend bool operator==(const OptimizerSpec&, const OptimizerSpec&) = default;
};

/// Per-tensor optimizer memory. Empty until the first step.
struct OptimizerState {
    std::vector<double> first;
    std::vector<double> second;
    std::uint64_t steps = 0;
};

inline void optimizer_step(const OptimizerSpec& spec, std::span<double> params, std::span<const double> grads,
                           OptimizerState& state) {
    if (params.size() != grads.size()) throw ShapeError("optimizer_step: params/grads size mismatch");
    const double lr = spec.learning_rate;
    switch (spec.kind) {
        case OptimizerKind::SGD:
            for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr * grads[i];
            break;
        case OptimizerKind::Momentum:
            if (state.first.size() != params.size()) state.first.assign(params.size(), 0.0);
            for (std::size_t i = 0; i < params.size(); ++i) {
                state.first[i] = spec.momentum * state.first[i] + grads[i];
                params[i] -= lr * state.first[i];
            }
            break;
        case OptimizerKind::Adam: {
            if (state.first.size() != params.size()) state.first.assign(params.size(), 0.0);
            if (state.second.size() != params.size()) state.second.assign(params.size(), 0.0);
            const double t = static_cast<double>(state.steps + 1);
            const double c1 = 1.0 - std::pow(spec.beta1, t);
            const double c2 = 1.0 - std::pow(spec.beta2, t);
            for (std::size_t i = 0; i < params.size(); ++i) {
                state.first[i] = spec.beta1 * state.first[i] + (1.0 - spec.beta1) * grads[i];
                state.second[i] = spec.beta2 * state.second[i] + (1.0 - spec.beta2) * grads[i] * grads[i];
                const double m_hat = state.first[i] / c1;
                const double v_hat = state.second[i] / c2;
                params[i] -= lr * m_hat / (std::sqrt(v_hat) + spec.epsilon);
            }
            break;
        }
    }
    ++state.steps;
}

}  // namespace valp
