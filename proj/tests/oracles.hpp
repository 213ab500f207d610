#pragma once

// Independent reference computations shared by the unit tests and the
// acceptance binary. Nothing here calls into the code under test except to
// evaluate forward passes.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "valp/model.hpp"
#include "valp/nn.hpp"

namespace valp::oracle {

/// Scalar probe loss used for gradient checks: sum(forward(layers, x) * u).
inline double probe_loss(std::span<const DenseLayer> layers, const Matrix& x, const Matrix& u) {
    Matrix y = forward(layers, x);
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += y.values()[i] * u.values()[i];
    return s;
}

struct GradientCheck {
    std::size_t checked = 0;
    std::size_t failures = 0;
    double worst = 0.0;  // worst relative (or absolute, for tiny entries) discrepancy
};

inline bool close_enough(double analytic, double numeric, double tol, double& err) {
    if (std::abs(analytic) < 1e-8) {
        err = std::abs(analytic - numeric);
    } else {
        err = std::abs(analytic - numeric) / std::max(std::abs(analytic), std::abs(numeric));
    }
    return err <= tol;
}

/// Compares backward() against central differences with step h for every weight,
/// bias and input entry.
inline GradientCheck check_gradients(std::vector<DenseLayer> layers, Matrix x, const Matrix& u, double h = 1e-5,
                                     double tol = 1e-4) {
    GradientCheck out;
    const auto analytic = backward(layers, x, u);
    auto record = [&](double a, double n) {
        double err = 0.0;
        ++out.checked;
        if (!close_enough(a, n, tol, err)) ++out.failures;
        out.worst = std::max(out.worst, err);
    };
    auto central = [&](double& slot) {
        const double saved = slot;
        slot = saved + h;
        const double up = probe_loss(layers, x, u);
        slot = saved - h;
        const double down = probe_loss(layers, x, u);
        slot = saved;
        return (up - down) / (2.0 * h);
    };
    for (std::size_t l = 0; l < layers.size(); ++l) {
        auto w = layers[l].weights.values();
        for (std::size_t i = 0; i < w.size(); ++i) record(analytic.layers[l].weights.values()[i], central(w[i]));
        for (std::size_t i = 0; i < layers[l].bias.size(); ++i)
            record(analytic.layers[l].bias[i], central(layers[l].bias[i]));
    }
    auto xv = x.values();
    for (std::size_t i = 0; i < xv.size(); ++i) record(analytic.input_gradient.values()[i], central(xv[i]));
    return out;
}

/// Textbook OLS slope of y against x = 0..n-1.
inline double ols_slope(std::span<const double> y) {
    const double n = static_cast<double>(y.size());
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        const double x = static_cast<double>(i);
        sx += x;
        sy += y[i];
        sxx += x * x;
        sxy += x * y[i];
    }
    return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

/// a dominates b under minimization: no worse anywhere, strictly better somewhere.
inline bool pareto_dominates(std::span<const double> a, std::span<const double> b) {
    bool strict = false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i] > b[i]) return false;
        if (a[i] < b[i]) strict = true;
    }
    return strict;
}

/// O(n^2) front: indices of points no other point dominates.
inline std::vector<std::size_t> brute_force_front(const std::vector<std::vector<double>>& pts) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < pts.size(); ++i) {
        bool dominated = false;
        for (std::size_t j = 0; j < pts.size() && !dominated; ++j)
            if (j != i && pareto_dominates(pts[j], pts[i])) dominated = true;
        if (!dominated) out.push_back(i);
    }
    return out;
}

}  // namespace valp::oracle
