#pragma once

// Post-processing of search runs: Pareto fronts, per-pair and combined front
// membership counts, the gentle-vs-aggressive G statistic and SVG plots.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "valp/search.hpp"

namespace valp {

/// a <= b everywhere and a < b somewhere (minimization).
inline bool pareto_dominates(const FitnessTuple& a, const FitnessTuple& b) {
    if (a.size() != b.size()) throw std::invalid_argument("pareto_dominates: size mismatch");
    bool strictly = false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i] > b[i]) return false;
        strictly |= a[i] < b[i];
    }
    return strictly;
}

/// Indices of the non-dominated points, in input order. Equal points do not
/// dominate each other, so duplicates on the front are all kept.
///
/// Points are visited in lexicographic order: a dominating point always sorts
/// before the points it dominates, so each one only needs checking against the
/// front found so far.
inline std::vector<std::size_t> pareto_front(std::span<const FitnessTuple> points) {
    std::vector<std::size_t> order(points.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return points[a].losses < points[b].losses; });
    std::vector<std::size_t> front;
    for (std::size_t i : order) {
        const bool dominated = std::any_of(front.begin(), front.end(),
                                           [&](std::size_t f) { return pareto_dominates(points[f], points[i]); });
        if (!dominated) front.push_back(i);
    }
    std::sort(front.begin(), front.end());
    return front;
}

// ---------------------------------------------------------------------------
// Run records

struct RunRecord {
    std::string run_id;
    Policy policy = Policy::Random;
    std::uint64_t seed = 0;
    std::vector<std::pair<std::size_t, FitnessTuple>> points;  // (step, incumbent fitness after the step)
};

inline RunRecord run_record(std::string id, Policy policy, std::uint64_t seed, const std::vector<StepRecord>& history) {
    RunRecord r{std::move(id), policy, seed, {}};
    for (const auto& h : history) r.points.emplace_back(h.step, h.current);
    return r;
}

/// Incumbent points with 1 <= step <= `step`; the shared initial model is left out.
inline std::vector<FitnessTuple> points_up_to(const RunRecord& r, std::size_t step) {
    std::vector<FitnessTuple> out;
    for (const auto& [s, f] : r.points)
        if (s >= 1 && s <= step) out.push_back(f);
    return out;
}

struct PairCounts {
    std::size_t random = 0;
    std::size_t guided = 0;
    std::size_t pool = 0;
};

/// Front of both runs' points up to `step`, counted by origin.
inline PairCounts per_pair_counts(const RunRecord& random, const RunRecord& guided, std::size_t step) {
    auto pool = points_up_to(random, step);
    const std::size_t from_random = pool.size();
    for (auto& p : points_up_to(guided, step)) pool.push_back(std::move(p));
    PairCounts c;
    c.pool = pool.size();
    for (std::size_t i : pareto_front(pool)) (i < from_random ? c.random : c.guided) += 1;
    return c;
}

struct FrontPoint {
    FitnessTuple fitness;
    Policy policy;
    std::size_t run;  // index into the run list
};

/// One front over every incumbent point of every run up to `step`.
inline std::vector<FrontPoint> combined_front(std::span<const RunRecord> runs, std::size_t step) {
    if (runs.empty()) throw std::invalid_argument("combined_front: no runs");
    std::vector<FrontPoint> pool;
    for (std::size_t r = 0; r < runs.size(); ++r)
        for (auto& p : points_up_to(runs[r], step)) pool.push_back({std::move(p), runs[r].policy, r});
    std::vector<FitnessTuple> fit;
    for (const auto& p : pool) fit.push_back(p.fitness);
    std::vector<FrontPoint> front;
    for (std::size_t i : pareto_front(fit)) front.push_back(pool[i]);
    return front;
}

// ---------------------------------------------------------------------------
// G difference

struct GSample {
    double gentle_ratio = 0.0;      // log(post_gentle) / log(pre)
    double aggressive_ratio = 0.0;  // log(post_aggressive) / log(pre)
    double raw = 0.0;               // gentle_ratio - aggressive_ratio
    double g = 0.0;                 // raw, capped at 1
};

inline GSample g_difference(double pre, double post_gentle, double post_aggressive) {
    if (!(pre > 0.0) || !(post_gentle > 0.0) || !(post_aggressive > 0.0))
        throw std::invalid_argument("g_difference: losses must be positive");
    if (pre == 1.0) throw std::invalid_argument("g_difference: log(pre) is zero");
    GSample s;
    s.gentle_ratio = std::log(post_gentle) / std::log(pre);
    s.aggressive_ratio = std::log(post_aggressive) / std::log(pre);
    s.raw = s.gentle_ratio - s.aggressive_ratio;
    s.g = std::min(s.raw, 1.0);
    return s;
}

// ---------------------------------------------------------------------------
// SVG plots

namespace detail {

inline std::string svg_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '&': out += "&amp;"; break;
            default: out += c;
        }
    }
    return out;
}

inline double quantile(std::vector<double> v, double q) {
    std::sort(v.begin(), v.end());
    const double pos = q * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = static_cast<std::size_t>(std::ceil(pos));
    return v[lo] + (v[hi] - v[lo]) * (pos - static_cast<double>(lo));
}

struct Canvas {
    double width = 900, height = 360, left = 50, right = 20, top = 30, bottom = 40;
    double y_max = 1;
    std::size_t slots = 1;

    double x(double slot) const { return left + (slot + 0.5) * (width - left - right) / static_cast<double>(slots); }
    double slot_width() const { return (width - left - right) / static_cast<double>(slots); }
    double y(double v) const { return height - bottom - v / y_max * (height - top - bottom); }
};

inline void svg_frame(std::ostream& os, const Canvas& c, const std::string& title, const std::vector<std::size_t>& steps) {
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << c.width << "\" height=\"" << c.height << "\">\n"
       << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
       << "<text x=\"" << c.width / 2 << "\" y=\"18\" text-anchor=\"middle\" font-size=\"14\">" << svg_escape(title)
       << "</text>\n"
       << "<line x1=\"" << c.left << "\" y1=\"" << c.y(0) << "\" x2=\"" << c.width - c.right << "\" y2=\"" << c.y(0)
       << "\" stroke=\"black\"/>\n"
       << "<line x1=\"" << c.left << "\" y1=\"" << c.top << "\" x2=\"" << c.left << "\" y2=\"" << c.y(0)
       << "\" stroke=\"black\"/>\n";
    for (int k = 0; k <= 4; ++k) {
        const double v = c.y_max * k / 4.0;
        os << "<text x=\"" << c.left - 4 << "\" y=\"" << c.y(v) + 4 << "\" text-anchor=\"end\" font-size=\"10\">"
           << format_real(std::round(v * 10) / 10) << "</text>\n";
    }
    const std::size_t stride = std::max<std::size_t>(1, steps.size() / 15);
    for (std::size_t i = 0; i < steps.size(); i += stride)
        os << "<text x=\"" << c.x(static_cast<double>(i)) << "\" y=\"" << c.height - c.bottom + 14
           << "\" text-anchor=\"middle\" font-size=\"10\">" << steps[i] << "</text>\n";
    os << "<text x=\"" << c.width - 150 << "\" y=\"" << c.top + 4 << "\" font-size=\"11\" fill=\"#1f77b4\">random</text>\n"
       << "<text x=\"" << c.width - 90 << "\" y=\"" << c.top + 4 << "\" font-size=\"11\" fill=\"#ff7f0e\">guided</text>\n";
}

}  // namespace detail

/// Side-by-side boxplots per step: whiskers at min and max, box at the quartiles.
inline void write_boxplot_svg(std::ostream& os, const std::string& title, const std::vector<std::size_t>& steps,
                              const std::vector<std::vector<double>>& random, const std::vector<std::vector<double>>& guided) {
    detail::Canvas c;
    c.slots = std::max<std::size_t>(1, steps.size());
    for (const auto* series : {&random, &guided})
        for (const auto& v : *series)
            for (double x : v) c.y_max = std::max(c.y_max, x);
    detail::svg_frame(os, c, title, steps);
    const double w = c.slot_width() * 0.35;
    auto box = [&](std::size_t i, const std::vector<double>& v, double offset, const char* color) {
        if (v.empty()) return;
        const double cx = c.x(static_cast<double>(i)) + offset * w;
        const double lo = *std::min_element(v.begin(), v.end()), hi = *std::max_element(v.begin(), v.end());
        const double q1 = detail::quantile(v, 0.25), q2 = detail::quantile(v, 0.5), q3 = detail::quantile(v, 0.75);
        os << "<line x1=\"" << cx << "\" y1=\"" << c.y(lo) << "\" x2=\"" << cx << "\" y2=\"" << c.y(hi) << "\" stroke=\""
           << color << "\"/>\n"
           << "<rect x=\"" << cx - w / 2 << "\" y=\"" << c.y(q3) << "\" width=\"" << w << "\" height=\""
           << std::max(0.5, c.y(q1) - c.y(q3)) << "\" fill=\"" << color << "\" fill-opacity=\"0.5\" stroke=\"" << color
           << "\"/>\n"
           << "<line x1=\"" << cx - w / 2 << "\" y1=\"" << c.y(q2) << "\" x2=\"" << cx + w / 2 << "\" y2=\"" << c.y(q2)
           << "\" stroke=\"black\"/>\n";
    };
    for (std::size_t i = 0; i < steps.size(); ++i) {
        if (i < random.size()) box(i, random[i], -0.55, "#1f77b4");
        if (i < guided.size()) box(i, guided[i], 0.55, "#ff7f0e");
    }
    os << "</svg>\n";
}

/// Grouped bars per step.
inline void write_barplot_svg(std::ostream& os, const std::string& title, const std::vector<std::size_t>& steps,
                              const std::vector<double>& random, const std::vector<double>& guided) {
    detail::Canvas c;
    c.slots = std::max<std::size_t>(1, steps.size());
    for (double v : random) c.y_max = std::max(c.y_max, v);
    for (double v : guided) c.y_max = std::max(c.y_max, v);
    detail::svg_frame(os, c, title, steps);
    const double w = c.slot_width() * 0.4;
    for (std::size_t i = 0; i < steps.size(); ++i) {
        const double cx = c.x(static_cast<double>(i));
        if (i < random.size())
            os << "<rect x=\"" << cx - w << "\" y=\"" << c.y(random[i]) << "\" width=\"" << w << "\" height=\""
               << c.y(0) - c.y(random[i]) << "\" fill=\"#1f77b4\"/>\n";
        if (i < guided.size())
            os << "<rect x=\"" << cx << "\" y=\"" << c.y(guided[i]) << "\" width=\"" << w << "\" height=\""
               << c.y(0) - c.y(guided[i]) << "\" fill=\"#ff7f0e\"/>\n";
    }
    os << "</svg>\n";
}

}  // namespace valp
