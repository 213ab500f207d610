#pragma once

// Experiment orchestration: configuration, the operator study, paired
// random/guided searches over seeds, and the analysis of their logs.
//
// Configuration grammar (INI): `[section]` headers, `key = value` lines,
// `;` or `#` comment lines. Unknown sections and keys are rejected. Keys and
// defaults:
//
//   [experiment] mode = search        study | search | single
//                n_seeds = 30         seeds first_seed .. first_seed + n_seeds - 1
//                first_seed = 0
//                out_dir = valp_out
//                workers = 0          0: one per hardware thread
//   [data]       source = synthetic   synthetic | idx
//                images =, labels =   IDX paths when source = idx
//                classes = 10         label classes for idx data
//                rows = 28, cols = 28 expected IDX image size
//                n = 3000             synthetic images
//                side = 8             synthetic image side
//                synthetic_classes = 3
//                seed = 0             synthetic generation and train/eval split
//                eval_fraction = 0.2
//                max_eval_rows = 1000 evaluation subset size (0: all)
//                cache =              dataset cache file, written on first use
//   [search]     step_limit = 60
//                initial_batches = 5000
//                retrain_batches = 1000
//                policy = guided      used by mode = single
//                stuck_threshold = -1e-10
//                steep_threshold = -2e-5
//                relevance_threshold = 1.2
//                probes = false
//   [training]   batch_size = 200
//                optimizer = adam     sgd | momentum | adam
//                learning_rate = 0.001
//   [study]      n_models = 100
//                initial_batches = 20000
//                retrain_batches = 5000
//                batch_size = 200
//
// --desk-scale divides every batch budget by 100 (never below 2).

#include <atomic>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "valp/data.hpp"
#include "valp/pareto.hpp"
#include "valp/serialize.hpp"

namespace valp {

enum class Mode { OperatorStudy, PairedSearch, SingleRun };

struct DataConfig {
    std::string source = "synthetic";
    std::string images, labels;
    std::size_t classes = 10;
    std::size_t rows = 28, cols = 28;
    std::size_t n = 3000;
    std::size_t side = 8;
    std::size_t synthetic_classes = 3;
    std::uint64_t seed = 0;
    double eval_fraction = 0.2;
    std::size_t max_eval_rows = 1000;
    std::string cache;
};

struct TrainingDefaults {
    std::size_t batch_size = 200;
    OptimizerKind optimizer = OptimizerKind::Adam;
    double learning_rate = 1e-3;
};

struct StudyConfig {
    std::size_t n_models = 100;
    std::size_t initial_batches = 20000;
    std::size_t retrain_batches = 5000;
    std::size_t batch_size = 200;
};

struct ExperimentConfig {
    Mode mode = Mode::PairedSearch;
    std::size_t n_seeds = 30;
    std::uint64_t first_seed = 0;
    std::string out_dir = "valp_out";
    std::size_t workers = 0;
    DataConfig data;
    SearchConfig search;
    TrainingDefaults training;
    StudyConfig study;
};

// ---------------------------------------------------------------------------
// Parsing

namespace detail {

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
    T v{};
    const char* end = text.data() + text.size();
    auto [ptr, ec] = std::from_chars(text.data(), end, v);
    if (ec != std::errc{} || ptr != end) throw ConfigError("config: " + key + ": not a valid number: '" + text + "'");
    return v;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
    if (text == "true" || text == "1" || text == "yes") return true;
    if (text == "false" || text == "0" || text == "no") return false;
    throw ConfigError("config: " + key + ": expected true or false, got '" + text + "'");
}

inline void require(bool ok, const std::string& key, const std::string& what) {
    if (!ok) throw ConfigError("config: " + key + ": " + what);
}

}  // namespace detail

/// Throws ConfigError naming the first key whose value breaks an invariant.
inline void validate_config(const ExperimentConfig& c) {
    using detail::require;
    require(c.n_seeds >= 1, "experiment.n_seeds", "must be at least 1");
    require(c.data.source == "synthetic" || c.data.source == "idx", "data.source", "must be synthetic or idx");
    if (c.data.source == "idx") {
        require(!c.data.images.empty(), "data.images", "required when source = idx");
        require(!c.data.labels.empty(), "data.labels", "required when source = idx");
    }
    require(c.data.classes >= 1 && c.data.classes <= 255, "data.classes", "must be in 1..255");
    require(c.data.synthetic_classes >= 1 && c.data.synthetic_classes <= 255, "data.synthetic_classes", "must be in 1..255");
    require(c.data.side >= 4, "data.side", "must be at least 4");
    require(c.data.n >= 2, "data.n", "must be at least 2");
    require(c.data.eval_fraction > 0.0 && c.data.eval_fraction < 1.0, "data.eval_fraction", "must be in (0, 1)");
    require(c.search.step_limit >= 1, "search.step_limit", "must be at least 1");
    require(c.search.initial_batches >= 2, "search.initial_batches", "must be at least 2");
    require(c.search.retrain_batches >= 2, "search.retrain_batches", "must be at least 2");
    require(c.search.thresholds.stuck > c.search.thresholds.steep, "search.stuck_threshold",
            "must be greater than search.steep_threshold");
    require(c.search.thresholds.relevance > 0.0, "search.relevance_threshold", "must be positive");
    require(c.training.batch_size >= 1, "training.batch_size", "must be at least 1");
    require(c.training.learning_rate > 0.0 && std::isfinite(c.training.learning_rate), "training.learning_rate",
            "must be positive");
    require(c.study.n_models >= 1, "study.n_models", "must be at least 1");
    require(c.study.initial_batches >= 2, "study.initial_batches", "must be at least 2");
    require(c.study.retrain_batches >= 1, "study.retrain_batches", "must be at least 1");
    require(c.study.batch_size >= 1, "study.batch_size", "must be at least 1");
}

inline ExperimentConfig parse_config(const std::string& text) {
    namespace pt = boost::property_tree;
    pt::ptree tree;
    std::istringstream in(text);
    try {
        pt::ini_parser::read_ini(in, tree);
    } catch (const pt::ini_parser_error& e) {
        throw ConfigError("config: line " + std::to_string(e.line()) + ": " + e.message());
    }

    ExperimentConfig c;
    using detail::parse_number;
    for (const auto& [section, keys] : tree) {
        if (!keys.data().empty()) throw ConfigError("config: key '" + section + "' outside any section");
        for (const auto& [key, node] : keys) {
            const std::string name = section + "." + key;
            const std::string v = node.data();
            auto num = [&]<typename T>(T& slot) { slot = parse_number<T>(name, v); };

            if (section == "experiment") {
                if (key == "mode") {
                    if (v == "study") c.mode = Mode::OperatorStudy;
                    else if (v == "search") c.mode = Mode::PairedSearch;
                    else if (v == "single") c.mode = Mode::SingleRun;
                    else throw ConfigError("config: " + name + ": expected study, search or single");
                } else if (key == "n_seeds") num(c.n_seeds);
                else if (key == "first_seed") num(c.first_seed);
                else if (key == "out_dir") c.out_dir = v;
                else if (key == "workers") num(c.workers);
                else throw ConfigError("config: unknown key " + name);
            } else if (section == "data") {
                if (key == "source") c.data.source = v;
                else if (key == "images") c.data.images = v;
                else if (key == "labels") c.data.labels = v;
                else if (key == "classes") num(c.data.classes);
                else if (key == "rows") num(c.data.rows);
                else if (key == "cols") num(c.data.cols);
                else if (key == "n") num(c.data.n);
                else if (key == "side") num(c.data.side);
                else if (key == "synthetic_classes") num(c.data.synthetic_classes);
                else if (key == "seed") num(c.data.seed);
                else if (key == "eval_fraction") num(c.data.eval_fraction);
                else if (key == "max_eval_rows") num(c.data.max_eval_rows);
                else if (key == "cache") c.data.cache = v;
                else throw ConfigError("config: unknown key " + name);
            } else if (section == "search") {
                if (key == "step_limit") num(c.search.step_limit);
                else if (key == "initial_batches") num(c.search.initial_batches);
                else if (key == "retrain_batches") num(c.search.retrain_batches);
                else if (key == "policy") {
                    auto p = parse_policy(v);
                    if (!p) throw ConfigError("config: " + name + ": expected random or guided");
                    c.search.policy = *p;
                } else if (key == "stuck_threshold") num(c.search.thresholds.stuck);
                else if (key == "steep_threshold") num(c.search.thresholds.steep);
                else if (key == "relevance_threshold") num(c.search.thresholds.relevance);
                else if (key == "probes") c.search.probes = detail::parse_bool(name, v);
                else throw ConfigError("config: unknown key " + name);
            } else if (section == "training") {
                if (key == "batch_size") num(c.training.batch_size);
                else if (key == "optimizer") {
                    auto k = parse_optimizer_kind(v);
                    if (!k) throw ConfigError("config: " + name + ": expected sgd, momentum or adam");
                    c.training.optimizer = *k;
                } else if (key == "learning_rate") num(c.training.learning_rate);
                else throw ConfigError("config: unknown key " + name);
            } else if (section == "study") {
                if (key == "n_models") num(c.study.n_models);
                else if (key == "initial_batches") num(c.study.initial_batches);
                else if (key == "retrain_batches") num(c.study.retrain_batches);
                else if (key == "batch_size") num(c.study.batch_size);
                else throw ConfigError("config: unknown key " + name);
            } else {
                throw ConfigError("config: unknown section [" + section + "]");
            }
        }
    }
    validate_config(c);
    return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& p) {
    std::ifstream in(p);
    if (!in) throw IdxError(IdxError::Kind::Io, "cannot open config " + p.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

/// Divides every batch budget by 100, keeping at least 2 batches.
inline void apply_desk_scale(ExperimentConfig& c) {
    for (std::size_t* b : {&c.search.initial_batches, &c.search.retrain_batches, &c.study.initial_batches,
                           &c.study.retrain_batches})
        *b = std::max<std::size_t>(2, *b / 100);
}

// ---------------------------------------------------------------------------
// Plumbing

/// Writes to a temporary sibling, then renames over `p`.
inline void write_atomic(const std::filesystem::path& p, const std::string& content) {
    auto tmp = p;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw IdxError(IdxError::Kind::Io, "cannot write " + tmp.string());
        out << content;
        if (!out) throw IdxError(IdxError::Kind::Io, "write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, p);
}

inline std::string read_text(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw IdxError(IdxError::Kind::Io, "cannot open " + p.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

/// Runs body(0..n-1) on at most `workers` threads (0: hardware concurrency).
/// Exceptions escaping `body` are rethrown after every task has finished.
inline void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& body) {
    if (workers == 0) workers = std::max(1u, std::thread::hardware_concurrency());
    workers = std::min(workers, n);
    std::atomic<std::size_t> next{0};
    std::exception_ptr first;
    std::mutex mu;
    auto loop = [&] {
        for (std::size_t i; (i = next.fetch_add(1)) < n;) {
            try {
                body(i);
            } catch (...) {
                std::lock_guard lock(mu);
                if (!first) first = std::current_exception();
            }
        }
    };
    if (workers <= 1) {
        loop();
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(loop);
    }
    if (first) std::rethrow_exception(first);
}

class Log {
public:
    explicit Log(std::ostream* os) : os_(os) {}
    void operator()(const std::string& line) {
        if (!os_) return;
        std::lock_guard lock(mu_);
        *os_ << line << '\n' << std::flush;
    }

private:
    std::ostream* os_;
    std::mutex mu_;
};

// ---------------------------------------------------------------------------
// Data and models

inline Dataset load_dataset(const DataConfig& c) {
    if (!c.cache.empty() && std::filesystem::exists(c.cache)) return load_cache(c.cache);
    Dataset d = c.source == "idx" ? load_idx(c.images, c.labels, c.classes, c.rows, c.cols)
                                  : synthetic_dataset(c.n, c.side, c.synthetic_classes, c.seed);
    split(d, c.eval_fraction, c.seed);
    if (!c.cache.empty()) save_cache(c.cache, d);
    return d;
}

inline SearchData search_data(const Dataset& d, std::size_t max_eval_rows) {
    std::span<const std::size_t> eval(d.eval_idx);
    if (max_eval_rows && eval.size() > max_eval_rows) eval = eval.first(max_eval_rows);
    return {to_task(d, d.train_idx), to_task(d, eval)};
}

inline RandomModelOptions model_options(const TrainingDefaults& t, std::size_t batch_size) {
    RandomModelOptions o;
    o.batch_size = batch_size;
    o.optimizer.kind = t.optimizer;
    o.optimizer.learning_rate = t.learning_rate;
    return o;
}

inline std::string history_name(Policy p, std::uint64_t seed) {
    return "history_" + std::string(to_string(p)) + "_seed" + std::to_string(seed) + ".csv";
}

// ---------------------------------------------------------------------------
// Paired search

struct RunFailure {
    std::string run;
    std::string message;
};

/// Runs one search per (seed, policy) and skips runs whose history file already
/// exists, so an interrupted experiment resumes where it stopped. History files
/// are written last and atomically; their presence marks a finished run.
inline std::vector<RunFailure> run_searches(const ExperimentConfig& c, std::span<const Policy> policies,
                                            std::ostream* log_stream = nullptr) {
    namespace fs = std::filesystem;
    const fs::path out = c.out_dir;
    fs::create_directories(out / "checkpoints");
    Log log(log_stream);
    const Dataset d = load_dataset(c.data);
    const SearchData data = search_data(d, c.data.max_eval_rows);
    const ProblemSpec problem = dataset_problem(d);

    struct Job {
        std::uint64_t seed;
        Policy policy;
    };
    std::vector<Job> jobs;
    for (std::size_t i = 0; i < c.n_seeds; ++i)
        for (Policy p : policies) jobs.push_back({c.first_seed + i, p});

    // Initial models first, so both policies of a seed start from the same file.
    for (std::size_t i = 0; i < c.n_seeds; ++i) {
        const std::uint64_t seed = c.first_seed + i;
        const fs::path init = out / "checkpoints" / ("initial_seed" + std::to_string(seed) + ".valp");
        if (!fs::exists(init))
            write_atomic(init, serialize(random_model(problem, derive_seed(seed, "init"),
                                                      model_options(c.training, c.training.batch_size))));
    }

    std::vector<RunFailure> failures;
    std::mutex mu;
    parallel_for(jobs.size(), c.workers, [&](std::size_t j) {
        const Job job = jobs[j];
        const std::string tag = std::string(to_string(job.policy)) + " seed " + std::to_string(job.seed);
        const fs::path history = out / history_name(job.policy, job.seed);
        if (fs::exists(history)) {
            log("skip " + tag + " (finished earlier)");
            return;
        }
        try {
            const ModelGraph initial =
                deserialize(read_text(out / "checkpoints" / ("initial_seed" + std::to_string(job.seed) + ".valp")));
            SearchConfig sc = c.search;
            sc.policy = job.policy;
            sc.seed = job.seed;
            log("start " + tag);
            SearchResult r = hill_climb(sc, initial, data);
            write_atomic(out / "checkpoints" /
                             ("final_" + std::string(to_string(job.policy)) + "_seed" + std::to_string(job.seed) + ".valp"),
                         serialize(r.model));
            std::ostringstream csv;
            write_history_csv(csv, r.history);
            write_atomic(history, csv.str());
            log("done " + tag);
        } catch (const std::exception& e) {
            log("failed " + tag + ": " + e.what());
            std::lock_guard lock(mu);
            failures.push_back({tag, e.what()});
        }
    });
    return failures;
}

// ---------------------------------------------------------------------------
// Analysis

struct HistoryRow {
    std::size_t step = 0;
    bool accepted = false;
    FitnessTuple losses;
};

/// Reads a history CSV back; the incumbent trajectory is rebuilt from the
/// accepted rows.
inline RunRecord read_history(const std::string& text, std::string id, Policy policy, std::uint64_t seed) {
    std::istringstream in(text);
    std::string line;
    std::getline(in, line);  // header
    RunRecord r{std::move(id), policy, seed, {}};
    FitnessTuple current;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ls(line);
        for (std::string cell; std::getline(ls, cell, ',');) cells.push_back(cell);
        if (cells.size() < 7) throw ParseError("history: expected at least 7 columns", lineno);
        const auto step = detail::parse_number<std::size_t>("step", cells[0]);
        const bool accepted = cells[5] == "1";
        FitnessTuple f;
        for (std::size_t i = 6; i < cells.size(); ++i)
            f.losses.push_back(cells[i] == "nan" ? std::nan("") : detail::parse_number<double>("loss", cells[i]));
        if (step == 0 || accepted) current = f;
        r.points.emplace_back(step, current);
    }
    return r;
}

struct StudyRow {
    std::size_t model = 0;
    std::string op, variant, target, output;
    double pre = 0, post = 0;
};

/// Per-step front counts for every seed pair and for the pooled runs, plus
/// boxplot and barplot SVGs. Returns the number of run pairs analysed.
inline std::size_t analyze_searches(const std::filesystem::path& out) {
    namespace fs = std::filesystem;
    std::map<std::uint64_t, std::map<Policy, RunRecord>> runs;
    for (const auto& entry : fs::directory_iterator(out)) {
        const std::string name = entry.path().filename().string();
        for (Policy p : {Policy::Random, Policy::Guided}) {
            const std::string prefix = "history_" + std::string(to_string(p)) + "_seed";
            if (name.rfind(prefix, 0) != 0 || !name.ends_with(".csv")) continue;
            const auto seed =
                detail::parse_number<std::uint64_t>(name, name.substr(prefix.size(), name.size() - prefix.size() - 4));
            runs[seed][p] = read_history(read_text(entry.path()), name, p, seed);
        }
    }
    std::vector<RunRecord> all;
    std::size_t max_step = 0, pairs = 0;
    for (const auto& [seed, by_policy] : runs)
        for (const auto& [p, r] : by_policy) {
            all.push_back(r);
            if (!r.points.empty()) max_step = std::max(max_step, r.points.back().first);
        }
    if (all.empty()) return 0;

    std::ostringstream per_pair, combined;
    per_pair << "step,seed,count_random,count_guided\n";
    combined << "step,count_random,count_guided\n";
    std::vector<std::size_t> steps;
    std::vector<std::vector<double>> box_random, box_guided;
    std::vector<double> bar_random, bar_guided;
    for (std::size_t step = 1; step <= max_step; ++step) {
        steps.push_back(step);
        box_random.emplace_back();
        box_guided.emplace_back();
        for (const auto& [seed, by_policy] : runs) {
            if (!by_policy.contains(Policy::Random) || !by_policy.contains(Policy::Guided)) continue;
            const auto c = per_pair_counts(by_policy.at(Policy::Random), by_policy.at(Policy::Guided), step);
            per_pair << step << ',' << seed << ',' << c.random << ',' << c.guided << '\n';
            box_random.back().push_back(static_cast<double>(c.random));
            box_guided.back().push_back(static_cast<double>(c.guided));
        }
        std::size_t cr = 0, cg = 0;
        for (const auto& f : combined_front(all, step)) (f.policy == Policy::Random ? cr : cg) += 1;
        combined << step << ',' << cr << ',' << cg << '\n';
        bar_random.push_back(static_cast<double>(cr));
        bar_guided.push_back(static_cast<double>(cg));
    }
    for (const auto& [seed, by_policy] : runs) pairs += by_policy.size() == 2;

    write_atomic(out / "pareto_per_pair.csv", per_pair.str());
    write_atomic(out / "pareto_combined.csv", combined.str());
    fs::create_directories(out / "plots");
    std::ostringstream box, bar;
    write_boxplot_svg(box, "Front points per run pair", steps, box_random, box_guided);
    write_barplot_svg(bar, "Front points across all runs", steps, bar_random, bar_guided);
    write_atomic(out / "plots" / "pareto_per_pair.svg", box.str());
    write_atomic(out / "plots" / "pareto_combined.svg", bar.str());
    return pairs;
}

inline std::vector<StudyRow> read_study(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    std::getline(in, line);
    std::vector<StudyRow> rows;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> c;
        std::stringstream ls(line);
        for (std::string cell; std::getline(ls, cell, ',');) c.push_back(cell);
        if (c.size() < 7) throw ParseError("study: expected at least 7 columns", lineno);
        auto real = [&](const std::string& s) { return s == "nan" ? std::nan("") : detail::parse_number<double>("loss", s); };
        rows.push_back({detail::parse_number<std::size_t>("model", c[0]), c[1], c[2], c[3], c[4], real(c[5]), real(c[6])});
    }
    return rows;
}

/// G statistic for every (model, operator, target, output) measured with both
/// variants. Samples with non-positive losses or a pre-loss of exactly 1 are skipped.
inline std::size_t analyze_study(const std::filesystem::path& out) {
    const auto rows = read_study(read_text(out / "study.csv"));
    using Key = std::tuple<std::size_t, std::string, std::string, std::string>;
    std::map<Key, std::map<std::string, const StudyRow*>> groups;
    for (const auto& r : rows) groups[{r.model, r.op, r.target, r.output}][r.variant] = &r;
    std::ostringstream csv;
    csv << "model,operator,target,output,pre_loss,gentle_ratio,aggressive_ratio,g_raw,g\n";
    std::size_t n = 0;
    for (const auto& [key, by_variant] : groups) {
        if (!by_variant.contains("gentle") || !by_variant.contains("aggressive")) continue;
        const StudyRow& g = *by_variant.at("gentle");
        const StudyRow& a = *by_variant.at("aggressive");
        GSample s;
        try {
            s = g_difference(g.pre, g.post, a.post);
        } catch (const std::invalid_argument&) {
            continue;
        }
        if (!std::isfinite(s.raw)) continue;
        const auto& [model, op, target, output] = key;
        csv << model << ',' << op << ',' << target << ',' << output << ',' << format_real(g.pre) << ','
            << format_real(s.gentle_ratio) << ',' << format_real(s.aggressive_ratio) << ',' << format_real(s.raw) << ','
            << format_real(s.g) << '\n';
        ++n;
    }
    write_atomic(out / "g_difference.csv", csv.str());
    return n;
}

// ---------------------------------------------------------------------------
// Operator study

/// For each model: train a random model with twice as many nets as outputs,
/// then apply every applicable mutation variant to a copy, retrain it with the
/// same data stream, and record per-output losses before and after along with
/// the slope of the initial training and the relevance of the targeted net.
/// Finished models are checkpointed so a rerun resumes.
inline std::vector<RunFailure> run_operator_study(const ExperimentConfig& c, std::ostream* log_stream = nullptr) {
    namespace fs = std::filesystem;
    const fs::path out = c.out_dir;
    const fs::path parts = out / "checkpoints" / "study";
    fs::create_directories(parts);
    Log log(log_stream);
    const Dataset d = load_dataset(c.data);
    const SearchData data = search_data(d, c.data.max_eval_rows);
    const ProblemSpec problem = dataset_problem(d);

    std::vector<RunFailure> failures;
    std::mutex mu;
    parallel_for(c.study.n_models, c.workers, [&](std::size_t k) {
        const fs::path part = parts / ("model" + std::to_string(k) + ".csv");
        if (fs::exists(part)) return;
        const std::uint64_t seed = derive_seed(c.first_seed, "study-model", k);
        try {
            RandomModelOptions opt = model_options(c.training, c.study.batch_size);
            opt.min_nets = opt.max_nets = 2 * problem.targets.size();
            ModelGraph m = random_model(problem, seed, opt);
            const LossTrace trace = train(m, data.train, c.study.initial_batches, derive_seed(seed, "retrain", 0));
            const FitnessTuple pre = evaluate(m, data.eval);
            std::map<NodeId, std::map<NodeId, double>> relevance;
            for (const auto& n : m.nets) relevance[n.id] = module_intervention(m, n.id, data.eval, seed, &pre);

            std::ostringstream rows;
            std::size_t index = 0;
            for (const auto& op : applicable_operators(m, kMutationKinds)) {
                FitnessTuple post = detail::nan_fitness(m.outputs.size());
                try {
                    ModelGraph cand = apply(m, op, derive_seed(seed, "study-op", index));
                    train(cand, data.train, c.study.retrain_batches, derive_seed(seed, "retrain", 1));
                    post = evaluate(cand, data.eval);
                } catch (const TrainingDivergedError&) {
                }
                ++index;
                std::optional<NodeId> net;
                if (const auto* id = std::get_if<NodeId>(&op.target); id && id->is_net()) net = *id;
                if (const auto* a = std::get_if<Arc>(&op.target); a && a->from.is_net()) net = a->from;
                for (std::size_t i = 0; i < m.outputs.size(); ++i) {
                    const NodeId o = m.outputs[i].id;
                    rows << k << ',' << to_string(op.kind) << ',' << to_string(op.variant) << ','
                         << target_string(op.target) << ',' << to_string(o) << ',' << format_real(pre[i]) << ','
                         << format_real(post[i]) << ',' << format_real(loss_slope(trace.series(i), trace.size())) << ','
                         << (net ? format_real(relevance.at(*net).at(o)) : "na") << '\n';
                }
            }
            write_atomic(part, rows.str());
            log("study model " + std::to_string(k) + ": " + std::to_string(index) + " operators");
        } catch (const std::exception& e) {
            log("study model " + std::to_string(k) + " failed: " + e.what());
            std::lock_guard lock(mu);
            failures.push_back({"model " + std::to_string(k), e.what()});
        }
    });

    std::string csv = "model,operator,variant,target,output,pre_loss,post_loss,slope,relevance\n";
    for (std::size_t k = 0; k < c.study.n_models; ++k) {
        const fs::path part = parts / ("model" + std::to_string(k) + ".csv");
        if (fs::exists(part)) csv += read_text(part);
    }
    write_atomic(out / "study.csv", csv);
    analyze_study(out);
    return failures;
}

/// Paired random and guided runs for every seed, then the front analysis.
inline std::vector<RunFailure> run_paired_search(const ExperimentConfig& c, std::ostream* log_stream = nullptr) {
    constexpr Policy both[] = {Policy::Random, Policy::Guided};
    auto failures = run_searches(c, both, log_stream);
    analyze_searches(c.out_dir);
    return failures;
}

}  // namespace valp
