// valp_cli: operator study, paired search, analysis and model validation.
//
// Exit codes: 0 success, 2 usage or configuration error, 3 input/output error,
// 4 invalid model file, 5 runtime failure (including failed runs).

#include <filesystem>
#include <iostream>

#include "CLI11.hpp"
#include "valp/valp.hpp"

namespace {

enum Exit { kOk = 0, kUsage = 2, kIo = 3, kModel = 4, kRuntime = 5 };

struct RunOptions {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    bool desk_scale = false;
    std::optional<std::size_t> workers;
};

void add_run_options(CLI::App* cmd, RunOptions& o) {
    cmd->add_option("--config", o.config, "INI configuration file (defaults when omitted)")->check(CLI::ExistingFile);
    cmd->add_option("--seed", o.seed, "first seed (overrides experiment.first_seed)");
    cmd->add_option("--out", o.out, "output directory (overrides experiment.out_dir)");
    cmd->add_flag("--desk-scale", o.desk_scale, "divide every batch budget by 100");
    cmd->add_option("--workers", o.workers, "worker threads (overrides experiment.workers)");
}

valp::ExperimentConfig resolve(const RunOptions& o) {
    valp::ExperimentConfig c = o.config.empty() ? valp::parse_config("") : valp::load_config(o.config);
    if (o.seed) c.first_seed = *o.seed;
    if (!o.out.empty()) c.out_dir = o.out;
    if (o.workers) c.workers = *o.workers;
    if (o.desk_scale) valp::apply_desk_scale(c);
    return c;
}

int report(const std::vector<valp::RunFailure>& failures) {
    for (const auto& f : failures) std::cerr << "failed: " << f.run << ": " << f.message << '\n';
    return failures.empty() ? kOk : kRuntime;
}

int validate_model(const std::string& path) {
    const valp::ModelGraph m = valp::deserialize(valp::read_text(path), false);
    const auto violations = valp::validate(m);
    for (const auto& v : violations) std::cout << valp::to_string(v) << '\n';
    if (!violations.empty()) return kModel;
    std::cout << "valid: " << m.inputs.size() << " inputs, " << m.nets.size() << " nets, " << m.outputs.size()
              << " outputs, " << valp::weight_count(m) << " weights\n";
    return kOk;
}

int analyze(const std::filesystem::path& out) {
    bool any = false;
    if (std::filesystem::exists(out / "study.csv")) {
        std::cout << valp::analyze_study(out) << " G samples\n";
        any = true;
    }
    if (const std::size_t pairs = valp::analyze_searches(out); pairs > 0 || !any) {
        std::cout << pairs << " run pairs\n";
        any = any || pairs > 0;
    }
    if (!any) {
        std::cerr << "nothing to analyze in " << out << '\n';
        return kIo;
    }
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Structure search over multi-network models"};
    app.require_subcommand(1);

    RunOptions study_opts, search_opts;
    auto* study = app.add_subcommand("study", "apply every operator to trained random models");
    add_run_options(study, study_opts);
    auto* search = app.add_subcommand("search", "paired random and guided hill climbing per seed");
    add_run_options(search, search_opts);
    std::string analyze_dir;
    auto* analyze_cmd = app.add_subcommand("analyze", "recompute front counts and G statistics from logs");
    analyze_cmd->add_option("--out", analyze_dir, "experiment output directory")->required();
    std::string model_path;
    auto* validate_cmd = app.add_subcommand("validate-model", "check a serialized model");
    validate_cmd->add_option("model", model_path, "model file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }

    try {
        if (*study) {
            auto c = resolve(study_opts);
            return report(valp::run_operator_study(c, &std::cerr));
        }
        if (*search) {
            auto c = resolve(search_opts);
            if (c.mode == valp::Mode::SingleRun) {
                const valp::Policy one[] = {c.search.policy};
                auto failures = valp::run_searches(c, one, &std::cerr);
                return report(failures);
            }
            return report(valp::run_paired_search(c, &std::cerr));
        }
        if (*analyze_cmd) return analyze(analyze_dir);
        if (*validate_cmd) return validate_model(model_path);
    } catch (const valp::ConfigError& e) {
        std::cerr << e.what() << '\n';
        return kUsage;
    } catch (const valp::IdxError& e) {
        std::cerr << e.what() << '\n';
        return kIo;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << e.what() << '\n';
        return kIo;
    } catch (const valp::ParseError& e) {
        std::cerr << e.what() << '\n';
        return kModel;
    } catch (const valp::InvalidModelError& e) {
        std::cerr << e.what() << '\n';
        return kModel;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kRuntime;
    }
    return kUsage;
}
