#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "fcl/config.hpp"
#include "fcl/engine.hpp"
#include "fcl/report.hpp"
#include "fcl/scenario.hpp"
#include "fcl/sweep.hpp"

namespace {

// Seed precedence: --seed flag, then FCL_SEED, then the config file.
fcl::ExperimentConfig load_config(const std::string& path,
                                  const std::optional<std::uint64_t>& seed_flag) {
    fcl::ExperimentConfig cfg = fcl::ExperimentConfig::parse_file(path);
    if (seed_flag) {
        cfg.seed = *seed_flag;
    } else if (const char* env = std::getenv("FCL_SEED")) {
        cfg.seed = fcl::detail::parse_u64(env, "FCL_SEED");
    }
    cfg.finalize();
    return cfg;
}

int cmd_generate(const std::string& config_path, std::string out_path,
                 const std::optional<std::uint64_t>& seed_flag, bool quiet) {
    fcl::ExperimentConfig cfg = load_config(config_path, seed_flag);
    cfg.scenario.validate();
    if (out_path.empty()) out_path = cfg.output_dir + "/scenario.fcl";
    fcl::RawScenario raw = fcl::generate_raw(cfg.scenario);
    if (auto dir = std::filesystem::path(out_path).parent_path(); !dir.empty()) {
        std::filesystem::create_directories(dir);
    }
    fcl::write_records_file(raw, out_path);
    if (!quiet) {
        std::size_t total = 0;
        for (const auto& cell : raw.cells) total += cell.size();
        std::cout << "wrote " << total << " samples to " << out_path << "\n";
    }
    return 0;
}

int cmd_run(const std::string& config_path, const std::string& out_dir,
            const std::optional<std::uint64_t>& seed_flag, bool quiet) {
    fcl::ExperimentConfig cfg = load_config(config_path, seed_flag);
    if (!out_dir.empty()) cfg.output_dir = out_dir;
    fcl::ExperimentResult result = fcl::run_experiment(cfg.build_plan());
    fcl::write_run_reports(result, cfg, cfg.output_dir);
    if (!quiet) {
        std::cout << "family " << fcl::family_name(cfg.algorithm.family)
                  << " seed " << cfg.seed << "\n";
        std::cout << "amse = " << fcl::amse(result.matrix) << "\n";
        if (result.matrix.tasks >= 2) {
            std::cout << "bwt = " << fcl::bwt(result.matrix) << "\n";
            std::cout << "fwt = " << fcl::fwt(result.matrix) << "\n";
        }
        std::cout << "reports in " << cfg.output_dir << "\n";
    }
    return 0;
}

int cmd_sweep(const std::string& config_path, const std::string& grid_spec,
              const std::string& out_dir, const std::optional<std::uint64_t>& seed_flag,
              unsigned jobs, bool quiet) {
    fcl::ExperimentConfig cfg = load_config(config_path, seed_flag);
    if (!out_dir.empty()) cfg.output_dir = out_dir;
    fcl::SweepGrid grid = fcl::parse_grid_spec(grid_spec, cfg);
    if (!quiet) {
        std::cout << "sweeping " << grid.point_count() << " grid points\n";
    }
    fcl::SweepTable table = fcl::run_sweep(cfg, grid, jobs);
    std::filesystem::create_directories(cfg.output_dir);
    std::string path = cfg.output_dir + "/sweep.csv";
    std::ofstream os(path, std::ios::binary);
    if (!os) throw fcl::ConfigError("cannot write " + path);
    fcl::write_sweep_csv(table, cfg, os);
    if (!quiet) std::cout << "wrote " << path << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"deterministic federated continual learning simulator"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out;
    std::string grid_spec;
    std::optional<std::uint64_t> seed_flag;
    unsigned jobs = std::thread::hardware_concurrency();
    bool quiet = false;

    auto add_common = [&](CLI::App* sub, bool need_grid) {
        sub->add_option("--config", config_path, "experiment config file")->required();
        sub->add_option("--seed", seed_flag, "seed override (beats FCL_SEED and config)");
        sub->add_option("--out", out, "output directory (generate: output file)");
        sub->add_flag("--quiet", quiet, "suppress progress output");
        if (need_grid) {
            sub->add_option("--grid", grid_spec, "grid spec 'key=v1,v2;key2=w1,...'")
                ->required();
            sub->add_option("--jobs", jobs, "max parallel grid points");
        }
    };

    CLI::App* generate = app.add_subcommand("generate", "write a synthetic scenario data file");
    add_common(generate, false);
    CLI::App* run = app.add_subcommand("run", "run one experiment and write reports");
    add_common(run, false);
    CLI::App* sweep = app.add_subcommand("sweep", "run a config grid and aggregate metrics");
    add_common(sweep, true);

    CLI11_PARSE(app, argc, argv);

    try {
        if (generate->parsed()) return cmd_generate(config_path, out, seed_flag, quiet);
        if (run->parsed()) return cmd_run(config_path, out, seed_flag, quiet);
        if (sweep->parsed()) return cmd_sweep(config_path, grid_spec, out, seed_flag, jobs, quiet);
    } catch (const fcl::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const fcl::DivergenceError& e) {
        std::cerr << "divergence: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
