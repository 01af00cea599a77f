#include <catch2/catch_amalgamated.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#ifndef FCL_CLI_BINARY
#define FCL_CLI_BINARY "./tools/fcl"
#endif

namespace {

namespace fs = std::filesystem;

fs::path fresh_dir(const std::string& name) {
    fs::path dir = fs::temp_directory_path() / "fcl_cli_tests" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

void write_file(const fs::path& path, const std::string& content) {
    std::ofstream os(path);
    os << content;
}

std::string slurp(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    REQUIRE(is.good());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

int run_cli(const std::string& args) {
    std::string cmd = std::string(FCL_CLI_BINARY) + " " + args + " > /dev/null 2>&1";
    int rc = std::system(cmd.c_str());
    return WEXITSTATUS(rc);
}

std::size_t count_lines(const std::string& text) {
    std::size_t n = 0;
    for (char ch : text) {
        if (ch == '\n') ++n;
    }
    return n;
}

const char* kTinyConfig =
    "seed = 9\n"
    "scenario.clients = 2\n"
    "scenario.tasks = 2\n"
    "scenario.size_table = 40,40 / 40,40\n"
    "scenario.feature_dim = 3\n"
    "model.hidden = 6\n"
    "algorithm.family = elastic_transfer\n"
    "algorithm.lambda1 = 1\n"
    "algorithm.lambda2 = 1\n"
    "algorithm.lambda3 = 0\n"
    "algorithm.lr = 0.05\n"
    "schedule.rounds_per_task = 1\n"
    "schedule.epochs_per_round = 1\n";

}  // namespace

TEST_CASE("generate writes the default scenario deterministically", "[cli]") {
    fs::path dir = fresh_dir("generate");
    write_file(dir / "default.cfg", "seed = 42\n");

    REQUIRE(run_cli("generate --config " + (dir / "default.cfg").string() + " --out " +
                    (dir / "a.fcl").string() + " --quiet") == 0);
    std::string a = slurp(dir / "a.fcl");
    REQUIRE(a.rfind("#fcl-v1,d=16\n", 0) == 0);
    // benchmark size table totals 9280 samples
    REQUIRE(count_lines(a) == 9280 + 1);

    REQUIRE(run_cli("generate --config " + (dir / "default.cfg").string() + " --out " +
                    (dir / "b.fcl").string() + " --quiet") == 0);
    REQUIRE(slurp(dir / "b.fcl") == a);
}

TEST_CASE("run emits reports and honors seed precedence", "[cli]") {
    fs::path dir = fresh_dir("run");
    write_file(dir / "tiny.cfg", kTinyConfig);
    std::string base = "run --config " + (dir / "tiny.cfg").string();

    REQUIRE(run_cli(base + " --out " + (dir / "out1").string() + " --quiet") == 0);
    std::string metrics = slurp(dir / "out1/metrics.txt");
    REQUIRE(metrics.find("amse = ") != std::string::npos);
    REQUIRE(metrics.find("bwt = ") != std::string::npos);
    REQUIRE(metrics.find("fwt = ") != std::string::npos);
    REQUIRE(metrics.find("config.seed = 9") != std::string::npos);
    REQUIRE(fs::exists(dir / "out1/pmatrix.csv"));
    REQUIRE(fs::exists(dir / "out1/trainlog.csv"));

    // FCL_SEED overrides the config
    std::string env_cmd = "FCL_SEED=33 " + std::string(FCL_CLI_BINARY) + " " + base +
                          " --out " + (dir / "out2").string() +
                          " --quiet > /dev/null 2>&1";
    REQUIRE(WEXITSTATUS(std::system(env_cmd.c_str())) == 0);
    REQUIRE(slurp(dir / "out2/metrics.txt").find("config.seed = 33") !=
            std::string::npos);

    // the --seed flag beats FCL_SEED
    std::string flag_cmd = "FCL_SEED=33 " + std::string(FCL_CLI_BINARY) + " " + base +
                           " --seed 77 --out " + (dir / "out3").string() +
                           " --quiet > /dev/null 2>&1";
    REQUIRE(WEXITSTATUS(std::system(flag_cmd.c_str())) == 0);
    REQUIRE(slurp(dir / "out3/metrics.txt").find("config.seed = 77") !=
            std::string::npos);
}

TEST_CASE("run reports config errors and divergence via exit codes", "[cli]") {
    fs::path dir = fresh_dir("exit_codes");

    write_file(dir / "broken.cfg", "scenario.clientz = 3\n");
    REQUIRE(run_cli("run --config " + (dir / "broken.cfg").string() + " --out " +
                    (dir / "out").string() + " --quiet") == 2);

    REQUIRE(run_cli("run --config " + (dir / "missing.cfg").string() + " --out " +
                    (dir / "out").string() + " --quiet") == 2);

    std::string diverging = kTinyConfig;
    diverging += "schedule.epochs_per_round = 40\n";
    diverging.replace(diverging.find("algorithm.lr = 0.05"),
                      std::string("algorithm.lr = 0.05").size(),
                      "algorithm.lr = 1e30\n");
    write_file(dir / "diverge.cfg", diverging);
    REQUIRE(run_cli("run --config " + (dir / "diverge.cfg").string() + " --out " +
                    (dir / "out").string() + " --quiet") == 3);
}

TEST_CASE("a one-point sweep matches cmd_run", "[cli]") {
    fs::path dir = fresh_dir("sweep_point");
    write_file(dir / "tiny.cfg", kTinyConfig);

    REQUIRE(run_cli("run --config " + (dir / "tiny.cfg").string() + " --out " +
                    (dir / "run_out").string() + " --quiet") == 0);
    REQUIRE(run_cli("sweep --config " + (dir / "tiny.cfg").string() +
                    " --grid 'algorithm.lambda1=1' --out " +
                    (dir / "sweep_out").string() + " --quiet") == 0);

    std::string metrics = slurp(dir / "run_out/metrics.txt");
    auto metric_of = [&](const std::string& key) {
        std::size_t pos = metrics.find(key + " = ");
        REQUIRE(pos != std::string::npos);
        std::size_t start = pos + key.size() + 3;
        return metrics.substr(start, metrics.find('\n', start) - start);
    };

    std::string sweep = slurp(dir / "sweep_out/sweep.csv");
    std::istringstream is(sweep);
    std::string line;
    std::string last;
    while (std::getline(is, line)) {
        if (!line.empty() && line[0] != '#') last = line;
    }
    REQUIRE(last == "1," + metric_of("amse") + "," + metric_of("bwt") + "," +
                        metric_of("fwt"));
}

TEST_CASE("a 3x3x3 lambda grid yields 27 sweep rows", "[cli]") {
    fs::path dir = fresh_dir("sweep_grid");
    write_file(dir / "tiny.cfg", kTinyConfig);
    REQUIRE(run_cli("sweep --config " + (dir / "tiny.cfg").string() +
                    " --grid 'algorithm.lambda1=0,5e-2,5e-1;"
                    "algorithm.lambda2=0,5e-2,5e-1;algorithm.lambda3=0,5e-2,5e-1'"
                    " --out " +
                    (dir / "out").string() + " --jobs 2 --quiet") == 0);
    std::string sweep = slurp(dir / "out/sweep.csv");
    std::size_t rows = 0;
    bool header_seen = false;
    std::istringstream is(sweep);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        if (!header_seen) {
            REQUIRE(line ==
                    "algorithm.lambda1,algorithm.lambda2,algorithm.lambda3,amse,bwt,fwt");
            header_seen = true;
        } else {
            ++rows;
        }
    }
    REQUIRE(rows == 27);
}

TEST_CASE("a train-fraction axis sweeps the ablation points", "[cli]") {
    fs::path dir = fresh_dir("sweep_fraction");
    write_file(dir / "tiny.cfg", kTinyConfig);
    REQUIRE(run_cli("sweep --config " + (dir / "tiny.cfg").string() +
                    " --grid 'train_fraction=0.2,0.4,0.6,0.8,1.0' --out " +
                    (dir / "out").string() + " --quiet") == 0);
    std::string sweep = slurp(dir / "out/sweep.csv");
    REQUIRE(sweep.find("train_fraction,amse,bwt,fwt") != std::string::npos);
    std::size_t rows = 0;
    std::istringstream is(sweep);
    std::string line;
    while (std::getline(is, line)) {
        if (!line.empty() && line[0] != '#' && line.find("train_fraction") != 0) ++rows;
    }
    REQUIRE(rows == 5);
}

TEST_CASE("sweeps reject unknown grid parameters", "[cli]") {
    fs::path dir = fresh_dir("sweep_bad");
    write_file(dir / "tiny.cfg", kTinyConfig);
    REQUIRE(run_cli("sweep --config " + (dir / "tiny.cfg").string() +
                    " --grid 'algorithm.lambdaX=1,2' --out " +
                    (dir / "out").string() + " --quiet") == 2);
}

TEST_CASE("run consumes generated data files", "[cli]") {
    fs::path dir = fresh_dir("external");
    write_file(dir / "gen.cfg",
               "seed = 4\n"
               "scenario.clients = 2\n"
               "scenario.tasks = 2\n"
               "scenario.size_table = 40,40 / 40,40\n"
               "scenario.feature_dim = 3\n");
    REQUIRE(run_cli("generate --config " + (dir / "gen.cfg").string() + " --out " +
                    (dir / "data.fcl").string() + " --quiet") == 0);

    std::string run_cfg = std::string(kTinyConfig) + "data.path = " +
                          (dir / "data.fcl").string() + "\n";
    write_file(dir / "ext.cfg", run_cfg);
    REQUIRE(run_cli("run --config " + (dir / "ext.cfg").string() + " --seed 4 --out " +
                    (dir / "ext_out").string() + " --quiet") == 0);

    // same seed, synthetic in-memory vs via the data file: identical reports
    write_file(dir / "syn.cfg",
               std::string(kTinyConfig));
    REQUIRE(run_cli("run --config " + (dir / "syn.cfg").string() + " --seed 4 --out " +
                    (dir / "syn_out").string() + " --quiet") == 0);
    REQUIRE(slurp(dir / "ext_out/pmatrix.csv") == slurp(dir / "syn_out/pmatrix.csv"));
    REQUIRE(slurp(dir / "ext_out/trainlog.csv") == slurp(dir / "syn_out/trainlog.csv"));
}
