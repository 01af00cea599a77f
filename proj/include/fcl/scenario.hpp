#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fcl/rng.hpp"
#include "fcl/types.hpp"

namespace fcl {

struct SplitRatios {
    double train = 0.70;
    double validation = 0.15;
    double test = 0.15;

    void validate() const {
        if (train < 0.0 || validation < 0.0 || test < 0.0 ||
            std::abs(train + validation + test - 1.0) > 1e-12) {
            throw ConfigError("split ratios must be >= 0 and sum to 1");
        }
    }
};

// The partition D_c^t: the three splits owned by client c during task t.
struct ClientTaskDataset {
    int client_id = 0;
    int task_id = 0;
    LabeledSet train;
    LabeledSet validation;
    LabeledSet test;
};

struct ScenarioConfig {
    int clients = 3;
    int tasks = 4;
    std::vector<std::vector<int>> size_table;  // clients x tasks, pre-split totals
    int feature_dim = 16;
    double heterogeneity = 0.5;  // 0 = identical users, 1 = independent users
    double label_noise = 0.05;
    std::uint64_t seed = 0;
    SplitRatios ratios;

    void validate() const {
        if (clients < 1 || tasks < 1) throw ConfigError("scenario: clients and tasks must be >= 1");
        if (feature_dim < 1) throw ConfigError("scenario: feature_dim must be >= 1");
        if (heterogeneity < 0.0 || heterogeneity > 1.0) {
            throw ConfigError("scenario: heterogeneity must be in [0, 1]");
        }
        if (label_noise < 0.0) throw ConfigError("scenario: label_noise must be >= 0");
        if (size_table.size() != static_cast<std::size_t>(clients)) {
            throw ConfigError("scenario: size_table must have one row per client");
        }
        for (const auto& row : size_table) {
            if (row.size() != static_cast<std::size_t>(tasks)) {
                throw ConfigError("scenario: size_table rows must have one entry per task");
            }
            for (int n : row) {
                if (n < 10) throw ConfigError("scenario: size_table entries must be >= 10");
            }
        }
        ratios.validate();
    }
};

// Pre-split totals matching the benchmark's client-task size pattern
// (sums of the 70/15/15 triples, without augmentation).
inline std::vector<std::vector<int>> reference_size_table() {
    return {{159, 1117, 597, 124}, {123, 522, 2500, 616}, {2500, 148, 66, 808}};
}

inline std::vector<std::vector<int>> uniform_size_table(int clients, int tasks, int n) {
    return std::vector<std::vector<int>>(static_cast<std::size_t>(clients),
                                         std::vector<int>(static_cast<std::size_t>(tasks), n));
}

// Pre-split sample lists, one per (client, task) cell; the exact content
// of the line-record data file.
struct RawScenario {
    ScenarioConfig config;
    std::vector<LabeledSet> cells;  // index client * tasks + task

    LabeledSet& cell(int c, int t) { return cells[static_cast<std::size_t>(c) * config.tasks + t]; }
    const LabeledSet& cell(int c, int t) const {
        return cells[static_cast<std::size_t>(c) * config.tasks + t];
    }
};

struct Scenario {
    ScenarioConfig config;
    std::vector<ClientTaskDataset> cells;  // index client * tasks + task

    ClientTaskDataset& cell(int c, int t) {
        return cells[static_cast<std::size_t>(c) * config.tasks + t];
    }
    const ClientTaskDataset& cell(int c, int t) const {
        return cells[static_cast<std::size_t>(c) * config.tasks + t];
    }
};

namespace detail {

// Seeded shuffle, then a contiguous cut. Counts are floor(n * ratio)
// with the remainder assigned to train. No minimum size; external data
// may carry cells far smaller than the synthetic generator allows.
inline std::array<LabeledSet, 3> split_rows(const LabeledSet& samples,
                                            const SplitRatios& ratios,
                                            std::uint64_t seed) {
    ratios.validate();
    std::size_t n = samples.size();
    std::size_t n_train = static_cast<std::size_t>(
        std::floor(static_cast<double>(n) * ratios.train));
    std::size_t n_val = static_cast<std::size_t>(
        std::floor(static_cast<double>(n) * ratios.validation));
    std::size_t n_test = static_cast<std::size_t>(
        std::floor(static_cast<double>(n) * ratios.test));
    n_train += n - (n_train + n_val + n_test);

    std::vector<std::size_t> order = shuffled_indices(n, seed);
    std::array<LabeledSet, 3> out;
    for (auto& s : out) s.feature_dim = samples.feature_dim;
    for (std::size_t i = 0; i < n; ++i) {
        LabeledSet& dst = i < n_train ? out[0] : (i < n_train + n_val ? out[1] : out[2]);
        std::size_t r = order[i];
        dst.push_row(samples.row(r), samples.labels[r]);
    }
    return out;
}

}  // namespace detail

inline std::array<LabeledSet, 3> split_samples(const LabeledSet& samples,
                                               const SplitRatios& ratios,
                                               std::uint64_t seed) {
    if (samples.size() < 10) throw ConfigError("split: need at least 10 samples");
    return detail::split_rows(samples, ratios, seed);
}

namespace detail {

// Latent preference vector for cell (c, t): a sqrt(1-rho)/sqrt(rho) blend
// of one scenario-wide vector and a per-cell independent vector. Entries
// are scaled so w . x has roughly unit variance for x uniform in [-1,1]^d.
inline std::vector<double> cell_weights(const ScenarioConfig& cfg, int c, int t) {
    double scale = std::sqrt(3.0 / static_cast<double>(cfg.feature_dim));
    SplitMix64 shared_rng(derive_seed(cfg.seed, {stream::kSharedWeights}));
    SplitMix64 cell_rng(derive_seed(cfg.seed, {stream::kCellWeights,
                                               static_cast<std::uint64_t>(c),
                                               static_cast<std::uint64_t>(t)}));
    double a = std::sqrt(1.0 - cfg.heterogeneity);
    double b = std::sqrt(cfg.heterogeneity);
    std::vector<double> w(cfg.feature_dim);
    for (int j = 0; j < cfg.feature_dim; ++j) {
        double shared = shared_rng.next_gaussian() * scale;
        double indep = cell_rng.next_gaussian() * scale;
        w[j] = a * shared + b * indep;
    }
    return w;
}

inline double clamp01(double x) { return x < 0.0 ? 0.0 : (x > 1.0 ? 1.0 : x); }

}  // namespace detail

// Synthetic non-iid generator emulating per-user preference variation:
// labels = clamp01(0.5 + 0.5 * tanh(w . x) + gaussian noise).
inline RawScenario generate_raw(const ScenarioConfig& cfg) {
    cfg.validate();
    RawScenario raw;
    raw.config = cfg;
    raw.cells.resize(static_cast<std::size_t>(cfg.clients) * cfg.tasks);
    for (int c = 0; c < cfg.clients; ++c) {
        for (int t = 0; t < cfg.tasks; ++t) {
            std::vector<double> w = detail::cell_weights(cfg, c, t);
            SplitMix64 rng(derive_seed(cfg.seed, {stream::kCellSamples,
                                                  static_cast<std::uint64_t>(c),
                                                  static_cast<std::uint64_t>(t)}));
            LabeledSet& cell = raw.cell(c, t);
            cell.feature_dim = cfg.feature_dim;
            int n = cfg.size_table[c][t];
            cell.features.reserve(static_cast<std::size_t>(n) * cfg.feature_dim);
            cell.labels.reserve(n);
            std::vector<double> x(cfg.feature_dim);
            for (int i = 0; i < n; ++i) {
                double dot = 0.0;
                for (int j = 0; j < cfg.feature_dim; ++j) {
                    x[j] = rng.next_uniform(-1.0, 1.0);
                    dot += w[j] * x[j];
                }
                double noise = rng.next_gaussian() * cfg.label_noise;
                double y = detail::clamp01(0.5 + 0.5 * std::tanh(dot) + noise);
                cell.push_row(x.data(), y);
            }
        }
    }
    return raw;
}

inline Scenario apply_splits(const RawScenario& raw) {
    Scenario scenario;
    scenario.config = raw.config;
    scenario.cells.resize(raw.cells.size());
    for (int c = 0; c < raw.config.clients; ++c) {
        for (int t = 0; t < raw.config.tasks; ++t) {
            std::uint64_t split_seed =
                derive_seed(raw.config.seed, {stream::kSplit,
                                              static_cast<std::uint64_t>(c),
                                              static_cast<std::uint64_t>(t)});
            auto parts = detail::split_rows(raw.cell(c, t), raw.config.ratios, split_seed);
            ClientTaskDataset& cell = scenario.cell(c, t);
            cell.client_id = c;
            cell.task_id = t;
            cell.train = std::move(parts[0]);
            cell.validation = std::move(parts[1]);
            cell.test = std::move(parts[2]);
        }
    }
    return scenario;
}

inline Scenario generate_synthetic(const ScenarioConfig& cfg) {
    return apply_splits(generate_raw(cfg));
}

// Truncates each cell's train split to ceil(f * n) samples by seeded
// subsampling; prefixes nest across fractions under the same seed.
// Validation and test splits are untouched.
inline Scenario scale_train_fraction(const Scenario& scenario, double f) {
    if (!(f > 0.0 && f <= 1.0)) {
        throw ConfigError("train fraction must be in (0, 1]");
    }
    if (f == 1.0) return scenario;
    Scenario out = scenario;
    const ScenarioConfig& cfg = scenario.config;
    for (int c = 0; c < cfg.clients; ++c) {
        for (int t = 0; t < cfg.tasks; ++t) {
            const LabeledSet& full = scenario.cell(c, t).train;
            std::size_t keep = static_cast<std::size_t>(
                std::ceil(f * static_cast<double>(full.size())));
            std::vector<std::size_t> perm = shuffled_indices(
                full.size(), derive_seed(cfg.seed, {stream::kFraction,
                                                    static_cast<std::uint64_t>(c),
                                                    static_cast<std::uint64_t>(t)}));
            LabeledSet reduced;
            reduced.feature_dim = full.feature_dim;
            for (std::size_t i = 0; i < keep; ++i) {
                reduced.push_row(full.row(perm[i]), full.labels[perm[i]]);
            }
            out.cell(c, t).train = std::move(reduced);
        }
    }
    return out;
}

// Generic duplicate-with-noise augmentation of the train splits; each
// train sample gains one copy with gaussian feature jitter. Off by default.
inline Scenario augment_duplicate_noise(const Scenario& scenario, double noise_sigma) {
    Scenario out = scenario;
    const ScenarioConfig& cfg = scenario.config;
    for (int c = 0; c < cfg.clients; ++c) {
        for (int t = 0; t < cfg.tasks; ++t) {
            LabeledSet& train = out.cell(c, t).train;
            SplitMix64 rng(derive_seed(cfg.seed, {stream::kAugment,
                                                  static_cast<std::uint64_t>(c),
                                                  static_cast<std::uint64_t>(t)}));
            std::size_t n = train.size();
            std::vector<double> x(train.feature_dim);
            for (std::size_t i = 0; i < n; ++i) {
                const double* src = train.row(i);
                for (std::size_t j = 0; j < train.feature_dim; ++j) {
                    x[j] = src[j] + rng.next_gaussian() * noise_sigma;
                }
                train.push_row(x.data(), train.labels[i]);
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Line-record data format: header "#fcl-v1,d=<int>", then one sample per
// line as client_id,task_id,label,f1,...,fd in plain decimal text.

namespace detail {

inline std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace detail

inline void write_records(const RawScenario& raw, std::ostream& os) {
    os << "#fcl-v1,d=" << raw.config.feature_dim << "\n";
    for (int c = 0; c < raw.config.clients; ++c) {
        for (int t = 0; t < raw.config.tasks; ++t) {
            const LabeledSet& cell = raw.cell(c, t);
            for (std::size_t i = 0; i < cell.size(); ++i) {
                os << c << ',' << t << ',' << detail::format_double(cell.labels[i]);
                const double* x = cell.row(i);
                for (std::size_t j = 0; j < cell.feature_dim; ++j) {
                    os << ',' << detail::format_double(x[j]);
                }
                os << '\n';
            }
        }
    }
}

inline void write_records_file(const RawScenario& raw, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ConfigError("cannot open output file: " + path);
    write_records(raw, os);
    if (!os) throw ConfigError("write failed: " + path);
}

// Bounds and split policy applied to an external data file. Records carry
// their own (client, task) assignment; the manifest declares which ids
// are valid and how to split each cell.
struct ExternalManifest {
    int clients = 0;
    int tasks = 0;
    SplitRatios ratios;
    std::uint64_t seed = 0;
};

namespace detail {

inline double parse_double_field(const std::string& field, std::size_t line_no,
                                 const char* what) {
    std::size_t pos = 0;
    double v = 0.0;
    try {
        v = std::stod(field, &pos);
    } catch (const std::exception&) {
        throw ConfigError("line " + std::to_string(line_no) + ": malformed " +
                          what + " '" + field + "'");
    }
    if (pos != field.size()) {
        throw ConfigError("line " + std::to_string(line_no) + ": malformed " +
                          what + " '" + field + "'");
    }
    return v;
}

inline int parse_int_field(const std::string& field, std::size_t line_no,
                           const char* what) {
    std::size_t pos = 0;
    int v = 0;
    try {
        v = std::stoi(field, &pos);
    } catch (const std::exception&) {
        throw ConfigError("line " + std::to_string(line_no) + ": malformed " +
                          what + " '" + field + "'");
    }
    if (pos != field.size()) {
        throw ConfigError("line " + std::to_string(line_no) + ": malformed " +
                          what + " '" + field + "'");
    }
    return v;
}

}  // namespace detail

inline RawScenario read_records(std::istream& is, const ExternalManifest& manifest) {
    if (manifest.clients < 1 || manifest.tasks < 1) {
        throw ConfigError("manifest: clients and tasks must be >= 1");
    }
    manifest.ratios.validate();

    std::string line;
    if (!std::getline(is, line)) throw ConfigError("data file is empty");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    int d = 0;
    if (std::sscanf(line.c_str(), "#fcl-v1,d=%d", &d) != 1 || d < 1) {
        throw ConfigError("line 1: expected header '#fcl-v1,d=<int>'");
    }

    RawScenario raw;
    raw.config.clients = manifest.clients;
    raw.config.tasks = manifest.tasks;
    raw.config.feature_dim = d;
    raw.config.heterogeneity = 0.0;
    raw.config.label_noise = 0.0;
    raw.config.seed = manifest.seed;
    raw.config.ratios = manifest.ratios;
    raw.cells.resize(static_cast<std::size_t>(manifest.clients) * manifest.tasks);
    for (auto& cell : raw.cells) cell.feature_dim = d;

    std::size_t line_no = 1;
    std::size_t records = 0;
    std::vector<double> x(d);
    while (std::getline(is, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;

        std::vector<std::string> fields;
        std::stringstream ss(line);
        std::string field;
        while (std::getline(ss, field, ',')) fields.push_back(field);
        if (!line.empty() && line.back() == ',') fields.push_back("");
        if (fields.size() != static_cast<std::size_t>(3 + d)) {
            throw ConfigError("line " + std::to_string(line_no) + ": expected " +
                              std::to_string(3 + d) + " fields, got " +
                              std::to_string(fields.size()));
        }
        int c = detail::parse_int_field(fields[0], line_no, "client id");
        int t = detail::parse_int_field(fields[1], line_no, "task id");
        if (c < 0 || c >= manifest.clients) {
            throw ConfigError("line " + std::to_string(line_no) +
                              ": unknown client id " + std::to_string(c));
        }
        if (t < 0 || t >= manifest.tasks) {
            throw ConfigError("line " + std::to_string(line_no) +
                              ": unknown task id " + std::to_string(t));
        }
        double y = detail::parse_double_field(fields[2], line_no, "label");
        if (!(y >= 0.0 && y <= 1.0)) {
            throw ConfigError("line " + std::to_string(line_no) +
                              ": label outside [0, 1]");
        }
        for (int j = 0; j < d; ++j) {
            x[j] = detail::parse_double_field(fields[3 + j], line_no, "feature");
        }
        raw.cell(c, t).push_row(x.data(), y);
        ++records;
    }
    if (records == 0) throw ConfigError("data file has no records");

    raw.config.size_table.assign(manifest.clients, std::vector<int>(manifest.tasks, 0));
    for (int c = 0; c < manifest.clients; ++c) {
        for (int t = 0; t < manifest.tasks; ++t) {
            raw.config.size_table[c][t] = static_cast<int>(raw.cell(c, t).size());
        }
    }
    return raw;
}

inline Scenario load_external(const std::string& path, const ExternalManifest& manifest) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ConfigError("cannot open data file: " + path);
    return apply_splits(read_records(is, manifest));
}

}  // namespace fcl
