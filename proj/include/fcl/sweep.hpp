#pragma once

#include <future>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "fcl/config.hpp"
#include "fcl/engine.hpp"
#include "fcl/metrics.hpp"

namespace fcl {

// Grid specification: "key1=v1,v2,v3; key2=w1,w2". Keys are ordinary
// config keys; values stay strings until they are applied.
struct SweepGrid {
    std::vector<std::pair<std::string, std::vector<std::string>>> axes;

    std::size_t point_count() const {
        std::size_t n = 1;
        for (const auto& [key, values] : axes) n *= values.size();
        return n;
    }
};

inline SweepGrid parse_grid_spec(const std::string& spec,
                                 const ExperimentConfig& base) {
    SweepGrid grid;
    for (const std::string& axis : detail::split(spec, ';')) {
        std::string entry = detail::trim(axis);
        if (entry.empty()) continue;
        std::size_t eq = entry.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("grid: expected 'key=v1,v2,...' in '" + entry + "'");
        }
        std::string key = detail::trim(entry.substr(0, eq));
        std::vector<std::string> values;
        for (const std::string& v : detail::split(entry.substr(eq + 1), ',')) {
            std::string value = detail::trim(v);
            if (value.empty()) throw ConfigError("grid: empty value for '" + key + "'");
            values.push_back(value);
        }
        if (values.empty()) throw ConfigError("grid: no values for '" + key + "'");
        // rejects unknown parameter names before any run starts
        ExperimentConfig probe = base;
        probe.set(key, values.front());
        grid.axes.push_back({key, std::move(values)});
    }
    if (grid.axes.empty()) throw ConfigError("grid: no axes given");
    return grid;
}

struct SweepRow {
    std::vector<std::string> values;  // one per axis, same order
    double amse = 0.0;
    double bwt = 0.0;
    double fwt = 0.0;
};

struct SweepTable {
    std::vector<std::string> keys;
    std::vector<SweepRow> rows;
};

// Cartesian product in axis order: the first axis is the outermost loop,
// so rows come out in lexicographic order of the given value lists.
inline std::vector<std::vector<std::string>> grid_points(const SweepGrid& grid) {
    std::vector<std::vector<std::string>> points{{}};
    for (const auto& [key, values] : grid.axes) {
        std::vector<std::vector<std::string>> next;
        next.reserve(points.size() * values.size());
        for (const auto& prefix : points) {
            for (const std::string& v : values) {
                std::vector<std::string> point = prefix;
                point.push_back(v);
                next.push_back(std::move(point));
            }
        }
        points = std::move(next);
    }
    return points;
}

// Runs every grid point; points execute in parallel but the table rows
// keep the product order. Each point is an isolated deterministic run.
inline SweepTable run_sweep(const ExperimentConfig& base, const SweepGrid& grid,
                            unsigned max_parallel = std::thread::hardware_concurrency()) {
    if (max_parallel == 0) max_parallel = 1;
    SweepTable table;
    for (const auto& [key, values] : grid.axes) table.keys.push_back(key);
    std::vector<std::vector<std::string>> points = grid_points(grid);
    table.rows.resize(points.size());

    auto run_point = [&](std::size_t i) {
        ExperimentConfig cfg = base;
        for (std::size_t a = 0; a < grid.axes.size(); ++a) {
            cfg.set(grid.axes[a].first, points[i][a]);
        }
        cfg.finalize();
        ExperimentResult result = run_experiment(cfg.build_plan());
        SweepRow row;
        row.values = points[i];
        row.amse = amse(result.matrix);
        if (result.matrix.tasks >= 2) {
            row.bwt = bwt(result.matrix);
            row.fwt = fwt(result.matrix);
        }
        table.rows[i] = std::move(row);
    };

    std::size_t next = 0;
    while (next < points.size()) {
        std::size_t batch = std::min<std::size_t>(max_parallel, points.size() - next);
        std::vector<std::future<void>> futures;
        futures.reserve(batch);
        for (std::size_t k = 0; k < batch; ++k) {
            futures.push_back(std::async(std::launch::async, run_point, next + k));
        }
        for (auto& f : futures) f.get();
        next += batch;
    }
    return table;
}

inline void write_sweep_csv(const SweepTable& table, const ExperimentConfig& base,
                            std::ostream& os) {
    std::istringstream cfg(base.serialize());
    std::string line;
    while (std::getline(cfg, line)) {
        os << "# config." << line << '\n';
    }
    for (std::size_t k = 0; k < table.keys.size(); ++k) {
        os << table.keys[k] << ',';
    }
    os << "amse,bwt,fwt\n";
    for (const SweepRow& row : table.rows) {
        for (const std::string& v : row.values) os << v << ',';
        os << detail::format_real(row.amse) << ',' << detail::format_real(row.bwt)
           << ',' << detail::format_real(row.fwt) << '\n';
    }
}

}  // namespace fcl
