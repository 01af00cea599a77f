#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fcl/types.hpp"

namespace fcl {

// T x T grid of test MSE. Row i holds the evaluation taken after
// completing training task i; column j is the evaluated task.
struct PerformanceMatrix {
    std::size_t tasks = 0;
    std::vector<double> values;  // row-major, tasks * tasks

    double at(std::size_t row, std::size_t col) const {
        return values[row * tasks + col];
    }
    double& at(std::size_t row, std::size_t col) { return values[row * tasks + col]; }

    static PerformanceMatrix zeros(std::size_t tasks) {
        return {tasks, std::vector<double>(tasks * tasks, 0.0)};
    }

    void validate() const {
        if (values.size() != tasks * tasks) {
            throw std::invalid_argument("PerformanceMatrix: not square");
        }
        for (double v : values) {
            if (!std::isfinite(v) || v < 0.0) {
                throw std::invalid_argument("PerformanceMatrix: entries must be finite and >= 0");
            }
        }
    }
};

// Mean of the diagonal: test MSE right after each task.
inline double amse(const PerformanceMatrix& p) {
    p.validate();
    double sum = 0.0;
    for (std::size_t i = 0; i < p.tasks; ++i) sum += p.at(i, i);
    return sum / static_cast<double>(p.tasks);
}

// Backward transfer: mean over i > j of P[i][j] - P[j][j]. Under MSE a
// negative value means earlier tasks improved while training later ones.
inline double bwt(const PerformanceMatrix& p) {
    p.validate();
    if (p.tasks < 2) throw std::invalid_argument("bwt: need at least 2 tasks");
    double sum = 0.0;
    for (std::size_t i = 1; i < p.tasks; ++i) {
        for (std::size_t j = 0; j < i; ++j) {
            sum += p.at(i, j) - p.at(j, j);
        }
    }
    double pairs = static_cast<double>(p.tasks * (p.tasks - 1)) / 2.0;
    return sum / pairs;
}

// Forward transfer: mean of the strict upper triangle, the performance
// on tasks not yet trained.
inline double fwt(const PerformanceMatrix& p) {
    p.validate();
    if (p.tasks < 2) throw std::invalid_argument("fwt: need at least 2 tasks");
    double sum = 0.0;
    for (std::size_t i = 0; i < p.tasks; ++i) {
        for (std::size_t j = i + 1; j < p.tasks; ++j) {
            sum += p.at(i, j);
        }
    }
    double pairs = static_cast<double>(p.tasks * (p.tasks - 1)) / 2.0;
    return sum / pairs;
}

enum class AlgorithmFamily {
    kCentralized,
    kStl,
    kLocalSgd,
    kLocalL2T,
    kLocalEwc,
    kLocalOnlineEwc,
    kFedAvgSgd,
    kFedProxSgd,
    kFedCurv,
    kFedAvgEwc,
    kFedProxEwc,
    kElasticTransfer,
};

struct ParamAccount {
    std::size_t static_count = 0;     // stored anchor reals
    std::size_t trainable_count = 0;  // optimized reals (per model instance)
};

// Static/trainable parameter accounting per family, with P the model
// parameter count, C the client count and T the task count.
//
//   classic EWC families:   2*T*P   (theta and Fisher per task)
//   proximal families:      + P    (the aggregate reference)
//   L2-transfer:            T*P    (theta per task, implicit unit Fisher)
//   online EWC:             2*P    (one running pair)
//   elastic transfer:       2*C*P refined + 2*(C-1)*P rough
//
// STL maintains one model per task on each client, so its trainable
// count is T*P; every other family optimizes a single P-sized model.
inline ParamAccount param_account(AlgorithmFamily family, std::size_t model_params,
                                  std::size_t clients, std::size_t tasks) {
    std::size_t p = model_params;
    switch (family) {
        case AlgorithmFamily::kCentralized:
        case AlgorithmFamily::kLocalSgd:
        case AlgorithmFamily::kFedAvgSgd:
            return {0, p};
        case AlgorithmFamily::kStl:
            return {0, tasks * p};
        case AlgorithmFamily::kLocalL2T:
            return {tasks * p, p};
        case AlgorithmFamily::kLocalEwc:
        case AlgorithmFamily::kFedAvgEwc:
            return {2 * tasks * p, p};
        case AlgorithmFamily::kLocalOnlineEwc:
            return {2 * p, p};
        case AlgorithmFamily::kFedProxSgd:
            return {p, p};
        case AlgorithmFamily::kFedProxEwc:
            return {2 * tasks * p + p, p};
        case AlgorithmFamily::kFedCurv:
            return {2 * (clients - 1) * p, p};
        case AlgorithmFamily::kElasticTransfer:
            return {2 * clients * p + 2 * (clients - 1) * p, p};
    }
    throw std::invalid_argument("param_account: unknown family");
}

// ---------------------------------------------------------------------------
// P-matrix exchange format: comma-separated decimal text, one row per
// line, no header.

inline void write_pmatrix(const PerformanceMatrix& p, std::ostream& os) {
    char buf[64];
    for (std::size_t i = 0; i < p.tasks; ++i) {
        for (std::size_t j = 0; j < p.tasks; ++j) {
            std::snprintf(buf, sizeof(buf), "%.17g", p.at(i, j));
            os << (j ? "," : "") << buf;
        }
        os << '\n';
    }
}

inline PerformanceMatrix read_pmatrix(std::istream& is) {
    std::vector<std::vector<double>> rows;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<double> row;
        std::stringstream ss(line);
        std::string field;
        while (std::getline(ss, field, ',')) {
            std::size_t pos = 0;
            double v = 0.0;
            try {
                v = std::stod(field, &pos);
            } catch (const std::exception&) {
                throw ConfigError("pmatrix line " + std::to_string(line_no) +
                                  ": malformed value '" + field + "'");
            }
            if (pos != field.size()) {
                throw ConfigError("pmatrix line " + std::to_string(line_no) +
                                  ": malformed value '" + field + "'");
            }
            row.push_back(v);
        }
        rows.push_back(std::move(row));
    }
    PerformanceMatrix p;
    p.tasks = rows.size();
    for (const auto& row : rows) {
        if (row.size() != p.tasks) {
            throw ConfigError("pmatrix: not square");
        }
        p.values.insert(p.values.end(), row.begin(), row.end());
    }
    p.validate();
    return p;
}

}  // namespace fcl
