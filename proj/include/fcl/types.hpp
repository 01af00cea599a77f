#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace fcl {

// Flat weight vector of a model; the unit of exchange between clients.
using ParameterVector = std::vector<double>;

// Per-parameter curvature estimate, same length as the ParameterVector,
// entries >= 0.
using FisherDiagonal = std::vector<double>;

// Raised on malformed configuration or input files. CLI exit code 2.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Raised when training produces a non-finite loss or parameter.
// CLI exit code 3.
class DivergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline bool all_finite(const std::vector<double>& v) {
    for (double x : v) {
        if (!std::isfinite(x)) return false;
    }
    return true;
}

inline void check_same_length(const std::vector<double>& a,
                              const std::vector<double>& b,
                              const char* what) {
    if (a.size() != b.size()) {
        throw std::invalid_argument(std::string(what) + ": length mismatch (" +
                                    std::to_string(a.size()) + " vs " +
                                    std::to_string(b.size()) + ")");
    }
}

// Feature/label set; features are row-major n x d, labels in [0, 1].
struct LabeledSet {
    std::size_t feature_dim = 0;
    std::vector<double> features;  // row-major, size() == n * feature_dim
    std::vector<double> labels;

    std::size_t size() const { return labels.size(); }
    bool empty() const { return labels.empty(); }

    const double* row(std::size_t i) const {
        return features.data() + i * feature_dim;
    }

    void push_row(const double* x, double y) {
        features.insert(features.end(), x, x + feature_dim);
        labels.push_back(y);
    }

    void validate(const char* what) const {
        if (features.size() != labels.size() * feature_dim) {
            throw std::invalid_argument(std::string(what) +
                                        ": feature/label row count mismatch");
        }
        for (double y : labels) {
            if (!(y >= 0.0 && y <= 1.0)) {
                throw std::invalid_argument(std::string(what) +
                                            ": label outside [0, 1]");
            }
        }
    }
};

}  // namespace fcl
