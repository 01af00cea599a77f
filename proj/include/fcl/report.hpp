#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "fcl/config.hpp"
#include "fcl/engine.hpp"
#include "fcl/metrics.hpp"

namespace fcl {

// Flat key-value metrics summary. The resolved config is embedded under
// the config. prefix so every report is self-describing.
inline void write_metrics(const ExperimentResult& result,
                          const ExperimentConfig& config, std::ostream& os) {
    using detail::format_real;
    os << "amse = " << format_real(amse(result.matrix)) << '\n';
    if (result.matrix.tasks >= 2) {
        os << "bwt = " << format_real(bwt(result.matrix)) << '\n';
        os << "fwt = " << format_real(fwt(result.matrix)) << '\n';
    }
    os << "static_params = " << result.params.static_count << '\n';
    os << "trainable_params = " << result.params.trainable_count << '\n';
    os << "messages_p2p = " << result.messages.p2p << '\n';
    os << "messages_star = " << result.messages.star << '\n';
    os << "payload_reals_p2p = " << result.messages.payload_reals_p2p << '\n';
    os << "payload_reals_star = " << result.messages.payload_reals_star << '\n';
    os << "audit_accesses = " << result.audit.records.size() << '\n';
    os << "audit_violations = " << result.audit.violations << '\n';
    os << "offdiagonal_comparable = " << (result.offdiagonal_comparable ? "true" : "false")
       << '\n';
    std::istringstream cfg(config.serialize());
    std::string line;
    while (std::getline(cfg, line)) {
        os << "config." << line << '\n';
    }
}

// Writes pmatrix.csv, metrics.txt and trainlog.csv into dir.
inline void write_run_reports(const ExperimentResult& result,
                              const ExperimentConfig& config,
                              const std::string& dir) {
    std::filesystem::create_directories(dir);
    {
        std::ofstream os(dir + "/pmatrix.csv", std::ios::binary);
        if (!os) throw ConfigError("cannot write " + dir + "/pmatrix.csv");
        write_pmatrix(result.matrix, os);
    }
    {
        std::ofstream os(dir + "/metrics.txt", std::ios::binary);
        if (!os) throw ConfigError("cannot write " + dir + "/metrics.txt");
        write_metrics(result, config, os);
    }
    {
        std::ofstream os(dir + "/trainlog.csv", std::ios::binary);
        if (!os) throw ConfigError("cannot write " + dir + "/trainlog.csv");
        result.log.write(os);
    }
}

}  // namespace fcl
