#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "fcl/metrics.hpp"
#include "fcl/mlp.hpp"
#include "fcl/penalty.hpp"
#include "fcl/scenario.hpp"

namespace fcl {

enum class DropoutPolicy { kNone, kDropOneUniform };

// What a family does each round and at task boundaries. lambda1 weights
// the client's own consolidated anchors, lambda2 the peers' consolidated
// anchors, lambda3 the current-round anchors (rough or proximal).
struct FamilyTraits {
    bool federated = false;    // aggregate updates into a global model
    bool proximal = false;     // unit-Fisher anchor to the round's global model
    bool rough_peers = false;  // anchors from peers' previous-round broadcasts
    bool peer_refined = false; // anchors from peers' consolidated estimates
    bool per_task_model = false;  // fresh model per task (STL)
    bool pooled = false;          // centralized upper bound, no clients
    enum class Consolidation { kNone, kPerTask, kPerTaskUnitFisher, kOnline };
    Consolidation consolidation = Consolidation::kNone;

    bool uses_lambda1() const { return consolidation != Consolidation::kNone; }
    bool uses_lambda2() const { return peer_refined; }
    bool uses_lambda3() const { return proximal || rough_peers; }
};

inline FamilyTraits traits_of(AlgorithmFamily family) {
    using C = FamilyTraits::Consolidation;
    FamilyTraits t;
    switch (family) {
        case AlgorithmFamily::kCentralized:
            t.pooled = true;
            break;
        case AlgorithmFamily::kStl:
            t.per_task_model = true;
            break;
        case AlgorithmFamily::kLocalSgd:
            break;
        case AlgorithmFamily::kLocalL2T:
            t.consolidation = C::kPerTaskUnitFisher;
            break;
        case AlgorithmFamily::kLocalEwc:
            t.consolidation = C::kPerTask;
            break;
        case AlgorithmFamily::kLocalOnlineEwc:
            t.consolidation = C::kOnline;
            break;
        case AlgorithmFamily::kFedAvgSgd:
            t.federated = true;
            break;
        case AlgorithmFamily::kFedProxSgd:
            t.federated = true;
            t.proximal = true;
            break;
        case AlgorithmFamily::kFedCurv:
            t.federated = true;
            t.rough_peers = true;
            break;
        case AlgorithmFamily::kFedAvgEwc:
            t.federated = true;
            t.consolidation = C::kPerTask;
            break;
        case AlgorithmFamily::kFedProxEwc:
            t.federated = true;
            t.consolidation = C::kPerTask;
            t.proximal = true;
            break;
        case AlgorithmFamily::kElasticTransfer:
            t.federated = true;
            t.rough_peers = true;
            t.peer_refined = true;
            t.consolidation = C::kOnline;
            break;
    }
    return t;
}

inline const char* family_name(AlgorithmFamily family) {
    switch (family) {
        case AlgorithmFamily::kCentralized: return "centralized";
        case AlgorithmFamily::kStl: return "stl";
        case AlgorithmFamily::kLocalSgd: return "local_sgd";
        case AlgorithmFamily::kLocalL2T: return "local_l2t";
        case AlgorithmFamily::kLocalEwc: return "local_ewc";
        case AlgorithmFamily::kLocalOnlineEwc: return "local_online_ewc";
        case AlgorithmFamily::kFedAvgSgd: return "fedavg_sgd";
        case AlgorithmFamily::kFedProxSgd: return "fedprox_sgd";
        case AlgorithmFamily::kFedCurv: return "fedcurv";
        case AlgorithmFamily::kFedAvgEwc: return "fedavg_ewc";
        case AlgorithmFamily::kFedProxEwc: return "fedprox_ewc";
        case AlgorithmFamily::kElasticTransfer: return "elastic_transfer";
    }
    return "unknown";
}

struct AlgorithmSpec {
    AlgorithmFamily family = AlgorithmFamily::kFedAvgSgd;
    double lambda1 = 0.0;
    double lambda2 = 0.0;
    double lambda3 = 0.0;
    double lr = 5e-3;
    int batch_size = 32;

    void validate() const {
        if (!(lr > 0.0)) throw ConfigError("algorithm: lr must be > 0");
        if (batch_size < 1) throw ConfigError("algorithm: batch_size must be >= 1");
        if (lambda1 < 0.0 || lambda2 < 0.0 || lambda3 < 0.0) {
            throw ConfigError("algorithm: lambdas must be >= 0");
        }
        FamilyTraits t = traits_of(family);
        if (!t.uses_lambda1() && lambda1 != 0.0) {
            throw ConfigError(std::string("algorithm: lambda1 is not used by ") +
                              family_name(family) + " and must be 0");
        }
        if (!t.uses_lambda2() && lambda2 != 0.0) {
            throw ConfigError(std::string("algorithm: lambda2 is not used by ") +
                              family_name(family) + " and must be 0");
        }
        if (!t.uses_lambda3() && lambda3 != 0.0) {
            throw ConfigError(std::string("algorithm: lambda3 is not used by ") +
                              family_name(family) + " and must be 0");
        }
    }
};

struct RoundSchedule {
    int rounds_per_task = 25;  // R
    int epochs_per_round = 5;  // E
    DropoutPolicy dropout = DropoutPolicy::kNone;

    void validate() const {
        if (rounds_per_task < 1) throw ConfigError("schedule: rounds_per_task must be >= 1");
        if (epochs_per_round < 1) throw ConfigError("schedule: epochs_per_round must be >= 1");
    }
};

// Deterministic in round_seed: drop_one_uniform removes exactly one
// uniformly chosen client, none returns everyone. Ascending ids.
inline std::vector<int> select_clients(int client_count, DropoutPolicy dropout,
                                       std::uint64_t round_seed) {
    if (client_count < 1) throw std::invalid_argument("select_clients: empty client set");
    std::vector<int> selected;
    selected.reserve(client_count);
    int dropped = -1;
    if (dropout == DropoutPolicy::kDropOneUniform) {
        SplitMix64 rng(round_seed);
        dropped = static_cast<int>(rng.next_below(client_count));
    }
    for (int c = 0; c < client_count; ++c) {
        if (c != dropped) selected.push_back(c);
    }
    return selected;
}

// Unweighted elementwise mean over participating clients, summed in
// ascending client-id order regardless of input order.
inline ParameterVector aggregate(std::vector<std::pair<int, ParameterVector>> updates) {
    if (updates.empty()) throw std::invalid_argument("aggregate: empty update set");
    std::sort(updates.begin(), updates.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    ParameterVector mean = updates.front().second;
    for (std::size_t u = 1; u < updates.size(); ++u) {
        check_same_length(mean, updates[u].second, "aggregate");
        for (std::size_t k = 0; k < mean.size(); ++k) mean[k] += updates[u].second[k];
    }
    double inv = 1.0 / static_cast<double>(updates.size());
    for (double& v : mean) v = v * inv;
    return mean;
}

// Dataset-size-weighted variant, off by default (config switch).
inline ParameterVector aggregate_weighted(
    std::vector<std::pair<int, ParameterVector>> updates,
    std::vector<std::pair<int, double>> weights) {
    if (updates.empty()) throw std::invalid_argument("aggregate: empty update set");
    std::sort(updates.begin(), updates.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    std::sort(weights.begin(), weights.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    double total = 0.0;
    for (const auto& [id, w] : weights) total += w;
    if (!(total > 0.0)) throw std::invalid_argument("aggregate: weights must sum > 0");
    ParameterVector mean(updates.front().second.size(), 0.0);
    for (std::size_t u = 0; u < updates.size(); ++u) {
        check_same_length(mean, updates[u].second, "aggregate");
        double w = weights[u].second / total;
        for (std::size_t k = 0; k < mean.size(); ++k) {
            mean[k] += w * updates[u].second[k];
        }
    }
    return mean;
}

// ---------------------------------------------------------------------------
// Observability: train log, event trace, message and audit accounting.

struct TrainLogRow {
    int task = 0;
    int round = 0;
    int client = 0;
    double train_loss = 0.0;
    double penalty = 0.0;
};

struct TrainLog {
    std::vector<TrainLogRow> rows;

    void write(std::ostream& os) const {
        os << "task,round,client,train_loss,penalty\n";
        char buf[64];
        for (const TrainLogRow& r : rows) {
            os << r.task << ',' << r.round << ',' << r.client << ',';
            std::snprintf(buf, sizeof(buf), "%.17g", r.train_loss);
            os << buf << ',';
            std::snprintf(buf, sizeof(buf), "%.17g", r.penalty);
            os << buf << '\n';
        }
    }
};

enum class EventKind {
    kTaskStart,
    kConsolidate,
    kRefinedSend,
    kRoundStart,
    kClientsSelected,
    kLocalTrain,
    kRoughSend,
    kAggregate,
    kRowEvaluated,
};

struct Event {
    EventKind kind;
    int task = -1;
    int round = -1;
    int client = -1;
    int count = 0;
};

// One rough anchor consumed while building a penalty set; origin_* tell
// which round's broadcast it came from (staleness visibility).
struct RoughAnchorUse {
    int task = 0;
    int round = 0;
    int client = 0;
    int peer = 0;
    int origin_task = 0;
    int origin_round = 0;
};

struct EventTrace {
    std::vector<Event> events;
    std::vector<RoughAnchorUse> rough_uses;
};

struct MessageCounts {
    std::uint64_t p2p = 0;
    std::uint64_t star = 0;
    std::uint64_t payload_reals_p2p = 0;
    std::uint64_t payload_reals_star = 0;
};

struct AuditRecord {
    int client = 0;
    int task = 0;      // task owning the accessed raw data
    int at_task = 0;   // protocol position of the access
    int at_round = 0;
    bool violation = false;
};

struct AuditLog {
    std::vector<AuditRecord> records;
    std::uint64_t violations = 0;
};

// Raw-data plane with locality enforcement. Train and validation splits
// are client raw data and die at consolidation; test splits belong to
// the measurement harness and stay available for the P matrix.
class DataVault {
public:
    explicit DataVault(const Scenario& scenario)
        : clients_(scenario.config.clients), tasks_(scenario.config.tasks) {
        cells_.resize(static_cast<std::size_t>(clients_) * tasks_);
        pooled_tests_.resize(tasks_);
        for (int t = 0; t < tasks_; ++t) {
            pooled_tests_[t].feature_dim = scenario.config.feature_dim;
        }
        for (int c = 0; c < clients_; ++c) {
            for (int t = 0; t < tasks_; ++t) {
                const ClientTaskDataset& src = scenario.cell(c, t);
                Cell& cell = cells_[index(c, t)];
                cell.train = src.train;
                cell.validation = src.validation;
                cell.test = src.test;
                LabeledSet& pool = pooled_tests_[t];
                for (std::size_t i = 0; i < src.test.size(); ++i) {
                    pool.push_row(src.test.row(i), src.test.labels[i]);
                }
            }
        }
    }

    const LabeledSet& train(int c, int t, int at_task, int at_round) {
        Cell& cell = cells_[index(c, t)];
        bool violation = cell.destroyed;
        audit_.records.push_back({c, t, at_task, at_round, violation});
        if (violation) {
            ++audit_.violations;
            throw std::logic_error("data locality violation: task " +
                                   std::to_string(t) + " raw data of client " +
                                   std::to_string(c) + " accessed after consolidation");
        }
        return cell.train;
    }

    void destroy_raw(int c, int t) {
        Cell& cell = cells_[index(c, t)];
        cell.train = LabeledSet{};
        cell.validation = LabeledSet{};
        cell.destroyed = true;
    }

    bool raw_destroyed(int c, int t) const { return cells_[index(c, t)].destroyed; }

    // Size metadata is not raw data; used for weighted aggregation.
    std::size_t train_size(int c, int t) const { return cells_[index(c, t)].train.size(); }

    const LabeledSet& pooled_test(int t) const { return pooled_tests_[t]; }
    const LabeledSet& client_test(int c, int t) const { return cells_[index(c, t)].test; }

    const AuditLog& audit() const { return audit_; }

private:
    struct Cell {
        LabeledSet train;
        LabeledSet validation;
        LabeledSet test;  // measurement plane, survives consolidation
        bool destroyed = false;
    };

    std::size_t index(int c, int t) const {
        return static_cast<std::size_t>(c) * tasks_ + t;
    }

    int clients_;
    int tasks_;
    std::vector<Cell> cells_;
    std::vector<LabeledSet> pooled_tests_;
    AuditLog audit_;
};

// Per-client protocol state: current local model, the Online-EWC running
// pair, the classic per-task history, and the two peer inboxes.
struct ClientState {
    int client_id = 0;
    ParameterVector current_model;
    FisherDiagonal online_fisher;    // *F_c, running sum over consolidated tasks
    ParameterVector recentered_map;  // *theta_c at the last consolidation
    bool has_refined = false;
    std::vector<EstimatePair> refined_history;  // one entry per consolidated task

    struct RoughEntry {
        EstimatePair estimate;
        int origin_task = -1;
        int origin_round = -1;
    };
    std::vector<std::optional<EstimatePair>> refined_inbox;  // indexed by peer id
    std::vector<std::optional<RoughEntry>> rough_inbox;      // indexed by peer id
};

// How a P-matrix cell is measured. kPooledTests scores the family's
// serving model(s) on the task's pooled test split; kOwnClientTests
// scores each client's serving model on that client's own test cells
// and averages the per-client matrices.
enum class EvalGranularity { kPooledTests, kOwnClientTests };

struct ExperimentPlan {
    Scenario scenario;
    MlpSpec model;
    AlgorithmSpec algorithm;
    RoundSchedule schedule;
    std::uint64_t seed = 0;
    bool size_weighted_aggregation = false;
    EvalGranularity evaluation = EvalGranularity::kPooledTests;

    void validate() const {
        model.validate();
        algorithm.validate();
        schedule.validate();
        if (model.input_dim() != scenario.config.feature_dim) {
            throw ConfigError("model input dimension does not match scenario feature_dim");
        }
        FamilyTraits t = traits_of(algorithm.family);
        if (t.pooled && schedule.dropout != DropoutPolicy::kNone) {
            throw ConfigError("dropout does not apply to the centralized baseline");
        }
        if (schedule.dropout == DropoutPolicy::kDropOneUniform &&
            scenario.config.clients < 2) {
            throw ConfigError("drop_one_uniform requires at least 2 clients");
        }
        for (int c = 0; c < scenario.config.clients; ++c) {
            for (int tk = 0; tk < scenario.config.tasks; ++tk) {
                if (scenario.cell(c, tk).train.empty()) {
                    throw ConfigError("empty train split in cell (" + std::to_string(c) +
                                      ", " + std::to_string(tk) + ")");
                }
            }
        }
    }
};

struct ExperimentResult {
    PerformanceMatrix matrix;
    TrainLog log;
    MessageCounts messages;
    AuditLog audit;
    ParamAccount params;
    // STL's off-diagonal cells reuse the latest per-task model and are
    // reported but not comparable across families.
    bool offdiagonal_comparable = true;
};

struct TrainOutcome {
    ParameterVector theta;
    FisherDiagonal fisher;
    double train_mse = 0.0;
    double penalty = 0.0;
};

// The local objective loop: epochs of mini-batch SGD on
// mse + penalty_value starting from `theta`, one shuffle seed per epoch,
// last short batch kept. Throws DivergenceError on non-finite parameters.
inline ParameterVector local_sgd(const MlpSpec& model, const LabeledSet& data,
                                 const PenaltySet& penalties, ParameterVector theta,
                                 double lr, int batch_size,
                                 std::span<const std::uint64_t> epoch_seeds,
                                 MlpWorkspace& ws) {
    if (data.empty()) throw std::invalid_argument("local_sgd: empty dataset");
    if (batch_size < 1) throw std::invalid_argument("local_sgd: batch_size must be >= 1");
    ParameterVector grad(theta.size(), 0.0);
    std::size_t n = data.size();
    for (std::uint64_t seed : epoch_seeds) {
        std::vector<std::size_t> order = shuffled_indices(n, seed);
        for (std::size_t off = 0; off < n; off += static_cast<std::size_t>(batch_size)) {
            std::size_t len = std::min<std::size_t>(batch_size, n - off);
            grad_mse_rows(model, theta, data,
                          std::span<const std::size_t>(order.data() + off, len), ws, grad);
            add_penalty_grad(theta, penalties, grad);
            for (std::size_t k = 0; k < theta.size(); ++k) {
                theta[k] = theta[k] - lr * grad[k];
            }
            if (!all_finite(theta)) {
                throw DivergenceError("non-finite parameters during local training");
            }
        }
    }
    return theta;
}

// Simulated client network driving one experiment. All steps are public
// so tests can script boundary and round mechanics directly; run() is
// the full protocol.
class FederationSim {
public:
    explicit FederationSim(const ExperimentPlan& plan, EventTrace* trace = nullptr)
        : plan_(plan),
          traits_(traits_of(plan.algorithm.family)),
          vault_(plan.scenario),
          trace_(trace) {
        plan_.validate();
        clients_count_ = plan_.scenario.config.clients;
        tasks_count_ = plan_.scenario.config.tasks;
        ws_.resize(plan_.model);
        global_model_ = init_model(plan_.model, plan_.seed);
        clients_.resize(clients_count_);
        for (int c = 0; c < clients_count_; ++c) {
            ClientState& cs = clients_[c];
            cs.client_id = c;
            cs.current_model = global_model_;
            cs.online_fisher.assign(plan_.model.param_count(), 0.0);
            cs.refined_inbox.resize(clients_count_);
            cs.rough_inbox.resize(clients_count_);
        }
        if (traits_.pooled) {
            pooled_train_.feature_dim = plan_.scenario.config.feature_dim;
            for (int c = 0; c < clients_count_; ++c) {
                for (int t = 0; t < tasks_count_; ++t) {
                    const LabeledSet& cell = vault_.train(c, t, 0, -1);
                    for (std::size_t i = 0; i < cell.size(); ++i) {
                        pooled_train_.push_row(cell.row(i), cell.labels[i]);
                    }
                }
            }
        }
    }

    const ClientState& client(int c) const { return clients_[c]; }
    const ParameterVector& global_model() const { return global_model_; }
    const DataVault& vault() const { return vault_; }
    const MessageCounts& messages() const { return messages_; }
    const TrainLog& log() const { return log_; }

    std::vector<int> selected_for_round(int task, int round) const {
        return select_clients(clients_count_, plan_.schedule.dropout,
                              derive_seed(plan_.seed, {stream::kDropout,
                                                       static_cast<std::uint64_t>(task),
                                                       static_cast<std::uint64_t>(round)}));
    }

    // Builds the regularizer the family prescribes for client c when a
    // round starts from global_start.
    PenaltySet build_penalty_set(int c, const ParameterVector& global_start,
                                 int task, int round) {
        const ClientState& cs = clients_[c];
        const AlgorithmSpec& a = plan_.algorithm;
        PenaltySet ps;

        if (plan_.algorithm.family == AlgorithmFamily::kElasticTransfer) {
            std::optional<EstimatePair> own;
            if (cs.has_refined) own = EstimatePair{cs.recentered_map, cs.online_fisher};
            std::vector<EstimatePair> peers_refined;
            std::vector<EstimatePair> peers_rough;
            for (int p = 0; p < clients_count_; ++p) {
                if (p == c) continue;
                if (cs.refined_inbox[p]) peers_refined.push_back(*cs.refined_inbox[p]);
            }
            for (int p = 0; p < clients_count_; ++p) {
                if (p == c) continue;
                if (cs.rough_inbox[p]) {
                    peers_rough.push_back(cs.rough_inbox[p]->estimate);
                    note_rough_use(task, round, c, p, *cs.rough_inbox[p]);
                }
            }
            return make_elastic_transfer_anchors(own, peers_refined, peers_rough,
                                                 a.lambda1, a.lambda2, a.lambda3);
        }

        switch (traits_.consolidation) {
            case FamilyTraits::Consolidation::kPerTask:
            case FamilyTraits::Consolidation::kPerTaskUnitFisher: {
                PenaltySet ewc = make_ewc_anchors(cs.refined_history, a.lambda1);
                ps.anchors.insert(ps.anchors.end(), ewc.anchors.begin(), ewc.anchors.end());
                break;
            }
            case FamilyTraits::Consolidation::kOnline: {
                if (cs.has_refined) {
                    PenaltySet online = make_ewc_anchors(
                        {EstimatePair{cs.recentered_map, cs.online_fisher}}, a.lambda1);
                    ps.anchors.insert(ps.anchors.end(), online.anchors.begin(),
                                      online.anchors.end());
                }
                break;
            }
            case FamilyTraits::Consolidation::kNone:
                break;
        }
        if (traits_.rough_peers) {
            std::vector<EstimatePair> rough;
            for (int p = 0; p < clients_count_; ++p) {
                if (p == c) continue;
                if (cs.rough_inbox[p]) {
                    rough.push_back(cs.rough_inbox[p]->estimate);
                    note_rough_use(task, round, c, p, *cs.rough_inbox[p]);
                }
            }
            PenaltySet curv = make_fedcurv_anchors(rough, a.lambda3);
            ps.anchors.insert(ps.anchors.end(), curv.anchors.begin(), curv.anchors.end());
        }
        if (traits_.proximal) {
            PenaltySet prox = make_proximal_anchor(global_start, a.lambda3);
            ps.anchors.insert(ps.anchors.end(), prox.anchors.begin(), prox.anchors.end());
        }
        return ps;
    }

    // E epochs of mini-batch SGD on mse + penalty, starting from `start`.
    // Raw data stays inside the call; returns the update pair and the
    // final-parameter diagnostics.
    TrainOutcome train_local(int c, const ParameterVector& start, int task, int round) {
        const LabeledSet& data = vault_.train(c, task, task, round);
        if (data.empty()) {
            throw ConfigError("train_local: client " + std::to_string(c) +
                              " has no active data for task " + std::to_string(task));
        }
        PenaltySet penalties = build_penalty_set(c, start, task, round);
        return optimize(data, penalties, start, task, round, c);
    }

    // Online-EWC consolidation of the just-finished task: fold the task's
    // Fisher into the running estimate (or append to the classic history),
    // re-center the reference parameters, then destroy the raw data.
    // Federated clients converge to the aggregate each round, so their
    // refined estimate is the task's final global model with a Fisher
    // taken on the client's own data; local clients refine their own
    // parameter chain.
    void consolidate_task(int c, int completed_task) {
        ClientState& cs = clients_[c];
        const ParameterVector& refined =
            traits_.federated ? global_model_ : cs.current_model;
        const LabeledSet& data = vault_.train(c, completed_task, completed_task + 1, -1);
        FisherDiagonal fisher = fisher_diagonal(plan_.model, refined, data);
        switch (traits_.consolidation) {
            case FamilyTraits::Consolidation::kPerTask:
                cs.refined_history.push_back({refined, fisher});
                break;
            case FamilyTraits::Consolidation::kPerTaskUnitFisher:
                cs.refined_history.push_back(
                    {refined, FisherDiagonal(fisher.size(), 1.0)});
                break;
            case FamilyTraits::Consolidation::kOnline:
                for (std::size_t k = 0; k < fisher.size(); ++k) {
                    cs.online_fisher[k] += fisher[k];
                }
                cs.recentered_map = refined;
                cs.has_refined = true;
                break;
            case FamilyTraits::Consolidation::kNone:
                break;
        }
        vault_.destroy_raw(c, completed_task);
        note_event({EventKind::kConsolidate, completed_task + 1, -1, c, 0});
    }

    // Task-boundary exchange of consolidated estimates (t > 1 guard lives
    // in the caller): every client's refined_inbox ends up holding every
    // other client's latest running pair.
    void broadcast_refined(int new_task) {
        for (int s = 0; s < clients_count_; ++s) {
            const ClientState& sender = clients_[s];
            for (int r = 0; r < clients_count_; ++r) {
                if (r == s) continue;
                clients_[r].refined_inbox[s] =
                    EstimatePair{sender.recentered_map, sender.online_fisher};
            }
            note_event({EventKind::kRefinedSend, new_task, -1, s, clients_count_ - 1});
        }
        std::uint64_t p = plan_.model.param_count();
        std::uint64_t c = clients_count_;
        messages_.p2p += c * (c - 1);
        messages_.payload_reals_p2p += c * (c - 1) * 2 * p;
        messages_.star += 2 * c;  // every client uploads once, server relays once
        messages_.payload_reals_star += c * 2 * p + c * (c - 1) * 2 * p;
    }

    // End-of-round exchange of rough estimates: entries from senders are
    // replaced, entries from dropped clients are retained unchanged.
    void broadcast_rough(const std::vector<int>& participants,
                         const std::vector<std::pair<int, EstimatePair>>& rough,
                         int task, int round) {
        for (const auto& [s, estimate] : rough) {
            for (int r = 0; r < clients_count_; ++r) {
                if (r == s) continue;
                clients_[r].rough_inbox[s] = ClientState::RoughEntry{estimate, task, round};
            }
            note_event({EventKind::kRoughSend, task, round, s,
                        clients_count_ - 1});
        }
        (void)participants;
    }

    void begin_task(int task) {
        note_event({EventKind::kTaskStart, task, -1, -1, 0});
        if (task > 0) {
            for (int c = 0; c < clients_count_; ++c) {
                if (traits_.consolidation != FamilyTraits::Consolidation::kNone) {
                    consolidate_task(c, task - 1);
                } else if (!traits_.pooled) {
                    vault_.destroy_raw(c, task - 1);
                }
            }
            if (traits_.peer_refined) {
                broadcast_refined(task);
            }
        }
        if (traits_.per_task_model) {
            for (int c = 0; c < clients_count_; ++c) {
                clients_[c].current_model = init_model(
                    plan_.model, derive_seed(plan_.seed, {stream::kInit,
                                                          static_cast<std::uint64_t>(c),
                                                          static_cast<std::uint64_t>(task)}));
            }
        }
    }

    void run_round(int task, int round) {
        note_event({EventKind::kRoundStart, task, round, -1, 0});
        if (traits_.pooled) {
            TrainOutcome out = optimize(pooled_train_, PenaltySet{}, global_model_,
                                        task, round, clients_count_);
            global_model_ = std::move(out.theta);
            log_.rows.push_back({task, round, clients_count_, out.train_mse, out.penalty});
            return;
        }

        std::vector<int> participants = selected_for_round(task, round);
        note_event({EventKind::kClientsSelected, task, round, -1,
                    static_cast<int>(participants.size())});

        if (traits_.federated) {
            std::vector<std::pair<int, ParameterVector>> updates;
            std::vector<std::pair<int, EstimatePair>> rough;
            updates.reserve(participants.size());
            for (int c : participants) {
                TrainOutcome out = train_local(c, global_model_, task, round);
                note_event({EventKind::kLocalTrain, task, round, c, 0});
                clients_[c].current_model = out.theta;
                log_.rows.push_back({task, round, c, out.train_mse, out.penalty});
                rough.push_back({c, EstimatePair{out.theta, out.fisher}});
                updates.push_back({c, std::move(out.theta)});
            }
            if (traits_.rough_peers) {
                broadcast_rough(participants, rough, task, round);
            }
            count_round_messages(participants.size());
            if (plan_.size_weighted_aggregation) {
                std::vector<std::pair<int, double>> weights;
                for (int c : participants) {
                    weights.push_back({c, static_cast<double>(vault_.train_size(c, task))});
                }
                global_model_ = aggregate_weighted(std::move(updates), std::move(weights));
            } else {
                global_model_ = aggregate(std::move(updates));
            }
            note_event({EventKind::kAggregate, task, round, -1,
                        static_cast<int>(participants.size())});
        } else {
            for (int c : participants) {
                TrainOutcome out = train_local(c, clients_[c].current_model, task, round);
                note_event({EventKind::kLocalTrain, task, round, c, 0});
                clients_[c].current_model = std::move(out.theta);
                log_.rows.push_back({task, round, c, out.train_mse, out.penalty});
            }
        }
    }

    void evaluate_row(int task, PerformanceMatrix& matrix) {
        bool shared_model = traits_.federated || traits_.pooled;
        for (int j = 0; j < tasks_count_; ++j) {
            double value = 0.0;
            if (plan_.evaluation == EvalGranularity::kPooledTests) {
                const LabeledSet& test = vault_.pooled_test(j);
                if (shared_model) {
                    value = eval_mse(global_model_, test);
                } else {
                    double sum = 0.0;
                    for (int c = 0; c < clients_count_; ++c) {
                        sum += eval_mse(clients_[c].current_model, test);
                    }
                    value = sum / static_cast<double>(clients_count_);
                }
            } else {
                double sum = 0.0;
                for (int c = 0; c < clients_count_; ++c) {
                    const ParameterVector& model =
                        shared_model ? global_model_ : clients_[c].current_model;
                    sum += eval_mse(model, vault_.client_test(c, j));
                }
                value = sum / static_cast<double>(clients_count_);
            }
            matrix.at(task, j) = value;
        }
        note_event({EventKind::kRowEvaluated, task, -1, -1, tasks_count_});
    }

    ExperimentResult run() {
        PerformanceMatrix matrix = PerformanceMatrix::zeros(tasks_count_);
        for (int t = 0; t < tasks_count_; ++t) {
            begin_task(t);
            for (int r = 0; r < plan_.schedule.rounds_per_task; ++r) {
                run_round(t, r);
            }
            evaluate_row(t, matrix);
        }
        ExperimentResult result;
        result.matrix = std::move(matrix);
        result.log = std::move(log_);
        result.messages = messages_;
        result.audit = vault_.audit();
        result.params = param_account(plan_.algorithm.family, plan_.model.param_count(),
                                      clients_count_, tasks_count_);
        result.offdiagonal_comparable = !traits_.per_task_model;
        return result;
    }

private:
    void note_event(const Event& e) {
        if (trace_) trace_->events.push_back(e);
    }

    void note_rough_use(int task, int round, int c, int peer,
                        const ClientState::RoughEntry& entry) {
        if (trace_) {
            trace_->rough_uses.push_back(
                {task, round, c, peer, entry.origin_task, entry.origin_round});
        }
    }

    // One update exchange per round. Star: participants upload, the server
    // sends one downlink per client. P2P: participants broadcast directly
    // and everyone aggregates locally.
    void count_round_messages(std::size_t participant_count) {
        std::uint64_t p = plan_.model.param_count();
        std::uint64_t cr = participant_count;
        std::uint64_t c = clients_count_;
        std::uint64_t upload = traits_.rough_peers ? 2 * p : p;
        messages_.p2p += cr * (c - 1);
        messages_.payload_reals_p2p += cr * (c - 1) * upload;
        messages_.star += cr + c;
        messages_.payload_reals_star +=
            cr * upload + c * (p + (traits_.rough_peers ? cr * 2 * p : 0));
    }

    double eval_mse(const ParameterVector& theta, const LabeledSet& test) {
        std::vector<std::size_t> rows(test.size());
        std::iota(rows.begin(), rows.end(), std::size_t{0});
        return mse_loss_rows(plan_.model, theta, test, rows, ws_);
    }

    TrainOutcome optimize(const LabeledSet& data, const PenaltySet& penalties,
                          const ParameterVector& start, int task, int round,
                          int seed_client) {
        const AlgorithmSpec& a = plan_.algorithm;
        std::vector<std::uint64_t> epoch_seeds(plan_.schedule.epochs_per_round);
        for (int e = 0; e < plan_.schedule.epochs_per_round; ++e) {
            epoch_seeds[e] = derive_seed(plan_.seed, {stream::kShuffle,
                                                      static_cast<std::uint64_t>(seed_client),
                                                      static_cast<std::uint64_t>(task),
                                                      static_cast<std::uint64_t>(round),
                                                      static_cast<std::uint64_t>(e)});
        }
        TrainOutcome out;
        try {
            out.theta = local_sgd(plan_.model, data, penalties, start, a.lr,
                                  a.batch_size, epoch_seeds, ws_);
        } catch (const DivergenceError&) {
            throw DivergenceError(divergence_message(task, round, seed_client));
        }
        std::vector<std::size_t> rows(data.size());
        std::iota(rows.begin(), rows.end(), std::size_t{0});
        out.train_mse = mse_loss_rows(plan_.model, out.theta, data, rows, ws_);
        out.penalty = penalty_value(out.theta, penalties);
        if (!std::isfinite(out.train_mse) || !std::isfinite(out.penalty)) {
            throw DivergenceError(divergence_message(task, round, seed_client));
        }
        out.fisher = fisher_diagonal(plan_.model, out.theta, data);
        return out;
    }

    std::string divergence_message(int task, int round, int client) const {
        std::ostringstream os;
        os << "non-finite loss or parameters (family=" << family_name(plan_.algorithm.family)
           << " client=" << client << " task=" << task << " round=" << round
           << "); check lr and lambda settings";
        return os.str();
    }

    ExperimentPlan plan_;
    FamilyTraits traits_;
    DataVault vault_;
    EventTrace* trace_;
    int clients_count_ = 0;
    int tasks_count_ = 0;
    ParameterVector global_model_;
    std::vector<ClientState> clients_;
    LabeledSet pooled_train_;
    MlpWorkspace ws_;
    MessageCounts messages_;
    TrainLog log_;
};

inline ExperimentResult run_experiment(const ExperimentPlan& plan,
                                       EventTrace* trace = nullptr) {
    FederationSim sim(plan, trace);
    return sim.run();
}

}  // namespace fcl
