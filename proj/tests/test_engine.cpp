#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "fcl/engine.hpp"
#include "fcl/scenario.hpp"

using namespace fcl;

namespace {

Scenario tiny_scenario(int clients, int tasks, int cell_size, std::uint64_t seed,
                       int d = 3) {
    ScenarioConfig cfg;
    cfg.clients = clients;
    cfg.tasks = tasks;
    cfg.size_table = uniform_size_table(clients, tasks, cell_size);
    cfg.feature_dim = d;
    cfg.heterogeneity = 0.5;
    cfg.label_noise = 0.05;
    cfg.seed = seed;
    return generate_synthetic(cfg);
}

ExperimentPlan tiny_plan(AlgorithmFamily family, double l1, double l2, double l3,
                         int clients = 3, int tasks = 2, int rounds = 2,
                         int epochs = 2,
                         DropoutPolicy dropout = DropoutPolicy::kNone,
                         std::uint64_t seed = 99) {
    ExperimentPlan plan;
    plan.scenario = tiny_scenario(clients, tasks, 40, seed);
    plan.model = MlpSpec{{3, 8, 1}, Activation::kRelu};
    plan.algorithm = AlgorithmSpec{family, l1, l2, l3, 0.05, 16};
    plan.schedule = RoundSchedule{rounds, epochs, dropout};
    plan.seed = seed;
    return plan;
}

bool same_log(const TrainLog& a, const TrainLog& b) {
    if (a.rows.size() != b.rows.size()) return false;
    for (std::size_t i = 0; i < a.rows.size(); ++i) {
        const TrainLogRow& x = a.rows[i];
        const TrainLogRow& y = b.rows[i];
        if (x.task != y.task || x.round != y.round || x.client != y.client ||
            x.train_loss != y.train_loss || x.penalty != y.penalty) {
            return false;
        }
    }
    return true;
}

}  // namespace

TEST_CASE("select_clients honors the dropout policy", "[engine]") {
    REQUIRE(select_clients(3, DropoutPolicy::kNone, 1) == std::vector<int>{0, 1, 2});

    auto subset = select_clients(3, DropoutPolicy::kDropOneUniform, 5);
    REQUIRE(subset.size() == 2);
    REQUIRE(subset == select_clients(3, DropoutPolicy::kDropOneUniform, 5));

    REQUIRE_THROWS_AS(select_clients(0, DropoutPolicy::kNone, 1), std::invalid_argument);
}

TEST_CASE("dropout picks each client uniformly", "[engine]") {
    int dropped[3] = {0, 0, 0};
    for (std::uint64_t r = 0; r < 3000; ++r) {
        auto subset = select_clients(3, DropoutPolicy::kDropOneUniform,
                                     derive_seed(42, {stream::kDropout, 0, r}));
        int present[3] = {0, 0, 0};
        for (int c : subset) present[c] = 1;
        for (int c = 0; c < 3; ++c) {
            if (!present[c]) ++dropped[c];
        }
    }
    for (int c = 0; c < 3; ++c) {
        REQUIRE(dropped[c] >= 900);
        REQUIRE(dropped[c] <= 1100);
    }
}

TEST_CASE("aggregate is an order-independent uniform mean", "[engine]") {
    ParameterVector single = aggregate({{2, {1.5, -2.0}}});
    REQUIRE(single == ParameterVector{1.5, -2.0});

    ParameterVector mean = aggregate({{0, {1.0, 3.0}}, {1, {3.0, 5.0}}});
    REQUIRE(mean == ParameterVector{2.0, 4.0});

    ParameterVector forward = aggregate({{0, {0.1, 0.7}}, {1, {0.3, -0.2}}, {2, {0.9, 0.4}}});
    ParameterVector shuffled = aggregate({{2, {0.9, 0.4}}, {0, {0.1, 0.7}}, {1, {0.3, -0.2}}});
    REQUIRE(forward == shuffled);

    REQUIRE_THROWS_AS(aggregate({}), std::invalid_argument);
}

TEST_CASE("weighted aggregation follows the size weights", "[engine]") {
    ParameterVector mean = aggregate_weighted({{0, {1.0}}, {1, {5.0}}},
                                              {{0, 1.0}, {1, 3.0}});
    REQUIRE(mean == ParameterVector{4.0});  // (1*1 + 3*5) / 4
}

TEST_CASE("local_sgd with zero learning rate returns the start point", "[engine]") {
    MlpSpec spec{{2, 4, 1}, Activation::kRelu};
    ParameterVector start = init_model(spec, 3);
    LabeledSet data;
    data.feature_dim = 2;
    std::vector<double> x{0.5, -0.5};
    data.push_row(x.data(), 0.3);
    x = {0.1, 0.9};
    data.push_row(x.data(), 0.8);
    MlpWorkspace ws;
    ws.resize(spec);
    std::vector<std::uint64_t> seeds{1, 2, 3};
    REQUIRE(local_sgd(spec, data, PenaltySet{}, start, 0.0, 16, seeds, ws) == start);
}

TEST_CASE("local_sgd reproduces the hand single-step update", "[engine]") {
    MlpSpec linear{{1, 1}, Activation::kRelu};
    ParameterVector start{0.0, 0.0};
    LabeledSet data;
    data.feature_dim = 1;
    double x = 1.0;
    data.push_row(&x, 1.0);
    MlpWorkspace ws;
    ws.resize(linear);
    std::vector<std::uint64_t> seeds{7};
    ParameterVector theta = local_sgd(linear, data, PenaltySet{}, start, 0.1, 1, seeds, ws);
    REQUIRE(theta == ParameterVector{0.2, 0.2});  // grad (-2, -2), lr 0.1
}

TEST_CASE("elastic transfer with zero weights matches fedavg bitwise", "[engine]") {
    auto et = run_experiment(tiny_plan(AlgorithmFamily::kElasticTransfer, 0, 0, 0));
    auto fedavg = run_experiment(tiny_plan(AlgorithmFamily::kFedAvgSgd, 0, 0, 0));
    REQUIRE(et.matrix.values == fedavg.matrix.values);
    REQUIRE(same_log(et.log, fedavg.log));
}

TEST_CASE("fedprox with zero mu matches fedavg bitwise", "[engine]") {
    auto prox = run_experiment(tiny_plan(AlgorithmFamily::kFedProxSgd, 0, 0, 0));
    auto fedavg = run_experiment(tiny_plan(AlgorithmFamily::kFedAvgSgd, 0, 0, 0));
    REQUIRE(prox.matrix.values == fedavg.matrix.values);
    REQUIRE(same_log(prox.log, fedavg.log));
}

TEST_CASE("local ewc with zero lambda matches local sgd bitwise", "[engine]") {
    auto ewc = run_experiment(tiny_plan(AlgorithmFamily::kLocalEwc, 0, 0, 0));
    auto sgd = run_experiment(tiny_plan(AlgorithmFamily::kLocalSgd, 0, 0, 0));
    REQUIRE(ewc.matrix.values == sgd.matrix.values);
    REQUIRE(same_log(ewc.log, sgd.log));
}

TEST_CASE("a single federated client degenerates to local training", "[engine]") {
    auto fed = run_experiment(tiny_plan(AlgorithmFamily::kFedAvgSgd, 0, 0, 0, 1));
    auto local = run_experiment(tiny_plan(AlgorithmFamily::kLocalSgd, 0, 0, 0, 1));
    REQUIRE(fed.matrix.values == local.matrix.values);
    REQUIRE(same_log(fed.log, local.log));
}

TEST_CASE("runs are bit-reproducible", "[engine]") {
    auto a = run_experiment(tiny_plan(AlgorithmFamily::kElasticTransfer, 0.2, 0.3, 0.1,
                                      3, 2, 2, 1, DropoutPolicy::kDropOneUniform));
    auto b = run_experiment(tiny_plan(AlgorithmFamily::kElasticTransfer, 0.2, 0.3, 0.1,
                                      3, 2, 2, 1, DropoutPolicy::kDropOneUniform));
    REQUIRE(a.matrix.values == b.matrix.values);
    REQUIRE(same_log(a.log, b.log));
    REQUIRE(a.messages.p2p == b.messages.p2p);
}

TEST_CASE("consolidation folds the task fisher into the running sum", "[engine]") {
    ExperimentPlan plan = tiny_plan(AlgorithmFamily::kLocalOnlineEwc, 0.4, 0, 0, 2, 3);
    Scenario scenario = plan.scenario;  // keep an unconsumed copy
    FederationSim sim(plan);

    sim.begin_task(0);
    for (int r = 0; r < plan.schedule.rounds_per_task; ++r) sim.run_round(0, r);
    ParameterVector model_after_t0 = sim.client(0).current_model;
    FisherDiagonal f1 = fisher_diagonal(plan.model, model_after_t0,
                                        scenario.cell(0, 0).train);

    sim.begin_task(1);
    REQUIRE(sim.client(0).online_fisher == f1);  // empty running sum before task 1
    REQUIRE(sim.client(0).recentered_map == model_after_t0);
    REQUIRE(sim.client(0).has_refined);
    REQUIRE(sim.vault().raw_destroyed(0, 0));

    for (int r = 0; r < plan.schedule.rounds_per_task; ++r) sim.run_round(1, r);
    ParameterVector model_after_t1 = sim.client(0).current_model;
    FisherDiagonal f2 = fisher_diagonal(plan.model, model_after_t1,
                                        scenario.cell(0, 1).train);

    sim.begin_task(2);
    FisherDiagonal expected = f1;
    for (std::size_t k = 0; k < expected.size(); ++k) expected[k] += f2[k];
    REQUIRE(sim.client(0).online_fisher == expected);

    // elementwise non-decreasing across boundaries
    for (std::size_t k = 0; k < f1.size(); ++k) {
        REQUIRE(sim.client(0).online_fisher[k] >= f1[k]);
    }
}

TEST_CASE("classic ewc keeps one anchor pair per completed task", "[engine]") {
    ExperimentPlan plan = tiny_plan(AlgorithmFamily::kLocalEwc, 0.4, 0, 0, 2, 3);
    FederationSim sim(plan);
    sim.begin_task(0);
    sim.run_round(0, 0);
    sim.begin_task(1);
    REQUIRE(sim.client(0).refined_history.size() == 1);
    sim.run_round(1, 0);
    sim.begin_task(2);
    REQUIRE(sim.client(0).refined_history.size() == 2);
    REQUIRE(sim.client(1).refined_history.size() == 2);
}

TEST_CASE("refined broadcast fills every peer inbox bit-exactly", "[engine]") {
    ExperimentPlan plan = tiny_plan(AlgorithmFamily::kElasticTransfer, 0.1, 0.2, 0.3);
    EventTrace trace;
    FederationSim sim(plan, &trace);
    sim.begin_task(0);
    for (auto& e : trace.events) {
        REQUIRE(e.kind != EventKind::kRefinedSend);  // guard: only for t > 1
    }
    sim.run_round(0, 0);
    sim.begin_task(1);

    for (int receiver = 0; receiver < 3; ++receiver) {
        int entries = 0;
        for (int peer = 0; peer < 3; ++peer) {
            if (peer == receiver) continue;
            REQUIRE(sim.client(receiver).refined_inbox[peer].has_value());
            const EstimatePair& got = *sim.client(receiver).refined_inbox[peer];
            REQUIRE(got.theta == sim.client(peer).recentered_map);
            REQUIRE(got.fisher == sim.client(peer).online_fisher);
            ++entries;
        }
        REQUIRE(entries == 2);
        REQUIRE_FALSE(sim.client(receiver).refined_inbox[receiver].has_value());
    }
}

TEST_CASE("rough broadcasts replace senders and retain dropped peers", "[engine]") {
    ExperimentPlan plan = tiny_plan(AlgorithmFamily::kElasticTransfer, 0, 0, 0.5);
    FederationSim sim(plan);
    std::size_t p = plan.model.param_count();
    EstimatePair round0{ParameterVector(p, 1.0), FisherDiagonal(p, 0.5)};
    EstimatePair round1{ParameterVector(p, 2.0), FisherDiagonal(p, 0.25)};

    sim.broadcast_rough({0, 1, 2}, {{0, round0}, {1, round0}, {2, round0}}, 0, 0);
    for (int receiver = 0; receiver < 3; ++receiver) {
        for (int peer = 0; peer < 3; ++peer) {
            if (peer == receiver) continue;
            REQUIRE(sim.client(receiver).rough_inbox[peer]->origin_round == 0);
        }
    }

    // client 1 drops in round 1: peers keep its round-0 estimate
    sim.broadcast_rough({0, 2}, {{0, round1}, {2, round1}}, 0, 1);
    REQUIRE(sim.client(0).rough_inbox[1]->origin_round == 0);
    REQUIRE(sim.client(0).rough_inbox[2]->origin_round == 1);
    REQUIRE(sim.client(2).rough_inbox[0]->origin_round == 1);
    REQUIRE(sim.client(2).rough_inbox[0]->estimate.theta == round1.theta);
    REQUIRE(sim.client(1).rough_inbox[0]->origin_round == 1);  // mailbox delivery
}

TEST_CASE("first-round penalty sets are empty and cost nothing", "[engine]") {
    ExperimentPlan plan = tiny_plan(AlgorithmFamily::kElasticTransfer, 0.5, 0.5, 0.5);
    FederationSim sim(plan);
    sim.begin_task(0);
    PenaltySet ps = sim.build_penalty_set(0, sim.global_model(), 0, 0);
    REQUIRE(ps.anchors.empty());
    REQUIRE(penalty_value(sim.global_model(), ps) == 0.0);
}

TEST_CASE("train_local rejects consumed tasks through the vault", "[engine]") {
    ExperimentPlan plan = tiny_plan(AlgorithmFamily::kLocalOnlineEwc, 0.4, 0, 0, 2, 2);
    FederationSim sim(plan);
    sim.begin_task(0);
    sim.run_round(0, 0);
    sim.begin_task(1);
    REQUIRE_THROWS_AS(sim.train_local(0, sim.client(0).current_model, 0, 0),
                      std::logic_error);
    REQUIRE(sim.vault().audit().violations == 1);
}

TEST_CASE("clean runs audit zero locality violations", "[engine]") {
    auto result = run_experiment(tiny_plan(AlgorithmFamily::kElasticTransfer,
                                           0.1, 0.1, 0.1, 3, 3, 2, 1,
                                           DropoutPolicy::kDropOneUniform));
    REQUIRE(result.audit.violations == 0);
    REQUIRE_FALSE(result.audit.records.empty());
    for (const AuditRecord& r : result.audit.records) {
        REQUIRE_FALSE(r.violation);
    }
}

TEST_CASE("plans validate before any work happens", "[engine]") {
    ExperimentPlan plan = tiny_plan(AlgorithmFamily::kFedAvgSgd, 0, 0, 0);
    plan.model.layer_sizes.front() = 5;
    REQUIRE_THROWS_AS(run_experiment(plan), ConfigError);

    ExperimentPlan central = tiny_plan(AlgorithmFamily::kCentralized, 0, 0, 0);
    central.schedule.dropout = DropoutPolicy::kDropOneUniform;
    REQUIRE_THROWS_AS(run_experiment(central), ConfigError);

    ExperimentPlan lone = tiny_plan(AlgorithmFamily::kFedAvgSgd, 0, 0, 0, 1);
    lone.schedule.dropout = DropoutPolicy::kDropOneUniform;
    REQUIRE_THROWS_AS(run_experiment(lone), ConfigError);

    ExperimentPlan stray = tiny_plan(AlgorithmFamily::kFedAvgSgd, 0.5, 0, 0);
    REQUIRE_THROWS_AS(run_experiment(stray), ConfigError);
}

TEST_CASE("exploding learning rates raise a divergence error", "[engine]") {
    ExperimentPlan plan = tiny_plan(AlgorithmFamily::kFedAvgSgd, 0, 0, 0, 2, 1, 2, 5);
    plan.algorithm.lr = 1e30;
    REQUIRE_THROWS_AS(run_experiment(plan), DivergenceError);
}

TEST_CASE("message counters follow the documented formulas", "[engine]") {
    // fedavg: R*T rounds, no dropout: p2p = C*(C-1) per round, star = 2C
    auto fedavg = run_experiment(tiny_plan(AlgorithmFamily::kFedAvgSgd, 0, 0, 0));
    std::uint64_t rounds = 2 * 2;
    REQUIRE(fedavg.messages.p2p == rounds * 3 * 2);
    REQUIRE(fedavg.messages.star == rounds * (3 + 3));

    // elastic transfer adds one refined exchange at the single boundary
    auto et = run_experiment(tiny_plan(AlgorithmFamily::kElasticTransfer, 0.1, 0.1, 0.1));
    REQUIRE(et.messages.p2p == rounds * 3 * 2 + 3 * 2);
    REQUIRE(et.messages.star == rounds * (3 + 3) + 2 * 3);

    auto local = run_experiment(tiny_plan(AlgorithmFamily::kLocalEwc, 0.1, 0, 0));
    REQUIRE(local.messages.p2p == 0);
    REQUIRE(local.messages.star == 0);
}

TEST_CASE("train log covers every participating client each round", "[engine]") {
    auto result = run_experiment(tiny_plan(AlgorithmFamily::kFedAvgSgd, 0, 0, 0));
    REQUIRE(result.log.rows.size() == 2 * 2 * 3);  // T * R * C, no dropout
    for (const TrainLogRow& row : result.log.rows) {
        REQUIRE(std::isfinite(row.train_loss));
        REQUIRE(row.penalty == 0.0);
    }
}

TEST_CASE("stl reinitializes per task and flags its off-diagonals", "[engine]") {
    ExperimentPlan plan = tiny_plan(AlgorithmFamily::kStl, 0, 0, 0);
    FederationSim sim(plan);
    sim.begin_task(0);
    ParameterVector task0_init = sim.client(0).current_model;
    sim.begin_task(1);
    REQUIRE(sim.client(0).current_model != task0_init);
    REQUIRE(sim.client(0).current_model !=
            sim.client(1).current_model);  // independent cells

    auto result = run_experiment(plan);
    REQUIRE_FALSE(result.offdiagonal_comparable);

    auto fed = run_experiment(tiny_plan(AlgorithmFamily::kFedAvgSgd, 0, 0, 0));
    REQUIRE(fed.offdiagonal_comparable);
}

TEST_CASE("centralized baseline trains one pooled model", "[engine]") {
    auto result = run_experiment(tiny_plan(AlgorithmFamily::kCentralized, 0, 0, 0,
                                           2, 2, 1, 1));
    REQUIRE(result.matrix.tasks == 2);
    REQUIRE(result.messages.p2p == 0);
    REQUIRE(result.log.rows.size() == 2);  // one pseudo-client, T*R rows
    for (const TrainLogRow& row : result.log.rows) {
        REQUIRE(row.client == 2);  // sentinel id = client count
    }
    REQUIRE(result.audit.violations == 0);
}
