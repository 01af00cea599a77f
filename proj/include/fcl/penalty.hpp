#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "fcl/types.hpp"

namespace fcl {

enum class AnchorKind {
    kOwnPreviousRefined,    // (*theta_c, *F_c): own consolidated tasks
    kOtherPreviousRefined,  // (*theta_i, *F_i): peers' consolidated tasks
    kOtherCurrentRough,     // (theta_hat_i, F_hat_i): peers' round broadcasts
    kProximal,              // unit-Fisher anchor to the round's global model
};

// One quadratic penalty term (lambda / 2) * sum_k F[k] * (theta[k] - ref[k])^2.
struct Anchor {
    ParameterVector theta_ref;
    FisherDiagonal fisher;
    double lambda = 0.0;
    AnchorKind kind = AnchorKind::kOwnPreviousRefined;

    void validate() const {
        check_same_length(theta_ref, fisher, "Anchor");
        if (lambda < 0.0) throw std::invalid_argument("Anchor: lambda must be >= 0");
    }
};

struct PenaltySet {
    std::vector<Anchor> anchors;

    std::size_t param_count() const {
        return anchors.empty() ? 0 : anchors.front().theta_ref.size();
    }

    void validate() const {
        for (const Anchor& a : anchors) {
            a.validate();
            if (a.theta_ref.size() != param_count()) {
                throw std::invalid_argument("PenaltySet: anchors disagree on parameter length");
            }
        }
    }
};

// Zero-weight anchors are skipped outright: they contribute exactly
// nothing and eliding them keeps reduction identities bit-exact.
inline double penalty_value(const ParameterVector& theta, const PenaltySet& ps) {
    double total = 0.0;
    for (const Anchor& a : ps.anchors) {
        if (a.lambda == 0.0) continue;
        check_same_length(theta, a.theta_ref, "penalty_value");
        double q = 0.0;
        for (std::size_t k = 0; k < theta.size(); ++k) {
            double d = theta[k] - a.theta_ref[k];
            q += a.fisher[k] * d * d;
        }
        total += 0.5 * a.lambda * q;
    }
    return total;
}

// In-place variant used by the training loop.
inline void add_penalty_grad(const ParameterVector& theta, const PenaltySet& ps,
                             ParameterVector& grad) {
    check_same_length(theta, grad, "add_penalty_grad");
    for (const Anchor& a : ps.anchors) {
        if (a.lambda == 0.0) continue;
        check_same_length(theta, a.theta_ref, "penalty_grad");
        for (std::size_t k = 0; k < theta.size(); ++k) {
            grad[k] += a.lambda * a.fisher[k] * (theta[k] - a.theta_ref[k]);
        }
    }
}

inline ParameterVector penalty_grad(const ParameterVector& theta,
                                    const PenaltySet& ps) {
    ParameterVector grad(theta.size(), 0.0);
    add_penalty_grad(theta, ps, grad);
    return grad;
}

// A refined or rough (parameters, Fisher) pair as exchanged between
// clients or kept across task boundaries.
struct EstimatePair {
    ParameterVector theta;
    FisherDiagonal fisher;
};

// Classic EWC: one anchor per completed task. With all-ones Fisher in
// every pair this degrades to the L2-transfer penalty.
inline PenaltySet make_ewc_anchors(const std::vector<EstimatePair>& history,
                                   double lambda) {
    PenaltySet ps;
    ps.anchors.reserve(history.size());
    for (const EstimatePair& h : history) {
        ps.anchors.push_back({h.theta, h.fisher, lambda, AnchorKind::kOwnPreviousRefined});
    }
    ps.validate();
    return ps;
}

// FedCurv: one rough anchor per peer broadcast from the previous round.
inline PenaltySet make_fedcurv_anchors(const std::vector<EstimatePair>& peer_rough,
                                       double lambda) {
    PenaltySet ps;
    ps.anchors.reserve(peer_rough.size());
    for (const EstimatePair& p : peer_rough) {
        ps.anchors.push_back({p.theta, p.fisher, lambda, AnchorKind::kOtherCurrentRough});
    }
    ps.validate();
    return ps;
}

// FedProx: a single unit-Fisher anchor to the round's aggregate model.
inline PenaltySet make_proximal_anchor(const ParameterVector& global_model,
                                       double mu) {
    PenaltySet ps;
    ps.anchors.push_back({global_model,
                          FisherDiagonal(global_model.size(), 1.0), mu,
                          AnchorKind::kProximal});
    return ps;
}

// Full Elastic Transfer regularizer. lambda1 weights the client's own
// consolidated estimate, lambda2 the peers' consolidated estimates,
// lambda3 the peers' current-round rough estimates. Tying
// lambda2 = lambda1 recovers the two-weight form.
inline PenaltySet make_elastic_transfer_anchors(
    const std::optional<EstimatePair>& own_refined,
    const std::vector<EstimatePair>& peers_refined,
    const std::vector<EstimatePair>& peers_rough, double lambda1,
    double lambda2, double lambda3) {
    PenaltySet ps;
    if (own_refined) {
        ps.anchors.push_back({own_refined->theta, own_refined->fisher, lambda1,
                              AnchorKind::kOwnPreviousRefined});
    }
    for (const EstimatePair& p : peers_refined) {
        ps.anchors.push_back({p.theta, p.fisher, lambda2, AnchorKind::kOtherPreviousRefined});
    }
    for (const EstimatePair& p : peers_rough) {
        ps.anchors.push_back({p.theta, p.fisher, lambda3, AnchorKind::kOtherCurrentRough});
    }
    ps.validate();
    return ps;
}

}  // namespace fcl
