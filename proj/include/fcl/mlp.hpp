#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

#include "fcl/rng.hpp"
#include "fcl/types.hpp"

namespace fcl {

enum class Activation { kRelu, kTanh };

// Dense feed-forward regressor: hidden layers with the configured
// activation, linear scalar output. Weights live in one flat
// ParameterVector; per layer l the block is W_l (out x in, row-major)
// followed by b_l (out).
struct MlpSpec {
    std::vector<int> layer_sizes;
    Activation activation = Activation::kRelu;

    std::size_t layer_count() const { return layer_sizes.size() - 1; }
    int input_dim() const { return layer_sizes.front(); }

    std::size_t param_count() const {
        std::size_t p = 0;
        for (std::size_t l = 0; l + 1 < layer_sizes.size(); ++l) {
            p += static_cast<std::size_t>(layer_sizes[l]) * layer_sizes[l + 1] +
                 layer_sizes[l + 1];
        }
        return p;
    }

    std::size_t weight_offset(std::size_t layer) const {
        std::size_t off = 0;
        for (std::size_t l = 0; l < layer; ++l) {
            off += static_cast<std::size_t>(layer_sizes[l]) * layer_sizes[l + 1] +
                   layer_sizes[l + 1];
        }
        return off;
    }

    std::size_t bias_offset(std::size_t layer) const {
        return weight_offset(layer) +
               static_cast<std::size_t>(layer_sizes[layer]) *
                   layer_sizes[layer + 1];
    }

    void validate() const {
        if (layer_sizes.size() < 2) {
            throw std::invalid_argument("MlpSpec: need at least input and output layer");
        }
        for (int s : layer_sizes) {
            if (s <= 0) throw std::invalid_argument("MlpSpec: layer sizes must be positive");
        }
        if (layer_sizes.back() != 1) {
            throw std::invalid_argument("MlpSpec: output dimension must be 1");
        }
    }
};

// Structured view of one layer, used for the flatten round-trip.
struct LayerWeights {
    std::vector<double> weights;  // out x in, row-major
    std::vector<double> biases;   // out
};

inline std::vector<LayerWeights> unflatten(const MlpSpec& spec,
                                           const ParameterVector& theta) {
    if (theta.size() != spec.param_count()) {
        throw std::invalid_argument("unflatten: parameter length mismatch");
    }
    std::vector<LayerWeights> layers(spec.layer_count());
    for (std::size_t l = 0; l < spec.layer_count(); ++l) {
        std::size_t in = spec.layer_sizes[l];
        std::size_t out = spec.layer_sizes[l + 1];
        const double* w = theta.data() + spec.weight_offset(l);
        const double* b = theta.data() + spec.bias_offset(l);
        layers[l].weights.assign(w, w + in * out);
        layers[l].biases.assign(b, b + out);
    }
    return layers;
}

inline ParameterVector flatten(const MlpSpec& spec,
                               const std::vector<LayerWeights>& layers) {
    ParameterVector theta;
    theta.reserve(spec.param_count());
    for (const auto& layer : layers) {
        theta.insert(theta.end(), layer.weights.begin(), layer.weights.end());
        theta.insert(theta.end(), layer.biases.begin(), layer.biases.end());
    }
    if (theta.size() != spec.param_count()) {
        throw std::invalid_argument("flatten: parameter length mismatch");
    }
    return theta;
}

// Glorot-uniform weights in [-sqrt(6/(fan_in+fan_out)), +sqrt(...)),
// biases zero, drawn layer by layer from one SplitMix64 stream.
inline ParameterVector init_model(const MlpSpec& spec, std::uint64_t seed) {
    spec.validate();
    SplitMix64 rng(derive_seed(seed, {stream::kInit}));
    ParameterVector theta(spec.param_count(), 0.0);
    for (std::size_t l = 0; l < spec.layer_count(); ++l) {
        std::size_t fan_in = spec.layer_sizes[l];
        std::size_t fan_out = spec.layer_sizes[l + 1];
        double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        double* w = theta.data() + spec.weight_offset(l);
        for (std::size_t k = 0; k < fan_in * fan_out; ++k) {
            w[k] = rng.next_uniform(-bound, bound);
        }
        // biases stay zero
    }
    return theta;
}

// Scratch buffers for forward/backward passes; reusable across samples
// so the hot loops allocate nothing.
struct MlpWorkspace {
    std::vector<std::vector<double>> acts;   // acts[0] = input copy
    std::vector<std::vector<double>> zs;     // pre-activations per layer
    std::vector<std::vector<double>> deltas;
    std::vector<double> sample_grad;

    void resize(const MlpSpec& spec) {
        std::size_t n = spec.layer_sizes.size();
        acts.resize(n);
        zs.resize(n);
        deltas.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            acts[i].resize(spec.layer_sizes[i]);
            zs[i].resize(spec.layer_sizes[i]);
            deltas[i].resize(spec.layer_sizes[i]);
        }
        sample_grad.assign(spec.param_count(), 0.0);
    }
};

namespace detail {

inline double activate(Activation a, double z) {
    return a == Activation::kRelu ? (z > 0.0 ? z : 0.0) : std::tanh(z);
}

// Derivative in terms of the pre-activation z. relu'(0) := 0.
inline double activate_deriv(Activation a, double z) {
    if (a == Activation::kRelu) return z > 0.0 ? 1.0 : 0.0;
    double t = std::tanh(z);
    return 1.0 - t * t;
}

inline double forward(const MlpSpec& spec, const ParameterVector& theta,
                      const double* x, MlpWorkspace& ws) {
    std::copy(x, x + spec.layer_sizes[0], ws.acts[0].begin());
    for (std::size_t l = 0; l < spec.layer_count(); ++l) {
        std::size_t in = spec.layer_sizes[l];
        std::size_t out = spec.layer_sizes[l + 1];
        const double* w = theta.data() + spec.weight_offset(l);
        const double* b = theta.data() + spec.bias_offset(l);
        const double* a = ws.acts[l].data();
        bool output_layer = (l + 1 == spec.layer_count());
        for (std::size_t o = 0; o < out; ++o) {
            double z = b[o];
            const double* wrow = w + o * in;
            for (std::size_t i = 0; i < in; ++i) {
                z += wrow[i] * a[i];
            }
            ws.zs[l + 1][o] = z;
            ws.acts[l + 1][o] = output_layer ? z : activate(spec.activation, z);
        }
    }
    return ws.acts.back()[0];
}

// Accumulates d/dtheta of the per-sample loss (yhat - y)^2 into grad.
// Assumes ws holds the forward pass of this sample.
inline void accumulate_sample_grad(const MlpSpec& spec, const ParameterVector& theta,
                                   double yhat, double y, MlpWorkspace& ws,
                                   double* grad) {
    ws.deltas.back()[0] = 2.0 * (yhat - y);
    for (std::size_t l = spec.layer_count(); l-- > 0;) {
        std::size_t in = spec.layer_sizes[l];
        std::size_t out = spec.layer_sizes[l + 1];
        const double* w = theta.data() + spec.weight_offset(l);
        const double* a = ws.acts[l].data();
        const double* delta_out = ws.deltas[l + 1].data();
        double* gw = grad + spec.weight_offset(l);
        double* gb = grad + spec.bias_offset(l);
        for (std::size_t o = 0; o < out; ++o) {
            double d = delta_out[o];
            double* gwrow = gw + o * in;
            for (std::size_t i = 0; i < in; ++i) {
                gwrow[i] += d * a[i];
            }
            gb[o] += d;
        }
        if (l > 0) {
            double* delta_in = ws.deltas[l].data();
            for (std::size_t i = 0; i < in; ++i) {
                double s = 0.0;
                for (std::size_t o = 0; o < out; ++o) {
                    s += w[o * in + i] * delta_out[o];
                }
                delta_in[i] = s * activate_deriv(spec.activation, ws.zs[l][i]);
            }
        }
    }
}

// Lexicographic sample order (features, then label). Accumulating the
// Fisher sum in this order makes the result independent of row order.
inline std::vector<std::size_t> canonical_order(const LabeledSet& data) {
    std::vector<std::size_t> idx(data.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        const double* ra = data.row(a);
        const double* rb = data.row(b);
        for (std::size_t j = 0; j < data.feature_dim; ++j) {
            if (ra[j] != rb[j]) return ra[j] < rb[j];
        }
        return data.labels[a] < data.labels[b];
    });
    return idx;
}

}  // namespace detail

inline double predict(const MlpSpec& spec, const ParameterVector& theta,
                      std::span<const double> x) {
    if (x.size() != static_cast<std::size_t>(spec.input_dim())) {
        throw std::invalid_argument("predict: input dimension mismatch");
    }
    if (theta.size() != spec.param_count()) {
        throw std::invalid_argument("predict: parameter length mismatch");
    }
    MlpWorkspace ws;
    ws.resize(spec);
    return detail::forward(spec, theta, x.data(), ws);
}

// Mean over rows of (prediction - label)^2, accumulated over `rows` in
// the given order.
inline double mse_loss_rows(const MlpSpec& spec, const ParameterVector& theta,
                            const LabeledSet& data,
                            std::span<const std::size_t> rows,
                            MlpWorkspace& ws) {
    if (rows.empty()) {
        throw std::invalid_argument("mse_loss: empty dataset");
    }
    double sum = 0.0;
    for (std::size_t i : rows) {
        double yhat = detail::forward(spec, theta, data.row(i), ws);
        double r = yhat - data.labels[i];
        sum += r * r;
    }
    return sum / static_cast<double>(rows.size());
}

inline double mse_loss(const MlpSpec& spec, const ParameterVector& theta,
                       const LabeledSet& data) {
    if (data.empty()) {
        throw std::invalid_argument("mse_loss: empty dataset");
    }
    MlpWorkspace ws;
    ws.resize(spec);
    std::vector<std::size_t> rows(data.size());
    std::iota(rows.begin(), rows.end(), std::size_t{0});
    return mse_loss_rows(spec, theta, data, rows, ws);
}

// Exact gradient of mse_loss over the given rows; fixed iteration order.
inline void grad_mse_rows(const MlpSpec& spec, const ParameterVector& theta,
                          const LabeledSet& data,
                          std::span<const std::size_t> rows, MlpWorkspace& ws,
                          ParameterVector& grad_out) {
    if (rows.empty()) {
        throw std::invalid_argument("grad_mse: empty batch");
    }
    if (data.feature_dim != static_cast<std::size_t>(spec.input_dim())) {
        throw std::invalid_argument("grad_mse: feature dimension mismatch");
    }
    grad_out.assign(spec.param_count(), 0.0);
    for (std::size_t i : rows) {
        double yhat = detail::forward(spec, theta, data.row(i), ws);
        detail::accumulate_sample_grad(spec, theta, yhat, data.labels[i], ws,
                                       grad_out.data());
    }
    double inv_n = 1.0 / static_cast<double>(rows.size());
    for (double& g : grad_out) g *= inv_n;
}

inline ParameterVector grad_mse(const MlpSpec& spec, const ParameterVector& theta,
                                const LabeledSet& batch) {
    MlpWorkspace ws;
    ws.resize(spec);
    std::vector<std::size_t> rows(batch.size());
    std::iota(rows.begin(), rows.end(), std::size_t{0});
    ParameterVector grad;
    grad_mse_rows(spec, theta, batch, rows, ws, grad);
    return grad;
}

inline ParameterVector sgd_step(const ParameterVector& theta,
                                const ParameterVector& total_grad, double lr) {
    check_same_length(theta, total_grad, "sgd_step");
    ParameterVector next(theta.size());
    for (std::size_t k = 0; k < theta.size(); ++k) {
        next[k] = theta[k] - lr * total_grad[k];
    }
    return next;
}

// Empirical Fisher diagonal: mean over samples of the elementwise square
// of the per-sample loss gradient, with the per-sample loss (yhat - y)^2.
// Samples are accumulated in canonical order so permuting dataset rows
// leaves the result bit-identical.
inline FisherDiagonal fisher_diagonal(const MlpSpec& spec,
                                      const ParameterVector& theta,
                                      const LabeledSet& data) {
    if (data.empty()) {
        throw std::invalid_argument("fisher_diagonal: empty dataset");
    }
    if (data.feature_dim != static_cast<std::size_t>(spec.input_dim())) {
        throw std::invalid_argument("fisher_diagonal: feature dimension mismatch");
    }
    MlpWorkspace ws;
    ws.resize(spec);
    FisherDiagonal fisher(spec.param_count(), 0.0);
    for (std::size_t i : detail::canonical_order(data)) {
        double yhat = detail::forward(spec, theta, data.row(i), ws);
        std::fill(ws.sample_grad.begin(), ws.sample_grad.end(), 0.0);
        detail::accumulate_sample_grad(spec, theta, yhat, data.labels[i], ws,
                                       ws.sample_grad.data());
        for (std::size_t k = 0; k < fisher.size(); ++k) {
            fisher[k] += ws.sample_grad[k] * ws.sample_grad[k];
        }
    }
    double inv_n = 1.0 / static_cast<double>(data.size());
    for (double& f : fisher) f *= inv_n;
    return fisher;
}

}  // namespace fcl
