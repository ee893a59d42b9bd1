#pragma once

#include <cmath>
#include <vector>

#include "mct/common.hpp"
#include "mct/nn/params.hpp"

namespace mct::nn {

// Rescales to max_norm when the global norm exceeds it; identity otherwise.
inline void clip_gradients(GradientSet& grads, double max_norm = 1.0) {
    if (max_norm <= 0.0) throw ContractError("clip_gradients: max_norm must be positive");
    const double norm = grads.global_norm();
    if (norm <= max_norm || norm == 0.0) return;
    const double scale = max_norm / norm;
    for (double& v : grads.data) v *= scale;
}

struct AdamHyper {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    explicit AdamState(std::size_t n) : m(n, 0.0), v(n, 0.0) {}
    std::vector<double> m, v;
    std::uint64_t t = 0;
};

// One Adam step. A non-finite gradient aborts before any mutation, so
// params and state are untouched on failure.
inline void optimizer_step(ParamBuffer& params, const GradientSet& grads, AdamState& state,
                           const AdamHyper& hyper) {
    const std::size_t n = params.size();
    if (grads.data.size() != n || state.m.size() != n) {
        throw ContractError("optimizer_step: shape mismatch");
    }
    for (double g : grads.data) {
        if (!std::isfinite(g)) throw NumericError("optimizer_step: non-finite gradient");
    }
    const std::uint64_t t = state.t + 1;
    const double bc1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(t));
    double* w = params.data().data();
    for (std::size_t i = 0; i < n; ++i) {
        const double g = grads.data[i];
        state.m[i] = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * g;
        state.v[i] = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * g * g;
        const double mhat = state.m[i] / bc1;
        const double vhat = state.v[i] / bc2;
        w[i] -= hyper.lr * mhat / (std::sqrt(vhat) + hyper.eps);
    }
    state.t = t;
}

}  // namespace mct::nn
