#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "gdflow/graph.hpp"
#include "gdflow/tensor.hpp"

// Fixed-step RK4 integration of the micro-step temporal graph convolution,
// with per-step or per-stage graph refresh and trajectory snapshots.

namespace gdflow {

enum class GraphRefresh { PerStep, PerStage };

inline GraphRefresh parse_graph_refresh(const std::string& s) {
    if (s == "per-step") return GraphRefresh::PerStep;
    if (s == "per-stage") return GraphRefresh::PerStage;
    throw UsageError("unknown graph_refresh '" + s + "' (per-step|per-stage)");
}

struct IntegratorConfig {
    double dt = 0.1;
    double t_end = 1.0;
    GraphRefresh refresh = GraphRefresh::PerStep;
    bool activation = true;  // leaky-relu wrapping of the rhs; off for linear oracles

    int64_t num_steps() const {
        if (dt <= 0.0) throw ValueError("integrator dt must be positive");
        const double ratio = t_end / dt;
        const int64_t n = static_cast<int64_t>(std::llround(ratio));
        if (n < 0 || std::fabs(ratio - n) > 1e-9)
            throw ValueError("integrator T must be a positive integer multiple of dt");
        return n;
    }
};

struct OdeState {
    double t = 0.0;
    Tensor z;  // N x d_h node features
    Tensor p;  // N x d manifold coordinates, constant during integration
};

using RhsFn = std::function<Tensor(double t, const Tensor& z)>;

// One classical Runge-Kutta step. Stage values are checked for finiteness;
// the integrate loop annotates failures with the step index.
inline OdeState rk4_step(const RhsFn& f, const OdeState& state, double dt) {
    auto check = [](const Tensor& v, const char* stage) {
        if (!v.all_finite())
            throw DivergenceError(std::string("non-finite values in RK4 stage ") + stage);
        return v;
    };
    const Tensor& z = state.z;
    const double t = state.t;
    Tensor k1 = check(f(t, z), "k1");
    Tensor k2 = check(f(t + 0.5 * dt, add(z, mul(k1, Tensor::scalar(0.5 * dt)))), "k2");
    Tensor k3 = check(f(t + 0.5 * dt, add(z, mul(k2, Tensor::scalar(0.5 * dt)))), "k3");
    Tensor k4 = check(f(t + dt, add(z, mul(k3, Tensor::scalar(dt)))), "k4");
    Tensor incr = add(add(k1, k4), mul(add(k2, k3), Tensor::scalar(2.0)));
    OdeState next;
    next.t = t + dt;
    next.p = state.p;
    next.z = add(z, mul(incr, Tensor::scalar(dt / 6.0)));
    return next;
}

// Builds the right-hand side for one step. Under per-step refresh the factory
// is invoked once per accepted step with the step-start state and must return
// a frozen-graph rhs; under per-stage the returned function rebuilds itself.
using RhsFactory = std::function<RhsFn(const OdeState& step_start)>;

inline OdeState integrate(const OdeState& state0, const RhsFactory& make_rhs,
                          const IntegratorConfig& cfg) {
    const int64_t steps = cfg.num_steps();
    OdeState s = state0;
    for (int64_t i = 0; i < steps; ++i) {
        try {
            RhsFn f = make_rhs(s);
            s = rk4_step(f, s, cfg.dt);
        } catch (const DivergenceError& e) {
            throw DivergenceError("step " + std::to_string(i) + ": " + e.what());
        }
        if (!s.z.all_finite())
            throw DivergenceError("step " + std::to_string(i) + ": non-finite state");
    }
    return s;
}

// Trajectory states at the requested fractions of T. Fractions must land on
// the step grid; the final snapshot is bitwise equal to integrate's output.
inline std::vector<OdeState> integrate_with_snapshots(const OdeState& state0,
                                                      const RhsFactory& make_rhs,
                                                      const IntegratorConfig& cfg,
                                                      const std::vector<double>& fractions) {
    const int64_t steps = cfg.num_steps();
    std::vector<int64_t> want(fractions.size());
    for (size_t i = 0; i < fractions.size(); ++i) {
        const double f = fractions[i];
        if (f < 0.0 || f > 1.0) throw ValueError("snapshot fraction out of [0,1]");
        const double pos = f * steps;
        const int64_t stepno = static_cast<int64_t>(std::llround(pos));
        if (std::fabs(pos - stepno) > 1e-9)
            throw ValueError("snapshot fraction " + std::to_string(f) +
                             " is not a multiple of dt/T");
        want[i] = stepno;
    }
    std::vector<OdeState> out(fractions.size());
    OdeState s = state0;
    for (size_t i = 0; i < want.size(); ++i)
        if (want[i] == 0) out[i] = s;
    for (int64_t step = 1; step <= steps; ++step) {
        try {
            RhsFn f = make_rhs(s);
            s = rk4_step(f, s, cfg.dt);
        } catch (const DivergenceError& e) {
            throw DivergenceError("step " + std::to_string(step - 1) + ": " + e.what());
        }
        for (size_t i = 0; i < want.size(); ++i)
            if (want[i] == step) out[i] = s;
    }
    return out;
}

// Discrete integer-step baseline: `layers` rounds of Z <- A Z Theta, each
// followed by per-channel standardization and leaky-relu, graph rebuilt per
// layer through `make_op`.
using AdjacencyFn = std::function<std::pair<SparseOp, Tensor>(const Tensor& z)>;

inline Tensor integer_step_baseline(const Tensor& z0, const AdjacencyFn& make_op,
                                    const std::vector<Tensor>& thetas, double slope,
                                    bool standardize = true) {
    Tensor z = z0;
    for (const Tensor& theta : thetas) {
        auto [s, vals] = make_op(z);
        z = matmul(spmm(s, vals, z), theta);
        if (standardize) {
            Tensor mean = reduce_mean(z, 0, true);
            Tensor var = reduce_mean(square(sub(z, mean)), 0, true);
            z = div(sub(z, mean), sqrt(add(var, Tensor::scalar(1e-5))));
        }
        z = leaky_relu(z, slope);
    }
    return z;
}

}  // namespace gdflow
