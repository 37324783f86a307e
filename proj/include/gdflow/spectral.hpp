#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "gdflow/graph.hpp"
#include "gdflow/tensor.hpp"

// Bernstein-polynomial graph spectral filtering with a hard output bound,
// channel-mixing spectrum adaptation, Kronecker spectrum analysis, and the
// closed-form response curves of the reference filter families.

namespace gdflow {

inline double binomial(int64_t n, int64_t k) {
    if (k < 0 || k > n) return 0.0;
    k = std::min(k, n - k);
    double r = 1.0;
    for (int64_t i = 1; i <= k; ++i) r = r * static_cast<double>(n - k + i) / i;
    return r;
}

inline double bernstein_basis(int64_t k, int64_t K, double lambda) {
    if (k < 0 || k > K) throw ValueError("bernstein_basis: k out of [0,K]");
    if (lambda < 0.0 || lambda > 1.0) throw ValueError("bernstein_basis: lambda out of [0,1]");
    return binomial(K, k) * std::pow(1.0 - lambda, static_cast<double>(K - k)) *
           std::pow(lambda, static_cast<double>(k));
}

// Positify via softplus, scale by s = 2^{-K} C(K, floor(K/2)) * sum, then cap
// the largest coefficient at 1. The cap is a hard guarantee: by partition of
// unity, B_K(lambda) <= max_k theta_k, so the filter response stays in (0,1]
// even when the coefficient mass concentrates on an endpoint basis function
// whose peak exceeds the middle one.
inline Tensor normalize_coefficients(const Tensor& theta_raw) {
    if (theta_raw.rank() != 1 || theta_raw.size() < 1)
        throw ShapeError("normalize_coefficients expects a K+1 coefficient vector");
    const int64_t K = theta_raw.size() - 1;
    Tensor pos = softplus(theta_raw);
    const double factor = std::pow(2.0, -static_cast<double>(K)) * binomial(K, K / 2);
    Tensor s = mul(reduce_sum(pos), Tensor::scalar(factor));
    Tensor theta = div(pos, s);
    Tensor cap = maximum(reduce_max(theta), Tensor::scalar(1.0));
    return div(theta, cap);
}

inline double bernstein_value(const std::vector<double>& theta, double lambda) {
    const int64_t K = static_cast<int64_t>(theta.size()) - 1;
    double acc = 0.0;
    for (int64_t k = 0; k <= K; ++k) acc += theta[k] * bernstein_basis(k, K, lambda);
    return acc;
}

struct FilterSpec {
    int64_t K = 8;
    Tensor theta_raw;  // K+1 unconstrained coefficients

    Tensor theta() const { return normalize_coefficients(theta_raw); }
};

// sum_k theta_k C(K,k) (I-A)^{K-k} A^k Z via repeated operator applications;
// k applications of A then K-k of (I-A) per term.
inline Tensor apply_filter(const Tensor& theta, const SparseOp& s, const Tensor& vals,
                           const Tensor& z) {
    const int64_t K = theta.size() - 1;
    Tensor acc;
    bool first = true;
    for (int64_t k = 0; k <= K; ++k) {
        Tensor v = z;
        for (int64_t a = 0; a < k; ++a) v = spmm(s, vals, v);
        for (int64_t b = 0; b < K - k; ++b) v = sub(v, spmm(s, vals, v));
        Tensor coeff = mul(narrow(theta, 0, k, 1), Tensor::scalar(binomial(K, k)));
        Tensor term = mul(v, reshape(coeff, {}));
        acc = first ? term : add(acc, term);
        first = false;
    }
    return acc;
}

inline Tensor apply_filter(const FilterSpec& spec, const SparseOp& s, const Tensor& vals,
                           const Tensor& z) {
    return apply_filter(spec.theta(), s, vals, z);
}

// Symmetric channel mixing matrices W = (M + M^T)/2.
struct ChannelMixer {
    Tensor m1_raw, m2_raw;  // d_h x d_h unconstrained

    Tensor w1() const { return mul(add(m1_raw, transpose_last(m1_raw)), Tensor::scalar(0.5)); }
    Tensor w2() const { return mul(add(m2_raw, transpose_last(m2_raw)), Tensor::scalar(0.5)); }
};

// Time derivative of the mixed filtering: B_K(A) Z W1 - Z W2.
inline Tensor mixing_rhs(const Tensor& theta, const SparseOp& s, const Tensor& vals,
                         const Tensor& z, const Tensor& w1, const Tensor& w2) {
    return sub(matmul(apply_filter(theta, s, vals, z), w1), matmul(z, w2));
}

// Spectrum of W1^T (x) B_K - W2^T (x) I for commuting symmetric W1, W2 whose
// eigenvalues mu_a, varphi_a are paired by a shared eigenbasis: the multiset
// { mu_a phi_b - varphi_a }, sorted ascending.
inline std::vector<double> kronecker_spectrum(const std::vector<double>& phi,
                                              const std::vector<double>& mu,
                                              const std::vector<double>& varphi) {
    if (mu.size() != varphi.size())
        throw ShapeError("kronecker_spectrum: mu and varphi must pair up");
    std::vector<double> out;
    out.reserve(phi.size() * mu.size());
    for (size_t a = 0; a < mu.size(); ++a)
        for (size_t b = 0; b < phi.size(); ++b) out.push_back(mu[a] * phi[b] - varphi[a]);
    std::sort(out.begin(), out.end());
    return out;
}

// ---------------------------------------------------------------------------
// Closed-form spectral responses of the reference filter families.

enum class ClosedFormFilter { Ppr, GnnLf, GnnHf, Chebyshev, Vanilla };

inline ClosedFormFilter parse_closed_form_filter(const std::string& s) {
    if (s == "ppr") return ClosedFormFilter::Ppr;
    if (s == "gnn-lf") return ClosedFormFilter::GnnLf;
    if (s == "gnn-hf") return ClosedFormFilter::GnnHf;
    if (s == "chebyshev") return ClosedFormFilter::Chebyshev;
    if (s == "vanilla") return ClosedFormFilter::Vanilla;
    throw UsageError("unknown filter '" + s + "'");
}

// params: ppr -> {theta}; gnn-lf -> {mu, theta1, theta2}; gnn-hf ->
// {theta1, theta2}; chebyshev/vanilla -> coefficient vector.
inline std::vector<double> closed_form_response(ClosedFormFilter f,
                                                const std::vector<double>& params,
                                                const std::vector<double>& grid) {
    std::vector<double> out(grid.size());
    switch (f) {
        case ClosedFormFilter::Ppr: {
            if (params.size() != 1) throw UsageError("ppr takes one parameter theta");
            const double t = params[0];
            if (!(t > 0.0 && t <= 1.0)) throw UsageError("ppr requires theta in (0,1]");
            for (size_t i = 0; i < grid.size(); ++i) out[i] = t / (1.0 - (1.0 - t) * grid[i]);
            break;
        }
        case ClosedFormFilter::GnnLf: {
            if (params.size() != 3) throw UsageError("gnn-lf takes parameters mu,theta1,theta2");
            const double mu = params[0], t1 = params[1], t2 = params[2];
            if (!(t1 >= 0.5 && t1 < 1.0)) throw UsageError("gnn-lf requires theta1 in [1/2,1)");
            if (!(t2 > 0.0 && t2 < 2.0 / 3.0))
                throw UsageError("gnn-lf requires theta2 in (0,2/3)");
            for (size_t i = 0; i < grid.size(); ++i) {
                const double l = grid[i];
                out[i] = (mu + (1.0 - t1) * l) /
                         ((t1 + 1.0 / t2 - 1.0) + (2.0 - t1 - 1.0 / t2) * l);
            }
            break;
        }
        case ClosedFormFilter::GnnHf: {
            if (params.size() != 2) throw UsageError("gnn-hf takes parameters theta1,theta2");
            const double t1 = params[0], t2 = params[1];
            if (!(t1 > 0.0)) throw UsageError("gnn-hf requires theta1 > 0");
            if (!(t2 > 0.0 && t2 <= 1.0)) throw UsageError("gnn-hf requires theta2 in (0,1]");
            for (size_t i = 0; i < grid.size(); ++i) {
                const double l = grid[i];
                out[i] = (1.0 + t1 * (1.0 - l)) /
                         ((t1 + 1.0 / t2) + (1.0 - t1 - 1.0 / t2) * l);
            }
            break;
        }
        case ClosedFormFilter::Chebyshev: {
            if (params.empty()) throw UsageError("chebyshev needs at least one coefficient");
            for (size_t i = 0; i < grid.size(); ++i) {
                const double l = grid[i];
                double tkm2 = 1.0, tkm1 = l, acc = params[0] * 1.0;
                if (params.size() > 1) acc += params[1] * l;
                for (size_t k = 2; k < params.size(); ++k) {
                    const double tk = 2.0 * l * tkm1 - tkm2;
                    acc += params[k] * tk;
                    tkm2 = tkm1;
                    tkm1 = tk;
                }
                out[i] = acc;
            }
            break;
        }
        case ClosedFormFilter::Vanilla: {
            if (params.empty()) throw UsageError("vanilla needs at least one coefficient");
            // coefficients for powers 1..K
            for (size_t i = 0; i < grid.size(); ++i) {
                const double l = grid[i];
                double p = 1.0, acc = 0.0;
                for (size_t k = 0; k < params.size(); ++k) {
                    p *= l;
                    acc += params[k] * p;
                }
                out[i] = acc;
            }
            break;
        }
    }
    return out;
}

inline std::vector<double> lambda_grid(int64_t n) {
    if (n < 2) throw UsageError("grid needs at least two points");
    std::vector<double> g(n);
    for (int64_t i = 0; i < n; ++i) g[i] = static_cast<double>(i) / (n - 1);
    return g;
}

}  // namespace gdflow
