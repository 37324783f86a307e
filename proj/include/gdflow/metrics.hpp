#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <limits>
#include <string>
#include <vector>

#include "gdflow/graph.hpp"
#include "gdflow/pointcloud.hpp"
#include "gdflow/tensor.hpp"

// Evaluation metrics (CD, EMD, HD, RMSD) and the supervised / unsupervised
// training losses. Discrete pairings (nearest neighbors, optimal matchings)
// are constants of the forward pass; gradients flow through the distances.

namespace gdflow {

constexpr int64_t kEmdExactLimit = 512;  // Hungarian below, auction above

namespace detail {

inline double sqdist3(const Point3& a, const Point3& b) {
    const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
    return dx * dx + dy * dy + dz * dz;
}

// for each point of `from`, index of and squared distance to the nearest
// point of `to`
inline void nearest(const std::vector<Point3>& from, const std::vector<Point3>& to,
                    std::vector<int64_t>& idx, std::vector<double>& d2) {
    idx.resize(from.size());
    d2.resize(from.size());
    parallel_for(static_cast<int64_t>(from.size()), [&](int64_t i) {
        double best = std::numeric_limits<double>::infinity();
        int64_t bj = 0;
        for (size_t j = 0; j < to.size(); ++j) {
            const double d = sqdist3(from[i], to[j]);
            if (d < best) {
                best = d;
                bj = static_cast<int64_t>(j);
            }
        }
        idx[i] = bj;
        d2[i] = best;
    });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Assignment solvers

// Exact min-cost assignment (shortest augmenting paths with potentials).
// Returns row -> column.
inline std::vector<int64_t> assignment_exact(const std::vector<double>& cost, int64_t n) {
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
    std::vector<int64_t> p(n + 1, 0), way(n + 1, 0);
    for (int64_t i = 1; i <= n; ++i) {
        p[0] = i;
        int64_t j0 = 0;
        std::fill(minv.begin(), minv.end(), inf);
        std::vector<char> used(n + 1, 0);
        do {
            used[j0] = 1;
            const int64_t i0 = p[j0];
            int64_t j1 = -1;
            double delta = inf;
            for (int64_t j = 1; j <= n; ++j) {
                if (used[j]) continue;
                const double cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (int64_t j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const int64_t j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0);
    }
    std::vector<int64_t> row_to_col(n);
    for (int64_t j = 1; j <= n; ++j)
        if (p[j] > 0) row_to_col[p[j] - 1] = j - 1;
    return row_to_col;
}

// Forward auction with epsilon scaling; near-optimal, used above the exact
// size limit. Persons bid in FIFO order, so the result is deterministic.
inline std::vector<int64_t> assignment_auction(const std::vector<double>& cost, int64_t n) {
    double cmax = 0.0;
    for (double c : cost) cmax = std::max(cmax, std::fabs(c));
    if (cmax == 0.0) {
        std::vector<int64_t> id(n);
        for (int64_t i = 0; i < n; ++i) id[i] = i;
        return id;
    }
    std::vector<double> price(n, 0.0);
    std::vector<int64_t> owner(n, -1), assigned(n, -1);
    for (double eps = cmax / 4.0; ; eps /= 5.0) {
        std::fill(owner.begin(), owner.end(), -1);
        std::fill(assigned.begin(), assigned.end(), -1);
        std::deque<int64_t> queue;
        for (int64_t i = 0; i < n; ++i) queue.push_back(i);
        while (!queue.empty()) {
            const int64_t i = queue.front();
            queue.pop_front();
            const double* crow = cost.data() + i * n;
            double best = -std::numeric_limits<double>::infinity(), second = best;
            int64_t bj = 0;
            for (int64_t j = 0; j < n; ++j) {
                const double v = -crow[j] - price[j];
                if (v > best) {
                    second = best;
                    best = v;
                    bj = j;
                } else if (v > second) {
                    second = v;
                }
            }
            price[bj] += (best - second) + eps;
            if (owner[bj] >= 0) {
                assigned[owner[bj]] = -1;
                queue.push_back(owner[bj]);
            }
            owner[bj] = i;
            assigned[i] = bj;
        }
        if (eps < cmax * 1e-4) break;
    }
    return assigned;
}

// ---------------------------------------------------------------------------
// Metrics

inline double chamfer(const PointCloud& a, const PointCloud& b) {
    if (a.points.empty() || b.points.empty()) throw ValueError("chamfer of empty cloud");
    std::vector<int64_t> idx;
    std::vector<double> d2;
    double acc = 0.0;
    detail::nearest(a.points, b.points, idx, d2);
    for (double d : d2) acc += d / a.size();
    double accb = 0.0;
    detail::nearest(b.points, a.points, idx, d2);
    for (double d : d2) accb += d / b.size();
    return acc + accb;
}

inline double hausdorff(const PointCloud& a, const PointCloud& b) {
    if (a.points.empty() || b.points.empty()) throw ValueError("hausdorff of empty cloud");
    std::vector<int64_t> idx;
    std::vector<double> d2;
    double m = 0.0;
    detail::nearest(a.points, b.points, idx, d2);
    for (double d : d2) m = std::max(m, d);
    detail::nearest(b.points, a.points, idx, d2);
    for (double d : d2) m = std::max(m, d);
    return std::sqrt(m);
}

inline double rmsd(const PointCloud& a, const PointCloud& b) {
    if (a.points.empty() || b.points.empty()) throw ValueError("rmsd of empty cloud");
    std::vector<int64_t> idx;
    std::vector<double> d2;
    detail::nearest(a.points, b.points, idx, d2);
    double acc = 0.0;
    for (double d : d2) acc += d / a.size();
    return std::sqrt(acc);
}

struct EmdResult {
    double value = 0.0;
    bool exact = true;
    std::vector<int64_t> matching;  // a-row -> b-row
};

// Minimum over bijections of the mean squared matched distance.
inline EmdResult emd(const PointCloud& a, const PointCloud& b) {
    if (a.size() != b.size())
        throw ValueError("emd requires equal sizes, got " + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()));
    const int64_t n = a.size();
    if (n == 0) throw ValueError("emd of empty cloud");
    std::vector<double> cost(static_cast<size_t>(n) * n);
    parallel_for(n, [&](int64_t i) {
        for (int64_t j = 0; j < n; ++j)
            cost[i * n + j] = detail::sqdist3(a.points[i], b.points[j]);
    });
    EmdResult res;
    res.exact = n <= kEmdExactLimit;
    res.matching = res.exact ? assignment_exact(cost, n) : assignment_auction(cost, n);
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) acc += cost[i * n + res.matching[i]];
    res.value = acc / n;
    return res;
}

struct MetricReport {
    double cd = 0.0, emd = 0.0, hd = 0.0, rmsd = 0.0;
    bool has_cd = false, has_emd = false, has_hd = false, has_rmsd = false;
    int64_t n_ref = 0, n_test = 0;
    bool emd_exact = true;
};

inline MetricReport evaluate(const PointCloud& ref, const PointCloud& test, bool want_cd,
                             bool want_emd, bool want_hd, bool want_rmsd) {
    MetricReport r;
    r.n_ref = ref.size();
    r.n_test = test.size();
    if (want_cd) {
        r.cd = chamfer(test, ref);
        r.has_cd = true;
    }
    if (want_emd) {
        auto e = emd(test, ref);
        r.emd = e.value;
        r.emd_exact = e.exact;
        r.has_emd = true;
    }
    if (want_hd) {
        r.hd = hausdorff(test, ref);
        r.has_hd = true;
    }
    if (want_rmsd) {
        r.rmsd = rmsd(test, ref);
        r.has_rmsd = true;
    }
    return r;
}

// ---------------------------------------------------------------------------
// Differentiable losses (denoised coordinates as tensors)

namespace detail {

inline std::vector<Point3> tensor_points(const Tensor& t) {
    std::vector<Point3> pts(t.dim(0));
    for (int64_t i = 0; i < t.dim(0); ++i)
        for (int a = 0; a < 3; ++a) pts[i][a] = t.values()[i * 3 + a];
    return pts;
}

}  // namespace detail

// CD + EMD of Eq. losses; pairings fixed per forward pass.
inline Tensor supervised_loss(const Tensor& denoised, const Tensor& clean) {
    if (denoised.rank() != 2 || denoised.dim(1) != 3 || clean.rank() != 2 || clean.dim(1) != 3)
        throw ShapeError("supervised_loss expects N x 3 tensors");
    if (denoised.dim(0) != clean.dim(0))
        throw ValueError("supervised_loss requires equal sizes for the EMD term");
    const int64_t n = denoised.dim(0);
    const auto dpts = detail::tensor_points(denoised);
    const auto cpts = detail::tensor_points(clean);

    std::vector<int64_t> idx_dc, idx_cd;
    std::vector<double> d2;
    detail::nearest(dpts, cpts, idx_dc, d2);
    detail::nearest(cpts, dpts, idx_cd, d2);

    std::vector<double> cost(static_cast<size_t>(n) * n);
    parallel_for(n, [&](int64_t i) {
        for (int64_t j = 0; j < n; ++j) cost[i * n + j] = detail::sqdist3(dpts[i], cpts[j]);
    });
    const std::vector<int64_t> match =
        n <= kEmdExactLimit ? assignment_exact(cost, n) : assignment_auction(cost, n);

    Tensor c_near = gather_rows(clean, idx_dc, {n});      // nearest clean per denoised
    Tensor d_near = gather_rows(denoised, idx_cd, {n});   // nearest denoised per clean
    Tensor c_match = gather_rows(clean, match, {n});      // optimal bijection

    Tensor cd_a = reduce_mean(reduce_sum(square(sub(denoised, c_near)), 1));
    Tensor cd_b = reduce_mean(reduce_sum(square(sub(d_near, clean)), 1));
    Tensor emd_t = reduce_mean(reduce_sum(square(sub(denoised, c_match)), 1));
    return add(add(cd_a, cd_b), emd_t);
}

// Reconstruction prior over the m nearest noisy points plus repulsion.
inline Tensor unsupervised_loss(const Tensor& denoised, const Tensor& noisy, double sigma,
                                double lambda = 0.01, int64_t k = 16, int64_t m = 8) {
    if (sigma <= 0.0) throw ValueError("unsupervised_loss requires sigma > 0");
    if (denoised.rank() != 2 || denoised.dim(1) != 3)
        throw ShapeError("unsupervised_loss expects N x 3 denoised tensor");
    const int64_t n = denoised.dim(0);
    const int64_t nv = noisy.dim(0);
    if (n < 1 || nv < 1) throw ValueError("unsupervised_loss of empty cloud");

    const auto dpts = detail::tensor_points(denoised);
    const auto vpts = detail::tensor_points(noisy);
    const int64_t mm = std::min(m, nv);

    // m nearest noisy points per denoised point (selection is not
    // differentiated; the weights are)
    std::vector<int64_t> nn_idx(static_cast<size_t>(n) * mm);
    parallel_for(n, [&](int64_t i) {
        std::vector<std::pair<double, int64_t>> best;
        best.reserve(nv);
        for (int64_t j = 0; j < nv; ++j) best.push_back({detail::sqdist3(dpts[i], vpts[j]), j});
        std::partial_sort(best.begin(), best.begin() + mm, best.end());
        for (int64_t t = 0; t < mm; ++t) nn_idx[i * mm + t] = best[t].second;
    });

    Tensor v_near = gather_rows(noisy, nn_idx, {n, mm});                    // N x m x 3
    Tensor diff = sub(v_near, expand(reshape(denoised, {n, 1, 3}), {n, mm, 3}));
    Tensor sq = reduce_sum(square(diff), 2);                                // N x m
    // softmax weights w ~ exp(-sq / 2 sigma^2); per-row shift for stability
    // (softmax is invariant to per-row constants, so gradients are unchanged)
    Tensor logits = mul(sq, Tensor::scalar(-1.0 / (2.0 * sigma * sigma)));
    Tensor shift = Tensor::zeros({n, 1});
    for (int64_t i = 0; i < n; ++i) {
        double mx = logits.values()[i * mm];
        for (int64_t t = 1; t < mm; ++t) mx = std::max(mx, logits.values()[i * mm + t]);
        shift.mutable_data()[i] = mx;
    }
    Tensor ex = exp(sub(logits, expand(shift, {n, mm})));
    Tensor w = div(ex, expand(reduce_sum(ex, 1, true), {n, mm}));
    Tensor l_recons = reduce_mean(reduce_sum(mul(w, sq), 1));

    Tensor l_repul = Tensor::scalar(0.0);
    const int64_t kr = std::min(k, n - 1);
    if (kr >= 1) {
        auto im = knn(denoised.data(), n, 3, kr);
        Tensor d_nb = gather_rows(denoised, im.idx, {n, kr});               // N x k x 3
        Tensor rd = sub(d_nb, expand(reshape(denoised, {n, 1, 3}), {n, kr, 3}));
        Tensor rsq = reduce_sum(square(rd), 2);                             // N x k
        l_repul = reduce_mean(reduce_sum(mul(exp(negate(rsq)), rsq), 1));
    }
    return add(l_recons, mul(l_repul, Tensor::scalar(lambda)));
}

}  // namespace gdflow
