#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <vector>

#include "gdflow/common.hpp"
#include "gdflow/tensor.hpp"

// Neighbor search, Euclidean-kernel adjacency, the learned-Riemannian-metric
// geometric graph, and the normalized propagation operator.

namespace gdflow {

struct IndexMatrix {
    int64_t rows = 0, cols = 0;
    std::vector<int64_t> idx;  // rows x cols, row-major

    int64_t at(int64_t i, int64_t j) const { return idx[i * cols + j]; }
};

// ---------------------------------------------------------------------------
// k nearest neighbors. Exhaustive scan below the grid threshold, uniform-grid
// index above it; both return neighbors sorted by (distance, index), self
// excluded, ties broken by the lower index.

namespace detail {

constexpr int64_t kKnnGridThreshold = 4096;

struct KnnBest {
    // insertion-sorted (dist, idx) list of up to k entries
    std::vector<std::pair<double, int64_t>> heap;
    int64_t k;
    explicit KnnBest(int64_t kk) : k(kk) { heap.reserve(kk + 1); }
    double worst() const {
        return heap.size() < static_cast<size_t>(k) ? std::numeric_limits<double>::infinity()
                                                    : heap.back().first;
    }
    void offer(double d, int64_t i) {
        if (heap.size() == static_cast<size_t>(k)) {
            const auto& w = heap.back();
            if (d > w.first || (d == w.first && i > w.second)) return;
        }
        auto pos = std::upper_bound(heap.begin(), heap.end(), std::make_pair(d, i));
        heap.insert(pos, {d, i});
        if (heap.size() > static_cast<size_t>(k)) heap.pop_back();
    }
};

inline void knn_exhaustive(const double* pts, int64_t n, int64_t c, int64_t k, int64_t* out) {
    parallel_for(n, [&](int64_t i) {
        KnnBest best(k);
        const double* q = pts + i * c;
        for (int64_t j = 0; j < n; ++j) {
            if (j == i) continue;
            const double* p = pts + j * c;
            double d = 0.0;
            for (int64_t a = 0; a < c; ++a) {
                const double t = q[a] - p[a];
                d += t * t;
            }
            best.offer(d, j);
        }
        for (int64_t m = 0; m < k; ++m) out[i * k + m] = best.heap[m].second;
    });
}

// Uniform grid over the first (up to) three coordinates. Cell distance on the
// binned axes lower-bounds the full distance, so shell expansion is exact.
inline void knn_grid(const double* pts, int64_t n, int64_t c, int64_t k, int64_t* out) {
    const int64_t bdim = std::min<int64_t>(c, 3);
    double lo[3] = {0, 0, 0}, hi[3] = {0, 0, 0};
    for (int64_t a = 0; a < bdim; ++a) lo[a] = hi[a] = pts[a];
    for (int64_t i = 1; i < n; ++i)
        for (int64_t a = 0; a < bdim; ++a) {
            lo[a] = std::min(lo[a], pts[i * c + a]);
            hi[a] = std::max(hi[a], pts[i * c + a]);
        }
    // aim for ~2k points per cell
    double vol = 1.0;
    for (int64_t a = 0; a < bdim; ++a) vol *= std::max(hi[a] - lo[a], 1e-12);
    const double target_cells = std::max(1.0, static_cast<double>(n) / (2.0 * k));
    const double cell = std::pow(vol / target_cells, 1.0 / bdim);
    int64_t dims[3] = {1, 1, 1};
    for (int64_t a = 0; a < bdim; ++a)
        dims[a] = std::max<int64_t>(1, static_cast<int64_t>((hi[a] - lo[a]) / cell) + 1);
    const int64_t ncells = dims[0] * dims[1] * dims[2];
    auto cell_of = [&](const double* p, int64_t* cc) {
        for (int64_t a = 0; a < 3; ++a) cc[a] = 0;
        for (int64_t a = 0; a < bdim; ++a) {
            int64_t v = static_cast<int64_t>((p[a] - lo[a]) / cell);
            cc[a] = std::clamp<int64_t>(v, 0, dims[a] - 1);
        }
    };
    std::vector<std::vector<int64_t>> bins(ncells);
    for (int64_t i = 0; i < n; ++i) {
        int64_t cc[3];
        cell_of(pts + i * c, cc);
        bins[(cc[0] * dims[1] + cc[1]) * dims[2] + cc[2]].push_back(i);
    }
    parallel_for(n, [&](int64_t i) {
        KnnBest best(k);
        const double* q = pts + i * c;
        int64_t cc[3];
        cell_of(q, cc);
        const int64_t max_ring = *std::max_element(dims, dims + 3);
        for (int64_t ring = 0; ring < max_ring; ++ring) {
            // lower bound on binned-axis distance for cells in this shell
            if (ring > 0) {
                const double lb = (ring - 1) * cell;
                if (lb * lb > best.worst() && best.heap.size() == static_cast<size_t>(k)) break;
            }
            for (int64_t x = std::max<int64_t>(0, cc[0] - ring);
                 x <= std::min(dims[0] - 1, cc[0] + ring); ++x)
                for (int64_t y = std::max<int64_t>(0, cc[1] - ring);
                     y <= std::min(dims[1] - 1, cc[1] + ring); ++y)
                    for (int64_t z = std::max<int64_t>(0, cc[2] - ring);
                         z <= std::min(dims[2] - 1, cc[2] + ring); ++z) {
                        const int64_t chebyshev = std::max(
                            {std::llabs(x - cc[0]), std::llabs(y - cc[1]), std::llabs(z - cc[2])});
                        if (chebyshev != ring) continue;  // shell only
                        for (int64_t j : bins[(x * dims[1] + y) * dims[2] + z]) {
                            if (j == i) continue;
                            const double* p = pts + j * c;
                            double d = 0.0;
                            for (int64_t a = 0; a < c; ++a) {
                                const double t = q[a] - p[a];
                                d += t * t;
                            }
                            best.offer(d, j);
                        }
                    }
        }
        for (int64_t m = 0; m < k; ++m) out[i * k + m] = best.heap[m].second;
    });
}

}  // namespace detail

inline IndexMatrix knn(const double* pts, int64_t n, int64_t c, int64_t k) {
    if (k < 1 || n <= k)
        throw ValueError("knn requires N > k >= 1, got N=" + std::to_string(n) +
                         " k=" + std::to_string(k));
    IndexMatrix im;
    im.rows = n;
    im.cols = k;
    im.idx.resize(n * k);
    if (n < detail::kKnnGridThreshold)
        detail::knn_exhaustive(pts, n, c, k, im.idx.data());
    else
        detail::knn_grid(pts, n, c, k, im.idx.data());
    return im;
}

inline IndexMatrix knn(const Tensor& points, int64_t k) {
    if (points.rank() != 2) throw ShapeError("knn expects an N x c coordinate tensor");
    return knn(points.data(), points.dim(0), points.dim(1), k);
}

// Exhaustive path regardless of size; used to cross-check the grid index.
inline IndexMatrix knn_bruteforce(const Tensor& points, int64_t k) {
    IndexMatrix im;
    im.rows = points.dim(0);
    im.cols = k;
    im.idx.resize(im.rows * k);
    detail::knn_exhaustive(points.data(), im.rows, points.dim(1), k, im.idx.data());
    return im;
}

// ---------------------------------------------------------------------------
// Sparse symmetric operator with differentiable values

struct SparseOp {
    int64_t n = 0;
    std::vector<int64_t> row_ptr;  // n+1
    std::vector<int64_t> col;      // nnz, row entries sorted by value at build
};

// out[i,:] = sum_e vals[e] * Z[col[e],:] over row i's entries.
inline Tensor spmm(const SparseOp& s, const Tensor& vals, const Tensor& z) {
    if (z.rank() != 2 || z.dim(0) != s.n) throw ShapeError("spmm: Z must be n x c");
    if (vals.size() != static_cast<int64_t>(s.col.size()))
        throw ShapeError("spmm: values do not match structure");
    const int64_t c = z.dim(1);
    std::vector<double> out(static_cast<size_t>(s.n) * c, 0.0);
    const double* v = vals.data();
    const double* zd = z.data();
    for (int64_t i = 0; i < s.n; ++i) {
        double* orow = out.data() + i * c;
        for (int64_t e = s.row_ptr[i]; e < s.row_ptr[i + 1]; ++e) {
            const double ve = v[e];
            const double* zrow = zd + s.col[e] * c;
            for (int64_t j = 0; j < c; ++j) orow[j] += ve * zrow[j];
        }
    }
    const bool rec = detail::recording({&vals, &z});
    Tensor r = detail::make_output({s.n, c}, std::move(out), rec);
    if (rec) {
        auto vi = vals.impl(), zi = z.impl(), ri = r.impl();
        const bool nv = vals.requires_grad(), nz = z.requires_grad();
        const SparseOp st = s;
        const double scale = detail::vjp_scale("spmm");
        Tape::active()->record(ri, [=](const std::vector<double>& g) {
            if (nv) {
                std::vector<double> gv(vi->data.size(), 0.0);
                for (int64_t i = 0; i < st.n; ++i) {
                    const double* grow = g.data() + i * c;
                    for (int64_t e = st.row_ptr[i]; e < st.row_ptr[i + 1]; ++e) {
                        const double* zrow = zi->data.data() + st.col[e] * c;
                        double acc = 0.0;
                        for (int64_t j = 0; j < c; ++j) acc += grow[j] * zrow[j];
                        gv[e] = scale * acc;
                    }
                }
                vi->accumulate_grad(gv);
            }
            if (nz) {
                std::vector<double> gz(zi->data.size(), 0.0);
                for (int64_t i = 0; i < st.n; ++i) {
                    const double* grow = g.data() + i * c;
                    for (int64_t e = st.row_ptr[i]; e < st.row_ptr[i + 1]; ++e) {
                        double* zrow = gz.data() + st.col[e] * c;
                        const double ve = scale * vi->data[e];
                        for (int64_t j = 0; j < c; ++j) zrow[j] += ve * grow[j];
                    }
                }
                zi->accumulate_grad(gz);
            }
        });
    }
    return r;
}

inline Tensor sparse_to_dense(const SparseOp& s, const Tensor& vals) {
    Tensor d = Tensor::zeros({s.n, s.n});
    for (int64_t i = 0; i < s.n; ++i)
        for (int64_t e = s.row_ptr[i]; e < s.row_ptr[i + 1]; ++e)
            d.mutable_data()[i * s.n + s.col[e]] += vals.values()[e];
    return d;
}

// Dense matrix (values captured as constants) to sparse structure; test aid.
inline std::pair<SparseOp, Tensor> sparse_from_dense(const Tensor& dense) {
    if (dense.rank() != 2 || dense.dim(0) != dense.dim(1))
        throw ShapeError("sparse_from_dense expects a square matrix");
    SparseOp s;
    s.n = dense.dim(0);
    s.row_ptr.assign(s.n + 1, 0);
    std::vector<double> vals;
    for (int64_t i = 0; i < s.n; ++i) {
        for (int64_t j = 0; j < s.n; ++j) {
            const double v = dense.values()[i * s.n + j];
            if (v != 0.0 || i == j) {  // keep the diagonal slot
                s.col.push_back(j);
                vals.push_back(v);
            }
        }
        s.row_ptr[i + 1] = static_cast<int64_t>(s.col.size());
    }
    const int64_t nnz = static_cast<int64_t>(vals.size());
    return {s, Tensor({nnz}, std::move(vals))};
}

struct NeighborGraph {
    int64_t k = 0;
    IndexMatrix idx;     // N x k neighbor indices (non-differentiable)
    Tensor weights;      // N x k kernel weights in [0,1]
    SparseOp structure;  // symmetric normalized operator, spectrum in [0,1]
    Tensor op_values;
};

// ---------------------------------------------------------------------------
// build_operator: symmetrize on the union edge set with max-weights, add unit
// self loops, normalize D^{-1/2}(W+I)D^{-1/2}, then map spectrum into [0,1].
//
// Per-row entry order and per-node degree summation order are sorted by value
// so that results are invariant to input point order (generic inputs).

inline std::pair<SparseOp, Tensor> build_operator(const IndexMatrix& idx, const Tensor& weights) {
    const int64_t n = idx.rows, k = idx.cols;
    if (weights.size() != n * k && !(n >= 1 && k == 0))
        throw ShapeError("build_operator: weights must be N x k");

    // undirected edge set: (a<b) -> flat source slots in the weight tensor
    std::map<std::pair<int64_t, int64_t>, std::pair<int64_t, int64_t>> und;
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t m = 0; m < k; ++m) {
            const int64_t j = idx.at(i, m);
            if (j == i) throw ValueError("build_operator: self index in neighbor list");
            const auto key = std::minmax(i, j);
            const int64_t slot = i * k + m;
            auto it = und.find(key);
            if (it == und.end())
                und.insert({key, {slot, -1}});
            else if (it->second.second < 0)
                it->second.second = slot;
        }
    }
    const int64_t ne = static_cast<int64_t>(und.size());
    std::vector<int64_t> srcA(ne), srcB(ne), ea(ne), eb(ne);
    {
        int64_t e = 0;
        for (const auto& [key, slots] : und) {
            srcA[e] = slots.first;
            srcB[e] = slots.second >= 0 ? slots.second : slots.first;  // missing reverse: max(w,w)
            ea[e] = key.first;
            eb[e] = key.second;
            ++e;
        }
    }

    Tensor w_flat = reshape(weights, {n * k, 1});
    Tensor w_und = ne > 0 ? reshape(maximum(gather_rows(w_flat, srcA, {ne}),
                                            gather_rows(w_flat, srcB, {ne})),
                                    {ne})
                          : Tensor::zeros({0});

    // degrees: 1 (self loop) + incident undirected weights, value-sorted per node
    std::vector<std::vector<int64_t>> incident(n);
    for (int64_t e = 0; e < ne; ++e) {
        incident[ea[e]].push_back(e);
        incident[eb[e]].push_back(e);
    }
    const double* wu = w_und.data();
    std::vector<int64_t> inc_flat;
    std::vector<int64_t> inc_ptr(n + 1, 0);
    inc_flat.reserve(2 * ne);
    for (int64_t i = 0; i < n; ++i) {
        auto& inc = incident[i];
        std::sort(inc.begin(), inc.end(), [&](int64_t x, int64_t y) {
            return wu[x] != wu[y] ? wu[x] < wu[y] : x < y;
        });
        inc_flat.insert(inc_flat.end(), inc.begin(), inc.end());
        inc_ptr[i + 1] = static_cast<int64_t>(inc_flat.size());
    }

    Tensor deg;
    if (ne > 0) {
        Tensor w_und_col = reshape(w_und, {ne, 1});
        Tensor inc_w = gather_rows(w_und_col, inc_flat, {static_cast<int64_t>(inc_flat.size())});
        // segment sums per node in the sorted incident order
        std::vector<double> dsum(n, 1.0);
        const double* iw = inc_w.data();
        for (int64_t i = 0; i < n; ++i)
            for (int64_t t = inc_ptr[i]; t < inc_ptr[i + 1]; ++t) dsum[i] += iw[t];
        const bool rec = detail::recording({&inc_w});
        deg = detail::make_output({n}, std::move(dsum), rec);
        if (rec) {
            auto ii = inc_w.impl(), di = deg.impl();
            auto ptr = inc_ptr;
            Tape::active()->record(di, [=](const std::vector<double>& g) {
                std::vector<double> gi(ii->data.size());
                for (int64_t i = 0; i < n; ++i)
                    for (int64_t t = ptr[i]; t < ptr[i + 1]; ++t) gi[t] = g[i];
                ii->accumulate_grad(gi);
            });
        }
    } else {
        deg = Tensor::full({n}, 1.0);
    }

    Tensor inv_sqrt_deg = div(Tensor::full({n}, 1.0), sqrt(deg));

    // off-diagonal values: 0.5 * w_e / sqrt(d_a d_b), one per direction;
    // diagonal: 0.5 * (1/d_i + 1)
    Tensor isd_col = reshape(inv_sqrt_deg, {n, 1});
    Tensor vals_all;
    {
        std::vector<Tensor> parts;
        if (ne > 0) {
            Tensor isd_a = reshape(gather_rows(isd_col, ea, {ne}), {ne});
            Tensor isd_b = reshape(gather_rows(isd_col, eb, {ne}), {ne});
            // multiply in value order: the (a,b) endpoint labeling follows
            // input point order, which must not leak into the rounding
            Tensor lo = minimum_of(isd_a, isd_b);
            Tensor hi = maximum(isd_a, isd_b);
            Tensor off = mul(mul(mul(w_und, lo), hi), Tensor::scalar(0.5));
            parts.push_back(off);
        }
        Tensor diag = mul(add(square(inv_sqrt_deg), Tensor::full({n}, 1.0)), Tensor::scalar(0.5));
        parts.push_back(diag);
        vals_all = parts.size() == 1 ? parts[0] : concat(parts, 0);
    }
    // entry t < ne: undirected edge value, used for both (a,b) and (b,a);
    // entry ne + i: diagonal value of node i.
    struct Entry {
        int64_t row, colv, src;
    };
    std::vector<Entry> entries;
    entries.reserve(2 * ne + n);
    for (int64_t e = 0; e < ne; ++e) {
        entries.push_back({ea[e], eb[e], e});
        entries.push_back({eb[e], ea[e], e});
    }
    for (int64_t i = 0; i < n; ++i) entries.push_back({i, i, ne + i});

    const double* va = vals_all.data();
    std::stable_sort(entries.begin(), entries.end(), [&](const Entry& x, const Entry& y) {
        if (x.row != y.row) return x.row < y.row;
        if (va[x.src] != va[y.src]) return va[x.src] < va[y.src];
        return false;
    });

    SparseOp s;
    s.n = n;
    s.row_ptr.assign(n + 1, 0);
    std::vector<int64_t> perm;
    perm.reserve(entries.size());
    s.col.reserve(entries.size());
    for (const auto& en : entries) {
        s.col.push_back(en.colv);
        perm.push_back(en.src);
        ++s.row_ptr[en.row + 1];
    }
    for (int64_t i = 0; i < n; ++i) s.row_ptr[i + 1] += s.row_ptr[i];

    Tensor vals_col = reshape(vals_all, {vals_all.size(), 1});
    Tensor op_values =
        reshape(gather_rows(vals_col, perm, {static_cast<int64_t>(perm.size())}),
                {static_cast<int64_t>(perm.size())});
    return {s, op_values};
}

// Power-iteration bound that the operator spectrum sits inside [0,1]:
// || A - I/2 ||_2 <= 1/2 + tol.
inline bool op_spectrum_within_unit(const SparseOp& s, const Tensor& vals, int iters = 200,
                                    double tol = 1e-8) {
    std::vector<double> v(s.n), w(s.n);
    Rng rng(12345);
    std::normal_distribution<double> g;
    for (auto& x : v) x = g(rng);
    double lam = 0.0;
    for (int it = 0; it < iters; ++it) {
        std::fill(w.begin(), w.end(), 0.0);
        for (int64_t i = 0; i < s.n; ++i)
            for (int64_t e = s.row_ptr[i]; e < s.row_ptr[i + 1]; ++e)
                w[i] += vals.values()[e] * v[s.col[e]];
        for (int64_t i = 0; i < s.n; ++i) w[i] -= 0.5 * v[i];
        double norm = 0.0;
        for (double x : w) norm += x * x;
        norm = std::sqrt(norm);
        if (norm < 1e-300) return true;
        for (int64_t i = 0; i < s.n; ++i) v[i] = w[i] / norm;
        lam = norm;
    }
    return lam <= 0.5 + tol;
}

// ---------------------------------------------------------------------------
// Kernel weights and adjacency builders

struct MetricParams {
    int64_t heads = 4;
    int64_t key_dim = 16;
    Tensor w_q;        // heads x c x key_dim
    Tensor w_k;        // heads x c x key_dim
    Tensor proj;       // (heads*k*k) x (d*d)
    Tensor alpha_raw;  // scalar, alpha = softplus(alpha_raw)
};

namespace detail {

// w_ij = exp(-l2 / (2 delta_i^2)) with delta_i the per-row std of the
// unsquared distances, floored; rows whose spread collapses below the floor
// fall back to uniform weight 1.
inline Tensor kernel_weights(const Tensor& l2 /* N x k */) {
    const int64_t n = l2.dim(0), k = l2.dim(1);
    Tensor l = sqrt(clamp_min(l2, 0.0));
    Tensor mean_l = reduce_mean(l, 1, true);
    Tensor var = reduce_mean(square(sub(l, mean_l)), 1, true);
    Tensor delta_raw = sqrt(clamp_min(var, 0.0));
    Tensor floor = maximum(Tensor::full({n, 1}, 1e-6), mul(mean_l, Tensor::scalar(1e-3)));
    Tensor delta = maximum(delta_raw, floor);
    Tensor w = exp(negate(div(l2, mul(square(delta), Tensor::scalar(2.0)))));

    std::vector<uint8_t> degenerate(static_cast<size_t>(n) * k, 0);
    bool any = false;
    for (int64_t i = 0; i < n; ++i) {
        if (delta_raw.values()[i] <= floor.values()[i]) {
            any = true;
            for (int64_t m = 0; m < k; ++m) degenerate[i * k + m] = 1;
        }
    }
    if (!any) return w;
    return where_mask(degenerate, Tensor::full({n, k}, 1.0), w);
}

inline Tensor pairwise_l2sq(const Tensor& pts, const IndexMatrix& idx) {
    const int64_t n = pts.dim(0), c = pts.dim(1), k = idx.cols;
    Tensor nb = gather_rows(pts, idx.idx, {n, k});          // N x k x c
    Tensor center = reshape(pts, {n, 1, c});                // broadcast over k
    Tensor diff = sub(nb, expand(center, {n, k, c}));       // N x k x c
    return reduce_sum(square(diff), 2, false);              // N x k
}

}  // namespace detail

inline NeighborGraph euclidean_adjacency(const Tensor& points, int64_t k) {
    NeighborGraph g;
    g.k = k;
    g.idx = knn(points, k);
    Tensor l2 = detail::pairwise_l2sq(points, g.idx);
    g.weights = detail::kernel_weights(l2);
    auto [s, vals] = build_operator(g.idx, g.weights);
    g.structure = std::move(s);
    g.op_values = vals;
    return g;
}

// Per-point attention over the k-neighbor feature block producing a d x d
// Jacobian estimate; fully differentiable.
inline Tensor jacobian_attention(const Tensor& x /* N x c */, const IndexMatrix& idx,
                                 const MetricParams& mp, int64_t d, double slope) {
    const int64_t n = x.dim(0), c = x.dim(1), k = idx.cols;
    if (mp.w_q.shape() != (Shape{mp.heads, c, mp.key_dim}) || mp.w_q.shape() != mp.w_k.shape())
        throw ShapeError("jacobian_attention: projection weight shape mismatch");
    if (mp.proj.shape() != (Shape{mp.heads * k * k, d * d}))
        throw ShapeError("jacobian_attention: output projection shape mismatch");
    Tensor h = gather_rows(x, idx.idx, {n, k});       // N x k x c
    Tensor hb = reshape(h, {n, 1, k, c});             // broadcast against heads
    Tensor q = matmul(hb, mp.w_q);                    // N x heads x k x key
    Tensor kk = matmul(hb, mp.w_k);                   // N x heads x k x key
    Tensor scores = mul(matmul(q, transpose_last(kk)),
                        Tensor::scalar(1.0 / std::sqrt(static_cast<double>(d))));
    scores = leaky_relu(scores, slope);               // N x heads x k x k
    Tensor flat = reshape(scores, {n, mp.heads * k * k});
    return reshape(matmul(flat, mp.proj), {n, d, d});
}

// l_ij = sqrt(e^T Gbar e) with Gbar = (G_i + G_j)/2. The quadratic form is
// split as |e|^2 + max(0, e^T (Gbar - I) e) so the result can never round
// below the Euclidean distance (Gbar - I is PSD by construction of G).
inline double riemannian_distance(const std::vector<double>& pi, const std::vector<double>& pj,
                                  const std::vector<double>& gi, const std::vector<double>& gj) {
    const size_t d = pi.size();
    if (pj.size() != d || gi.size() != d * d || gj.size() != d * d)
        throw ShapeError("riemannian_distance: dimension mismatch");
    std::vector<double> e(d);
    double base = 0.0;
    for (size_t a = 0; a < d; ++a) {
        if (!std::isfinite(pi[a]) || !std::isfinite(pj[a]))
            throw ValueError("riemannian_distance: non-finite input");
        e[a] = pi[a] - pj[a];
        base += e[a] * e[a];
    }
    double q = 0.0;
    for (size_t a = 0; a < d; ++a)
        for (size_t b = 0; b < d; ++b) {
            double gbar = 0.5 * (gi[a * d + b] + gj[a * d + b]);
            if (a == b) gbar -= 1.0;
            q += e[a] * gbar * e[b];
        }
    return std::sqrt(base + std::max(q, 0.0));
}

struct GeometricAdjacencyResult {
    NeighborGraph graph;
    Tensor x;  // concat(P, alpha Z), the kNN embedding
    Tensor j;  // N x d x d learned Jacobians
};

inline GeometricAdjacencyResult geometric_adjacency(const Tensor& p, const Tensor& z,
                                                    const MetricParams& mp, int64_t k,
                                                    double slope) {
    const int64_t n = p.dim(0), d = p.dim(1);
    Tensor alpha = softplus(mp.alpha_raw);
    Tensor x = concat({p, mul(z, alpha)}, 1);
    GeometricAdjacencyResult res;
    res.graph.k = k;
    res.graph.idx = knn(x, k);
    res.x = x;
    res.j = jacobian_attention(x, res.graph.idx, mp, d, slope);

    // G = I + alpha^2 J^T J, per point
    Tensor jtj = matmul(transpose_last(res.j), res.j);  // N x d x d
    Tensor eye = expand(reshape(Tensor::identity(d), {1, d, d}), {n, d, d});
    Tensor g = add(eye, mul(jtj, square(alpha)));

    // edge metric: Gbar = (G_i + G_j)/2 in the d-dimensional manifold coords
    Tensor g_flat = reshape(g, {n, d * d});
    Tensor g_nb = reshape(gather_rows(g_flat, res.graph.idx.idx, {n, k}), {n, k, d, d});
    Tensor g_ct = expand(reshape(g, {n, 1, d, d}), {n, k, d, d});
    Tensor gbar = mul(add(g_nb, g_ct), Tensor::scalar(0.5));

    Tensor p_nb = gather_rows(p, res.graph.idx.idx, {n, k});             // N x k x d
    Tensor e = sub(p_nb, expand(reshape(p, {n, 1, d}), {n, k, d}));      // N x k x d
    Tensor e_row = reshape(e, {n, k, 1, d});
    Tensor e_col = reshape(e, {n, k, d, 1});
    Tensor l2 = reshape(matmul(matmul(e_row, gbar), e_col), {n, k});

    res.graph.weights = detail::kernel_weights(l2);
    auto [s, vals] = build_operator(res.graph.idx, res.graph.weights);
    res.graph.structure = std::move(s);
    res.graph.op_values = vals;
    return res;
}

}  // namespace gdflow
