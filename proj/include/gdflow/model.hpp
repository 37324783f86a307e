#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "gdflow/ode.hpp"
#include "gdflow/pointcloud.hpp"
#include "gdflow/spectral.hpp"

// End-to-end network assembly: EdgeConv feature lifts, the micro-step
// temporal graph convolution core, residual coordinate reconstruction, the
// ablation variants, and the checkpoint format.

namespace gdflow {

enum class Variant { Full, NoGeoGraph, NoSpectralFiltering, NoChannelMixing, DtlGcn };

inline Variant parse_variant(const std::string& s) {
    if (s == "full") return Variant::Full;
    if (s == "no-geo-graph") return Variant::NoGeoGraph;
    if (s == "no-spectral-filtering") return Variant::NoSpectralFiltering;
    if (s == "no-channel-mixing") return Variant::NoChannelMixing;
    if (s == "dtl-gcn") return Variant::DtlGcn;
    throw UsageError("unknown variant '" + s + "'");
}

inline std::string variant_name(Variant v) {
    switch (v) {
        case Variant::Full: return "full";
        case Variant::NoGeoGraph: return "no-geo-graph";
        case Variant::NoSpectralFiltering: return "no-spectral-filtering";
        case Variant::NoChannelMixing: return "no-channel-mixing";
        case Variant::DtlGcn: return "dtl-gcn";
    }
    return "full";
}

struct ModelConfig {
    int64_t d = 16;    // manifold dimension
    int64_t d_h = 64;  // hidden feature dimension
    int64_t K = 8;     // Bernstein order
    int64_t k = 16;    // neighbors
    int64_t heads = 4;
    int64_t key_dim = 16;
    double leaky_slope = 0.01;
    IntegratorConfig integrator;
    Variant variant = Variant::Full;

    void validate() const {
        if (d < 1 || d_h < 1 || K < 0 || k < 1 || heads < 1 || key_dim < 1)
            throw ValueError("model config dimensions must be >= 1");
        integrator.num_steps();
    }
};

constexpr int64_t kLiftHidden = 32;

struct EdgeMlp {
    Tensor w1, b1, w2, b2;  // (6 x hidden), (hidden), (hidden x out), (out)
};

struct ModelParams {
    EdgeMlp lift_p, lift_z;
    MetricParams metric;
    Tensor theta_raw;  // K+1
    ChannelMixer mixer;
    Tensor head_w, head_b;           // d_h x 3, 3
    std::vector<Tensor> dtl_theta;   // 3 x (d_h x d_h), DTL-GCN variant only

    std::vector<std::pair<std::string, Tensor>> named() const {
        std::vector<std::pair<std::string, Tensor>> out = {
            {"lift_p.w1", lift_p.w1}, {"lift_p.b1", lift_p.b1}, {"lift_p.w2", lift_p.w2},
            {"lift_p.b2", lift_p.b2}, {"lift_z.w1", lift_z.w1}, {"lift_z.b1", lift_z.b1},
            {"lift_z.w2", lift_z.w2}, {"lift_z.b2", lift_z.b2}, {"metric.w_q", metric.w_q},
            {"metric.w_k", metric.w_k}, {"metric.proj", metric.proj},
            {"metric.alpha_raw", metric.alpha_raw}, {"filter.theta_raw", theta_raw},
            {"mixer.m1_raw", mixer.m1_raw}, {"mixer.m2_raw", mixer.m2_raw},
            {"head.w", head_w}, {"head.b", head_b},
        };
        for (size_t l = 0; l < dtl_theta.size(); ++l)
            out.push_back({"dtl.theta" + std::to_string(l), dtl_theta[l]});
        return out;
    }

    void set_requires_grad(bool v) {
        for (auto& [name, t] : named()) const_cast<Tensor&>(t).set_requires_grad(v);
    }
};

namespace detail {

inline double inv_softplus(double y) { return std::log(std::expm1(y)); }

// Lift MLP whose leading output channels reproduce scaled point coordinates:
// hidden pairs (x_a + 1, -x_a + 1) stay in the linear region of the leaky
// relu for normalized clouds, and the second layer differences them back.
inline EdgeMlp init_lift(int64_t out, Rng& rng, bool structured) {
    EdgeMlp m;
    m.w1 = Tensor::randn({6, kLiftHidden}, rng, 0.4);
    m.b1 = Tensor::randn({kLiftHidden}, rng, 0.1);
    m.w2 = Tensor::randn({kLiftHidden, out}, rng, 0.2);
    m.b2 = Tensor::zeros({out});
    if (!structured) return m;
    for (int64_t h = 0; h < 6; ++h) {
        for (int64_t c = 0; c < 6; ++c) m.w1.mutable_data()[c * kLiftHidden + h] = 0.0;
        m.b1.mutable_data()[h] = 1.0;
    }
    for (int64_t a = 0; a < 3; ++a) {
        m.w1.mutable_data()[a * kLiftHidden + a] = 1.0;       // h_a     = x_a + 1
        m.w1.mutable_data()[a * kLiftHidden + (a + 3)] = -1.0;  // h_{a+3} = -x_a + 1
    }
    // coordinate channels: 0..2 -> +2x, 3..5 -> -2x, 6..8 -> +2x
    const int64_t blocks[3][2] = {{0, +1}, {3, -1}, {6, +1}};
    for (const auto& blk : blocks) {
        for (int64_t a = 0; a < 3; ++a) {
            const int64_t ch = blk[0] + a;
            if (ch >= out) break;
            for (int64_t h = 0; h < kLiftHidden; ++h) m.w2.mutable_data()[h * out + ch] = 0.0;
            m.w2.mutable_data()[a * out + ch] = static_cast<double>(blk[1]);
            m.w2.mutable_data()[(a + 3) * out + ch] = -static_cast<double>(blk[1]);
        }
    }
    return m;
}

}  // namespace detail

// Deterministic initialization. Coordinate channels are wired through both
// lifts; the mixer starts as identity on the diffusing channel block and zero
// on the frozen block, and the reconstruction head starts at zero so the
// model begins as the identity map.
inline ModelParams init_params(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    ModelParams p;
    p.lift_p = detail::init_lift(cfg.d, rng, true);
    p.lift_z = detail::init_lift(cfg.d_h, rng, true);

    const int64_t c = cfg.d + cfg.d_h;
    p.metric.heads = cfg.heads;
    p.metric.key_dim = cfg.key_dim;
    p.metric.w_q = Tensor::randn({cfg.heads, c, cfg.key_dim}, rng, 0.3 / std::sqrt(double(c)));
    p.metric.w_k = Tensor::randn({cfg.heads, c, cfg.key_dim}, rng, 0.3 / std::sqrt(double(c)));
    p.metric.proj = Tensor::zeros({cfg.heads * cfg.k * cfg.k, cfg.d * cfg.d});
    p.metric.alpha_raw = Tensor::scalar(detail::inv_softplus(0.25));

    p.theta_raw = Tensor::zeros({cfg.K + 1});
    for (int64_t k = 0; k <= cfg.K; ++k) {
        const double t = cfg.K > 0 ? static_cast<double>(k) / cfg.K : 1.0;
        p.theta_raw.mutable_data()[k] = detail::inv_softplus(0.2 + t * t);
    }

    auto mixer_init = [&](double) {
        Tensor m = Tensor::randn({cfg.d_h, cfg.d_h}, rng, 0.02);
        for (int64_t i = 0; i < cfg.d_h; ++i) {
            double diag = 0.2;           // feature channels drift slowly
            if (i < std::min<int64_t>(6, cfg.d_h)) diag = 1.0;   // diffusing block
            else if (i < std::min<int64_t>(9, cfg.d_h)) diag = 0.0;  // frozen block
            m.mutable_data()[i * cfg.d_h + i] = diag;
        }
        return m;
    };
    p.mixer.m1_raw = mixer_init(1.0);
    p.mixer.m2_raw = mixer_init(1.0);

    p.head_w = Tensor::zeros({cfg.d_h, 3});
    p.head_b = Tensor::zeros({3});

    if (cfg.variant == Variant::DtlGcn) {
        for (int l = 0; l < 3; ++l) {
            Tensor th = Tensor::randn({cfg.d_h, cfg.d_h}, rng, 0.05);
            for (int64_t i = 0; i < cfg.d_h; ++i) th.mutable_data()[i * cfg.d_h + i] += 1.0;
            p.dtl_theta.push_back(th);
        }
    }
    return p;
}

// max over kNN edges of mlp(concat(x_i, x_j - x_i))
inline Tensor edge_feature_lift(const Tensor& points, const IndexMatrix& idx, const EdgeMlp& mlp,
                                double slope) {
    const int64_t n = points.dim(0), k = idx.cols, c = points.dim(1);
    Tensor nb = gather_rows(points, idx.idx, {n, k});                 // N x k x c
    Tensor ctr = expand(reshape(points, {n, 1, c}), {n, k, c});
    Tensor feat = concat({ctr, sub(nb, ctr)}, 2);                     // N x k x 2c
    Tensor h = leaky_relu(add(matmul(feat, mlp.w1), mlp.b1), slope);
    Tensor e = add(matmul(h, mlp.w2), mlp.b2);                        // N x k x out
    return reduce_max(e, 1);                                          // N x out
}

namespace detail {

inline std::pair<SparseOp, Tensor> variant_adjacency(Variant variant, const Tensor& p,
                                                     const Tensor& z, const ModelParams& params,
                                                     const ModelConfig& cfg) {
    if (variant == Variant::NoGeoGraph) {
        Tensor alpha = softplus(params.metric.alpha_raw);
        NeighborGraph g = euclidean_adjacency(concat({p, mul(z, alpha)}, 1), cfg.k);
        return {g.structure, g.op_values};
    }
    auto res = geometric_adjacency(p, z, params.metric, cfg.k, cfg.leaky_slope);
    return {res.graph.structure, res.graph.op_values};
}

}  // namespace detail

// Residual displacement network on raw coordinates.
inline Tensor forward_points(const Tensor& points, const ModelParams& params,
                             const ModelConfig& cfg) {
    cfg.validate();
    const int64_t n = points.dim(0);
    if (n <= cfg.k) throw ValueError("forward requires N > k");
    const double slope = cfg.leaky_slope;

    auto idx0 = knn(points, cfg.k);
    Tensor p = edge_feature_lift(points, idx0, params.lift_p, slope);
    Tensor z0 = edge_feature_lift(points, idx0, params.lift_z, slope);

    Tensor z_final;
    if (cfg.variant == Variant::DtlGcn) {
        AdjacencyFn adj = [&](const Tensor& z) {
            return detail::variant_adjacency(cfg.variant, p, z, params, cfg);
        };
        z_final = integer_step_baseline(z0, adj, params.dtl_theta, slope, true);
    } else {
        Tensor theta = normalize_coefficients(params.theta_raw);
        Tensor w1 = params.mixer.w1();
        Tensor w2 = params.mixer.w2();
        auto rhs_with = [&, theta, w1, w2](const SparseOp& s, const Tensor& vals,
                                           const Tensor& z) {
            Tensor r;
            switch (cfg.variant) {
                case Variant::NoSpectralFiltering:
                    r = sub(matmul(spmm(s, vals, z), w1), matmul(z, w2));
                    break;
                case Variant::NoChannelMixing:
                    r = apply_filter(theta, s, vals, z);
                    break;
                default:
                    r = mixing_rhs(theta, s, vals, z, w1, w2);
            }
            return cfg.integrator.activation ? leaky_relu(r, slope) : r;
        };
        RhsFactory factory;
        if (cfg.integrator.refresh == GraphRefresh::PerStep) {
            factory = [&, rhs_with](const OdeState& start) {
                auto [s, vals] = detail::variant_adjacency(cfg.variant, start.p, start.z, params,
                                                           cfg);
                return RhsFn([rhs_with, s = std::move(s), vals](double, const Tensor& z) {
                    return rhs_with(s, vals, z);
                });
            };
        } else {
            factory = [&, rhs_with](const OdeState& start) {
                Tensor pc = start.p;
                return RhsFn([&, rhs_with, pc](double, const Tensor& z) {
                    auto [s, vals] = detail::variant_adjacency(cfg.variant, pc, z, params, cfg);
                    return rhs_with(s, vals, z);
                });
            };
        }
        OdeState s0;
        s0.t = 0.0;
        s0.z = z0;
        s0.p = p;
        z_final = integrate(s0, factory, cfg.integrator).z;
    }

    Tensor disp = add(matmul(z_final, params.head_w), params.head_b);
    return add(points, disp);
}

inline PointCloud forward(const PointCloud& noisy, const ModelParams& params,
                          const ModelConfig& cfg) {
    PointCloud out = from_tensor(forward_points(to_tensor(noisy), params, cfg), noisy.name);
    return out;
}

// Intermediate-state reconstructions at the requested fractions of T; each
// snapshot state runs through the same reconstruction head.
inline std::vector<PointCloud> forward_snapshots(const PointCloud& noisy,
                                                 const ModelParams& params,
                                                 const ModelConfig& cfg,
                                                 const std::vector<double>& fractions) {
    cfg.validate();
    if (cfg.variant == Variant::DtlGcn)
        throw UsageError("snapshots require a continuous-time variant");
    Tensor points = to_tensor(noisy);
    const int64_t n = points.dim(0);
    if (n <= cfg.k) throw ValueError("forward requires N > k");
    const double slope = cfg.leaky_slope;

    auto idx0 = knn(points, cfg.k);
    Tensor p = edge_feature_lift(points, idx0, params.lift_p, slope);
    Tensor z0 = edge_feature_lift(points, idx0, params.lift_z, slope);
    Tensor theta = normalize_coefficients(params.theta_raw);
    Tensor w1 = params.mixer.w1();
    Tensor w2 = params.mixer.w2();

    auto rhs_with = [&](const SparseOp& s, const Tensor& vals, const Tensor& z) {
        Tensor r;
        switch (cfg.variant) {
            case Variant::NoSpectralFiltering:
                r = sub(matmul(spmm(s, vals, z), w1), matmul(z, w2));
                break;
            case Variant::NoChannelMixing:
                r = apply_filter(theta, s, vals, z);
                break;
            default:
                r = mixing_rhs(theta, s, vals, z, w1, w2);
        }
        return cfg.integrator.activation ? leaky_relu(r, slope) : r;
    };
    RhsFactory factory;
    if (cfg.integrator.refresh == GraphRefresh::PerStep) {
        factory = [&](const OdeState& start) {
            auto [s, vals] =
                detail::variant_adjacency(cfg.variant, start.p, start.z, params, cfg);
            return RhsFn([&, s = std::move(s), vals](double, const Tensor& z) {
                return rhs_with(s, vals, z);
            });
        };
    } else {
        factory = [&](const OdeState& start) {
            Tensor pc = start.p;
            return RhsFn([&, pc](double, const Tensor& z) {
                auto [s, vals] = detail::variant_adjacency(cfg.variant, pc, z, params, cfg);
                return rhs_with(s, vals, z);
            });
        };
    }
    OdeState s0;
    s0.t = 0.0;
    s0.z = z0;
    s0.p = p;
    auto states = integrate_with_snapshots(s0, factory, cfg.integrator, fractions);
    std::vector<PointCloud> out;
    out.reserve(states.size());
    for (const auto& st : states) {
        Tensor disp = add(matmul(st.z, params.head_w), params.head_b);
        out.push_back(from_tensor(add(points, disp), noisy.name));
    }
    return out;
}

}  // namespace gdflow
