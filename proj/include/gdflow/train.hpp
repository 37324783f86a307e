#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "gdflow/metrics.hpp"
#include "gdflow/model.hpp"

// Optimization loop: Adam with bias correction, plateau learning-rate
// schedule, per-iteration patch/noise sampling, validation and checkpoints.

namespace gdflow {

enum class LossMode { Supervised, Unsupervised };

inline LossMode parse_loss_mode(const std::string& s) {
    if (s == "supervised") return LossMode::Supervised;
    if (s == "unsupervised") return LossMode::Unsupervised;
    throw UsageError("unknown loss_mode '" + s + "'");
}

struct TrainConfig {
    double lr_init = 1e-3;
    double lr_min = 1e-6;
    int64_t plateau_patience = 5;
    double plateau_factor = 0.5;
    int64_t batch_size = 4;
    int64_t iterations = 0;
    double sigma_lo = 0.01, sigma_hi = 0.03;
    LossMode loss_mode = LossMode::Supervised;
    uint64_t seed = 0;
    int64_t patch_size = 1024;
    int64_t val_interval = 25;
    double clip_norm = 5.0;  // 0 disables clipping
    double adam_beta1 = 0.9, adam_beta2 = 0.999, adam_eps = 1e-8;

    void validate() const {
        if (lr_min > lr_init) throw ValueError("lr_min must be <= lr_init");
        if (plateau_factor <= 0.0 || plateau_factor >= 1.0)
            throw ValueError("plateau_factor must be in (0,1)");
        if (batch_size < 1 || patch_size < 1 || val_interval < 1)
            throw ValueError("batch_size, patch_size and val_interval must be >= 1");
        if (iterations < 0) throw ValueError("iterations must be >= 0");
        if (sigma_lo < 0.0 || sigma_hi < sigma_lo) throw ValueError("bad sigma_range");
    }
};

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
    struct Moments {
        std::vector<double> m, v;
    };
    std::map<std::string, Moments> moments;
    int64_t t = 0;
};

// One bias-corrected Adam update over the named parameter set; gradients are
// read from the tensors' accumulated grads (missing grad = zero).
inline void adam_step(const std::vector<std::pair<std::string, Tensor>>& params, AdamState& state,
                      double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
    state.t += 1;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
    for (const auto& [name, tensor] : params) {
        auto& mom = state.moments[name];
        if (mom.m.empty()) {
            mom.m.assign(tensor.size(), 0.0);
            mom.v.assign(tensor.size(), 0.0);
        }
        const bool has = tensor.has_grad();
        Tensor& t = const_cast<Tensor&>(tensor);
        for (int64_t i = 0; i < tensor.size(); ++i) {
            const double g = has ? tensor.grad()[i] : 0.0;
            if (!std::isfinite(g))
                throw TrainingError("non-finite gradient in parameter " + name);
            mom.m[i] = beta1 * mom.m[i] + (1.0 - beta1) * g;
            mom.v[i] = beta2 * mom.v[i] + (1.0 - beta2) * g * g;
            const double mhat = mom.m[i] / bc1;
            const double vhat = mom.v[i] / bc2;
            t.mutable_data()[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

// Pure function of the validation history: each entry that fails to improve
// the best loss by >= 1e-6 relative counts toward the patience; every firing
// multiplies the rate by plateau_factor, floored at lr_min.
inline double plateau_lr(const std::vector<double>& history, const TrainConfig& cfg) {
    double lr = cfg.lr_init;
    double best = std::numeric_limits<double>::infinity();
    int64_t stall = 0;
    for (double v : history) {
        if (v < best * (1.0 - 1e-6)) {
            best = v;
            stall = 0;
        } else {
            ++stall;
            if (stall >= cfg.plateau_patience) {
                lr = std::max(lr * cfg.plateau_factor, cfg.lr_min);
                stall = 0;
            }
        }
    }
    return lr;
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainResult {
    double initial_val_cd = 0.0;
    double best_val_cd = 0.0;
    double final_val_cd = 0.0;
    int64_t iterations = 0;
};

struct TrainSinks {
    // called with (is_best) when a checkpoint should be persisted
    std::function<void(const ModelParams&, bool is_best)> checkpoint;
    // one CSV line per iteration: iter,loss,lr,val_cd
    std::function<void(const std::string&)> log_line;
};

namespace detail {

struct ValItem {
    PointCloud noisy, clean;
};

inline double validation_cd(const std::vector<ValItem>& items, const ModelParams& params,
                            const ModelConfig& cfg) {
    double acc = 0.0;
    for (const auto& it : items) {
        PointCloud out = forward(it.noisy, params, cfg);
        acc += chamfer(out, it.clean) / static_cast<double>(items.size());
    }
    return acc;
}

}  // namespace detail

inline TrainResult train(const ModelConfig& cfg, ModelParams& params,
                         const std::vector<PointCloud>& train_clouds,
                         const std::vector<PointCloud>& val_clouds, const TrainConfig& tcfg,
                         const TrainSinks& sinks = {}) {
    cfg.validate();
    tcfg.validate();
    if (train_clouds.empty() || val_clouds.empty())
        throw ValueError("train requires nonempty train and validation sets");
    for (const auto& pc : train_clouds)
        if (pc.size() < tcfg.patch_size)
            throw ValueError("training cloud smaller than patch_size");

    Rng rng(tcfg.seed);

    // fixed validation set: two patches per held-out cloud at the mid sigma
    const double sigma_mid = 0.5 * (tcfg.sigma_lo + tcfg.sigma_hi);
    std::vector<detail::ValItem> val_items;
    for (size_t ci = 0; ci < val_clouds.size(); ++ci) {
        const int64_t ps = std::min<int64_t>(tcfg.patch_size, val_clouds[ci].size());
        auto patches = extract_patches(val_clouds[ci], ps, 2, tcfg.seed ^ (0x9e3779b9u + ci));
        for (size_t pi = 0; pi < patches.size(); ++pi) {
            detail::ValItem item;
            item.clean = patches[pi];
            item.noisy =
                add_noise(patches[pi], {sigma_mid, tcfg.seed ^ (0x7f4a7c15u + 31 * ci + pi)});
            val_items.push_back(std::move(item));
        }
    }

    params.set_requires_grad(true);
    auto named = params.named();

    AdamState adam;
    std::vector<double> val_history;
    const double initial_val = detail::validation_cd(val_items, params, cfg);
    val_history.push_back(initial_val);
    double best_val = initial_val;
    double last_val = initial_val;
    if (sinks.checkpoint) sinks.checkpoint(params, true);

    std::uniform_int_distribution<size_t> pick_cloud(0, train_clouds.size() - 1);
    std::uniform_real_distribution<double> pick_sigma(tcfg.sigma_lo, tcfg.sigma_hi);

    for (int64_t iter = 1; iter <= tcfg.iterations; ++iter) {
        const double lr = plateau_lr(val_history, tcfg);

        for (auto& [name, t] : named) const_cast<Tensor&>(t).clear_grad();

        Tape tape;
        double loss_value = 0.0;
        {
            Tape::Scope scope(tape);
            Tensor loss = Tensor::scalar(0.0);
            for (int64_t b = 0; b < tcfg.batch_size; ++b) {
                const auto& cloud = train_clouds[pick_cloud(rng)];
                const uint64_t patch_seed = rng();
                const double sigma = pick_sigma(rng);
                const uint64_t noise_seed = rng();
                PointCloud clean = extract_patches(cloud, tcfg.patch_size, 1, patch_seed)[0];
                PointCloud noisy = add_noise(clean, {sigma, noise_seed});
                Tensor out = forward_points(to_tensor(noisy), params, cfg);
                Tensor item_loss;
                if (tcfg.loss_mode == LossMode::Supervised) {
                    item_loss = supervised_loss(out, to_tensor(clean));
                } else {
                    const double sigma_abs = sigma * bbox_diagonal(clean);
                    item_loss =
                        unsupervised_loss(out, to_tensor(noisy), sigma_abs, 0.01, cfg.k);
                }
                loss = add(loss, mul(item_loss, Tensor::scalar(1.0 / tcfg.batch_size)));
            }
            loss_value = loss.item();
            if (!std::isfinite(loss_value))
                throw TrainingError("divergence: non-finite loss at iteration " +
                                    std::to_string(iter));
            tape.backward(loss);
        }

        if (tcfg.clip_norm > 0.0) {
            double norm2 = 0.0;
            for (auto& [name, t] : named)
                if (t.has_grad())
                    for (double g : t.grad()) norm2 += g * g;
            const double norm = std::sqrt(norm2);
            if (norm > tcfg.clip_norm) {
                const double scale = tcfg.clip_norm / norm;
                for (auto& [name, t] : named)
                    if (t.has_grad()) {
                        auto& g = const_cast<std::vector<double>&>(t.grad());
                        for (double& v : g) v *= scale;
                    }
            }
        }

        adam_step(named, adam, lr, tcfg.adam_beta1, tcfg.adam_beta2, tcfg.adam_eps);

        if (iter % tcfg.val_interval == 0 || iter == tcfg.iterations) {
            last_val = detail::validation_cd(val_items, params, cfg);
            val_history.push_back(last_val);
            if (last_val < best_val) {
                best_val = last_val;
                if (sinks.checkpoint) sinks.checkpoint(params, true);
            }
        }

        if (sinks.log_line) {
            char buf[160];
            std::snprintf(buf, sizeof(buf), "%lld,%.9e,%.3e,%.9e",
                          static_cast<long long>(iter), loss_value, lr, last_val);
            sinks.log_line(buf);
        }
    }

    if (sinks.checkpoint) sinks.checkpoint(params, false);
    TrainResult res;
    res.initial_val_cd = initial_val;
    res.best_val_cd = best_val;
    res.final_val_cd = last_val;
    res.iterations = tcfg.iterations;
    return res;
}

}  // namespace gdflow
