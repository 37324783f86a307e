#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "gdflow/common.hpp"

// Dense 64-bit tensors with tape-based reverse-mode differentiation.
// Forward evaluation never mutates inputs; operations record a VJP onto the
// ambient tape whenever an input requires grad and a tape is active.

namespace gdflow {

using Shape = std::vector<int64_t>;

inline int64_t shape_size(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

// Test fixture hook: when set to an op name, that op records a corrupted VJP.
// Used by the selftest gradient suite to prove it detects bad gradients.
inline std::string& broken_vjp_hook() {
    static std::string name;
    return name;
}

namespace detail {

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::optional<std::vector<double>> grad;

    int64_t size() const { return static_cast<int64_t>(data.size()); }
    void accumulate_grad(const std::vector<double>& g) {
        if (!grad) grad.emplace(data.size(), 0.0);
        for (size_t i = 0; i < g.size(); ++i) (*grad)[i] += g[i];
    }
};

using ImplPtr = std::shared_ptr<TensorImpl>;

}  // namespace detail

class Tensor {
  public:
    Tensor() : impl_(std::make_shared<detail::TensorImpl>()) {
        impl_->shape = {};
        impl_->data = {0.0};
    }
    Tensor(Shape shape, std::vector<double> data) : impl_(std::make_shared<detail::TensorImpl>()) {
        if (shape_size(shape) != static_cast<int64_t>(data.size()))
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        impl_->shape = std::move(shape);
        impl_->data = std::move(data);
    }

    static Tensor scalar(double v) { return Tensor({}, {v}); }
    static Tensor zeros(Shape shape) {
        auto n = shape_size(shape);
        return Tensor(std::move(shape), std::vector<double>(n, 0.0));
    }
    static Tensor full(Shape shape, double v) {
        auto n = shape_size(shape);
        return Tensor(std::move(shape), std::vector<double>(n, v));
    }
    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0) {
        auto n = shape_size(shape);
        std::vector<double> d(n);
        std::normal_distribution<double> dist(0.0, 1.0);
        for (auto& x : d) x = stddev * dist(rng);
        return Tensor(std::move(shape), std::move(d));
    }
    static Tensor identity(int64_t n) {
        Tensor t = zeros({n, n});
        for (int64_t i = 0; i < n; ++i) t.impl_->data[i * n + i] = 1.0;
        return t;
    }

    const Shape& shape() const { return impl_->shape; }
    int64_t rank() const { return static_cast<int64_t>(impl_->shape.size()); }
    int64_t size() const { return impl_->size(); }
    int64_t dim(int64_t i) const { return impl_->shape[i]; }

    const std::vector<double>& values() const { return impl_->data; }
    const double* data() const { return impl_->data.data(); }
    double* mutable_data() { return impl_->data.data(); }

    double item() const {
        if (size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
        return impl_->data[0];
    }

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool v) {
        impl_->requires_grad = v;
        return *this;
    }
    bool has_grad() const { return impl_->grad.has_value(); }
    const std::vector<double>& grad() const {
        if (!impl_->grad) throw ValueError("tensor has no gradient");
        return *impl_->grad;
    }
    void clear_grad() { impl_->grad.reset(); }

    bool all_finite() const {
        for (double v : impl_->data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    detail::ImplPtr impl() const { return impl_; }

  private:
    detail::ImplPtr impl_;
};

// ---------------------------------------------------------------------------
// Tape

class Tape {
  public:
    struct Entry {
        detail::ImplPtr output;
        std::function<void(const std::vector<double>&)> vjp;
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    class Scope {
      public:
        explicit Scope(Tape& t) : prev_(active_ref()) { active_ref() = &t; }
        ~Scope() { active_ref() = prev_; }

      private:
        Tape* prev_;
    };

    static Tape* active() { return active_ref(); }

    void record(detail::ImplPtr output, std::function<void(const std::vector<double>&)> vjp) {
        entries_.push_back({std::move(output), std::move(vjp)});
    }

    size_t num_entries() const { return entries_.size(); }

    // Reverse replay. Consumable once; gradients accumulate into every tensor
    // reachable backwards from the loss.
    void backward(const Tensor& loss) {
        if (consumed_) throw ValueError("tape already consumed by a backward pass");
        if (loss.size() != 1) throw ValueError("backward requires a scalar loss");
        consumed_ = true;
        loss.impl()->accumulate_grad({1.0});
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
            if (!it->output->grad) continue;
            it->vjp(*it->output->grad);
        }
    }

  private:
    static Tape*& active_ref() {
        thread_local Tape* t = nullptr;
        return t;
    }
    std::vector<Entry> entries_;
    bool consumed_ = false;
};

namespace detail {

inline bool tracked(const Tensor& t) { return t.requires_grad(); }

inline bool recording(std::initializer_list<const Tensor*> inputs) {
    if (!Tape::active()) return false;
    for (const Tensor* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

inline double vjp_scale(const char* op) {
    const std::string& broken = broken_vjp_hook();
    if (broken.empty() || broken != op) return 1.0;
    return 1.5;  // deliberately wrong, for the selftest fixture
}

// --- broadcasting helpers (trailing-dimension alignment) -------------------

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
    const size_t ra = a.size(), rb = b.size(), r = std::max(ra, rb);
    Shape out(r);
    for (size_t i = 0; i < r; ++i) {
        const int64_t da = i < ra ? a[ra - 1 - i] : 1;
        const int64_t db = i < rb ? b[rb - 1 - i] : 1;
        if (da != db && da != 1 && db != 1)
            throw ShapeError("shapes " + shape_str(a) + " and " + shape_str(b) +
                             " are not broadcastable");
        out[r - 1 - i] = std::max(da, db);
    }
    return out;
}

// Row-major strides with zeros on broadcast axes, aligned to `out` rank.
inline std::vector<int64_t> broadcast_strides(const Shape& s, const Shape& out) {
    const size_t r = out.size(), rs = s.size();
    std::vector<int64_t> strides(r, 0);
    int64_t acc = 1;
    for (size_t i = 0; i < rs; ++i) {
        const size_t ax = rs - 1 - i;
        strides[r - 1 - i] = (s[ax] == 1 && out[r - 1 - i] != 1) ? 0 : acc;
        acc *= s[ax];
    }
    return strides;
}

template <class F>
void broadcast_binary(const std::vector<double>& a, const Shape& sa, const std::vector<double>& b,
                      const Shape& sb, const Shape& so, std::vector<double>& out, F&& f) {
    const int64_t n = shape_size(so);
    out.resize(n);
    if (sa == sb) {  // fast path
        for (int64_t i = 0; i < n; ++i) out[i] = f(a[i], b[i]);
        return;
    }
    if (b.size() == 1 && static_cast<int64_t>(a.size()) == n) {
        const double bv = b[0];
        for (int64_t i = 0; i < n; ++i) out[i] = f(a[i], bv);
        return;
    }
    if (a.size() == 1 && static_cast<int64_t>(b.size()) == n) {
        const double av = a[0];
        for (int64_t i = 0; i < n; ++i) out[i] = f(av, b[i]);
        return;
    }
    const auto stra = broadcast_strides(sa, so);
    const auto strb = broadcast_strides(sb, so);
    const size_t r = so.size();
    std::vector<int64_t> coord(r, 0);
    int64_t ia = 0, ib = 0;
    for (int64_t i = 0; i < n; ++i) {
        out[i] = f(a[ia], b[ib]);
        for (size_t ax = r; ax-- > 0;) {
            ++coord[ax];
            ia += stra[ax];
            ib += strb[ax];
            if (coord[ax] < so[ax]) break;
            coord[ax] = 0;
            ia -= stra[ax] * so[ax];
            ib -= strb[ax] * so[ax];
        }
    }
}

// Sum `g` (laid out as `gshape`) down to `target` for broadcast-input VJPs.
inline std::vector<double> reduce_grad_to(const std::vector<double>& g, const Shape& gshape,
                                          const Shape& target) {
    if (gshape == target) return g;
    std::vector<double> out(shape_size(target), 0.0);
    const auto strides = broadcast_strides(target, gshape);
    const size_t r = gshape.size();
    std::vector<int64_t> coord(r, 0);
    int64_t it = 0;
    const int64_t n = shape_size(gshape);
    for (int64_t i = 0; i < n; ++i) {
        out[it] += g[i];
        for (size_t ax = r; ax-- > 0;) {
            ++coord[ax];
            it += strides[ax];
            if (coord[ax] < gshape[ax]) break;
            coord[ax] = 0;
            it -= strides[ax] * gshape[ax];
        }
    }
    return out;
}

inline Tensor make_output(Shape shape, std::vector<double> data, bool track) {
    Tensor t(std::move(shape), std::move(data));
    if (track) t.set_requires_grad(true);
    return t;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise operations

namespace detail {

template <class Fwd, class Vjp>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, Fwd&& f, Vjp&& make_vjp) {
    const Shape so = broadcast_shape(a.shape(), b.shape());
    std::vector<double> out;
    broadcast_binary(a.values(), a.shape(), b.values(), b.shape(), so, out, f);
    const bool rec = recording({&a, &b});
    Tensor r = make_output(so, std::move(out), rec);
    if (rec) make_vjp(r);
    return r;
}

// Evaluates `f(av, bv, gv)` to produce the two partials times gv.
template <class DfA, class DfB>
void record_binary_vjp(const char* name, const Tensor& a, const Tensor& b, const Tensor& r,
                       DfA&& dfa, DfB&& dfb) {
    auto ai = a.impl(), bi = b.impl(), ri = r.impl();
    const Shape so = r.shape();
    const double scale = vjp_scale(name);
    const bool need_a = a.requires_grad(), need_b = b.requires_grad();
    Tape::active()->record(ri, [=](const std::vector<double>& g) {
        if (need_a) {
            std::vector<double> ga;
            broadcast_binary(ai->data, ai->shape, bi->data, bi->shape, so, ga, dfa);
            for (size_t i = 0; i < ga.size(); ++i) ga[i] *= g[i] * scale;
            ai->accumulate_grad(reduce_grad_to(ga, so, ai->shape));
        }
        if (need_b) {
            std::vector<double> gb;
            broadcast_binary(ai->data, ai->shape, bi->data, bi->shape, so, gb, dfb);
            for (size_t i = 0; i < gb.size(); ++i) gb[i] *= g[i] * scale;
            bi->accumulate_grad(reduce_grad_to(gb, so, bi->shape));
        }
    });
}

template <class Fwd, class Df>
Tensor unary_op(const char* name, const Tensor& a, Fwd&& f, Df&& df) {
    const int64_t n = a.size();
    std::vector<double> out(n);
    for (int64_t i = 0; i < n; ++i) out[i] = f(a.values()[i]);
    const bool rec = recording({&a});
    Tensor r = make_output(a.shape(), std::move(out), rec);
    if (rec) {
        auto ai = a.impl();
        auto ri = r.impl();
        const double scale = vjp_scale(name);
        Tape::active()->record(ri, [=](const std::vector<double>& g) {
            std::vector<double> ga(g.size());
            for (size_t i = 0; i < g.size(); ++i) ga[i] = scale * g[i] * df(ai->data[i]);
            ai->accumulate_grad(ga);
        });
    }
    return r;
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        "add", a, b, [](double x, double y) { return x + y; },
        [&](const Tensor& r) {
            detail::record_binary_vjp(
                "add", a, b, r, [](double, double) { return 1.0; },
                [](double, double) { return 1.0; });
        });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        "sub", a, b, [](double x, double y) { return x - y; },
        [&](const Tensor& r) {
            detail::record_binary_vjp(
                "sub", a, b, r, [](double, double) { return 1.0; },
                [](double, double) { return -1.0; });
        });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        "mul", a, b, [](double x, double y) { return x * y; },
        [&](const Tensor& r) {
            detail::record_binary_vjp(
                "mul", a, b, r, [](double, double y) { return y; },
                [](double x, double) { return x; });
        });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
    for (double v : b.values())
        if (v == 0.0) throw ComputationError("division by exact zero");
    return detail::binary_op(
        "div", a, b, [](double x, double y) { return x / y; },
        [&](const Tensor& r) {
            detail::record_binary_vjp(
                "div", a, b, r, [](double, double y) { return 1.0 / y; },
                [](double x, double y) { return -x / (y * y); });
        });
}

// Ties give the gradient to the first argument.
inline Tensor maximum(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        "maximum", a, b, [](double x, double y) { return x >= y ? x : y; },
        [&](const Tensor& r) {
            detail::record_binary_vjp(
                "maximum", a, b, r, [](double x, double y) { return x >= y ? 1.0 : 0.0; },
                [](double x, double y) { return x >= y ? 0.0 : 1.0; });
        });
}

inline Tensor minimum_of(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        "minimum_of", a, b, [](double x, double y) { return x <= y ? x : y; },
        [&](const Tensor& r) {
            detail::record_binary_vjp(
                "minimum_of", a, b, r, [](double x, double y) { return x <= y ? 1.0 : 0.0; },
                [](double x, double y) { return x <= y ? 0.0 : 1.0; });
        });
}

inline Tensor negate(const Tensor& a) {
    return detail::unary_op(
        "negate", a, [](double x) { return -x; }, [](double) { return -1.0; });
}

inline Tensor exp(const Tensor& a) {
    return detail::unary_op(
        "exp", a, [](double x) { return std::exp(x); }, [](double x) { return std::exp(x); });
}

inline Tensor sqrt(const Tensor& a) {
    return detail::unary_op(
        "sqrt", a, [](double x) { return std::sqrt(x); },
        [](double x) { return 0.5 / std::sqrt(x); });
}

inline Tensor square(const Tensor& a) {
    return detail::unary_op(
        "square", a, [](double x) { return x * x; }, [](double x) { return 2.0 * x; });
}

// Gradient at 0 follows the negative-side slope.
inline Tensor leaky_relu(const Tensor& a, double slope = 0.01) {
    return detail::unary_op(
        "leaky_relu", a, [slope](double x) { return x > 0 ? x : slope * x; },
        [slope](double x) { return x > 0 ? 1.0 : slope; });
}

inline Tensor softplus(const Tensor& a) {
    return detail::unary_op(
        "softplus", a, [](double x) { return x > 35.0 ? x : std::log1p(std::exp(x)); },
        [](double x) { return 1.0 / (1.0 + std::exp(-x)); });
}

inline Tensor clamp_min(const Tensor& a, double floor) {
    return detail::unary_op(
        "clamp_min", a, [floor](double x) { return x >= floor ? x : floor; },
        [floor](double x) { return x >= floor ? 1.0 : 0.0; });
}

// mask selects a (true) or b (false), elementwise on equal shapes.
inline Tensor where_mask(const std::vector<uint8_t>& mask, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape() || static_cast<int64_t>(mask.size()) != a.size())
        throw ShapeError("where_mask expects equal shapes");
    const int64_t n = a.size();
    std::vector<double> out(n);
    for (int64_t i = 0; i < n; ++i) out[i] = mask[i] ? a.values()[i] : b.values()[i];
    const bool rec = detail::recording({&a, &b});
    Tensor r = detail::make_output(a.shape(), std::move(out), rec);
    if (rec) {
        auto ai = a.impl(), bi = b.impl(), ri = r.impl();
        const bool na = a.requires_grad(), nb = b.requires_grad();
        auto m = mask;
        Tape::active()->record(ri, [=](const std::vector<double>& g) {
            if (na) {
                std::vector<double> ga(g.size(), 0.0);
                for (size_t i = 0; i < g.size(); ++i)
                    if (m[i]) ga[i] = g[i];
                ai->accumulate_grad(ga);
            }
            if (nb) {
                std::vector<double> gb(g.size(), 0.0);
                for (size_t i = 0; i < g.size(); ++i)
                    if (!m[i]) gb[i] = g[i];
                bi->accumulate_grad(gb);
            }
        });
    }
    return r;
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator-(const Tensor& a) { return negate(a); }
inline Tensor operator*(double s, const Tensor& a) { return mul(Tensor::scalar(s), a); }
inline Tensor operator*(const Tensor& a, double s) { return mul(a, Tensor::scalar(s)); }
inline Tensor operator+(const Tensor& a, double s) { return add(a, Tensor::scalar(s)); }
inline Tensor operator-(const Tensor& a, double s) { return sub(a, Tensor::scalar(s)); }

// ---------------------------------------------------------------------------
// Matrix multiply (batched, leading dimensions broadcast)

namespace detail {

inline void gemm_acc(const double* a, const double* b, double* c, int64_t m, int64_t k,
                     int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        double* crow = c + i * n;
        const double* arow = a + i * k;
        for (int64_t kk = 0; kk < k; ++kk) {
            const double av = arow[kk];
            if (av == 0.0) continue;
            const double* brow = b + kk * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C(m,n) += A(k,m)^T B(k,n)
inline void gemm_at_b(const double* a, const double* b, double* c, int64_t m, int64_t k,
                      int64_t n) {
    for (int64_t kk = 0; kk < k; ++kk) {
        const double* arow = a + kk * m;
        const double* brow = b + kk * n;
        for (int64_t i = 0; i < m; ++i) {
            const double av = arow[i];
            if (av == 0.0) continue;
            double* crow = c + i * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C(m,n) += A(m,k) B(n,k)^T
inline void gemm_a_bt(const double* a, const double* b, double* c, int64_t m, int64_t k,
                      int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (int64_t j = 0; j < n; ++j) {
            const double* brow = b + j * k;
            double acc = 0.0;
            for (int64_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
            crow[j] += acc;
        }
    }
}

struct MatmulPlan {
    Shape batch;          // broadcast batch shape
    Shape out_shape;      // batch + {m, n}
    int64_t m, k, n, nb;  // nb = number of batch instances
    std::vector<int64_t> a_off, b_off;
};

inline MatmulPlan matmul_plan(const Shape& sa, const Shape& sb) {
    if (sa.size() < 2 || sb.size() < 2)
        throw ShapeError("matmul operands must have rank >= 2, got " + shape_str(sa) + " x " +
                         shape_str(sb));
    MatmulPlan p;
    p.m = sa[sa.size() - 2];
    p.k = sa[sa.size() - 1];
    const int64_t kb = sb[sb.size() - 2];
    p.n = sb[sb.size() - 1];
    if (p.k != kb)
        throw ShapeError("matmul inner dimensions disagree: " + shape_str(sa) + " x " +
                         shape_str(sb));
    Shape ba(sa.begin(), sa.end() - 2), bb(sb.begin(), sb.end() - 2);
    p.batch = broadcast_shape(ba, bb);
    p.nb = shape_size(p.batch);
    p.out_shape = p.batch;
    p.out_shape.push_back(p.m);
    p.out_shape.push_back(p.n);
    const auto stra = broadcast_strides(ba, p.batch);
    const auto strb = broadcast_strides(bb, p.batch);
    p.a_off.resize(p.nb);
    p.b_off.resize(p.nb);
    const size_t r = p.batch.size();
    std::vector<int64_t> coord(r, 0);
    int64_t ia = 0, ib = 0;
    for (int64_t i = 0; i < p.nb; ++i) {
        p.a_off[i] = ia * p.m * p.k;
        p.b_off[i] = ib * kb * p.n;
        for (size_t ax = r; ax-- > 0;) {
            ++coord[ax];
            ia += stra[ax];
            ib += strb[ax];
            if (coord[ax] < p.batch[ax]) break;
            coord[ax] = 0;
            ia -= stra[ax] * p.batch[ax];
            ib -= strb[ax] * p.batch[ax];
        }
    }
    return p;
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    const auto p = detail::matmul_plan(a.shape(), b.shape());
    std::vector<double> out(shape_size(p.out_shape), 0.0);
    const double* ad = a.data();
    const double* bd = b.data();
    double* od = out.data();
    parallel_for(p.nb, [&](int64_t i) {
        detail::gemm_acc(ad + p.a_off[i], bd + p.b_off[i], od + i * p.m * p.n, p.m, p.k, p.n);
    });
    const bool rec = detail::recording({&a, &b});
    Tensor r = detail::make_output(p.out_shape, std::move(out), rec);
    if (rec) {
        auto ai = a.impl(), bi = b.impl(), ri = r.impl();
        const bool na = a.requires_grad(), nb = b.requires_grad();
        const double scale = detail::vjp_scale("matmul");
        Tape::active()->record(ri, [=](const std::vector<double>& g) {
            // da = g . b^T, db = a^T . g, each reduced over broadcast batches.
            if (na) {
                Shape full = p.batch;
                full.push_back(p.m);
                full.push_back(p.k);
                std::vector<double> ga(shape_size(full), 0.0);
                for (int64_t i = 0; i < p.nb; ++i)
                    detail::gemm_a_bt(g.data() + i * p.m * p.n, bi->data.data() + p.b_off[i],
                                      ga.data() + i * p.m * p.k, p.m, p.n, p.k);
                if (scale != 1.0)
                    for (auto& v : ga) v *= scale;
                ai->accumulate_grad(detail::reduce_grad_to(ga, full, ai->shape));
            }
            if (nb) {
                Shape full = p.batch;
                full.push_back(p.k);
                full.push_back(p.n);
                std::vector<double> gb(shape_size(full), 0.0);
                for (int64_t i = 0; i < p.nb; ++i)
                    detail::gemm_at_b(ai->data.data() + p.a_off[i], g.data() + i * p.m * p.n,
                                      gb.data() + i * p.k * p.n, p.k, p.m, p.n);
                if (scale != 1.0)
                    for (auto& v : gb) v *= scale;
                bi->accumulate_grad(detail::reduce_grad_to(gb, full, bi->shape));
            }
        });
    }
    return r;
}

inline Tensor transpose_last(const Tensor& a) {
    if (a.rank() < 2) throw ShapeError("transpose_last needs rank >= 2");
    Shape so = a.shape();
    std::swap(so[so.size() - 1], so[so.size() - 2]);
    const int64_t m = a.shape()[a.rank() - 2], n = a.shape()[a.rank() - 1];
    const int64_t nb = a.size() / (m * n);
    std::vector<double> out(a.size());
    for (int64_t b = 0; b < nb; ++b) {
        const double* src = a.data() + b * m * n;
        double* dst = out.data() + b * m * n;
        for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < n; ++j) dst[j * m + i] = src[i * n + j];
    }
    const bool rec = detail::recording({&a});
    Tensor r = detail::make_output(so, std::move(out), rec);
    if (rec) {
        auto ai = a.impl(), ri = r.impl();
        Tape::active()->record(ri, [=](const std::vector<double>& g) {
            std::vector<double> ga(g.size());
            for (int64_t b = 0; b < nb; ++b) {
                const double* src = g.data() + b * m * n;
                double* dst = ga.data() + b * m * n;
                for (int64_t j = 0; j < n; ++j)
                    for (int64_t i = 0; i < m; ++i) dst[i * n + j] = src[j * m + i];
            }
            ai->accumulate_grad(ga);
        });
    }
    return r;
}

// ---------------------------------------------------------------------------
// Shape ops

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_size(shape) != a.size())
        throw ShapeError("reshape from " + shape_str(a.shape()) + " to " + shape_str(shape));
    const bool rec = detail::recording({&a});
    Tensor r = detail::make_output(std::move(shape), a.values(), rec);
    if (rec) {
        auto ai = a.impl(), ri = r.impl();
        Tape::active()->record(ri,
                               [=](const std::vector<double>& g) { ai->accumulate_grad(g); });
    }
    return r;
}

inline Tensor expand(const Tensor& a, const Shape& shape) {
    const Shape so = detail::broadcast_shape(a.shape(), shape);
    if (so != shape)
        throw ShapeError("cannot expand " + shape_str(a.shape()) + " to " + shape_str(shape));
    std::vector<double> out;
    detail::broadcast_binary(a.values(), a.shape(), {0.0}, Shape{}, so, out,
                             [](double x, double) { return x; });
    const bool rec = detail::recording({&a});
    Tensor r = detail::make_output(so, std::move(out), rec);
    if (rec) {
        auto ai = a.impl(), ri = r.impl();
        Tape::active()->record(ri, [=](const std::vector<double>& g) {
            ai->accumulate_grad(detail::reduce_grad_to(g, so, ai->shape));
        });
    }
    return r;
}

inline Tensor concat(const std::vector<Tensor>& parts, int64_t axis) {
    if (parts.empty()) throw ShapeError("concat of zero tensors");
    const int64_t r = parts[0].rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw ShapeError("concat axis out of range");
    Shape so = parts[0].shape();
    int64_t total = 0;
    for (const auto& p : parts) {
        if (p.rank() != r) throw ShapeError("concat rank mismatch");
        for (int64_t i = 0; i < r; ++i)
            if (i != axis && p.shape()[i] != so[i]) throw ShapeError("concat shape mismatch");
        total += p.shape()[axis];
    }
    so[axis] = total;
    int64_t outer = 1, inner = 1;
    for (int64_t i = 0; i < axis; ++i) outer *= so[i];
    for (int64_t i = axis + 1; i < r; ++i) inner *= so[i];
    std::vector<double> out(shape_size(so));
    std::vector<int64_t> offsets(parts.size());
    {
        int64_t off = 0;
        for (size_t p = 0; p < parts.size(); ++p) {
            offsets[p] = off;
            const int64_t rows = parts[p].shape()[axis];
            for (int64_t o = 0; o < outer; ++o)
                std::copy_n(parts[p].data() + o * rows * inner, rows * inner,
                            out.data() + (o * total + off) * inner);
            off += rows;
        }
    }
    bool rec = false;
    if (Tape::active())
        for (const auto& p : parts)
            if (p.requires_grad()) rec = true;
    Tensor rt = detail::make_output(so, std::move(out), rec);
    if (rec) {
        std::vector<detail::ImplPtr> impls;
        std::vector<bool> need;
        for (const auto& p : parts) {
            impls.push_back(p.impl());
            need.push_back(p.requires_grad());
        }
        auto ri = rt.impl();
        Tape::active()->record(ri, [=](const std::vector<double>& g) {
            for (size_t p = 0; p < impls.size(); ++p) {
                if (!need[p]) continue;
                const int64_t rows = impls[p]->shape[axis];
                std::vector<double> gp(static_cast<size_t>(outer) * rows * inner);
                for (int64_t o = 0; o < outer; ++o)
                    std::copy_n(g.data() + (o * total + offsets[p]) * inner, rows * inner,
                                gp.data() + o * rows * inner);
                impls[p]->accumulate_grad(gp);
            }
        });
    }
    return rt;
}

inline Tensor narrow(const Tensor& a, int64_t axis, int64_t start, int64_t len) {
    const int64_t r = a.rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw ShapeError("narrow axis out of range");
    if (start < 0 || len < 1 || start + len > a.shape()[axis])
        throw ShapeError("narrow range out of bounds");
    Shape so = a.shape();
    so[axis] = len;
    int64_t outer = 1, inner = 1;
    for (int64_t i = 0; i < axis; ++i) outer *= a.shape()[i];
    for (int64_t i = axis + 1; i < r; ++i) inner *= a.shape()[i];
    const int64_t full = a.shape()[axis];
    std::vector<double> out(shape_size(so));
    for (int64_t o = 0; o < outer; ++o)
        std::copy_n(a.data() + (o * full + start) * inner, len * inner,
                    out.data() + o * len * inner);
    const bool rec = detail::recording({&a});
    Tensor rt = detail::make_output(so, std::move(out), rec);
    if (rec) {
        auto ai = a.impl(), ri = rt.impl();
        Tape::active()->record(ri, [=](const std::vector<double>& g) {
            std::vector<double> ga(ai->data.size(), 0.0);
            for (int64_t o = 0; o < outer; ++o)
                std::copy_n(g.data() + o * len * inner, len * inner,
                            ga.data() + (o * full + start) * inner);
            ai->accumulate_grad(ga);
        });
    }
    return rt;
}

// ---------------------------------------------------------------------------
// Gather / reductions

// out[..., :] = a[idx[...], :]; indices are non-differentiable.
inline Tensor gather_rows(const Tensor& a, const std::vector<int64_t>& idx,
                          const Shape& idx_shape) {
    if (a.rank() < 1) throw ShapeError("gather_rows requires rank >= 1 source");
    if (shape_size(idx_shape) != static_cast<int64_t>(idx.size()))
        throw ShapeError("gather_rows index shape mismatch");
    const int64_t rows = a.shape()[0];
    const int64_t c = a.size() / std::max<int64_t>(rows, 1);
    for (int64_t i : idx)
        if (i < 0 || i >= rows)
            throw IndexError("gather index " + std::to_string(i) + " out of range [0," +
                             std::to_string(rows) + ")");
    Shape so = idx_shape;
    for (size_t i = 1; i < a.shape().size(); ++i) so.push_back(a.shape()[i]);
    std::vector<double> out(idx.size() * c);
    for (size_t t = 0; t < idx.size(); ++t)
        std::copy_n(a.data() + idx[t] * c, c, out.data() + t * c);
    const bool rec = detail::recording({&a});
    Tensor r = detail::make_output(so, std::move(out), rec);
    if (rec) {
        auto ai = a.impl(), ri = r.impl();
        auto ix = idx;
        const double scale = detail::vjp_scale("gather_rows");
        Tape::active()->record(ri, [=](const std::vector<double>& g) {
            std::vector<double> ga(ai->data.size(), 0.0);
            for (size_t t = 0; t < ix.size(); ++t) {
                double* dst = ga.data() + ix[t] * c;
                const double* src = g.data() + t * c;
                for (int64_t j = 0; j < c; ++j) dst[j] += scale * src[j];
            }
            ai->accumulate_grad(ga);
        });
    }
    return r;
}

enum class ReduceKind { Sum, Mean, Max, Min };

namespace detail {

inline Tensor reduce_impl(const char* opname, ReduceKind kind, const Tensor& a, int64_t axis,
                          bool keepdim) {
    const int64_t r = a.rank();
    if (axis < -1 || axis >= r) throw ShapeError("reduce axis out of range");
    // axis == -1 means reduce everything to a scalar.
    int64_t outer = 1, red = a.size(), inner = 1;
    Shape so;
    if (axis >= 0) {
        outer = 1;
        for (int64_t i = 0; i < axis; ++i) outer *= a.shape()[i];
        red = a.shape()[axis];
        inner = 1;
        for (int64_t i = axis + 1; i < r; ++i) inner *= a.shape()[i];
        so = a.shape();
        if (keepdim)
            so[axis] = 1;
        else
            so.erase(so.begin() + axis);
    } else {
        if (keepdim) so = Shape(static_cast<size_t>(r), 1);
    }
    const int64_t n_out = outer * inner;
    std::vector<double> out(std::max<int64_t>(n_out, 1));
    std::vector<int64_t> argsel;
    const bool is_sel = kind == ReduceKind::Max || kind == ReduceKind::Min;
    if (is_sel) argsel.resize(n_out);
    const double* ad = a.data();
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t in = 0; in < inner; ++in) {
            const int64_t base = o * red * inner + in;
            if (is_sel) {
                double best = ad[base];
                int64_t bi = 0;
                for (int64_t t = 1; t < red; ++t) {
                    const double v = ad[base + t * inner];
                    if ((kind == ReduceKind::Max && v > best) ||
                        (kind == ReduceKind::Min && v < best)) {
                        best = v;
                        bi = t;  // strict comparison: first occurrence wins ties
                    }
                }
                out[o * inner + in] = best;
                argsel[o * inner + in] = bi;
            } else {
                double acc = 0.0;
                for (int64_t t = 0; t < red; ++t) acc += ad[base + t * inner];
                out[o * inner + in] = kind == ReduceKind::Mean ? acc / red : acc;
            }
        }
    }
    const bool rec = recording({&a});
    Tensor rt = make_output(so, std::move(out), rec);
    if (rec) {
        auto ai = a.impl(), ri = rt.impl();
        const double scale = vjp_scale(opname);
        Tape::active()->record(ri, [=](const std::vector<double>& g) {
            std::vector<double> ga(ai->data.size(), 0.0);
            for (int64_t o = 0; o < outer; ++o) {
                for (int64_t in = 0; in < inner; ++in) {
                    const int64_t base = o * red * inner + in;
                    const double gv = scale * g[o * inner + in];
                    if (is_sel) {
                        ga[base + argsel[o * inner + in] * inner] += gv;
                    } else if (kind == ReduceKind::Mean) {
                        const double s = gv / red;
                        for (int64_t t = 0; t < red; ++t) ga[base + t * inner] += s;
                    } else {
                        for (int64_t t = 0; t < red; ++t) ga[base + t * inner] += gv;
                    }
                }
            }
            ai->accumulate_grad(ga);
        });
    }
    return rt;
}

}  // namespace detail

inline Tensor reduce_sum(const Tensor& a, int64_t axis = -1, bool keepdim = false) {
    return detail::reduce_impl("reduce_sum", ReduceKind::Sum, a, axis, keepdim);
}
inline Tensor reduce_mean(const Tensor& a, int64_t axis = -1, bool keepdim = false) {
    return detail::reduce_impl("reduce_mean", ReduceKind::Mean, a, axis, keepdim);
}
inline Tensor reduce_max(const Tensor& a, int64_t axis = -1, bool keepdim = false) {
    return detail::reduce_impl("reduce_max", ReduceKind::Max, a, axis, keepdim);
}
inline Tensor reduce_min(const Tensor& a, int64_t axis = -1, bool keepdim = false) {
    return detail::reduce_impl("reduce_min", ReduceKind::Min, a, axis, keepdim);
}

// ---------------------------------------------------------------------------
// Gradient checking

struct GradCheckReport {
    double max_rel_err = 0.0;
    int64_t worst_index = -1;
    bool pass = false;
    std::vector<double> analytic;
    std::vector<double> numeric;
};

// Central-difference check of reverse-mode gradients. `f` must be scalar-valued.
inline GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                                  double eps = 1e-5, double tol = 1e-4) {
    GradCheckReport rep;
    Tensor xv(x.shape(), x.values());
    xv.set_requires_grad(true);
    {
        Tape tape;
        Tape::Scope scope(tape);
        Tensor y = f(xv);
        if (y.size() != 1) throw ValueError("grad_check requires a scalar-valued function");
        tape.backward(y);
    }
    rep.analytic = xv.has_grad() ? xv.grad() : std::vector<double>(x.size(), 0.0);
    rep.numeric.resize(x.size());
    for (int64_t i = 0; i < x.size(); ++i) {
        Tensor xp(x.shape(), x.values());
        Tensor xm(x.shape(), x.values());
        xp.mutable_data()[i] += eps;
        xm.mutable_data()[i] -= eps;
        const double fp = f(xp).item();
        const double fm = f(xm).item();
        rep.numeric[i] = (fp - fm) / (2.0 * eps);
        const double a = rep.analytic[i], nmr = rep.numeric[i];
        const double denom = std::max({std::fabs(a), std::fabs(nmr), 1e-3});
        const double rel = std::fabs(a - nmr) / denom;
        if (rel > rep.max_rel_err) {
            rep.max_rel_err = rel;
            rep.worst_index = i;
        }
    }
    rep.pass = rep.max_rel_err <= tol;
    return rep;
}

}  // namespace gdflow
