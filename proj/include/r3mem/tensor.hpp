#pragma once

// Dense row-major tensors over float or double plus a tape for reverse-mode
// gradients. One tape per worker; precision is uniform within a graph because
// it is fixed by the template parameter. All ops are bit-deterministic for a
// given input: accumulation order is fixed, nothing is parallel.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "r3mem/errors.hpp"

namespace r3mem {

// NaN/Inf checks after every op. Default: on in debug builds, off in release.
inline bool & finite_check_flag() {
#ifdef NDEBUG
    static bool on = false;
#else
    static bool on = true;
#endif
    return on;
}
inline bool finite_checks_enabled() { return finite_check_flag(); }
inline void set_finite_checks(bool on) { finite_check_flag() = on; }

template <typename T> class GradTape;

template <typename T>
struct TensorData {
    std::vector<int> shape;
    std::vector<T>   val;
    std::vector<T>   grad;              // lazily sized during backward
    bool             requires_grad = false;
    bool             on_path       = false; // reachable from a watched leaf
    GradTape<T> *    tape          = nullptr;
};

template <typename T>
class Tensor {
  public:
    Tensor() : d_(std::make_shared<TensorData<T>>()) {}

    static Tensor zeros(std::vector<int> shape) {
        Tensor t;
        t.d_->shape = std::move(shape);
        t.d_->val.assign(t.count(t.d_->shape), T(0));
        return t;
    }
    static Tensor full(std::vector<int> shape, T v) {
        Tensor t = zeros(std::move(shape));
        std::fill(t.d_->val.begin(), t.d_->val.end(), v);
        return t;
    }
    static Tensor from(std::vector<int> shape, std::vector<T> data) {
        Tensor t;
        if (data.size() != t.count(shape)) {
            throw shape_error("tensor data size does not match shape");
        }
        t.d_->shape = std::move(shape);
        t.d_->val   = std::move(data);
        return t;
    }
    static Tensor scalar(T v) { return from({1}, {v}); }
    static Tensor randn(std::vector<int> shape, std::mt19937_64 & rng, double stddev) {
        Tensor t = zeros(std::move(shape));
        std::normal_distribution<double> dist(0.0, stddev);
        for (auto & x : t.d_->val) x = T(dist(rng));
        return t;
    }

    const std::vector<int> & shape() const { return d_->shape; }
    int    rank() const { return (int) d_->shape.size(); }
    int    dim(int i) const { return d_->shape[(size_t) i]; }
    size_t numel() const { return d_->val.size(); }
    // rows/cols view: rank-1 counts as a single row
    int rows() const { return rank() <= 1 ? 1 : dim(0); }
    int cols() const { return rank() == 0 ? 0 : dim(rank() - 1); }

    std::vector<T> &       data() { return d_->val; }
    const std::vector<T> & data() const { return d_->val; }
    T   at(int i) const { return d_->val[(size_t) i]; }
    T   at(int i, int j) const { return d_->val[(size_t) i * cols() + j]; }
    T & at(int i) { return d_->val[(size_t) i]; }
    T & at(int i, int j) { return d_->val[(size_t) i * cols() + j]; }

    bool requires_grad() const { return d_->requires_grad; }
    Tensor & set_requires_grad(bool v) {
        d_->requires_grad = v;
        return *this;
    }

    // value copy with no tape attachment
    Tensor detached_copy() const {
        Tensor t;
        t.d_->shape = d_->shape;
        t.d_->val   = d_->val;
        return t;
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> t;
        t.d_->shape = d_->shape;
        t.d_->val.resize(d_->val.size());
        for (size_t i = 0; i < d_->val.size(); ++i) t.d_->val[i] = (U) d_->val[i];
        return t;
    }

    std::shared_ptr<TensorData<T>> d_;

  private:
    static size_t count(const std::vector<int> & shape) {
        size_t n = 1;
        for (int d : shape) {
            if (d < 0) throw shape_error("negative dimension");
            n *= (size_t) d;
        }
        return n;
    }
};

// Records one backward closure per op. Append-only while the forward runs;
// destroying the tape detaches every tensor that touched it, so parameter
// tensors survive across steps.
template <typename T>
class GradTape {
  public:
    GradTape() = default;
    GradTape(const GradTape &) = delete;
    GradTape & operator=(const GradTape &) = delete;
    ~GradTape() {
        for (auto & s : touched_) {
            s->tape    = nullptr;
            s->on_path = false;
            s->grad.clear();
        }
    }

    // registers a leaf; gradients are collected only for requires_grad leaves
    void watch(Tensor<T> & t) {
        if (ran_) throw usage_error("tape already ran backward; it is append-only");
        if (t.d_->tape == this) return;
        if (t.d_->tape != nullptr) throw usage_error("tensor already watched by another tape");
        t.d_->tape    = this;
        t.d_->on_path = t.d_->requires_grad;
        touched_.push_back(t.d_);
        leaves_.push_back(t.d_);
    }

    void backward(const Tensor<T> & loss) {
        if (ran_) throw usage_error("backward already ran on this tape");
        if (loss.d_->tape != this) throw usage_error("loss tensor is not on this tape");
        if (loss.numel() != 1) throw usage_error("backward expects a scalar loss");
        ran_ = true;
        loss.d_->grad.assign(1, T(1));
        for (size_t i = steps_.size(); i-- > 0;) {
            if (!steps_[i].out->grad.empty()) steps_[i].back();
        }
    }

    // zero tensor if the leaf never received gradient
    Tensor<T> grad(const Tensor<T> & leaf) const {
        if (leaf.d_->tape != this) throw usage_error("tensor is not watched by this tape");
        if (!ran_) throw usage_error("grad queried before backward");
        if (leaf.d_->grad.empty()) return Tensor<T>::zeros(leaf.shape());
        return Tensor<T>::from(leaf.shape(), leaf.d_->grad);
    }

    bool paused() const { return pause_depth_ > 0; }

    // used by ops
    void record(const std::shared_ptr<TensorData<T>> & out, std::function<void()> back) {
        if (ran_) throw usage_error("tape already ran backward; it is append-only");
        touched_.push_back(out);
        steps_.push_back({out, std::move(back)});
    }
    void mark(const std::shared_ptr<TensorData<T>> & out) { touched_.push_back(out); }
    void push_pause() { ++pause_depth_; }
    void pop_pause() { --pause_depth_; }

  private:
    struct Step {
        std::shared_ptr<TensorData<T>> out;
        std::function<void()>          back;
    };
    std::vector<Step>                           steps_;
    std::vector<std::shared_ptr<TensorData<T>>> leaves_;
    std::vector<std::shared_ptr<TensorData<T>>> touched_;
    int                                         pause_depth_ = 0;
    bool                                        ran_         = false;
};

// RAII: ops behave as if detached while alive. Used for greedy decoding inside
// a training step, where the decoded ids must not carry gradient.
template <typename T>
class TapePause {
  public:
    explicit TapePause(GradTape<T> * tape) : tape_(tape) {
        if (tape_) tape_->push_pause();
    }
    ~TapePause() {
        if (tape_) tape_->pop_pause();
    }
    TapePause(const TapePause &) = delete;
    TapePause & operator=(const TapePause &) = delete;

  private:
    GradTape<T> * tape_;
};

namespace detail {

template <typename T>
GradTape<T> * live_tape(const Tensor<T> & t) {
    GradTape<T> * tp = t.d_->tape;
    return (tp && !tp->paused()) ? tp : nullptr;
}

template <typename T>
GradTape<T> * merge_tape(std::initializer_list<const Tensor<T> *> ins) {
    GradTape<T> * tp = nullptr;
    for (const Tensor<T> * t : ins) {
        GradTape<T> * u = live_tape(*t);
        if (!u) continue;
        if (tp && tp != u) throw usage_error("operands live on different tapes");
        tp = u;
    }
    return tp;
}

template <typename T>
bool flows(const Tensor<T> & t) {
    return live_tape(t) != nullptr && t.d_->on_path;
}

template <typename T>
void ensure_grad(TensorData<T> & s) {
    if (s.grad.empty()) s.grad.assign(s.val.size(), T(0));
}

template <typename T>
void check_finite(const Tensor<T> & t, const char * op) {
    if (!finite_checks_enabled()) return;
    for (T v : t.data()) {
        if (!std::isfinite((double) v)) {
            throw numeric_error(std::string(op) + " produced a non-finite value");
        }
    }
}

// attaches out to the tape shared by the inputs, recording back only when
// some input is on a gradient path
template <typename T>
void bind(Tensor<T> & out, std::initializer_list<const Tensor<T> *> ins, std::function<void()> back) {
    GradTape<T> * tp = merge_tape<T>(ins);
    if (!tp) return;
    bool need = false;
    for (const Tensor<T> * t : ins) need = need || flows(*t);
    out.d_->tape    = tp;
    out.d_->on_path = need;
    if (need) {
        tp->record(out.d_, std::move(back));
    } else {
        tp->mark(out.d_);
    }
}

inline void require(bool cond, const char * msg) {
    if (!cond) throw shape_error(msg);
}

// C[m x n] += A[m x k] * B[k x n]
template <typename T>
void mm_accum(const T * A, const T * B, T * C, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const T * a = A + (size_t) i * k;
        T *       c = C + (size_t) i * n;
        for (int p = 0; p < k; ++p) {
            const T   ap = a[p];
            const T * b  = B + (size_t) p * n;
            for (int j = 0; j < n; ++j) c[j] += ap * b[j];
        }
    }
}

// C[m x k] += A[m x n] * B[k x n]^T
template <typename T>
void mm_nt_accum(const T * A, const T * B, T * C, int m, int n, int k) {
    for (int i = 0; i < m; ++i) {
        const T * a = A + (size_t) i * n;
        T *       c = C + (size_t) i * k;
        for (int p = 0; p < k; ++p) {
            const T * b = B + (size_t) p * n;
            T         s = T(0);
            for (int j = 0; j < n; ++j) s += a[j] * b[j];
            c[p] += s;
        }
    }
}

// C[k x n] += A[m x k]^T * B[m x n]
template <typename T>
void mm_tn_accum(const T * A, const T * B, T * C, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const T * b = B + (size_t) i * n;
        for (int p = 0; p < k; ++p) {
            const T ap = A[(size_t) i * k + p];
            T *     c  = C + (size_t) p * n;
            for (int j = 0; j < n; ++j) c[j] += ap * b[j];
        }
    }
}

} // namespace detail

// ---- elementwise ----

template <typename T>
Tensor<T> add(const Tensor<T> & a, const Tensor<T> & b) {
    detail::require(a.shape() == b.shape(), "add: shape mismatch");
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    for (size_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
    detail::bind<T>(out, {&a, &b}, [sa = a.d_, sb = b.d_, so = out.d_] {
        if (sa->on_path) {
            detail::ensure_grad(*sa);
            for (size_t i = 0; i < so->grad.size(); ++i) sa->grad[i] += so->grad[i];
        }
        if (sb->on_path) {
            detail::ensure_grad(*sb);
            for (size_t i = 0; i < so->grad.size(); ++i) sb->grad[i] += so->grad[i];
        }
    });
    detail::check_finite(out, "add");
    return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T> & a, const Tensor<T> & b) {
    detail::require(a.shape() == b.shape(), "sub: shape mismatch");
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    for (size_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
    detail::bind<T>(out, {&a, &b}, [sa = a.d_, sb = b.d_, so = out.d_] {
        if (sa->on_path) {
            detail::ensure_grad(*sa);
            for (size_t i = 0; i < so->grad.size(); ++i) sa->grad[i] += so->grad[i];
        }
        if (sb->on_path) {
            detail::ensure_grad(*sb);
            for (size_t i = 0; i < so->grad.size(); ++i) sb->grad[i] -= so->grad[i];
        }
    });
    detail::check_finite(out, "sub");
    return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T> & a, const Tensor<T> & b) {
    detail::require(a.shape() == b.shape(), "mul: shape mismatch");
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    for (size_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
    detail::bind<T>(out, {&a, &b}, [sa = a.d_, sb = b.d_, so = out.d_] {
        if (sa->on_path) {
            detail::ensure_grad(*sa);
            for (size_t i = 0; i < so->grad.size(); ++i) sa->grad[i] += so->grad[i] * sb->val[i];
        }
        if (sb->on_path) {
            detail::ensure_grad(*sb);
            for (size_t i = 0; i < so->grad.size(); ++i) sb->grad[i] += so->grad[i] * sa->val[i];
        }
    });
    detail::check_finite(out, "mul");
    return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T> & a, T c) {
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    for (size_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] * c;
    detail::bind<T>(out, {&a}, [sa = a.d_, so = out.d_, c] {
        if (sa->on_path) {
            detail::ensure_grad(*sa);
            for (size_t i = 0; i < so->grad.size(); ++i) sa->grad[i] += so->grad[i] * c;
        }
    });
    detail::check_finite(out, "scale");
    return out;
}

template <typename T>
Tensor<T> silu(const Tensor<T> & a) {
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    for (size_t i = 0; i < a.numel(); ++i) {
        const T x     = a.data()[i];
        const T sig   = T(1) / (T(1) + std::exp(-x));
        out.data()[i] = x * sig;
    }
    detail::bind<T>(out, {&a}, [sa = a.d_, so = out.d_] {
        if (!sa->on_path) return;
        detail::ensure_grad(*sa);
        for (size_t i = 0; i < so->grad.size(); ++i) {
            const T x   = sa->val[i];
            const T sig = T(1) / (T(1) + std::exp(-x));
            sa->grad[i] += so->grad[i] * sig * (T(1) + x * (T(1) - sig));
        }
    });
    detail::check_finite(out, "silu");
    return out;
}

// ---- matrix ops ----

template <typename T>
Tensor<T> matmul(const Tensor<T> & a, const Tensor<T> & b) {
    detail::require(a.rank() == 2 && b.rank() == 2, "matmul: rank-2 operands required");
    detail::require(a.dim(1) == b.dim(0), "matmul: inner dimensions differ");
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor<T> out = Tensor<T>::zeros({m, n});
    detail::mm_accum(a.data().data(), b.data().data(), out.data().data(), m, k, n);
    detail::bind<T>(out, {&a, &b}, [sa = a.d_, sb = b.d_, so = out.d_, m, k, n] {
        if (sa->on_path) {
            detail::ensure_grad(*sa);
            detail::mm_nt_accum(so->grad.data(), sb->val.data(), sa->grad.data(), m, n, k);
        }
        if (sb->on_path) {
            detail::ensure_grad(*sb);
            detail::mm_tn_accum(sa->val.data(), so->grad.data(), sb->grad.data(), m, k, n);
        }
    });
    detail::check_finite(out, "matmul");
    return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T> & a) {
    detail::require(a.rank() == 2, "transpose: rank-2 operand required");
    const int m = a.dim(0), n = a.dim(1);
    Tensor<T> out = Tensor<T>::zeros({n, m});
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) out.at(j, i) = a.at(i, j);
    }
    detail::bind<T>(out, {&a}, [sa = a.d_, so = out.d_, m, n] {
        if (!sa->on_path) return;
        detail::ensure_grad(*sa);
        for (int i = 0; i < m; ++i) {
            for (int j = 0; j < n; ++j) sa->grad[(size_t) i * n + j] += so->grad[(size_t) j * m + i];
        }
    });
    return out;
}

// ---- row/column assembly ----

template <typename T>
Tensor<T> slice_rows(const Tensor<T> & a, int r0, int r1) {
    detail::require(a.rank() == 2, "slice_rows: rank-2 operand required");
    detail::require(0 <= r0 && r0 <= r1 && r1 <= a.dim(0), "slice_rows: range out of bounds");
    const int n = a.dim(1), m = r1 - r0;
    Tensor<T> out = Tensor<T>::zeros({m, n});
    std::copy(a.data().begin() + (size_t) r0 * n, a.data().begin() + (size_t) r1 * n, out.data().begin());
    detail::bind<T>(out, {&a}, [sa = a.d_, so = out.d_, r0, m, n] {
        if (!sa->on_path) return;
        detail::ensure_grad(*sa);
        for (size_t i = 0; i < (size_t) m * n; ++i) sa->grad[(size_t) r0 * n + i] += so->grad[i];
    });
    return out;
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T> & a, int c0, int c1) {
    detail::require(a.rank() == 2, "slice_cols: rank-2 operand required");
    detail::require(0 <= c0 && c0 <= c1 && c1 <= a.dim(1), "slice_cols: range out of bounds");
    const int m = a.dim(0), n = a.dim(1), w = c1 - c0;
    Tensor<T> out = Tensor<T>::zeros({m, w});
    for (int i = 0; i < m; ++i) {
        std::copy(a.data().begin() + (size_t) i * n + c0, a.data().begin() + (size_t) i * n + c1,
                  out.data().begin() + (size_t) i * w);
    }
    detail::bind<T>(out, {&a}, [sa = a.d_, so = out.d_, c0, m, n, w] {
        if (!sa->on_path) return;
        detail::ensure_grad(*sa);
        for (int i = 0; i < m; ++i) {
            for (int j = 0; j < w; ++j) sa->grad[(size_t) i * n + c0 + j] += so->grad[(size_t) i * w + j];
        }
    });
    return out;
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>> & parts) {
    detail::require(!parts.empty(), "concat_rows: no operands");
    const int n = parts[0].cols();
    int       m = 0;
    for (const auto & p : parts) {
        detail::require(p.rank() == 2 && p.dim(1) == n, "concat_rows: column counts differ");
        m += p.dim(0);
    }
    Tensor<T> out = Tensor<T>::zeros({m, n});
    size_t    off = 0;
    for (const auto & p : parts) {
        std::copy(p.data().begin(), p.data().end(), out.data().begin() + off);
        off += p.numel();
    }
    std::vector<const Tensor<T> *> ins;
    for (const auto & p : parts) ins.push_back(&p);
    GradTape<T> * tp = nullptr;
    for (const auto * t : ins) {
        GradTape<T> * u = detail::live_tape(*t);
        if (u && tp && u != tp) throw usage_error("operands live on different tapes");
        if (u) tp = u;
    }
    if (tp) {
        bool need = false;
        for (const auto * t : ins) need = need || detail::flows(*t);
        out.d_->tape    = tp;
        out.d_->on_path = need;
        std::vector<std::shared_ptr<TensorData<T>>> srcs;
        for (const auto & p : parts) srcs.push_back(p.d_);
        if (need) {
            tp->record(out.d_, [srcs, so = out.d_] {
                size_t off2 = 0;
                for (auto & s : srcs) {
                    if (s->on_path) {
                        detail::ensure_grad(*s);
                        for (size_t i = 0; i < s->val.size(); ++i) s->grad[i] += so->grad[off2 + i];
                    }
                    off2 += s->val.size();
                }
            });
        } else {
            tp->mark(out.d_);
        }
    }
    return out;
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>> & parts) {
    detail::require(!parts.empty(), "concat_cols: no operands");
    const int m = parts[0].rows();
    int       n = 0;
    for (const auto & p : parts) {
        detail::require(p.rank() == 2 && p.dim(0) == m, "concat_cols: row counts differ");
        n += p.dim(1);
    }
    Tensor<T> out = Tensor<T>::zeros({m, n});
    int       c0  = 0;
    for (const auto & p : parts) {
        const int w = p.dim(1);
        for (int i = 0; i < m; ++i) {
            std::copy(p.data().begin() + (size_t) i * w, p.data().begin() + (size_t) (i + 1) * w,
                      out.data().begin() + (size_t) i * n + c0);
        }
        c0 += w;
    }
    GradTape<T> * tp = nullptr;
    bool          need = false;
    for (const auto & p : parts) {
        GradTape<T> * u = detail::live_tape(p);
        if (u && tp && u != tp) throw usage_error("operands live on different tapes");
        if (u) tp = u;
        need = need || detail::flows(p);
    }
    if (tp) {
        out.d_->tape    = tp;
        out.d_->on_path = need;
        std::vector<std::shared_ptr<TensorData<T>>> srcs;
        for (const auto & p : parts) srcs.push_back(p.d_);
        if (need) {
            tp->record(out.d_, [srcs, so = out.d_, m, n] {
                int c = 0;
                for (auto & s : srcs) {
                    const int w = s->shape[1];
                    if (s->on_path) {
                        detail::ensure_grad(*s);
                        for (int i = 0; i < m; ++i) {
                            for (int j = 0; j < w; ++j) {
                                s->grad[(size_t) i * w + j] += so->grad[(size_t) i * n + c + j];
                            }
                        }
                    }
                    c += w;
                }
            });
        } else {
            tp->mark(out.d_);
        }
    }
    return out;
}

// out[i] = table[ids[i]]; gradient scatters into the table rows
template <typename T>
Tensor<T> embed_rows(const Tensor<T> & table, const std::vector<int> & ids) {
    detail::require(table.rank() == 2, "embed_rows: rank-2 table required");
    const int V = table.dim(0), d = table.dim(1);
    for (int id : ids) {
        if (id < 0 || id >= V) throw usage_error("embed_rows: id out of range");
    }
    Tensor<T> out = Tensor<T>::zeros({(int) ids.size(), d});
    for (size_t i = 0; i < ids.size(); ++i) {
        std::copy(table.data().begin() + (size_t) ids[i] * d, table.data().begin() + (size_t) (ids[i] + 1) * d,
                  out.data().begin() + i * d);
    }
    detail::bind<T>(out, {&table}, [st = table.d_, so = out.d_, ids, d] {
        if (!st->on_path) return;
        detail::ensure_grad(*st);
        for (size_t i = 0; i < ids.size(); ++i) {
            for (int j = 0; j < d; ++j) st->grad[(size_t) ids[i] * d + j] += so->grad[i * d + j];
        }
    });
    return out;
}

// ---- normalisation and softmax ----

// rows normalised independently: y = x / sqrt(mean(x^2) + eps) * gain
template <typename T>
Tensor<T> rms_norm(const Tensor<T> & x, const Tensor<T> & gain, T eps = T(1e-5)) {
    detail::require(x.rank() >= 1, "rms_norm: operand required");
    const int C = x.cols();
    detail::require(gain.rank() == 1 && gain.dim(0) == C, "rms_norm: gain length must match last dimension");
    const int R   = (int) (x.numel() / (size_t) C);
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    std::vector<T> inv_rms((size_t) R);
    for (int i = 0; i < R; ++i) {
        const T * xr = x.data().data() + (size_t) i * C;
        T         s  = T(0);
        for (int j = 0; j < C; ++j) s += xr[j] * xr[j];
        const T inv = T(1) / std::sqrt(s / T(C) + eps);
        inv_rms[(size_t) i] = inv;
        T * yr = out.data().data() + (size_t) i * C;
        for (int j = 0; j < C; ++j) yr[j] = xr[j] * inv * gain.data()[(size_t) j];
    }
    detail::bind<T>(out, {&x, &gain}, [sx = x.d_, sg = gain.d_, so = out.d_, inv_rms, R, C] {
        for (int i = 0; i < R; ++i) {
            const T * xr  = sx->val.data() + (size_t) i * C;
            const T * dy  = so->grad.data() + (size_t) i * C;
            const T   inv = inv_rms[(size_t) i];
            if (sg->on_path) {
                detail::ensure_grad(*sg);
                for (int j = 0; j < C; ++j) sg->grad[(size_t) j] += dy[j] * xr[j] * inv;
            }
            if (sx->on_path) {
                detail::ensure_grad(*sx);
                T dot = T(0);
                for (int j = 0; j < C; ++j) dot += dy[j] * sg->val[(size_t) j] * xr[j];
                const T k = dot * inv * inv * inv / T(C);
                T *     dx = sx->grad.data() + (size_t) i * C;
                for (int j = 0; j < C; ++j) dx[j] += dy[j] * sg->val[(size_t) j] * inv - xr[j] * k;
            }
        }
    });
    detail::check_finite(out, "rms_norm");
    return out;
}

// numerically stable softmax over the last dimension
template <typename T>
Tensor<T> softmax_rows(const Tensor<T> & x) {
    detail::require(x.rank() >= 1, "softmax_rows: operand required");
    const int C   = x.cols();
    const int R   = (int) (x.numel() / (size_t) C);
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    for (int i = 0; i < R; ++i) {
        const T * xr = x.data().data() + (size_t) i * C;
        T *       yr = out.data().data() + (size_t) i * C;
        T         mx = xr[0];
        for (int j = 1; j < C; ++j) mx = std::max(mx, xr[j]);
        T sum = T(0);
        for (int j = 0; j < C; ++j) {
            yr[j] = std::exp(xr[j] - mx);
            sum += yr[j];
        }
        const T inv = T(1) / sum;
        for (int j = 0; j < C; ++j) yr[j] *= inv;
    }
    detail::bind<T>(out, {&x}, [sx = x.d_, so = out.d_, R, C] {
        if (!sx->on_path) return;
        detail::ensure_grad(*sx);
        for (int i = 0; i < R; ++i) {
            const T * y  = so->val.data() + (size_t) i * C;
            const T * dy = so->grad.data() + (size_t) i * C;
            T *       dx = sx->grad.data() + (size_t) i * C;
            T         dot = T(0);
            for (int j = 0; j < C; ++j) dot += dy[j] * y[j];
            for (int j = 0; j < C; ++j) dx[j] += y[j] * (dy[j] - dot);
        }
    });
    detail::check_finite(out, "softmax_rows");
    return out;
}

// ---- losses ----

// mean negative log-likelihood of targets under row-wise softmax(logits)
template <typename T>
Tensor<T> cross_entropy(const Tensor<T> & logits, const std::vector<int> & targets) {
    detail::require(logits.rank() == 2, "cross_entropy: rank-2 logits required");
    const int n = logits.dim(0), V = logits.dim(1);
    if ((int) targets.size() != n) throw shape_error("cross_entropy: one target per row required");
    for (int t : targets) {
        if (t < 0 || t >= V) throw usage_error("cross_entropy: target id out of range");
    }
    if (n == 0) throw usage_error("cross_entropy: empty target set");
    // cache softmax rows for the backward pass
    auto probs = std::make_shared<std::vector<T>>((size_t) n * V);
    T    total = T(0);
    for (int i = 0; i < n; ++i) {
        const T * xr = logits.data().data() + (size_t) i * V;
        T *       pr = probs->data() + (size_t) i * V;
        T         mx = xr[0];
        for (int j = 1; j < V; ++j) mx = std::max(mx, xr[j]);
        T sum = T(0);
        for (int j = 0; j < V; ++j) {
            pr[j] = std::exp(xr[j] - mx);
            sum += pr[j];
        }
        const T inv = T(1) / sum;
        for (int j = 0; j < V; ++j) pr[j] *= inv;
        total += -(xr[(size_t) targets[(size_t) i]] - mx - std::log(sum));
    }
    Tensor<T> out = Tensor<T>::scalar(total / T(n));
    detail::bind<T>(out, {&logits}, [sl = logits.d_, so = out.d_, probs, targets, n, V] {
        if (!sl->on_path) return;
        detail::ensure_grad(*sl);
        const T g = so->grad[0] / T(n);
        for (int i = 0; i < n; ++i) {
            const T * pr = probs->data() + (size_t) i * V;
            T *       dl = sl->grad.data() + (size_t) i * V;
            for (int j = 0; j < V; ++j) dl[j] += g * pr[j];
            dl[(size_t) targets[(size_t) i]] -= g;
        }
    });
    detail::check_finite(out, "cross_entropy");
    return out;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T> & a) {
    detail::require(a.numel() > 0, "mean_all: empty operand");
    T s = T(0);
    for (T v : a.data()) s += v;
    Tensor<T> out = Tensor<T>::scalar(s / T(a.numel()));
    detail::bind<T>(out, {&a}, [sa = a.d_, so = out.d_] {
        if (!sa->on_path) return;
        detail::ensure_grad(*sa);
        const T g = so->grad[0] / T(sa->val.size());
        for (size_t i = 0; i < sa->grad.size(); ++i) sa->grad[i] += g;
    });
    return out;
}

// ---- dropout ----

// mask entries are 0 or 1; kept entries are rescaled by 1/keep
template <typename T>
Tensor<T> dropout_mask(const Tensor<T> & a, const std::vector<uint8_t> & mask, T keep) {
    detail::require(mask.size() == a.numel(), "dropout_mask: mask size mismatch");
    if (!(keep > T(0))) throw usage_error("dropout_mask: keep probability must be positive");
    const T   inv = T(1) / keep;
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    for (size_t i = 0; i < a.numel(); ++i) out.data()[i] = mask[i] ? a.data()[i] * inv : T(0);
    detail::bind<T>(out, {&a}, [sa = a.d_, so = out.d_, mask, inv] {
        if (!sa->on_path) return;
        detail::ensure_grad(*sa);
        for (size_t i = 0; i < so->grad.size(); ++i) {
            if (mask[i]) sa->grad[i] += so->grad[i] * inv;
        }
    });
    return out;
}

// draws a fresh Bernoulli(1-p) mask from rng; identity when p == 0
template <typename T>
Tensor<T> dropout(const Tensor<T> & a, double p, std::mt19937_64 & rng) {
    if (p < 0.0 || p >= 1.0) throw usage_error("dropout: p must lie in [0, 1)");
    if (p == 0.0) return a;
    std::vector<uint8_t> mask(a.numel());
    std::bernoulli_distribution keep_dist(1.0 - p);
    for (auto & m : mask) m = keep_dist(rng) ? 1 : 0;
    return dropout_mask(a, mask, (T) (1.0 - p));
}

// ---- non-differentiable helpers ----

// first index of the maximum in a row (ties break low, deterministic)
template <typename T>
int argmax_row(const Tensor<T> & x, int row) {
    const int C   = x.cols();
    const T * xr  = x.data().data() + (size_t) row * C;
    int       best = 0;
    for (int j = 1; j < C; ++j) {
        if (xr[j] > xr[best]) best = j;
    }
    return best;
}

// additive causal mask: 0 at or below the diagonal, -1e30 above
template <typename T>
Tensor<T> causal_mask(int n) {
    Tensor<T> m = Tensor<T>::zeros({n, n});
    for (int i = 0; i < n; ++i) {
        for (int j = i + 1; j < n; ++j) m.at(i, j) = T(-1e30);
    }
    return m;
}

} // namespace r3mem
