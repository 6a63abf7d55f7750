#pragma once

// Reversible decoder built from additive coupling blocks:
//
//   y1 = x1 + F(x2)      F = frozen attention+FFN delta, plus a low-rank adapter
//   y2 = x2 + G(y1)      G = low-rank adapter only
//
// Inversion recovers x2 first (y1 is known), then x1. Running the inverse maps
// in reverse block order over an embedded sequence is the flipped model used
// for generation in the reconstruction direction. A plain (adapter-free) model
// is the same stack with G absent and no memory slots, which is what base
// pretraining trains; attaching zero-initialised adapters leaves its function
// bitwise unchanged.
//
// Long inputs run in segments. Each segment appends the trainable write-slot
// embeddings after the content tokens; from the second segment on, the
// previous segment's final write-slot states are prepended as read slots.
// Gradients flow through the carried states, so the write slots receive
// gradient from later segments.

#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "r3mem/errors.hpp"
#include "r3mem/hash.hpp"
#include "r3mem/tensor.hpp"

namespace r3mem {

struct ModelConfig {
    int    vocab_size    = 263;
    int    d_model       = 128;
    int    n_heads       = 4;
    int    n_layers      = 4;   // coupling blocks
    int    ffn_dim       = 512;
    int    window        = 256; // per-segment positions, memory slots included
    int    mem_tokens    = 8;
    int    adapter_rank  = 8;
    double adapter_scale = 32.0;
    double dropout       = 0.1;
    int    precision     = 32;

    int content_capacity() const { return window - 2 * mem_tokens; }

    void validate() const {
        if (vocab_size < 1 || d_model < 1 || n_heads < 1 || n_layers < 1 || ffn_dim < 1) {
            throw usage_error("config: dimensions must be positive");
        }
        if (d_model % n_heads != 0) throw usage_error("config: d_model must divide into heads");
        if (mem_tokens < 1) throw usage_error("config: at least one memory token required");
        if (window <= 2 * mem_tokens + 2) throw usage_error("config: window leaves no room for content");
        if (adapter_rank < 1 || adapter_scale <= 0.0) throw usage_error("config: bad adapter setting");
        if (dropout < 0.0 || dropout >= 1.0) throw usage_error("config: dropout must lie in [0, 1)");
        if (precision != 32 && precision != 64) throw usage_error("config: precision must be 32 or 64");
    }

    std::string to_text(bool has_adapters) const {
        std::ostringstream os;
        os << "vocab_size=" << vocab_size << "\n"
           << "d_model=" << d_model << "\n"
           << "n_heads=" << n_heads << "\n"
           << "n_layers=" << n_layers << "\n"
           << "ffn_dim=" << ffn_dim << "\n"
           << "window=" << window << "\n"
           << "mem_tokens=" << mem_tokens << "\n"
           << "adapter_rank=" << adapter_rank << "\n"
           << "adapter_scale=" << adapter_scale << "\n"
           << "dropout=" << dropout << "\n"
           << "precision=" << precision << "\n"
           << "has_adapters=" << (has_adapters ? 1 : 0) << "\n";
        return os.str();
    }

    static std::pair<ModelConfig, bool> from_text(const std::string & text) {
        ModelConfig c;
        bool        has_adapters = false;
        std::istringstream is(text);
        std::string        line;
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            const size_t eq = line.find('=');
            if (eq == std::string::npos) throw format_error("config: malformed line '" + line + "'");
            const std::string k = line.substr(0, eq);
            const std::string v = line.substr(eq + 1);
            if      (k == "vocab_size")    c.vocab_size = std::stoi(v);
            else if (k == "d_model")       c.d_model = std::stoi(v);
            else if (k == "n_heads")       c.n_heads = std::stoi(v);
            else if (k == "n_layers")      c.n_layers = std::stoi(v);
            else if (k == "ffn_dim")       c.ffn_dim = std::stoi(v);
            else if (k == "window")        c.window = std::stoi(v);
            else if (k == "mem_tokens")    c.mem_tokens = std::stoi(v);
            else if (k == "adapter_rank")  c.adapter_rank = std::stoi(v);
            else if (k == "adapter_scale") c.adapter_scale = std::stod(v);
            else if (k == "dropout")       c.dropout = std::stod(v);
            else if (k == "precision")     c.precision = std::stoi(v);
            else if (k == "has_adapters")  has_adapters = std::stoi(v) != 0;
            else throw format_error("config: unknown key '" + k + "'");
        }
        return {c, has_adapters};
    }
};

template <typename T>
struct BlockWeights {
    Tensor<T> wq, wk, wv, wo; // [d x d]
    Tensor<T> w1;             // [d x ffn]
    Tensor<T> w2;             // [ffn x d]
    Tensor<T> norm1, norm2;   // [d]
};

template <typename T>
struct Adapter {
    Tensor<T> down; // [in x r]
    Tensor<T> up;   // [r x in], zero at init so the delta starts at zero
};

template <typename T>
struct BlockAdapters {
    Adapter<T> f, g;
};

template <typename T>
struct RevformerParams {
    ModelConfig                   cfg;
    Tensor<T>                     embed;      // [V x d], tied output head
    std::vector<BlockWeights<T>>  blocks;
    Tensor<T>                     final_norm; // [d]
    bool                          has_adapters = false;
    Tensor<T>                     theta;      // [m x d] write-slot embeddings
    std::vector<BlockAdapters<T>> adapters;

    static RevformerParams init_base(const ModelConfig & cfg, uint64_t seed) {
        cfg.validate();
        RevformerParams P;
        P.cfg = cfg;
        std::mt19937_64 rng(seed);
        const double    sd = 0.02;
        P.embed = Tensor<T>::randn({cfg.vocab_size, cfg.d_model}, rng, sd);
        P.blocks.resize((size_t) cfg.n_layers);
        for (auto & b : P.blocks) {
            b.wq    = Tensor<T>::randn({cfg.d_model, cfg.d_model}, rng, sd);
            b.wk    = Tensor<T>::randn({cfg.d_model, cfg.d_model}, rng, sd);
            b.wv    = Tensor<T>::randn({cfg.d_model, cfg.d_model}, rng, sd);
            b.wo    = Tensor<T>::randn({cfg.d_model, cfg.d_model}, rng, sd);
            b.w1    = Tensor<T>::randn({cfg.d_model, cfg.ffn_dim}, rng, sd);
            b.w2    = Tensor<T>::randn({cfg.ffn_dim, cfg.d_model}, rng, sd);
            b.norm1 = Tensor<T>::full({cfg.d_model}, T(1));
            b.norm2 = Tensor<T>::full({cfg.d_model}, T(1));
        }
        P.final_norm = Tensor<T>::full({cfg.d_model}, T(1));
        return P;
    }

    // write slots start at N(0, 0.02); every up-projection starts at zero
    void attach_adapters(uint64_t seed) {
        if (has_adapters) throw usage_error("adapters already attached");
        std::mt19937_64 rng(seed);
        const double    sd = 0.02;
        theta = Tensor<T>::randn({cfg.mem_tokens, cfg.d_model}, rng, sd);
        adapters.resize((size_t) cfg.n_layers);
        for (auto & a : adapters) {
            a.f.down = Tensor<T>::randn({cfg.d_model, cfg.adapter_rank}, rng, sd);
            a.f.up   = Tensor<T>::zeros({cfg.adapter_rank, cfg.d_model});
            a.g.down = Tensor<T>::randn({cfg.d_model, cfg.adapter_rank}, rng, sd);
            a.g.up   = Tensor<T>::zeros({cfg.adapter_rank, cfg.d_model});
        }
        has_adapters = true;
    }

    std::vector<std::pair<std::string, Tensor<T> *>> named_arrays() {
        auto bname = [](int i) {
            char buf[32];
            std::snprintf(buf, sizeof buf, "base.b%02d.", i);
            return std::string(buf);
        };
        std::vector<std::pair<std::string, Tensor<T> *>> out;
        out.emplace_back("base.embed", &embed);
        for (int i = 0; i < (int) blocks.size(); ++i) {
            auto & b = blocks[(size_t) i];
            const std::string p = bname(i);
            out.emplace_back(p + "wq", &b.wq);
            out.emplace_back(p + "wk", &b.wk);
            out.emplace_back(p + "wv", &b.wv);
            out.emplace_back(p + "wo", &b.wo);
            out.emplace_back(p + "w1", &b.w1);
            out.emplace_back(p + "w2", &b.w2);
            out.emplace_back(p + "norm1", &b.norm1);
            out.emplace_back(p + "norm2", &b.norm2);
        }
        out.emplace_back("base.final_norm", &final_norm);
        if (has_adapters) {
            out.emplace_back("mem.theta", &theta);
            for (int i = 0; i < (int) adapters.size(); ++i) {
                auto & a = adapters[(size_t) i];
                char   buf[32];
                std::snprintf(buf, sizeof buf, "adapter.b%02d.", i);
                const std::string p(buf);
                out.emplace_back(p + "f.down", &a.f.down);
                out.emplace_back(p + "f.up", &a.f.up);
                out.emplace_back(p + "g.down", &a.g.down);
                out.emplace_back(p + "g.up", &a.g.up);
            }
        }
        return out;
    }

    std::vector<Tensor<T> *> base_arrays() {
        std::vector<Tensor<T> *> out;
        for (auto & [name, t] : named_arrays()) {
            if (name.rfind("base.", 0) == 0) out.push_back(t);
        }
        return out;
    }

    std::vector<Tensor<T> *> trainable_arrays() {
        if (!has_adapters) throw usage_error("no adapters attached");
        std::vector<Tensor<T> *> out;
        for (auto & [name, t] : named_arrays()) {
            if (name.rfind("base.", 0) != 0) out.push_back(t);
        }
        return out;
    }

    uint64_t base_hash() {
        uint64_t h = 14695981039346656037ULL;
        for (Tensor<T> * t : base_arrays()) {
            h = fnv1a(t->data().data(), t->data().size() * sizeof(T), h);
        }
        return h;
    }

    template <typename U>
    RevformerParams<U> cast() const {
        RevformerParams<U> Q;
        Q.cfg          = cfg;
        Q.has_adapters = has_adapters;
        Q.embed        = embed.template cast<U>();
        Q.final_norm   = final_norm.template cast<U>();
        for (const auto & b : blocks) {
            Q.blocks.push_back({b.wq.template cast<U>(), b.wk.template cast<U>(), b.wv.template cast<U>(),
                                b.wo.template cast<U>(), b.w1.template cast<U>(), b.w2.template cast<U>(),
                                b.norm1.template cast<U>(), b.norm2.template cast<U>()});
        }
        if (has_adapters) {
            Q.theta = theta.template cast<U>();
            for (const auto & a : adapters) {
                Q.adapters.push_back({{a.f.down.template cast<U>(), a.f.up.template cast<U>()},
                                      {a.g.down.template cast<U>(), a.g.up.template cast<U>()}});
            }
        }
        return Q;
    }
};

// per-run switches; dropout fires only when training with a non-null rng
struct RunFlags {
    bool              training = false;
    std::mt19937_64 * rng      = nullptr;
};

enum class AdapterStream { F, G };

template <typename T>
Tensor<T> adapter_delta(const RevformerParams<T> & P, int block, AdapterStream stream, const Tensor<T> & x,
                        const RunFlags & rf) {
    const Adapter<T> & a = stream == AdapterStream::F ? P.adapters[(size_t) block].f : P.adapters[(size_t) block].g;
    Tensor<T> h = matmul(x, a.down);
    if (stream == AdapterStream::G) h = silu(h);
    if (rf.training && P.cfg.dropout > 0.0) {
        if (!rf.rng) throw usage_error("dropout requires an rng in training mode");
        h = dropout(h, P.cfg.dropout, *rf.rng);
    }
    return scale(matmul(h, a.up), T(P.cfg.adapter_scale / P.cfg.adapter_rank));
}

namespace detail {

template <typename T>
Tensor<T> attention(const RevformerParams<T> & P, int block, const Tensor<T> & xn) {
    const auto & b  = P.blocks[(size_t) block];
    const int    L  = xn.dim(0);
    const int    H  = P.cfg.n_heads;
    const int    dh = P.cfg.d_model / H;
    Tensor<T> q = matmul(xn, b.wq);
    Tensor<T> k = matmul(xn, b.wk);
    Tensor<T> v = matmul(xn, b.wv);
    Tensor<T> mask = causal_mask<T>(L);
    std::vector<Tensor<T>> heads;
    heads.reserve((size_t) H);
    for (int h = 0; h < H; ++h) {
        Tensor<T> qh = slice_cols(q, h * dh, (h + 1) * dh);
        Tensor<T> kh = slice_cols(k, h * dh, (h + 1) * dh);
        Tensor<T> vh = slice_cols(v, h * dh, (h + 1) * dh);
        Tensor<T> scores = scale(matmul(qh, transpose(kh)), T(1.0 / std::sqrt((double) dh)));
        Tensor<T> w = softmax_rows(add(scores, mask));
        heads.push_back(matmul(w, vh));
    }
    return matmul(concat_cols(heads), b.wo);
}

// residual-free output of the frozen sublayer pair
template <typename T>
Tensor<T> base_sublayer_delta(const RevformerParams<T> & P, int block, const Tensor<T> & x) {
    const auto & b = P.blocks[(size_t) block];
    Tensor<T> a = attention(P, block, rms_norm(x, b.norm1));
    Tensor<T> h = add(x, a);
    Tensor<T> f = matmul(silu(matmul(rms_norm(h, b.norm2), b.w1)), b.w2);
    return add(a, f);
}

// additive coupling over arbitrary callables, shared by tests
template <typename T, class FFn, class GFn>
std::pair<Tensor<T>, Tensor<T>> couple_forward(const Tensor<T> & x1, const Tensor<T> & x2, FFn && f, GFn && g) {
    Tensor<T> y1 = add(x1, f(x2));
    Tensor<T> y2 = add(x2, g(y1));
    return {y1, y2};
}

// x2 comes out first; it only needs y1, which the forward pass left intact
template <typename T, class FFn, class GFn>
std::pair<Tensor<T>, Tensor<T>> couple_inverse(const Tensor<T> & y1, const Tensor<T> & y2, FFn && f, GFn && g) {
    Tensor<T> x2 = sub(y2, g(y1));
    Tensor<T> x1 = sub(y1, f(x2));
    return {x1, x2};
}

} // namespace detail

template <typename T>
std::pair<Tensor<T>, Tensor<T>> coupling_forward(const RevformerParams<T> & P, int block, const Tensor<T> & x1,
                                                 const Tensor<T> & x2, const RunFlags & rf) {
    Tensor<T> fx = detail::base_sublayer_delta(P, block, x2);
    if (P.has_adapters) fx = add(fx, adapter_delta(P, block, AdapterStream::F, x2, rf));
    Tensor<T> y1 = add(x1, fx);
    if (!P.has_adapters) return {y1, x2}; // G absent: second stream passes through
    Tensor<T> y2 = add(x2, adapter_delta(P, block, AdapterStream::G, y1, rf));
    return {y1, y2};
}

// dropout is never active on the inverse path
template <typename T>
std::pair<Tensor<T>, Tensor<T>> coupling_inverse(const RevformerParams<T> & P, int block, const Tensor<T> & y1,
                                                 const Tensor<T> & y2) {
    const RunFlags off{};
    Tensor<T> x2 = P.has_adapters ? sub(y2, adapter_delta(P, block, AdapterStream::G, y1, off)) : y2;
    Tensor<T> fx = detail::base_sublayer_delta(P, block, x2);
    if (P.has_adapters) fx = add(fx, adapter_delta(P, block, AdapterStream::F, x2, off));
    Tensor<T> x1 = sub(y1, fx);
    return {x1, x2};
}

// contiguous [begin, end) spans, each at most capacity tokens
struct SegmentPlan {
    int                              content_capacity = 0;
    std::vector<std::pair<int, int>> spans;

    static SegmentPlan build(int n_tokens, int capacity) {
        if (capacity < 1) throw usage_error("segment capacity must be positive");
        if (n_tokens < 1) throw usage_error("cannot plan an empty sequence");
        SegmentPlan plan;
        plan.content_capacity = capacity;
        for (int b = 0; b < n_tokens; b += capacity) {
            plan.spans.emplace_back(b, std::min(n_tokens, b + capacity));
        }
        return plan;
    }
};

template <typename T>
struct WindowOut {
    Tensor<T> content_logits; // [n_content x V]
    Tensor<T> write_states;   // [m x d] when memory slots are present
    Tensor<T> read_input;     // the rows prepended as read slots (trace)
};

// one window: [read slots?] + content + [write slots?]; slots appear only on
// adapter-bearing models
template <typename T>
WindowOut<T> run_window(const RevformerParams<T> & P, const int * ids, int n_ids, const Tensor<T> * read,
                        const RunFlags & rf) {
    const bool mem    = P.has_adapters;
    const int  m      = P.cfg.mem_tokens;
    int        n_read = 0;
    Tensor<T>  content = embed_rows(P.embed, std::vector<int>(ids, ids + n_ids));
    Tensor<T>  emb;
    WindowOut<T> out;
    if (mem) {
        std::vector<Tensor<T>> rows;
        if (read) {
            n_read = read->dim(0);
            out.read_input = *read;
            rows.push_back(*read);
        }
        rows.push_back(content);
        rows.push_back(P.theta);
        emb = concat_rows(rows);
    } else {
        emb = content;
    }
    const int L = n_read + n_ids + (mem ? m : 0);
    if (L > P.cfg.window) throw usage_error("window overflow: segment does not fit");
    Tensor<T> x1 = emb, x2 = emb;
    for (int b = 0; b < P.cfg.n_layers; ++b) {
        std::tie(x1, x2) = coupling_forward(P, b, x1, x2, rf);
    }
    Tensor<T> avg = scale(add(x1, x2), T(0.5));
    Tensor<T> h   = rms_norm(avg, P.final_norm);
    Tensor<T> hc  = mem ? slice_rows(h, n_read, n_read + n_ids) : h;
    out.content_logits = matmul(hc, transpose(P.embed));
    if (mem) out.write_states = slice_rows(avg, n_read + n_ids, L);
    return out;
}

template <typename T>
struct ForwardResult {
    Tensor<T> logits; // [n_tokens x V], memory rows excluded
    int       n_segments = 0;
};

template <typename T>
struct SegmentTrace {
    std::vector<Tensor<T>> read_inputs;  // per segment >= 2
    std::vector<Tensor<T>> write_states; // per segment
};

template <typename T>
ForwardResult<T> forward_segmented(const RevformerParams<T> & P, const std::vector<int> & ids, const RunFlags & rf,
                                   SegmentTrace<T> * trace = nullptr, int segment_len = 0) {
    if (ids.empty()) throw usage_error("forward over an empty sequence");
    const int max_cap = P.has_adapters ? P.cfg.content_capacity() : P.cfg.window;
    if (segment_len > max_cap) throw usage_error("segment length exceeds window capacity");
    const int cap = segment_len > 0 ? segment_len : max_cap;
    const auto plan = SegmentPlan::build((int) ids.size(), cap);
    Tensor<T> carry;
    bool      have_carry = false;
    std::vector<Tensor<T>> parts;
    for (auto [b, e] : plan.spans) {
        WindowOut<T> w = run_window(P, ids.data() + b, e - b, have_carry ? &carry : nullptr, rf);
        parts.push_back(w.content_logits);
        if (P.has_adapters) {
            if (trace) {
                if (have_carry) trace->read_inputs.push_back(w.read_input);
                trace->write_states.push_back(w.write_states);
            }
            carry      = w.write_states;
            have_carry = true;
        }
    }
    ForwardResult<T> out;
    out.logits     = parts.size() == 1 ? parts[0] : concat_rows(parts);
    out.n_segments = (int) plan.spans.size();
    return out;
}

// the flipped model: inverse maps applied in reverse block order to the
// embedded sequence; no memory slots, dropout off, single window only
template <typename T>
Tensor<T> flipped_forward(const RevformerParams<T> & P, const std::vector<int> & ids) {
    if (ids.empty()) throw usage_error("flipped forward over an empty sequence");
    if ((int) ids.size() > P.cfg.window) throw usage_error("sequence exceeds the window");
    Tensor<T> emb = embed_rows(P.embed, ids);
    Tensor<T> y1 = emb, y2 = emb;
    for (int b = P.cfg.n_layers - 1; b >= 0; --b) {
        std::tie(y1, y2) = coupling_inverse(P, b, y1, y2);
    }
    Tensor<T> avg = scale(add(y1, y2), T(0.5));
    return matmul(rms_norm(avg, P.final_norm), transpose(P.embed));
}

enum class Direction { fwd, bwd };

// greedy decode; returns new ids, stop id excluded. The backward direction
// stops early when the window fills.
template <typename T>
std::vector<int> generate(const RevformerParams<T> & P, Direction dir, const std::vector<int> & prompt, int max_new,
                          int stop_id) {
    if (prompt.empty()) throw usage_error("generate needs a non-empty prompt");
    const RunFlags   off{};
    std::vector<int> cur = prompt;
    std::vector<int> out;
    for (int step = 0; step < max_new; ++step) {
        if (dir == Direction::bwd && (int) cur.size() >= P.cfg.window) break;
        Tensor<T> logits = dir == Direction::fwd ? forward_segmented(P, cur, off).logits : flipped_forward(P, cur);
        const int id = argmax_row(logits, logits.dim(0) - 1);
        if (id == stop_id) break;
        cur.push_back(id);
        out.push_back(id);
    }
    return out;
}

} // namespace r3mem
