#pragma once

// The three-term objective over context-query pairs:
//
//   total = L_forward + L_backward + lambda * L_cycle
//
// forward:  BOS tag c SEP q EOS under the segmented forward model, loss on q+EOS
// backward: BOS tag q SEP c EOS under the flipped model, loss on c+EOS
// cycle:    greedy-decode qbar from c (ids severed from the tape), then the
//           backward loss of the synthetic pair <c, qbar>
//
// plus base pretraining and adapter fine-tuning with decoupled weight decay.

#include <cmath>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "r3mem/hierpair.hpp"
#include "r3mem/model.hpp"
#include "r3mem/tokenizer.hpp"

namespace r3mem {

struct LossWeights {
    double lambda_cycle = 0.5;
    bool   use_forward  = true;
    bool   use_backward = true;
};

struct CycleSettings {
    double budget_mult = 1.25; // of the reference query length
    int    budget_cap  = 64;
};

inline double combine_loss_terms(double fwd, double bwd, double cycle, double lambda) {
    return fwd + bwd + lambda * cycle;
}

inline int cycle_budget(size_t q_ref_len, const CycleSettings & cs) {
    const int b = (int) std::ceil(cs.budget_mult * (double) q_ref_len);
    return std::min(cs.budget_cap, b);
}

// mean NLL of seq[target_begin..] given the preceding tokens
template <typename T>
Tensor<T> span_nll(const RevformerParams<T> & P, const std::vector<int> & seq, int target_begin, const RunFlags & rf,
                   bool flipped) {
    if (target_begin < 1 || target_begin >= (int) seq.size()) throw usage_error("sequence has no loss positions");
    Tensor<T> logits = flipped ? flipped_forward(P, seq) : forward_segmented(P, seq, rf).logits;
    Tensor<T> rows   = slice_rows(logits, target_begin - 1, (int) seq.size() - 1);
    const std::vector<int> targets(seq.begin() + target_begin, seq.end());
    return cross_entropy(rows, targets);
}

template <typename T>
Tensor<T> forward_loss_ids(const RevformerParams<T> & P, PairLevel level, const std::vector<int> & c,
                           const std::vector<int> & q, const RunFlags & rf) {
    if (q.empty()) throw usage_error("pair has no query tokens");
    const auto seq = forward_sequence_ids(level, c, q);
    return span_nll(P, seq, 2 + (int) c.size() + 1, rf, false);
}

template <typename T>
Tensor<T> backward_loss_ids(const RevformerParams<T> & P, PairLevel level, const std::vector<int> & q,
                            const std::vector<int> & c, const RunFlags & rf) {
    if (c.empty()) throw usage_error("pair has no context tokens");
    const auto seq = backward_sequence_ids(level, q, c);
    return span_nll(P, seq, 2 + (int) q.size() + 1, rf, true);
}

template <typename T>
Tensor<T> forward_loss(const RevformerParams<T> & P, const ContextQueryPair & pair, const RunFlags & rf) {
    return forward_loss_ids(P, pair.level, tok::tokenize(pair.context), tok::tokenize(pair.query), rf);
}

template <typename T>
Tensor<T> backward_loss(const RevformerParams<T> & P, const ContextQueryPair & pair, const RunFlags & rf) {
    return backward_loss_ids(P, pair.level, tok::tokenize(pair.query), tok::tokenize(pair.context), rf);
}

template <typename T>
struct CycleResult {
    Tensor<T>        loss;
    std::vector<int> decoded;
    bool             empty_decode = false;
};

// decode runs detached (ids carry no gradient); gradient flows only through
// the backward evaluation of <c, qbar>
template <typename T>
CycleResult<T> cycle_loss_ids(const RevformerParams<T> & P, PairLevel level, const std::vector<int> & c,
                              int decode_budget, const RunFlags & rf, GradTape<T> * tape) {
    if (c.empty()) throw usage_error("cycle loss needs a non-empty context");
    CycleResult<T> out;
    {
        TapePause<T> pause(tape);
        std::vector<int> prompt;
        prompt.push_back(tok::BOS);
        prompt.push_back(level_tag(level));
        prompt.insert(prompt.end(), c.begin(), c.end());
        prompt.push_back(tok::SEP);
        out.decoded = generate(P, Direction::fwd, prompt, decode_budget, tok::EOS);
    }
    out.empty_decode = out.decoded.empty();
    const std::vector<int> qbar = out.empty_decode ? std::vector<int>{tok::EOS} : out.decoded;
    out.loss = backward_loss_ids(P, level, qbar, c, rf);
    return out;
}

template <typename T>
CycleResult<T> cycle_loss(const RevformerParams<T> & P, const ContextQueryPair & pair, const CycleSettings & cs,
                          const RunFlags & rf, GradTape<T> * tape) {
    const auto c = tok::tokenize(pair.context);
    const auto q = tok::tokenize(pair.query);
    return cycle_loss_ids(P, pair.level, c, cycle_budget(q.size(), cs), rf, tape);
}

template <typename T>
struct LossBreakdown {
    Tensor<T> total;
    double    fwd = 0.0, bwd = 0.0, cycle = 0.0;
    bool      empty_decode = false;
};

template <typename T>
LossBreakdown<T> total_loss(const RevformerParams<T> & P, const ContextQueryPair & pair, const LossWeights & w,
                            const CycleSettings & cs, const RunFlags & rf, GradTape<T> * tape) {
    if (w.lambda_cycle < 0.0) throw usage_error("lambda must be non-negative");
    LossBreakdown<T>       out;
    std::vector<Tensor<T>> terms;
    if (w.use_forward) {
        Tensor<T> t = forward_loss(P, pair, rf);
        out.fwd     = (double) t.at(0);
        terms.push_back(t);
    }
    if (w.use_backward) {
        Tensor<T> t = backward_loss(P, pair, rf);
        out.bwd     = (double) t.at(0);
        terms.push_back(t);
    }
    if (w.lambda_cycle > 0.0) {
        CycleResult<T> cr = cycle_loss(P, pair, cs, rf, tape);
        out.cycle         = (double) cr.loss.at(0);
        out.empty_decode  = cr.empty_decode;
        terms.push_back(scale(cr.loss, T(w.lambda_cycle)));
    }
    if (terms.empty()) throw usage_error("no loss terms enabled");
    Tensor<T> total = terms[0];
    for (size_t i = 1; i < terms.size(); ++i) total = add(total, terms[i]);
    out.total = total;
    return out;
}

// ---- optimisation ----

struct OptimSettings {
    double max_lr       = 2e-3; // toy-scale rescaling of the reference 2e-5
    double beta1        = 0.9;
    double beta2        = 0.99;
    double eps          = 1e-8;
    double weight_decay = 0.01;
    double warmup_frac  = 0.06;
    int    batch_size   = 2;
};

// linear ramp over ceil(frac*total) steps to max_lr, then linear decay to 0
double lr_at(long step, long total_steps, double max_lr, double warmup_frac = 0.06);

// decoupled weight decay; moments kept in double so updates are exactly
// reproducible across runs
struct AdamW {
    double beta1 = 0.9, beta2 = 0.99, eps = 1e-8, weight_decay = 0.01;
    long   t = 0;
    std::vector<std::vector<double>> m, v;

    void init(const std::vector<Tensor<float> *> & params);
    void step(const std::vector<Tensor<float> *> & params, const std::vector<Tensor<float>> & grads, double lr);
};

// trains every weight of the plain decoder (no adapters, no memory slots)
// with next-token NLL over random corpus windows
RevformerParams<float> pretrain_base(const std::string & corpus, const ModelConfig & cfg, int steps, uint64_t seed,
                                     const OptimSettings & opt = {}, std::ostream * progress = nullptr);

struct TrainStats {
    long   steps          = 0;
    int    empty_decodes  = 0;
    double final_total    = 0.0;
    uint64_t base_hash    = 0;
};

// attaches adapters to a copy of the base and optimises theta and phi only;
// writes a per-step loss log when log_path is non-empty
RevformerParams<float> train(const RevformerParams<float> & base, const std::vector<ContextQueryPair> & pairs,
                             int epochs, const LossWeights & weights, const OptimSettings & opt,
                             const CycleSettings & cs, uint64_t seed, const std::string & log_path,
                             TrainStats * stats = nullptr);

} // namespace r3mem
