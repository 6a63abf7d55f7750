#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "r3mem/hierpair.hpp"
#include "r3mem/model.hpp"

namespace r3mem {

struct MetricsRow {
    std::string task;
    std::string metric;
    double      value     = 0.0;
    long        n_samples = 0;
    std::string config; // model config fingerprint
};

// header is exactly "task,metric,value,n_samples,config"
void write_metrics_csv(const std::string & path, const std::vector<MetricsRow> & rows);

std::string config_fingerprint(const ModelConfig & cfg, bool has_adapters);

struct PplResult {
    double ppl      = 0.0;
    double mean_nll = 0.0;
    long   n_tokens = 0;
};

// documents wrapped as BOS + bytes + EOS; every post-BOS position scores;
// NLL accumulates in double over all documents (memory rows never appear in
// the logits). segment_len 0 means the model's full content capacity.
PplResult eval_perplexity(const RevformerParams<float> & P, const std::vector<std::string> & docs, int segment_len);

// forward PPL restricted to query+EOS positions of the given pairs
PplResult eval_query_ppl(const RevformerParams<float> & P, const std::vector<ContextQueryPair> & pairs);

// harmonic mean of multiset precision/recall over byte ids
double token_f1(const std::vector<int> & pred, const std::vector<int> & ref);

struct ReconResult {
    double                   mean_f1 = 0.0;
    double                   em_rate = 0.0;
    std::vector<double>      per_pair_f1;
    std::vector<char>        per_pair_em;
    std::vector<std::string> decoded;
};

// backward-generate the context from each query (greedy, budget 1.25 * |c|)
ReconResult eval_reconstruction(const RevformerParams<float> & P, const std::vector<ContextQueryPair> & pairs,
                                double budget_mult = 1.25);

// mean of per-pair backward NLL (flipped model), evaluation mode
double mean_backward_nll(const RevformerParams<float> & P, const std::vector<ContextQueryPair> & pairs);

struct AuditReport {
    int                 trials = 0;
    double              tol    = 0.0;
    std::vector<double> block_max_err;
    double              stack_max_err = 0.0;
    bool                pass          = false;
};

// random stream pairs through every block and the whole stack, forward then
// inverse; dropout off
template <typename T>
AuditReport check_invert(const RevformerParams<T> & P, int trials, double tol, uint64_t seed, int seq_len = 32) {
    if (trials < 1) throw usage_error("audit needs at least one trial");
    AuditReport rep;
    rep.trials = trials;
    rep.tol    = tol;
    rep.block_max_err.assign((size_t) P.cfg.n_layers, 0.0);
    std::mt19937_64 rng(seed);
    const RunFlags  off{};
    auto max_abs_diff = [](const Tensor<T> & a, const Tensor<T> & b) {
        double m = 0.0;
        for (size_t i = 0; i < a.numel(); ++i) {
            m = std::max(m, std::abs((double) a.data()[i] - (double) b.data()[i]));
        }
        return m;
    };
    for (int trial = 0; trial < trials; ++trial) {
        Tensor<T> x1 = Tensor<T>::randn({seq_len, P.cfg.d_model}, rng, 1.0);
        Tensor<T> x2 = Tensor<T>::randn({seq_len, P.cfg.d_model}, rng, 1.0);
        // per block
        for (int b = 0; b < P.cfg.n_layers; ++b) {
            auto [y1, y2] = coupling_forward(P, b, x1, x2, off);
            auto [r1, r2] = coupling_inverse(P, b, y1, y2);
            const double err = std::max(max_abs_diff(r1, x1), max_abs_diff(r2, x2));
            rep.block_max_err[(size_t) b] = std::max(rep.block_max_err[(size_t) b], err);
        }
        // whole stack
        Tensor<T> y1 = x1, y2 = x2;
        for (int b = 0; b < P.cfg.n_layers; ++b) std::tie(y1, y2) = coupling_forward(P, b, y1, y2, off);
        for (int b = P.cfg.n_layers - 1; b >= 0; --b) std::tie(y1, y2) = coupling_inverse(P, b, y1, y2);
        const double err = std::max(max_abs_diff(y1, x1), max_abs_diff(y2, x2));
        rep.stack_max_err = std::max(rep.stack_max_err, err);
    }
    rep.pass = rep.stack_max_err <= tol;
    for (double e : rep.block_max_err) rep.pass = rep.pass && e <= tol;
    return rep;
}

} // namespace r3mem
