#include "r3mem/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>

#include "r3mem/errors.hpp"

namespace r3mem {

double lr_at(long step, long total_steps, double max_lr, double warmup_frac) {
    if (total_steps < 1) throw usage_error("schedule needs at least one step");
    if (step < 0 || step > total_steps) throw usage_error("step outside the schedule");
    const long warmup = (long) std::ceil(warmup_frac * (double) total_steps);
    if (step <= warmup) {
        return warmup == 0 ? max_lr : max_lr * (double) step / (double) warmup;
    }
    return max_lr * (double) (total_steps - step) / (double) (total_steps - warmup);
}

void AdamW::init(const std::vector<Tensor<float> *> & params) {
    t = 0;
    m.clear();
    v.clear();
    for (const auto * p : params) {
        m.emplace_back(p->numel(), 0.0);
        v.emplace_back(p->numel(), 0.0);
    }
}

void AdamW::step(const std::vector<Tensor<float> *> & params, const std::vector<Tensor<float>> & grads, double lr) {
    if (params.size() != grads.size() || params.size() != m.size()) throw usage_error("optimizer state mismatch");
    ++t;
    const double c1 = 1.0 - std::pow(beta1, (double) t);
    const double c2 = 1.0 - std::pow(beta2, (double) t);
    for (size_t i = 0; i < params.size(); ++i) {
        auto &       pv = params[i]->data();
        const auto & gv = grads[i].data();
        if (gv.size() != pv.size()) throw usage_error("gradient shape mismatch");
        for (size_t j = 0; j < pv.size(); ++j) {
            const double g  = (double) gv[j];
            m[i][j]         = beta1 * m[i][j] + (1.0 - beta1) * g;
            v[i][j]         = beta2 * v[i][j] + (1.0 - beta2) * g * g;
            const double mh = m[i][j] / c1;
            const double vh = v[i][j] / c2;
            pv[j] = (float) ((double) pv[j] - lr * (mh / (std::sqrt(vh) + eps) + weight_decay * (double) pv[j]));
        }
    }
}

namespace {

// shortest-roundtrip decimal keeps logs byte-deterministic without noise
std::string fmt_double(double x) {
    char buf[32];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, x);
    return std::string(buf, end);
}

} // namespace

RevformerParams<float> pretrain_base(const std::string & corpus, const ModelConfig & cfg, int steps, uint64_t seed,
                                     const OptimSettings & opt, std::ostream * progress) {
    if (corpus.empty()) throw usage_error("empty corpus");
    if (steps < 1) throw usage_error("pretraining needs at least one step");
    const std::vector<int> bytes = tok::tokenize(corpus);

    RevformerParams<float> P = RevformerParams<float>::init_base(cfg, seed);
    auto params = P.base_arrays();
    for (auto * p : params) p->set_requires_grad(true);

    AdamW adam;
    adam.beta1        = opt.beta1;
    adam.beta2        = opt.beta2;
    adam.eps          = opt.eps;
    adam.weight_decay = opt.weight_decay;
    adam.init(params);

    std::mt19937_64 sample_rng(seed ^ 0x9e3779b97f4a7c15ULL);
    const int       win = std::min(cfg.window - 2, (int) bytes.size());
    const RunFlags  rf{};

    for (int step = 0; step < steps; ++step) {
        GradTape<float> tape;
        for (auto * p : params) tape.watch(*p);
        Tensor<float> sum;
        for (int b = 0; b < opt.batch_size; ++b) {
            size_t off = 0;
            if ((int) bytes.size() > win) {
                off = std::uniform_int_distribution<size_t>(0, bytes.size() - (size_t) win)(sample_rng);
            }
            std::vector<int> seq;
            seq.reserve((size_t) win + 2);
            seq.push_back(tok::BOS);
            seq.insert(seq.end(), bytes.begin() + (long) off, bytes.begin() + (long) off + win);
            seq.push_back(tok::EOS);
            Tensor<float> nll = span_nll(P, seq, 1, rf, false);
            sum = b == 0 ? nll : add(sum, nll);
        }
        Tensor<float> loss = scale(sum, 1.0f / (float) opt.batch_size);
        tape.backward(loss);
        std::vector<Tensor<float>> grads;
        grads.reserve(params.size());
        for (auto * p : params) grads.push_back(tape.grad(*p));
        adam.step(params, grads, lr_at(step, steps, opt.max_lr, opt.warmup_frac));
        if (progress && (step % 100 == 0 || step == steps - 1)) {
            *progress << "pretrain step " << step << " loss " << fmt_double((double) loss.at(0)) << "\n";
        }
    }
    for (auto * p : params) p->set_requires_grad(false);
    return P;
}

RevformerParams<float> train(const RevformerParams<float> & base, const std::vector<ContextQueryPair> & pairs,
                             int epochs, const LossWeights & weights, const OptimSettings & opt,
                             const CycleSettings & cs, uint64_t seed, const std::string & log_path,
                             TrainStats * stats) {
    if (pairs.empty()) throw usage_error("no training pairs");
    if (epochs < 1) throw usage_error("training needs at least one epoch");

    RevformerParams<float> P = base; // base tensors shared; only fresh adapters train
    if (P.has_adapters) throw usage_error("base checkpoint already carries adapters");
    P.attach_adapters(seed);
    const uint64_t frozen_hash = P.base_hash();

    auto trainables = P.trainable_arrays();
    for (auto * p : trainables) p->set_requires_grad(true);

    AdamW adam;
    adam.beta1        = opt.beta1;
    adam.beta2        = opt.beta2;
    adam.eps          = opt.eps;
    adam.weight_decay = opt.weight_decay;
    adam.init(trainables);

    const long n               = (long) pairs.size();
    const long steps_per_epoch = (n + opt.batch_size - 1) / opt.batch_size;
    const long total_steps     = (long) epochs * steps_per_epoch;

    std::mt19937_64 shuffle_rng(seed ^ 0x51909da4a3f2e2c7ULL);
    std::mt19937_64 dropout_rng(seed ^ 0xc2b2ae3d27d4eb4fULL);

    std::ofstream log;
    if (!log_path.empty()) {
        log.open(log_path, std::ios::binary);
        if (!log) throw usage_error("cannot open loss log for writing: " + log_path);
        log << "step,lr,loss_fwd,loss_bwd,loss_cycle,loss_total\n";
    }

    std::vector<size_t> order(pairs.size());
    std::iota(order.begin(), order.end(), (size_t) 0);

    long step = 0;
    int  empty_decodes = 0;
    double last_total = 0.0;
    for (int epoch = 0; epoch < epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        for (long start = 0; start < n; start += opt.batch_size) {
            const long      bn = std::min((long) opt.batch_size, n - start);
            GradTape<float> tape;
            for (auto * p : trainables) tape.watch(*p);
            const RunFlags rf{true, &dropout_rng};

            Tensor<float> sum;
            double        fwd_sum = 0, bwd_sum = 0, cyc_sum = 0;
            for (long b = 0; b < bn; ++b) {
                const auto & pair = pairs[order[(size_t) (start + b)]];
                LossBreakdown<float> lb = total_loss(P, pair, weights, cs, rf, &tape);
                fwd_sum += lb.fwd;
                bwd_sum += lb.bwd;
                cyc_sum += lb.cycle;
                if (lb.empty_decode) {
                    ++empty_decodes;
                    std::fprintf(stderr, "train step %ld: empty cycle decode for pair %s\n", step, pair.id.c_str());
                }
                sum = b == 0 ? lb.total : add(sum, lb.total);
            }
            Tensor<float> loss = scale(sum, 1.0f / (float) bn);
            tape.backward(loss);
            std::vector<Tensor<float>> grads;
            grads.reserve(trainables.size());
            for (auto * p : trainables) grads.push_back(tape.grad(*p));
            const double lr = lr_at(step, total_steps, opt.max_lr, opt.warmup_frac);
            adam.step(trainables, grads, lr);

            last_total = (double) loss.at(0);
            if (log) {
                log << step << "," << fmt_double(lr) << "," << fmt_double(fwd_sum / (double) bn) << ","
                    << fmt_double(bwd_sum / (double) bn) << "," << fmt_double(cyc_sum / (double) bn) << ","
                    << fmt_double(last_total) << "\n";
            }
            ++step;
        }
    }
    if (log) {
        log.flush();
        if (!log) throw usage_error("failed writing loss log: " + log_path);
    }
    if (P.base_hash() != frozen_hash) throw usage_error("base weights changed during fine-tuning");
    if (stats) {
        stats->steps         = step;
        stats->empty_decodes = empty_decodes;
        stats->final_total   = last_total;
        stats->base_hash     = frozen_hash;
    }
    return P;
}

} // namespace r3mem
