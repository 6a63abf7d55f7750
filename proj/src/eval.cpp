#include "r3mem/eval.hpp"

#include <array>
#include <charconv>
#include <cmath>
#include <fstream>

#include "r3mem/errors.hpp"
#include "r3mem/trainer.hpp"

namespace r3mem {

namespace {

std::string fmt_double(double x) {
    char buf[32];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, x);
    return std::string(buf, end);
}

// independent of the tensor-op softmax: double log-sum-exp per row
double row_nll(const float * row, int V, int target) {
    double mx = row[0];
    for (int j = 1; j < V; ++j) mx = std::max(mx, (double) row[j]);
    double sum = 0.0;
    for (int j = 0; j < V; ++j) sum += std::exp((double) row[j] - mx);
    return -((double) row[target] - mx - std::log(sum));
}

} // namespace

void write_metrics_csv(const std::string & path, const std::vector<MetricsRow> & rows) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw usage_error("cannot open metrics file for writing: " + path);
    os << "task,metric,value,n_samples,config\n";
    for (const auto & r : rows) {
        if (!std::isfinite(r.value)) throw numeric_error("metric '" + r.metric + "' is not finite");
        os << r.task << "," << r.metric << "," << fmt_double(r.value) << "," << r.n_samples << "," << r.config << "\n";
    }
    if (!os) throw usage_error("failed writing metrics file: " + path);
}

std::string config_fingerprint(const ModelConfig & cfg, bool has_adapters) {
    return hex64(fnv1a(cfg.to_text(has_adapters)));
}

PplResult eval_perplexity(const RevformerParams<float> & P, const std::vector<std::string> & docs, int segment_len) {
    if (docs.empty()) throw usage_error("empty corpus");
    const RunFlags off{};
    double         total = 0.0;
    long           count = 0;
    for (const auto & doc : docs) {
        std::vector<int> ids;
        ids.reserve(doc.size() + 2);
        ids.push_back(tok::BOS);
        for (unsigned char c : doc) ids.push_back((int) c);
        ids.push_back(tok::EOS);
        const Tensor<float> logits =
            forward_segmented(P, ids, off, (SegmentTrace<float> *) nullptr, segment_len).logits;
        const int           V      = P.cfg.vocab_size;
        for (size_t t = 1; t < ids.size(); ++t) {
            total += row_nll(logits.data().data() + (t - 1) * (size_t) V, V, ids[t]);
            ++count;
        }
    }
    PplResult r;
    r.n_tokens = count;
    r.mean_nll = total / (double) count;
    r.ppl      = std::exp(r.mean_nll);
    return r;
}

PplResult eval_query_ppl(const RevformerParams<float> & P, const std::vector<ContextQueryPair> & pairs) {
    if (pairs.empty()) throw usage_error("no pairs to evaluate");
    const RunFlags off{};
    double         total = 0.0;
    long           count = 0;
    for (const auto & pair : pairs) {
        const auto seq          = forward_sequence(pair);
        const int  target_begin = 2 + (int) tok::tokenize(pair.context).size() + 1;
        const Tensor<float> logits = forward_segmented(P, seq, off).logits;
        const int           V      = P.cfg.vocab_size;
        for (int t = target_begin; t < (int) seq.size(); ++t) {
            total += row_nll(logits.data().data() + (size_t) (t - 1) * (size_t) V, V, seq[(size_t) t]);
            ++count;
        }
    }
    PplResult r;
    r.n_tokens = count;
    r.mean_nll = total / (double) count;
    r.ppl      = std::exp(r.mean_nll);
    return r;
}

double token_f1(const std::vector<int> & pred, const std::vector<int> & ref) {
    std::array<int, 256> pc{}, rc{};
    long                 np = 0, nr = 0;
    for (int id : pred) {
        if (tok::is_byte(id)) {
            ++pc[(size_t) id];
            ++np;
        }
    }
    for (int id : ref) {
        if (tok::is_byte(id)) {
            ++rc[(size_t) id];
            ++nr;
        }
    }
    if (np == 0 && nr == 0) return 1.0;
    if (np == 0 || nr == 0) return 0.0;
    long overlap = 0;
    for (size_t i = 0; i < 256; ++i) overlap += std::min(pc[i], rc[i]);
    if (overlap == 0) return 0.0;
    const double p = (double) overlap / (double) np;
    const double r = (double) overlap / (double) nr;
    return 2.0 * p * r / (p + r);
}

ReconResult eval_reconstruction(const RevformerParams<float> & P, const std::vector<ContextQueryPair> & pairs,
                                double budget_mult) {
    if (pairs.empty()) throw usage_error("no pairs to evaluate");
    ReconResult out;
    long        em = 0;
    double      f1_sum = 0.0;
    for (const auto & pair : pairs) {
        const auto c_ids = tok::tokenize(pair.context);
        const auto q_ids = tok::tokenize(pair.query);
        std::vector<int> prompt;
        prompt.push_back(tok::BOS);
        prompt.push_back(level_tag(pair.level));
        prompt.insert(prompt.end(), q_ids.begin(), q_ids.end());
        prompt.push_back(tok::SEP);
        const int budget  = (int) std::ceil(budget_mult * (double) c_ids.size());
        const auto decoded = generate(P, Direction::bwd, prompt, budget, tok::EOS);
        std::vector<int> pred_bytes;
        for (int id : decoded) {
            if (tok::is_byte(id)) pred_bytes.push_back(id);
        }
        const double f1 = token_f1(pred_bytes, c_ids);
        const bool   exact = pred_bytes == c_ids;
        out.per_pair_f1.push_back(f1);
        out.per_pair_em.push_back(exact ? 1 : 0);
        out.decoded.push_back(tok::detokenize(decoded));
        f1_sum += f1;
        em += exact ? 1 : 0;
    }
    out.mean_f1 = f1_sum / (double) pairs.size();
    out.em_rate = (double) em / (double) pairs.size();
    return out;
}

double mean_backward_nll(const RevformerParams<float> & P, const std::vector<ContextQueryPair> & pairs) {
    if (pairs.empty()) throw usage_error("no pairs to evaluate");
    const RunFlags off{};
    double         sum = 0.0;
    for (const auto & pair : pairs) sum += (double) backward_loss(P, pair, off).at(0);
    return sum / (double) pairs.size();
}

} // namespace r3mem
