#include "r3mem/cli.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"

#include "r3mem/checkpoint.hpp"
#include "r3mem/errors.hpp"
#include "r3mem/eval.hpp"
#include "r3mem/hierpair.hpp"
#include "r3mem/trainer.hpp"

namespace r3mem {

namespace {

namespace fs = std::filesystem;

uint64_t default_seed() {
    if (const char * env = std::getenv("R3MEM_SEED")) {
        return std::strtoull(env, nullptr, 10);
    }
    return 42;
}

std::string read_file(const std::string & path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw usage_error("cannot open file: " + path);
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

// a directory yields one document per regular file, sorted by filename;
// a plain file is a single document
std::vector<std::pair<std::string, std::string>> read_docs(const std::string & path) {
    std::vector<std::pair<std::string, std::string>> docs;
    if (fs::is_directory(path)) {
        std::vector<fs::path> files;
        for (const auto & entry : fs::directory_iterator(path)) {
            if (entry.is_regular_file()) files.push_back(entry.path());
        }
        std::sort(files.begin(), files.end());
        for (const auto & f : files) docs.emplace_back(f.filename().string(), read_file(f.string()));
    } else {
        docs.emplace_back(fs::path(path).filename().string(), read_file(path));
    }
    return docs;
}

int run_build_pairs(const std::string & input, const std::string & output, double min_para, double min_sent,
                    uint64_t seed) {
    if (!fs::exists(input)) throw usage_error("input path does not exist: " + input);
    PairFilter filter{min_para, min_sent};
    const auto  docs = read_docs(input);
    PairDataset ds   = build_dataset(docs, filter, seed);
    write_pairs(output, ds);
    std::printf("wrote %zu pairs (%zu d2p, %zu p2s, %zu s2e) to %s\n", ds.pairs.size(), ds.count(PairLevel::d2p),
                ds.count(PairLevel::p2s), ds.count(PairLevel::s2e), output.c_str());
    return 0;
}

int run_pretrain(const std::string & corpus_path, const std::string & config_path, int steps, uint64_t seed,
                 const std::string & out, double max_lr, int batch) {
    ModelConfig cfg;
    if (!config_path.empty()) {
        cfg = ModelConfig::from_text(read_file(config_path)).first;
    }
    cfg.validate();
    OptimSettings opt;
    opt.max_lr     = max_lr;
    opt.batch_size = batch;
    std::string corpus;
    for (auto & [name, text] : read_docs(corpus_path)) corpus += text;
    RevformerParams<float> P = pretrain_base(corpus, cfg, steps, seed, opt, &std::cerr);
    save_checkpoint(out, P);
    std::printf("wrote base checkpoint to %s\n", out.c_str());
    return 0;
}

int run_train(const std::string & pairs_path, const std::string & base_path, int epochs, double lambda, uint64_t seed,
              const std::string & out, const std::string & log, double max_lr, int batch) {
    PairDataset ds = read_pairs(pairs_path);
    RevformerParams<float> base = load_checkpoint<float>(base_path);
    LossWeights w;
    w.lambda_cycle = lambda;
    OptimSettings opt;
    opt.max_lr     = max_lr;
    opt.batch_size = batch;
    TrainStats stats;
    RevformerParams<float> P = train(base, ds.pairs, epochs, w, opt, CycleSettings{}, seed, log, &stats);
    save_checkpoint(out, P);
    std::printf("trained %ld steps (%d empty cycle decodes), final loss %g, checkpoint %s\n", stats.steps,
                stats.empty_decodes, stats.final_total, out.c_str());
    return 0;
}

int run_eval_ppl(const std::string & model_path, const std::string & corpus_path, int segment_len,
                 const std::string & out) {
    RevformerParams<float> P = load_checkpoint<float>(model_path);
    std::vector<std::string> docs;
    for (auto & [name, text] : read_docs(corpus_path)) docs.push_back(text);
    const PplResult r = eval_perplexity(P, docs, segment_len);
    const std::string fp = config_fingerprint(P.cfg, P.has_adapters);
    write_metrics_csv(out, {{"eval-ppl", "ppl", r.ppl, r.n_tokens, fp},
                            {"eval-ppl", "mean_nll", r.mean_nll, r.n_tokens, fp}});
    std::printf("ppl %.6f over %ld tokens\n", r.ppl, r.n_tokens);
    return 0;
}

int run_eval_recon(const std::string & model_path, const std::string & pairs_path, const std::string & out) {
    RevformerParams<float> P  = load_checkpoint<float>(model_path);
    PairDataset            ds = read_pairs(pairs_path);
    const ReconResult      r  = eval_reconstruction(P, ds.pairs);
    const std::string      fp = config_fingerprint(P.cfg, P.has_adapters);
    write_metrics_csv(out, {{"eval-recon", "token_f1", r.mean_f1, (long) ds.pairs.size(), fp},
                            {"eval-recon", "exact_match", r.em_rate, (long) ds.pairs.size(), fp}});
    std::printf("token F1 %.4f, exact match %.4f over %zu pairs\n", r.mean_f1, r.em_rate, ds.pairs.size());
    return 0;
}

int run_check_invert(const std::string & model_path, int trials, double tol, int precision, uint64_t seed) {
    AuditReport rep;
    if (precision == 64) {
        rep = check_invert(load_checkpoint<double>(model_path), trials, tol, seed);
    } else {
        rep = check_invert(load_checkpoint<float>(model_path), trials, tol, seed);
    }
    for (size_t b = 0; b < rep.block_max_err.size(); ++b) {
        std::printf("block %zu max reconstruction error %.3e\n", b, rep.block_max_err[b]);
    }
    std::printf("stack max reconstruction error %.3e over %d trials (tol %.3e): %s\n", rep.stack_max_err, rep.trials,
                rep.tol, rep.pass ? "PASS" : "FAIL");
    return rep.pass ? 0 : 1;
}

int run_generate(const std::string & model_path, const std::string & direction, const std::string & prompt,
                 int max_len, const std::string & level_name_str) {
    RevformerParams<float> P = load_checkpoint<float>(model_path);
    std::vector<int> ids;
    ids.push_back(tok::BOS);
    if (!level_name_str.empty()) {
        PairLevel level;
        if (!level_from_name(level_name_str, level)) throw usage_error("unknown level: " + level_name_str);
        ids.push_back(level_tag(level));
    }
    for (int id : tok::tokenize(prompt)) ids.push_back(id);
    ids.push_back(tok::SEP);
    const Direction dir = direction == "bwd" ? Direction::bwd : Direction::fwd;
    const auto      out = generate(P, dir, ids, max_len, tok::EOS);
    std::printf("%s\n", tok::detokenize(out).c_str());
    return 0;
}

} // namespace

int cli_main(int argc, const char * const * argv) {
    CLI::App app{"reversible memory transformer toolkit"};
    app.require_subcommand(1);
    const uint64_t seed_default = default_seed();

    // build-pairs
    auto * bp = app.add_subcommand("build-pairs", "construct hierarchical context-query pairs");
    std::string bp_input, bp_output;
    double      bp_para = 0.20, bp_sent = 0.04;
    uint64_t    bp_seed = seed_default;
    bp->add_option("--input", bp_input, "corpus directory or file")->required();
    bp->add_option("--output", bp_output, "output JSONL path")->required();
    bp->add_option("--min-para-frac", bp_para, "paragraph retention threshold");
    bp->add_option("--min-sent-frac", bp_sent, "sentence retention threshold");
    bp->add_option("--seed", bp_seed, "builder seed (recorded in the dataset)");

    // pretrain
    auto * pt = app.add_subcommand("pretrain", "train the plain base decoder");
    std::string pt_corpus, pt_config, pt_out;
    int         pt_steps = 2000, pt_batch = 2;
    uint64_t    pt_seed = seed_default;
    double      pt_lr   = 2e-3;
    pt->add_option("--corpus", pt_corpus, "training text file or directory")->required();
    pt->add_option("--config", pt_config, "model config file (key=value lines)");
    pt->add_option("--steps", pt_steps, "optimisation steps");
    pt->add_option("--seed", pt_seed, "seed");
    pt->add_option("--out", pt_out, "checkpoint path")->required();
    pt->add_option("--lr", pt_lr, "maximum learning rate");
    pt->add_option("--batch", pt_batch, "batch size");

    // train
    auto * tr = app.add_subcommand("train", "fine-tune adapters and memory tokens on pairs");
    std::string tr_pairs, tr_base, tr_out, tr_log;
    int         tr_epochs = 2, tr_batch = 2;
    double      tr_lambda = 0.5, tr_lr = 2e-3;
    uint64_t    tr_seed = seed_default;
    tr->add_option("--pairs", tr_pairs, "pair JSONL file")->required();
    tr->add_option("--base", tr_base, "base checkpoint")->required();
    tr->add_option("--epochs", tr_epochs, "training epochs");
    tr->add_option("--lambda", tr_lambda, "cycle loss weight");
    tr->add_option("--seed", tr_seed, "seed");
    tr->add_option("--out", tr_out, "output checkpoint path")->required();
    tr->add_option("--log", tr_log, "per-step loss log CSV path");
    tr->add_option("--lr", tr_lr, "maximum learning rate");
    tr->add_option("--batch", tr_batch, "batch size");

    // eval-ppl
    auto * ep = app.add_subcommand("eval-ppl", "segmented perplexity over documents");
    std::string ep_model, ep_corpus, ep_out;
    int         ep_seg = 0;
    ep->add_option("--model", ep_model, "checkpoint")->required();
    ep->add_option("--corpus", ep_corpus, "document file or directory")->required();
    ep->add_option("--segment-len", ep_seg, "content tokens per segment (0 = capacity)");
    ep->add_option("--out", ep_out, "metrics CSV path")->required();

    // eval-recon
    auto * er = app.add_subcommand("eval-recon", "backward reconstruction metrics over pairs");
    std::string er_model, er_pairs, er_out;
    er->add_option("--model", er_model, "checkpoint")->required();
    er->add_option("--pairs", er_pairs, "pair JSONL file")->required();
    er->add_option("--out", er_out, "metrics CSV path")->required();

    // check-invert
    auto * ci = app.add_subcommand("check-invert", "coupling invertibility audit");
    std::string ci_model;
    int         ci_trials = 100, ci_precision = 32;
    double      ci_tol = 1e-4;
    uint64_t    ci_seed = seed_default;
    ci->add_option("--model", ci_model, "checkpoint")->required();
    ci->add_option("--trials", ci_trials, "random trials");
    ci->add_option("--tol", ci_tol, "maximum allowed reconstruction error");
    ci->add_option("--precision", ci_precision, "32 or 64")->check(CLI::IsMember({32, 64}));
    ci->add_option("--seed", ci_seed, "seed");

    // generate
    auto * ge = app.add_subcommand("generate", "greedy generation from a text prompt");
    std::string ge_model, ge_dir = "fwd", ge_prompt, ge_level;
    int         ge_max = 64;
    ge->add_option("--model", ge_model, "checkpoint")->required();
    ge->add_option("--direction", ge_dir, "fwd or bwd")->check(CLI::IsMember({"fwd", "bwd"}));
    ge->add_option("--prompt", ge_prompt, "prompt text")->required();
    ge->add_option("--max-len", ge_max, "maximum new tokens");
    ge->add_option("--level", ge_level, "optional granularity tag (d2p|p2s|s2e)");

    try {
        app.parse(argc, argv);
        if (bp->parsed()) return run_build_pairs(bp_input, bp_output, bp_para, bp_sent, bp_seed);
        if (pt->parsed()) return run_pretrain(pt_corpus, pt_config, pt_steps, pt_seed, pt_out, pt_lr, pt_batch);
        if (tr->parsed()) {
            return run_train(tr_pairs, tr_base, tr_epochs, tr_lambda, tr_seed, tr_out, tr_log, tr_lr, tr_batch);
        }
        if (ep->parsed()) return run_eval_ppl(ep_model, ep_corpus, ep_seg, ep_out);
        if (er->parsed()) return run_eval_recon(er_model, er_pairs, er_out);
        if (ci->parsed()) return run_check_invert(ci_model, ci_trials, ci_tol, ci_precision, ci_seed);
        if (ge->parsed()) return run_generate(ge_model, ge_dir, ge_prompt, ge_max, ge_level);
        return 2;
    } catch (const CLI::CallForHelp & e) {
        return app.exit(e); // prints help, exit 0
    } catch (const CLI::CallForAllHelp & e) {
        return app.exit(e);
    } catch (const CLI::ParseError & e) {
        app.exit(e); // prints the parse diagnostic
        return 2;
    } catch (const usage_error & e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception & e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}

} // namespace r3mem
