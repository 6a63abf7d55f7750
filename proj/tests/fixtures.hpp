#pragma once

// Deterministic fixture corpus: pseudo-English with capitalised names and the
// occasional abbreviation, sized so pair contexts stay short enough for
// single-window backward passes.

#include <algorithm>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "r3mem/hierpair.hpp"
#include "r3mem/model.hpp"

namespace fixtures {

std::string gen_sentence(std::mt19937_64 & rng);
std::string gen_paragraph(std::mt19937_64 & rng, int sentences);
std::string gen_document(std::mt19937_64 & rng, int paragraphs, int sentences);

// flowing text for byte-level pretraining
std::string gen_corpus(uint64_t seed, size_t target_bytes);

// named micro-documents for the pair builder (one or two short paragraphs)
std::vector<std::pair<std::string, std::string>> gen_docs(uint64_t seed, int n_docs);

// hierarchical pairs built from micro-documents; contexts stay under
// max_context bytes and BOS tag c SEP q EOS under max_seq, so both directions
// fit the window; src_docs (optional) receives the documents the retained
// pairs were cut from
std::vector<r3mem::ContextQueryPair> gen_training_pairs(uint64_t seed, int n_pairs, size_t max_context = 120,
                                                        size_t max_seq = 186,
                                                        std::vector<std::string> * src_docs = nullptr);

// tiny configs used across tests
r3mem::ModelConfig micro_config();   // 2 blocks, d=32
r3mem::ModelConfig accept_config();  // the acceptance-run model

// base + adapters with random (non-zero) up projections: a stand-in for a
// trained model where exact zeros would hide arithmetic
template <typename T>
r3mem::RevformerParams<T> rand_params(const r3mem::ModelConfig & cfg, uint64_t seed) {
    auto P = r3mem::RevformerParams<T>::init_base(cfg, seed);
    P.attach_adapters(seed + 1);
    std::mt19937_64 rng(seed + 2);
    for (auto & a : P.adapters) {
        a.f.up = r3mem::Tensor<T>::randn(a.f.up.shape(), rng, 0.02);
        a.g.up = r3mem::Tensor<T>::randn(a.g.up.shape(), rng, 0.02);
    }
    return P;
}

// every weight zero: F and G vanish and the whole stack is the identity
template <typename T>
r3mem::RevformerParams<T> zero_params(const r3mem::ModelConfig & cfg, bool with_adapters) {
    auto P = r3mem::RevformerParams<T>::init_base(cfg, 0);
    for (auto * t : P.base_arrays()) std::fill(t->data().begin(), t->data().end(), T(0));
    if (with_adapters) {
        P.attach_adapters(0);
        for (auto * t : P.trainable_arrays()) std::fill(t->data().begin(), t->data().end(), T(0));
    }
    return P;
}

} // namespace fixtures
