#pragma once

// Deterministic hierarchical pair construction: documents decompose into
// paragraphs, sentences and capitalised entity runs by fixed rules, then
// become context-query pairs at three granularities with length filters.

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "r3mem/tokenizer.hpp"

namespace r3mem {

enum class PairLevel { d2p, p2s, s2e };

const char * level_name(PairLevel level);
bool         level_from_name(std::string_view name, PairLevel & out);
int          level_tag(PairLevel level); // control-token id

struct ContextQueryPair {
    std::string id;
    PairLevel   level;
    std::string context; // the longer unit
    std::string query;   // the shorter unit, derived from context

    bool operator==(const ContextQueryPair &) const = default;
};

struct SentenceInfo {
    std::string              text;
    std::vector<std::string> entities; // first-occurrence order, deduplicated
};

struct ParagraphInfo {
    std::string               text;
    std::vector<SentenceInfo> sentences;
};

struct Decomposition {
    std::vector<ParagraphInfo> paragraphs;
};

Decomposition decompose(std::string_view text);

struct PairFilter {
    double min_para_frac = 0.20; // of document token length
    double min_sent_frac = 0.04; // of document token length, not the paragraph
};

std::vector<ContextQueryPair> build_pairs(std::string_view doc, const std::string & doc_id,
                                          const PairFilter & filter = {});

struct PairDataset {
    std::vector<ContextQueryPair> pairs;
    uint64_t                      seed = 0;
    PairFilter                    filter;
    uint64_t                      corpus_fingerprint = 0;

    size_t   count(PairLevel level) const;
    uint64_t fingerprint() const; // over pair contents, stable across write/read
};

// docs as (name, text); names key the pair ids and must be unique
PairDataset build_dataset(const std::vector<std::pair<std::string, std::string>> & docs, const PairFilter & filter = {},
                          uint64_t seed = 0);

void        write_pairs(const std::string & path, const PairDataset & ds);
PairDataset read_pairs(const std::string & path);

// training sequences
std::vector<int> forward_sequence_ids(PairLevel level, const std::vector<int> & c, const std::vector<int> & q);
std::vector<int> backward_sequence_ids(PairLevel level, const std::vector<int> & q, const std::vector<int> & c);
std::vector<int> forward_sequence(const ContextQueryPair & p);  // BOS tag c SEP q EOS
std::vector<int> backward_sequence(const ContextQueryPair & p); // BOS tag q SEP c EOS

} // namespace r3mem
