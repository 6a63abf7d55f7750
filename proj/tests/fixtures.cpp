#include "fixtures.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <sstream>

namespace fixtures {

namespace {

const char * const kNames[] = {
    "Alder",   "Brook",   "Calder",  "Dunmore", "Elmsworth", "Farley",  "Garnet",  "Hale",
    "Iris",    "Juniper", "Kestrel", "Larch",   "Marlow",    "Norvell", "Orchard", "Penrose",
    "Quill",   "Rowan",   "Selwyn",  "Thorne",  "Umber",     "Vane",    "Wexford", "Yarrow",
    "Ashby",   "Bellamy", "Crane",   "Drummond","Ellison",   "Fenwick", "Griswold","Hollis",
    "Ingram",  "Jessop",  "Kirby",   "Lovell",  "Merrick",   "Nash",    "Osgood",  "Pryor",
};
constexpr int kNumNames = int(sizeof(kNames) / sizeof(kNames[0]));

const char * const kTitles[] = {"Dr.", "Mr.", "Mrs.", "Prof."};

// every sentence is a rigid frame with one entity slot and an optional
// lowercase tail, so document bytes are dominated by reusable structure and
// the entities carry the information (the same shape the pair builder's
// extractor keys on); the tail never reaches the entity query, so it is
// recoverable only from the surrounding sentence
const char * const kFrames[] = {
    "The keeper wrote to ",       "A grey boat carried ",      "The mill lamp burned for ",
    "Carts from the market met ", "The school bell rang for ", "Harbour wind followed ",
    "The last ferry waited for ", "The quiet garden held ",
};
constexpr int kNumFrames = int(sizeof(kFrames) / sizeof(kFrames[0]));

const char * const kTails[] = {"", " at dusk", " after the rain"};
constexpr int      kNumTails = int(sizeof(kTails) / sizeof(kTails[0]));

std::string pick_name(std::mt19937_64 & rng) {
    std::string n = kNames[rng() % kNumNames];
    if (rng() % 8 == 0) n = std::string(kTitles[rng() % 4]) + " " + n;
    if (rng() % 10 == 0) n += std::string(" ") + kNames[rng() % kNumNames];
    return n;
}

} // namespace

std::string gen_sentence(std::mt19937_64 & rng) {
    return std::string(kFrames[rng() % kNumFrames]) + pick_name(rng) + kTails[rng() % kNumTails] + ".";
}

std::string gen_paragraph(std::mt19937_64 & rng, int sentences) {
    std::string p;
    for (int i = 0; i < sentences; ++i) {
        if (i > 0) p += ' ';
        p += gen_sentence(rng);
    }
    return p;
}

std::string gen_document(std::mt19937_64 & rng, int paragraphs, int sentences) {
    std::string d;
    for (int i = 0; i < paragraphs; ++i) {
        if (i > 0) d += "\n\n";
        d += gen_paragraph(rng, sentences);
    }
    return d;
}

std::string gen_corpus(uint64_t seed, size_t target_bytes) {
    std::mt19937_64 rng(seed);
    std::string out;
    out.reserve(target_bytes + 256);
    while (out.size() < target_bytes) {
        out += gen_paragraph(rng, 2 + int(rng() % 3));
        out += "\n\n";
    }
    out.resize(target_bytes);
    return out;
}

std::vector<std::pair<std::string, std::string>> gen_docs(uint64_t seed, int n_docs) {
    std::mt19937_64 rng(seed);
    std::vector<std::pair<std::string, std::string>> docs;
    docs.reserve(size_t(n_docs));
    for (int i = 0; i < n_docs; ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "doc%03d.txt", i);
        docs.emplace_back(name, gen_document(rng, 2, 2));
    }
    return docs;
}

std::vector<r3mem::ContextQueryPair> gen_training_pairs(uint64_t seed, int n_pairs, size_t max_context,
                                                        size_t max_seq, std::vector<std::string> * src_docs) {
    for (int n_docs = std::max(n_pairs, 4); n_docs <= 1 << 16; n_docs *= 2) {
        std::vector<r3mem::ContextQueryPair> out;
        std::vector<std::string>             used, seen_q, seen_c;
        auto docs = gen_docs(seed, n_docs);
        auto ds   = r3mem::build_dataset(docs, r3mem::PairFilter{}, seed);
        for (auto & p : ds.pairs) {
            const size_t seq = 4 + p.context.size() + p.query.size();
            if (p.context.size() > max_context || seq > max_seq || p.query.empty()) continue;
            // keep only single bare-name queries, each name and context used
            // once: queries sharing name tokens collide in the reverse
            // direction (the shared bytes dominate the key), and titled or
            // compound variants are subsets/supersets of the bare form
            if (p.query.find(' ') != std::string::npos) continue;
            if (std::find(seen_q.begin(), seen_q.end(), p.query) != seen_q.end()) continue;
            if (std::find(seen_c.begin(), seen_c.end(), p.context) != seen_c.end()) continue;
            seen_q.push_back(p.query);
            seen_c.push_back(p.context);
            out.push_back(p);
            const std::string name = p.id.substr(0, p.id.find(':'));
            for (auto & [dn, dt] : docs) {
                if (dn == name && std::find(used.begin(), used.end(), dt) == used.end()) used.push_back(dt);
            }
            if (int(out.size()) == n_pairs) {
                if (src_docs) *src_docs = std::move(used);
                return out;
            }
        }
    }
    throw std::runtime_error("gen_training_pairs: constraints unsatisfiable");
}

r3mem::ModelConfig micro_config() {
    r3mem::ModelConfig cfg;
    cfg.d_model = 32;
    cfg.n_heads = 2;
    cfg.n_layers = 2;
    cfg.ffn_dim = 64;
    cfg.window = 64;
    cfg.mem_tokens = 4;
    cfg.adapter_rank = 4;
    cfg.adapter_scale = 8.0;
    cfg.dropout = 0.1;
    return cfg;
}

r3mem::ModelConfig accept_config() {
    r3mem::ModelConfig cfg;
    cfg.d_model = 64;
    cfg.n_heads = 4;
    cfg.n_layers = 4;
    cfg.ffn_dim = 256;
    cfg.window = 192;
    cfg.mem_tokens = 8;
    // memorization-heavy fine-tuning: generous rank, same alpha/r scale,
    // no dropout (the grid overfits 32 fixed pairs on purpose)
    cfg.adapter_rank = 32;
    cfg.adapter_scale = 128.0;
    cfg.dropout = 0.0;
    return cfg;
}

} // namespace fixtures
