#include "r3mem/hierpair.hpp"

#include <cctype>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

#include "r3mem/errors.hpp"
#include "r3mem/hash.hpp"

namespace r3mem {

const char * level_name(PairLevel level) {
    switch (level) {
        case PairLevel::d2p: return "d2p";
        case PairLevel::p2s: return "p2s";
        case PairLevel::s2e: return "s2e";
    }
    return "?";
}

bool level_from_name(std::string_view name, PairLevel & out) {
    if (name == "d2p") { out = PairLevel::d2p; return true; }
    if (name == "p2s") { out = PairLevel::p2s; return true; }
    if (name == "s2e") { out = PairLevel::s2e; return true; }
    return false;
}

int level_tag(PairLevel level) {
    switch (level) {
        case PairLevel::d2p: return tok::D2P;
        case PairLevel::p2s: return tok::P2S;
        case PairLevel::s2e: return tok::S2E;
    }
    return tok::PAD;
}

namespace {

bool blank(std::string_view line) {
    for (char c : line) {
        if (!std::isspace((unsigned char) c)) return false;
    }
    return true;
}

std::string trim(std::string_view s) {
    size_t b = 0, e = s.size();
    while (b < e && std::isspace((unsigned char) s[b])) ++b;
    while (e > b && std::isspace((unsigned char) s[e - 1])) --e;
    return std::string(s.substr(b, e - b));
}

// tokens that legitimately end in '.' mid-sentence
const std::set<std::string> & abbreviations() {
    static const std::set<std::string> abbr = {
        "Dr.",  "Mr.",   "Mrs.",  "Ms.",  "Prof.", "St.",  "Jr.",  "Sr.",  "Rev.", "Gen.",
        "Col.", "Capt.", "Lt.",   "Sgt.", "Hon.",  "Pres.", "Gov.", "Sen.", "Rep.", "Mt.",
        "Ft.",  "vs.",   "etc.",  "e.g.", "i.e.",  "cf.",  "Fig.", "No.",  "Vol.", "pp.",
        "Inc.", "Ltd.",  "Co.",   "Corp.", "approx.",
    };
    return abbr;
}

// word ending at dot position i (letters and internal dots), dot included
std::string word_ending_at(std::string_view s, size_t i) {
    size_t b = i;
    while (b > 0) {
        const char c = s[b - 1];
        if (std::isalpha((unsigned char) c) || c == '.') --b;
        else break;
    }
    return std::string(s.substr(b, i - b + 1));
}

bool is_abbreviation(std::string_view s, size_t dot) {
    const std::string w = word_ending_at(s, dot);
    if (abbreviations().count(w)) return true;
    // single-letter initials such as "J."
    if (w.size() == 2 && std::isupper((unsigned char) w[0])) return true;
    return false;
}

std::vector<std::string> split_sentences(std::string_view para) {
    std::vector<std::string> out;
    size_t start = 0;
    size_t i     = 0;
    const size_t n = para.size();
    while (i < n) {
        const char c = para[i];
        if (c != '.' && c != '?' && c != '!') {
            ++i;
            continue;
        }
        // swallow terminator runs such as "..." or "?!"
        size_t run_end = i + 1;
        while (run_end < n && (para[run_end] == '.' || para[run_end] == '?' || para[run_end] == '!')) ++run_end;
        const bool abbrev = (c == '.' && run_end == i + 1 && is_abbreviation(para, i));
        size_t j = run_end;
        while (j < n && std::isspace((unsigned char) para[j])) ++j;
        if (!abbrev && j > run_end && j < n && std::isupper((unsigned char) para[j])) {
            const std::string s = trim(para.substr(start, run_end - start));
            if (!s.empty()) out.push_back(s);
            start = j;
            i     = j;
            continue;
        }
        i = run_end;
    }
    const std::string last = trim(para.substr(start));
    if (!last.empty()) out.push_back(last);
    return out;
}

std::string strip_punct(std::string_view tok) {
    size_t b = 0, e = tok.size();
    while (b < e && !std::isalnum((unsigned char) tok[b])) ++b;
    while (e > b && !std::isalnum((unsigned char) tok[e - 1])) --e;
    return std::string(tok.substr(b, e - b));
}

// capitalized token runs, excluding the run that starts the sentence
std::vector<std::string> extract_entities(std::string_view sentence) {
    std::vector<std::string> words;
    {
        std::istringstream is{std::string(sentence)};
        std::string        w;
        while (is >> w) words.push_back(w);
    }
    std::vector<std::string> entities;
    std::set<std::string>    seen;
    size_t                   i = 0;
    while (i < words.size()) {
        const std::string w = strip_punct(words[i]);
        if (w.empty() || !std::isupper((unsigned char) w[0])) {
            ++i;
            continue;
        }
        const size_t run_start = i;
        std::string  entity    = w;
        ++i;
        while (i < words.size()) {
            const std::string v = strip_punct(words[i]);
            if (v.empty() || !std::isupper((unsigned char) v[0])) break;
            entity += " " + v;
            ++i;
        }
        if (run_start == 0) continue; // sentence-initial capitalisation carries no signal
        if (seen.insert(entity).second) entities.push_back(entity);
    }
    return entities;
}

} // namespace

Decomposition decompose(std::string_view text) {
    Decomposition d;
    std::vector<std::string> para_lines;
    auto flush = [&] {
        if (para_lines.empty()) return;
        std::string p;
        for (size_t i = 0; i < para_lines.size(); ++i) {
            if (i) p += "\n";
            p += para_lines[i];
        }
        p = trim(p);
        para_lines.clear();
        if (p.empty()) return;
        ParagraphInfo info;
        info.text = p;
        for (auto & s : split_sentences(info.text)) {
            info.sentences.push_back({s, extract_entities(s)});
        }
        d.paragraphs.push_back(std::move(info));
    };
    size_t pos = 0;
    while (pos <= text.size()) {
        const size_t      nl   = text.find('\n', pos);
        const std::string line = std::string(text.substr(pos, (nl == std::string_view::npos ? text.size() : nl) - pos));
        if (blank(line)) {
            flush();
        } else {
            para_lines.push_back(line);
        }
        if (nl == std::string_view::npos) break;
        pos = nl + 1;
    }
    flush();
    return d;
}

namespace {

size_t token_len(std::string_view s) {
    return s.size(); // byte-level tokenizer: one token per byte
}

// inclusive boundary; the epsilon absorbs binary representation error in
// frac * len (0.20 * 100 must retain a 20-token unit)
bool passes(size_t unit_len, double frac, size_t doc_len) {
    return (double) unit_len >= frac * (double) doc_len - 1e-9;
}

} // namespace

std::vector<ContextQueryPair> build_pairs(std::string_view doc, const std::string & doc_id, const PairFilter & filter) {
    if (filter.min_para_frac < 0.0 || filter.min_para_frac > 1.0 || filter.min_sent_frac < 0.0 ||
        filter.min_sent_frac > 1.0) {
        throw usage_error("pair filter thresholds must lie in [0, 1]");
    }
    std::vector<ContextQueryPair> out;
    const Decomposition d       = decompose(doc);
    const size_t        doc_len = token_len(doc);
    const std::string   doc_text = trim(doc);
    if (doc_text.empty()) return out;
    int n_d2p = 0, n_p2s = 0, n_s2e = 0;
    auto make_id = [&](const char * level, int & n) {
        return doc_id + ":" + level + ":" + std::to_string(n++);
    };
    for (const auto & para : d.paragraphs) {
        if (passes(token_len(para.text), filter.min_para_frac, doc_len)) {
            out.push_back({make_id("d2p", n_d2p), PairLevel::d2p, doc_text, para.text});
        }
        for (const auto & sent : para.sentences) {
            if (!passes(token_len(sent.text), filter.min_sent_frac, doc_len)) continue;
            out.push_back({make_id("p2s", n_p2s), PairLevel::p2s, para.text, sent.text});
            if (!sent.entities.empty()) {
                std::string q;
                for (size_t i = 0; i < sent.entities.size(); ++i) {
                    if (i) q += ", ";
                    q += sent.entities[i];
                }
                out.push_back({make_id("s2e", n_s2e), PairLevel::s2e, sent.text, q});
            }
        }
    }
    return out;
}

size_t PairDataset::count(PairLevel level) const {
    size_t n = 0;
    for (const auto & p : pairs) n += p.level == level ? 1 : 0;
    return n;
}

uint64_t PairDataset::fingerprint() const {
    uint64_t h = 14695981039346656037ULL;
    for (const auto & p : pairs) {
        h = fnv1a(p.id, h);
        h = fnv1a("\0", 1, h);
        h = fnv1a(std::string(level_name(p.level)), h);
        h = fnv1a("\0", 1, h);
        h = fnv1a(p.context, h);
        h = fnv1a("\0", 1, h);
        h = fnv1a(p.query, h);
        h = fnv1a("\0", 1, h);
    }
    return h;
}

PairDataset build_dataset(const std::vector<std::pair<std::string, std::string>> & docs, const PairFilter & filter,
                          uint64_t seed) {
    PairDataset ds;
    ds.seed   = seed;
    ds.filter = filter;
    uint64_t ch = 14695981039346656037ULL;
    for (const auto & [name, text] : docs) {
        ch = fnv1a(name, ch);
        ch = fnv1a("\0", 1, ch);
        ch = fnv1a(text, ch);
        ch = fnv1a("\0", 1, ch);
        auto pairs = build_pairs(text, name, filter);
        ds.pairs.insert(ds.pairs.end(), pairs.begin(), pairs.end());
    }
    ds.corpus_fingerprint = ch;
    return ds;
}

void write_pairs(const std::string & path, const PairDataset & ds) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw usage_error("cannot open pair file for writing: " + path);
    for (const auto & p : ds.pairs) {
        nlohmann::json j;
        j["id"]      = p.id;
        j["level"]   = level_name(p.level);
        j["context"] = p.context;
        j["query"]   = p.query;
        os << j.dump() << "\n";
    }
    if (!os) throw usage_error("failed writing pair file: " + path);
}

PairDataset read_pairs(const std::string & path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw usage_error("cannot open pair file: " + path);
    PairDataset ds;
    std::string line;
    size_t      line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) throw parse_error("empty line in pair file", line_no);
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception & e) {
            throw parse_error(std::string("invalid JSON: ") + e.what(), line_no);
        }
        for (const char * field : {"id", "level", "context", "query"}) {
            if (!j.contains(field) || !j[field].is_string()) {
                throw parse_error(std::string("missing string field '") + field + "'", line_no);
            }
        }
        ContextQueryPair p;
        p.id = j["id"].get<std::string>();
        if (!level_from_name(j["level"].get<std::string>(), p.level)) {
            throw parse_error("invalid level '" + j["level"].get<std::string>() + "'", line_no);
        }
        p.context = j["context"].get<std::string>();
        p.query   = j["query"].get<std::string>();
        if (p.context.empty()) throw parse_error("empty context", line_no);
        if (p.query.empty()) throw parse_error("empty query", line_no);
        ds.pairs.push_back(std::move(p));
    }
    ds.corpus_fingerprint = ds.fingerprint();
    return ds;
}

std::vector<int> forward_sequence_ids(PairLevel level, const std::vector<int> & c, const std::vector<int> & q) {
    std::vector<int> seq;
    seq.reserve(c.size() + q.size() + 4);
    seq.push_back(tok::BOS);
    seq.push_back(level_tag(level));
    seq.insert(seq.end(), c.begin(), c.end());
    seq.push_back(tok::SEP);
    seq.insert(seq.end(), q.begin(), q.end());
    seq.push_back(tok::EOS);
    return seq;
}

std::vector<int> backward_sequence_ids(PairLevel level, const std::vector<int> & q, const std::vector<int> & c) {
    std::vector<int> seq;
    seq.reserve(c.size() + q.size() + 4);
    seq.push_back(tok::BOS);
    seq.push_back(level_tag(level));
    seq.insert(seq.end(), q.begin(), q.end());
    seq.push_back(tok::SEP);
    seq.insert(seq.end(), c.begin(), c.end());
    seq.push_back(tok::EOS);
    return seq;
}

std::vector<int> forward_sequence(const ContextQueryPair & p) {
    return forward_sequence_ids(p.level, tok::tokenize(p.context), tok::tokenize(p.query));
}

std::vector<int> backward_sequence(const ContextQueryPair & p) {
    return backward_sequence_ids(p.level, tok::tokenize(p.query), tok::tokenize(p.context));
}

} // namespace r3mem
