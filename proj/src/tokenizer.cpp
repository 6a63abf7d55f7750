#include "r3mem/tokenizer.hpp"

namespace r3mem::tok {

std::vector<int> tokenize(std::string_view text) {
    std::vector<int> ids;
    ids.reserve(text.size());
    for (unsigned char c : text) ids.push_back((int) c);
    return ids;
}

namespace {

// expected continuation count for a lead byte, -1 if not a valid lead
int utf8_follow(unsigned char c) {
    if (c < 0x80) return 0;
    if (c >= 0xC2 && c <= 0xDF) return 1;
    if (c >= 0xE0 && c <= 0xEF) return 2;
    if (c >= 0xF0 && c <= 0xF4) return 3;
    return -1;
}

bool valid_sequence(const unsigned char * p, int follow) {
    for (int i = 1; i <= follow; ++i) {
        if ((p[i] & 0xC0) != 0x80) return false;
    }
    // overlong, surrogate and > U+10FFFF exclusions
    if (p[0] == 0xE0 && p[1] < 0xA0) return false;
    if (p[0] == 0xED && p[1] > 0x9F) return false;
    if (p[0] == 0xF0 && p[1] < 0x90) return false;
    if (p[0] == 0xF4 && p[1] > 0x8F) return false;
    return true;
}

} // namespace

std::string detokenize(const std::vector<int> & ids) {
    std::string bytes;
    bytes.reserve(ids.size());
    for (int id : ids) {
        if (is_byte(id)) bytes.push_back((char) (unsigned char) id);
    }
    // validate; each offending byte becomes one replacement character
    std::string out;
    out.reserve(bytes.size());
    const unsigned char * p = (const unsigned char *) bytes.data();
    size_t                n = bytes.size();
    size_t                i = 0;
    while (i < n) {
        const int follow = utf8_follow(p[i]);
        if (follow >= 0 && i + (size_t) follow < n && valid_sequence(p + i, follow)) {
            out.append(bytes, i, (size_t) follow + 1);
            i += (size_t) follow + 1;
        } else {
            out += "\xEF\xBF\xBD";
            ++i;
        }
    }
    return out;
}

} // namespace r3mem::tok
