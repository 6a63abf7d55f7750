#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace r3mem::tok {

// byte vocabulary 0..255 plus control ids; memory slots are embedding
// injections and have no id here
constexpr int PAD = 256;
constexpr int BOS = 257;
constexpr int EOS = 258;
constexpr int SEP = 259;
constexpr int D2P = 260;
constexpr int P2S = 261;
constexpr int S2E = 262;
constexpr int VOCAB = 263;

inline bool is_byte(int id) { return id >= 0 && id <= 255; }

std::vector<int> tokenize(std::string_view text);

// keeps byte ids only; invalid UTF-8 byte sequences are replaced with U+FFFD
std::string detokenize(const std::vector<int> & ids);

} // namespace r3mem::tok
