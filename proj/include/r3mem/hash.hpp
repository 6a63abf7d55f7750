#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

namespace r3mem {

// FNV-1a, 64-bit
inline uint64_t fnv1a(const void * data, size_t n, uint64_t h = 14695981039346656037ULL) {
    const unsigned char * p = (const unsigned char *) data;
    for (size_t i = 0; i < n; ++i) {
        h ^= (uint64_t) p[i];
        h *= 1099511628211ULL;
    }
    return h;
}

inline uint64_t fnv1a(const std::string & s, uint64_t h = 14695981039346656037ULL) {
    return fnv1a(s.data(), s.size(), h);
}

inline std::string hex64(uint64_t v) {
    static const char * digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[(size_t) i] = digits[v & 0xf];
        v >>= 4;
    }
    return s;
}

} // namespace r3mem
