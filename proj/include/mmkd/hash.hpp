#pragma once

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

namespace mmkd {

// FNV-1a over raw bytes; used for parameter freeze checks.
inline uint64_t fnv1a64(const void* data, size_t len, uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline uint64_t fnv1a64(const std::vector<double>& v, uint64_t h = 0xcbf29ce484222325ULL) {
    return v.empty() ? h : fnv1a64(v.data(), v.size() * sizeof(double), h);
}

inline uint64_t fnv1a64(const std::string& s, uint64_t h = 0xcbf29ce484222325ULL) {
    return s.empty() ? h : fnv1a64(s.data(), s.size(), h);
}

} // namespace mmkd
