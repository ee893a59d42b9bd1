#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace mct {

// Exit-code taxonomy: 1 runtime, 2 config, 3 numeric.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

class ContractError : public std::logic_error {
public:
    explicit ContractError(const std::string& msg) : std::logic_error(msg) {}
};

class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& msg, int layer = -1)
        : std::runtime_error(msg), layer_index(layer) {}
    int layer_index;
};

class IoError : public std::runtime_error {
public:
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

using TokenSeq = std::vector<int>;

// FNV-1a over raw bytes; used for frozen-parameter hashes.
inline std::uint64_t fnv1a(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = 1469598103934665603ULL;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::uint64_t hash_doubles(const std::vector<double>& v) {
    return fnv1a(v.data(), v.size() * sizeof(double));
}

}  // namespace mct
