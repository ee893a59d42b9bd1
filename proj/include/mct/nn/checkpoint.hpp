#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mct/nn/config.hpp"

namespace mct::nn {

// Self-describing checkpoint container: a text key-value header (config,
// seed, step, dtype, array directory) followed by flat little-endian f64
// arrays in declared order. Round-trips bit-exactly.
struct Checkpoint {
    ModelConfig config;
    std::uint64_t step = 0;
    std::string dtype = "f64";
    std::vector<std::pair<std::string, std::vector<double>>> arrays;

    const std::vector<double>& array(const std::string& name) const;
    bool has_array(const std::string& name) const;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace mct::nn
