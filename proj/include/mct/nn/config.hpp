#pragma once

#include <cstdint>

#include "mct/common.hpp"

namespace mct::nn {

struct ModelConfig {
    int vocab_size = 64;
    int context_len = 256;
    int d_model = 128;
    int n_layers = 4;
    int n_heads = 4;
    int d_ff = 512;
    std::uint64_t init_seed = 0;

    int head_dim() const { return d_model / n_heads; }

    void validate() const {
        if (vocab_size <= 0 || context_len <= 0 || d_model <= 0 || n_layers <= 0 ||
            n_heads <= 0 || d_ff <= 0) {
            throw ConfigError("ModelConfig: all sizes must be positive");
        }
        if (d_model % n_heads != 0) {
            throw ConfigError("ModelConfig: d_model must be divisible by n_heads");
        }
    }

    bool operator==(const ModelConfig&) const = default;
};

}  // namespace mct::nn
