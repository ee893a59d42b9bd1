#pragma once

#include <Eigen/Core>
#include <cmath>
#include <string>
#include <vector>

#include "mct/common.hpp"
#include "mct/nn/config.hpp"
#include "mct/rng.hpp"

namespace mct::nn {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

struct ParamEntry {
    std::string name;
    std::size_t offset;
    int rows;
    int cols;
};

// Deterministic flat parameter layout for the decoder-only transformer.
// Layout order is fixed; checkpoints serialize arrays in exactly this order.
class ParamLayout {
public:
    explicit ParamLayout(const ModelConfig& cfg) {
        cfg.validate();
        add("tok_emb", cfg.vocab_size, cfg.d_model);
        add("pos_emb", cfg.context_len, cfg.d_model);
        for (int l = 0; l < cfg.n_layers; ++l) {
            const std::string p = "layer" + std::to_string(l) + ".";
            add(p + "ln1_g", 1, cfg.d_model);
            add(p + "ln1_b", 1, cfg.d_model);
            add(p + "wq", cfg.d_model, cfg.d_model);
            add(p + "bq", 1, cfg.d_model);
            add(p + "wk", cfg.d_model, cfg.d_model);
            add(p + "bk", 1, cfg.d_model);
            add(p + "wv", cfg.d_model, cfg.d_model);
            add(p + "bv", 1, cfg.d_model);
            add(p + "wo", cfg.d_model, cfg.d_model);
            add(p + "bo", 1, cfg.d_model);
            add(p + "ln2_g", 1, cfg.d_model);
            add(p + "ln2_b", 1, cfg.d_model);
            add(p + "w1", cfg.d_model, cfg.d_ff);
            add(p + "b1", 1, cfg.d_ff);
            add(p + "w2", cfg.d_ff, cfg.d_model);
            add(p + "b2", 1, cfg.d_model);
        }
        add("lnf_g", 1, cfg.d_model);
        add("lnf_b", 1, cfg.d_model);
    }

    const std::vector<ParamEntry>& entries() const { return entries_; }
    std::size_t total_size() const { return total_; }

    const ParamEntry& find(const std::string& name) const {
        for (const auto& e : entries_) {
            if (e.name == name) return e;
        }
        throw ContractError("ParamLayout: unknown entry " + name);
    }

private:
    void add(const std::string& name, int rows, int cols) {
        entries_.push_back({name, total_, rows, cols});
        total_ += static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols);
    }

    std::vector<ParamEntry> entries_;
    std::size_t total_ = 0;
};

// All weights of one model instance in a single flat 64-bit buffer.
class ParamBuffer {
public:
    ParamBuffer(const ModelConfig& cfg, double fill)
        : cfg_(cfg), layout_(cfg), data_(layout_.total_size(), fill) {}

    // Seeded init: N(0, 0.02) weights with GPT-2 style residual scaling,
    // unit layer-norm gains, zero biases. Bitwise reproducible per seed.
    static ParamBuffer init(const ModelConfig& cfg) {
        ParamBuffer p(cfg, 0.0);
        Rng rng(derive_seed(cfg.init_seed, {0x696e6974ULL}));
        const double std0 = 0.02;
        const double resid_scale = 1.0 / std::sqrt(2.0 * cfg.n_layers);
        for (const auto& e : p.layout_.entries()) {
            double* d = p.data_.data() + e.offset;
            const std::size_t n = static_cast<std::size_t>(e.rows) * e.cols;
            const bool is_gain = e.name.ends_with("ln1_g") || e.name.ends_with("ln2_g") ||
                                 e.name == "lnf_g";
            if (is_gain) {
                for (std::size_t i = 0; i < n; ++i) d[i] = 1.0;
            } else if (e.rows == 1) {
                // biases and layer-norm shifts start at zero
            } else {
                double scale = std0;
                if (e.name.ends_with(".wo") || e.name.ends_with(".w2")) scale *= resid_scale;
                for (std::size_t i = 0; i < n; ++i) d[i] = scale * rng.next_gaussian();
            }
        }
        return p;
    }

    // All-zero weights: produces exactly uniform next-token distributions.
    static ParamBuffer zeros(const ModelConfig& cfg) { return ParamBuffer(cfg, 0.0); }

    const ModelConfig& config() const { return cfg_; }
    const ParamLayout& layout() const { return layout_; }
    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }
    std::size_t size() const { return data_.size(); }

    MatMap mat(const std::string& name) {
        const auto& e = layout_.find(name);
        return MatMap(data_.data() + e.offset, e.rows, e.cols);
    }
    ConstMatMap mat(const std::string& name) const {
        const auto& e = layout_.find(name);
        return ConstMatMap(data_.data() + e.offset, e.rows, e.cols);
    }

    std::uint64_t hash() const { return hash_doubles(data_); }

    bool all_finite() const {
        for (double v : data_) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

private:
    ModelConfig cfg_;
    ParamLayout layout_;
    std::vector<double> data_;
};

// One gradient array per parameter array, stored flat in the same layout.
struct GradientSet {
    explicit GradientSet(const ParamBuffer& params) : data(params.size(), 0.0) {}
    explicit GradientSet(std::size_t n) : data(n, 0.0) {}

    std::vector<double> data;

    double global_norm() const {
        double s = 0.0;
        for (double v : data) s += v * v;
        return std::sqrt(s);
    }

    void zero() { std::fill(data.begin(), data.end(), 0.0); }
};

}  // namespace mct::nn
