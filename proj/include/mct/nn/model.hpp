#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "mct/common.hpp"
#include "mct/nn/params.hpp"

namespace mct::nn {

struct LayerCache {
    RowMat ln1_xhat, ln1_out;
    Eigen::VectorXd ln1_rstd;
    RowMat q, k, v;
    std::vector<RowMat> att;  // per-head softmax probabilities, lower triangular
    RowMat att_concat;
    RowMat x_mid;  // after attention residual, input to ln2
    RowMat ln2_xhat, ln2_out;
    Eigen::VectorXd ln2_rstd;
    RowMat ff_pre, ff_act;
};

struct ForwardCache {
    std::vector<int> tokens;
    std::vector<RowMat> layer_in;  // input to each layer; layer_in[0] is emb sum
    std::vector<LayerCache> layers;
    RowMat x_final;  // input to final layer norm
    RowMat lnf_xhat;
    Eigen::VectorXd lnf_rstd;
    RowMat h;  // final hidden states
};

// Full causal forward pass. One logit row per input position.
// If cache is non-null, stores everything backward() needs.
RowMat forward_logits(const ParamBuffer& params, const TokenSeq& tokens,
                      ForwardCache* cache = nullptr);

// Reverse pass: accumulates d(scalar)/d(params) into grads, given
// d(scalar)/d(logits) for every position of the cached forward pass.
void backward(const ParamBuffer& params, const ForwardCache& cache, const RowMat& dlogits,
              GradientSet& grads);

// Single-token incremental decoder with per-layer KV caches; used by the
// sampler so generation is linear rather than quadratic in output length.
class IncrementalModel {
public:
    explicit IncrementalModel(const ParamBuffer& params);

    // Feed one token; returns the next-token logit row at this position.
    Eigen::VectorXd feed(int token);

    int pos() const { return t_; }

private:
    const ParamBuffer& p_;
    std::vector<RowMat> kcache_, vcache_;  // per layer [context_len, d_model]
    int t_ = 0;
};

// Numerically stable softmax of one logit row.
std::vector<double> softmax(const Eigen::VectorXd& logits);

double sequence_logprob(const ParamBuffer& params, const TokenSeq& context,
                        const TokenSeq& continuation);

// Same value; also accumulates scale * d(logprob)/d(params) into grads.
double sequence_logprob_backward(const ParamBuffer& params, const TokenSeq& context,
                                 const TokenSeq& continuation, double scale,
                                 GradientSet& grads);

std::vector<double> next_token_dist(const ParamBuffer& params, const TokenSeq& context);

// Sum over the |cot| conditional positions of KL(a || b) along context+cot.
// params_b is a constant; the gradient variant differentiates params_a only.
double kl_cot(const ParamBuffer& params_a, const ParamBuffer& params_b, const TokenSeq& context,
              const TokenSeq& cot);

double kl_cot_backward(const ParamBuffer& params_a, const ParamBuffer& params_b,
                       const TokenSeq& context, const TokenSeq& cot, double scale,
                       GradientSet& grads);

// Temperature 0 is argmax decoding (seed-independent). stop_token, when
// present, terminates generation and is excluded from the output.
TokenSeq sample_continuation(const ParamBuffer& params, const TokenSeq& context, int max_len,
                             double temperature, std::optional<int> stop_token,
                             std::uint64_t seed);

}  // namespace mct::nn
