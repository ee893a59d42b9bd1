#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mct/common.hpp"
#include "mct/mlm.hpp"
#include "mct/nn/params.hpp"
#include "mct/tasks.hpp"

namespace mct::oracle {

struct CotEntry {
    TokenSeq cot;
    double logprob_u = 0.0;       // ln u(cot | q, s1)
    double prob = 0.0;            // exp(logprob_u)
    double answer_logprob = 0.0;  // ln pi(answer | cot)
};

struct EnumerationReport {
    double exact_j = 0.0;        // E_u[ln pi(a|cot)] - baseline_term
    double actor_term = 0.0;     // E_{cot~u}[ln pi(a|cot)]
    double baseline_term = 0.0;  // E_{cot'~u'}[ln pi'(a|cot')]
    double prob_sum = 0.0;       // completeness check, should be 1
    std::vector<CotEntry> table;           // actor distribution
    std::vector<CotEntry> baseline_table;  // frozen distribution
};

// All CoTs the sampler can emit. Without eot: every length-K sequence.
// With eot: sequences of non-eot tokens terminated by eot (length <= K) plus
// eot-free length-K sequences, exactly the stopped-sampling support.
std::vector<TokenSeq> enumerate_cots(int vocab, int cot_cap, std::optional<int> eot);

// Exact informativeness objective by full enumeration of the CoT space.
// stopped_prefixes switches to the early-termination support.
EnumerationReport exact_objective(const mlm::MLMHandle& handle, const tasks::MicroTask& task,
                                  bool stopped_prefixes = false);

struct ExactGradient {
    nn::GradientSet reinforce_term;     // E[(R - b) * grad ln u]
    nn::GradientSet actor_reward_term;  // E[grad ln pi(a|cot)]
    nn::GradientSet two_term_sum;
    nn::GradientSet direct;  // differentiate J = sum_cot exp(ln u) * ln pi directly

    explicit ExactGradient(std::size_t n)
        : reinforce_term(n), actor_reward_term(n), two_term_sum(n), direct(n) {}
};

ExactGradient exact_gradient(const mlm::MLMHandle& handle, const tasks::MicroTask& task,
                             bool stopped_prefixes = false);

enum class Estimator { Raw, BaselineSubtracted, Standardized };
std::string estimator_name(Estimator e);

struct McGradient {
    std::vector<double> mean;
    std::vector<double> stderr_;
    int n_samples = 0;
};

// Monte-Carlo gradient over independent episodes (cot ~ u_theta, cot' ~ u').
// Coefficient per episode: Raw uses R; BaselineSubtracted uses R - E[R]
// (enumerated); Standardized standardizes R within batches of batch_size.
// with_actor_reward adds the grad ln pi(a|cot) term (scaled by 1/(sigma+eps)
// in the standardized variant, mirroring the training loss).
McGradient mc_gradient_estimate(const mlm::MLMHandle& handle, const tasks::MicroTask& task,
                                Estimator estimator, bool with_actor_reward, int n_samples,
                                std::uint64_t seed, int batch_size = 8, double eps = 1e-6);

// per-coordinate (mean - exact) / (stderr + floor). The floor absorbs
// round-off on coordinates whose true gradient is exactly zero (unused
// parameters), where both the difference and the stderr are ~1e-19 dust.
std::vector<double> z_scores(const McGradient& mc, const std::vector<double>& exact,
                             double floor = 1e-12);

std::string report_to_json(const EnumerationReport& report);

}  // namespace mct::oracle
