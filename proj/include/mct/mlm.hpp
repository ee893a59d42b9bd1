#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mct/common.hpp"
#include "mct/nn/params.hpp"

namespace mct::mlm {

// Trainable (u_theta, pi_theta) pair plus the frozen reference pair, with the
// CoT budget and the initial-prompt tokens. One transformer serves both roles:
// the role is fixed by what the context contains, not by separate weights.
struct MLMHandle {
    nn::ModelConfig config;
    nn::ParamBuffer actor;
    nn::ParamBuffer baseline;
    std::uint64_t baseline_hash = 0;
    int cot_cap = 1;
    TokenSeq cot_init;
    TokenSeq answer_cue;  // appended after the CoT in every answer-scoring context
    int bos = 0;
    int eot = 1;

    MLMHandle(const nn::ModelConfig& cfg, nn::ParamBuffer actor_params,
              nn::ParamBuffer baseline_params, int cap, TokenSeq init, int bos_id, int eot_id);

    // throws ContractError if the frozen weights were mutated
    void verify_baseline() const;
};

struct MarkovianEpisode {
    TokenSeq question;
    TokenSeq cot;           // includes the trailing end-of-thought token if generation stopped early
    TokenSeq answer;
    TokenSeq baseline_cot;
    double cot_logprob = 0.0;
    double answer_logprob_markovian = 0.0;
    double answer_logprob_nonmarkovian = 0.0;  // only meaningful when nonmarkovian
    double baseline_answer_logprob = 0.0;
    double reward = 0.0;
    bool nonmarkovian = false;
};

struct Trajectory {
    std::vector<TokenSeq> observations;
    std::vector<TokenSeq> states;           // states[0] == cot_init
    std::vector<TokenSeq> baseline_states;  // independent frozen-model chain
    std::vector<double> step_rewards;       // one per observation after the first
    double total_reward = 0.0;
};

// context for the state update: [BOS] q s1
TokenSeq update_context(const MLMHandle& handle, const TokenSeq& q);

// s2 ~ u_theta(. | q, s1), temperature 1, at most cot_cap tokens, stopping at
// the end-of-thought token (which is kept in the returned sequence so the
// logprob is reproducible by re-scoring).
std::pair<TokenSeq, double> update_state(const MLMHandle& handle, const TokenSeq& q,
                                         std::uint64_t seed);

// ln pi_theta(answer | cot): the question never enters the context.
double score_answer_markovian(const MLMHandle& handle, const TokenSeq& cot,
                              const TokenSeq& answer);

// ln pi_theta(answer | q, s1, cot)
double score_answer_nonmarkovian(const MLMHandle& handle, const TokenSeq& q, const TokenSeq& cot,
                                 const TokenSeq& answer);

// ln pi'(answer | baseline_cot), frozen weights
double score_answer_baseline(const MLMHandle& handle, const TokenSeq& baseline_cot,
                             const TokenSeq& answer);

// CoT' ~ u'(. | q, s1): same prompt, frozen weights, no gradients ever.
TokenSeq sample_baseline_cot(const MLMHandle& handle, const TokenSeq& q, std::uint64_t seed);

inline double compute_reward(double answer_logprob, double baseline_answer_logprob) {
    return answer_logprob - baseline_answer_logprob;
}

// Samples a CoT, scores the answer under actor and baseline, fills the reward.
// The baseline CoT is passed in because it is shared across a batch.
MarkovianEpisode run_episode(const MLMHandle& handle, const TokenSeq& q, const TokenSeq& answer,
                             const TokenSeq& baseline_cot, std::uint64_t seed,
                             bool nonmarkovian = false);

// Multi-step chain: s_{t+1} ~ u_theta(. | x_t, s_t), reward per step is the
// actor-vs-frozen score gap for the next observation. Two observations
// reproduce the single QA episode.
Trajectory rollout_trajectory(const MLMHandle& handle, const std::vector<TokenSeq>& observations,
                              std::uint64_t seed);

// one JSON object per line; floats round-trip bit-exactly via hexfloat strings
std::string episode_to_jsonl(const MarkovianEpisode& ep);
MarkovianEpisode episode_from_jsonl(const std::string& line);

}  // namespace mct::mlm
