#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mct/common.hpp"
#include "mct/mlm.hpp"
#include "mct/nn/optimizer.hpp"
#include "mct/nn/params.hpp"
#include "mct/tasks.hpp"

namespace mct::xmodel {

// An independent model used only to score another model's CoTs. Critics are
// frozen: their parameters never change after construction.
struct CriticSpec {
    std::string id;
    nn::ModelConfig config;  // init_seed gives the independent initialization
    int pretrain_steps = 0;  // brief next-token pretraining on the task corpus
};

struct Critic {
    CriticSpec spec;
    nn::ParamBuffer params;
    std::uint64_t params_hash = 0;

    // throws ContractError if the parameters were mutated after construction
    void verify_frozen() const;
};

// Desk-scale critic set: (a) same architecture with a different init seed,
// (b) half-width, half-depth model.
std::vector<CriticSpec> default_critic_specs(const nn::ModelConfig& actor_cfg);

// Initializes (and optionally pretrains) a critic, then freezes it.
Critic build_critic(const CriticSpec& spec, const std::string& pretrain_corpus,
                    int pretrain_batch, const nn::AdamHyper& hyper, std::uint64_t seed);

struct CriticScore {
    double mean_normalized_reward = 0.0;
    int n = 0;        // episodes scored
    int skipped = 0;  // context overflow for a critic with a smaller window
};

// mean over episodes of [ln pi_critic(ans | cot) - ln pi_critic(ans | cot')],
// the training reward's shape with both terms scored by the critic. Episodes
// that overflow the critic's context are skipped and counted. No gradients.
CriticScore critic_normalized_reward(const Critic& critic,
                                     const std::vector<mlm::MarkovianEpisode>& episodes, int bos,
                                     const TokenSeq& answer_cue = {});

// trailing moving average; window 1 is the identity, early entries average
// what is available
std::vector<double> moving_average(const std::vector<double>& series, int window);

// Spearman rank correlation with average ranks on ties; nullopt when either
// series is constant (the correlation is undefined there).
std::optional<double> spearman(const std::vector<double>& a, const std::vector<double>& b);

// Fresh evaluation episodes from one actor checkpoint, deterministic in seed.
std::vector<mlm::MarkovianEpisode> sample_eval_episodes(const mlm::MLMHandle& handle,
                                                        const tasks::TaskSource& source, int n,
                                                        std::uint64_t seed);

struct CheckpointEpisodes {
    int step = 0;
    nn::ParamBuffer actor_params;  // used to compute the actor's own series
    std::vector<mlm::MarkovianEpisode> episodes;
};

struct CriticSeries {
    std::string critic_id;
    std::vector<CriticScore> scores;  // one per checkpoint
    std::vector<double> smoothed;     // moving average of the raw means
    std::optional<double> spearman_vs_actor;
};

struct TransferReport {
    std::vector<int> checkpoint_steps;
    std::vector<int> episode_counts;
    std::vector<double> actor_series;  // actor scored as its own critic
    std::vector<CriticSeries> critics;
    int smoothing_window = 40;

    // checkpoint_step, critic_id, mean_normalized_reward, n (actor included)
    std::string to_csv() const;
    std::string summary_json() const;
};

// Scores every checkpoint's episodes under every critic and correlates each
// critic's series with the actor's. Requires >= 3 checkpoints.
TransferReport transfer_report(const std::vector<CheckpointEpisodes>& checkpoints,
                               const std::vector<Critic>& critics, int bos,
                               int smoothing_window = 40, const TokenSeq& answer_cue = {});

}  // namespace mct::xmodel
