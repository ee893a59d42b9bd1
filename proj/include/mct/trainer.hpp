#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mct/common.hpp"
#include "mct/mlm.hpp"
#include "mct/nn/checkpoint.hpp"
#include "mct/nn/optimizer.hpp"
#include "mct/tasks.hpp"

namespace mct::trainer {

enum class Variant {
    MarkovianGRPO,
    NonMarkovianGRPO,
    PG_EMA,
    ExpertIteration,
    NoRewardGrad,
    Unnormalized,
};

std::string variant_name(Variant v);
Variant variant_from_name(const std::string& name);

inline bool is_single_sample(Variant v) {
    return v == Variant::PG_EMA || v == Variant::ExpertIteration;
}
inline bool is_standardized(Variant v) {
    return v == Variant::MarkovianGRPO || v == Variant::NonMarkovianGRPO ||
           v == Variant::NoRewardGrad;
}

struct TrainConfig {
    Variant variant = Variant::MarkovianGRPO;
    int batch_size = 8;
    double beta_kl = 0.1;
    double advantage_epsilon = 1e-6;
    double actor_reward_weight = 1.0;
    double ema_rate = 0.9;
    double ei_k = 1.0;
    double grad_clip = 1.0;
    int steps = 2000;
    int eval_interval = 0;  // 0 disables accuracy probes
    int eval_examples = 64;
    int checkpoint_interval = 0;  // 0: final checkpoint only
    std::uint64_t seed = 0;
    tasks::TaskSpec task;
    nn::ModelConfig model;
    nn::AdamHyper adam;
    std::string run_dir;
    std::string init_checkpoint;  // optional pretrained weights
    bool log_episodes = false;

    void validate() const;
};

struct AdvantageBatch {
    std::vector<double> rewards;
    double mu = 0.0;
    double sigma = 0.0;  // population std
    std::vector<double> advantages;
    bool standardized = true;  // false: advantages are the raw rewards
};

// A_i = (R_i - mu) / (sigma + eps); mu and sigma are constants to the
// backward pass (their dependence on theta is never differentiated).
AdvantageBatch standardize(const std::vector<double>& rewards, double eps);

struct LossBreakdown {
    double l_pg = 0.0;
    double l_ar = 0.0;
    double l_kl = 0.0;
    double total = 0.0;
    std::vector<double> per_episode_pg, per_episode_ar, per_episode_kl;
};

// Batch-mean loss l_i = -ln u(cot_i) * A_i^detach - w * A_i + beta * KL_i.
// If grads is non-null, accumulates d(total)/d(actor). The gradient of the
// second term flows only through the actor answer log-prob; the batch
// statistics, the baseline score and the sampled tokens are constants.
LossBreakdown loss_components(const mlm::MLMHandle& handle,
                              const std::vector<mlm::MarkovianEpisode>& episodes,
                              const AdvantageBatch& adv, const TrainConfig& cfg,
                              nn::GradientSet* grads = nullptr);

// The scalar function of the actor parameters that loss_components
// differentiates: sampled CoTs and batch statistics held fixed, the
// actor-reward term re-evaluated through the answer log-prob. Used by the
// finite-difference harness.
double loss_value_frozen(const nn::ParamBuffer& actor, const mlm::MLMHandle& handle,
                         const std::vector<mlm::MarkovianEpisode>& episodes,
                         const AdvantageBatch& adv, const TrainConfig& cfg);

// V_t = sum_i w_i R_i over the history R_1..R_{t-1}, w_i = r^(t-1-i) normalized.
double ema_baseline(const std::vector<double>& history, double r);

// mask_i = (R_i > mu_hist + k * sigma_hist); history shorter than 2 admits all.
std::vector<bool> ei_filter(const std::vector<double>& rewards,
                            const std::vector<double>& history, double k);

struct StepMetrics {
    int step = 0;
    Variant variant = Variant::MarkovianGRPO;
    double mean_reward = 0.0;
    double baseline_b = 0.0;  // batch: ln pi'(ans|cot'); single-sample: EMA value
    double mean_advantage = 0.0;
    double l_pg = 0.0, l_ar = 0.0, l_kl = 0.0, total = 0.0;
    double grad_norm_preclip = 0.0;
    double grad_norm_postclip = 0.0;
    int actor_samples = 0;
    int baseline_samples = 0;
    bool included = true;  // ExpertIteration filter outcome
    std::optional<double> accuracy;
};

std::string metrics_to_jsonl(const StepMetrics& m);

struct StepHooks {
    std::function<void(const AdvantageBatch&)> on_standardize;
    std::function<void(const std::vector<mlm::MarkovianEpisode>&)> on_episodes;
};

// One Algorithm-1 step: B actor CoTs, one frozen CoT', reward, standardize,
// loss, clip, Adam. A numeric failure propagates before any mutation.
StepMetrics train_step_grpo(mlm::MLMHandle& handle, const tasks::QAPair& qa,
                            const TrainConfig& cfg, nn::AdamState& opt, int step,
                            const StepHooks* hooks = nullptr);

// One REINFORCE step for PG_EMA / ExpertIteration: a single episode, EMA
// baseline from the reward history, optional threshold filter. Appends the
// new reward to the history.
StepMetrics train_step_single(mlm::MLMHandle& handle, const tasks::QAPair& qa,
                              const TrainConfig& cfg, nn::AdamState& opt,
                              std::vector<double>& reward_history, int step,
                              const StepHooks* hooks = nullptr);

// Temperature-0 exact match over n held-out examples: greedy CoT from the
// question, then a greedy answer decoded from the CoT alone, capped at the
// gold answer's token length.
double accuracy_probe(const mlm::MLMHandle& handle, const tasks::TaskSource& source, int n,
                      std::uint64_t seed);

// Next-token cross-entropy pretraining on blank-line-separated documents,
// each wrapped in BOS/EOT. Returns the final-step mean per-token loss.
double pretrain_lm(nn::ParamBuffer& params, const std::string& corpus, int steps, int batch_size,
                   const nn::AdamHyper& hyper, std::uint64_t seed);

struct RunResult {
    std::string run_dir;
    int steps_run = 0;
    StepMetrics last;
};

// Full training run: manifest, per-step metrics JSONL, checkpoints, optional
// episode log. resume_from restarts mid-run from a checkpoint with bitwise
// identical continuation.
RunResult train(const TrainConfig& cfg, const std::string& resume_from = "",
                const StepHooks* hooks = nullptr);

// Checkpoint helpers shared by train() and the CLI.
nn::Checkpoint make_run_checkpoint(const mlm::MLMHandle& handle, const nn::AdamState& opt,
                                   const std::vector<double>& reward_history, int step);
void restore_run_checkpoint(const nn::Checkpoint& ckpt, mlm::MLMHandle& handle,
                            nn::AdamState& opt, std::vector<double>& reward_history, int& step);

std::string manifest_json(const TrainConfig& cfg, std::uint64_t baseline_hash);
TrainConfig config_from_manifest(const std::string& json_text);

}  // namespace mct::trainer
