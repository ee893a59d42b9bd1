#include "mct/xmodel.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include <json.hpp>

#include "mct/nn/model.hpp"
#include "mct/rng.hpp"
#include "mct/trainer.hpp"

namespace mct::xmodel {

namespace {

constexpr std::uint64_t kSeedCriticInit = 0xc1;
constexpr std::uint64_t kSeedEvalQa = 0x51;
constexpr std::uint64_t kSeedEvalBaseline = 0x52;
constexpr std::uint64_t kSeedEvalEpisode = 0x53;

TokenSeq answer_context(int bos, const TokenSeq& cot, const TokenSeq& answer_cue) {
    TokenSeq ctx{bos};
    ctx.insert(ctx.end(), cot.begin(), cot.end());
    ctx.insert(ctx.end(), answer_cue.begin(), answer_cue.end());
    return ctx;
}

bool fits(const nn::ModelConfig& cfg, const TokenSeq& ctx, const TokenSeq& cont) {
    return static_cast<int>(ctx.size() + cont.size()) <= cfg.context_len;
}

std::string fmt_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

// average ranks (1-based) with ties sharing the mean of their rank block
std::vector<double> average_ranks(const std::vector<double>& v) {
    const std::size_t n = v.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(n, 0.0);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
        const double mean_rank = 0.5 * (static_cast<double>(i) + static_cast<double>(j)) + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = mean_rank;
        i = j + 1;
    }
    return ranks;
}

}  // namespace

void Critic::verify_frozen() const {
    if (hash_doubles(params.data()) != params_hash) {
        throw ContractError("xmodel: critic parameters were mutated");
    }
}

std::vector<CriticSpec> default_critic_specs(const nn::ModelConfig& actor_cfg) {
    CriticSpec same;
    same.id = "same-arch-reseed";
    same.config = actor_cfg;
    same.config.init_seed = derive_seed(actor_cfg.init_seed, {kSeedCriticInit, 1});

    CriticSpec half;
    half.id = "half-size-reseed";
    half.config = actor_cfg;
    half.config.d_model = std::max(actor_cfg.d_model / 2, 1);
    half.config.n_layers = std::max(actor_cfg.n_layers / 2, 1);
    half.config.d_ff = std::max(actor_cfg.d_ff / 2, 1);
    if (half.config.d_model % half.config.n_heads != 0) {
        half.config.n_heads = 1;
    }
    half.config.init_seed = derive_seed(actor_cfg.init_seed, {kSeedCriticInit, 2});
    return {same, half};
}

Critic build_critic(const CriticSpec& spec, const std::string& pretrain_corpus,
                    int pretrain_batch, const nn::AdamHyper& hyper, std::uint64_t seed) {
    spec.config.validate();
    Critic critic{spec, nn::ParamBuffer::init(spec.config), 0};
    if (spec.pretrain_steps > 0) {
        if (pretrain_corpus.empty()) {
            throw ConfigError("xmodel: pretrain_steps > 0 requires a corpus");
        }
        trainer::pretrain_lm(critic.params, pretrain_corpus, spec.pretrain_steps, pretrain_batch,
                             hyper, derive_seed(seed, {kSeedCriticInit, 3}));
    }
    critic.params_hash = hash_doubles(critic.params.data());
    return critic;
}

CriticScore critic_normalized_reward(const Critic& critic,
                                     const std::vector<mlm::MarkovianEpisode>& episodes, int bos,
                                     const TokenSeq& answer_cue) {
    critic.verify_frozen();
    CriticScore score;
    double sum = 0.0;
    for (const mlm::MarkovianEpisode& ep : episodes) {
        const TokenSeq actx = answer_context(bos, ep.cot, answer_cue);
        const TokenSeq bctx = answer_context(bos, ep.baseline_cot, answer_cue);
        if (!fits(critic.spec.config, actx, ep.answer) ||
            !fits(critic.spec.config, bctx, ep.answer)) {
            ++score.skipped;
            continue;
        }
        sum += nn::sequence_logprob(critic.params, actx, ep.answer) -
               nn::sequence_logprob(critic.params, bctx, ep.answer);
        ++score.n;
    }
    if (score.n > 0) score.mean_normalized_reward = sum / score.n;
    critic.verify_frozen();
    return score;
}

std::vector<double> moving_average(const std::vector<double>& series, int window) {
    if (window < 1) throw ConfigError("xmodel: smoothing window must be >= 1");
    std::vector<double> out(series.size(), 0.0);
    double acc = 0.0;
    for (std::size_t i = 0; i < series.size(); ++i) {
        acc += series[i];
        if (i >= static_cast<std::size_t>(window)) acc -= series[i - window];
        const std::size_t span = std::min(i + 1, static_cast<std::size_t>(window));
        out[i] = acc / static_cast<double>(span);
    }
    return out;
}

std::optional<double> spearman(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw ContractError("xmodel: series length mismatch");
    if (a.size() < 2) return std::nullopt;
    const std::vector<double> ra = average_ranks(a);
    const std::vector<double> rb = average_ranks(b);
    const double n = static_cast<double>(a.size());
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += ra[i] / n;
        mb += rb[i] / n;
    }
    double cov = 0.0, va = 0.0, vb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        cov += (ra[i] - ma) * (rb[i] - mb);
        va += (ra[i] - ma) * (ra[i] - ma);
        vb += (rb[i] - mb) * (rb[i] - mb);
    }
    if (va == 0.0 || vb == 0.0) return std::nullopt;  // constant series
    return cov / std::sqrt(va * vb);
}

std::vector<mlm::MarkovianEpisode> sample_eval_episodes(const mlm::MLMHandle& handle,
                                                        const tasks::TaskSource& source, int n,
                                                        std::uint64_t seed) {
    if (n < 1) throw ConfigError("xmodel: need at least one evaluation episode");
    std::vector<mlm::MarkovianEpisode> out;
    out.reserve(n);
    for (int i = 0; i < n; ++i) {
        const std::uint64_t ex = static_cast<std::uint64_t>(i);
        const tasks::QAPair qa = source.sample(derive_seed(seed, {kSeedEvalQa, ex}));
        const TokenSeq baseline_cot =
            mlm::sample_baseline_cot(handle, qa.question, derive_seed(seed, {kSeedEvalBaseline, ex}));
        out.push_back(mlm::run_episode(handle, qa.question, qa.answer, baseline_cot,
                                       derive_seed(seed, {kSeedEvalEpisode, ex})));
    }
    return out;
}

std::string TransferReport::to_csv() const {
    std::string csv = "checkpoint_step,critic_id,mean_normalized_reward,n\n";
    for (std::size_t i = 0; i < checkpoint_steps.size(); ++i) {
        csv += std::to_string(checkpoint_steps[i]) + ",actor," + fmt_double(actor_series[i]) +
               "," + std::to_string(episode_counts[i]) + "\n";
    }
    for (const CriticSeries& cs : critics) {
        for (std::size_t i = 0; i < checkpoint_steps.size(); ++i) {
            csv += std::to_string(checkpoint_steps[i]) + "," + cs.critic_id + "," +
                   fmt_double(cs.scores[i].mean_normalized_reward) + "," +
                   std::to_string(cs.scores[i].n) + "\n";
        }
    }
    return csv;
}

std::string TransferReport::summary_json() const {
    nlohmann::json j;
    j["smoothing_window"] = smoothing_window;
    j["n_checkpoints"] = checkpoint_steps.size();
    nlohmann::json arr = nlohmann::json::array();
    for (const CriticSeries& cs : critics) {
        int skipped = 0;
        for (const CriticScore& s : cs.scores) skipped += s.skipped;
        nlohmann::json e;
        e["critic_id"] = cs.critic_id;
        if (cs.spearman_vs_actor) {
            e["spearman_vs_actor"] = *cs.spearman_vs_actor;
        } else {
            e["spearman_vs_actor"] = nullptr;  // undefined on constant series
        }
        e["skipped_total"] = skipped;
        arr.push_back(std::move(e));
    }
    j["critics"] = std::move(arr);
    return j.dump(2);
}

TransferReport transfer_report(const std::vector<CheckpointEpisodes>& checkpoints,
                               const std::vector<Critic>& critics, int bos, int smoothing_window,
                               const TokenSeq& answer_cue) {
    if (checkpoints.size() < 3) throw ConfigError("xmodel: need at least 3 checkpoints");
    TransferReport rep;
    rep.smoothing_window = smoothing_window;
    for (const CheckpointEpisodes& ck : checkpoints) {
        rep.checkpoint_steps.push_back(ck.step);
        rep.episode_counts.push_back(static_cast<int>(ck.episodes.size()));
        Critic self{CriticSpec{"actor", ck.actor_params.config(), 0}, ck.actor_params,
                    hash_doubles(ck.actor_params.data())};
        rep.actor_series.push_back(
            critic_normalized_reward(self, ck.episodes, bos, answer_cue).mean_normalized_reward);
    }
    for (const Critic& critic : critics) {
        CriticSeries cs;
        cs.critic_id = critic.spec.id;
        std::vector<double> means;
        for (const CheckpointEpisodes& ck : checkpoints) {
            cs.scores.push_back(critic_normalized_reward(critic, ck.episodes, bos, answer_cue));
            means.push_back(cs.scores.back().mean_normalized_reward);
        }
        cs.smoothed = moving_average(means, smoothing_window);
        cs.spearman_vs_actor = spearman(rep.actor_series, means);
        rep.critics.push_back(std::move(cs));
    }
    return rep;
}

}  // namespace mct::xmodel
