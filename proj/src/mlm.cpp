#include "mct/mlm.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <sstream>
#include <utility>

#include <json.hpp>

#include "mct/nn/model.hpp"
#include "mct/rng.hpp"

namespace mct::mlm {

MLMHandle::MLMHandle(const nn::ModelConfig& cfg, nn::ParamBuffer actor_params,
                     nn::ParamBuffer baseline_params, int cap, TokenSeq init, int bos_id,
                     int eot_id)
    : config(cfg),
      actor(std::move(actor_params)),
      baseline(std::move(baseline_params)),
      cot_cap(cap),
      cot_init(std::move(init)),
      bos(bos_id),
      eot(eot_id) {
    cfg.validate();
    if (cot_cap < 1) throw ConfigError("mlm: cot_cap must be >= 1");
    if (bos < 0 || bos >= cfg.vocab_size || eot < 0 || eot >= cfg.vocab_size) {
        throw ConfigError("mlm: bos/eot outside vocabulary");
    }
    baseline_hash = baseline.hash();
}

void MLMHandle::verify_baseline() const {
    if (baseline.hash() != baseline_hash) {
        throw ContractError("mlm: frozen baseline parameters were mutated");
    }
}

namespace {

TokenSeq with_bos(int bos, std::initializer_list<const TokenSeq*> parts) {
    TokenSeq ctx{bos};
    for (const TokenSeq* p : parts) ctx.insert(ctx.end(), p->begin(), p->end());
    return ctx;
}

void check_budget(const nn::ModelConfig& cfg, std::size_t ctx_len, std::size_t extra) {
    if (ctx_len + extra > static_cast<std::size_t>(cfg.context_len)) {
        throw ConfigError("mlm: context length budget exceeded");
    }
}

// sample_continuation drops the stop token; put it back when generation
// stopped early so the stored CoT re-scores to exactly the sampled logprob.
TokenSeq sample_cot(const nn::ParamBuffer& params, const nn::ModelConfig& cfg,
                    const TokenSeq& ctx, int cap, int eot, std::uint64_t seed) {
    check_budget(cfg, ctx.size(), static_cast<std::size_t>(cap));
    TokenSeq cot = nn::sample_continuation(params, ctx, cap, 1.0, eot, seed);
    if (static_cast<int>(cot.size()) < cap) cot.push_back(eot);
    return cot;
}

}  // namespace

TokenSeq update_context(const MLMHandle& handle, const TokenSeq& q) {
    return with_bos(handle.bos, {&q, &handle.cot_init});
}

std::pair<TokenSeq, double> update_state(const MLMHandle& handle, const TokenSeq& q,
                                         std::uint64_t seed) {
    const TokenSeq ctx = update_context(handle, q);
    TokenSeq cot = sample_cot(handle.actor, handle.config, ctx, handle.cot_cap, handle.eot, seed);
    const double lp = nn::sequence_logprob(handle.actor, ctx, cot);
    return {std::move(cot), lp};
}

double score_answer_markovian(const MLMHandle& handle, const TokenSeq& cot,
                              const TokenSeq& answer) {
    if (answer.empty()) throw ContractError("mlm: empty answer");
    const TokenSeq ctx = with_bos(handle.bos, {&cot, &handle.answer_cue});
    check_budget(handle.config, ctx.size(), answer.size());
    return nn::sequence_logprob(handle.actor, ctx, answer);
}

double score_answer_nonmarkovian(const MLMHandle& handle, const TokenSeq& q, const TokenSeq& cot,
                                 const TokenSeq& answer) {
    if (answer.empty()) throw ContractError("mlm: empty answer");
    const TokenSeq ctx = with_bos(handle.bos, {&q, &handle.cot_init, &cot, &handle.answer_cue});
    check_budget(handle.config, ctx.size(), answer.size());
    return nn::sequence_logprob(handle.actor, ctx, answer);
}

double score_answer_baseline(const MLMHandle& handle, const TokenSeq& baseline_cot,
                             const TokenSeq& answer) {
    if (answer.empty()) throw ContractError("mlm: empty answer");
    handle.verify_baseline();
    const TokenSeq ctx = with_bos(handle.bos, {&baseline_cot, &handle.answer_cue});
    check_budget(handle.config, ctx.size(), answer.size());
    return nn::sequence_logprob(handle.baseline, ctx, answer);
}

TokenSeq sample_baseline_cot(const MLMHandle& handle, const TokenSeq& q, std::uint64_t seed) {
    handle.verify_baseline();
    const TokenSeq ctx = update_context(handle, q);
    return sample_cot(handle.baseline, handle.config, ctx, handle.cot_cap, handle.eot, seed);
}

MarkovianEpisode run_episode(const MLMHandle& handle, const TokenSeq& q, const TokenSeq& answer,
                             const TokenSeq& baseline_cot, std::uint64_t seed,
                             bool nonmarkovian) {
    MarkovianEpisode ep;
    ep.question = q;
    ep.answer = answer;
    ep.baseline_cot = baseline_cot;
    ep.nonmarkovian = nonmarkovian;
    std::tie(ep.cot, ep.cot_logprob) = update_state(handle, q, seed);
    ep.answer_logprob_markovian = score_answer_markovian(handle, ep.cot, answer);
    ep.baseline_answer_logprob = score_answer_baseline(handle, baseline_cot, answer);
    double actor_term = ep.answer_logprob_markovian;
    if (nonmarkovian) {
        ep.answer_logprob_nonmarkovian = score_answer_nonmarkovian(handle, q, ep.cot, answer);
        actor_term = ep.answer_logprob_nonmarkovian;
    }
    ep.reward = compute_reward(actor_term, ep.baseline_answer_logprob);
    return ep;
}

Trajectory rollout_trajectory(const MLMHandle& handle, const std::vector<TokenSeq>& observations,
                              std::uint64_t seed) {
    if (observations.size() < 2) throw ContractError("rollout: need at least two observations");
    handle.verify_baseline();

    Trajectory tr;
    tr.observations = observations;
    tr.states.push_back(handle.cot_init);
    tr.baseline_states.push_back(handle.cot_init);

    const std::size_t T = observations.size();
    for (std::size_t t = 0; t + 1 < T; ++t) {
        const TokenSeq actor_ctx = with_bos(handle.bos, {&observations[t], &tr.states[t]});
        tr.states.push_back(sample_cot(handle.actor, handle.config, actor_ctx, handle.cot_cap,
                                       handle.eot, derive_seed(seed, {1, t})));
        const TokenSeq base_ctx = with_bos(handle.bos, {&observations[t], &tr.baseline_states[t]});
        tr.baseline_states.push_back(sample_cot(handle.baseline, handle.config, base_ctx,
                                                handle.cot_cap, handle.eot,
                                                derive_seed(seed, {2, t})));
    }

    for (std::size_t t = 1; t < T; ++t) {
        const TokenSeq actor_ctx = with_bos(handle.bos, {&tr.states[t], &handle.answer_cue});
        const TokenSeq base_ctx = with_bos(handle.bos, {&tr.baseline_states[t], &handle.answer_cue});
        const double r = nn::sequence_logprob(handle.actor, actor_ctx, observations[t]) -
                         nn::sequence_logprob(handle.baseline, base_ctx, observations[t]);
        tr.step_rewards.push_back(r);
        tr.total_reward += r;
    }
    return tr;
}

namespace {

std::string hexfloat(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%a", v);
    return buf;
}

double from_hexfloat(const std::string& s) {
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (end == s.c_str() || *end != '\0') throw IoError("episode: bad hexfloat: " + s);
    return v;
}

}  // namespace

std::string episode_to_jsonl(const MarkovianEpisode& ep) {
    nlohmann::json j;
    j["question"] = ep.question;
    j["cot"] = ep.cot;
    j["answer"] = ep.answer;
    j["baseline_cot"] = ep.baseline_cot;
    j["cot_logprob"] = hexfloat(ep.cot_logprob);
    j["answer_logprob_markovian"] = hexfloat(ep.answer_logprob_markovian);
    j["baseline_answer_logprob"] = hexfloat(ep.baseline_answer_logprob);
    j["reward"] = hexfloat(ep.reward);
    j["nonmarkovian"] = ep.nonmarkovian;
    if (ep.nonmarkovian) {
        j["answer_logprob_nonmarkovian"] = hexfloat(ep.answer_logprob_nonmarkovian);
    }
    return j.dump();
}

MarkovianEpisode episode_from_jsonl(const std::string& line) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("episode: parse failure: ") + e.what());
    }
    MarkovianEpisode ep;
    ep.question = j.at("question").get<TokenSeq>();
    ep.cot = j.at("cot").get<TokenSeq>();
    ep.answer = j.at("answer").get<TokenSeq>();
    ep.baseline_cot = j.at("baseline_cot").get<TokenSeq>();
    ep.cot_logprob = from_hexfloat(j.at("cot_logprob").get<std::string>());
    ep.answer_logprob_markovian = from_hexfloat(j.at("answer_logprob_markovian").get<std::string>());
    ep.baseline_answer_logprob = from_hexfloat(j.at("baseline_answer_logprob").get<std::string>());
    ep.reward = from_hexfloat(j.at("reward").get<std::string>());
    ep.nonmarkovian = j.at("nonmarkovian").get<bool>();
    if (ep.nonmarkovian) {
        ep.answer_logprob_nonmarkovian =
            from_hexfloat(j.at("answer_logprob_nonmarkovian").get<std::string>());
    }
    return ep;
}

}  // namespace mct::mlm
