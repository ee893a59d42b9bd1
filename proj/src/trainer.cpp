#include "mct/trainer.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <utility>

#include <json.hpp>

#include "mct/nn/model.hpp"
#include "mct/rng.hpp"
#include "mct/tokenizer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace mct::trainer {

namespace {

// seed stream tags so independent draws never collide
constexpr std::uint64_t kSeedQa = 0x71;
constexpr std::uint64_t kSeedEpisode = 0xe0;
constexpr std::uint64_t kSeedBaseline = 0xb0;
constexpr std::uint64_t kSeedEval = 0xa0;
constexpr std::uint64_t kSeedPretrain = 0x97;

}  // namespace

std::string variant_name(Variant v) {
    switch (v) {
        case Variant::MarkovianGRPO: return "markovian-grpo";
        case Variant::NonMarkovianGRPO: return "nonmarkovian-grpo";
        case Variant::PG_EMA: return "pg-ema";
        case Variant::ExpertIteration: return "expert-iteration";
        case Variant::NoRewardGrad: return "no-reward-grad";
        case Variant::Unnormalized: return "unnormalized";
    }
    throw ContractError("unknown variant");
}

Variant variant_from_name(const std::string& name) {
    for (Variant v : {Variant::MarkovianGRPO, Variant::NonMarkovianGRPO, Variant::PG_EMA,
                      Variant::ExpertIteration, Variant::NoRewardGrad, Variant::Unnormalized}) {
        if (variant_name(v) == name) return v;
    }
    throw ConfigError("unknown variant: " + name);
}

void TrainConfig::validate() const {
    model.validate();
    task.validate();
    if (is_standardized(variant) && batch_size < 2) {
        throw ConfigError("trainer: standardized variants need batch_size >= 2");
    }
    if (batch_size < 1) throw ConfigError("trainer: batch_size must be >= 1");
    if (beta_kl < 0.0) throw ConfigError("trainer: beta_kl must be >= 0");
    if (advantage_epsilon <= 0.0) throw ConfigError("trainer: advantage_epsilon must be > 0");
    if (ema_rate <= 0.0 || ema_rate >= 1.0) throw ConfigError("trainer: ema_rate must be in (0,1)");
    if (grad_clip <= 0.0) throw ConfigError("trainer: grad_clip must be > 0");
    if (steps < 1) throw ConfigError("trainer: steps must be >= 1");
    if (eval_interval < 0 || checkpoint_interval < 0) {
        throw ConfigError("trainer: intervals must be >= 0");
    }
    if (eval_interval > 0 && eval_examples < 1) {
        throw ConfigError("trainer: eval_examples must be >= 1");
    }
}

AdvantageBatch standardize(const std::vector<double>& rewards, double eps) {
    if (rewards.size() < 2) throw ConfigError("standardize: need at least two rewards");
    AdvantageBatch out;
    out.rewards = rewards;
    const double n = static_cast<double>(rewards.size());
    double mu = 0.0;
    for (double r : rewards) mu += r;
    mu /= n;
    double var = 0.0;
    for (double r : rewards) var += (r - mu) * (r - mu);
    var /= n;
    out.mu = mu;
    out.sigma = std::sqrt(var);
    out.advantages.resize(rewards.size());
    for (std::size_t i = 0; i < rewards.size(); ++i) {
        out.advantages[i] = out.sigma == 0.0 ? 0.0 : (rewards[i] - mu) / (out.sigma + eps);
    }
    out.standardized = true;
    return out;
}

namespace {

TokenSeq cat_ctx(int bos, std::initializer_list<const TokenSeq*> parts) {
    TokenSeq ctx{bos};
    for (const TokenSeq* p : parts) ctx.insert(ctx.end(), p->begin(), p->end());
    return ctx;
}

// Shared between the value-and-gradient path and the frozen-batch scalar
// evaluation used by finite differences.
LossBreakdown compute_loss(const nn::ParamBuffer& actor, const mlm::MLMHandle& handle,
                           const std::vector<mlm::MarkovianEpisode>& episodes,
                           const AdvantageBatch& adv, const TrainConfig& cfg,
                           nn::GradientSet* grads) {
    if (is_single_sample(cfg.variant)) {
        throw ContractError("loss_components: single-sample variants use train_step_single");
    }
    if (episodes.size() != adv.advantages.size() || episodes.empty()) {
        throw ContractError("loss_components: batch size mismatch");
    }
    const double B = static_cast<double>(episodes.size());
    const bool nm = cfg.variant == Variant::NonMarkovianGRPO;
    const double w = cfg.actor_reward_weight;

    LossBreakdown out;
    for (std::size_t i = 0; i < episodes.size(); ++i) {
        const mlm::MarkovianEpisode& ep = episodes[i];
        const double A = adv.advantages[i];
        const TokenSeq uctx = cat_ctx(handle.bos, {&ep.question, &handle.cot_init});
        const TokenSeq actx =
            nm ? cat_ctx(handle.bos, {&ep.question, &handle.cot_init, &ep.cot, &handle.answer_cue})
               : cat_ctx(handle.bos, {&ep.cot, &handle.answer_cue});

        // answer-gradient scale; zero severs the actor-reward gradient path
        double ar_scale = 0.0;
        if (cfg.variant == Variant::Unnormalized) {
            ar_scale = -w / B;
        } else if (cfg.variant != Variant::NoRewardGrad) {
            ar_scale = -w / ((adv.sigma + cfg.advantage_epsilon) * B);
        }

        double clp, alp, kl;
        if (grads) {
            clp = nn::sequence_logprob_backward(actor, uctx, ep.cot, -A / B, *grads);
            alp = ar_scale != 0.0
                      ? nn::sequence_logprob_backward(actor, actx, ep.answer, ar_scale, *grads)
                      : nn::sequence_logprob(actor, actx, ep.answer);
            kl = cfg.beta_kl != 0.0
                     ? nn::kl_cot_backward(actor, handle.baseline, uctx, ep.cot, cfg.beta_kl / B,
                                           *grads)
                     : 0.0;
        } else {
            clp = nn::sequence_logprob(actor, uctx, ep.cot);
            alp = nn::sequence_logprob(actor, actx, ep.answer);
            kl = cfg.beta_kl != 0.0 ? nn::kl_cot(actor, handle.baseline, uctx, ep.cot) : 0.0;
        }

        // advantage value re-evaluated at the current actor parameters; the
        // detached statistics come from adv
        const double R = alp - ep.baseline_answer_logprob;
        const double a_val = cfg.variant == Variant::Unnormalized
                                 ? R
                                 : (R - adv.mu) / (adv.sigma + cfg.advantage_epsilon);

        const double pg = -clp * A;
        const double ar = -w * a_val;
        const double lk = cfg.beta_kl * kl;
        out.per_episode_pg.push_back(pg);
        out.per_episode_ar.push_back(ar);
        out.per_episode_kl.push_back(lk);
        out.l_pg += pg / B;
        out.l_ar += ar / B;
        out.l_kl += lk / B;
    }
    out.total = out.l_pg + out.l_ar + out.l_kl;
    return out;
}

}  // namespace

LossBreakdown loss_components(const mlm::MLMHandle& handle,
                              const std::vector<mlm::MarkovianEpisode>& episodes,
                              const AdvantageBatch& adv, const TrainConfig& cfg,
                              nn::GradientSet* grads) {
    return compute_loss(handle.actor, handle, episodes, adv, cfg, grads);
}

double loss_value_frozen(const nn::ParamBuffer& actor, const mlm::MLMHandle& handle,
                         const std::vector<mlm::MarkovianEpisode>& episodes,
                         const AdvantageBatch& adv, const TrainConfig& cfg) {
    return compute_loss(actor, handle, episodes, adv, cfg, nullptr).total;
}

double ema_baseline(const std::vector<double>& history, double r) {
    if (history.empty()) throw ContractError("ema_baseline: empty history");
    if (r <= 0.0 || r >= 1.0) throw ContractError("ema_baseline: r must be in (0,1)");
    const std::size_t n = history.size();
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double wi = std::pow(r, static_cast<double>(n - 1 - i));
        num += wi * history[i];
        den += wi;
    }
    return num / den;
}

std::vector<bool> ei_filter(const std::vector<double>& rewards,
                            const std::vector<double>& history, double k) {
    if (history.size() < 2) return std::vector<bool>(rewards.size(), true);
    const double n = static_cast<double>(history.size());
    double mu = 0.0;
    for (double r : history) mu += r;
    mu /= n;
    double var = 0.0;
    for (double r : history) var += (r - mu) * (r - mu);
    var /= n;
    const double tau = mu + k * std::sqrt(var);
    std::vector<bool> mask(rewards.size());
    for (std::size_t i = 0; i < rewards.size(); ++i) mask[i] = rewards[i] > tau;
    return mask;
}

std::string metrics_to_jsonl(const StepMetrics& m) {
    json j;
    j["step"] = m.step;
    j["variant"] = variant_name(m.variant);
    j["mean_reward"] = m.mean_reward;
    j["baseline_b"] = m.baseline_b;
    j["mean_advantage"] = m.mean_advantage;
    j["l_pg"] = m.l_pg;
    j["l_ar"] = m.l_ar;
    j["l_kl"] = m.l_kl;
    j["total"] = m.total;
    j["grad_norm_preclip"] = m.grad_norm_preclip;
    if (m.accuracy) j["accuracy"] = *m.accuracy;
    return j.dump();
}

StepMetrics train_step_grpo(mlm::MLMHandle& handle, const tasks::QAPair& qa,
                            const TrainConfig& cfg, nn::AdamState& opt, int step,
                            const StepHooks* hooks) {
    if (is_single_sample(cfg.variant)) {
        throw ContractError("train_step_grpo: wrong variant");
    }
    StepMetrics m;
    m.step = step;
    m.variant = cfg.variant;

    const TokenSeq bcot = mlm::sample_baseline_cot(
        handle, qa.question, derive_seed(cfg.seed, {kSeedBaseline, (std::uint64_t)step}));
    m.baseline_samples = 1;

    const bool nm = cfg.variant == Variant::NonMarkovianGRPO;
    std::vector<mlm::MarkovianEpisode> episodes;
    std::vector<double> rewards;
    for (int i = 0; i < cfg.batch_size; ++i) {
        episodes.push_back(mlm::run_episode(
            handle, qa.question, qa.answer, bcot,
            derive_seed(cfg.seed, {kSeedEpisode, (std::uint64_t)step, (std::uint64_t)i}), nm));
        rewards.push_back(episodes.back().reward);
        ++m.actor_samples;
    }
    if (hooks && hooks->on_episodes) hooks->on_episodes(episodes);

    AdvantageBatch adv;
    if (cfg.variant == Variant::Unnormalized) {
        adv.rewards = rewards;
        adv.advantages = rewards;
        adv.standardized = false;
    } else {
        adv = standardize(rewards, cfg.advantage_epsilon);
        if (hooks && hooks->on_standardize) hooks->on_standardize(adv);
    }

    nn::GradientSet grads(handle.actor);
    const LossBreakdown loss = loss_components(handle, episodes, adv, cfg, &grads);
    m.grad_norm_preclip = grads.global_norm();
    nn::clip_gradients(grads, cfg.grad_clip);
    m.grad_norm_postclip = grads.global_norm();
    nn::optimizer_step(handle.actor, grads, opt, cfg.adam);

    m.l_pg = loss.l_pg;
    m.l_ar = loss.l_ar;
    m.l_kl = loss.l_kl;
    m.total = loss.total;
    m.baseline_b = episodes.front().baseline_answer_logprob;
    for (double r : rewards) m.mean_reward += r / rewards.size();
    for (double a : adv.advantages) m.mean_advantage += a / adv.advantages.size();
    return m;
}

StepMetrics train_step_single(mlm::MLMHandle& handle, const tasks::QAPair& qa,
                              const TrainConfig& cfg, nn::AdamState& opt,
                              std::vector<double>& reward_history, int step,
                              const StepHooks* hooks) {
    if (!is_single_sample(cfg.variant)) {
        throw ContractError("train_step_single: wrong variant");
    }
    StepMetrics m;
    m.step = step;
    m.variant = cfg.variant;

    const TokenSeq bcot = mlm::sample_baseline_cot(
        handle, qa.question, derive_seed(cfg.seed, {kSeedBaseline, (std::uint64_t)step}));
    const mlm::MarkovianEpisode ep = mlm::run_episode(
        handle, qa.question, qa.answer, bcot,
        derive_seed(cfg.seed, {kSeedEpisode, (std::uint64_t)step, 0}), false);
    if (hooks && hooks->on_episodes) hooks->on_episodes({ep});
    m.actor_samples = 1;
    m.baseline_samples = 1;

    const double V = reward_history.empty() ? 0.0 : ema_baseline(reward_history, cfg.ema_rate);
    const double A = ep.reward - V;
    m.included = cfg.variant == Variant::ExpertIteration
                     ? ei_filter({ep.reward}, reward_history, cfg.ei_k)[0]
                     : true;

    nn::GradientSet grads(handle.actor);
    if (m.included) {
        const TokenSeq uctx = cat_ctx(handle.bos, {&ep.question, &handle.cot_init});
        m.l_pg = -nn::sequence_logprob_backward(handle.actor, uctx, ep.cot, -A, grads) * A;
    }
    m.total = m.l_pg;
    m.grad_norm_preclip = grads.global_norm();
    nn::clip_gradients(grads, cfg.grad_clip);
    m.grad_norm_postclip = grads.global_norm();
    nn::optimizer_step(handle.actor, grads, opt, cfg.adam);

    reward_history.push_back(ep.reward);
    m.mean_reward = ep.reward;
    m.baseline_b = V;
    m.mean_advantage = A;
    return m;
}

double accuracy_probe(const mlm::MLMHandle& handle, const tasks::TaskSource& source, int n,
                      std::uint64_t seed) {
    if (n < 1) throw ContractError("accuracy_probe: n must be >= 1");
    int correct = 0;
    for (int i = 0; i < n; ++i) {
        const tasks::QAPair qa = source.sample(derive_seed(seed, {(std::uint64_t)i}));
        const TokenSeq uctx = cat_ctx(handle.bos, {&qa.question, &handle.cot_init});
        TokenSeq cot =
            nn::sample_continuation(handle.actor, uctx, handle.cot_cap, 0.0, handle.eot, 0);
        if (static_cast<int>(cot.size()) < handle.cot_cap) cot.push_back(handle.eot);
        const TokenSeq actx = cat_ctx(handle.bos, {&cot, &handle.answer_cue});
        const TokenSeq pred =
            nn::sample_continuation(handle.actor, actx, static_cast<int>(qa.answer.size()), 0.0,
                                    handle.eot, 0);
        if (tasks::check_answer(pred, qa.answer)) ++correct;
    }
    return static_cast<double>(correct) / n;
}

double pretrain_lm(nn::ParamBuffer& params, const std::string& corpus, int steps, int batch_size,
                   const nn::AdamHyper& hyper, std::uint64_t seed) {
    if (steps < 1 || batch_size < 1) throw ConfigError("pretrain: steps and batch must be >= 1");
    const auto& tok = Tokenizer::instance();
    const int bos = tok.bos();
    const int eot = tok.eot();
    const int max_doc = params.config().context_len - 2;

    std::vector<TokenSeq> docs;
    std::string cur;
    std::istringstream in(corpus);
    std::string line;
    auto flush = [&] {
        if (cur.empty()) return;
        TokenSeq ids = tok.tokenize(cur);
        if (ids.size() > static_cast<std::size_t>(max_doc)) ids.resize(max_doc);
        ids.push_back(eot);
        docs.push_back(std::move(ids));
        cur.clear();
    };
    while (std::getline(in, line)) {
        if (line.empty()) {
            flush();
        } else {
            if (!cur.empty()) cur += "\n";
            cur += line;
        }
    }
    flush();
    if (docs.empty()) throw ConfigError("pretrain: empty corpus");

    nn::AdamState opt(params.size());
    const TokenSeq bos_ctx{bos};
    double last_loss = 0.0;
    for (int step = 0; step < steps; ++step) {
        Rng rng(derive_seed(seed, {kSeedPretrain, (std::uint64_t)step}));
        nn::GradientSet grads(params);
        double loss = 0.0;
        for (int b = 0; b < batch_size; ++b) {
            const TokenSeq& doc = docs[rng.next_below(docs.size())];
            const double len = static_cast<double>(doc.size());
            const double lp = nn::sequence_logprob_backward(params, bos_ctx, doc,
                                                            -1.0 / (len * batch_size), grads);
            loss += -lp / (len * batch_size);
        }
        nn::clip_gradients(grads, 1.0);
        nn::optimizer_step(params, grads, opt, hyper);
        last_loss = loss;
    }
    return last_loss;
}

nn::Checkpoint make_run_checkpoint(const mlm::MLMHandle& handle, const nn::AdamState& opt,
                                   const std::vector<double>& reward_history, int step) {
    nn::Checkpoint ckpt;
    ckpt.config = handle.config;
    ckpt.step = static_cast<std::uint64_t>(step);
    ckpt.arrays.emplace_back("actor", handle.actor.data());
    ckpt.arrays.emplace_back("baseline", handle.baseline.data());
    ckpt.arrays.emplace_back("adam_m", opt.m);
    ckpt.arrays.emplace_back("adam_v", opt.v);
    ckpt.arrays.emplace_back("adam_t", std::vector<double>{static_cast<double>(opt.t)});
    ckpt.arrays.emplace_back("reward_history", reward_history);
    return ckpt;
}

void restore_run_checkpoint(const nn::Checkpoint& ckpt, mlm::MLMHandle& handle,
                            nn::AdamState& opt, std::vector<double>& reward_history, int& step) {
    if (!(ckpt.config == handle.config)) {
        throw ConfigError("checkpoint: model configuration mismatch");
    }
    if (ckpt.array("actor").size() != handle.actor.size()) {
        throw IoError("checkpoint: parameter size mismatch");
    }
    handle.actor.data() = ckpt.array("actor");
    handle.baseline.data() = ckpt.array("baseline");
    handle.baseline_hash = handle.baseline.hash();
    opt.m = ckpt.array("adam_m");
    opt.v = ckpt.array("adam_v");
    opt.t = static_cast<std::uint64_t>(ckpt.array("adam_t").at(0));
    reward_history = ckpt.array("reward_history");
    step = static_cast<int>(ckpt.step);
}

std::string manifest_json(const TrainConfig& cfg, std::uint64_t baseline_hash) {
    json j;
    j["format"] = "mct-manifest v1";
    j["tokenizer"] = Tokenizer::kSchemeId;
    j["variant"] = variant_name(cfg.variant);
    j["batch_size"] = cfg.batch_size;
    j["beta_kl"] = cfg.beta_kl;
    j["advantage_epsilon"] = cfg.advantage_epsilon;
    j["actor_reward_weight"] = cfg.actor_reward_weight;
    j["ema_rate"] = cfg.ema_rate;
    j["ei_k"] = cfg.ei_k;
    j["grad_clip"] = cfg.grad_clip;
    j["steps"] = cfg.steps;
    j["eval_interval"] = cfg.eval_interval;
    j["eval_examples"] = cfg.eval_examples;
    j["checkpoint_interval"] = cfg.checkpoint_interval;
    j["seed"] = cfg.seed;
    j["log_episodes"] = cfg.log_episodes;
    j["init_checkpoint"] = cfg.init_checkpoint;
    j["run_dir"] = cfg.run_dir;
    j["baseline_hash"] = baseline_hash;
    j["adam"] = {{"lr", cfg.adam.lr},
                 {"beta1", cfg.adam.beta1},
                 {"beta2", cfg.adam.beta2},
                 {"eps", cfg.adam.eps}};
    j["model"] = {{"vocab_size", cfg.model.vocab_size}, {"context_len", cfg.model.context_len},
                  {"d_model", cfg.model.d_model},       {"n_layers", cfg.model.n_layers},
                  {"n_heads", cfg.model.n_heads},       {"d_ff", cfg.model.d_ff},
                  {"init_seed", cfg.model.init_seed}};
    j["task"] = {{"kind", tasks::task_kind_name(cfg.task.kind)},
                 {"n_terms", cfg.task.n_terms},
                 {"term_lo", cfg.task.term_lo},
                 {"term_hi", cfg.task.term_hi},
                 {"corpus_path", cfg.task.corpus_path},
                 {"ctx_len", cfg.task.ctx_len},
                 {"target_len", cfg.task.target_len},
                 {"cot_cap", cfg.task.cot_cap},
                 {"seed", cfg.task.seed}};
    return j.dump(2);
}

TrainConfig config_from_manifest(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::exception& e) {
        throw IoError(std::string("manifest: parse failure: ") + e.what());
    }
    if (j.value("format", "") != "mct-manifest v1") throw IoError("manifest: unknown format");
    TrainConfig cfg;
    cfg.variant = variant_from_name(j.at("variant").get<std::string>());
    cfg.batch_size = j.at("batch_size").get<int>();
    cfg.beta_kl = j.at("beta_kl").get<double>();
    cfg.advantage_epsilon = j.at("advantage_epsilon").get<double>();
    cfg.actor_reward_weight = j.at("actor_reward_weight").get<double>();
    cfg.ema_rate = j.at("ema_rate").get<double>();
    cfg.ei_k = j.at("ei_k").get<double>();
    cfg.grad_clip = j.at("grad_clip").get<double>();
    cfg.steps = j.at("steps").get<int>();
    cfg.eval_interval = j.at("eval_interval").get<int>();
    cfg.eval_examples = j.at("eval_examples").get<int>();
    cfg.checkpoint_interval = j.at("checkpoint_interval").get<int>();
    cfg.seed = j.at("seed").get<std::uint64_t>();
    cfg.log_episodes = j.at("log_episodes").get<bool>();
    cfg.init_checkpoint = j.at("init_checkpoint").get<std::string>();
    cfg.run_dir = j.at("run_dir").get<std::string>();
    const json& a = j.at("adam");
    cfg.adam.lr = a.at("lr").get<double>();
    cfg.adam.beta1 = a.at("beta1").get<double>();
    cfg.adam.beta2 = a.at("beta2").get<double>();
    cfg.adam.eps = a.at("eps").get<double>();
    const json& mdl = j.at("model");
    cfg.model.vocab_size = mdl.at("vocab_size").get<int>();
    cfg.model.context_len = mdl.at("context_len").get<int>();
    cfg.model.d_model = mdl.at("d_model").get<int>();
    cfg.model.n_layers = mdl.at("n_layers").get<int>();
    cfg.model.n_heads = mdl.at("n_heads").get<int>();
    cfg.model.d_ff = mdl.at("d_ff").get<int>();
    cfg.model.init_seed = mdl.at("init_seed").get<std::uint64_t>();
    const json& t = j.at("task");
    cfg.task.kind = tasks::task_kind_from_name(t.at("kind").get<std::string>());
    cfg.task.n_terms = t.at("n_terms").get<int>();
    cfg.task.term_lo = t.at("term_lo").get<int>();
    cfg.task.term_hi = t.at("term_hi").get<int>();
    cfg.task.corpus_path = t.at("corpus_path").get<std::string>();
    cfg.task.ctx_len = t.at("ctx_len").get<int>();
    cfg.task.target_len = t.at("target_len").get<int>();
    cfg.task.cot_cap = t.at("cot_cap").get<int>();
    cfg.task.seed = t.at("seed").get<std::uint64_t>();
    return cfg;
}

RunResult train(const TrainConfig& cfg, const std::string& resume_from, const StepHooks* hooks) {
    cfg.validate();
    if (cfg.run_dir.empty()) throw ConfigError("train: run_dir required");
    if (cfg.task.kind == tasks::TaskKind::MicroOracle) {
        throw ConfigError("train: micro-oracle task is enumeration-only");
    }
    fs::create_directories(cfg.run_dir);
    const fs::path dir(cfg.run_dir);
    const fs::path marker = dir / "INCOMPLETE";
    {
        std::ofstream mk(marker);
        if (!mk) throw IoError("train: cannot write to run_dir");
        mk << "run in progress or aborted\n";
    }

    const auto& tok = Tokenizer::instance();
    nn::ParamBuffer actor = [&] {
        if (!cfg.init_checkpoint.empty()) {
            const nn::Checkpoint ck = nn::load_checkpoint(cfg.init_checkpoint);
            if (!(ck.config == cfg.model)) {
                throw ConfigError("train: init checkpoint model mismatch");
            }
            nn::ParamBuffer p = nn::ParamBuffer::zeros(cfg.model);
            p.data() = ck.array(ck.has_array("actor") ? "actor" : "params");
            return p;
        }
        return nn::ParamBuffer::init(cfg.model);
    }();

    const TokenSeq prompt =
        tasks::prompt_template(cfg.task.kind, cfg.task.cot_cap, cfg.task.target_len);
    mlm::MLMHandle handle(cfg.model, actor, actor, cfg.task.cot_cap, prompt, tok.bos(), tok.eot());
    handle.answer_cue = tasks::answer_cue(cfg.task.kind);
    const tasks::TaskSource source(cfg.task);

    nn::AdamState opt(handle.actor.size());
    std::vector<double> reward_history;
    int start_step = 0;
    if (!resume_from.empty()) {
        restore_run_checkpoint(nn::load_checkpoint(resume_from), handle, opt, reward_history,
                               start_step);
    }

    {
        std::ofstream mf(dir / "manifest.json");
        mf << manifest_json(cfg, handle.baseline_hash) << "\n";
    }
    std::ofstream metrics(dir / "metrics.jsonl", start_step > 0 ? std::ios::app : std::ios::out);
    std::ofstream episodes_log;
    if (cfg.log_episodes) {
        episodes_log.open(dir / "episodes.jsonl", start_step > 0 ? std::ios::app : std::ios::out);
    }

    StepHooks chained;
    chained.on_standardize = [&](const AdvantageBatch& adv) {
        if (hooks && hooks->on_standardize) hooks->on_standardize(adv);
    };
    chained.on_episodes = [&](const std::vector<mlm::MarkovianEpisode>& eps) {
        if (cfg.log_episodes) {
            for (const auto& ep : eps) episodes_log << mlm::episode_to_jsonl(ep) << "\n";
        }
        if (hooks && hooks->on_episodes) hooks->on_episodes(eps);
    };

    RunResult result;
    result.run_dir = cfg.run_dir;
    for (int step = start_step; step < cfg.steps; ++step) {
        const tasks::QAPair qa =
            source.sample(derive_seed(cfg.seed, {kSeedQa, (std::uint64_t)step}));
        StepMetrics m = is_single_sample(cfg.variant)
                            ? train_step_single(handle, qa, cfg, opt, reward_history, step,
                                                &chained)
                            : train_step_grpo(handle, qa, cfg, opt, step, &chained);
        if (cfg.eval_interval > 0 &&
            (step % cfg.eval_interval == 0 || step == cfg.steps - 1)) {
            m.accuracy = accuracy_probe(handle, source, cfg.eval_examples,
                                        derive_seed(cfg.seed, {kSeedEval}));
        }
        metrics << metrics_to_jsonl(m) << "\n";
        if (cfg.checkpoint_interval > 0 && (step + 1) % cfg.checkpoint_interval == 0) {
            nn::save_checkpoint(make_run_checkpoint(handle, opt, reward_history, step + 1),
                                (dir / ("ckpt_" + std::to_string(step + 1) + ".ckpt")).string());
        }
        result.last = m;
        ++result.steps_run;
    }
    nn::save_checkpoint(make_run_checkpoint(handle, opt, reward_history, cfg.steps),
                        (dir / "final.ckpt").string());
    metrics.flush();
    if (!metrics) throw IoError("train: metrics write failure");
    fs::remove(marker);
    return result;
}

}  // namespace mct::trainer
