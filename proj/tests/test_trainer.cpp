#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mct/nn/grad_check.hpp"
#include "mct/nn/model.hpp"
#include "mct/trainer.hpp"

using namespace mct;
using namespace mct::trainer;
namespace fs = std::filesystem;

namespace {

nn::ModelConfig tiny_config() {
    nn::ModelConfig cfg;
    cfg.vocab_size = 50;  // full task alphabet
    cfg.context_len = 80;
    cfg.d_model = 16;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.d_ff = 32;
    cfg.init_seed = 7;
    return cfg;
}

TrainConfig tiny_train_config() {
    TrainConfig cfg;
    cfg.model = tiny_config();
    cfg.task.kind = tasks::TaskKind::Arithmetic;
    cfg.task.n_terms = 2;
    cfg.task.term_lo = 1;
    cfg.task.term_hi = 9;
    cfg.task.cot_cap = 4;
    cfg.batch_size = 4;
    cfg.steps = 4;
    cfg.seed = 3;
    return cfg;
}

mlm::MLMHandle tiny_handle(const TrainConfig& cfg) {
    const auto& tok = Tokenizer::instance();
    auto p = nn::ParamBuffer::init(cfg.model);
    const TokenSeq prompt =
        tasks::prompt_template(cfg.task.kind, cfg.task.cot_cap, cfg.task.target_len);
    return mlm::MLMHandle(cfg.model, p, p, cfg.task.cot_cap, prompt, tok.bos(), tok.eot());
}

std::vector<mlm::MarkovianEpisode> fixed_batch(const mlm::MLMHandle& h, const TrainConfig& cfg,
                                               bool nm = false) {
    const tasks::QAPair qa = tasks::gen_arithmetic(cfg.task.n_terms, 1, 9, 5);
    const TokenSeq bcot = mlm::sample_baseline_cot(h, qa.question, 11);
    std::vector<mlm::MarkovianEpisode> eps;
    for (int i = 0; i < cfg.batch_size; ++i) {
        eps.push_back(mlm::run_episode(h, qa.question, qa.answer, bcot, 100 + i, nm));
    }
    return eps;
}

std::vector<double> batch_rewards(const std::vector<mlm::MarkovianEpisode>& eps) {
    std::vector<double> r;
    for (const auto& e : eps) r.push_back(e.reward);
    return r;
}

fs::path fresh_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("mct_trainer_" + name);
    fs::remove_all(p);
    return p;
}

std::vector<std::string> read_lines(const fs::path& p) {
    std::ifstream in(p);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) lines.push_back(line);
    return lines;
}

}  // namespace

TEST_CASE("standardize matches the hand-computed four-point batch") {
    const AdvantageBatch adv = standardize({0.0, 1.0, 2.0, 3.0}, 0.0);
    CHECK(adv.mu == doctest::Approx(1.5).epsilon(1e-12));
    CHECK(adv.sigma == doctest::Approx(1.1180339887).epsilon(1e-9));
    CHECK(adv.advantages[0] == doctest::Approx(-1.3416407865).epsilon(1e-9));
    CHECK(adv.advantages[1] == doctest::Approx(-0.4472135955).epsilon(1e-9));
    CHECK(adv.advantages[2] == doctest::Approx(0.4472135955).epsilon(1e-9));
    CHECK(adv.advantages[3] == doctest::Approx(1.3416407865).epsilon(1e-9));
}

TEST_CASE("standardize statistics and degenerate batches") {
    const AdvantageBatch adv = standardize({-2.0, 0.3, 7.0, 1.1, -4.0}, 1e-6);
    double mean = 0.0, var = 0.0;
    for (double a : adv.advantages) mean += a / adv.advantages.size();
    for (double a : adv.advantages) var += (a - mean) * (a - mean) / adv.advantages.size();
    CHECK(std::abs(mean) <= 1e-9);
    const double pstd = std::sqrt(var);
    CHECK(pstd <= 1.0);
    CHECK(pstd > 1.0 - 1e-3);

    const AdvantageBatch flat = standardize({2.5, 2.5, 2.5}, 1e-6);
    for (double a : flat.advantages) CHECK(a == 0.0);

    AdvantageBatch shifted = standardize({-2.0 + 10, 0.3 + 10, 7.0 + 10, 1.1 + 10, -4.0 + 10}, 1e-6);
    for (std::size_t i = 0; i < 5; ++i) {
        CHECK(shifted.advantages[i] == doctest::Approx(adv.advantages[i]).epsilon(1e-9));
    }
    CHECK_THROWS_AS(standardize({1.0}, 1e-6), ConfigError);
}

TEST_CASE("zero advantages and zero KL weight give zero loss and zero gradient") {
    TrainConfig cfg = tiny_train_config();
    cfg.beta_kl = 0.0;
    cfg.actor_reward_weight = 0.0;
    mlm::MLMHandle h = tiny_handle(cfg);
    const auto eps = fixed_batch(h, cfg);
    AdvantageBatch adv;
    adv.rewards = batch_rewards(eps);
    adv.advantages.assign(eps.size(), 0.0);
    nn::GradientSet grads(h.actor);
    const LossBreakdown loss = loss_components(h, eps, adv, cfg, &grads);
    CHECK(loss.l_pg == 0.0);
    CHECK(loss.total == 0.0);
    CHECK(grads.global_norm() == 0.0);
}

TEST_CASE("loss breakdown sums and kl is zero at actor == baseline") {
    TrainConfig cfg = tiny_train_config();
    mlm::MLMHandle h = tiny_handle(cfg);
    const auto eps = fixed_batch(h, cfg);
    const AdvantageBatch adv = standardize(batch_rewards(eps), cfg.advantage_epsilon);
    const LossBreakdown loss = loss_components(h, eps, adv, cfg);
    CHECK(loss.total == doctest::Approx(loss.l_pg + loss.l_ar + loss.l_kl).epsilon(1e-9));
    CHECK(loss.l_kl == 0.0);  // identical distributions
    CHECK(loss.per_episode_pg.size() == eps.size());
}

TEST_CASE("no-reward-grad keeps the loss value but changes the gradient") {
    TrainConfig cfg = tiny_train_config();
    mlm::MLMHandle h = tiny_handle(cfg);
    // make the reference distributions differ so KL and its gradient are live
    h.actor.data()[3] += 0.05;
    const auto eps = fixed_batch(h, cfg);
    const AdvantageBatch adv = standardize(batch_rewards(eps), cfg.advantage_epsilon);

    nn::GradientSet g_full(h.actor), g_norg(h.actor);
    const LossBreakdown full = loss_components(h, eps, adv, cfg, &g_full);
    cfg.variant = Variant::NoRewardGrad;
    const LossBreakdown norg = loss_components(h, eps, adv, cfg, &g_norg);
    CHECK(norg.total == doctest::Approx(full.total).epsilon(1e-12));
    CHECK(norg.l_ar == doctest::Approx(full.l_ar).epsilon(1e-12));
    double max_diff = 0.0;
    for (std::size_t i = 0; i < g_full.data.size(); ++i) {
        max_diff = std::max(max_diff, std::abs(g_full.data[i] - g_norg.data[i]));
    }
    CHECK(max_diff > 1e-8);
}

TEST_CASE("loss gradient matches finite differences on the frozen batch") {
    TrainConfig cfg = tiny_train_config();
    mlm::MLMHandle h = tiny_handle(cfg);
    h.actor.data()[3] += 0.05;  // actor != baseline so every term is active
    const auto eps = fixed_batch(h, cfg);
    const AdvantageBatch adv = standardize(batch_rewards(eps), cfg.advantage_epsilon);

    nn::GradientSet grads(h.actor);
    loss_components(h, eps, adv, cfg, &grads);
    const auto loss_fn = [&](const nn::ParamBuffer& p) {
        return loss_value_frozen(p, h, eps, adv, cfg);
    };
    const auto report = nn::finite_difference_check(h.actor, loss_fn, grads.data, 250, 1e-5);
    CHECK(report.max_rel_error < 1e-4);
}

TEST_CASE("nonmarkovian loss gradient matches finite differences") {
    TrainConfig cfg = tiny_train_config();
    cfg.variant = Variant::NonMarkovianGRPO;
    mlm::MLMHandle h = tiny_handle(cfg);
    h.actor.data()[5] -= 0.04;
    const auto eps = fixed_batch(h, cfg, true);
    const AdvantageBatch adv = standardize(batch_rewards(eps), cfg.advantage_epsilon);

    nn::GradientSet grads(h.actor);
    loss_components(h, eps, adv, cfg, &grads);
    const auto loss_fn = [&](const nn::ParamBuffer& p) {
        return loss_value_frozen(p, h, eps, adv, cfg);
    };
    const auto report = nn::finite_difference_check(h.actor, loss_fn, grads.data, 200, 1e-5);
    CHECK(report.max_rel_error < 1e-4);
}

TEST_CASE("ema baseline closed forms") {
    CHECK(ema_baseline({1.0, 2.0}, 0.9) == doctest::Approx((0.9 + 2.0) / 1.9).epsilon(1e-12));
    CHECK(ema_baseline({1.0, 2.0}, 0.9) == doctest::Approx(1.5263157895).epsilon(1e-9));
    CHECK(ema_baseline({4.2, 4.2, 4.2, 4.2}, 0.9) == doctest::Approx(4.2).epsilon(1e-12));
    std::vector<double> hist;
    double mean = 0.0;
    for (int i = 1; i <= 10; ++i) {
        hist.push_back(i * 0.1);
        mean += i * 0.1 / 10.0;
    }
    CHECK(std::abs(ema_baseline(hist, 0.999) - mean) < 1e-3);  // r -> 1 approaches the mean
    CHECK_THROWS_AS(ema_baseline({}, 0.9), ContractError);
}

TEST_CASE("expert-iteration filter thresholds") {
    const auto mask = ei_filter({-1.0, 1.0}, {-1.0, 1.0}, 0.0);  // history mean 0
    REQUIRE(mask.size() == 2);
    CHECK_FALSE(mask[0]);
    CHECK(mask[1]);

    const auto none = ei_filter({5.0, 50.0}, {0.0, 1.0}, 1e9);
    CHECK_FALSE(none[0]);
    CHECK_FALSE(none[1]);

    const auto warmup = ei_filter({-100.0, 100.0}, {3.0}, 1.0);
    CHECK(warmup[0]);
    CHECK(warmup[1]);

    // strict inequality: reward exactly at the threshold is excluded
    const auto edge = ei_filter({1.0}, {0.0, 2.0}, 0.0);  // tau = 1.0
    CHECK_FALSE(edge[0]);
}

TEST_CASE("grpo step mechanics") {
    TrainConfig cfg = tiny_train_config();
    mlm::MLMHandle h = tiny_handle(cfg);
    nn::AdamState opt(h.actor.size());
    const tasks::QAPair qa = tasks::gen_arithmetic(2, 1, 9, 8);

    int standardize_calls = 0;
    StepHooks hooks;
    hooks.on_standardize = [&](const AdvantageBatch& adv) {
        ++standardize_calls;
        double mean = 0.0;
        for (double a : adv.advantages) mean += a / adv.advantages.size();
        CHECK(std::abs(mean) <= 1e-9);
    };

    const std::uint64_t hash0 = h.actor.hash();
    const StepMetrics m = train_step_grpo(h, qa, cfg, opt, 0, &hooks);
    CHECK(m.actor_samples == cfg.batch_size);
    CHECK(m.baseline_samples == 1);
    CHECK(standardize_calls == 1);
    CHECK(m.l_kl == 0.0);  // step 0: actor == baseline
    CHECK(std::abs(m.mean_advantage) <= 1e-9);
    CHECK(m.grad_norm_postclip <= 1.0 + 1e-9);
    CHECK(h.actor.hash() != hash0);
    CHECK(opt.t == 1);

    // determinism: same seeds reproduce the step bitwise
    mlm::MLMHandle h2 = tiny_handle(cfg);
    nn::AdamState opt2(h2.actor.size());
    const StepMetrics m2 = train_step_grpo(h2, qa, cfg, opt2, 0, nullptr);
    CHECK(h2.actor.hash() == h.actor.hash());
    CHECK(m2.total == m.total);
    CHECK(m2.grad_norm_preclip == m.grad_norm_preclip);
}

TEST_CASE("unnormalized variant never calls standardize") {
    TrainConfig cfg = tiny_train_config();
    cfg.variant = Variant::Unnormalized;
    mlm::MLMHandle h = tiny_handle(cfg);
    nn::AdamState opt(h.actor.size());
    int standardize_calls = 0;
    StepHooks hooks;
    hooks.on_standardize = [&](const AdvantageBatch&) { ++standardize_calls; };
    const StepMetrics m = train_step_grpo(h, tasks::gen_arithmetic(2, 1, 9, 8), cfg, opt, 0, &hooks);
    CHECK(standardize_calls == 0);
    CHECK(m.mean_advantage == doctest::Approx(m.mean_reward).epsilon(1e-12));
}

TEST_CASE("null training: zero learning rate keeps mean reward at zero") {
    TrainConfig cfg = tiny_train_config();
    cfg.adam.lr = 0.0;
    cfg.steps = 128;
    mlm::MLMHandle h = tiny_handle(cfg);
    nn::AdamState opt(h.actor.size());
    const tasks::TaskSource source(cfg.task);
    const std::uint64_t hash0 = h.actor.hash();
    double sum = 0.0, sumsq = 0.0;
    for (int step = 0; step < cfg.steps; ++step) {
        const tasks::QAPair qa = source.sample(derive_seed(cfg.seed, {0x71, (std::uint64_t)step}));
        const StepMetrics m = train_step_grpo(h, qa, cfg, opt, step, nullptr);
        sum += m.mean_reward;
        sumsq += m.mean_reward * m.mean_reward;
    }
    CHECK(h.actor.hash() == hash0);
    const double mean = sum / cfg.steps;
    const double se = std::sqrt((sumsq / cfg.steps - mean * mean) / cfg.steps);
    CHECK(std::abs(mean) <= 3.0 * se);
}

TEST_CASE("pg-ema step uses the closed-form baseline") {
    TrainConfig cfg = tiny_train_config();
    cfg.variant = Variant::PG_EMA;
    mlm::MLMHandle h = tiny_handle(cfg);
    nn::AdamState opt(h.actor.size());
    const tasks::QAPair qa = tasks::gen_arithmetic(2, 1, 9, 8);

    std::vector<double> history;
    const StepMetrics m0 = train_step_single(h, qa, cfg, opt, history, 0, nullptr);
    CHECK(m0.baseline_b == 0.0);  // no history at t = 1
    CHECK(m0.mean_advantage == m0.mean_reward);
    REQUIRE(history.size() == 1);

    const StepMetrics m1 = train_step_single(h, qa, cfg, opt, history, 1, nullptr);
    CHECK(m1.baseline_b == doctest::Approx(history[0]).epsilon(1e-12));
    const StepMetrics m2 = train_step_single(h, qa, cfg, opt, history, 2, nullptr);
    CHECK(m2.baseline_b ==
          doctest::Approx((0.9 * history[0] + history[1]) / 1.9).epsilon(1e-12));
}

TEST_CASE("expert iteration with a huge k never updates parameters") {
    TrainConfig cfg = tiny_train_config();
    cfg.variant = Variant::ExpertIteration;
    cfg.ei_k = 1e9;
    mlm::MLMHandle h = tiny_handle(cfg);
    nn::AdamState opt(h.actor.size());
    const std::uint64_t hash0 = h.actor.hash();
    std::vector<double> history{0.0, 0.1};  // past warm-up so the filter is live
    for (int step = 0; step < 10; ++step) {
        const StepMetrics m =
            train_step_single(h, tasks::gen_arithmetic(2, 1, 9, step), cfg, opt, history, step,
                              nullptr);
        CHECK_FALSE(m.included);
        CHECK(m.total == 0.0);
    }
    CHECK(h.actor.hash() == hash0);
}

TEST_CASE("pretraining reduces next-token loss") {
    nn::ModelConfig mc = tiny_config();
    auto params = nn::ParamBuffer::init(mc);
    const std::string corpus = tasks::arithmetic_corpus(100, 2, 1, 9, 4, 2);
    const double first = pretrain_lm(params, corpus, 1, 8, nn::AdamHyper{1e-3, 0.9, 0.999, 1e-8}, 5);
    const double last = pretrain_lm(params, corpus, 120, 8, nn::AdamHyper{1e-3, 0.9, 0.999, 1e-8}, 5);
    CHECK(last < first);
}

TEST_CASE("accuracy probe is deterministic and bounded") {
    TrainConfig cfg = tiny_train_config();
    mlm::MLMHandle h = tiny_handle(cfg);
    const tasks::TaskSource source(cfg.task);
    const double a = accuracy_probe(h, source, 16, 4);
    CHECK(a >= 0.0);
    CHECK(a <= 1.0);
    CHECK(a == accuracy_probe(h, source, 16, 4));
}

TEST_CASE("manifest round-trips through parse and serialize") {
    TrainConfig cfg = tiny_train_config();
    cfg.run_dir = "/tmp/some_run";
    cfg.eval_interval = 5;
    const std::string text = manifest_json(cfg, 12345);
    const TrainConfig back = config_from_manifest(text);
    CHECK(manifest_json(back, 12345) == text);
    CHECK_THROWS_AS(config_from_manifest("{}"), IoError);
}

TEST_CASE("train writes a complete run directory") {
    TrainConfig cfg = tiny_train_config();
    cfg.steps = 3;
    cfg.eval_interval = 0;
    const fs::path dir = fresh_dir("run");
    cfg.run_dir = dir.string();
    const RunResult res = train(cfg);
    CHECK(res.steps_run == 3);
    CHECK(fs::exists(dir / "manifest.json"));
    CHECK(fs::exists(dir / "final.ckpt"));
    CHECK_FALSE(fs::exists(dir / "INCOMPLETE"));
    const auto lines = read_lines(dir / "metrics.jsonl");
    REQUIRE(lines.size() == 3);
    for (const auto& l : lines) CHECK(l.find("accuracy") == std::string::npos);
    fs::remove_all(dir);
}

TEST_CASE("resume from a checkpoint continues bitwise identically") {
    TrainConfig cfg = tiny_train_config();
    cfg.steps = 6;
    cfg.checkpoint_interval = 3;
    const fs::path full_dir = fresh_dir("full");
    cfg.run_dir = full_dir.string();
    train(cfg);
    const auto full_lines = read_lines(full_dir / "metrics.jsonl");
    REQUIRE(full_lines.size() == 6);

    TrainConfig cfg2 = cfg;
    const fs::path resumed_dir = fresh_dir("resumed");
    cfg2.run_dir = resumed_dir.string();
    train(cfg2, (full_dir / "ckpt_3.ckpt").string());
    const auto tail_lines = read_lines(resumed_dir / "metrics.jsonl");
    REQUIRE(tail_lines.size() == 3);
    for (int i = 0; i < 3; ++i) CHECK(tail_lines[i] == full_lines[i + 3]);

    const nn::Checkpoint a = nn::load_checkpoint((full_dir / "final.ckpt").string());
    const nn::Checkpoint b = nn::load_checkpoint((resumed_dir / "final.ckpt").string());
    CHECK(a.array("actor") == b.array("actor"));
    CHECK(a.array("adam_m") == b.array("adam_m"));
    fs::remove_all(full_dir);
    fs::remove_all(resumed_dir);
}

TEST_CASE("rerun from manifest reproduces the metrics log bitwise") {
    TrainConfig cfg = tiny_train_config();
    cfg.steps = 4;
    cfg.eval_interval = 2;
    cfg.eval_examples = 4;
    const fs::path dir1 = fresh_dir("repro1");
    cfg.run_dir = dir1.string();
    train(cfg);

    TrainConfig cfg2 = config_from_manifest(read_lines(dir1 / "manifest.json").empty()
                                                ? ""
                                                : [&] {
                                                      std::ifstream in(dir1 / "manifest.json");
                                                      std::ostringstream ss;
                                                      ss << in.rdbuf();
                                                      return ss.str();
                                                  }());
    const fs::path dir2 = fresh_dir("repro2");
    cfg2.run_dir = dir2.string();
    train(cfg2);
    CHECK(read_lines(dir1 / "metrics.jsonl") == read_lines(dir2 / "metrics.jsonl"));
    fs::remove_all(dir1);
    fs::remove_all(dir2);
}

TEST_CASE("config validation rejects bad settings") {
    TrainConfig cfg = tiny_train_config();
    cfg.batch_size = 1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = tiny_train_config();
    cfg.advantage_epsilon = 0.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = tiny_train_config();
    cfg.ema_rate = 1.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    CHECK(variant_from_name(variant_name(Variant::NoRewardGrad)) == Variant::NoRewardGrad);
    CHECK_THROWS_AS(variant_from_name("bogus"), ConfigError);
}
