#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include <json.hpp>

#include "mct/nn/model.hpp"
#include "mct/tasks.hpp"
#include "mct/xmodel.hpp"

using namespace mct;
using namespace mct::xmodel;

namespace {

nn::ModelConfig small_config(std::uint64_t seed) {
    nn::ModelConfig cfg;
    cfg.vocab_size = 50;
    cfg.context_len = 64;
    cfg.d_model = 8;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.d_ff = 16;
    cfg.init_seed = seed;
    return cfg;
}

mlm::MLMHandle small_handle(std::uint64_t seed, double nudge = 0.0) {
    const auto cfg = small_config(seed);
    auto base = nn::ParamBuffer::init(cfg);
    auto actor = base;
    if (nudge != 0.0) {
        Rng rng(derive_seed(seed, {0xabcd}));
        for (double& v : actor.data()) v += nudge * rng.next_gaussian();
    }
    return mlm::MLMHandle(cfg, actor, base, 4, {3}, 0, 1);
}

tasks::TaskSource arithmetic_source() {
    tasks::TaskSpec spec;
    spec.kind = tasks::TaskKind::Arithmetic;
    spec.cot_cap = 4;
    return tasks::TaskSource(spec);
}

Critic critic_from_params(const std::string& id, const nn::ParamBuffer& params) {
    return Critic{CriticSpec{id, params.config(), 0}, params, params.hash()};
}

}  // namespace

TEST_CASE("uniform critic scores every episode at exactly zero") {
    const auto h = small_handle(3, 0.05);
    const auto src = arithmetic_source();
    const auto episodes = sample_eval_episodes(h, src, 6, 11);
    const Critic uniform = critic_from_params("uniform", nn::ParamBuffer::zeros(h.config));
    const CriticScore s = critic_normalized_reward(uniform, episodes, h.bos);
    CHECK(s.n == 6);
    CHECK(s.skipped == 0);
    CHECK(s.mean_normalized_reward == 0.0);
}

TEST_CASE("actor scored as its own critic matches the by-hand mean") {
    const auto h = small_handle(5, 0.05);
    const auto src = arithmetic_source();
    const auto episodes = sample_eval_episodes(h, src, 5, 13);
    const Critic self = critic_from_params("actor", h.actor);
    const CriticScore s = critic_normalized_reward(self, episodes, h.bos);
    double expect = 0.0;
    for (const auto& ep : episodes) {
        TokenSeq actx{h.bos}, bctx{h.bos};
        actx.insert(actx.end(), ep.cot.begin(), ep.cot.end());
        bctx.insert(bctx.end(), ep.baseline_cot.begin(), ep.baseline_cot.end());
        expect += nn::sequence_logprob(h.actor, actx, ep.answer) -
                  nn::sequence_logprob(h.actor, bctx, ep.answer);
    }
    expect /= episodes.size();
    CHECK(s.mean_normalized_reward == doctest::Approx(expect).epsilon(1e-9));
}

TEST_CASE("episodes that overflow a small critic context are skipped") {
    const auto h = small_handle(7, 0.05);
    const auto src = arithmetic_source();
    const auto episodes = sample_eval_episodes(h, src, 4, 17);
    auto tiny_cfg = small_config(9);
    tiny_cfg.context_len = 4;  // [bos] + 4-token CoT + answer cannot fit
    const Critic tiny = critic_from_params("tiny", nn::ParamBuffer::init(tiny_cfg));
    const CriticScore s = critic_normalized_reward(tiny, episodes, h.bos);
    CHECK(s.n == 0);
    CHECK(s.skipped == 4);
    CHECK(s.mean_normalized_reward == 0.0);
}

TEST_CASE("a mutated critic fails the frozen check") {
    const auto cfg = small_config(9);
    Critic c = critic_from_params("c", nn::ParamBuffer::init(cfg));
    c.params.data()[0] += 1.0;
    CHECK_THROWS_AS(c.verify_frozen(), ContractError);
}

TEST_CASE("spearman handles identity, reversal, ties and constants") {
    const std::vector<double> up{1.0, 2.0, 3.0, 4.0};
    const std::vector<double> down{4.0, 3.0, 2.0, 1.0};
    CHECK(*spearman(up, up) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(*spearman(up, down) == doctest::Approx(-1.0).epsilon(1e-12));
    CHECK(!spearman(up, {5.0, 5.0, 5.0, 5.0}).has_value());
    CHECK(!spearman({2.0, 2.0, 2.0, 2.0}, up).has_value());
    // ties: ranks of {1,1,2} are {1.5,1.5,3}; corr with {1,2,3} is sqrt(3)/2
    const auto tied = spearman({1.0, 1.0, 2.0}, {1.0, 2.0, 3.0});
    CHECK(*tied == doctest::Approx(std::sqrt(3.0) / 2.0).epsilon(1e-12));
    CHECK_THROWS_AS(spearman(up, {1.0}), ContractError);
}

TEST_CASE("moving average: identity at window 1, trailing means otherwise") {
    const std::vector<double> s{1.0, 2.0, 6.0, 2.0};
    CHECK(moving_average(s, 1) == s);
    const auto w3 = moving_average(s, 3);
    CHECK(w3[0] == doctest::Approx(1.0));
    CHECK(w3[1] == doctest::Approx(1.5));
    CHECK(w3[2] == doctest::Approx(3.0));
    CHECK(w3[3] == doctest::Approx(10.0 / 3.0));
    // window longer than the series averages everything seen so far
    CHECK(moving_average(s, 40).back() == doctest::Approx(11.0 / 4.0));
    CHECK_THROWS_AS(moving_average(s, 0), ConfigError);
}

TEST_CASE("default critic set: reseeded twin and half-size model") {
    const auto cfg = small_config(21);
    const auto specs = default_critic_specs(cfg);
    REQUIRE(specs.size() == 2);
    CHECK(specs[0].id == "same-arch-reseed");
    CHECK(specs[0].config.d_model == cfg.d_model);
    CHECK(specs[0].config.init_seed != cfg.init_seed);
    CHECK(specs[1].id == "half-size-reseed");
    CHECK(specs[1].config.d_model == cfg.d_model / 2);
    CHECK(specs[1].config.d_ff == cfg.d_ff / 2);
    CHECK(specs[1].config.init_seed != specs[0].config.init_seed);
    specs[1].config.validate();
    // init differs between the twin and the actor
    CHECK(nn::ParamBuffer::init(specs[0].config).hash() != nn::ParamBuffer::init(cfg).hash());
}

TEST_CASE("build_critic pretrains when asked and freezes the result") {
    const auto cfg = small_config(23);
    CriticSpec spec{"c", cfg, 0};
    const Critic plain = build_critic(spec, "", 4, nn::AdamHyper{}, 1);
    CHECK(plain.params_hash == plain.params.hash());
    CHECK(plain.params_hash == nn::ParamBuffer::init(cfg).hash());

    spec.pretrain_steps = 3;
    const std::string corpus = tasks::arithmetic_corpus(16, 3, 1, 9, 4, 5);
    const Critic tuned = build_critic(spec, corpus, 4, nn::AdamHyper{}, 1);
    CHECK(tuned.params_hash != plain.params_hash);
    CHECK_THROWS_AS(build_critic(spec, "", 4, nn::AdamHyper{}, 1), ConfigError);
}

TEST_CASE("transfer report: series, csv, summary and bitwise rerun") {
    const auto src = arithmetic_source();
    std::vector<CheckpointEpisodes> ckpts;
    for (int k = 0; k < 3; ++k) {
        const auto h = small_handle(31, 0.02 * (k + 1));
        ckpts.push_back({k * 10, h.actor, sample_eval_episodes(h, src, 4, 19)});
    }
    std::vector<Critic> critics;
    for (const auto& spec : default_critic_specs(small_config(31))) {
        critics.push_back(build_critic(spec, "", 4, nn::AdamHyper{}, 1));
    }

    const TransferReport rep = transfer_report(ckpts, critics, 0, 2);
    CHECK(rep.checkpoint_steps == std::vector<int>{0, 10, 20});
    CHECK(rep.actor_series.size() == 3);
    REQUIRE(rep.critics.size() == 2);
    for (const auto& cs : rep.critics) {
        CHECK(cs.scores.size() == 3);
        CHECK(cs.smoothed.size() == 3);
        CHECK(cs.scores[0].n == 4);
    }

    const std::string csv = rep.to_csv();
    // header + 3 actor rows + 3 rows per critic
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 3 + 3 * 2);
    CHECK(csv.rfind("checkpoint_step,critic_id,mean_normalized_reward,n\n", 0) == 0);

    const auto js = nlohmann::json::parse(rep.summary_json());
    CHECK(js["smoothing_window"] == 2);
    CHECK(js["critics"].size() == 2);
    CHECK(js["critics"][0]["critic_id"] == "same-arch-reseed");

    // evaluation purity: a rerun reproduces every number bitwise
    const TransferReport again = transfer_report(ckpts, critics, 0, 2);
    CHECK(again.to_csv() == csv);
    CHECK(again.summary_json() == rep.summary_json());

    ckpts.pop_back();
    CHECK_THROWS_AS(transfer_report(ckpts, critics, 0, 2), ConfigError);
}

TEST_CASE("a critic sharing the actor's weights correlates perfectly") {
    const auto src = arithmetic_source();
    std::vector<CheckpointEpisodes> ckpts;
    std::vector<nn::ParamBuffer> params;
    for (int k = 0; k < 4; ++k) {
        const auto h = small_handle(37, 0.03 * (k + 1));
        params.push_back(h.actor);
        ckpts.push_back({k, h.actor, sample_eval_episodes(h, src, 3, 23)});
    }
    // critic fixed at the last checkpoint's weights: series generally differs
    // from the actor's, but scoring each checkpoint with its own weights is
    // exactly the actor series
    std::vector<Critic> critics{critic_from_params("late", params.back())};
    const TransferReport rep = transfer_report(ckpts, critics, 0, 1);
    std::vector<double> manual;
    for (std::size_t k = 0; k < ckpts.size(); ++k) {
        const Critic self = critic_from_params("self", params[k]);
        manual.push_back(
            critic_normalized_reward(self, ckpts[k].episodes, 0).mean_normalized_reward);
    }
    for (std::size_t k = 0; k < manual.size(); ++k) {
        CHECK(rep.actor_series[k] == doctest::Approx(manual[k]).epsilon(1e-12));
    }
}
