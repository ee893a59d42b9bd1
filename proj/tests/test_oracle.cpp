#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "mct/nn/grad_check.hpp"
#include "mct/nn/model.hpp"
#include "mct/oracle.hpp"

using namespace mct;
using namespace mct::oracle;

namespace {

nn::ModelConfig micro_config(int vocab, std::uint64_t seed) {
    nn::ModelConfig cfg;
    cfg.vocab_size = vocab;
    cfg.context_len = 8;
    cfg.d_model = 8;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.d_ff = 16;
    cfg.init_seed = seed;
    return cfg;
}

mlm::MLMHandle micro_handle(std::uint64_t seed = 21, double actor_nudge = 0.0) {
    const auto cfg = micro_config(4, seed);
    auto base = nn::ParamBuffer::init(cfg);
    auto actor = base;
    if (actor_nudge != 0.0) {
        Rng rng(derive_seed(seed, {0xfeed}));
        for (double& v : actor.data()) v += actor_nudge * rng.next_gaussian();
    }
    return mlm::MLMHandle(cfg, actor, base, 2, tasks::micro_oracle_task().cot_init, 0, 1);
}

}  // namespace

TEST_CASE("cot enumeration covers the sampler's support") {
    CHECK(enumerate_cots(4, 2, std::nullopt).size() == 16);
    CHECK(enumerate_cots(2, 3, std::nullopt).size() == 8);
    // stopped prefixes, vocab 4, eot 1: "", "x", "xy" with x,y != eot, each
    // closed by eot, plus the eot-free length-2 sequences
    const auto stopped = enumerate_cots(4, 2, 1);
    CHECK(stopped.size() == 1 + 3 + 9);
    for (const auto& cot : stopped) {
        REQUIRE(!cot.empty());
        const bool ends_eot = cot.back() == 1;
        for (std::size_t i = 0; i + 1 < cot.size(); ++i) CHECK(cot[i] != 1);
        if (!ends_eot) CHECK(cot.size() == 2);
    }
    CHECK_THROWS_AS(enumerate_cots(50, 4, std::nullopt), ConfigError);
}

TEST_CASE("enumerated probabilities sum to one in both modes") {
    const auto h = micro_handle(3, 0.1);
    const auto task = tasks::micro_oracle_task();
    const EnumerationReport full = exact_objective(h, task, false);
    CHECK(full.prob_sum == doctest::Approx(1.0).epsilon(1e-9));
    const EnumerationReport stopped = exact_objective(h, task, true);
    CHECK(stopped.prob_sum == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("objective is exactly zero when actor equals baseline") {
    const auto h = micro_handle(5);
    const EnumerationReport rep = exact_objective(h, tasks::micro_oracle_task());
    CHECK(rep.exact_j == 0.0);
    CHECK(rep.actor_term == rep.baseline_term);
}

TEST_CASE("two-cot instance matches a by-hand enumeration") {
    nn::ModelConfig cfg = micro_config(2, 9);
    auto base = nn::ParamBuffer::init(cfg);
    auto actor = base;
    actor.data()[4] += 0.3;
    tasks::MicroTask task;
    task.vocab_size = 2;
    task.bos = 0;
    task.question = {1};
    task.answer = {1};
    task.cot_init = {1};
    task.cot_cap = 1;
    const mlm::MLMHandle h(cfg, actor, base, 1, task.cot_init, 0, 0);

    double expected = 0.0;
    for (const auto* params : {&h.actor, &h.baseline}) {
        const auto dist = nn::next_token_dist(*params, {0, 1, 1});
        double term = 0.0;
        for (int c = 0; c < 2; ++c) {
            term += dist[c] * nn::sequence_logprob(*params, {0, c}, {1});
        }
        expected += (params == &h.actor) ? term : -term;
    }
    const EnumerationReport rep = exact_objective(h, task);
    CHECK(rep.exact_j == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("exact gradient matches finite differences of the exact objective") {
    const auto h = micro_handle(7, 0.1);
    const auto task = tasks::micro_oracle_task();
    const ExactGradient g = exact_gradient(h, task);

    const auto j_of = [&](const nn::ParamBuffer& p) {
        const mlm::MLMHandle probe(h.config, p, h.baseline, h.cot_cap, h.cot_init, h.bos, h.eot);
        return exact_objective(probe, task).exact_j;
    };
    const auto report = nn::finite_difference_check(h.actor, j_of, g.direct.data, 200, 1e-5, 17,
                                                    1e-6);
    CHECK(report.max_rel_error < 1e-5);
}

TEST_CASE("two-term decomposition equals the direct gradient") {
    const auto h = micro_handle(11, 0.15);
    const ExactGradient g = exact_gradient(h, tasks::micro_oracle_task());
    double max_diff = 0.0;
    double max_ar = 0.0;
    for (std::size_t i = 0; i < g.direct.data.size(); ++i) {
        max_diff = std::max(max_diff, std::abs(g.two_term_sum.data[i] - g.direct.data[i]));
        max_ar = std::max(max_ar, std::abs(g.actor_reward_term.data[i]));
        // freezing the reward leaves only the REINFORCE term
        CHECK(std::abs(g.two_term_sum.data[i] - g.actor_reward_term.data[i] -
                       g.reinforce_term.data[i]) < 1e-15);
    }
    CHECK(max_diff < 1e-9);
    CHECK(max_ar > 1e-4);  // the actor-reward term is genuinely nonzero here
}

TEST_CASE("raw estimator with the actor-reward term is unbiased") {
    const auto h = micro_handle(13, 0.1);
    const auto task = tasks::micro_oracle_task();
    const ExactGradient g = exact_gradient(h, task);
    const McGradient mc = mc_gradient_estimate(h, task, Estimator::Raw, true, 100000, 41);
    const auto z = z_scores(mc, g.two_term_sum.data);
    double max_z = 0.0;
    for (double v : z) max_z = std::max(max_z, std::abs(v));
    CHECK(max_z <= 3.0);
}

TEST_CASE("dropping the actor-reward term biases the estimator") {
    const auto h = micro_handle(13, 0.1);
    const auto task = tasks::micro_oracle_task();
    const ExactGradient g = exact_gradient(h, task);
    const McGradient mc = mc_gradient_estimate(h, task, Estimator::Raw, false, 100000, 41);
    const auto z = z_scores(mc, g.two_term_sum.data);
    double max_z = 0.0;
    for (double v : z) max_z = std::max(max_z, std::abs(v));
    CHECK(max_z > 3.0);
}

TEST_CASE("baseline subtraction lowers estimator variance") {
    const auto h = micro_handle(17, 0.1);
    const auto task = tasks::micro_oracle_task();
    const McGradient raw = mc_gradient_estimate(h, task, Estimator::Raw, true, 20000, 5);
    const McGradient sub =
        mc_gradient_estimate(h, task, Estimator::BaselineSubtracted, true, 20000, 5);
    double var_raw = 0.0, var_sub = 0.0;
    for (std::size_t d = 0; d < raw.stderr_.size(); ++d) {
        var_raw += raw.stderr_[d] * raw.stderr_[d];
        var_sub += sub.stderr_[d] * sub.stderr_[d];
    }
    CHECK(var_sub <= var_raw);
}

TEST_CASE("monte-carlo error shrinks with sample count") {
    const auto h = micro_handle(19, 0.1);
    const auto task = tasks::micro_oracle_task();
    const ExactGradient g = exact_gradient(h, task);
    double prev_err = 0.0;
    bool first = true;
    for (int n : {1000, 10000, 100000}) {
        const McGradient mc = mc_gradient_estimate(h, task, Estimator::Raw, true, n, 23);
        double err = 0.0;
        for (std::size_t d = 0; d < mc.mean.size(); ++d) {
            err += (mc.mean[d] - g.two_term_sum.data[d]) * (mc.mean[d] - g.two_term_sum.data[d]);
        }
        err = std::sqrt(err);
        if (!first) CHECK(err < prev_err);
        prev_err = err;
        first = false;
    }
}

TEST_CASE("standardized estimator preserves the update direction") {
    const auto h = micro_handle(29, 0.1);
    const auto task = tasks::micro_oracle_task();
    const ExactGradient g = exact_gradient(h, task);
    const McGradient mc =
        mc_gradient_estimate(h, task, Estimator::Standardized, true, 100000, 31, 8);
    // scale differs; the overall direction must still align with exact grad-J
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t d = 0; d < mc.mean.size(); ++d) {
        dot += mc.mean[d] * g.two_term_sum.data[d];
        na += mc.mean[d] * mc.mean[d];
        nb += g.two_term_sum.data[d] * g.two_term_sum.data[d];
    }
    CHECK(dot / std::sqrt(na * nb) > 0.5);
}

TEST_CASE("report serializes the full table") {
    const auto h = micro_handle(3, 0.05);
    const EnumerationReport rep = exact_objective(h, tasks::micro_oracle_task());
    const std::string js = report_to_json(rep);
    CHECK(js.find("\"exact_j\"") != std::string::npos);
    CHECK(js.find("\"table\"") != std::string::npos);
    CHECK(rep.table.size() == 16);
}
