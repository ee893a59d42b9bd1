#include "mct/oracle.hpp"

#include <cmath>
#include <limits>

#include <json.hpp>

#include "mct/nn/model.hpp"
#include "mct/rng.hpp"

namespace mct::oracle {

namespace {

constexpr double kMaxCots = 1e4;

void check_space(int vocab, int cot_cap) {
    if (std::pow(static_cast<double>(vocab), cot_cap) > kMaxCots) {
        throw ConfigError("oracle: CoT space larger than 1e4");
    }
}

TokenSeq cat(int bos, std::initializer_list<const TokenSeq*> parts) {
    TokenSeq out{bos};
    for (const TokenSeq* p : parts) out.insert(out.end(), p->begin(), p->end());
    return out;
}

std::vector<CotEntry> build_table(const nn::ParamBuffer& params, const tasks::MicroTask& task,
                                  const std::vector<TokenSeq>& cots, int bos) {
    const TokenSeq uctx = cat(bos, {&task.question, &task.cot_init});
    std::vector<CotEntry> table;
    table.reserve(cots.size());
    for (const TokenSeq& cot : cots) {
        CotEntry e;
        e.cot = cot;
        e.logprob_u = nn::sequence_logprob(params, uctx, cot);
        e.prob = std::exp(e.logprob_u);
        const TokenSeq actx = cat(bos, {&cot});
        e.answer_logprob = nn::sequence_logprob(params, actx, task.answer);
        table.push_back(std::move(e));
    }
    return table;
}

}  // namespace

std::vector<TokenSeq> enumerate_cots(int vocab, int cot_cap, std::optional<int> eot) {
    check_space(vocab, cot_cap);
    std::vector<TokenSeq> out;
    if (!eot) {
        // all length-cap sequences, counting in base vocab
        std::vector<TokenSeq> frontier{{}};
        for (int step = 0; step < cot_cap; ++step) {
            std::vector<TokenSeq> next;
            for (const TokenSeq& prefix : frontier) {
                for (int t = 0; t < vocab; ++t) {
                    TokenSeq s = prefix;
                    s.push_back(t);
                    next.push_back(std::move(s));
                }
            }
            frontier = std::move(next);
        }
        return frontier;
    }
    // early-termination support: eot-free prefixes of length < cap followed
    // by eot, plus eot-free length-cap sequences
    std::vector<TokenSeq> prefixes{{}};
    for (int len = 0; len < cot_cap; ++len) {
        std::vector<TokenSeq> next;
        for (const TokenSeq& p : prefixes) {
            TokenSeq stopped = p;
            stopped.push_back(*eot);
            out.push_back(std::move(stopped));
            for (int t = 0; t < vocab; ++t) {
                if (t == *eot) continue;
                TokenSeq s = p;
                s.push_back(t);
                next.push_back(std::move(s));
            }
        }
        prefixes = std::move(next);
    }
    for (TokenSeq& p : prefixes) out.push_back(std::move(p));
    return out;
}

EnumerationReport exact_objective(const mlm::MLMHandle& handle, const tasks::MicroTask& task,
                                  bool stopped_prefixes) {
    if (handle.config.vocab_size != task.vocab_size) {
        throw ConfigError("oracle: handle/task vocab mismatch");
    }
    const auto cots = enumerate_cots(task.vocab_size, task.cot_cap,
                                     stopped_prefixes ? std::optional<int>(handle.eot)
                                                      : std::nullopt);
    EnumerationReport rep;
    rep.table = build_table(handle.actor, task, cots, task.bos);
    rep.baseline_table = build_table(handle.baseline, task, cots, task.bos);
    for (const CotEntry& e : rep.table) {
        rep.prob_sum += e.prob;
        rep.actor_term += e.prob * e.answer_logprob;
    }
    for (const CotEntry& e : rep.baseline_table) {
        rep.baseline_term += e.prob * e.answer_logprob;
    }
    rep.exact_j = rep.actor_term - rep.baseline_term;
    return rep;
}

ExactGradient exact_gradient(const mlm::MLMHandle& handle, const tasks::MicroTask& task,
                             bool stopped_prefixes) {
    const EnumerationReport rep = exact_objective(handle, task, stopped_prefixes);
    const TokenSeq uctx = cat(task.bos, {&task.question, &task.cot_init});

    ExactGradient g(handle.actor.size());
    for (const CotEntry& e : rep.table) {
        const TokenSeq actx = cat(task.bos, {&e.cot});
        const double reward = e.answer_logprob - rep.baseline_term;
        // E[(R - b) grad ln u]: weight p * R on the CoT log-prob gradient
        nn::sequence_logprob_backward(handle.actor, uctx, e.cot, e.prob * reward,
                                      g.reinforce_term);
        // E[grad ln pi(a|cot)]
        nn::sequence_logprob_backward(handle.actor, actx, task.answer, e.prob,
                                      g.actor_reward_term);
        // d/dtheta sum_cot exp(ln u) * ln pi: product rule, raw answer score
        nn::sequence_logprob_backward(handle.actor, uctx, e.cot, e.prob * e.answer_logprob,
                                      g.direct);
        nn::sequence_logprob_backward(handle.actor, actx, task.answer, e.prob, g.direct);
    }
    for (std::size_t i = 0; i < g.two_term_sum.data.size(); ++i) {
        g.two_term_sum.data[i] = g.reinforce_term.data[i] + g.actor_reward_term.data[i];
    }
    return g;
}

std::string estimator_name(Estimator e) {
    switch (e) {
        case Estimator::Raw: return "raw";
        case Estimator::BaselineSubtracted: return "baseline-subtracted";
        case Estimator::Standardized: return "standardized";
    }
    throw ContractError("unknown estimator");
}

McGradient mc_gradient_estimate(const mlm::MLMHandle& handle, const tasks::MicroTask& task,
                                Estimator estimator, bool with_actor_reward, int n_samples,
                                std::uint64_t seed, int batch_size, double eps) {
    if (n_samples < 1) throw ConfigError("oracle: n_samples must be >= 1");
    if (estimator == Estimator::Standardized && batch_size < 2) {
        throw ConfigError("oracle: standardized estimator needs batch_size >= 2");
    }
    const EnumerationReport rep = exact_objective(handle, task, false);
    const TokenSeq uctx = cat(task.bos, {&task.question, &task.cot_init});
    const std::size_t n_cots = rep.table.size();
    const std::size_t dim = handle.actor.size();

    // per-CoT gradients, precomputed once; samples index into these
    std::vector<std::vector<double>> grad_u(n_cots), grad_r(n_cots);
    std::vector<double> actor_probs(n_cots), baseline_probs(n_cots);
    for (std::size_t c = 0; c < n_cots; ++c) {
        nn::GradientSet gu(dim), gr(dim);
        nn::sequence_logprob_backward(handle.actor, uctx, rep.table[c].cot, 1.0, gu);
        const TokenSeq actx = cat(task.bos, {&rep.table[c].cot});
        nn::sequence_logprob_backward(handle.actor, actx, task.answer, 1.0, gr);
        grad_u[c] = std::move(gu.data);
        grad_r[c] = std::move(gr.data);
        actor_probs[c] = rep.table[c].prob;
        baseline_probs[c] = rep.baseline_table[c].prob;
    }

    McGradient out;
    out.mean.assign(dim, 0.0);
    out.stderr_.assign(dim, 0.0);
    std::vector<double> sumsq(dim, 0.0);
    Rng rng(seed);

    const int bsz = estimator == Estimator::Standardized ? batch_size : 1;
    const int n_batches = n_samples / bsz;
    const int used = n_batches * bsz;
    if (used < 1) throw ConfigError("oracle: n_samples below one batch");

    std::vector<std::size_t> cot_idx(bsz);
    std::vector<double> rewards(bsz);
    for (int b = 0; b < n_batches; ++b) {
        for (int i = 0; i < bsz; ++i) {
            cot_idx[i] = rng.next_categorical(actor_probs);
            const std::size_t bl = rng.next_categorical(baseline_probs);
            rewards[i] = rep.table[cot_idx[i]].answer_logprob -
                         rep.baseline_table[bl].answer_logprob;
        }
        double sigma_eps = 1.0;  // actor-reward scale
        std::vector<double> coeff(bsz);
        if (estimator == Estimator::Standardized) {
            double mu = 0.0;
            for (double r : rewards) mu += r / bsz;
            double var = 0.0;
            for (double r : rewards) var += (r - mu) * (r - mu) / bsz;
            const double sigma = std::sqrt(var);
            sigma_eps = sigma + eps;
            for (int i = 0; i < bsz; ++i) {
                coeff[i] = sigma == 0.0 ? 0.0 : (rewards[i] - mu) / sigma_eps;
            }
        } else {
            const double shift =
                estimator == Estimator::BaselineSubtracted ? rep.exact_j : 0.0;
            for (int i = 0; i < bsz; ++i) coeff[i] = rewards[i] - shift;
        }
        for (int i = 0; i < bsz; ++i) {
            const std::vector<double>& gu = grad_u[cot_idx[i]];
            const std::vector<double>& gr = grad_r[cot_idx[i]];
            for (std::size_t d = 0; d < dim; ++d) {
                double s = coeff[i] * gu[d];
                if (with_actor_reward) s += gr[d] / sigma_eps;
                out.mean[d] += s;
                sumsq[d] += s * s;
            }
        }
    }
    out.n_samples = used;
    for (std::size_t d = 0; d < dim; ++d) {
        out.mean[d] /= used;
        const double var = sumsq[d] / used - out.mean[d] * out.mean[d];
        out.stderr_[d] = std::sqrt(std::max(var, 0.0) / used);
    }
    return out;
}

std::vector<double> z_scores(const McGradient& mc, const std::vector<double>& exact,
                             double floor) {
    if (mc.mean.size() != exact.size()) throw ContractError("z_scores: size mismatch");
    std::vector<double> z(exact.size(), 0.0);
    for (std::size_t d = 0; d < exact.size(); ++d) {
        z[d] = (mc.mean[d] - exact[d]) / (mc.stderr_[d] + floor);
    }
    return z;
}

std::string report_to_json(const EnumerationReport& report) {
    nlohmann::json j;
    j["exact_j"] = report.exact_j;
    j["actor_term"] = report.actor_term;
    j["baseline_term"] = report.baseline_term;
    j["prob_sum"] = report.prob_sum;
    auto dump_table = [](const std::vector<CotEntry>& table) {
        nlohmann::json arr = nlohmann::json::array();
        for (const CotEntry& e : table) {
            arr.push_back({{"cot", e.cot},
                           {"logprob_u", e.logprob_u},
                           {"prob", e.prob},
                           {"answer_logprob", e.answer_logprob}});
        }
        return arr;
    };
    j["table"] = dump_table(report.table);
    j["baseline_table"] = dump_table(report.baseline_table);
    return j.dump(2);
}

}  // namespace mct::oracle
