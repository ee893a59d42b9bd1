// Command-line surface: train, eval-fragility, eval-crossmodel, oracle-check,
// gen-data, show-run. Exit codes: 0 ok, 1 runtime, 2 config, 3 numeric.
#include <CLI11.hpp>

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <iostream>

#include <json.hpp>

#include "mct/nn/grad_check.hpp"
#include "mct/nn/model.hpp"
#include "mct/oracle.hpp"
#include "mct/perturb.hpp"
#include "mct/runio.hpp"
#include "mct/tokenizer.hpp"
#include "mct/trainer.hpp"
#include "mct/xmodel.hpp"

namespace fs = std::filesystem;
using namespace mct;

namespace {

// MCT_OUTPUT_ROOT prefixes every relative output path
std::string resolve_out(const std::string& path) {
    const char* root = std::getenv("MCT_OUTPUT_ROOT");
    if (root && *root && !fs::path(path).is_absolute()) {
        return (fs::path(root) / path).string();
    }
    return path;
}

std::vector<double> parse_severities(const std::string& csv) {
    std::vector<double> out;
    std::size_t start = 0;
    while (start <= csv.size()) {
        const auto comma = csv.find(',', start);
        const std::string tok = csv.substr(start, comma - start);
        if (tok.empty()) throw ConfigError("severities: empty entry in " + csv);
        std::size_t pos = 0;
        out.push_back(std::stod(tok, &pos));
        if (pos != tok.size()) throw ConfigError("severities: not a number: " + tok);
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return out;
}

std::vector<perturb::Kind> parse_kinds(const std::string& csv) {
    if (csv == "all") return perturb::all_kinds();
    std::vector<perturb::Kind> out;
    std::size_t start = 0;
    while (start <= csv.size()) {
        const auto comma = csv.find(',', start);
        out.push_back(perturb::kind_from_name(csv.substr(start, comma - start)));
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return out;
}

std::string manifest_tokenizer(const std::string& run_dir) {
    const auto j = nlohmann::json::parse(
        runio::read_text_file((fs::path(run_dir) / "manifest.json").string()));
    return j.value("tokenizer", "");
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides,
              const std::string& resume) {
    const std::string text = config_path.empty() ? "" : runio::read_text_file(config_path);
    trainer::TrainConfig cfg = runio::build_config(text, overrides);
    cfg.run_dir = resolve_out(cfg.run_dir);
    const trainer::RunResult res = trainer::train(cfg, resume);
    std::cout << "run " << res.run_dir << " finished after " << res.steps_run << " steps\n";
    std::cout << runio::summarize_run(res.run_dir).to_text();
    return 0;
}

int cmd_eval_fragility(const std::string& markovian_dir, const std::string& nonmarkovian_dir,
                       int examples, std::uint64_t seed, const std::string& severities_csv,
                       const std::string& kinds_csv, const std::string& out_dir) {
    const std::string tok_m = manifest_tokenizer(markovian_dir);
    const std::string tok_nm = manifest_tokenizer(nonmarkovian_dir);
    if (tok_m != tok_nm || tok_m != Tokenizer::kSchemeId) {
        throw ConfigError("eval-fragility: tokenizer mismatch (" + tok_m + " vs " + tok_nm +
                          "; this binary speaks " + Tokenizer::kSchemeId + ")");
    }
    const runio::RunHandle m = runio::load_run(markovian_dir);
    const runio::RunHandle nm = runio::load_run(nonmarkovian_dir);
    const tasks::TaskSource source(m.config.task);
    const auto kinds = parse_kinds(kinds_csv);
    const auto severities = parse_severities(severities_csv);

    int skipped = 0;
    const auto records =
        perturb::fragility_eval(m.handle, nm.handle, source, kinds, severities, examples, seed,
                                &skipped);
    const perturb::FragilityTable table = perturb::fragility_table(records);

    const fs::path out(resolve_out(out_dir));
    fs::create_directories(out);
    runio::write_text_file((out / "fragility.csv").string(), table.to_csv());
    runio::write_text_file((out / "fragility.txt").string(), table.to_text());
    std::string jsonl;
    for (const auto& r : records) jsonl += perturb::record_to_jsonl(r) + "\n";
    runio::write_text_file((out / "records.jsonl").string(), jsonl);

    std::cout << table.to_text();
    std::cout << records.size() << " records over " << examples << " examples (" << skipped
              << " skipped) -> " << out.string() << "\n";
    return 0;
}

int cmd_eval_crossmodel(const std::string& run_dir, int episodes, std::uint64_t seed, int window,
                        int critic_pretrain_steps, const std::string& out_dir) {
    // every periodic checkpoint of the run, in step order
    std::vector<std::pair<int, std::string>> names;
    for (const auto& entry : fs::directory_iterator(run_dir)) {
        const std::string fn = entry.path().filename().string();
        if (fn.rfind("ckpt_", 0) == 0 && fn.ends_with(".ckpt")) {
            names.emplace_back(std::stoi(fn.substr(5)), fn);
        }
    }
    std::sort(names.begin(), names.end());
    if (names.size() < 3) {
        throw ConfigError("eval-crossmodel: need >= 3 periodic checkpoints in " + run_dir);
    }

    std::vector<xmodel::CheckpointEpisodes> ckpts;
    for (const auto& [step, fn] : names) {
        const runio::RunHandle rh = runio::load_run(run_dir, fn);
        ckpts.push_back({step, rh.handle.actor,
                         xmodel::sample_eval_episodes(rh.handle, tasks::TaskSource(rh.config.task),
                                                      episodes, seed)});
    }

    const runio::RunHandle last = runio::load_run(run_dir, names.back().second);
    std::string corpus;
    if (critic_pretrain_steps > 0) {
        corpus = last.config.task.kind == tasks::TaskKind::Continuation
                     ? tasks::canonicalize_corpus_text(
                           runio::read_text_file(last.config.task.corpus_path))
                     : tasks::arithmetic_corpus(256, last.config.task.n_terms,
                                                last.config.task.term_lo,
                                                last.config.task.term_hi,
                                                last.config.task.cot_cap, seed);
    }
    std::vector<xmodel::Critic> critics;
    for (auto spec : xmodel::default_critic_specs(last.config.model)) {
        spec.pretrain_steps = critic_pretrain_steps;
        critics.push_back(xmodel::build_critic(spec, corpus, 8, last.config.adam, seed));
    }

    const xmodel::TransferReport rep =
        xmodel::transfer_report(ckpts, critics, Tokenizer::instance().bos(), window,
                                tasks::answer_cue(last.config.task.kind));
    const fs::path out(resolve_out(out_dir));
    fs::create_directories(out);
    runio::write_text_file((out / "transfer.csv").string(), rep.to_csv());
    runio::write_text_file((out / "summary.json").string(), rep.summary_json() + "\n");
    std::cout << rep.summary_json() << "\n";
    return 0;
}

int cmd_oracle_check(std::uint64_t seed, int samples) {
    nn::ModelConfig cfg;
    cfg.vocab_size = 4;
    cfg.context_len = 8;
    cfg.d_model = 8;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.d_ff = 16;
    cfg.init_seed = seed;
    const auto task = tasks::micro_oracle_task();
    auto base = nn::ParamBuffer::init(cfg);
    auto actor = base;
    Rng rng(derive_seed(seed, {0xfeed}));
    for (double& v : actor.data()) v += 0.1 * rng.next_gaussian();
    const mlm::MLMHandle h(cfg, actor, base, task.cot_cap, task.cot_init, task.bos, 1);

    bool ok = true;
    const auto gate = [&](const std::string& name, bool pass, double value) {
        std::cout << (pass ? "ok   " : "FAIL ") << name << " = " << value << "\n";
        ok = ok && pass;
    };

    const auto rep = oracle::exact_objective(h, task);
    gate("prob_sum - 1", std::fabs(rep.prob_sum - 1.0) < 1e-9, rep.prob_sum - 1.0);
    const auto stopped = oracle::exact_objective(h, task, true);
    gate("stopped prob_sum - 1", std::fabs(stopped.prob_sum - 1.0) < 1e-9,
         stopped.prob_sum - 1.0);

    const auto g = oracle::exact_gradient(h, task);
    double identity = 0.0;
    for (std::size_t i = 0; i < g.direct.data.size(); ++i) {
        identity = std::max(identity, std::fabs(g.two_term_sum.data[i] - g.direct.data[i]));
    }
    gate("two-term vs direct max |diff|", identity < 1e-9, identity);

    const auto j_of = [&](const nn::ParamBuffer& p) {
        const mlm::MLMHandle probe(cfg, p, base, task.cot_cap, task.cot_init, task.bos, 1);
        return oracle::exact_objective(probe, task).exact_j;
    };
    const auto fd = nn::finite_difference_check(h.actor, j_of, g.direct.data, 200, 1e-5, 17, 1e-6);
    gate("finite-difference max rel error", fd.max_rel_error < 1e-5, fd.max_rel_error);

    const auto mc =
        oracle::mc_gradient_estimate(h, task, oracle::Estimator::Raw, true, samples, seed);
    double max_z = 0.0;
    for (double z : oracle::z_scores(mc, g.two_term_sum.data)) {
        max_z = std::max(max_z, std::fabs(z));
    }
    gate("unbiased estimator max |z|", max_z <= 4.0, max_z);

    const auto mc_biased =
        oracle::mc_gradient_estimate(h, task, oracle::Estimator::Raw, false, samples, seed);
    double biased_z = 0.0;
    for (double z : oracle::z_scores(mc_biased, g.two_term_sum.data)) {
        biased_z = std::max(biased_z, std::fabs(z));
    }
    gate("reward-grad-dropped max |z| (must exceed 3)", biased_z > 3.0, biased_z);

    if (!ok) throw NumericError("oracle-check: invariant failed");
    return 0;
}

int cmd_gen_data(const std::vector<std::string>& overrides, int n, std::uint64_t seed,
                 const std::string& out_path) {
    const trainer::TrainConfig cfg = runio::build_config("", overrides);
    const tasks::TaskSource source(cfg.task);
    const std::string jsonl = tasks::export_jsonl(source, n, seed);
    if (out_path.empty()) {
        std::cout << jsonl;
    } else {
        runio::write_text_file(resolve_out(out_path), jsonl);
        std::cout << "wrote " << n << " examples to " << resolve_out(out_path) << "\n";
    }
    return 0;
}

int cmd_show_run(const std::string& run_dir, bool csv) {
    if (csv) {
        std::cout << runio::metrics_curves_csv(run_dir);
    } else {
        std::cout << runio::summarize_run(run_dir).to_text();
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    if (const char* threads = std::getenv("MCT_THREADS")) {
        Eigen::setNbThreads(std::max(1, std::atoi(threads)));
    }

    CLI::App app{"Markovian chain-of-thought training artifact"};
    app.require_subcommand(1);

    std::string config_path, resume;
    std::vector<std::string> overrides;
    auto* train = app.add_subcommand("train", "run a training configuration");
    train->add_option("--config", config_path, "key=value config file");
    train->add_option("--set", overrides, "override, e.g. --set steps=100");
    train->add_option("--resume", resume, "checkpoint file to resume from");

    std::string m_dir, nm_dir, out_dir = "fragility-out";
    int examples = 512;
    std::uint64_t seed = 0;
    std::string severities = "0,0.2,0.4,0.6,0.8,1.0";
    std::string kinds = "all";
    auto* frag = app.add_subcommand("eval-fragility", "perturbation fragility tables");
    frag->add_option("--markovian", m_dir, "markovian run directory")->required();
    frag->add_option("--nonmarkovian", nm_dir, "non-markovian run directory")->required();
    frag->add_option("--examples", examples, "held-out examples");
    frag->add_option("--seed", seed, "evaluation seed");
    frag->add_option("--severities", severities, "comma-separated severities");
    frag->add_option("--kinds", kinds, "comma-separated kinds or 'all'");
    frag->add_option("--out", out_dir, "output directory");

    std::string run_dir, xout = "crossmodel-out";
    int episodes = 64, window = 40, critic_pretrain = 0;
    std::uint64_t xseed = 0;
    auto* cross = app.add_subcommand("eval-crossmodel", "critic transfer across checkpoints");
    cross->add_option("--run", run_dir, "run directory with periodic checkpoints")->required();
    cross->add_option("--episodes", episodes, "episodes per checkpoint");
    cross->add_option("--seed", xseed, "evaluation seed");
    cross->add_option("--window", window, "smoothing window");
    cross->add_option("--critic-pretrain-steps", critic_pretrain, "critic LM pretraining steps");
    cross->add_option("--out", xout, "output directory");

    std::uint64_t oseed = 13;
    int osamples = 100000;
    auto* oc = app.add_subcommand("oracle-check", "exact-gradient invariant gate");
    oc->add_option("--seed", oseed, "model seed");
    oc->add_option("--samples", osamples, "monte-carlo samples");

    std::vector<std::string> gd_overrides;
    int gd_n = 100;
    std::uint64_t gd_seed = 0;
    std::string gd_out;
    auto* gd = app.add_subcommand("gen-data", "emit task examples as JSON lines");
    gd->add_option("--set", gd_overrides, "task config, e.g. --set task.kind=arithmetic")
        ->required();
    gd->add_option("--n", gd_n, "number of examples");
    gd->add_option("--seed", gd_seed, "sampling seed");
    gd->add_option("--out", gd_out, "output file (stdout when omitted)");

    std::string show_dir;
    bool show_csv = false;
    auto* show = app.add_subcommand("show-run", "summarize a finished run");
    show->add_option("--run", show_dir, "run directory")->required();
    show->add_flag("--csv", show_csv, "emit per-step curves as CSV");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*train) return cmd_train(config_path, overrides, resume);
        if (*frag) {
            return cmd_eval_fragility(m_dir, nm_dir, examples, seed, severities, kinds, out_dir);
        }
        if (*cross) {
            return cmd_eval_crossmodel(run_dir, episodes, xseed, window, critic_pretrain, xout);
        }
        if (*oc) return cmd_oracle_check(oseed, osamples);
        if (*gd) return cmd_gen_data(gd_overrides, gd_n, gd_seed, gd_out);
        if (*show) return cmd_show_run(show_dir, show_csv);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return runio::exit_code_for(e);
    }
    return 1;
}
