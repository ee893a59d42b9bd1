#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "mct/runio.hpp"
#include "mct/tokenizer.hpp"

using namespace mct;
using namespace mct::runio;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
    const fs::path p = fs::temp_directory_path() / ("mct_runio_" + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

trainer::TrainConfig tiny_train_config(const std::string& run_dir) {
    trainer::TrainConfig cfg;
    cfg.task.kind = tasks::TaskKind::Arithmetic;
    cfg.task.cot_cap = 4;
    cfg.model.vocab_size = Tokenizer::instance().vocab_size();
    cfg.model.context_len = 64;
    cfg.model.d_model = 8;
    cfg.model.n_layers = 1;
    cfg.model.n_heads = 2;
    cfg.model.d_ff = 16;
    cfg.batch_size = 2;
    cfg.steps = 2;
    cfg.seed = 7;
    cfg.run_dir = run_dir;
    return cfg;
}

}  // namespace

TEST_CASE("kv text parsing: comments, blanks, trimming, rejection") {
    const auto kvs = parse_kv_text("# comment\n\nsteps = 12  # trailing\n task.kind =arithmetic\n");
    REQUIRE(kvs.size() == 2);
    CHECK(kvs[0].key == "steps");
    CHECK(kvs[0].value == "12");
    CHECK(kvs[1].key == "task.kind");
    CHECK(kvs[1].value == "arithmetic");
    CHECK_THROWS_AS(parse_kv_text("just words\n"), ConfigError);
    CHECK_THROWS_AS(parse_kv_text("= 3\n"), ConfigError);
    CHECK_THROWS_AS(parse_kv_text("a = 1\na = 2\n"), ConfigError);
}

TEST_CASE("unknown keys and bad values are rejected by name") {
    trainer::TrainConfig cfg;
    CHECK_THROWS_WITH_AS(apply_kv(cfg, "bogus_key", "1"), "config: unknown key bogus_key",
                         ConfigError);
    CHECK_THROWS_AS(apply_kv(cfg, "steps", "12x"), ConfigError);
    CHECK_THROWS_AS(apply_kv(cfg, "beta_kl", "fast"), ConfigError);
    CHECK_THROWS_AS(apply_kv(cfg, "log_episodes", "maybe"), ConfigError);
}

TEST_CASE("build_config: file values, flag overrides, required task key") {
    const std::string file_text = "task.kind = arithmetic\nsteps = 10\nbeta_kl = 0.2\n";
    const auto cfg = build_config(file_text, {"steps=99", "model.d_model=32"});
    CHECK(cfg.steps == 99);  // flag wins over file
    CHECK(cfg.beta_kl == 0.2);
    CHECK(cfg.model.d_model == 32);
    CHECK_THROWS_WITH_AS(build_config("steps = 3\n", {}),
                         "config: missing required key task.kind", ConfigError);
    CHECK_THROWS_AS(build_config(file_text, {"steps"}), ConfigError);
}

TEST_CASE("config round-trips through its key=value rendering") {
    trainer::TrainConfig cfg = tiny_train_config("/tmp/r");
    cfg.variant = trainer::Variant::ExpertIteration;
    cfg.beta_kl = 0.125;
    cfg.adam.lr = 3e-4;
    const std::string text = config_to_kv(cfg);
    const auto back = build_config(text, {});
    CHECK(config_to_kv(back) == text);
    CHECK(trainer::manifest_json(back, 0) == trainer::manifest_json(cfg, 0));
}

TEST_CASE("text files round-trip and digests track content") {
    const fs::path dir = temp_dir("files");
    const std::string path = (dir / "a.txt").string();
    write_text_file(path, "hello\n");
    CHECK(read_text_file(path) == "hello\n");
    const std::uint64_t d1 = file_digest(path);
    write_text_file(path, "hello!\n");
    CHECK(file_digest(path) != d1);
    CHECK_THROWS_AS(read_text_file((dir / "missing").string()), IoError);
}

TEST_CASE("load_run rebuilds the trained model pair from a run directory") {
    const fs::path dir = temp_dir("load");
    trainer::TrainConfig cfg = tiny_train_config((dir / "run").string());
    const auto res = trainer::train(cfg);
    const RunHandle rh = load_run(res.run_dir);
    CHECK(rh.step == cfg.steps);
    CHECK(rh.config.seed == cfg.seed);
    rh.handle.verify_baseline();
    // training moved the actor away from the frozen baseline
    CHECK(rh.handle.actor.hash() != rh.handle.baseline.hash());
    CHECK(rh.handle.cot_init == tasks::prompt_template(cfg.task.kind, cfg.task.cot_cap,
                                                       cfg.task.target_len));
}

TEST_CASE("run summary and curves are recomputed from the raw log") {
    const fs::path dir = temp_dir("summary");
    trainer::TrainConfig cfg = tiny_train_config((dir / "run").string());
    cfg.steps = 3;
    trainer::train(cfg);
    const RunSummary s = summarize_run(cfg.run_dir);
    CHECK(s.steps == 3);
    CHECK(s.variant == "markovian-grpo");
    const std::string text = s.to_text();
    CHECK(text.find("steps") != std::string::npos);
    const std::string csv = metrics_curves_csv(cfg.run_dir);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 3);
    CHECK(csv.rfind("step,mean_reward,l_pg,l_ar,l_kl,total\n", 0) == 0);
    CHECK_THROWS_AS(summarize_run((dir / "nope").string()), IoError);
}

TEST_CASE("exit codes follow the error taxonomy") {
    CHECK(exit_code_for(ConfigError("x")) == 2);
    CHECK(exit_code_for(NumericError("x")) == 3);
    CHECK(exit_code_for(IoError("x")) == 1);
    CHECK(exit_code_for(std::runtime_error("x")) == 1);
}
