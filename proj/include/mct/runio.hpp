#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mct/common.hpp"
#include "mct/mlm.hpp"
#include "mct/trainer.hpp"

namespace mct::runio {

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& text);

// FNV-1a over the raw file bytes; recorded in manifests for input files
std::uint64_t file_digest(const std::string& path);

struct KvPair {
    std::string key;
    std::string value;
};

// Flat key=value config text: one pair per line, '#' starts a comment,
// blank lines ignored. Duplicate keys and malformed lines are rejected.
std::vector<KvPair> parse_kv_text(const std::string& text);

// Applies one typed key to the config; unknown keys and unparseable values
// throw ConfigError naming the offending key.
void apply_kv(trainer::TrainConfig& cfg, const std::string& key, const std::string& value);

// Config from file text plus "key=value" flag overrides (flags win).
// task.kind is required; everything else has an explicit default.
trainer::TrainConfig build_config(const std::string& file_text,
                                  const std::vector<std::string>& overrides);

// The full config as key=value text, every default made explicit.
// parse + apply of the output reproduces the config exactly.
std::string config_to_kv(const trainer::TrainConfig& cfg);

struct RunHandle {
    trainer::TrainConfig config;
    mlm::MLMHandle handle;
    int step = 0;
};

// Rebuilds the model pair of a finished (or checkpointed) run from its
// manifest and a checkpoint file inside the run directory.
RunHandle load_run(const std::string& run_dir, const std::string& ckpt_name = "final.ckpt");

struct RunSummary {
    std::string variant;
    int steps = 0;
    double first_mean_reward = 0.0;
    double last_mean_reward = 0.0;
    double mean_reward_overall = 0.0;
    double last_total_loss = 0.0;
    std::optional<double> last_accuracy;

    std::string to_text() const;  // aligned two-column table
};

// Recomputed from the raw metrics log, not from any cached summary.
RunSummary summarize_run(const std::string& run_dir);

// step,mean_reward,l_pg,l_ar,l_kl,total — one row per training step
std::string metrics_curves_csv(const std::string& run_dir);

// exit-code taxonomy: 2 config, 3 numeric, 1 everything else
int exit_code_for(const std::exception& e);

}  // namespace mct::runio
