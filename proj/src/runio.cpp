#include "mct/runio.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "mct/nn/checkpoint.hpp"
#include "mct/tasks.hpp"
#include "mct/tokenizer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace mct::runio {

namespace {

long long parse_int(const std::string& key, const std::string& v) {
    std::size_t pos = 0;
    long long out = 0;
    try {
        out = std::stoll(v, &pos);
    } catch (const std::exception&) {
        throw ConfigError("config: key " + key + ": not an integer: " + v);
    }
    if (pos != v.size()) throw ConfigError("config: key " + key + ": not an integer: " + v);
    return out;
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    std::size_t pos = 0;
    std::uint64_t out = 0;
    try {
        out = std::stoull(v, &pos);
    } catch (const std::exception&) {
        throw ConfigError("config: key " + key + ": not an unsigned integer: " + v);
    }
    if (pos != v.size()) {
        throw ConfigError("config: key " + key + ": not an unsigned integer: " + v);
    }
    return out;
}

double parse_double(const std::string& key, const std::string& v) {
    std::size_t pos = 0;
    double out = 0.0;
    try {
        out = std::stod(v, &pos);
    } catch (const std::exception&) {
        throw ConfigError("config: key " + key + ": not a number: " + v);
    }
    if (pos != v.size()) throw ConfigError("config: key " + key + ": not a number: " + v);
    return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config: key " + key + ": not a bool: " + v);
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::string fmt_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out << text;
    if (!out) throw IoError("short write to " + path);
}

std::uint64_t file_digest(const std::string& path) {
    const std::string bytes = read_text_file(path);
    return fnv1a(bytes.data(), bytes.size());
}

std::vector<KvPair> parse_kv_text(const std::string& text) {
    std::vector<KvPair> out;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config: line " + std::to_string(lineno) + ": expected key=value");
        }
        KvPair kv{trim(line.substr(0, eq)), trim(line.substr(eq + 1))};
        if (kv.key.empty()) {
            throw ConfigError("config: line " + std::to_string(lineno) + ": empty key");
        }
        for (const KvPair& prev : out) {
            if (prev.key == kv.key) throw ConfigError("config: duplicate key " + kv.key);
        }
        out.push_back(std::move(kv));
    }
    return out;
}

void apply_kv(trainer::TrainConfig& cfg, const std::string& key, const std::string& value) {
    if (key == "variant") {
        cfg.variant = trainer::variant_from_name(value);
    } else if (key == "batch_size") {
        cfg.batch_size = static_cast<int>(parse_int(key, value));
    } else if (key == "beta_kl") {
        cfg.beta_kl = parse_double(key, value);
    } else if (key == "advantage_epsilon") {
        cfg.advantage_epsilon = parse_double(key, value);
    } else if (key == "actor_reward_weight") {
        cfg.actor_reward_weight = parse_double(key, value);
    } else if (key == "ema_rate") {
        cfg.ema_rate = parse_double(key, value);
    } else if (key == "ei_k") {
        cfg.ei_k = parse_double(key, value);
    } else if (key == "grad_clip") {
        cfg.grad_clip = parse_double(key, value);
    } else if (key == "steps") {
        cfg.steps = static_cast<int>(parse_int(key, value));
    } else if (key == "eval_interval") {
        cfg.eval_interval = static_cast<int>(parse_int(key, value));
    } else if (key == "eval_examples") {
        cfg.eval_examples = static_cast<int>(parse_int(key, value));
    } else if (key == "checkpoint_interval") {
        cfg.checkpoint_interval = static_cast<int>(parse_int(key, value));
    } else if (key == "seed") {
        cfg.seed = parse_u64(key, value);
    } else if (key == "log_episodes") {
        cfg.log_episodes = parse_bool(key, value);
    } else if (key == "init_checkpoint") {
        cfg.init_checkpoint = value;
    } else if (key == "run_dir") {
        cfg.run_dir = value;
    } else if (key == "task.kind") {
        cfg.task.kind = tasks::task_kind_from_name(value);
    } else if (key == "task.n_terms") {
        cfg.task.n_terms = static_cast<int>(parse_int(key, value));
    } else if (key == "task.term_lo") {
        cfg.task.term_lo = static_cast<int>(parse_int(key, value));
    } else if (key == "task.term_hi") {
        cfg.task.term_hi = static_cast<int>(parse_int(key, value));
    } else if (key == "task.corpus_path") {
        cfg.task.corpus_path = value;
    } else if (key == "task.ctx_len") {
        cfg.task.ctx_len = static_cast<int>(parse_int(key, value));
    } else if (key == "task.target_len") {
        cfg.task.target_len = static_cast<int>(parse_int(key, value));
    } else if (key == "task.cot_cap") {
        cfg.task.cot_cap = static_cast<int>(parse_int(key, value));
    } else if (key == "task.seed") {
        cfg.task.seed = parse_u64(key, value);
    } else if (key == "model.vocab_size") {
        cfg.model.vocab_size = static_cast<int>(parse_int(key, value));
    } else if (key == "model.context_len") {
        cfg.model.context_len = static_cast<int>(parse_int(key, value));
    } else if (key == "model.d_model") {
        cfg.model.d_model = static_cast<int>(parse_int(key, value));
    } else if (key == "model.n_layers") {
        cfg.model.n_layers = static_cast<int>(parse_int(key, value));
    } else if (key == "model.n_heads") {
        cfg.model.n_heads = static_cast<int>(parse_int(key, value));
    } else if (key == "model.d_ff") {
        cfg.model.d_ff = static_cast<int>(parse_int(key, value));
    } else if (key == "model.init_seed") {
        cfg.model.init_seed = parse_u64(key, value);
    } else if (key == "adam.lr") {
        cfg.adam.lr = parse_double(key, value);
    } else if (key == "adam.beta1") {
        cfg.adam.beta1 = parse_double(key, value);
    } else if (key == "adam.beta2") {
        cfg.adam.beta2 = parse_double(key, value);
    } else if (key == "adam.eps") {
        cfg.adam.eps = parse_double(key, value);
    } else {
        throw ConfigError("config: unknown key " + key);
    }
}

trainer::TrainConfig build_config(const std::string& file_text,
                                  const std::vector<std::string>& overrides) {
    trainer::TrainConfig cfg;
    bool have_kind = false;
    for (const KvPair& kv : parse_kv_text(file_text)) {
        apply_kv(cfg, kv.key, kv.value);
        if (kv.key == "task.kind") have_kind = true;
    }
    for (const std::string& ov : overrides) {
        const auto eq = ov.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config: override must be key=value: " + ov);
        }
        const std::string key = trim(ov.substr(0, eq));
        apply_kv(cfg, key, trim(ov.substr(eq + 1)));
        if (key == "task.kind") have_kind = true;
    }
    if (!have_kind) throw ConfigError("config: missing required key task.kind");
    return cfg;
}

std::string config_to_kv(const trainer::TrainConfig& cfg) {
    std::string out;
    const auto add = [&](const std::string& k, const std::string& v) {
        out += k + " = " + v + "\n";
    };
    add("variant", trainer::variant_name(cfg.variant));
    add("batch_size", std::to_string(cfg.batch_size));
    add("beta_kl", fmt_double(cfg.beta_kl));
    add("advantage_epsilon", fmt_double(cfg.advantage_epsilon));
    add("actor_reward_weight", fmt_double(cfg.actor_reward_weight));
    add("ema_rate", fmt_double(cfg.ema_rate));
    add("ei_k", fmt_double(cfg.ei_k));
    add("grad_clip", fmt_double(cfg.grad_clip));
    add("steps", std::to_string(cfg.steps));
    add("eval_interval", std::to_string(cfg.eval_interval));
    add("eval_examples", std::to_string(cfg.eval_examples));
    add("checkpoint_interval", std::to_string(cfg.checkpoint_interval));
    add("seed", std::to_string(cfg.seed));
    add("log_episodes", cfg.log_episodes ? "true" : "false");
    add("init_checkpoint", cfg.init_checkpoint);
    add("run_dir", cfg.run_dir);
    add("task.kind", tasks::task_kind_name(cfg.task.kind));
    add("task.n_terms", std::to_string(cfg.task.n_terms));
    add("task.term_lo", std::to_string(cfg.task.term_lo));
    add("task.term_hi", std::to_string(cfg.task.term_hi));
    add("task.corpus_path", cfg.task.corpus_path);
    add("task.ctx_len", std::to_string(cfg.task.ctx_len));
    add("task.target_len", std::to_string(cfg.task.target_len));
    add("task.cot_cap", std::to_string(cfg.task.cot_cap));
    add("task.seed", std::to_string(cfg.task.seed));
    add("model.vocab_size", std::to_string(cfg.model.vocab_size));
    add("model.context_len", std::to_string(cfg.model.context_len));
    add("model.d_model", std::to_string(cfg.model.d_model));
    add("model.n_layers", std::to_string(cfg.model.n_layers));
    add("model.n_heads", std::to_string(cfg.model.n_heads));
    add("model.d_ff", std::to_string(cfg.model.d_ff));
    add("model.init_seed", std::to_string(cfg.model.init_seed));
    add("adam.lr", fmt_double(cfg.adam.lr));
    add("adam.beta1", fmt_double(cfg.adam.beta1));
    add("adam.beta2", fmt_double(cfg.adam.beta2));
    add("adam.eps", fmt_double(cfg.adam.eps));
    return out;
}

RunHandle load_run(const std::string& run_dir, const std::string& ckpt_name) {
    const fs::path dir(run_dir);
    const trainer::TrainConfig cfg =
        trainer::config_from_manifest(read_text_file((dir / "manifest.json").string()));
    const nn::Checkpoint ck = nn::load_checkpoint((dir / ckpt_name).string());
    if (!(ck.config == cfg.model)) {
        throw ConfigError("load_run: checkpoint model disagrees with manifest");
    }
    nn::ParamBuffer actor = nn::ParamBuffer::zeros(cfg.model);
    actor.data() = ck.array("actor");
    nn::ParamBuffer baseline = nn::ParamBuffer::zeros(cfg.model);
    baseline.data() = ck.array("baseline");
    const auto& tok = Tokenizer::instance();
    const TokenSeq prompt =
        tasks::prompt_template(cfg.task.kind, cfg.task.cot_cap, cfg.task.target_len);
    mlm::MLMHandle handle(cfg.model, actor, baseline, cfg.task.cot_cap, prompt, tok.bos(),
                          tok.eot());
    handle.answer_cue = tasks::answer_cue(cfg.task.kind);
    return RunHandle{cfg, std::move(handle), static_cast<int>(ck.step)};
}

RunSummary summarize_run(const std::string& run_dir) {
    const fs::path dir(run_dir);
    std::ifstream in(dir / "metrics.jsonl");
    if (!in) throw IoError("summarize_run: cannot open metrics log in " + run_dir);
    RunSummary s;
    std::string line;
    double sum = 0.0;
    bool first = true;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw IoError(std::string("summarize_run: bad metrics line: ") + e.what());
        }
        const double r = j.at("mean_reward").get<double>();
        if (first) s.first_mean_reward = r;
        first = false;
        s.last_mean_reward = r;
        s.last_total_loss = j.at("total").get<double>();
        s.variant = j.at("variant").get<std::string>();
        if (j.contains("accuracy")) s.last_accuracy = j.at("accuracy").get<double>();
        sum += r;
        ++s.steps;
    }
    if (s.steps == 0) throw IoError("summarize_run: empty metrics log in " + run_dir);
    s.mean_reward_overall = sum / s.steps;
    return s;
}

std::string RunSummary::to_text() const {
    const auto row = [](const std::string& k, const std::string& v) {
        std::string line = k;
        line.resize(22, ' ');
        return line + v + "\n";
    };
    char buf[64];
    std::string out;
    out += row("variant", variant);
    out += row("steps", std::to_string(steps));
    std::snprintf(buf, sizeof(buf), "%.6g", first_mean_reward);
    out += row("first mean reward", buf);
    std::snprintf(buf, sizeof(buf), "%.6g", last_mean_reward);
    out += row("last mean reward", buf);
    std::snprintf(buf, sizeof(buf), "%.6g", mean_reward_overall);
    out += row("overall mean reward", buf);
    std::snprintf(buf, sizeof(buf), "%.6g", last_total_loss);
    out += row("last total loss", buf);
    if (last_accuracy) {
        std::snprintf(buf, sizeof(buf), "%.6g", *last_accuracy);
        out += row("last accuracy", buf);
    }
    return out;
}

std::string metrics_curves_csv(const std::string& run_dir) {
    const fs::path dir(run_dir);
    std::ifstream in(dir / "metrics.jsonl");
    if (!in) throw IoError("metrics_curves_csv: cannot open metrics log in " + run_dir);
    std::string csv = "step,mean_reward,l_pg,l_ar,l_kl,total\n";
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const json j = json::parse(line);
        csv += std::to_string(j.at("step").get<int>()) + "," +
               fmt_double(j.at("mean_reward").get<double>()) + "," +
               fmt_double(j.at("l_pg").get<double>()) + "," +
               fmt_double(j.at("l_ar").get<double>()) + "," +
               fmt_double(j.at("l_kl").get<double>()) + "," +
               fmt_double(j.at("total").get<double>()) + "\n";
    }
    return csv;
}

int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e)) return 2;
    if (dynamic_cast<const NumericError*>(&e)) return 3;
    return 1;
}

}  // namespace mct::runio
