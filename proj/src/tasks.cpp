#include "mct/tasks.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <memory>
#include <sstream>

#include <json.hpp>

#include "mct/rng.hpp"

namespace mct::tasks {

std::string task_kind_name(TaskKind kind) {
    switch (kind) {
        case TaskKind::Arithmetic: return "arithmetic";
        case TaskKind::Continuation: return "continuation";
        case TaskKind::MicroOracle: return "micro-oracle";
    }
    throw ContractError("unknown task kind");
}

TaskKind task_kind_from_name(const std::string& name) {
    if (name == "arithmetic") return TaskKind::Arithmetic;
    if (name == "continuation") return TaskKind::Continuation;
    if (name == "micro-oracle") return TaskKind::MicroOracle;
    throw ConfigError("unknown task kind: " + name);
}

void TaskSpec::validate() const {
    if (cot_cap < 1) throw ConfigError("task: cot_cap must be >= 1");
    if (kind == TaskKind::Arithmetic) {
        if (n_terms < 2) throw ConfigError("task: n_terms must be >= 2");
        if (term_lo < 1 || term_hi < term_lo) throw ConfigError("task: require 1 <= term_lo <= term_hi");
    } else if (kind == TaskKind::Continuation) {
        if (ctx_len < 1 || target_len < 1) throw ConfigError("task: window lengths must be >= 1");
        if (corpus_path.empty()) throw ConfigError("task: continuation requires corpus_path");
    }
}

QAPair arithmetic_from_terms(const std::vector<long long>& terms) {
    if (terms.size() < 2) throw ContractError("arithmetic: need at least two terms");
    std::string q;
    long long sum = 0;
    for (std::size_t i = 0; i < terms.size(); ++i) {
        if (i) q += " + ";
        q += std::to_string(terms[i]);
        sum += terms[i];
    }
    QAPair pair;
    pair.question_text = q;
    pair.answer_text = std::to_string(sum);
    const auto& tok = Tokenizer::instance();
    pair.question = tok.tokenize(pair.question_text);
    pair.answer = tok.tokenize(pair.answer_text);
    return pair;
}

QAPair gen_arithmetic(int n_terms, long long lo, long long hi, std::uint64_t seed) {
    if (n_terms < 2) throw ContractError("gen_arithmetic: n_terms must be >= 2");
    if (lo < 1 || hi < lo) throw ContractError("gen_arithmetic: require 1 <= lo <= hi");
    Rng rng(seed);
    std::vector<long long> terms(static_cast<std::size_t>(n_terms));
    for (auto& t : terms) {
        t = lo + static_cast<long long>(rng.next_below(static_cast<std::uint64_t>(hi - lo + 1)));
    }
    return arithmetic_from_terms(terms);
}

namespace {

std::string strip_ws(const std::string& s) {
    const auto is_ws = [](char c) { return c == ' ' || c == '\n'; };
    std::size_t b = 0, e = s.size();
    while (b < e && is_ws(s[b])) ++b;
    while (e > b && is_ws(s[e - 1])) --e;
    return s.substr(b, e - b);
}

}  // namespace

bool check_answer(const TokenSeq& predicted, const TokenSeq& gold) {
    const auto& tok = Tokenizer::instance();
    return strip_ws(tok.detokenize(predicted)) == strip_ws(tok.detokenize(gold));
}

std::string prompt_template_text(TaskKind kind, int cot_cap, int target_len) {
    switch (kind) {
        case TaskKind::Arithmetic:
            return "\n" + std::to_string(cot_cap) + ":\n";
        case TaskKind::Continuation:
            return "\ncompress this text into " + std::to_string(cot_cap) +
                   " tokens, then predict the next " + std::to_string(target_len) + " tokens:\n";
        case TaskKind::MicroOracle:
            throw ContractError("micro-oracle has a token-level prompt, not text");
    }
    throw ContractError("unknown task kind");
}

TokenSeq prompt_template(TaskKind kind, int cot_cap, int target_len) {
    return Tokenizer::instance().tokenize(prompt_template_text(kind, cot_cap, target_len));
}

std::string answer_cue_text(TaskKind kind) {
    switch (kind) {
        case TaskKind::Arithmetic:
            return "\nans: ";
        case TaskKind::Continuation:
        case TaskKind::MicroOracle:
            return "";
    }
    throw ContractError("unknown task kind");
}

TokenSeq answer_cue(TaskKind kind) {
    return Tokenizer::instance().tokenize(answer_cue_text(kind));
}

std::string canonicalize_corpus_text(const std::string& raw) {
    const auto& tok = Tokenizer::instance();
    std::string out;
    out.reserve(raw.size());
    for (char c : raw) {
        char lc = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        if (lc == '^' || lc == '$') lc = ' ';  // reserved glyphs
        out.push_back(tok.has_char(lc) ? lc : ' ');
    }
    return out;
}

ContinuationSampler::ContinuationSampler(const std::string& corpus_text, int ctx_len,
                                         int target_len)
    : ctx_len_(ctx_len), target_len_(target_len) {
    if (ctx_len < 1 || target_len < 1) throw ConfigError("continuation: window lengths must be >= 1");
    const std::string canon = canonicalize_corpus_text(corpus_text);
    const auto& tok = Tokenizer::instance();

    // split at blank lines (document boundary markers)
    std::vector<std::string> docs;
    std::string cur;
    std::istringstream in(canon);
    std::string line;
    bool prev_blank = false;
    while (std::getline(in, line)) {
        const bool blank = strip_ws(line).empty();
        if (blank) {
            if (!cur.empty() && !prev_blank) {
                docs.push_back(cur);
                cur.clear();
            }
        } else {
            if (!cur.empty()) cur += "\n";
            cur += line;
        }
        prev_blank = blank;
    }
    if (!cur.empty()) docs.push_back(cur);

    const std::size_t win = static_cast<std::size_t>(ctx_len) + static_cast<std::size_t>(target_len);
    for (const auto& d : docs) {
        TokenSeq ids = tok.tokenize(d);
        if (ids.size() >= win) {
            docs_.push_back(std::move(ids));
            total_windows_ += docs_.back().size() - win + 1;
            cum_windows_.push_back(total_windows_);
        }
    }
    if (total_windows_ == 0) {
        throw ConfigError("continuation: corpus too small for ctx_len + target_len window");
    }
}

QAPair ContinuationSampler::sample(std::uint64_t seed) const {
    Rng rng(seed);
    const std::size_t w = rng.next_below(total_windows_);
    std::size_t doc = 0;
    while (cum_windows_[doc] <= w) ++doc;
    const std::size_t prev = doc == 0 ? 0 : cum_windows_[doc - 1];
    const std::size_t start = w - prev;
    const auto& ids = docs_[doc];

    QAPair pair;
    pair.question.assign(ids.begin() + start, ids.begin() + start + ctx_len_);
    pair.answer.assign(ids.begin() + start + ctx_len_, ids.begin() + start + ctx_len_ + target_len_);
    const auto& tok = Tokenizer::instance();
    pair.question_text = tok.detokenize(pair.question);
    pair.answer_text = tok.detokenize(pair.answer);
    return pair;
}

TaskSource::TaskSource(const TaskSpec& spec) : spec_(spec) {
    spec_.validate();
    if (spec_.kind == TaskKind::Continuation) {
        std::ifstream in(spec_.corpus_path);
        if (!in) throw IoError("cannot open corpus: " + spec_.corpus_path);
        std::ostringstream ss;
        ss << in.rdbuf();
        cont_ = std::make_shared<ContinuationSampler>(ss.str(), spec_.ctx_len, spec_.target_len);
    }
}

QAPair TaskSource::sample(std::uint64_t seed) const {
    switch (spec_.kind) {
        case TaskKind::Arithmetic:
            return gen_arithmetic(spec_.n_terms, spec_.term_lo, spec_.term_hi, seed);
        case TaskKind::Continuation:
            return cont_->sample(seed);
        case TaskKind::MicroOracle:
            throw ContractError("micro-oracle pairs are fixed; use micro_oracle_task()");
    }
    throw ContractError("unknown task kind");
}

MicroTask micro_oracle_task() { return MicroTask{}; }

std::string arithmetic_corpus(int n_docs, int n_terms, long long lo, long long hi, int cot_cap,
                              std::uint64_t seed) {
    std::string out;
    const std::string tmpl = prompt_template_text(TaskKind::Arithmetic, cot_cap, 0);
    for (int i = 0; i < n_docs; ++i) {
        const QAPair line = gen_arithmetic(n_terms, lo, hi, derive_seed(seed, {(std::uint64_t)i, 1}));
        if (i % 8 == 3) {
            // After the template: usually a fixed distractor line, sometimes a
            // restatement of the question above. Keeps greedy decoding on the
            // distractor while the restatement stays reachable at temperature 1.
            const QAPair head =
                gen_arithmetic(n_terms, lo, hi, derive_seed(seed, {(std::uint64_t)i, 2}));
            Rng mode(derive_seed(seed, {(std::uint64_t)i, 3}));
            const QAPair cont =
                mode.next_double() < 0.35
                    ? head
                    : arithmetic_from_terms(std::vector<long long>(n_terms, lo));
            out += head.question_text + tmpl + cont.question_text + " = " + cont.answer_text;
        } else if (i % 8 == 1 || i % 8 == 5) {
            // bare question, then the readout cue with the computed sum:
            // teaches answering at the cue from the question alone
            out += line.question_text + answer_cue_text(TaskKind::Arithmetic) + line.answer_text;
        } else if (i % 8 == 2) {
            // dangling sum line (the exact shape of a budget-capped CoT),
            // answered at the cue
            out += line.question_text + " = " + answer_cue_text(TaskKind::Arithmetic) +
                   line.answer_text;
        } else if (i % 8 == 6) {
            // completed sum line, answer repeated at the cue
            out += line.question_text + " = " + line.answer_text +
                   answer_cue_text(TaskKind::Arithmetic) + line.answer_text;
        } else if (i % 8 == 7) {
            // the same sum line twice: generic within-context copying
            out += line.question_text + " = " + line.answer_text + "\n" + line.question_text +
                   " = " + line.answer_text;
        } else {
            out += line.question_text + " = " + line.answer_text;
        }
        out += "\n\n";
    }
    return out;
}

std::string export_jsonl(const TaskSource& source, int n, std::uint64_t seed) {
    std::string out;
    for (int i = 0; i < n; ++i) {
        const QAPair p = source.sample(derive_seed(seed, {(std::uint64_t)i}));
        nlohmann::json j{{"question", p.question_text}, {"answer", p.answer_text}};
        out += j.dump();
        out += "\n";
    }
    return out;
}

}  // namespace mct::tasks
