#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "mct/common.hpp"
#include "mct/tokenizer.hpp"

namespace mct::tasks {

enum class TaskKind { Arithmetic, Continuation, MicroOracle };

std::string task_kind_name(TaskKind kind);
TaskKind task_kind_from_name(const std::string& name);

struct TaskSpec {
    TaskKind kind = TaskKind::Arithmetic;
    // arithmetic
    int n_terms = 3;
    int term_lo = 1;
    int term_hi = 9;
    // continuation
    std::string corpus_path;
    int ctx_len = 64;
    int target_len = 32;
    // shared
    int cot_cap = 16;
    std::uint64_t seed = 0;

    void validate() const;
};

struct QAPair {
    std::string question_text;
    std::string answer_text;
    TokenSeq question;
    TokenSeq answer;
};

QAPair arithmetic_from_terms(const std::vector<long long>& terms);

// question "t1 + t2 + ... + tn", answer the decimal sum; terms uniform in
// [lo, hi], deterministic per seed.
QAPair gen_arithmetic(int n_terms, long long lo, long long hi, std::uint64_t seed);

// exact match after stripping leading/trailing whitespace
bool check_answer(const TokenSeq& predicted, const TokenSeq& gold);

// s1 / CoT_init text with the CoT cap (and target length) interpolated.
std::string prompt_template_text(TaskKind kind, int cot_cap, int target_len);
TokenSeq prompt_template(TaskKind kind, int cot_cap, int target_len);

// Answer-readout cue appended between the CoT and the answer in every
// answer-scoring context. It lives outside the CoT, so perturbation audits
// never touch it: format stays intact for both visibility rules and only the
// information carried by the CoT itself varies. Empty for tasks whose answer
// is a literal continuation.
std::string answer_cue_text(TaskKind kind);
TokenSeq answer_cue(TaskKind kind);

// Lowercases and maps characters outside the task alphabet to spaces so any
// UTF-8-ish plain text becomes tokenizable.
std::string canonicalize_corpus_text(const std::string& raw);

// Uniformly sampled (question, answer) windows from a plain-text corpus.
// Documents are separated by blank lines; windows never cross a boundary.
class ContinuationSampler {
public:
    ContinuationSampler(const std::string& corpus_text, int ctx_len, int target_len);

    QAPair sample(std::uint64_t seed) const;
    std::size_t window_count() const { return total_windows_; }

private:
    int ctx_len_;
    int target_len_;
    std::vector<TokenSeq> docs_;
    std::vector<std::size_t> cum_windows_;
    std::size_t total_windows_ = 0;
};

// Task binding used by the trainer: one object serving samples for any kind.
class TaskSource {
public:
    explicit TaskSource(const TaskSpec& spec);

    const TaskSpec& spec() const { return spec_; }
    QAPair sample(std::uint64_t seed) const;

private:
    TaskSpec spec_;
    std::shared_ptr<ContinuationSampler> cont_;
};

// Fixed micro task for the enumeration oracle: token-level, no tokenizer.
struct MicroTask {
    int vocab_size = 4;
    int bos = 0;
    TokenSeq question = {1};
    TokenSeq answer = {2};
    TokenSeq cot_init = {3};
    int cot_cap = 2;
};

MicroTask micro_oracle_task();

// Plain-text pretraining corpus for the arithmetic task: mostly bare sum
// lines, with some documents that show the prompt template followed by an
// unrelated sum line so the template context is in-distribution without
// teaching the question-to-CoT mapping.
std::string arithmetic_corpus(int n_docs, int n_terms, long long lo, long long hi, int cot_cap,
                              std::uint64_t seed);

// Export n generated pairs as JSON Lines {"question": ..., "answer": ...}.
std::string export_jsonl(const TaskSource& source, int n, std::uint64_t seed);

}  // namespace mct::tasks
