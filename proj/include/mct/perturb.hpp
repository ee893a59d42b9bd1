#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mct/common.hpp"
#include "mct/mlm.hpp"
#include "mct/tasks.hpp"

namespace mct::perturb {

enum class Kind { Delete, DigitReplace, TruncateFront, TruncateBack, CharReplace };

std::string kind_name(Kind k);
Kind kind_from_name(const std::string& name);
inline const std::vector<Kind>& all_kinds() {
    static const std::vector<Kind> kinds{Kind::Delete, Kind::DigitReplace, Kind::TruncateFront,
                                         Kind::TruncateBack, Kind::CharReplace};
    return kinds;
}

struct PerturbationSpec {
    Kind kind = Kind::Delete;
    double severity = 0.0;  // in [0, 1]
    std::uint64_t seed = 0;
};

// round-half-up of severity * len
int removal_count(std::size_t len, double severity);

// Deterministic per (cot, spec). Draw protocol, fixed so an independent
// implementation can match bit-exactly (all draws from Rng(spec.seed)):
// - Delete: k = removal_count; partial Fisher-Yates over the index array
//   (for j in 0..k-1: swap idx[j] with idx[j + next_below(n-j)]); the first k
//   selected indices are removed, survivors keep their original order.
// - TruncateFront / TruncateBack: drop k tokens from that end, no draws.
// - DigitReplace: on the detokenized text, for every digit in order draw
//   u = next_double(); if u < severity draw next_below(9) to index the nine
//   other digits in ascending order. Retokenizes.
// - CharReplace: same per-character protocol over every non-whitespace
//   character, replacement indexed into the task alphabet (tokenizer order)
//   with the current character removed.
TokenSeq perturb(const TokenSeq& cot, const PerturbationSpec& spec);

struct FragilityRecord {
    int example_id = 0;
    Kind kind = Kind::Delete;
    double severity = 0.0;
    double effect_m = 0.0;   // intact minus perturbed answer log-prob, Markovian model
    double effect_nm = 0.0;  // same with the question visible, Non-Markovian model
    double difference = 0.0;
};

std::string record_to_jsonl(const FragilityRecord& r);

// For each held-out example: temperature-1 CoTs from both checkpoints on the
// same (q, ans), perturbed with the same spec under independent derived
// seeds, each model scored under its own visibility rule. Unscorable
// examples are skipped and counted in skipped (when non-null).
std::vector<FragilityRecord> fragility_eval(const mlm::MLMHandle& markovian,
                                            const mlm::MLMHandle& nonmarkovian,
                                            const tasks::TaskSource& source,
                                            const std::vector<Kind>& kinds,
                                            const std::vector<double>& severities, int n_examples,
                                            std::uint64_t seed, int* skipped = nullptr);

struct FragilityCell {
    double mean = 0.0;
    double stderr_ = 0.0;
    int n = 0;
};

struct FragilityTable {
    std::vector<double> severities;  // row labels, ascending
    std::vector<Kind> kinds;         // column labels
    std::vector<std::vector<FragilityCell>> cells;  // [severity][kind]
    std::vector<double> row_means;
    std::vector<double> col_means;

    std::string to_csv() const;   // severity,type,mean_difference,n,stderr
    std::string to_text() const;  // aligned grid with row/column means
};

FragilityTable fragility_table(const std::vector<FragilityRecord>& records);

struct AccuracyDelta {
    Kind kind = Kind::Delete;
    double severity = 0.0;
    double acc_intact_m = 0.0;
    double acc_perturbed_m = 0.0;
    double acc_intact_nm = 0.0;
    double acc_perturbed_nm = 0.0;
    double delta_m = 0.0;   // acc_intact_m - acc_perturbed_m
    double delta_nm = 0.0;
    double difference = 0.0;  // delta_m - delta_nm
};

// Temperature-0 exact-match accuracy with the CoT perturbed before answer
// decoding, under each model's visibility rule.
std::vector<AccuracyDelta> accuracy_fragility(const mlm::MLMHandle& markovian,
                                              const mlm::MLMHandle& nonmarkovian,
                                              const tasks::TaskSource& source,
                                              const std::vector<Kind>& kinds,
                                              const std::vector<double>& severities,
                                              int n_examples, std::uint64_t seed);

}  // namespace mct::perturb
