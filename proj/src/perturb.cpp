#include "mct/perturb.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "mct/nn/model.hpp"
#include "mct/rng.hpp"
#include "mct/tokenizer.hpp"

namespace mct::perturb {

std::string kind_name(Kind k) {
    switch (k) {
        case Kind::Delete: return "delete";
        case Kind::DigitReplace: return "digit-replace";
        case Kind::TruncateFront: return "truncate-front";
        case Kind::TruncateBack: return "truncate-back";
        case Kind::CharReplace: return "char-replace";
    }
    throw ContractError("unknown perturbation kind");
}

Kind kind_from_name(const std::string& name) {
    for (Kind k : all_kinds()) {
        if (kind_name(k) == name) return k;
    }
    throw ConfigError("unknown perturbation kind: " + name);
}

int removal_count(std::size_t len, double severity) {
    return static_cast<int>(std::floor(severity * static_cast<double>(len) + 0.5));
}

namespace {

TokenSeq delete_tokens(const TokenSeq& cot, double severity, Rng& rng) {
    const std::size_t n = cot.size();
    const std::size_t k = static_cast<std::size_t>(removal_count(n, severity));
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    for (std::size_t j = 0; j < k; ++j) {
        std::swap(idx[j], idx[j + rng.next_below(n - j)]);
    }
    std::vector<bool> removed(n, false);
    for (std::size_t j = 0; j < k; ++j) removed[idx[j]] = true;
    TokenSeq out;
    out.reserve(n - k);
    for (std::size_t i = 0; i < n; ++i) {
        if (!removed[i]) out.push_back(cot[i]);
    }
    return out;
}

std::string replace_chars(const std::string& text, double severity, bool digits_only, Rng& rng) {
    const std::string& alphabet = Tokenizer::instance().alphabet();
    std::string out = text;
    for (char& c : out) {
        const bool digit = c >= '0' && c <= '9';
        const bool eligible = digits_only ? digit : (c != ' ' && c != '\n');
        if (!eligible) continue;
        if (rng.next_double() >= severity) continue;
        if (digits_only) {
            const std::uint64_t r = rng.next_below(9);
            char d = static_cast<char>('0' + r);
            if (d >= c) ++d;  // index into the nine other digits, ascending
            c = d;
        } else {
            // index into the alphabet with the current character removed
            const std::uint64_t r = rng.next_below(alphabet.size() - 1);
            const std::size_t self = alphabet.find(c);
            c = alphabet[r >= self ? r + 1 : r];
        }
    }
    return out;
}

}  // namespace

TokenSeq perturb(const TokenSeq& cot, const PerturbationSpec& spec) {
    if (spec.severity < 0.0 || spec.severity > 1.0) {
        throw ConfigError("perturb: severity must be in [0,1]");
    }
    Rng rng(spec.seed);
    switch (spec.kind) {
        case Kind::Delete:
            return delete_tokens(cot, spec.severity, rng);
        case Kind::TruncateFront: {
            const std::size_t k = static_cast<std::size_t>(removal_count(cot.size(), spec.severity));
            return TokenSeq(cot.begin() + static_cast<std::ptrdiff_t>(k), cot.end());
        }
        case Kind::TruncateBack: {
            const std::size_t k = static_cast<std::size_t>(removal_count(cot.size(), spec.severity));
            return TokenSeq(cot.begin(), cot.end() - static_cast<std::ptrdiff_t>(k));
        }
        case Kind::DigitReplace:
        case Kind::CharReplace: {
            const auto& tok = Tokenizer::instance();
            const std::string text = tok.detokenize(cot);
            return tok.tokenize(
                replace_chars(text, spec.severity, spec.kind == Kind::DigitReplace, rng));
        }
    }
    throw ContractError("unknown perturbation kind");
}

std::string record_to_jsonl(const FragilityRecord& r) {
    nlohmann::json j;
    j["example_id"] = r.example_id;
    j["kind"] = kind_name(r.kind);
    j["severity"] = r.severity;
    j["effect_m"] = r.effect_m;
    j["effect_nm"] = r.effect_nm;
    j["difference"] = r.difference;
    return j.dump();
}

std::vector<FragilityRecord> fragility_eval(const mlm::MLMHandle& markovian,
                                            const mlm::MLMHandle& nonmarkovian,
                                            const tasks::TaskSource& source,
                                            const std::vector<Kind>& kinds,
                                            const std::vector<double>& severities, int n_examples,
                                            std::uint64_t seed, int* skipped) {
    std::vector<FragilityRecord> records;
    if (skipped) *skipped = 0;
    for (int ex = 0; ex < n_examples; ++ex) {
        try {
            const tasks::QAPair qa = source.sample(derive_seed(seed, {0xd, (std::uint64_t)ex}));
            const TokenSeq cot_m =
                mlm::update_state(markovian, qa.question, derive_seed(seed, {0x11, (std::uint64_t)ex}))
                    .first;
            const TokenSeq cot_nm = mlm::update_state(nonmarkovian, qa.question,
                                                      derive_seed(seed, {0x12, (std::uint64_t)ex}))
                                        .first;
            const double intact_m = mlm::score_answer_markovian(markovian, cot_m, qa.answer);
            const double intact_nm =
                mlm::score_answer_nonmarkovian(nonmarkovian, qa.question, cot_nm, qa.answer);

            for (std::size_t ki = 0; ki < kinds.size(); ++ki) {
                for (std::size_t si = 0; si < severities.size(); ++si) {
                    PerturbationSpec spec_m{kinds[ki], severities[si],
                                            derive_seed(seed, {0x21, (std::uint64_t)ex, ki, si})};
                    PerturbationSpec spec_nm{kinds[ki], severities[si],
                                             derive_seed(seed, {0x22, (std::uint64_t)ex, ki, si})};
                    FragilityRecord r;
                    r.example_id = ex;
                    r.kind = kinds[ki];
                    r.severity = severities[si];
                    r.effect_m = intact_m - mlm::score_answer_markovian(
                                                markovian, perturb(cot_m, spec_m), qa.answer);
                    r.effect_nm =
                        intact_nm - mlm::score_answer_nonmarkovian(
                                        nonmarkovian, qa.question, perturb(cot_nm, spec_nm),
                                        qa.answer);
                    r.difference = r.effect_m - r.effect_nm;
                    records.push_back(r);
                }
            }
        } catch (const std::exception&) {
            if (skipped) ++*skipped;
        }
    }
    return records;
}

FragilityTable fragility_table(const std::vector<FragilityRecord>& records) {
    FragilityTable t;
    for (const auto& r : records) {
        if (std::find(t.severities.begin(), t.severities.end(), r.severity) == t.severities.end()) {
            t.severities.push_back(r.severity);
        }
    }
    std::sort(t.severities.begin(), t.severities.end());
    for (Kind k : all_kinds()) {
        for (const auto& r : records) {
            if (r.kind == k) {
                t.kinds.push_back(k);
                break;
            }
        }
    }

    t.cells.assign(t.severities.size(), std::vector<FragilityCell>(t.kinds.size()));
    std::vector<std::vector<double>> sums(t.severities.size(),
                                          std::vector<double>(t.kinds.size(), 0.0));
    auto sumsq = sums;
    for (const auto& r : records) {
        const std::size_t si =
            std::find(t.severities.begin(), t.severities.end(), r.severity) - t.severities.begin();
        const std::size_t ki = std::find(t.kinds.begin(), t.kinds.end(), r.kind) - t.kinds.begin();
        sums[si][ki] += r.difference;
        sumsq[si][ki] += r.difference * r.difference;
        ++t.cells[si][ki].n;
    }
    for (std::size_t si = 0; si < t.severities.size(); ++si) {
        for (std::size_t ki = 0; ki < t.kinds.size(); ++ki) {
            FragilityCell& c = t.cells[si][ki];
            if (c.n == 0) continue;
            c.mean = sums[si][ki] / c.n;
            const double var = sumsq[si][ki] / c.n - c.mean * c.mean;
            c.stderr_ = c.n > 1 ? std::sqrt(std::max(var, 0.0) / c.n) : 0.0;
        }
    }
    for (std::size_t si = 0; si < t.severities.size(); ++si) {
        double s = 0.0;
        int n = 0;
        for (std::size_t ki = 0; ki < t.kinds.size(); ++ki) {
            if (t.cells[si][ki].n > 0) {
                s += t.cells[si][ki].mean;
                ++n;
            }
        }
        t.row_means.push_back(n > 0 ? s / n : 0.0);
    }
    for (std::size_t ki = 0; ki < t.kinds.size(); ++ki) {
        double s = 0.0;
        int n = 0;
        for (std::size_t si = 0; si < t.severities.size(); ++si) {
            if (t.cells[si][ki].n > 0) {
                s += t.cells[si][ki].mean;
                ++n;
            }
        }
        t.col_means.push_back(n > 0 ? s / n : 0.0);
    }
    return t;
}

std::string FragilityTable::to_csv() const {
    std::ostringstream out;
    out << "severity,type,mean_difference,n,stderr\n";
    out << std::setprecision(17);
    for (std::size_t si = 0; si < severities.size(); ++si) {
        for (std::size_t ki = 0; ki < kinds.size(); ++ki) {
            const FragilityCell& c = cells[si][ki];
            if (c.n == 0) continue;
            out << severities[si] << "," << kind_name(kinds[ki]) << "," << c.mean << "," << c.n
                << "," << c.stderr_ << "\n";
        }
    }
    return out.str();
}

std::string FragilityTable::to_text() const {
    std::ostringstream out;
    out << std::fixed << std::setprecision(4);
    out << std::setw(10) << "severity";
    for (Kind k : kinds) out << std::setw(16) << kind_name(k);
    out << std::setw(16) << "row mean" << "\n";
    for (std::size_t si = 0; si < severities.size(); ++si) {
        out << std::setw(10) << severities[si];
        for (std::size_t ki = 0; ki < kinds.size(); ++ki) {
            if (cells[si][ki].n == 0) {
                out << std::setw(16) << "-";
            } else {
                out << std::setw(16) << cells[si][ki].mean;
            }
        }
        out << std::setw(16) << row_means[si] << "\n";
    }
    out << std::setw(10) << "col mean";
    for (std::size_t ki = 0; ki < kinds.size(); ++ki) out << std::setw(16) << col_means[ki];
    out << "\n";
    return out.str();
}

namespace {

bool greedy_correct(const mlm::MLMHandle& handle, const TokenSeq& ctx_prefix, const TokenSeq& cot,
                    const tasks::QAPair& qa) {
    TokenSeq ctx{handle.bos};
    ctx.insert(ctx.end(), ctx_prefix.begin(), ctx_prefix.end());
    ctx.insert(ctx.end(), cot.begin(), cot.end());
    ctx.insert(ctx.end(), handle.answer_cue.begin(), handle.answer_cue.end());
    const TokenSeq pred = nn::sample_continuation(
        handle.actor, ctx, static_cast<int>(qa.answer.size()), 0.0, handle.eot, 0);
    return tasks::check_answer(pred, qa.answer);
}

TokenSeq greedy_cot(const mlm::MLMHandle& handle, const TokenSeq& q) {
    const TokenSeq ctx = mlm::update_context(handle, q);
    TokenSeq cot = nn::sample_continuation(handle.actor, ctx, handle.cot_cap, 0.0, handle.eot, 0);
    if (static_cast<int>(cot.size()) < handle.cot_cap) cot.push_back(handle.eot);
    return cot;
}

}  // namespace

std::vector<AccuracyDelta> accuracy_fragility(const mlm::MLMHandle& markovian,
                                              const mlm::MLMHandle& nonmarkovian,
                                              const tasks::TaskSource& source,
                                              const std::vector<Kind>& kinds,
                                              const std::vector<double>& severities,
                                              int n_examples, std::uint64_t seed) {
    std::vector<tasks::QAPair> examples;
    std::vector<TokenSeq> cots_m, cots_nm;
    std::vector<TokenSeq> nm_prefix;  // q + cot_init per example
    int intact_m = 0, intact_nm = 0;
    for (int ex = 0; ex < n_examples; ++ex) {
        examples.push_back(source.sample(derive_seed(seed, {0xd, (std::uint64_t)ex})));
        const tasks::QAPair& qa = examples.back();
        cots_m.push_back(greedy_cot(markovian, qa.question));
        cots_nm.push_back(greedy_cot(nonmarkovian, qa.question));
        TokenSeq pfx = qa.question;
        pfx.insert(pfx.end(), nonmarkovian.cot_init.begin(), nonmarkovian.cot_init.end());
        nm_prefix.push_back(std::move(pfx));
        if (greedy_correct(markovian, {}, cots_m.back(), qa)) ++intact_m;
        if (greedy_correct(nonmarkovian, nm_prefix.back(), cots_nm.back(), qa)) ++intact_nm;
    }
    const double acc_m0 = static_cast<double>(intact_m) / n_examples;
    const double acc_nm0 = static_cast<double>(intact_nm) / n_examples;

    std::vector<AccuracyDelta> out;
    for (std::size_t ki = 0; ki < kinds.size(); ++ki) {
        for (std::size_t si = 0; si < severities.size(); ++si) {
            AccuracyDelta d;
            d.kind = kinds[ki];
            d.severity = severities[si];
            d.acc_intact_m = acc_m0;
            d.acc_intact_nm = acc_nm0;
            int ok_m = 0, ok_nm = 0;
            for (int ex = 0; ex < n_examples; ++ex) {
                PerturbationSpec spec_m{kinds[ki], severities[si],
                                        derive_seed(seed, {0x31, (std::uint64_t)ex, ki, si})};
                PerturbationSpec spec_nm{kinds[ki], severities[si],
                                         derive_seed(seed, {0x32, (std::uint64_t)ex, ki, si})};
                if (greedy_correct(markovian, {}, perturb(cots_m[ex], spec_m), examples[ex])) {
                    ++ok_m;
                }
                if (greedy_correct(nonmarkovian, nm_prefix[ex], perturb(cots_nm[ex], spec_nm),
                                   examples[ex])) {
                    ++ok_nm;
                }
            }
            d.acc_perturbed_m = static_cast<double>(ok_m) / n_examples;
            d.acc_perturbed_nm = static_cast<double>(ok_nm) / n_examples;
            d.delta_m = d.acc_intact_m - d.acc_perturbed_m;
            d.delta_nm = d.acc_intact_nm - d.acc_perturbed_nm;
            d.difference = d.delta_m - d.delta_nm;
            out.push_back(d);
        }
    }
    return out;
}

}  // namespace mct::perturb
