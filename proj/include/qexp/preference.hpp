#pragma once

#include "qexp/evaluator.hpp"
#include "qexp/expansion.hpp"

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace qexp {

struct PreferencePair {
    std::string query_id;
    std::string prompt; // zero-shot prompt text, no exemplars
    std::string chosen;
    std::string rejected;
    double chosen_score = 0.0;
    double rejected_score = 0.0;

    bool operator==(const PreferencePair&) const = default;
};

struct PrefBuildConfig {
    double delta = 0.01;
    std::size_t retrieval_k = kDefaultDepth;
    Bm25Params bm25;
    MetricConfig metric; // nDCG@10 is the preference signal
    unsigned workers = 1;
};

enum class PairDecision {
    keep_e1,      // e1 chosen
    keep_e2,      // e2 chosen
    below_margin, // |s1 - s2| < delta, or s1 == s2
    both_zero,    // no ordering signal
    no_qrels,     // query has no judgments
};

std::string_view decision_name(PairDecision d);

// Margin rule: keep when |s1 - s2| >= delta (ties at delta kept); the higher
// score is chosen. Equal scores and all-zero pairs are skipped for any delta.
PairDecision decide_pair(double s1, double s2, double delta);

// System and user prompt joined by a blank line, the form stored in pairs.
std::string prompt_text(const ChatPrompt& prompt);

// nDCG@10 of compose_query(query, e1) and (query, e2); nullopt without qrels.
std::optional<std::pair<double, double>> score_expansion_pair(const ExpansionRecord& record,
                                                              const InvertedIndex& index, const Qrels& qrels,
                                                              const PrefBuildConfig& cfg);

struct RecordOutcome {
    std::string query_id;
    std::optional<double> s1;
    std::optional<double> s2;
    PairDecision decision = PairDecision::below_margin;
};

struct PrefBuildResult {
    std::vector<PreferencePair> pairs;
    std::size_t kept = 0;
    std::size_t skipped = 0;
    std::vector<RecordOutcome> outcomes; // one per input record, input order
};

// Scores every record with one batched retrieval, then applies the margin rule.
PrefBuildResult build_pairs(std::span<const ExpansionRecord> records, const InvertedIndex& index,
                            const Qrels& qrels, const PrefBuildConfig& cfg);

std::string to_jsonl(const PreferencePair& pair);
void write_pairs(const std::filesystem::path& path, std::span<const PreferencePair> pairs);
std::vector<PreferencePair> read_pairs(const std::filesystem::path& path);

// JSON report: config, tallies and per-record scores/decisions.
std::string report_json(const PrefBuildResult& result, const PrefBuildConfig& cfg);

} // namespace qexp
