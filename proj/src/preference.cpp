#include "qexp/preference.hpp"

#include "binary_io.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>

namespace qexp {

std::string_view decision_name(PairDecision d)
{
    switch (d) {
    case PairDecision::keep_e1: return "kept_e1";
    case PairDecision::keep_e2: return "kept_e2";
    case PairDecision::below_margin: return "below_margin";
    case PairDecision::both_zero: return "both_zero";
    case PairDecision::no_qrels: return "no_qrels";
    }
    return "?";
}

PairDecision decide_pair(double s1, double s2, double delta)
{
    if (delta < 0.0) throw InvalidArgument("delta must be >= 0");
    if (s1 == 0.0 && s2 == 0.0) return PairDecision::both_zero;
    if (s1 == s2 || std::fabs(s1 - s2) < delta) return PairDecision::below_margin;
    return s1 > s2 ? PairDecision::keep_e1 : PairDecision::keep_e2;
}

std::string prompt_text(const ChatPrompt& prompt)
{
    return prompt.system + "\n\n" + prompt.user;
}

std::optional<std::pair<double, double>> score_expansion_pair(const ExpansionRecord& record,
                                                              const InvertedIndex& index, const Qrels& qrels,
                                                              const PrefBuildConfig& cfg)
{
    if (!qrels.judgments(record.query_id)) return std::nullopt;
    const auto r1 = search(index, cfg.bm25, compose_query(record.query, record.e1), cfg.retrieval_k, record.query_id);
    const auto r2 = search(index, cfg.bm25, compose_query(record.query, record.e2), cfg.retrieval_k, record.query_id);
    return std::pair{*ndcg_at_k(r1, qrels, cfg.metric), *ndcg_at_k(r2, qrels, cfg.metric)};
}

PrefBuildResult build_pairs(std::span<const ExpansionRecord> records, const InvertedIndex& index,
                            const Qrels& qrels, const PrefBuildConfig& cfg)
{
    if (cfg.delta < 0.0) throw InvalidArgument("delta must be >= 0");

    // Batch retrieval over both expansions of every judged record, then per-query split.
    std::vector<Query> batch;
    for (std::size_t i = 0; i < records.size(); ++i) {
        if (!qrels.judgments(records[i].query_id)) continue;
        batch.push_back({std::to_string(i) + "#e1", compose_query(records[i].query, records[i].e1)});
        batch.push_back({std::to_string(i) + "#e2", compose_query(records[i].query, records[i].e2)});
    }
    auto ranked = batch_search(index, cfg.bm25, batch, cfg.retrieval_k, cfg.workers);

    PrefBuildResult result;
    std::size_t next = 0;
    for (const auto& rec : records) {
        RecordOutcome outcome{rec.query_id, std::nullopt, std::nullopt, PairDecision::no_qrels};
        if (qrels.judgments(rec.query_id)) {
            auto& r1 = ranked[next++];
            auto& r2 = ranked[next++];
            r1.query_id = rec.query_id;
            r2.query_id = rec.query_id;
            outcome.s1 = *ndcg_at_k(r1, qrels, cfg.metric);
            outcome.s2 = *ndcg_at_k(r2, qrels, cfg.metric);
            outcome.decision = decide_pair(*outcome.s1, *outcome.s2, cfg.delta);
        }
        if (outcome.decision == PairDecision::keep_e1 || outcome.decision == PairDecision::keep_e2) {
            const bool first = outcome.decision == PairDecision::keep_e1;
            result.pairs.push_back({rec.query_id, prompt_text(build_prompt(rec.query, PromptMode::zero)),
                                    first ? rec.e1 : rec.e2, first ? rec.e2 : rec.e1,
                                    first ? *outcome.s1 : *outcome.s2, first ? *outcome.s2 : *outcome.s1});
            ++result.kept;
        } else {
            ++result.skipped;
        }
        result.outcomes.push_back(std::move(outcome));
    }
    return result;
}

std::string to_jsonl(const PreferencePair& p)
{
    return nlohmann::json{{"query_id", p.query_id},       {"prompt", p.prompt},
                          {"chosen", p.chosen},           {"rejected", p.rejected},
                          {"chosen_score", p.chosen_score}, {"rejected_score", p.rejected_score}}
        .dump();
}

void write_pairs(const std::filesystem::path& path, std::span<const PreferencePair> pairs)
{
    std::string out;
    for (const auto& p : pairs) out += to_jsonl(p) + '\n';
    detail::write_file(path, out);
}

std::vector<PreferencePair> read_pairs(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw IoError("cannot open pairs " + path.string());
    std::vector<PreferencePair> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            out.push_back({j.at("query_id").get<std::string>(), j.at("prompt").get<std::string>(),
                           j.at("chosen").get<std::string>(), j.at("rejected").get<std::string>(),
                           j.at("chosen_score").get<double>(), j.at("rejected_score").get<double>()});
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

std::string report_json(const PrefBuildResult& result, const PrefBuildConfig& cfg)
{
    nlohmann::json records = nlohmann::json::array();
    for (const auto& o : result.outcomes) {
        nlohmann::json r{{"query_id", o.query_id}, {"decision", decision_name(o.decision)}};
        r["s1"] = o.s1 ? nlohmann::json(*o.s1) : nlohmann::json(nullptr);
        r["s2"] = o.s2 ? nlohmann::json(*o.s2) : nlohmann::json(nullptr);
        records.push_back(std::move(r));
    }
    nlohmann::json report{{"delta", cfg.delta},
                          {"retrieval_k", cfg.retrieval_k},
                          {"metric", "ndcg@10"},
                          {"kept", result.kept},
                          {"skipped", result.skipped},
                          {"records", std::move(records)}};
    return report.dump(2) + "\n";
}

} // namespace qexp
