#pragma once

#include "qexp/index.hpp"

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace qexp {

struct Bm25Params {
    double k1 = 0.9;
    double b = 0.4;
};

struct ScoredDoc {
    std::string doc_id;
    double score = 0.0;

    bool operator==(const ScoredDoc&) const = default;
};

// Entries descend by score, ties by doc_id ascending.
struct RankedList {
    std::string query_id;
    std::vector<ScoredDoc> entries;

    bool operator==(const RankedList&) const = default;
};

struct Query {
    std::string query_id;
    std::string text;
};

inline constexpr int kQueryRepeats = 5;
inline constexpr std::size_t kDefaultDepth = 1000;

// The original query repeated five times followed by the expansion, joined
// by single spaces. Throws InvalidArgument for an empty query.
std::string compose_query(std::string_view query, std::string_view expansion);

double bm25_idf(std::size_t doc_count, std::size_t df);

// Lucene-style BM25 (no (k1+1) factor). Each query-term occurrence adds its
// own contribution. Throws InvalidArgument for an unknown doc_id.
double bm25_score(const InvertedIndex& index, const Bm25Params& params, std::span<const std::string> query_terms,
                  std::string_view doc_id);

// Top-k documents with score > 0. k must be >= 1.
RankedList search(const InvertedIndex& index, const Bm25Params& params, std::string_view query,
                  std::size_t k = kDefaultDepth, std::string query_id = {});

// One ranked list per query, in input order. Duplicate query ids are an error.
std::vector<RankedList> batch_search(const InvertedIndex& index, const Bm25Params& params,
                                     std::span<const Query> queries, std::size_t k = kDefaultDepth,
                                     unsigned workers = 1);

// "qid<TAB>text" per line.
std::vector<Query> read_queries_tsv(const std::filesystem::path& path);
void write_queries_tsv(const std::filesystem::path& path, std::span<const Query> queries);

// TREC run format: "qid Q0 docid rank score tag", scores with 6 decimals.
std::string format_run(std::span<const RankedList> run, std::string_view run_tag);
void write_run(const std::filesystem::path& path, std::span<const RankedList> run, std::string_view run_tag);
std::vector<RankedList> read_run(const std::filesystem::path& path);

} // namespace qexp
