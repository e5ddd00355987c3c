#pragma once

#include "qexp/evaluator.hpp"
#include "qexp/index.hpp"
#include "qexp/retriever.hpp"

#include <cstdint>
#include <filesystem>
#include <vector>

namespace qexp {

// Topic-structured corpus with deliberate query/document vocabulary mismatch.
// Every topic has four query words and ten topic words. Its graded documents
// are a primary doc (grade 3, query + topic words), two grade-2 docs (topic
// words, sometimes one query word), a grade-1 doc (two topic words) and two
// grade-0 distractors that repeat query words 0 and 1 with little topic
// vocabulary. Each topic yields one training query (query words 0,1,2) and
// one test query (query words 0,1,3); both share the topic's judgments.
struct SyntheticConfig {
    std::size_t topics = 50;
    std::size_t documents = 1000; // topics * 6 graded/distractor docs + filler
    std::size_t filler_vocabulary = 400;
    std::uint64_t seed = 0;
};

struct SyntheticCorpus {
    std::vector<Document> docs;
    std::vector<Query> train_queries;
    std::vector<Query> test_queries;
    Qrels qrels;
};

SyntheticCorpus generate_synthetic(const SyntheticConfig& config);

// Writes corpus.jsonl, train_queries.tsv, test_queries.tsv and qrels.txt.
void write_synthetic(const SyntheticCorpus& corpus, const std::filesystem::path& dir);

} // namespace qexp
