#include "qexp/error.hpp"
#include "qexp/retriever.hpp"
#include "test_util.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>

using namespace qexp;
using qexp::testing::TempDir;

namespace {

// Exhaustive scorer built directly from document text: every doc is scored,
// each query-term occurrence is summed separately.
struct BruteForceBm25 {
    std::vector<Document> docs;
    AnalyzerConfig cfg;
    Bm25Params params;
    std::vector<std::map<std::string, int>> tf;
    std::vector<double> len;
    std::map<std::string, int> df;
    double avgdl = 0;

    BruteForceBm25(std::vector<Document> d, AnalyzerConfig c, Bm25Params p) : docs(std::move(d)), cfg(std::move(c)), params(p)
    {
        for (const auto& doc : docs) {
            std::map<std::string, int> counts;
            const auto terms = analyze(doc.contents, cfg);
            for (const auto& t : terms) ++counts[t];
            for (const auto& [t, n] : counts) ++df[t];
            len.push_back(static_cast<double>(terms.size()));
            avgdl += static_cast<double>(terms.size());
            tf.push_back(std::move(counts));
        }
        avgdl /= static_cast<double>(docs.size());
    }

    double score(const std::vector<std::string>& q, std::size_t d) const
    {
        double s = 0;
        const double n = static_cast<double>(docs.size());
        for (const auto& t : q) {
            const auto it = tf[d].find(t);
            if (it == tf[d].end()) continue;
            const double dfv = df.at(t);
            const double idf = std::log(1.0 + (n - dfv + 0.5) / (dfv + 0.5));
            const double f = it->second;
            s += idf * f / (f + params.k1 * (1 - params.b + params.b * len[d] / avgdl));
        }
        return s;
    }

    std::vector<ScoredDoc> top(const std::string& query, std::size_t k) const
    {
        const auto q = analyze(query, cfg);
        std::vector<ScoredDoc> all;
        for (std::size_t d = 0; d < docs.size(); ++d) {
            const double s = score(q, d);
            if (s > 0) all.push_back({docs[d].doc_id, s});
        }
        std::stable_sort(all.begin(), all.end(), [](const ScoredDoc& a, const ScoredDoc& b) {
            if (a.score != b.score) return a.score > b.score;
            return a.doc_id < b.doc_id;
        });
        if (all.size() > k) all.resize(k);
        return all;
    }
};

} // namespace

TEST_CASE("compose_query repeats the query five times")
{
    CHECK(compose_query("cats", "felines purr") == "cats cats cats cats cats felines purr");
    CHECK(compose_query("q", "") == "q q q q q");
    CHECK_THROWS_AS(compose_query("", "x"), InvalidArgument);
}

TEST_CASE("bm25 defaults")
{
    Bm25Params p;
    CHECK(p.k1 == 0.9);
    CHECK(p.b == 0.4);
}

TEST_CASE("bm25 single-document hand computation")
{
    const auto idx = build_index({{"d", "cat sat"}}, AnalyzerConfig::english());
    const std::vector<std::string> q{"cat"};
    // idf = ln(1 + 0.5/1.5) = ln(4/3); tf_norm = 1/(1+0.9) with dl == avgdl.
    const double expected = std::log(4.0 / 3.0) / 1.9;
    CHECK(expected == doctest::Approx(0.151412).epsilon(1e-6));
    CHECK(bm25_score(idx, {}, q, "d") == doctest::Approx(expected).epsilon(1e-14));
    CHECK(bm25_score(idx, {}, std::vector<std::string>{"dog"}, "d") == 0.0);
    CHECK_THROWS_AS(bm25_score(idx, {}, q, "nope"), InvalidArgument);
}

TEST_CASE("bm25 is additive over concatenated query term lists")
{
    const auto docs = qexp::testing::random_corpus(60, 4);
    const auto idx = build_index(docs, AnalyzerConfig::english());
    std::mt19937_64 rng(9);
    for (int i = 0; i < 30; ++i) {
        const auto q1 = analyze(qexp::testing::random_query(rng), idx.analyzer());
        const auto q2 = analyze(qexp::testing::random_query(rng), idx.analyzer());
        auto both = q1;
        both.insert(both.end(), q2.begin(), q2.end());
        const auto& doc = docs[rng() % docs.size()].doc_id;
        CHECK(bm25_score(idx, {}, both, doc) ==
              doctest::Approx(bm25_score(idx, {}, q1, doc) + bm25_score(idx, {}, q2, doc)).epsilon(1e-12));
    }
}

TEST_CASE("composed query score equals the 5x term multiset score")
{
    const auto docs = qexp::testing::random_corpus(80, 12);
    const auto cfg = AnalyzerConfig::english();
    const auto idx = build_index(docs, cfg);
    BruteForceBm25 oracle(docs, cfg, {});
    std::mt19937_64 rng(3);
    for (int i = 0; i < 20; ++i) {
        const auto q = qexp::testing::random_query(rng);
        const auto e = qexp::testing::random_query(rng) + " " + qexp::testing::random_query(rng);
        // Multiset: 5 copies of each query term plus the expansion terms.
        std::vector<std::string> multiset;
        for (int r = 0; r < 5; ++r)
            for (const auto& t : analyze(q, cfg)) multiset.push_back(t);
        for (const auto& t : analyze(e, cfg)) multiset.push_back(t);
        const auto ranked = search(idx, {}, compose_query(q, e), 1000);
        for (const auto& entry : ranked.entries) {
            const auto d = static_cast<std::size_t>(std::stoi(entry.doc_id.substr(1)));
            CHECK(entry.score == doctest::Approx(oracle.score(multiset, d)).epsilon(1e-12));
        }
    }
}

TEST_CASE("search on a two-document corpus")
{
    const auto idx = build_index({{"a", "cat"}, {"b", "dog"}}, AnalyzerConfig::english());
    const auto r = search(idx, {}, "cat", 10, "q");
    REQUIRE(r.entries.size() == 1);
    CHECK(r.entries[0].doc_id == "a");
    CHECK(r.entries[0].score > 0);
    CHECK(search(idx, {}, "the", 10).entries.empty());
    CHECK_THROWS_AS(search(idx, {}, "cat", 0), InvalidArgument);
}

TEST_CASE("ties break by doc id ascending")
{
    const auto idx = build_index({{"c", "x y"}, {"a", "x y"}, {"b", "x y"}, {"d", "y"}}, AnalyzerConfig::english());
    const auto r = search(idx, {}, "x", 10);
    REQUIRE(r.entries.size() == 3);
    CHECK(r.entries[0].doc_id == "a");
    CHECK(r.entries[1].doc_id == "b");
    CHECK(r.entries[2].doc_id == "c");
    CHECK(search(idx, {}, "x", 2).entries.size() == 2);
}

TEST_CASE("top-k matches the exhaustive scorer on random corpora")
{
    const auto docs = qexp::testing::random_corpus(200, 77);
    const auto cfg = AnalyzerConfig::english();
    const auto idx = build_index(docs, cfg);
    BruteForceBm25 oracle(docs, cfg, {});
    std::mt19937_64 rng(1);
    for (int i = 0; i < 20; ++i) {
        const auto q = qexp::testing::random_query(rng);
        const auto got = search(idx, {}, q, 10).entries;
        const auto want = oracle.top(q, 10);
        REQUIRE(got.size() == want.size());
        for (std::size_t j = 0; j < got.size(); ++j) {
            CHECK(got[j].doc_id == want[j].doc_id);
            CHECK(std::fabs(got[j].score - want[j].score) <= 1e-9);
        }
    }
}

TEST_CASE("adding a matching query term never lowers a document's score")
{
    const auto docs = qexp::testing::random_corpus(100, 8);
    const auto idx = build_index(docs, AnalyzerConfig::english());
    std::mt19937_64 rng(5);
    for (int i = 0; i < 50; ++i) {
        const auto& doc = docs[rng() % docs.size()];
        auto q = analyze(qexp::testing::random_query(rng), idx.analyzer());
        const double before = bm25_score(idx, {}, q, doc.doc_id);
        const auto doc_terms = analyze(doc.contents, idx.analyzer());
        q.push_back(doc_terms[rng() % doc_terms.size()]);
        CHECK(bm25_score(idx, {}, q, doc.doc_id) >= before);
    }
}

TEST_CASE("batch search equals sequential searches, in input order")
{
    const auto idx = build_index(qexp::testing::random_corpus(150, 2), AnalyzerConfig::english());
    std::mt19937_64 rng(4);
    std::vector<Query> queries;
    for (int i = 0; i < 50; ++i) queries.push_back({"q" + std::to_string(i), qexp::testing::random_query(rng)});

    const auto batch = batch_search(idx, {}, queries, 100, 3);
    REQUIRE(batch.size() == queries.size());
    for (std::size_t i = 0; i < queries.size(); ++i)
        CHECK(batch[i] == search(idx, {}, queries[i].text, 100, queries[i].query_id));

    auto permuted = queries;
    std::shuffle(permuted.begin(), permuted.end(), rng);
    const auto batch2 = batch_search(idx, {}, permuted, 100);
    for (std::size_t i = 0; i < permuted.size(); ++i) {
        const auto orig = std::stoul(permuted[i].query_id.substr(1));
        CHECK(batch2[i] == batch[orig]);
    }

    CHECK(batch_search(idx, {}, std::vector{queries[0]}, 100)[0] == batch[0]);
    queries.push_back(queries[3]);
    CHECK_THROWS_AS(batch_search(idx, {}, queries, 100), InvalidArgument);
}

TEST_CASE("run files: format and read back")
{
    TempDir tmp;
    std::vector<RankedList> run{{"q1", {{"dA", 2.5}, {"dB", 1.0 / 3.0}}}, {"q2", {{"dC", 0.1}}}};
    const auto text = format_run(run, "bm25");
    CHECK(text == "q1 Q0 dA 1 2.500000 bm25\nq1 Q0 dB 2 0.333333 bm25\nq2 Q0 dC 1 0.100000 bm25\n");
    write_run(tmp / "r.run", run, "bm25");
    const auto back = read_run(tmp / "r.run");
    REQUIRE(back.size() == 2);
    CHECK(back[0].query_id == "q1");
    CHECK(back[0].entries[1].doc_id == "dB");
    CHECK(back[0].entries[1].score == doctest::Approx(0.333333));

    std::vector<Query> qs{{"1", "what is bm25"}, {"2", "cats"}};
    write_queries_tsv(tmp / "q.tsv", qs);
    const auto qs2 = read_queries_tsv(tmp / "q.tsv");
    REQUIRE(qs2.size() == 2);
    CHECK(qs2[0].text == "what is bm25");
}
