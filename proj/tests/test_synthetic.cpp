#include "qexp/error.hpp"
#include "qexp/synthetic.hpp"
#include "test_util.hpp"

#include <doctest.h>

#include <set>

using namespace qexp;

TEST_CASE("synthetic corpus is a pure function of its config")
{
    const SyntheticConfig cfg{.topics = 8, .documents = 120, .filler_vocabulary = 60, .seed = 3};
    const auto a = generate_synthetic(cfg);
    const auto b = generate_synthetic(cfg);
    REQUIRE(a.docs.size() == b.docs.size());
    for (std::size_t i = 0; i < a.docs.size(); ++i) {
        CHECK(a.docs[i].doc_id == b.docs[i].doc_id);
        CHECK(a.docs[i].contents == b.docs[i].contents);
    }
    auto other = cfg;
    other.seed = 4;
    CHECK(generate_synthetic(other).docs[0].contents != a.docs[0].contents);
}

TEST_CASE("synthetic corpus structure")
{
    const SyntheticConfig cfg{.topics = 10, .documents = 200, .filler_vocabulary = 80, .seed = 0};
    const auto c = generate_synthetic(cfg);
    CHECK(c.docs.size() == 200);
    CHECK(c.train_queries.size() == 10);
    CHECK(c.test_queries.size() == 10);
    std::set<std::string> ids;
    for (const auto& d : c.docs) ids.insert(d.doc_id);
    CHECK(ids.size() == c.docs.size());

    for (std::size_t t = 0; t < 10; ++t) {
        const auto& tr = c.train_queries[t];
        const auto& te = c.test_queries[t];
        const auto* jt = c.qrels.judgments(tr.query_id);
        const auto* je = c.qrels.judgments(te.query_id);
        REQUIRE(jt);
        REQUIRE(je);
        CHECK(*jt == *je);
        std::multiset<int> grades;
        for (const auto& [doc, g] : *jt) {
            CHECK(ids.count(doc) == 1);
            grades.insert(g);
        }
        CHECK(grades == std::multiset<int>{0, 0, 1, 2, 2, 3});
        // Train and test queries share their first two words only.
        const auto wt = analyze(tr.text, AnalyzerConfig::english());
        const auto we = analyze(te.text, AnalyzerConfig::english());
        REQUIRE(wt.size() == 3);
        REQUIRE(we.size() == 3);
        CHECK(wt[0] == we[0]);
        CHECK(wt[1] == we[1]);
        CHECK(wt[2] != we[2]);
    }
    CHECK_THROWS_AS(generate_synthetic({.topics = 10, .documents = 50}), InvalidArgument);
}

TEST_CASE("synthetic files round-trip through the readers")
{
    qexp::testing::TempDir dir;
    const auto c = generate_synthetic({.topics = 4, .documents = 40, .filler_vocabulary = 30, .seed = 1});
    write_synthetic(c, dir.path);
    CHECK(read_corpus_jsonl(dir / "corpus.jsonl").size() == 40);
    CHECK(read_queries_tsv(dir / "train_queries.tsv").size() == 4);
    CHECK(parse_qrels(dir / "qrels.txt").size() == c.qrels.size());
}
