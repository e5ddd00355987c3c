#include "qexp/synthetic.hpp"

#include "qexp/error.hpp"
#include "rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>
#include <set>

namespace qexp {

namespace {

using detail::Rng;

// Pronounceable pseudo-words that survive analysis unchanged.
std::vector<std::string> make_words(std::size_t count, Rng& rng, std::set<std::string>& used)
{
    static const char* onset[] = {"b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "t", "v", "z", "br", "dr", "gr", "kr", "pl", "tr", "st"};
    static const char* vowel[] = {"a", "o", "u", "i", "e"};
    static const char* coda[] = {"k", "m", "n", "p", "r", "t", "x", "d", "g", "v"};
    const auto english = AnalyzerConfig::english();
    std::vector<std::string> out;
    while (out.size() < count) {
        std::string w;
        const std::size_t syllables = rng.between(2, 3);
        for (std::size_t s = 0; s < syllables; ++s) {
            w += onset[rng.below(std::size(onset))];
            w += vowel[rng.below(std::size(vowel))];
        }
        w += coda[rng.below(std::size(coda))];
        const auto analyzed = analyze(w, english);
        if (analyzed.size() != 1 || analyzed[0] != w) continue;
        if (!used.insert(w).second) continue;
        out.push_back(std::move(w));
    }
    return out;
}

struct Zipf {
    std::vector<double> cumulative;
    explicit Zipf(std::size_t n)
    {
        double total = 0;
        for (std::size_t i = 0; i < n; ++i) {
            total += 1.0 / std::pow(static_cast<double>(i + 1), 0.8);
            cumulative.push_back(total);
        }
        for (auto& c : cumulative) c /= total;
    }
    std::size_t sample(Rng& rng) const
    {
        const auto it = std::lower_bound(cumulative.begin(), cumulative.end(), rng.unit());
        return std::min<std::size_t>(static_cast<std::size_t>(it - cumulative.begin()), cumulative.size() - 1);
    }
};

std::string join(const std::vector<std::string>& words)
{
    std::string out;
    for (const auto& w : words) {
        if (!out.empty()) out += ' ';
        out += w;
    }
    return out;
}

} // namespace

SyntheticCorpus generate_synthetic(const SyntheticConfig& config)
{
    constexpr std::size_t kDocsPerTopic = 6;
    if (config.topics == 0) throw InvalidArgument("synthetic corpus needs at least one topic");
    if (config.documents < config.topics * kDocsPerTopic)
        throw InvalidArgument("synthetic corpus: documents must be >= 6 * topics");

    Rng rng(config.seed);
    std::set<std::string> used;
    const auto filler = make_words(config.filler_vocabulary, rng, used);
    const Zipf zipf(filler.size());
    auto filler_words = [&](std::vector<std::string>& words, std::size_t n) {
        for (std::size_t i = 0; i < n; ++i) words.push_back(filler[zipf.sample(rng)]);
    };

    struct Topic {
        std::vector<std::string> query_words;
        std::vector<std::string> topic_words;
    };
    std::vector<Topic> topics;
    for (std::size_t t = 0; t < config.topics; ++t)
        topics.push_back({make_words(4, rng, used), make_words(10, rng, used)});

    SyntheticCorpus corpus;
    std::vector<std::pair<std::vector<std::string>, int>> graded; // (words, grade) per topic doc, -1 = filler
    std::vector<std::size_t> owner;
    for (std::size_t t = 0; t < topics.size(); ++t) {
        const auto& tp = topics[t];
        const auto& other = topics[(t + 1 + rng.below(topics.size())) % topics.size()];

        std::vector<std::string> primary = tp.query_words;
        for (std::size_t i = 0; i < 6; ++i) primary.insert(primary.end(), 2, tp.topic_words[i]);
        filler_words(primary, rng.between(6, 10));
        graded.emplace_back(std::move(primary), 3);

        for (int k = 0; k < 2; ++k) {
            std::vector<std::string> doc;
            const std::size_t n = rng.between(3, 5);
            for (std::size_t i = 0; i < n; ++i) doc.insert(doc.end(), rng.between(1, 2), tp.topic_words[rng.below(10)]);
            if (rng.unit() < 0.5) doc.push_back(tp.query_words[rng.below(4)]);
            filler_words(doc, rng.between(8, 14));
            graded.emplace_back(std::move(doc), 2);
        }

        std::vector<std::string> marginal{tp.topic_words[rng.below(10)], tp.topic_words[rng.below(10)]};
        filler_words(marginal, 10);
        graded.emplace_back(std::move(marginal), 1);

        for (int k = 0; k < 2; ++k) {
            std::vector<std::string> doc;
            doc.insert(doc.end(), rng.between(1, 3), tp.query_words[0]);
            doc.insert(doc.end(), rng.between(1, 3), tp.query_words[1]);
            for (std::size_t i = 0, n = rng.between(0, 2); i < n; ++i) doc.push_back(tp.topic_words[rng.below(10)]);
            for (std::size_t i = 0, n = rng.between(1, 3); i < n; ++i) doc.push_back(other.topic_words[rng.below(10)]);
            filler_words(doc, rng.between(6, 12));
            graded.emplace_back(std::move(doc), 0);
        }
        owner.insert(owner.end(), kDocsPerTopic, t);
    }
    while (graded.size() < config.documents) {
        std::vector<std::string> doc;
        filler_words(doc, rng.between(10, 20));
        if (rng.unit() < 0.3) doc.push_back(topics[rng.below(topics.size())].topic_words[rng.below(10)]);
        if (rng.unit() < 0.3) doc.push_back(topics[rng.below(topics.size())].query_words[rng.below(4)]);
        graded.emplace_back(std::move(doc), -1);
        owner.push_back(topics.size());
    }

    // Random doc ids so that id order carries no topic signal.
    std::vector<std::size_t> id_of(graded.size());
    for (std::size_t i = 0; i < id_of.size(); ++i) id_of[i] = i;
    rng.shuffle(id_of);
    char buf[32];
    for (std::size_t i = 0; i < graded.size(); ++i) {
        auto& [words, grade] = graded[i];
        rng.shuffle(words);
        std::snprintf(buf, sizeof(buf), "D%05zu", id_of[i]);
        corpus.docs.push_back({buf, join(words)});
        if (grade >= 0) {
            std::snprintf(buf, sizeof(buf), "%03zu", owner[i]);
            corpus.qrels.add(std::string("tr-") + buf, corpus.docs.back().doc_id, grade);
            corpus.qrels.add(std::string("te-") + buf, corpus.docs.back().doc_id, grade);
        }
    }
    std::sort(corpus.docs.begin(), corpus.docs.end(),
              [](const Document& a, const Document& b) { return a.doc_id < b.doc_id; });

    for (std::size_t t = 0; t < topics.size(); ++t) {
        const auto& q = topics[t].query_words;
        std::snprintf(buf, sizeof(buf), "%03zu", t);
        corpus.train_queries.push_back({std::string("tr-") + buf, q[0] + " " + q[1] + " " + q[2]});
        corpus.test_queries.push_back({std::string("te-") + buf, q[0] + " " + q[1] + " " + q[3]});
    }
    return corpus;
}

void write_synthetic(const SyntheticCorpus& corpus, const std::filesystem::path& dir)
{
    std::filesystem::create_directories(dir);
    write_corpus_jsonl(dir / "corpus.jsonl", corpus.docs);
    write_queries_tsv(dir / "train_queries.tsv", corpus.train_queries);
    write_queries_tsv(dir / "test_queries.tsv", corpus.test_queries);
    write_qrels(dir / "qrels.txt", corpus.qrels);
}

} // namespace qexp
