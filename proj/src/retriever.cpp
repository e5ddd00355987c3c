#include "qexp/retriever.hpp"

#include "binary_io.hpp"
#include "qexp/error.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>
#include <unordered_map>

namespace qexp {

namespace {

struct QueryTerm {
    std::string term;
    double count;
};

// Unique terms in first-occurrence order with their occurrence counts.
std::vector<QueryTerm> count_terms(std::span<const std::string> terms)
{
    std::vector<QueryTerm> out;
    std::unordered_map<std::string_view, std::size_t> slot;
    for (const auto& t : terms) {
        const auto [it, inserted] = slot.emplace(t, out.size());
        if (inserted)
            out.push_back({t, 1.0});
        else
            out[it->second].count += 1.0;
    }
    return out;
}

double length_norm(const InvertedIndex& index, const Bm25Params& params, std::uint32_t doc)
{
    const double dl = index.doc_lengths()[doc];
    return params.k1 * (1.0 - params.b + params.b * dl / index.avg_doc_length());
}

} // namespace

std::string compose_query(std::string_view query, std::string_view expansion)
{
    if (query.empty()) throw InvalidArgument("compose_query: empty query");
    std::string out;
    for (int i = 0; i < kQueryRepeats; ++i) {
        if (i > 0) out += ' ';
        out += query;
    }
    if (!expansion.empty()) {
        out += ' ';
        out += expansion;
    }
    return out;
}

double bm25_idf(std::size_t doc_count, std::size_t df)
{
    const double n = static_cast<double>(doc_count);
    const double d = static_cast<double>(df);
    return std::log(1.0 + (n - d + 0.5) / (d + 0.5));
}

double bm25_score(const InvertedIndex& index, const Bm25Params& params, std::span<const std::string> query_terms,
                  std::string_view doc_id)
{
    const auto doc = index.find_doc(doc_id);
    if (!doc) throw InvalidArgument("bm25_score: unknown doc_id " + std::string(doc_id));
    const double norm = length_norm(index, params, *doc);
    double score = 0.0;
    for (const auto& [term, qtf] : count_terms(query_terms)) {
        const auto list = index.postings(term);
        const auto it = std::lower_bound(list.begin(), list.end(), *doc,
                                         [](const Posting& p, std::uint32_t d) { return p.doc < d; });
        if (it == list.end() || it->doc != *doc) continue;
        const double idf = bm25_idf(index.doc_count(), list.size());
        const double tf = it->tf;
        score += qtf * idf * (tf / (tf + norm));
    }
    return score;
}

RankedList search(const InvertedIndex& index, const Bm25Params& params, std::string_view query, std::size_t k,
                  std::string query_id)
{
    if (k < 1) throw InvalidArgument("search: k must be >= 1");
    RankedList result{std::move(query_id), {}};
    const auto terms = analyze(query, index.analyzer());
    if (terms.empty() || index.doc_count() == 0) return result;

    // Term-at-a-time accumulation; per document the summation order matches bm25_score.
    std::vector<double> acc(index.doc_count(), 0.0);
    std::vector<std::uint8_t> touched(index.doc_count(), 0);
    for (const auto& [term, qtf] : count_terms(terms)) {
        const auto list = index.postings(term);
        if (list.empty()) continue;
        const double idf = bm25_idf(index.doc_count(), list.size());
        for (const auto& p : list) {
            const double tf = p.tf;
            acc[p.doc] += qtf * idf * (tf / (tf + length_norm(index, params, p.doc)));
            touched[p.doc] = 1;
        }
    }

    std::vector<std::uint32_t> cand;
    for (std::uint32_t d = 0; d < acc.size(); ++d)
        if (touched[d] && acc[d] > 0.0) cand.push_back(d);
    const auto by_rank = [&](std::uint32_t a, std::uint32_t b) {
        if (acc[a] != acc[b]) return acc[a] > acc[b];
        return a < b; // doc index order is doc_id order
    };
    const std::size_t top = std::min(k, cand.size());
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(top), cand.end(), by_rank);
    result.entries.reserve(top);
    for (std::size_t i = 0; i < top; ++i) result.entries.push_back({index.doc_ids()[cand[i]], acc[cand[i]]});
    return result;
}

std::vector<RankedList> batch_search(const InvertedIndex& index, const Bm25Params& params,
                                     std::span<const Query> queries, std::size_t k, unsigned workers)
{
    std::set<std::string_view> seen;
    for (const auto& q : queries)
        if (!seen.insert(q.query_id).second) throw InvalidArgument("batch_search: duplicate query_id " + q.query_id);

    std::vector<RankedList> out(queries.size());
    workers = std::max(1U, std::min<unsigned>(workers, static_cast<unsigned>(std::max<std::size_t>(queries.size(), 1))));
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < queries.size(); i = next++)
            out[i] = search(index, params, queries[i].text, k, queries[i].query_id);
    };
    if (workers == 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (unsigned w = 0; w < workers; ++w) pool.emplace_back(worker);
    }
    return out;
}

std::vector<Query> read_queries_tsv(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw IoError("cannot open queries " + path.string());
    std::vector<Query> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos || tab == 0)
            throw FormatError(path.string() + ":" + std::to_string(line_no) + ": expected \"qid<TAB>text\"");
        out.push_back({line.substr(0, tab), line.substr(tab + 1)});
    }
    return out;
}

void write_queries_tsv(const std::filesystem::path& path, std::span<const Query> queries)
{
    std::string out;
    for (const auto& q : queries) out += q.query_id + '\t' + q.text + '\n';
    detail::write_file(path, out);
}

std::string format_run(std::span<const RankedList> run, std::string_view run_tag)
{
    std::string out;
    char score[64];
    for (const auto& list : run) {
        for (std::size_t i = 0; i < list.entries.size(); ++i) {
            std::snprintf(score, sizeof(score), "%.6f", list.entries[i].score);
            out += list.query_id;
            out += " Q0 ";
            out += list.entries[i].doc_id;
            out += ' ';
            out += std::to_string(i + 1);
            out += ' ';
            out += score;
            out += ' ';
            out += run_tag;
            out += '\n';
        }
    }
    return out;
}

void write_run(const std::filesystem::path& path, std::span<const RankedList> run, std::string_view run_tag)
{
    detail::write_file(path, format_run(run, run_tag));
}

std::vector<RankedList> read_run(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw IoError("cannot open run " + path.string());
    struct Row {
        ScoredDoc doc;
        long rank;
    };
    std::vector<std::string> order;
    std::unordered_map<std::string, std::vector<Row>> rows;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        std::istringstream ss(line);
        std::string qid, q0, doc, tag;
        long rank = 0;
        double score = 0.0;
        if (!(ss >> qid)) continue;
        if (!(ss >> q0 >> doc >> rank >> score >> tag))
            throw FormatError(path.string() + ":" + std::to_string(line_no) + ": malformed run line");
        auto [it, inserted] = rows.try_emplace(qid);
        if (inserted) order.push_back(qid);
        it->second.push_back({{doc, score}, rank});
    }
    std::vector<RankedList> run;
    for (const auto& qid : order) {
        auto& list = rows[qid];
        std::stable_sort(list.begin(), list.end(), [](const Row& a, const Row& b) {
            if (a.doc.score != b.doc.score) return a.doc.score > b.doc.score;
            return a.rank < b.rank;
        });
        RankedList rl{qid, {}};
        std::set<std::string_view> seen;
        for (auto& r : list) {
            if (!seen.insert(r.doc.doc_id).second)
                throw FormatError(path.string() + ": duplicate doc " + r.doc.doc_id + " for query " + qid);
            rl.entries.push_back(r.doc);
        }
        run.push_back(std::move(rl));
    }
    return run;
}

} // namespace qexp
