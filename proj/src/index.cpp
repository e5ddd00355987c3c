#include "qexp/index.hpp"

#include "binary_io.hpp"
#include "qexp/error.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <numeric>
#include <thread>
#include <unordered_map>

namespace qexp {

namespace {

constexpr std::string_view kIndexMagic = "QEXPIDX\n";
constexpr std::uint32_t kIndexVersion = 1;

} // namespace

InvertedIndex::InvertedIndex(AnalyzerConfig analyzer, std::vector<std::string> doc_ids,
                             std::vector<std::uint32_t> doc_lengths, PostingMap postings)
    : analyzer_(std::move(analyzer)),
      doc_ids_(std::move(doc_ids)),
      doc_lengths_(std::move(doc_lengths)),
      postings_(std::move(postings))
{
    if (doc_ids_.size() != doc_lengths_.size())
        throw InvalidArgument("doc_ids and doc_lengths differ in size");
    if (!doc_ids_.empty()) {
        const double total = std::accumulate(doc_lengths_.begin(), doc_lengths_.end(), 0.0);
        avg_doc_length_ = total / static_cast<double>(doc_ids_.size());
    }
}

std::optional<std::uint32_t> InvertedIndex::find_doc(std::string_view doc_id) const
{
    const auto it = std::lower_bound(doc_ids_.begin(), doc_ids_.end(), doc_id);
    if (it == doc_ids_.end() || *it != doc_id) return std::nullopt;
    return static_cast<std::uint32_t>(it - doc_ids_.begin());
}

std::span<const Posting> InvertedIndex::postings(std::string_view term) const
{
    const auto it = postings_.find(term);
    if (it == postings_.end()) return {};
    return it->second;
}

InvertedIndex build_index(std::vector<Document> docs, const AnalyzerConfig& config, unsigned workers)
{
    std::sort(docs.begin(), docs.end(),
              [](const Document& a, const Document& b) { return a.doc_id < b.doc_id; });
    for (std::size_t i = 0; i < docs.size(); ++i) {
        if (docs[i].doc_id.empty()) throw FormatError("document with empty id");
        if (i > 0 && docs[i].doc_id == docs[i - 1].doc_id)
            throw FormatError("duplicate doc_id: " + docs[i].doc_id);
    }

    // Per-document term counts, computed in parallel; merged in doc order below.
    std::vector<std::vector<std::pair<std::string, std::uint32_t>>> counts(docs.size());
    std::vector<std::uint32_t> lengths(docs.size());
    auto analyze_range = [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            const auto terms = analyze(docs[i].contents, config);
            lengths[i] = static_cast<std::uint32_t>(terms.size());
            std::unordered_map<std::string, std::uint32_t> tf;
            for (const auto& t : terms) ++tf[t];
            counts[i].assign(tf.begin(), tf.end());
        }
    };
    workers = std::max(1U, std::min<unsigned>(workers, static_cast<unsigned>(std::max<std::size_t>(docs.size(), 1))));
    if (workers == 1) {
        analyze_range(0, docs.size());
    } else {
        std::vector<std::jthread> pool;
        const std::size_t chunk = (docs.size() + workers - 1) / workers;
        for (unsigned w = 0; w < workers; ++w) {
            const std::size_t begin = std::min(docs.size(), w * chunk);
            const std::size_t end = std::min(docs.size(), begin + chunk);
            pool.emplace_back(analyze_range, begin, end);
        }
    }

    PostingMap postings;
    std::vector<std::string> ids;
    ids.reserve(docs.size());
    for (std::size_t i = 0; i < docs.size(); ++i) {
        for (auto& [term, tf] : counts[i]) postings[term].push_back({static_cast<std::uint32_t>(i), tf});
        ids.push_back(std::move(docs[i].doc_id));
    }
    return InvertedIndex(config, std::move(ids), std::move(lengths), std::move(postings));
}

std::vector<Document> read_corpus_jsonl(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw IoError("cannot open corpus " + path.string());
    std::vector<Document> docs;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const auto where = path.string() + ":" + std::to_string(line_no);
        nlohmann::json obj;
        try {
            obj = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw FormatError(where + ": invalid JSON: " + e.what());
        }
        if (!obj.is_object() || !obj.contains("id") || !obj.contains("contents") || !obj["id"].is_string() ||
            !obj["contents"].is_string())
            throw FormatError(where + ": expected object with string fields \"id\" and \"contents\"");
        docs.push_back({obj["id"].get<std::string>(), obj["contents"].get<std::string>()});
    }
    if (in.bad()) throw IoError("read failed: " + path.string() + " after line " + std::to_string(line_no));
    return docs;
}

void write_corpus_jsonl(const std::filesystem::path& path, const std::vector<Document>& docs)
{
    std::string out;
    for (const auto& d : docs) {
        out += nlohmann::json{{"id", d.doc_id}, {"contents", d.contents}}.dump();
        out += '\n';
    }
    detail::write_file(path, out);
}

std::string serialize_index(const InvertedIndex& index)
{
    detail::ByteWriter w;
    w.raw(kIndexMagic);
    w.pod(kIndexVersion);

    const auto& a = index.analyzer();
    w.pod(static_cast<std::uint8_t>(a.lowercase));
    w.pod(static_cast<std::uint8_t>(a.stemmer));
    w.pod(static_cast<std::uint32_t>(a.stopwords.size()));
    for (const auto& s : a.stopwords) w.str(s);

    w.pod(static_cast<std::uint64_t>(index.doc_count()));
    for (std::size_t i = 0; i < index.doc_count(); ++i) {
        w.str(index.doc_ids()[i]);
        w.pod(index.doc_lengths()[i]);
    }

    w.pod(static_cast<std::uint64_t>(index.postings().size()));
    for (const auto& [term, list] : index.postings()) {
        w.str(term);
        w.pod(static_cast<std::uint32_t>(list.size()));
        for (const auto& p : list) {
            w.pod(p.doc);
            w.pod(p.tf);
        }
    }
    w.seal();
    return w.bytes();
}

InvertedIndex deserialize_index(std::string_view bytes)
{
    const std::string what = "index file";
    if (bytes.size() < kIndexMagic.size() || bytes.substr(0, kIndexMagic.size()) != kIndexMagic)
        throw FormatError("not an index file (bad magic header)");
    {
        detail::ByteReader peek(bytes.substr(kIndexMagic.size()), what);
        const auto version = peek.pod<std::uint32_t>();
        if (version != kIndexVersion)
            throw FormatError("index file version mismatch: found " + std::to_string(version) + ", expected " +
                              std::to_string(kIndexVersion));
    }
    detail::ByteReader r(detail::verify_sealed(bytes, what), what);
    r.raw(kIndexMagic.size());
    r.pod<std::uint32_t>();

    AnalyzerConfig analyzer;
    analyzer.lowercase = r.pod<std::uint8_t>() != 0;
    const auto stem = r.pod<std::uint8_t>();
    if (stem > static_cast<std::uint8_t>(Stemmer::porter)) r.fail("unknown stemmer");
    analyzer.stemmer = static_cast<Stemmer>(stem);
    const auto nstop = r.pod<std::uint32_t>();
    for (std::uint32_t i = 0; i < nstop; ++i) analyzer.stopwords.insert(r.str());

    const auto n = r.pod<std::uint64_t>();
    if (n > r.remaining()) r.fail("document count exceeds file size");
    std::vector<std::string> ids;
    std::vector<std::uint32_t> lengths;
    ids.reserve(n);
    lengths.reserve(n);
    for (std::uint64_t i = 0; i < n; ++i) {
        ids.push_back(r.str());
        lengths.push_back(r.pod<std::uint32_t>());
        if (ids.back().empty() || (i > 0 && !(ids[i - 1] < ids[i]))) r.fail("doc ids not strictly ascending");
    }

    std::vector<std::uint64_t> recount(n, 0);
    PostingMap postings;
    const auto nterms = r.pod<std::uint64_t>();
    for (std::uint64_t t = 0; t < nterms; ++t) {
        auto term = r.str();
        const auto len = r.pod<std::uint32_t>();
        std::vector<Posting> list;
        list.reserve(std::min<std::size_t>(len, r.remaining() / 8));
        for (std::uint32_t i = 0; i < len; ++i) {
            Posting p{r.pod<std::uint32_t>(), r.pod<std::uint32_t>()};
            if (p.doc >= n || p.tf == 0 || (!list.empty() && list.back().doc >= p.doc))
                r.fail("invalid posting for term '" + term + "'");
            recount[p.doc] += p.tf;
            list.push_back(p);
        }
        if (!postings.emplace(std::move(term), std::move(list)).second) r.fail("duplicate term");
    }
    if (r.remaining() != 0) r.fail("trailing bytes");
    for (std::uint64_t i = 0; i < n; ++i)
        if (recount[i] != lengths[i]) r.fail("document length does not match postings for " + ids[i]);

    return InvertedIndex(std::move(analyzer), std::move(ids), std::move(lengths), std::move(postings));
}

void save_index(const InvertedIndex& index, const std::filesystem::path& path)
{
    detail::write_file(path, serialize_index(index));
}

InvertedIndex load_index(const std::filesystem::path& path)
{
    return deserialize_index(detail::read_file(path));
}

} // namespace qexp
