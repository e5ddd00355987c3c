#pragma once

#include "qexp/analyzer.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace qexp {

struct Document {
    std::string doc_id;
    std::string contents;
};

// `doc` indexes InvertedIndex::doc_ids(), which is sorted ascending, so
// posting lists ordered by `doc` are ordered by doc_id.
struct Posting {
    std::uint32_t doc;
    std::uint32_t tf;

    bool operator==(const Posting&) const = default;
};

using PostingMap = std::map<std::string, std::vector<Posting>, std::less<>>;

// Immutable once built; safe to share across threads.
class InvertedIndex {
public:
    InvertedIndex() = default;
    InvertedIndex(AnalyzerConfig analyzer, std::vector<std::string> doc_ids,
                  std::vector<std::uint32_t> doc_lengths, PostingMap postings);

    const AnalyzerConfig& analyzer() const { return analyzer_; }
    std::size_t doc_count() const { return doc_ids_.size(); }
    double avg_doc_length() const { return avg_doc_length_; }

    const std::vector<std::string>& doc_ids() const { return doc_ids_; }
    const std::vector<std::uint32_t>& doc_lengths() const { return doc_lengths_; }
    const PostingMap& postings() const { return postings_; }

    std::optional<std::uint32_t> find_doc(std::string_view doc_id) const;
    std::span<const Posting> postings(std::string_view term) const;
    std::size_t document_frequency(std::string_view term) const { return postings(term).size(); }

    bool operator==(const InvertedIndex&) const = default;

private:
    AnalyzerConfig analyzer_ = AnalyzerConfig::english();
    std::vector<std::string> doc_ids_;
    std::vector<std::uint32_t> doc_lengths_;
    PostingMap postings_;
    double avg_doc_length_ = 0.0;
};

// Throws FormatError naming the id when doc ids repeat or are empty. The
// result does not depend on `workers`.
InvertedIndex build_index(std::vector<Document> docs, const AnalyzerConfig& config,
                          unsigned workers = 1);

// JSON lines with "id" and "contents"; parse failures name the line number.
std::vector<Document> read_corpus_jsonl(const std::filesystem::path& path);
void write_corpus_jsonl(const std::filesystem::path& path, const std::vector<Document>& docs);

void save_index(const InvertedIndex& index, const std::filesystem::path& path);
InvertedIndex load_index(const std::filesystem::path& path);

// Serialized form used by save_index.
std::string serialize_index(const InvertedIndex& index);
InvertedIndex deserialize_index(std::string_view bytes);

} // namespace qexp
