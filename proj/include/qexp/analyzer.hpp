#pragma once

#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace qexp {

enum class Stemmer { none, porter };

struct AnalyzerConfig {
    bool lowercase = true;
    std::set<std::string> stopwords;
    Stemmer stemmer = Stemmer::porter;

    // English defaults: 33-word stopword list, Porter stemming.
    static AnalyzerConfig english();

    bool operator==(const AnalyzerConfig&) const = default;
};

// The fixed 33-word English stopword list shipped with the library (version 1).
const std::set<std::string>& default_stopwords();

// Splits on maximal runs of letters/digits (UTF-8 aware), then lowercases,
// removes stopwords and stems, in that order.
std::vector<std::string> analyze(std::string_view text, const AnalyzerConfig& config);

// Raw token pass only: maximal letter/digit runs, optionally lowercased.
std::vector<std::string> tokenize(std::string_view text, bool lowercase);

// Porter (1980) suffix stripper, applied to a single lowercase ASCII word.
// Words containing non-ASCII bytes are returned unchanged.
std::string porter_stem(std::string_view word);

} // namespace qexp
