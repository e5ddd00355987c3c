#include "qexp/analyzer.hpp"

#include <cstdint>

namespace qexp {
namespace {

struct DecodedChar {
    char32_t cp;
    std::size_t len;
};

// Malformed sequences decode as U+FFFD covering one byte.
DecodedChar decode_utf8(std::string_view s, std::size_t i)
{
    const auto b0 = static_cast<unsigned char>(s[i]);
    if (b0 < 0x80) return {b0, 1};
    std::size_t len = 0;
    char32_t cp = 0;
    if ((b0 & 0xE0) == 0xC0) {
        len = 2;
        cp = b0 & 0x1F;
    } else if ((b0 & 0xF0) == 0xE0) {
        len = 3;
        cp = b0 & 0x0F;
    } else if ((b0 & 0xF8) == 0xF0) {
        len = 4;
        cp = b0 & 0x07;
    } else {
        return {0xFFFD, 1};
    }
    if (i + len > s.size()) return {0xFFFD, 1};
    for (std::size_t k = 1; k < len; ++k) {
        const auto bk = static_cast<unsigned char>(s[i + k]);
        if ((bk & 0xC0) != 0x80) return {0xFFFD, 1};
        cp = (cp << 6) | (bk & 0x3F);
    }
    return {cp, len};
}

void encode_utf8(char32_t cp, std::string& out)
{
    if (cp < 0x80) {
        out.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
        out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else if (cp < 0x10000) {
        out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else {
        out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    }
}

// Letter/digit classification without a Unicode database: ASCII alphanumerics,
// plus every non-ASCII code point outside the common punctuation, symbol and
// space blocks.
bool is_word_char(char32_t cp)
{
    if (cp < 0x80) {
        return (cp >= '0' && cp <= '9') || (cp >= 'a' && cp <= 'z') || (cp >= 'A' && cp <= 'Z');
    }
    if (cp <= 0xBF) return cp == 0xAA || cp == 0xB5 || cp == 0xBA; // Latin-1 punctuation/symbols
    if (cp == 0xD7 || cp == 0xF7) return false;
    if (cp >= 0x2000 && cp <= 0x2BFF) return false; // punctuation, arrows, math, box drawing
    if (cp >= 0x3000 && cp <= 0x303F) return false; // CJK symbols and punctuation
    if (cp >= 0xFE30 && cp <= 0xFE4F) return false;
    if (cp >= 0xFF00 && cp <= 0xFF0F) return false;
    if (cp >= 0xFF1A && cp <= 0xFF20) return false;
    if (cp >= 0xFF3B && cp <= 0xFF40) return false;
    if (cp >= 0xFF5B && cp <= 0xFF65) return false;
    if (cp == 0xFEFF || cp == 0xFFFD) return false;
    if (cp >= 0x1F000 && cp <= 0x1FAFF) return false; // emoji and pictographs
    return true;
}

char32_t to_lower(char32_t cp)
{
    if (cp >= 'A' && cp <= 'Z') return cp + 32;
    if (cp < 0x80) return cp;
    if ((cp >= 0xC0 && cp <= 0xDE) && cp != 0xD7) return cp + 32;      // Latin-1
    if (cp >= 0x100 && cp <= 0x17F && cp != 0x130 && cp != 0x138 && cp != 0x149 && cp != 0x178) {
        // Latin Extended-A alternates upper/lower, with a parity shift at 0x139..0x148 and 0x179..0x17E.
        const bool shifted = (cp >= 0x139 && cp <= 0x148) || (cp >= 0x179 && cp <= 0x17E);
        const bool upper = shifted ? (cp % 2 == 1) : (cp % 2 == 0);
        return upper ? cp + 1 : cp;
    }
    if (cp == 0x178) return 0xFF;
    if (cp >= 0x391 && cp <= 0x3A9 && cp != 0x3A2) return cp + 32;     // Greek
    if (cp >= 0x410 && cp <= 0x42F) return cp + 32;                    // Cyrillic
    if (cp >= 0x400 && cp <= 0x40F) return cp + 80;
    return cp;
}

} // namespace

const std::set<std::string>& default_stopwords()
{
    static const std::set<std::string> words{
        "a",    "an",   "and",  "are",   "as",    "at",    "be",   "but",   "by",
        "for",  "if",   "in",   "into",  "is",    "it",    "no",   "not",   "of",
        "on",   "or",   "such", "that",  "the",   "their", "then", "there", "these",
        "they", "this", "to",   "was",   "will",  "with"};
    return words;
}

AnalyzerConfig AnalyzerConfig::english()
{
    return AnalyzerConfig{true, default_stopwords(), Stemmer::porter};
}

std::vector<std::string> tokenize(std::string_view text, bool lowercase)
{
    std::vector<std::string> tokens;
    std::string current;
    std::size_t i = 0;
    while (i < text.size()) {
        const auto [cp, len] = decode_utf8(text, i);
        i += len;
        if (is_word_char(cp)) {
            encode_utf8(lowercase ? to_lower(cp) : cp, current);
        } else if (!current.empty()) {
            tokens.push_back(std::move(current));
            current.clear();
        }
    }
    if (!current.empty()) tokens.push_back(std::move(current));
    return tokens;
}

std::vector<std::string> analyze(std::string_view text, const AnalyzerConfig& config)
{
    auto raw = tokenize(text, config.lowercase);
    std::vector<std::string> terms;
    terms.reserve(raw.size());
    for (auto& tok : raw) {
        if (config.stopwords.contains(tok)) continue;
        if (config.stemmer == Stemmer::porter)
            terms.push_back(porter_stem(tok));
        else
            terms.push_back(std::move(tok));
    }
    return terms;
}

} // namespace qexp
