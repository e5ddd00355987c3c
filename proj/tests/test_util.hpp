#pragma once

#include "qexp/index.hpp"

#include <filesystem>
#include <unistd.h>
#include <random>
#include <string>
#include <vector>

namespace qexp::testing {

inline std::vector<std::string> word_pool(std::size_t n)
{
    static const char* syll[] = {"ka", "lo", "mi", "ne", "ru", "ta", "vo", "zi", "pe", "su", "do", "ga"};
    std::vector<std::string> words;
    for (std::size_t i = 0; words.size() < n; ++i) {
        std::string w;
        std::size_t x = i;
        do {
            w += syll[x % 12];
            x /= 12;
        } while (x > 0);
        w += "x";
        words.push_back(w);
    }
    return words;
}

// Random documents over a Zipf-ish vocabulary; ids are zero-padded.
inline std::vector<Document> random_corpus(std::size_t docs, std::uint64_t seed, std::size_t vocab = 300)
{
    std::mt19937_64 rng(seed);
    const auto words = word_pool(vocab);
    std::vector<double> weights(vocab);
    for (std::size_t i = 0; i < vocab; ++i) weights[i] = 1.0 / static_cast<double>(i + 1);
    std::discrete_distribution<std::size_t> pick(weights.begin(), weights.end());
    std::vector<Document> out;
    for (std::size_t d = 0; d < docs; ++d) {
        const auto len = 3 + rng() % 40;
        std::string text;
        for (std::size_t i = 0; i < len; ++i) {
            if (i) text += (rng() % 7 == 0) ? ", the " : " ";
            text += words[pick(rng)];
        }
        char id[32];
        std::snprintf(id, sizeof(id), "d%05zu", d);
        out.push_back({id, text});
    }
    return out;
}

inline std::string random_query(std::mt19937_64& rng, std::size_t vocab = 300)
{
    const auto words = word_pool(vocab);
    const auto len = 1 + rng() % 4;
    std::string q;
    for (std::size_t i = 0; i < len; ++i) {
        if (i) q += ' ';
        q += words[rng() % vocab];
    }
    return q;
}

struct TempDir {
    std::filesystem::path path;
    TempDir()
    {
        static int counter = 0;
        path = std::filesystem::temp_directory_path() /
               ("qexp_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
    std::filesystem::path operator/(const std::string& name) const { return path / name; }
};

} // namespace qexp::testing
