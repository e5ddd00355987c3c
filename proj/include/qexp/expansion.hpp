#pragma once

#include "qexp/error.hpp"
#include "qexp/index.hpp"
#include "qexp/retriever.hpp"

#include <chrono>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace qexp {

enum class PromptMode { zero, few };

struct ChatPrompt {
    std::string system;
    std::string user;
};

struct PromptTemplate {
    std::string system;
    std::vector<std::pair<std::string, std::string>> exemplars; // (query, passage)
    std::string instruction;

    static PromptTemplate zero_shot();
    static PromptTemplate few_shot(); // the four fixed Query2Doc exemplars
};

inline constexpr std::string_view kDefaultInstruction = "Please write a passage (60-100 words) that answers it.";

// Exemplar blocks (few mode) followed by "Query: {q}" and the instruction line.
// An instruction override replaces only the final line. Throws on empty q.
ChatPrompt build_prompt(std::string_view query, PromptMode mode,
                        std::optional<std::string_view> instruction = std::nullopt);

// Single line: CR/LF/TAB become spaces, whitespace runs collapse, ends trimmed.
std::string normalize_expansion(std::string_view text);

inline constexpr std::size_t kMaxExpansionWords = 128;

// Keeps the first `max_words` whitespace-separated words.
std::string truncate_words(std::string_view text, std::size_t max_words = kMaxExpansionWords);

struct ExpansionRecord {
    std::string query_id;
    std::string query;
    std::string e1; // zero-shot
    std::string e2; // few-shot

    bool operator==(const ExpansionRecord&) const = default;
};

std::string to_jsonl(const ExpansionRecord& record);
// Text fields are normalized and truncated on ingest.
std::vector<ExpansionRecord> read_expansions(const std::filesystem::path& path);

// ---- remote teacher -------------------------------------------------------

struct TeacherEndpointConfig {
    std::string base_url = "https://api.deepseek.com/v1";
    std::string model_name = "deepseek-chat";
    std::string api_key_env = "TEACHER_API_KEY";
    int max_retries = 3;
    double timeout_seconds = 60.0;
    double initial_backoff_seconds = 1.0; // doubles after every failed attempt
};

class TeacherError : public Error {
public:
    TeacherError(const std::string& message, int status, int attempts)
        : Error(message), status_(status), attempts_(attempts)
    {
    }
    int status() const { return status_; } // 0 for transport failures
    int attempts() const { return attempts_; }

private:
    int status_;
    int attempts_;
};

struct FetchResult {
    std::string text;
    int attempts = 0;
};

// Chat-completions JSON body: {"model", "messages":[system, user]}; no sampling fields.
std::string chat_request_body(const TeacherEndpointConfig& cfg, const ChatPrompt& prompt);

// POSTs to {base_url}/chat/completions, retrying transport errors, 429 and 5xx
// with exponential backoff. Returns the normalized assistant message.
FetchResult fetch_expansion(const TeacherEndpointConfig& cfg, const ChatPrompt& prompt);

// ---- offline teacher ------------------------------------------------------

// Deterministic stand-in teacher: expands a query from the terms of its
// top-ranked document.
class ToyTeacher {
public:
    explicit ToyTeacher(const InvertedIndex& index, Bm25Params params = {});

    // 60-100 words for a non-empty retrieval; few mode prepends the query terms.
    // Returns the query itself when nothing is retrieved.
    std::string expand(std::string_view query, PromptMode mode) const;

    static constexpr std::size_t kMinWords = 60;
    static constexpr std::size_t kMaxWords = 100;
    static constexpr std::size_t kTermsPerPassage = 10;

private:
    const InvertedIndex& index_;
    Bm25Params params_;
    std::vector<std::vector<std::pair<std::string_view, std::uint32_t>>> forward_; // doc -> (term, tf)
};

// ---- dataset generation ---------------------------------------------------

// Produces the raw expansion for (query text, mode); may throw.
using ExpansionSource = std::function<std::string(const Query&, PromptMode)>;

ExpansionSource toy_source(const ToyTeacher& teacher);
ExpansionSource api_source(TeacherEndpointConfig cfg, std::optional<std::string> instruction = std::nullopt);

struct GenerationFailure {
    std::string query_id;
    std::string message;
};

struct GenerationSummary {
    std::size_t generated = 0;
    std::size_t already_present = 0;
    std::vector<GenerationFailure> failures;
    std::vector<std::pair<std::string, double>> latency_seconds; // per generated query

    double total_latency() const;
    double mean_latency() const;
};

// Appends one record per query not already in `out_path`, in input order.
// Failures are collected and do not stop the run.
GenerationSummary generate_dataset(std::span<const Query> queries, const ExpansionSource& source,
                                   const std::filesystem::path& out_path, unsigned concurrency = 4);

} // namespace qexp
