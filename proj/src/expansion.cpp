#include "qexp/expansion.hpp"

#include <httplib.h>
#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <condition_variable>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <numeric>
#include <regex>
#include <set>
#include <sstream>
#include <thread>

namespace qexp {

namespace {

constexpr std::string_view kSystemText =
    "You are an assistant that generates detailed passages to answer search queries. Your responses should be "
    "informative, directly address the query, and provide comprehensive explanations or solutions.";

} // namespace

PromptTemplate PromptTemplate::zero_shot()
{
    return {std::string(kSystemText), {}, std::string(kDefaultInstruction)};
}

PromptTemplate PromptTemplate::few_shot()
{
    PromptTemplate t = zero_shot();
    t.exemplars = {
        {"what state is this zip code 85282",
         "Welcome to TEMPE, AZ 85282. 85282 is a rural zip code in Tempe, Arizona. The population is primarily "
         "white and mostly single. At $200,200 the average home value here is a bit higher than average for the "
         "Phoenix-Mesa-Scottsdale metro area, so this probably is not the place to look for housing bargains. "
         "85282 Zip code is located in the Mountain time zone at 33 degrees latitude (Fun Fact: this is the same "
         "latitude as Damascus, Syria) and -112 degrees longitude."},
        {"why is gibbs model of reflection good",
         "In this reflection, I am going to use Gibbs (1988) Reflective Cycle. This model is a recognised "
         "framework for my reflection. Gibbs (1988) consists of six stages to complete one cycle which is able to "
         "improve my nursing practice continuously and learning from the experience for better practice in the "
         "future. In conclusion of my reflective assignment, I mention the model that I chose, Gibbs (1988) "
         "Reflective Cycle as my framework of my reflective. I state the reasons why I am choosing the model as "
         "well as some discussion on the importance of doing reflection in nursing practice."},
        {"what does a thousand pardons means",
         "Oh, that is all right, that is all right, give us a rest; never mind about the direction, hang the "
         "direction - I beg pardon, I beg a thousand pardons, I am not well today; pay no attention when I "
         "soliloquize, it is an old habit, an old, bad habit, and hard to get rid of when one's digestion is all "
         "disordered with eating food that was raised forever and ever before he was born; good land! A man "
         "cannot keep his functions regular on spring chickens thirteen hundred years old."},
        {"what is a macro warning",
         "Macro virus warning appears when no macros exist in the file in Word. When you open a Microsoft Word "
         "2002 document or template, you may receive the following macro virus warning, even though the document "
         "or template does not contain macros: C:\\<path>\\<file name> contains macros. Macros may contain "
         "viruses."},
    };
    return t;
}

ChatPrompt build_prompt(std::string_view query, PromptMode mode, std::optional<std::string_view> instruction)
{
    if (query.empty()) throw InvalidArgument("build_prompt: empty query");
    const auto tmpl = mode == PromptMode::zero ? PromptTemplate::zero_shot() : PromptTemplate::few_shot();
    std::string user;
    for (const auto& [q, passage] : tmpl.exemplars) user += "Query: " + q + "\nPassage: " + passage + "\n";
    user += "Query: ";
    user += query;
    user += '\n';
    user += instruction ? std::string(*instruction) : tmpl.instruction;
    return {tmpl.system, std::move(user)};
}

std::string normalize_expansion(std::string_view text)
{
    std::string out;
    out.reserve(text.size());
    bool pending_space = false;
    for (const char c : text) {
        if (c == ' ' || c == '\n' || c == '\t' || c == '\r' || c == '\v' || c == '\f') {
            pending_space = !out.empty();
            continue;
        }
        if (pending_space) out += ' ';
        pending_space = false;
        out += c;
    }
    return out;
}

std::string truncate_words(std::string_view text, std::size_t max_words)
{
    std::istringstream in{std::string(text)};
    std::string word;
    std::string out;
    for (std::size_t n = 0; n < max_words && in >> word; ++n) {
        if (!out.empty()) out += ' ';
        out += word;
    }
    return out;
}

std::string to_jsonl(const ExpansionRecord& r)
{
    return nlohmann::json{{"query_id", r.query_id}, {"query", r.query}, {"e1", r.e1}, {"e2", r.e2}}.dump();
}

std::vector<ExpansionRecord> read_expansions(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw IoError("cannot open expansions " + path.string());
    std::vector<ExpansionRecord> out;
    std::set<std::string> seen;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const auto where = path.string() + ":" + std::to_string(line_no);
        try {
            const auto j = nlohmann::json::parse(line);
            ExpansionRecord r{j.at("query_id").get<std::string>(), j.at("query").get<std::string>(),
                              truncate_words(normalize_expansion(j.at("e1").get<std::string>())),
                              truncate_words(normalize_expansion(j.at("e2").get<std::string>()))};
            if (!seen.insert(r.query_id).second) throw FormatError("duplicate query_id " + r.query_id);
            out.push_back(std::move(r));
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(where + ": " + e.what());
        } catch (const FormatError& e) {
            throw FormatError(where + ": " + e.what());
        }
    }
    return out;
}

// ---- remote teacher -------------------------------------------------------

std::string chat_request_body(const TeacherEndpointConfig& cfg, const ChatPrompt& prompt)
{
    nlohmann::json body{{"model", cfg.model_name},
                        {"messages",
                         {{{"role", "system"}, {"content", prompt.system}},
                          {{"role", "user"}, {"content", prompt.user}}}}};
    return body.dump();
}

namespace {

struct ParsedUrl {
    std::string origin; // scheme://host[:port]
    std::string path;   // without trailing slash
};

ParsedUrl parse_base_url(const std::string& url)
{
    static const std::regex pattern(R"(^(https?://[^/]+)(/.*)?$)");
    std::smatch m;
    if (!std::regex_match(url, m, pattern)) throw InvalidArgument("invalid teacher base_url: " + url);
    std::string path = m[2].matched ? m[2].str() : "";
    while (!path.empty() && path.back() == '/') path.pop_back();
    return {m[1].str(), path};
}

bool retryable(int status)
{
    return status == 408 || status == 429 || status >= 500;
}

} // namespace

FetchResult fetch_expansion(const TeacherEndpointConfig& cfg, const ChatPrompt& prompt)
{
    const auto url = parse_base_url(cfg.base_url);
    httplib::Client client(url.origin);
    const auto secs = static_cast<time_t>(cfg.timeout_seconds);
    const auto usecs = static_cast<time_t>((cfg.timeout_seconds - static_cast<double>(secs)) * 1e6);
    client.set_connection_timeout(secs, usecs);
    client.set_read_timeout(secs, usecs);
    client.set_write_timeout(secs, usecs);

    httplib::Headers headers;
    if (const char* key = std::getenv(cfg.api_key_env.c_str()); key && *key)
        headers.emplace("Authorization", std::string("Bearer ") + key);

    const auto body = chat_request_body(cfg, prompt);
    const auto endpoint = url.path + "/chat/completions";
    const int max_attempts = std::max(0, cfg.max_retries) + 1;
    int last_status = 0;
    std::string last_error;
    for (int attempt = 1; attempt <= max_attempts; ++attempt) {
        if (attempt > 1) {
            const double delay = cfg.initial_backoff_seconds * std::pow(2.0, attempt - 2);
            std::this_thread::sleep_for(std::chrono::duration<double>(delay));
        }
        const auto res = client.Post(endpoint, headers, body, "application/json");
        if (!res) {
            last_status = 0;
            last_error = "transport error: " + httplib::to_string(res.error());
            continue;
        }
        last_status = res->status;
        if (res->status != 200) {
            last_error = "HTTP " + std::to_string(res->status);
            if (!retryable(res->status))
                throw TeacherError("teacher request failed: " + last_error, res->status, attempt);
            continue;
        }
        std::string content;
        try {
            const auto j = nlohmann::json::parse(res->body);
            content = j.at("choices").at(0).at("message").at("content").get<std::string>();
        } catch (const nlohmann::json::exception& e) {
            throw TeacherError(std::string("malformed completion response: ") + e.what(), res->status, attempt);
        }
        auto text = normalize_expansion(content);
        if (text.empty()) throw TeacherError("empty completion", res->status, attempt);
        return {std::move(text), attempt};
    }
    throw TeacherError("teacher request failed after " + std::to_string(max_attempts) + " attempts: " + last_error,
                       last_status, max_attempts);
}

// ---- offline teacher ------------------------------------------------------

ToyTeacher::ToyTeacher(const InvertedIndex& index, Bm25Params params)
    : index_(index), params_(params), forward_(index.doc_count())
{
    for (const auto& [term, list] : index.postings())
        for (const auto& p : list) forward_[p.doc].emplace_back(term, p.tf);
}

std::string ToyTeacher::expand(std::string_view query, PromptMode mode) const
{
    const auto top = search(index_, params_, query, 1);
    if (top.entries.empty()) return std::string(query);
    const auto doc = *index_.find_doc(top.entries.front().doc_id);

    struct Weighted {
        std::string_view term;
        double weight;
    };
    std::vector<Weighted> terms;
    for (const auto& [term, tf] : forward_[doc])
        terms.push_back({term, tf * bm25_idf(index_.doc_count(), index_.document_frequency(term))});
    std::sort(terms.begin(), terms.end(), [](const Weighted& a, const Weighted& b) {
        if (a.weight != b.weight) return a.weight > b.weight;
        return a.term < b.term;
    });
    terms.resize(std::min(terms.size(), kTermsPerPassage));

    std::vector<std::string> words;
    if (mode == PromptMode::few) words = analyze(query, index_.analyzer());
    for (std::size_t i = 0; i < kMinWords && words.size() < kMaxWords; ++i)
        words.emplace_back(terms[i % terms.size()].term);

    std::string out;
    for (const auto& w : words) {
        if (!out.empty()) out += ' ';
        out += w;
    }
    return out;
}

// ---- dataset generation ---------------------------------------------------

ExpansionSource toy_source(const ToyTeacher& teacher)
{
    return [&teacher](const Query& q, PromptMode mode) { return teacher.expand(q.text, mode); };
}

ExpansionSource api_source(TeacherEndpointConfig cfg, std::optional<std::string> instruction)
{
    return [cfg = std::move(cfg), instruction = std::move(instruction)](const Query& q, PromptMode mode) {
        std::optional<std::string_view> instr;
        if (instruction) instr = *instruction;
        return fetch_expansion(cfg, build_prompt(q.text, mode, instr)).text;
    };
}

double GenerationSummary::total_latency() const
{
    double total = 0.0;
    for (const auto& [qid, s] : latency_seconds) total += s;
    return total;
}

double GenerationSummary::mean_latency() const
{
    return latency_seconds.empty() ? 0.0 : total_latency() / static_cast<double>(latency_seconds.size());
}

GenerationSummary generate_dataset(std::span<const Query> queries, const ExpansionSource& source,
                                   const std::filesystem::path& out_path, unsigned concurrency)
{
    GenerationSummary summary;
    std::set<std::string> existing;
    if (std::filesystem::exists(out_path)) {
        for (const auto& r : read_expansions(out_path)) existing.insert(r.query_id);
    } else if (out_path.has_parent_path()) {
        std::filesystem::create_directories(out_path.parent_path());
    }

    std::vector<const Query*> pending;
    std::set<std::string> queued;
    for (const auto& q : queries) {
        if (existing.contains(q.query_id) || !queued.insert(q.query_id).second) {
            ++summary.already_present;
            continue;
        }
        pending.push_back(&q);
    }

    std::ofstream out(out_path, std::ios::app);
    if (!out) throw IoError("cannot open for appending: " + out_path.string());

    struct Slot {
        bool done = false;
        std::optional<ExpansionRecord> record;
        std::optional<std::string> error;
        double seconds = 0.0;
    };
    std::vector<Slot> slots(pending.size());
    std::mutex mu;
    std::size_t next_to_write = 0;
    std::atomic<std::size_t> next_task{0};

    // Called with `mu` held: emits every finished slot that is next in input order.
    auto flush_ready = [&] {
        while (next_to_write < slots.size() && slots[next_to_write].done) {
            auto& s = slots[next_to_write];
            const auto& qid = pending[next_to_write]->query_id;
            if (s.record) {
                out << to_jsonl(*s.record) << '\n';
                out.flush();
                ++summary.generated;
                summary.latency_seconds.emplace_back(qid, s.seconds);
            } else {
                summary.failures.push_back({qid, *s.error});
            }
            ++next_to_write;
        }
    };

    auto worker = [&] {
        for (std::size_t i = next_task++; i < pending.size(); i = next_task++) {
            const auto& q = *pending[i];
            Slot result;
            const auto start = std::chrono::steady_clock::now();
            try {
                ExpansionRecord r{q.query_id, q.text, truncate_words(normalize_expansion(source(q, PromptMode::zero))),
                                  truncate_words(normalize_expansion(source(q, PromptMode::few)))};
                if (r.e1.empty() || r.e2.empty()) throw Error("empty expansion");
                result.record = std::move(r);
            } catch (const std::exception& e) {
                result.error = e.what();
            }
            result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
            result.done = true;
            std::lock_guard lock(mu);
            slots[i] = std::move(result);
            flush_ready();
        }
    };

    const unsigned workers = std::max(1U, std::min<unsigned>(concurrency, static_cast<unsigned>(pending.size())));
    if (workers == 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (unsigned w = 0; w < workers; ++w) pool.emplace_back(worker);
    }
    if (!out) throw IoError("write failed: " + out_path.string());
    return summary;
}

} // namespace qexp
