#include "qexp/expansion.hpp"
#include "test_util.hpp"

#include <doctest.h>
#include <httplib.h>
#include <json.hpp>

#include <atomic>
#include <fstream>
#include <sstream>
#include <thread>

using namespace qexp;
using qexp::testing::TempDir;

namespace {

std::string golden(const std::string& name)
{
    std::ifstream in(std::string(QEXP_GOLDEN_DIR) + "/" + name);
    REQUIRE(in);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Chat-completions stand-in; `respond` picks (status, content) per attempt.
class MockTeacher {
public:
    explicit MockTeacher(std::function<std::pair<int, std::string>(int)> respond) : respond_(std::move(respond))
    {
        server_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
            last_body_ = req.body;
            last_auth_ = req.get_header_value("Authorization");
            const int n = ++calls_;
            auto [status, content] = respond_(n);
            res.status = status;
            if (status == 200) {
                nlohmann::json j{{"choices", {{{"message", {{"role", "assistant"}, {"content", content}}}}}}};
                res.set_content(j.dump(), "application/json");
            } else {
                res.set_content("{\"error\":\"busy\"}", "application/json");
            }
        });
        port_ = server_.bind_to_any_port("127.0.0.1");
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
    }
    ~MockTeacher()
    {
        server_.stop();
        thread_.join();
    }

    TeacherEndpointConfig config(int max_retries) const
    {
        TeacherEndpointConfig cfg;
        cfg.base_url = "http://127.0.0.1:" + std::to_string(port_) + "/v1";
        cfg.model_name = "mock-model";
        cfg.api_key_env = "QEXP_TEST_KEY";
        cfg.max_retries = max_retries;
        cfg.timeout_seconds = 5;
        cfg.initial_backoff_seconds = 0.001;
        return cfg;
    }
    int calls() const { return calls_; }
    std::string last_body() const { return last_body_; }
    std::string last_auth() const { return last_auth_; }

private:
    std::function<std::pair<int, std::string>(int)> respond_;
    httplib::Server server_;
    std::thread thread_;
    int port_ = 0;
    std::atomic<int> calls_{0};
    std::string last_body_;
    std::string last_auth_;
};

InvertedIndex engineered_index()
{
    return build_index({{"rel", "volcano volcano lava magma eruption crater basalt ash vent caldera pyroclastic"},
                        {"off", "violin sonata orchestra cello bow concerto tempo melody rhythm chord"},
                        {"mix", "volcano tour tickets bus hotel breakfast"},
                        {"other", "garden tomato soil compost seed harvest"}},
                       AnalyzerConfig::english());
}

} // namespace

TEST_CASE("zero-shot prompt matches the golden template")
{
    const auto p = build_prompt("what is bm25", PromptMode::zero);
    CHECK(p.user == "Query: what is bm25\nPlease write a passage (60-100 words) that answers it.");
    CHECK(p.user == golden("prompt_zero_user.txt"));
    CHECK(p.system == golden("prompt_system.txt"));
}

TEST_CASE("few-shot prompt matches the golden template")
{
    const auto p = build_prompt("what is bm25", PromptMode::few);
    CHECK(p.user == golden("prompt_few_user.txt"));
    std::size_t queries = 0, passages = 0;
    std::istringstream in(p.user);
    for (std::string line; std::getline(in, line);) {
        queries += line.rfind("Query: ", 0) == 0;
        passages += line.rfind("Passage: ", 0) == 0;
    }
    CHECK(queries == 5); // four exemplars plus the target
    CHECK(passages == 4);
    CHECK(PromptTemplate::few_shot().exemplars.size() == 4);
    CHECK(PromptTemplate::zero_shot().exemplars.empty());
    CHECK(build_prompt("x", PromptMode::zero).system == build_prompt("x", PromptMode::few).system);
}

TEST_CASE("instruction override replaces only the last line")
{
    const auto p = build_prompt("q", PromptMode::zero, "Please write a passage (60-100 words) in Chinese that answers it.");
    CHECK(p.user == "Query: q\nPlease write a passage (60-100 words) in Chinese that answers it.");
    CHECK_THROWS_AS(build_prompt("", PromptMode::zero), InvalidArgument);
}

TEST_CASE("normalization")
{
    CHECK(normalize_expansion("a\nb\tc") == "a b c");
    CHECK(normalize_expansion("  x  ") == "x");
    CHECK(normalize_expansion("a \r\n\r\n  b") == "a b");
    CHECK(normalize_expansion("") == "");
}

TEST_CASE("normalization is idempotent and yields a single line")
{
    std::mt19937_64 rng(99);
    const std::string alphabet = "ab \t\n\r  xy.\v";
    for (int trial = 0; trial < 500; ++trial) {
        std::string s;
        const auto len = rng() % 40;
        for (std::size_t i = 0; i < len; ++i) s += alphabet[rng() % alphabet.size()];
        const auto once = normalize_expansion(s);
        CHECK(normalize_expansion(once) == once);
        CHECK(once.find_first_of("\n\t\r") == std::string::npos);
        CHECK(once.find("  ") == std::string::npos);
    }
}

TEST_CASE("truncate_words keeps the first 128 words")
{
    std::string long_text;
    for (int i = 0; i < 200; ++i) long_text += "w" + std::to_string(i) + " ";
    const auto cut = truncate_words(long_text);
    std::istringstream in(cut);
    std::vector<std::string> words{std::istream_iterator<std::string>(in), {}};
    CHECK(words.size() == 128);
    CHECK(words.back() == "w127");
    CHECK(truncate_words("a  b", 5) == "a b");
}

TEST_CASE("chat request body carries model and two messages, no sampling fields")
{
    TeacherEndpointConfig cfg;
    cfg.model_name = "m";
    const auto j = nlohmann::json::parse(chat_request_body(cfg, build_prompt("q", PromptMode::zero)));
    CHECK(j["model"] == "m");
    REQUIRE(j["messages"].size() == 2);
    CHECK(j["messages"][0]["role"] == "system");
    CHECK(j["messages"][1]["role"] == "user");
    CHECK_FALSE(j.contains("temperature"));
    CHECK_FALSE(j.contains("top_p"));
    CHECK_FALSE(j.contains("max_tokens"));
}

TEST_CASE("fetch_expansion normalizes the completion and sends the key from the environment")
{
    MockTeacher mock([](int) { return std::pair<int, std::string>{200, "hello\nworld"}; });
    ::setenv("QEXP_TEST_KEY", "sekret", 1);
    const auto r = fetch_expansion(mock.config(2), build_prompt("q", PromptMode::zero));
    ::unsetenv("QEXP_TEST_KEY");
    CHECK(r.text == "hello world");
    CHECK(r.attempts == 1);
    CHECK(mock.last_auth() == "Bearer sekret");
    CHECK(nlohmann::json::parse(mock.last_body())["model"] == "mock-model");
}

TEST_CASE("fetch_expansion retries server errors")
{
    MockTeacher mock([](int n) { return std::pair<int, std::string>{n <= 2 ? 500 : 200, "ok"}; });
    const auto r = fetch_expansion(mock.config(3), build_prompt("q", PromptMode::zero));
    CHECK(r.text == "ok");
    CHECK(r.attempts == 3);
}

TEST_CASE("fetch_expansion gives up after max_retries")
{
    MockTeacher mock([](int) { return std::pair<int, std::string>{429, ""}; });
    try {
        fetch_expansion(mock.config(2), build_prompt("q", PromptMode::zero));
        FAIL("expected TeacherError");
    } catch (const TeacherError& e) {
        CHECK(e.status() == 429);
        CHECK(e.attempts() == 3);
    }
    CHECK(mock.calls() == 3);
}

TEST_CASE("fetch_expansion fails fast on client errors and empty completions")
{
    MockTeacher bad([](int) { return std::pair<int, std::string>{400, ""}; });
    try {
        fetch_expansion(bad.config(5), build_prompt("q", PromptMode::zero));
        FAIL("expected TeacherError");
    } catch (const TeacherError& e) {
        CHECK(e.status() == 400);
        CHECK(e.attempts() == 1);
    }
    MockTeacher empty([](int) { return std::pair<int, std::string>{200, " \n\t "}; });
    CHECK_THROWS_AS(fetch_expansion(empty.config(1), build_prompt("q", PromptMode::zero)), TeacherError);

    TeacherEndpointConfig nowhere;
    nowhere.base_url = "http://127.0.0.1:1/v1";
    nowhere.max_retries = 1;
    nowhere.initial_backoff_seconds = 0.001;
    nowhere.timeout_seconds = 1;
    try {
        fetch_expansion(nowhere, build_prompt("q", PromptMode::zero));
        FAIL("expected TeacherError");
    } catch (const TeacherError& e) {
        CHECK(e.status() == 0);
        CHECK(e.attempts() == 2);
    }
}

TEST_CASE("toy teacher is deterministic and bounded")
{
    const auto idx = build_index(qexp::testing::random_corpus(200, 6), AnalyzerConfig::english());
    const ToyTeacher teacher(idx);
    std::mt19937_64 rng(2);
    for (int i = 0; i < 30; ++i) {
        const auto q = qexp::testing::random_query(rng);
        for (const auto mode : {PromptMode::zero, PromptMode::few}) {
            const auto a = teacher.expand(q, mode);
            CHECK(a == teacher.expand(q, mode));
            std::istringstream in(a);
            const auto words = std::distance(std::istream_iterator<std::string>(in), {});
            CHECK(words >= 1);
            CHECK(words <= 100);
        }
    }
    CHECK(teacher.expand("unmatchedword", PromptMode::zero) == "unmatchedword");
}

TEST_CASE("few mode prepends the query terms")
{
    const auto idx = engineered_index();
    const ToyTeacher teacher(idx);
    const auto zero = teacher.expand("volcano crater", PromptMode::zero);
    const auto few = teacher.expand("volcano crater", PromptMode::few);
    CHECK(few.rfind("volcano crater ", 0) == 0);
    CHECK(few.substr(std::string("volcano crater ").size()) == zero);
}

TEST_CASE("toy expansion beats an unrelated-document expansion")
{
    const auto idx = engineered_index();
    const ToyTeacher teacher(idx);
    const std::string q = "volcano";
    const auto toy = teacher.expand(q, PromptMode::zero);
    const std::string unrelated = "violin sonata orchestra cello bow concerto tempo melody rhythm chord";
    const auto with_toy = analyze(compose_query(q, toy), idx.analyzer());
    const auto with_unrelated = analyze(compose_query(q, unrelated), idx.analyzer());
    CHECK(bm25_score(idx, {}, with_toy, "rel") >= bm25_score(idx, {}, with_unrelated, "rel"));
    CHECK(search(idx, {}, compose_query(q, toy), 1).entries[0].doc_id == "rel");
}

TEST_CASE("generate_dataset with the toy teacher, then resume")
{
    TempDir tmp;
    const auto idx = engineered_index();
    const ToyTeacher teacher(idx);
    const std::vector<Query> queries{{"1", "volcano"}, {"2", "violin concerto"}, {"3", "garden seed"}};
    const auto out = tmp / "exp.jsonl";

    const auto first = generate_dataset(queries, toy_source(teacher), out);
    CHECK(first.generated == 3);
    CHECK(first.failures.empty());
    CHECK(first.latency_seconds.size() == 3);
    const auto records = read_expansions(out);
    REQUIRE(records.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(records[i].query_id == queries[i].query_id);
        CHECK_FALSE(records[i].e1.empty());
        CHECK_FALSE(records[i].e2.empty());
    }

    const auto again = generate_dataset(queries, toy_source(teacher), out);
    CHECK(again.generated == 0);
    CHECK(again.already_present == 3);
    CHECK(read_expansions(out).size() == 3);
}

TEST_CASE("generate_dataset collects failures and keeps going")
{
    TempDir tmp;
    std::vector<Query> queries;
    for (int i = 0; i < 8; ++i) queries.push_back({"q" + std::to_string(i), "query " + std::to_string(i)});
    const ExpansionSource flaky = [](const Query& q, PromptMode mode) -> std::string {
        if (q.query_id == "q2" || q.query_id == "q5") throw Error("mock API failure");
        return std::string(mode == PromptMode::zero ? "zero\tshot " : "few\nshot ") + q.text;
    };
    const auto summary = generate_dataset(queries, flaky, tmp / "exp.jsonl", 4);
    CHECK(summary.generated == 6);
    REQUIRE(summary.failures.size() == 2);
    CHECK(summary.failures[0].query_id == "q2");
    CHECK(summary.failures[1].query_id == "q5");
    const auto records = read_expansions(tmp / "exp.jsonl");
    REQUIRE(records.size() == 6);
    CHECK(records[0].e1 == "zero shot query 0");
    CHECK(records[0].e2 == "few shot query 0");
    CHECK(records[2].query_id == "q3"); // input order preserved
    CHECK(summary.total_latency() == doctest::Approx(summary.mean_latency() * 6).epsilon(1e-9));
}

TEST_CASE("generate_dataset through the HTTP teacher")
{
    TempDir tmp;
    MockTeacher mock([](int n) { return std::pair<int, std::string>{200, "passage\nnumber " + std::to_string(n)}; });
    const std::vector<Query> queries{{"a", "first"}, {"b", "second"}};
    const auto summary = generate_dataset(queries, api_source(mock.config(0)), tmp / "exp.jsonl", 1);
    CHECK(summary.generated == 2);
    const auto records = read_expansions(tmp / "exp.jsonl");
    REQUIRE(records.size() == 2);
    CHECK(records[0].e1 == "passage number 1");
    CHECK(records[0].e2 == "passage number 2");
}

TEST_CASE("toy teacher latency is below a remote teacher that takes 100 ms")
{
    TempDir tmp;
    MockTeacher slow([](int n) {
        std::this_thread::sleep_for(std::chrono::milliseconds(100));
        return std::pair<int, std::string>{200, "passage " + std::to_string(n)};
    });
    const auto idx = engineered_index();
    const ToyTeacher teacher(idx);
    const std::vector<Query> queries{{"1", "volcano"}, {"2", "garden seed"}};
    const auto toy = generate_dataset(queries, toy_source(teacher), tmp / "toy.jsonl", 1);
    const auto api = generate_dataset(queries, api_source(slow.config(0)), tmp / "api.jsonl", 1);
    CHECK(api.mean_latency() >= 0.2); // two requests per query
    CHECK(toy.mean_latency() < api.mean_latency());
    CHECK(toy.total_latency() == doctest::Approx(toy.mean_latency() * 2).epsilon(1e-9));
}
