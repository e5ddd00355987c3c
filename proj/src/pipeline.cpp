#include "qexp/pipeline.hpp"

#include "binary_io.hpp"
#include "qexp/error.hpp"
#include "qexp/index.hpp"

#include <json.hpp>
#include <openssl/evp.h>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <set>

namespace qexp {

using nlohmann::json;
using nlohmann::ordered_json;

// ---------------------------------------------------------------- hashing

std::string sha256_hex(std::string_view bytes)
{
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
        throw Error("SHA-256 computation failed");
    std::string hex;
    char buf[3];
    for (unsigned int i = 0; i < len; ++i) {
        std::snprintf(buf, sizeof(buf), "%02x", digest[i]);
        hex += buf;
    }
    return hex;
}

std::string sha256_file(const std::filesystem::path& path)
{
    return sha256_hex(detail::read_file(path));
}

// ----------------------------------------------------------------- config

namespace {

// Reads the keys of one JSON object and rejects any it was not asked about.
class Section {
public:
    Section(const json& j, std::string where) : j_(j), where_(std::move(where))
    {
        if (!j_.is_object()) throw FormatError("config: '" + where_ + "' must be an object");
    }

    // Call once every known key has been read.
    void done() const
    {
        for (const auto& [k, _] : j_.items())
            if (!seen_.count(k)) throw FormatError("config: unknown key '" + name(k) + "'");
    }

    const json* find(const std::string& key)
    {
        seen_.insert(key);
        const auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }

    std::optional<Section> section(const std::string& key)
    {
        const auto* v = find(key);
        if (!v) return std::nullopt;
        return std::optional<Section>(std::in_place, *v, name(key));
    }

    void get(const std::string& key, double& out)
    {
        if (const auto* v = find(key)) {
            if (!v->is_number()) type_error(key, "a number");
            out = v->get<double>();
        }
    }

    template <typename U>
        requires std::is_unsigned_v<U>
    void get(const std::string& key, U& out)
    {
        if (const auto* v = find(key)) {
            if (!v->is_number_unsigned()) type_error(key, "a non-negative integer");
            out = v->get<U>();
        }
    }

    void get(const std::string& key, int& out)
    {
        if (const auto* v = find(key)) {
            if (!v->is_number_integer()) type_error(key, "an integer");
            out = v->get<int>();
        }
    }

    void get(const std::string& key, bool& out)
    {
        if (const auto* v = find(key)) {
            if (!v->is_boolean()) type_error(key, "a boolean");
            out = v->get<bool>();
        }
    }

    void get(const std::string& key, std::string& out)
    {
        if (const auto* v = find(key)) {
            if (!v->is_string()) type_error(key, "a string");
            out = v->get<std::string>();
        }
    }

    // String value restricted to `choices`; returns the index of the match.
    std::optional<std::size_t> choice(const std::string& key, std::initializer_list<std::string_view> choices)
    {
        std::string s;
        if (!find(key)) return std::nullopt;
        get(key, s);
        std::size_t i = 0;
        std::string allowed;
        for (const auto c : choices) {
            if (c == s) return i;
            allowed += (i++ ? ", " : "") + std::string(c);
        }
        throw FormatError("config: '" + name(key) + "' must be one of: " + allowed);
    }

    std::string name(const std::string& key) const { return where_.empty() ? key : where_ + "." + key; }

private:
    [[noreturn]] void type_error(const std::string& key, const char* what) const
    {
        throw FormatError("config: '" + name(key) + "' must be " + what);
    }

    const json& j_;
    std::string where_;
    std::set<std::string> seen_;
};

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p)
{
    if (p.empty()) return {};
    const std::filesystem::path path(p);
    return path.is_absolute() || base.empty() ? path : base / path;
}

constexpr std::string_view kStemmers[] = {"none", "porter"};
constexpr std::string_view kGains[] = {"linear", "exponential"};
constexpr std::string_view kSources[] = {"toy", "api"};
constexpr std::string_view kArchitectures[] = {"bigram", "tiny_transformer"};
constexpr std::string_view kTargets[] = {"both", "e1", "e2"};
constexpr std::string_view kReferences[] = {"sft-init", "raw"};
constexpr std::string_view kTails[] = {"two_sided", "greater", "less"};

} // namespace

PipelineConfig parse_pipeline_config(std::string_view json_text, const std::filesystem::path& base_dir)
{
    json root;
    try {
        root = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw FormatError(std::string("config: invalid JSON: ") + e.what());
    }
    PipelineConfig cfg;
    Section top(root, "");

    if (auto s = top.section("paths")) {
        std::string corpus, train, test, qrels, workdir;
        s->get("corpus", corpus);
        s->get("train_queries", train);
        s->get("test_queries", test);
        s->get("qrels", qrels);
        s->get("workdir", workdir);
        cfg.paths = {resolve(base_dir, corpus), resolve(base_dir, train), resolve(base_dir, test),
                     resolve(base_dir, qrels), resolve(base_dir, workdir)};
        s->done();
    }
    if (auto s = top.section("analyzer")) {
        s->get("lowercase", cfg.analyzer.lowercase);
        if (auto i = s->choice("stemmer", {kStemmers[0], kStemmers[1]})) cfg.analyzer.stemmer = static_cast<Stemmer>(*i);
        if (const auto* sw = s->find("stopwords")) {
            if (sw->is_string() && *sw == "default") cfg.analyzer.stopwords = default_stopwords();
            else if (sw->is_array() && std::all_of(sw->begin(), sw->end(), [](const json& w) { return w.is_string(); }))
                cfg.analyzer.stopwords = sw->get<std::set<std::string>>();
            else
                throw FormatError("config: 'analyzer.stopwords' must be \"default\" or a list of strings");
        }
        s->done();
    }
    if (auto s = top.section("bm25")) {
        s->get("k1", cfg.bm25.k1);
        s->get("b", cfg.bm25.b);
        s->done();
    }
    top.get("retrieval_depth", cfg.retrieval_depth);
    if (auto s = top.section("metric")) {
        s->get("ndcg_cutoff", cfg.metric.ndcg_cutoff);
        s->get("binary_threshold", cfg.metric.binary_threshold);
        if (auto i = s->choice("gain", {kGains[0], kGains[1]})) cfg.metric.gain = static_cast<Gain>(*i);
        s->done();
    }
    if (auto s = top.section("teacher")) {
        if (auto i = s->choice("source", {kSources[0], kSources[1]})) cfg.source = static_cast<TeacherSource>(*i);
        s->get("base_url", cfg.endpoint.base_url);
        s->get("model", cfg.endpoint.model_name);
        s->get("api_key_env", cfg.endpoint.api_key_env);
        s->get("max_retries", cfg.endpoint.max_retries);
        s->get("timeout_seconds", cfg.endpoint.timeout_seconds);
        s->get("initial_backoff_seconds", cfg.endpoint.initial_backoff_seconds);
        s->get("concurrency", cfg.expand_concurrency);
        s->done();
    }
    if (auto s = top.section("pref")) {
        s->get("delta", cfg.pref.delta);
        s->done();
    }
    if (auto s = top.section("model")) {
        if (auto i = s->choice("architecture", {kArchitectures[0], kArchitectures[1]}))
            cfg.model.architecture = static_cast<Architecture>(*i);
        s->get("d_model", cfg.model.shape.d_model);
        s->get("layers", cfg.model.shape.layers);
        s->get("heads", cfg.model.shape.heads);
        s->get("context", cfg.model.shape.context);
        s->get("prompt_tokens", cfg.model.layout.prompt_tokens);
        s->get("max_new_tokens", cfg.model.max_new_tokens);
        s->done();
    }
    if (auto s = top.section("sft")) {
        s->get("lr", cfg.sft.lr);
        s->get("batch_size", cfg.sft.batch_size);
        s->get("grad_accum", cfg.sft.grad_accum);
        s->get("epochs", cfg.sft.epochs);
        s->get("warmup_fraction", cfg.sft.warmup_fraction);
        if (auto i = s->choice("targets", {kTargets[0], kTargets[1], kTargets[2]}))
            cfg.sft_targets = static_cast<SftTargets>(*i);
        s->done();
    }
    if (auto s = top.section("dpo")) {
        s->get("beta", cfg.dpo.beta);
        s->get("lr", cfg.dpo.lr);
        s->get("batch_size", cfg.dpo.batch_size);
        s->get("grad_accum", cfg.dpo.grad_accum);
        s->get("epochs", cfg.dpo.epochs);
        s->get("warmup_fraction", cfg.dpo.warmup_fraction);
        if (auto i = s->choice("reference", {kReferences[0], kReferences[1]}))
            cfg.reference = static_cast<ReferenceChoice>(*i);
        s->done();
    }
    if (auto s = top.section("ttest")) {
        if (auto i = s->choice("tail", {kTails[0], kTails[1], kTails[2]})) cfg.tail = static_cast<Tail>(*i);
        s->done();
    }
    top.get("seed", cfg.seed);
    top.get("workers", cfg.workers);
    top.done();

    if (!(cfg.dpo.beta > 0.0)) throw FormatError("config: 'dpo.beta' must be > 0");
    if (cfg.pref.delta < 0.0) throw FormatError("config: 'pref.delta' must be >= 0");
    if (cfg.retrieval_depth < 1) throw FormatError("config: 'retrieval_depth' must be >= 1");
    cfg.sft.seed = cfg.seed;
    cfg.dpo.seed = cfg.seed;
    cfg.pref.retrieval_k = cfg.retrieval_depth;
    cfg.pref.bm25 = cfg.bm25;
    cfg.pref.metric = cfg.metric;
    cfg.pref.workers = cfg.workers;
    return cfg;
}

PipelineConfig load_pipeline_config(const std::filesystem::path& path)
{
    return parse_pipeline_config(detail::read_file(path), path.parent_path());
}

namespace {

ordered_json analyzer_json(const AnalyzerConfig& a)
{
    return {{"lowercase", a.lowercase},
            {"stemmer", kStemmers[static_cast<int>(a.stemmer)]},
            {"stopwords", a.stopwords}};
}

ordered_json config_tree(const PipelineConfig& c)
{
    ordered_json j;
    j["paths"] = {{"corpus", c.paths.corpus.string()},
                  {"train_queries", c.paths.train_queries.string()},
                  {"test_queries", c.paths.test_queries.string()},
                  {"qrels", c.paths.qrels.string()},
                  {"workdir", c.paths.workdir.string()}};
    j["analyzer"] = analyzer_json(c.analyzer);
    j["bm25"] = {{"k1", c.bm25.k1}, {"b", c.bm25.b}};
    j["retrieval_depth"] = c.retrieval_depth;
    j["metric"] = {{"ndcg_cutoff", c.metric.ndcg_cutoff},
                   {"binary_threshold", c.metric.binary_threshold},
                   {"gain", kGains[static_cast<int>(c.metric.gain)]}};
    j["teacher"] = {{"source", kSources[static_cast<int>(c.source)]},
                    {"base_url", c.endpoint.base_url},
                    {"model", c.endpoint.model_name},
                    {"api_key_env", c.endpoint.api_key_env},
                    {"max_retries", c.endpoint.max_retries},
                    {"timeout_seconds", c.endpoint.timeout_seconds},
                    {"initial_backoff_seconds", c.endpoint.initial_backoff_seconds},
                    {"concurrency", c.expand_concurrency}};
    j["pref"] = {{"delta", c.pref.delta}};
    j["model"] = {{"architecture", kArchitectures[static_cast<int>(c.model.architecture)]},
                  {"d_model", c.model.shape.d_model},
                  {"layers", c.model.shape.layers},
                  {"heads", c.model.shape.heads},
                  {"context", c.model.shape.context},
                  {"prompt_tokens", c.model.layout.prompt_tokens},
                  {"max_new_tokens", c.model.max_new_tokens}};
    j["sft"] = {{"lr", c.sft.lr},
                {"batch_size", c.sft.batch_size},
                {"grad_accum", c.sft.grad_accum},
                {"epochs", c.sft.epochs},
                {"warmup_fraction", c.sft.warmup_fraction},
                {"targets", kTargets[static_cast<int>(c.sft_targets)]}};
    j["dpo"] = {{"beta", c.dpo.beta},
                {"lr", c.dpo.lr},
                {"batch_size", c.dpo.batch_size},
                {"grad_accum", c.dpo.grad_accum},
                {"epochs", c.dpo.epochs},
                {"warmup_fraction", c.dpo.warmup_fraction},
                {"reference", kReferences[static_cast<int>(c.reference)]}};
    j["ttest"] = {{"tail", kTails[static_cast<int>(c.tail)]}};
    j["seed"] = c.seed;
    j["workers"] = c.workers;
    return j;
}

} // namespace

std::string pipeline_config_json(const PipelineConfig& cfg)
{
    return config_tree(cfg).dump(2) + "\n";
}

// --------------------------------------------------------------- pipeline

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start)
{
    return std::chrono::duration<double>(Clock::now() - start).count();
}

struct StageOutput {
    std::vector<std::string> files; // relative to the stage directory
    std::optional<std::pair<double, std::size_t>> latency; // (total seconds, queries)
};

class StageRunner {
public:
    StageRunner(std::filesystem::path workdir, const PipelineLog& log) : workdir_(std::move(workdir)), log_(log) {}

    // Runs `body(dir)` unless a completed stage with the same key exists.
    // Returns the stage directory.
    template <typename Body>
    std::filesystem::path run(const std::string& name, const ordered_json& inputs, Body&& body)
    {
        const std::string key = sha256_hex(inputs.dump()).substr(0, 16);
        const auto dir = workdir_ / (name + "-" + key);
        const auto marker = dir / "stage.json";
        StageRecord rec{name, key, false, 0.0, {}, {}, {}, {}};
        const auto start = Clock::now();
        try {
            if (std::filesystem::exists(marker)) {
                const auto done = json::parse(detail::read_file(marker));
                for (const auto& a : done.at("artifacts")) {
                    const std::string rel = a.at("path");
                    const std::string expect = a.at("sha256");
                    if (!std::filesystem::exists(workdir_ / rel) || sha256_file(workdir_ / rel) != expect)
                        throw Error("cached artifact " + rel +
                                    " no longer matches its recorded hash; remove the stage directory to rebuild it");
                    rec.artifacts.push_back({rel, expect});
                }
                if (done.contains("latency_total")) {
                    rec.latency_total = done["latency_total"].get<double>();
                    rec.latency_queries = done["latency_queries"].get<std::size_t>();
                    rec.latency_mean = done["latency_mean"].get<double>();
                }
                rec.cached = true;
                say(name + ": cached (" + key + ")");
            } else {
                std::filesystem::create_directories(dir);
                say(name + ": running");
                const StageOutput out = body(dir);
                ordered_json done{{"stage", name}, {"key", key}, {"inputs", inputs}};
                done["artifacts"] = json::array();
                for (const auto& f : out.files) {
                    const auto rel = (std::filesystem::path(dir.filename()) / f).generic_string();
                    rec.artifacts.push_back({rel, sha256_file(dir / f)});
                    done["artifacts"].push_back({{"path", rel}, {"sha256", rec.artifacts.back().sha256}});
                }
                if (out.latency) {
                    const auto [total, n] = *out.latency;
                    rec.latency_total = total;
                    rec.latency_queries = n;
                    rec.latency_mean = n ? total / static_cast<double>(n) : 0.0;
                    done["latency_total"] = total;
                    done["latency_queries"] = n;
                    done["latency_mean"] = *rec.latency_mean;
                }
                detail::write_file(marker, done.dump(2) + "\n");
            }
        } catch (const PipelineError&) {
            throw;
        } catch (const std::exception& e) {
            throw PipelineError(name, e.what());
        }
        rec.seconds = seconds_since(start);
        if (rec.latency_mean)
            say(name + ": " + std::to_string(*rec.latency_queries) + " queries, " + fmt(*rec.latency_total) +
                " s total, " + fmt(*rec.latency_mean) + " s/query");
        records_.push_back(rec);
        return dir;
    }

    std::vector<StageRecord>& records() { return records_; }

    void say(const std::string& msg) const
    {
        if (log_) log_(msg);
    }

    static std::string fmt(double v)
    {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.6f", v);
        return buf;
    }

private:
    std::filesystem::path workdir_;
    const PipelineLog& log_;
    std::vector<StageRecord> records_;
};

struct Generated {
    std::string query_id;
    std::string query;
    std::string expansion;
};

void write_generated(const std::filesystem::path& path, std::span<const Generated> rows)
{
    std::string out;
    for (const auto& g : rows)
        out += ordered_json{{"query_id", g.query_id}, {"query", g.query}, {"expansion", g.expansion}}.dump() + "\n";
    detail::write_file(path, out);
}

std::vector<Generated> read_generated(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    std::vector<Generated> rows;
    for (std::string line; std::getline(in, line);) {
        if (line.empty()) continue;
        const auto j = json::parse(line);
        rows.push_back({j.at("query_id"), j.at("query"), j.at("expansion")});
    }
    return rows;
}

std::unique_ptr<LanguageModel> fresh_model(const ModelConfig& m, std::shared_ptr<const Vocab> vocab, std::uint64_t seed)
{
    if (m.architecture == Architecture::bigram_softmax) return make_bigram(std::move(vocab), seed);
    return make_transformer(std::move(vocab), m.shape, seed);
}

ordered_json model_json(const PipelineConfig& c)
{
    return config_tree(c)["model"];
}

std::optional<double> summary_field(const std::filesystem::path& report, const char* field)
{
    std::ifstream in(report);
    std::string line, last;
    while (std::getline(in, line))
        if (!line.empty()) last = line;
    if (last.empty()) return std::nullopt;
    const auto j = json::parse(last);
    if (!j.contains(field)) return std::nullopt;
    return j[field].get<double>();
}

} // namespace

PipelineResult run_pipeline(const PipelineConfig& cfg, const PipelineLog& log)
{
    const auto& p = cfg.paths;
    for (const auto& [what, path] : {std::pair{"corpus", p.corpus}, std::pair{"train_queries", p.train_queries},
                                     std::pair{"test_queries", p.test_queries}, std::pair{"qrels", p.qrels}}) {
        if (path.empty()) throw PipelineError("config", std::string("paths.") + what + " is not set");
        if (!std::filesystem::is_regular_file(path))
            throw PipelineError("config", std::string("paths.") + what + " does not exist: " + path.string());
    }
    if (p.workdir.empty()) throw PipelineError("config", "paths.workdir is not set");
    std::filesystem::create_directories(p.workdir);

    const auto tree = config_tree(cfg);
    StageRunner runner(p.workdir, log);
    PipelineResult result;

    std::string corpus_sha, train_sha, test_sha, qrels_sha;
    try {
        corpus_sha = sha256_file(p.corpus);
        train_sha = sha256_file(p.train_queries);
        test_sha = sha256_file(p.test_queries);
        qrels_sha = sha256_file(p.qrels);
    } catch (const std::exception& e) {
        throw PipelineError("config", e.what());
    }

    // Lazily loaded shared inputs.
    std::optional<InvertedIndex> index;
    std::optional<Qrels> qrels;
    std::filesystem::path index_dir;
    auto get_index = [&]() -> const InvertedIndex& {
        if (!index) index = load_index(index_dir / "index.bin");
        return *index;
    };
    auto get_qrels = [&]() -> const Qrels& {
        if (!qrels) qrels = parse_qrels(p.qrels);
        return *qrels;
    };

    // index
    const ordered_json index_in{{"corpus", corpus_sha}, {"analyzer", tree["analyzer"]}};
    index_dir = runner.run("index", index_in, [&](const std::filesystem::path& dir) {
        index = build_index(read_corpus_jsonl(p.corpus), cfg.analyzer, cfg.workers);
        save_index(*index, dir / "index.bin");
        return StageOutput{{"index.bin"}, {}};
    });
    const std::string index_key = runner.records().back().key;

    // expand
    ordered_json teacher{{"source", tree["teacher"]["source"]}};
    if (cfg.source == TeacherSource::api) {
        teacher["base_url"] = cfg.endpoint.base_url;
        teacher["model"] = cfg.endpoint.model_name;
    }
    const ordered_json expand_in{{"index", index_key}, {"train_queries", train_sha}, {"teacher", teacher}};
    const auto expand_dir = runner.run("expand", expand_in, [&](const std::filesystem::path& dir) {
        const auto queries = read_queries_tsv(p.train_queries);
        const auto& idx = get_index();
        const ToyTeacher toy(idx, cfg.bm25);
        const auto source = cfg.source == TeacherSource::toy ? toy_source(toy) : api_source(cfg.endpoint);
        const auto summary = generate_dataset(queries, source, dir / "expansions.jsonl",
                                              cfg.source == TeacherSource::toy ? 1 : cfg.expand_concurrency);
        if (!summary.failures.empty())
            throw Error(std::to_string(summary.failures.size()) + " queries failed, first " +
                        summary.failures.front().query_id + ": " + summary.failures.front().message +
                        " (re-run to resume)");
        return StageOutput{{"expansions.jsonl"}, std::pair{summary.total_latency(), summary.latency_seconds.size()}};
    });
    const std::string expand_key = runner.records().back().key;

    // sft
    const ordered_json sft_in{{"expand", expand_key}, {"model", model_json(cfg)}, {"sft", tree["sft"]}, {"seed", cfg.seed}};
    const auto sft_dir = runner.run("sft", sft_in, [&](const std::filesystem::path& dir) {
        const auto records = read_expansions(expand_dir / "expansions.jsonl");
        const auto examples = sft_examples(records, cfg.sft_targets);
        std::vector<std::string> texts;
        for (const auto& ex : examples) {
            texts.push_back(ex.prompt);
            texts.push_back(ex.target);
        }
        auto vocab = std::make_shared<const Vocab>(Vocab::build(texts));
        auto model = fresh_model(cfg.model, vocab, cfg.seed);
        save_model(*model, dir / "init.bin");
        std::vector<TokenSequence> data;
        for (const auto& ex : examples) data.push_back(make_sft_sequence(*model, ex.prompt, ex.target, cfg.model.layout));
        auto report = train_sft(*model, data, cfg.sft);
        save_model(*model, dir / "sft.bin");
        report.checkpoint = "sft.bin";
        detail::write_file(dir / "sft_report.jsonl", report_jsonl(report));
        runner.say("sft: " + std::to_string(report.steps.size()) + " steps, final epoch loss " +
                   StageRunner::fmt(report.epoch_loss.back()));
        return StageOutput{{"init.bin", "sft.bin", "sft_report.jsonl"}, {}};
    });
    const std::string sft_key = runner.records().back().key;

    // build-prefs
    const ordered_json prefs_in{{"expand", expand_key}, {"index", index_key}, {"qrels", qrels_sha},
                                {"bm25", tree["bm25"]}, {"metric", tree["metric"]},
                                {"retrieval_depth", cfg.retrieval_depth}, {"pref", tree["pref"]}};
    const auto prefs_dir = runner.run("build-prefs", prefs_in, [&](const std::filesystem::path& dir) {
        const auto records = read_expansions(expand_dir / "expansions.jsonl");
        const auto built = build_pairs(records, get_index(), get_qrels(), cfg.pref);
        write_pairs(dir / "pairs.jsonl", built.pairs);
        detail::write_file(dir / "prefs_report.json", report_json(built, cfg.pref));
        runner.say("build-prefs: kept " + std::to_string(built.kept) + ", skipped " + std::to_string(built.skipped));
        return StageOutput{{"pairs.jsonl", "prefs_report.json"}, {}};
    });
    const std::string prefs_key = runner.records().back().key;
    result.pairs_kept = read_pairs(prefs_dir / "pairs.jsonl").size();

    // dpo
    const ordered_json dpo_in{{"sft", sft_key}, {"prefs", prefs_key}, {"dpo", tree["dpo"]}, {"seed", cfg.seed}};
    const auto dpo_dir = runner.run("dpo", dpo_in, [&](const std::filesystem::path& dir) {
        const auto pairs = read_pairs(prefs_dir / "pairs.jsonl");
        if (pairs.empty()) throw Error("no preference pairs survived the margin filter");
        auto policy = load_model(sft_dir / "sft.bin");
        const auto ref = cfg.reference == ReferenceChoice::sft_init ? clone_frozen(*policy)
                                                                    : clone_frozen(*load_model(sft_dir / "init.bin"));
        std::vector<PreferenceExample> examples;
        for (const auto& pair : pairs) examples.push_back(make_preference_example(*policy, pair, cfg.model.layout));
        auto report = train_dpo(*policy, ref, examples, cfg.dpo);
        save_model(*policy, dir / "sft_dpo.bin");
        report.checkpoint = "sft_dpo.bin";
        detail::write_file(dir / "dpo_report.jsonl", report_jsonl(report));
        runner.say("dpo: " + std::to_string(pairs.size()) + " pairs, margin " + StageRunner::fmt(*report.margin_before) +
                   " -> " + StageRunner::fmt(*report.margin_after));
        return StageOutput{{"sft_dpo.bin", "dpo_report.jsonl"}, {}};
    });
    const std::string dpo_key = runner.records().back().key;
    result.margin_before = summary_field(dpo_dir / "dpo_report.jsonl", "margin_before");
    result.margin_after = summary_field(dpo_dir / "dpo_report.jsonl", "margin_after");

    // generate with each trained student
    auto generate = [&](const std::string& stage, const std::string& model_key, const std::filesystem::path& ckpt) {
        const ordered_json in{{"model", model_key}, {"test_queries", test_sha}, {"layout", model_json(cfg)}};
        return runner.run(stage, in, [&](const std::filesystem::path& dir) {
            const auto model = load_model(ckpt);
            const auto queries = read_queries_tsv(p.test_queries);
            std::vector<Generated> rows;
            double total = 0.0;
            for (const auto& q : queries) {
                const auto start = Clock::now();
                const auto prompt = prompt_text(build_prompt(q.text, PromptMode::zero));
                rows.push_back({q.query_id, q.text, generate_text(*model, prompt, cfg.model.layout, cfg.model.max_new_tokens)});
                total += seconds_since(start);
            }
            write_generated(dir / "generated.jsonl", rows);
            return StageOutput{{"generated.jsonl"}, std::pair{total, queries.size()}};
        });
    };
    const auto gen_sft_dir = generate("generate-sft", sft_key, sft_dir / "sft.bin");
    const std::string gen_sft_key = runner.records().back().key;
    const auto gen_dpo_dir = generate("generate-sft-dpo", dpo_key, dpo_dir / "sft_dpo.bin");
    const std::string gen_dpo_key = runner.records().back().key;

    // retrieve
    const std::vector<std::string> run_names{"baseline", "sft", "sft_dpo"};
    const ordered_json retrieve_in{{"index", index_key}, {"test_queries", test_sha}, {"generate_sft", gen_sft_key},
                                   {"generate_sft_dpo", gen_dpo_key}, {"bm25", tree["bm25"]},
                                   {"retrieval_depth", cfg.retrieval_depth}};
    const auto retrieve_dir = runner.run("retrieve", retrieve_in, [&](const std::filesystem::path& dir) {
        const auto queries = read_queries_tsv(p.test_queries);
        std::vector<Query> composed;
        for (const auto& q : queries) composed.push_back({q.query_id, compose_query(q.text, "")});
        write_run(dir / "baseline.run", batch_search(get_index(), cfg.bm25, composed, cfg.retrieval_depth, cfg.workers),
                  "baseline");
        for (const auto& [name, gen_dir] : {std::pair{"sft", gen_sft_dir}, std::pair{"sft_dpo", gen_dpo_dir}}) {
            std::vector<Query> expanded;
            for (const auto& g : read_generated(gen_dir / "generated.jsonl"))
                expanded.push_back({g.query_id, compose_query(g.query, g.expansion)});
            write_run(dir / (std::string(name) + ".run"),
                      batch_search(get_index(), cfg.bm25, expanded, cfg.retrieval_depth, cfg.workers), name);
        }
        return StageOutput{{"baseline.run", "sft.run", "sft_dpo.run"}, {}};
    });
    const std::string retrieve_key = runner.records().back().key;

    // eval and ttest are cheap: always computed from the run files, written once per key.
    std::map<std::string, EvalResult> evals;
    for (const auto& name : run_names) {
        evals[name] = evaluate_run(read_run(retrieve_dir / (name + ".run")), get_qrels(), cfg.metric);
        result.runs.push_back({name, evals[name].mean_ndcg, evals[name].mean_map, evals[name].mean_mrr});
    }
    const ordered_json eval_in{{"retrieve", retrieve_key}, {"qrels", qrels_sha}, {"metric", tree["metric"]}};
    const auto eval_dir = runner.run("eval", eval_in, [&](const std::filesystem::path& dir) {
        StageOutput out;
        std::string summary = "run\tndcg@" + std::to_string(cfg.metric.ndcg_cutoff) + "\tmap\tmrr\n";
        for (const auto& r : result.runs)
            summary += r.name + "\t" + StageRunner::fmt(r.ndcg) + "\t" + StageRunner::fmt(r.map) + "\t" +
                       StageRunner::fmt(r.mrr) + "\n";
        detail::write_file(dir / "summary.tsv", summary);
        out.files.push_back("summary.tsv");
        for (const auto& name : run_names) {
            detail::write_file(dir / (name + ".tsv"), format_eval(evals[name]));
            out.files.push_back(name + ".tsv");
        }
        return out;
    });
    const std::string eval_key = runner.records().back().key;
    (void)eval_dir;

    for (const auto& [a, b] : {std::pair{"sft_dpo", "baseline"}, std::pair{"sft", "baseline"}, std::pair{"sft_dpo", "sft"}}) {
        result.comparisons.push_back({a, b,
                                      paired_t_test(metric_values(evals[a], Metric::ndcg10),
                                                    metric_values(evals[b], Metric::ndcg10), cfg.tail)});
    }
    const ordered_json ttest_in{{"eval", eval_key}, {"tail", tree["ttest"]["tail"]}};
    runner.run("ttest", ttest_in, [&](const std::filesystem::path& dir) {
        ordered_json out = json::array();
        for (const auto& c : result.comparisons)
            out.push_back({{"a", c.a}, {"b", c.b}, {"metric", "ndcg@10"}, {"t", c.ndcg.t}, {"p", c.ndcg.p},
                           {"n", c.ndcg.n}, {"mean_difference", c.ndcg.mean_difference}});
        detail::write_file(dir / "ttest.json", out.dump(2) + "\n");
        return StageOutput{{"ttest.json"}, {}};
    });

    // manifest
    result.stages = runner.records();
    ordered_json manifest{{"config", tree}, {"stages", json::array()}};
    for (const auto& s : result.stages) {
        ordered_json st{{"name", s.name}, {"key", s.key}, {"cached", s.cached}, {"seconds", s.seconds}};
        st["artifacts"] = json::array();
        for (const auto& a : s.artifacts) st["artifacts"].push_back({{"path", a.path}, {"sha256", a.sha256}});
        if (s.latency_mean)
            st["latency"] = {{"queries", *s.latency_queries},
                             {"total_seconds", *s.latency_total},
                             {"mean_seconds_per_query", *s.latency_mean}};
        manifest["stages"].push_back(st);
    }
    manifest["runs"] = json::array();
    for (const auto& r : result.runs)
        manifest["runs"].push_back({{"run", r.name}, {"ndcg@10", r.ndcg}, {"map", r.map}, {"mrr", r.mrr}});
    manifest["pairs_kept"] = result.pairs_kept;
    result.manifest = p.workdir / "manifest.json";
    detail::write_file(result.manifest, manifest.dump(2) + "\n");
    return result;
}

} // namespace qexp
