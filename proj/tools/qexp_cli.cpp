// qexp: command-line front end for indexing, expansion, preference building,
// student training and evaluation.

#include "qexp/error.hpp"
#include "qexp/pipeline.hpp"
#include "qexp/synthetic.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>

using namespace qexp;

namespace {

void write_text(const std::string& path, const std::string& text)
{
    if (path.empty() || path == "-") {
        std::cout << text;
        return;
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out << text;
}


void print_latency(const GenerationSummary& s)
{
    std::cerr << "generated " << s.generated << ", already present " << s.already_present << ", failed "
              << s.failures.size() << "\n";
    if (!s.latency_seconds.empty())
        std::cerr << "latency: " << s.total_latency() << " s total, " << s.mean_latency() << " s/query over "
                  << s.latency_seconds.size() << " queries\n";
    for (const auto& f : s.failures) std::cerr << "failed " << f.query_id << ": " << f.message << "\n";
}

SequenceLayout layout_for(std::size_t prompt_tokens)
{
    SequenceLayout l;
    l.prompt_tokens = prompt_tokens;
    return l;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Query expansion with teacher-distilled, preference-aligned student models"};
    app.require_subcommand(1);

    // index
    std::string corpus, index_out;
    bool no_stem = false;
    unsigned workers = 1;
    auto* index_cmd = app.add_subcommand("index", "Build a BM25 index from a JSONL corpus");
    index_cmd->add_option("--corpus", corpus, "JSONL with id and contents")->required();
    index_cmd->add_option("--out", index_out, "Index file")->required();
    index_cmd->add_flag("--no-stem", no_stem, "Disable Porter stemming");
    index_cmd->add_option("--workers", workers, "Indexing threads");

    // retrieve
    std::string index_path, queries_path, expansions_path, run_out, run_tag = "qexp";
    std::size_t depth = kDefaultDepth;
    Bm25Params bm25;
    auto* retrieve_cmd = app.add_subcommand("retrieve", "Rank documents for a query file");
    retrieve_cmd->add_option("--index", index_path)->required();
    retrieve_cmd->add_option("--queries", queries_path, "qid<TAB>text")->required();
    retrieve_cmd->add_option("--expansions", expansions_path, "JSONL with query_id and expansion (or e1)");
    retrieve_cmd->add_option("--out", run_out, "TREC run file (default stdout)");
    retrieve_cmd->add_option("--depth", depth);
    retrieve_cmd->add_option("--k1", bm25.k1);
    retrieve_cmd->add_option("--b", bm25.b);
    retrieve_cmd->add_option("--tag", run_tag);
    retrieve_cmd->add_option("--workers", workers);

    // eval
    std::string run_path, qrels_path, eval_out;
    MetricConfig metric;
    auto* eval_cmd = app.add_subcommand("eval", "Per-query and mean nDCG@10, MAP and MRR");
    eval_cmd->add_option("--run", run_path)->required();
    eval_cmd->add_option("--qrels", qrels_path)->required();
    eval_cmd->add_option("--out", eval_out, "TSV (default stdout)");
    eval_cmd->add_option("--threshold", metric.binary_threshold, "Minimum grade counted relevant for MAP/MRR");

    // ttest
    std::string run_a, run_b, metric_name = "ndcg@10", tail_name = "two_sided";
    auto* ttest_cmd = app.add_subcommand("ttest", "Paired t-test between two runs");
    ttest_cmd->add_option("--a", run_a, "Run file")->required();
    ttest_cmd->add_option("--b", run_b, "Run file")->required();
    ttest_cmd->add_option("--qrels", qrels_path)->required();
    ttest_cmd->add_option("--metric", metric_name)->check(CLI::IsMember({"ndcg@10", "map", "mrr"}));
    ttest_cmd->add_option("--tail", tail_name)->check(CLI::IsMember({"two_sided", "greater", "less"}));

    // expand
    std::string source = "toy", expand_out;
    TeacherEndpointConfig endpoint;
    unsigned concurrency = 4;
    auto* expand_cmd = app.add_subcommand("expand", "Generate zero- and few-shot teacher expansions");
    expand_cmd->add_option("--queries", queries_path)->required();
    expand_cmd->add_option("--out", expand_out, "JSONL, appended to and resumed")->required();
    expand_cmd->add_option("--source", source)->check(CLI::IsMember({"toy", "api"}));
    expand_cmd->add_option("--index", index_path, "Index for the toy teacher");
    expand_cmd->add_option("--endpoint", endpoint.base_url, "OpenAI-compatible base URL");
    expand_cmd->add_option("--model", endpoint.model_name);
    expand_cmd->add_option("--key-env", endpoint.api_key_env, "Environment variable holding the API key");
    expand_cmd->add_option("--concurrency", concurrency);

    // build-prefs
    std::string pairs_out, report_out;
    PrefBuildConfig pref;
    auto* prefs_cmd = app.add_subcommand("build-prefs", "Score e1/e2 by retrieval and keep margin pairs");
    prefs_cmd->add_option("--expansions", expansions_path)->required();
    prefs_cmd->add_option("--index", index_path)->required();
    prefs_cmd->add_option("--qrels", qrels_path)->required();
    prefs_cmd->add_option("--delta", pref.delta);
    prefs_cmd->add_option("--out", pairs_out)->required();
    prefs_cmd->add_option("--report", report_out, "JSON report with every record's outcome");
    prefs_cmd->add_option("--workers", pref.workers);

    // sft
    std::string model_spec = "tiny_transformer", data_path, model_out, init_out;
    bool e1_only = false, e2_only = false;
    SftConfig sft;
    TransformerShape shape;
    std::size_t prompt_tokens = SequenceLayout{}.prompt_tokens;
    std::uint64_t seed = 0;
    auto* sft_cmd = app.add_subcommand("sft", "Supervised fine-tuning on teacher expansions");
    sft_cmd->add_option("--model", model_spec, "bigram, tiny_transformer, or a checkpoint to continue from");
    sft_cmd->add_option("--data", data_path, "Expansions JSONL")->required();
    sft_cmd->add_option("--out", model_out, "Checkpoint")->required();
    sft_cmd->add_option("--init-out", init_out, "Also save the untrained initialization");
    auto* e1_flag = sft_cmd->add_flag("--e1-only", e1_only, "Train on zero-shot expansions only");
    sft_cmd->add_flag("--e2-only", e2_only, "Train on few-shot expansions only")->excludes(e1_flag);
    sft_cmd->add_option("--lr", sft.lr);
    sft_cmd->add_option("--epochs", sft.epochs);
    sft_cmd->add_option("--batch-size", sft.batch_size);
    sft_cmd->add_option("--grad-accum", sft.grad_accum);
    sft_cmd->add_option("--warmup", sft.warmup_fraction);
    sft_cmd->add_option("--d-model", shape.d_model);
    sft_cmd->add_option("--layers", shape.layers);
    sft_cmd->add_option("--heads", shape.heads);
    sft_cmd->add_option("--context", shape.context);
    sft_cmd->add_option("--prompt-tokens", prompt_tokens);
    sft_cmd->add_option("--seed", seed);
    sft_cmd->add_option("--report", report_out, "JSONL training log");

    // dpo
    std::string pairs_path, ref_kind = "sft-init", ref_path;
    DpoConfig dpo;
    auto* dpo_cmd = app.add_subcommand("dpo", "Direct preference optimization of an SFT checkpoint");
    dpo_cmd->add_option("--model", model_spec, "SFT checkpoint (the policy's initialization)")->required();
    dpo_cmd->add_option("--pairs", pairs_path)->required();
    dpo_cmd->add_option("--out", model_out)->required();
    dpo_cmd->add_option("--beta", dpo.beta);
    dpo_cmd->add_option("--ref", ref_kind, "Reference model")->check(CLI::IsMember({"sft-init", "raw"}));
    dpo_cmd->add_option("--raw-model", ref_path, "Untrained checkpoint used with --ref raw");
    dpo_cmd->add_option("--lr", dpo.lr);
    dpo_cmd->add_option("--epochs", dpo.epochs);
    dpo_cmd->add_option("--batch-size", dpo.batch_size);
    dpo_cmd->add_option("--grad-accum", dpo.grad_accum);
    dpo_cmd->add_option("--warmup", dpo.warmup_fraction);
    dpo_cmd->add_option("--prompt-tokens", prompt_tokens);
    dpo_cmd->add_option("--seed", dpo.seed);
    dpo_cmd->add_option("--report", report_out, "JSONL training log");

    // generate
    std::string gen_out;
    std::size_t max_new = 64;
    auto* gen_cmd = app.add_subcommand("generate", "Expand queries with a trained student");
    gen_cmd->add_option("--model", model_spec, "Checkpoint")->required();
    gen_cmd->add_option("--queries", queries_path)->required();
    gen_cmd->add_option("--out", gen_out, "JSONL with query_id and expansion")->required();
    gen_cmd->add_option("--max-tokens", max_new);
    gen_cmd->add_option("--prompt-tokens", prompt_tokens);

    // pipeline
    std::string config_path;
    auto* pipe_cmd = app.add_subcommand("pipeline", "Run every stage from a JSON config, reusing cached stages");
    pipe_cmd->add_option("--config", config_path)->required();
    pipe_cmd->add_option("--workdir", index_out, "Override paths.workdir");
    // Overrides for the common ablations; everything else lives in the config file.
    std::optional<std::uint64_t> o_seed;
    std::optional<double> o_delta, o_beta;
    std::optional<std::string> o_source, o_ref, o_targets, o_endpoint, o_teacher_model, o_key_env;
    pipe_cmd->add_option("--seed", o_seed);
    pipe_cmd->add_option("--delta", o_delta, "Preference margin");
    pipe_cmd->add_option("--beta", o_beta, "DPO beta");
    pipe_cmd->add_option("--source", o_source)->check(CLI::IsMember({"toy", "api"}));
    pipe_cmd->add_option("--endpoint", o_endpoint);
    pipe_cmd->add_option("--teacher-model", o_teacher_model);
    pipe_cmd->add_option("--key-env", o_key_env);
    pipe_cmd->add_option("--ref", o_ref)->check(CLI::IsMember({"sft-init", "raw"}));
    pipe_cmd->add_option("--sft-targets", o_targets)->check(CLI::IsMember({"both", "e1", "e2"}));

    // gen-synthetic
    std::string synth_out;
    SyntheticConfig synth;
    auto* synth_cmd = app.add_subcommand("gen-synthetic", "Write a synthetic topic corpus with graded judgments");
    synth_cmd->add_option("--out", synth_out, "Output directory")->required();
    synth_cmd->add_option("--topics", synth.topics);
    synth_cmd->add_option("--docs", synth.documents);
    synth_cmd->add_option("--seed", synth.seed);

    CLI11_PARSE(app, argc, argv);

    try {
        if (*index_cmd) {
            auto analyzer = AnalyzerConfig::english();
            if (no_stem) analyzer.stemmer = Stemmer::none;
            const auto idx = build_index(read_corpus_jsonl(corpus), analyzer, workers);
            save_index(idx, index_out);
            std::cerr << "indexed " << idx.doc_count() << " documents\n";
        } else if (*retrieve_cmd) {
            const auto idx = load_index(index_path);
            auto queries = read_queries_tsv(queries_path);
            std::map<std::string, std::string> expansion;
            if (!expansions_path.empty()) {
                std::ifstream in(expansions_path);
                if (!in) throw IoError("cannot open " + expansions_path);
                for (std::string line; std::getline(in, line);) {
                    if (line.empty()) continue;
                    const auto j = nlohmann::json::parse(line);
                    expansion[j.at("query_id")] = j.contains("expansion") ? j["expansion"] : j.at("e1");
                }
            }
            for (auto& q : queries) q.text = compose_query(q.text, expansion[q.query_id]);
            write_text(run_out, format_run(batch_search(idx, bm25, queries, depth, workers), run_tag));
        } else if (*eval_cmd) {
            write_text(eval_out, format_eval(evaluate_run(read_run(run_path), parse_qrels(qrels_path), metric)));
        } else if (*ttest_cmd) {
            const auto qrels = parse_qrels(qrels_path);
            const auto m = parse_metric(metric_name);
            const Tail tail = tail_name == "greater" ? Tail::greater : tail_name == "less" ? Tail::less : Tail::two_sided;
            const auto r = paired_t_test(metric_values(evaluate_run(read_run(run_a), qrels), m),
                                         metric_values(evaluate_run(read_run(run_b), qrels), m), tail);
            std::cout << "metric\t" << metric_name << "\nn\t" << r.n << "\nmean_difference\t" << r.mean_difference
                      << "\nt\t" << r.t << "\np\t" << r.p << "\n";
        } else if (*expand_cmd) {
            const auto queries = read_queries_tsv(queries_path);
            GenerationSummary summary;
            if (source == "toy") {
                if (index_path.empty()) throw InvalidArgument("--source toy needs --index");
                const auto idx = load_index(index_path);
                const ToyTeacher teacher(idx);
                summary = generate_dataset(queries, toy_source(teacher), expand_out, 1);
            } else {
                summary = generate_dataset(queries, api_source(endpoint), expand_out, concurrency);
            }
            print_latency(summary);
            if (!summary.failures.empty()) return 2;
        } else if (*prefs_cmd) {
            const auto result = build_pairs(read_expansions(expansions_path), load_index(index_path),
                                            parse_qrels(qrels_path), pref);
            write_pairs(pairs_out, result.pairs);
            if (!report_out.empty()) write_text(report_out, report_json(result, pref));
            std::cerr << "kept " << result.kept << ", skipped " << result.skipped << "\n";
        } else if (*sft_cmd) {
            const auto records = read_expansions(data_path);
            const auto examples =
                sft_examples(records, e1_only ? SftTargets::e1_only : e2_only ? SftTargets::e2_only : SftTargets::both);
            std::unique_ptr<LanguageModel> model;
            if (model_spec == "bigram" || model_spec == "tiny_transformer") {
                std::vector<std::string> texts;
                for (const auto& ex : examples) {
                    texts.push_back(ex.prompt);
                    texts.push_back(ex.target);
                }
                auto vocab = std::make_shared<const Vocab>(Vocab::build(texts));
                model = model_spec == "bigram" ? make_bigram(vocab, seed) : make_transformer(vocab, shape, seed);
            } else {
                model = load_model(model_spec);
            }
            if (!init_out.empty()) save_model(*model, init_out);
            std::vector<TokenSequence> data;
            for (const auto& ex : examples)
                data.push_back(make_sft_sequence(*model, ex.prompt, ex.target, layout_for(prompt_tokens)));
            sft.seed = seed;
            auto report = train_sft(*model, data, sft);
            save_model(*model, model_out);
            report.checkpoint = model_out;
            if (!report_out.empty()) write_text(report_out, report_jsonl(report));
            std::cerr << report.steps.size() << " steps, final epoch loss " << report.epoch_loss.back() << "\n";
        } else if (*dpo_cmd) {
            auto policy = load_model(model_spec);
            if (ref_kind == "raw" && ref_path.empty()) throw InvalidArgument("--ref raw needs --raw-model");
            const auto ref = ref_kind == "raw" ? clone_frozen(*load_model(ref_path)) : clone_frozen(*policy);
            std::vector<PreferenceExample> examples;
            for (const auto& p : read_pairs(pairs_path))
                examples.push_back(make_preference_example(*policy, p, layout_for(prompt_tokens)));
            if (examples.empty()) throw InvalidArgument("no preference pairs in " + pairs_path);
            auto report = train_dpo(*policy, ref, examples, dpo);
            save_model(*policy, model_out);
            report.checkpoint = model_out;
            if (!report_out.empty()) write_text(report_out, report_jsonl(report));
            std::cerr << report.steps.size() << " steps, margin " << *report.margin_before << " -> "
                      << *report.margin_after << ", degenerate pairs " << report.degenerate_pairs << "\n";
        } else if (*gen_cmd) {
            const auto model = load_model(model_spec);
            std::string out;
            for (const auto& q : read_queries_tsv(queries_path)) {
                const auto prompt = prompt_text(build_prompt(q.text, PromptMode::zero));
                const auto text = generate_text(*model, prompt, layout_for(prompt_tokens), max_new);
                out += nlohmann::ordered_json{{"query_id", q.query_id}, {"query", q.text}, {"expansion", text}}.dump() +
                       "\n";
            }
            write_text(gen_out, out);
        } else if (*pipe_cmd) {
            auto cfg = load_pipeline_config(config_path);
            if (!index_out.empty()) cfg.paths.workdir = index_out;
            if (o_seed) cfg.seed = cfg.sft.seed = cfg.dpo.seed = *o_seed;
            if (o_delta) cfg.pref.delta = *o_delta;
            if (o_beta) cfg.dpo.beta = *o_beta;
            if (o_source) cfg.source = *o_source == "api" ? TeacherSource::api : TeacherSource::toy;
            if (o_endpoint) cfg.endpoint.base_url = *o_endpoint;
            if (o_teacher_model) cfg.endpoint.model_name = *o_teacher_model;
            if (o_key_env) cfg.endpoint.api_key_env = *o_key_env;
            if (o_ref) cfg.reference = *o_ref == "raw" ? ReferenceChoice::raw : ReferenceChoice::sft_init;
            if (o_targets)
                cfg.sft_targets = *o_targets == "e1"   ? SftTargets::e1_only
                                  : *o_targets == "e2" ? SftTargets::e2_only
                                                       : SftTargets::both;
            // Re-validate the overridden tree through the parser.
            cfg = parse_pipeline_config(pipeline_config_json(cfg));
            const auto result = run_pipeline(cfg, [](std::string_view msg) { std::cerr << msg << "\n"; });
            std::cout << "run\tndcg@10\tmap\tmrr\n";
            for (const auto& r : result.runs)
                std::cout << r.name << "\t" << r.ndcg << "\t" << r.map << "\t" << r.mrr << "\n";
            for (const auto& c : result.comparisons)
                std::cout << c.a << " vs " << c.b << ": diff " << c.ndcg.mean_difference << ", t " << c.ndcg.t
                          << ", p " << c.ndcg.p << "\n";
            std::cout << "pairs kept: " << result.pairs_kept << "\nmanifest: " << result.manifest.string() << "\n";
        } else if (*synth_cmd) {
            write_synthetic(generate_synthetic(synth), synth_out);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
