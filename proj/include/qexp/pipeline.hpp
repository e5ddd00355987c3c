#pragma once

#include "qexp/analyzer.hpp"
#include "qexp/evaluator.hpp"
#include "qexp/expansion.hpp"
#include "qexp/lm.hpp"
#include "qexp/preference.hpp"
#include "qexp/retriever.hpp"
#include "qexp/trainer.hpp"

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace qexp {

enum class TeacherSource { toy, api };
enum class ReferenceChoice { sft_init, raw };

struct ModelConfig {
    Architecture architecture = Architecture::tiny_transformer;
    TransformerShape shape;
    SequenceLayout layout;
    std::size_t max_new_tokens = 64; // further bounded by the context window
};

struct PipelineConfig {
    struct Paths {
        std::filesystem::path corpus;
        std::filesystem::path train_queries; // teacher, SFT and preference data
        std::filesystem::path test_queries;  // evaluation
        std::filesystem::path qrels;
        std::filesystem::path workdir;
    } paths;
    AnalyzerConfig analyzer = AnalyzerConfig::english();
    Bm25Params bm25;
    std::size_t retrieval_depth = kDefaultDepth;
    MetricConfig metric;
    TeacherSource source = TeacherSource::toy;
    TeacherEndpointConfig endpoint;
    unsigned expand_concurrency = 4;
    PrefBuildConfig pref;
    ModelConfig model;
    SftConfig sft;
    SftTargets sft_targets = SftTargets::both;
    DpoConfig dpo;
    ReferenceChoice reference = ReferenceChoice::sft_init;
    Tail tail = Tail::two_sided;
    std::uint64_t seed = 0;
    unsigned workers = 1;
};

// JSON config. Unknown keys and wrongly typed values are FormatErrors naming
// the offending key; relative paths resolve against `base_dir`.
PipelineConfig parse_pipeline_config(std::string_view json_text, const std::filesystem::path& base_dir = {});
PipelineConfig load_pipeline_config(const std::filesystem::path& path);
std::string pipeline_config_json(const PipelineConfig& cfg); // canonical form, parses back identically

std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

struct Artifact {
    std::string path; // relative to workdir
    std::string sha256;
};

struct StageRecord {
    std::string name;
    std::string key; // content hash of everything the stage depends on
    bool cached = false;
    double seconds = 0.0;
    std::vector<Artifact> artifacts;
    std::optional<double> latency_total;   // expansion-generating stages: seconds
    std::optional<double> latency_mean;    // seconds per query
    std::optional<std::size_t> latency_queries;
};

struct RunSummary {
    std::string name; // baseline, sft, sft_dpo
    double ndcg = 0.0;
    double map = 0.0;
    double mrr = 0.0;
};

struct Comparison {
    std::string a, b;
    TTestResult ndcg;
};

struct PipelineResult {
    std::vector<StageRecord> stages;
    std::vector<RunSummary> runs;
    std::vector<Comparison> comparisons;
    std::size_t pairs_kept = 0;
    std::optional<double> margin_before, margin_after;
    std::filesystem::path manifest;
};

class PipelineError : public Error {
public:
    PipelineError(std::string stage, const std::string& message)
        : Error("stage '" + stage + "' failed: " + message), stage_(std::move(stage))
    {
    }
    const std::string& stage() const { return stage_; }

private:
    std::string stage_;
};

using PipelineLog = std::function<void(std::string_view)>;

// index -> expand -> sft -> build-prefs -> dpo -> generate -> retrieve ->
// eval -> ttest. Every stage writes into workdir/<stage>-<key>/ and is reused
// when its key is unchanged. Throws PipelineError naming the failed stage.
PipelineResult run_pipeline(const PipelineConfig& cfg, const PipelineLog& log = {});

} // namespace qexp
