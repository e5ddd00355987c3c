#pragma once

#include "qexp/retriever.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace qexp {

// Graded judgments, grouped by query. At most one grade per (query, doc).
class Qrels {
public:
    using Judgments = std::map<std::string, int, std::less<>>;

    // Throws FormatError on a repeated (query, doc) pair or negative grade.
    void add(const std::string& query_id, const std::string& doc_id, int grade);

    // nullptr when the query has no judgments at all.
    const Judgments* judgments(std::string_view query_id) const;
    std::optional<int> grade(std::string_view query_id, std::string_view doc_id) const;

    std::size_t size() const { return size_; }
    const std::map<std::string, Judgments, std::less<>>& by_query() const { return by_query_; }

private:
    std::map<std::string, Judgments, std::less<>> by_query_;
    std::size_t size_ = 0;
};

// "query_id iter doc_id grade" per line; errors carry the line number.
Qrels parse_qrels(const std::filesystem::path& path);
Qrels parse_qrels_text(std::string_view text, std::string_view source = "qrels");
void write_qrels(const std::filesystem::path& path, const Qrels& qrels);

enum class Gain { linear, exponential };

struct MetricConfig {
    int ndcg_cutoff = 10;
    int binary_threshold = 2; // grade >= threshold counts as relevant for AP/RR
    Gain gain = Gain::linear;
};

// nullopt: query absent from qrels (excluded, not zero). Unjudged docs are grade 0.
std::optional<double> ndcg_at_k(const RankedList& ranked, const Qrels& qrels, const MetricConfig& config = {});
// nullopt: query absent, or no judged doc reaches the threshold (R = 0).
std::optional<double> average_precision(const RankedList& ranked, const Qrels& qrels,
                                        const MetricConfig& config = {});
// nullopt: query absent. 0 when no relevant doc is retrieved.
std::optional<double> reciprocal_rank(const RankedList& ranked, const Qrels& qrels, const MetricConfig& config = {});

struct QueryMetrics {
    std::string query_id;
    double ndcg = 0.0;
    std::optional<double> ap; // absent when the query has no relevant judgments
    double rr = 0.0;
};

struct EvalResult {
    std::vector<QueryMetrics> per_query; // run order
    std::vector<std::string> skipped;    // run queries without judgments
    std::vector<std::string> map_excluded;
    double mean_ndcg = 0.0;
    double mean_map = 0.0;
    double mean_mrr = 0.0;
};

EvalResult evaluate_run(std::span<const RankedList> run, const Qrels& qrels, const MetricConfig& config = {});

enum class Metric { ndcg10, map, mrr };
Metric parse_metric(std::string_view name);
std::string_view metric_name(Metric m);

// Per-query values of one metric, keyed by query id (AP omits excluded queries).
std::map<std::string, double> metric_values(const EvalResult& result, Metric metric);

// Per-query TSV ("query_id\tndcg@10\tmap\tmrr") followed by an "all" row of means.
std::string format_eval(const EvalResult& result);

enum class Tail { two_sided, greater, less };

enum class Degeneracy {
    none,
    zero_differences, // all differences are 0: t = 0, p = 1
    zero_variance,    // constant nonzero difference: t = +/-inf, p = 0
};

struct TTestResult {
    double t = 0.0;
    double p = 1.0;
    std::size_t n = 0;
    double mean_difference = 0.0;
    Degeneracy degeneracy = Degeneracy::none;
};

// Paired Student t-test on a - b. Throws InvalidArgument for n < 2 or size mismatch.
TTestResult paired_t_test(std::span<const double> a, std::span<const double> b, Tail tail = Tail::two_sided);

// Pairs two per-query maps on their keys; the key sets must match.
TTestResult paired_t_test(const std::map<std::string, double>& a, const std::map<std::string, double>& b,
                          Tail tail = Tail::two_sided);

// Regularized incomplete beta I_x(a, b).
double incomplete_beta(double a, double b, double x);
// Student t cumulative distribution with `dof` degrees of freedom.
double student_t_cdf(double t, double dof);

} // namespace qexp
