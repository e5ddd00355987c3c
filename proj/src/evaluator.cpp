#include "qexp/evaluator.hpp"

#include "binary_io.hpp"
#include "qexp/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <sstream>

namespace qexp {

void Qrels::add(const std::string& query_id, const std::string& doc_id, int grade)
{
    if (grade < 0) throw FormatError("negative relevance grade for (" + query_id + ", " + doc_id + ")");
    auto& judged = by_query_[query_id];
    if (!judged.emplace(doc_id, grade).second)
        throw FormatError("duplicate judgment for (" + query_id + ", " + doc_id + ")");
    ++size_;
}

const Qrels::Judgments* Qrels::judgments(std::string_view query_id) const
{
    const auto it = by_query_.find(query_id);
    return it == by_query_.end() ? nullptr : &it->second;
}

std::optional<int> Qrels::grade(std::string_view query_id, std::string_view doc_id) const
{
    const auto* judged = judgments(query_id);
    if (!judged) return std::nullopt;
    const auto it = judged->find(doc_id);
    if (it == judged->end()) return std::nullopt;
    return it->second;
}

Qrels parse_qrels_text(std::string_view text, std::string_view source)
{
    Qrels qrels;
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        std::istringstream ss(line);
        std::string qid, iter, doc, grade_text, extra;
        if (!(ss >> qid)) continue;
        const auto where = std::string(source) + ":" + std::to_string(line_no);
        if (!(ss >> iter >> doc >> grade_text) || (ss >> extra))
            throw FormatError(where + ": expected \"query_id iter doc_id grade\"");
        int grade = 0;
        std::size_t used = 0;
        try {
            grade = std::stoi(grade_text, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != grade_text.size()) throw FormatError(where + ": grade is not an integer: " + grade_text);
        try {
            qrels.add(qid, doc, grade);
        } catch (const FormatError& e) {
            throw FormatError(where + ": " + e.what());
        }
    }
    return qrels;
}

Qrels parse_qrels(const std::filesystem::path& path)
{
    return parse_qrels_text(detail::read_file(path), path.string());
}

void write_qrels(const std::filesystem::path& path, const Qrels& qrels)
{
    std::string out;
    for (const auto& [qid, judged] : qrels.by_query())
        for (const auto& [doc, grade] : judged) out += qid + " 0 " + doc + ' ' + std::to_string(grade) + '\n';
    detail::write_file(path, out);
}

namespace {

double gain(int grade, Gain kind)
{
    if (grade <= 0) return 0.0;
    return kind == Gain::linear ? static_cast<double>(grade) : std::exp2(static_cast<double>(grade)) - 1.0;
}

} // namespace

std::optional<double> ndcg_at_k(const RankedList& ranked, const Qrels& qrels, const MetricConfig& config)
{
    if (config.ndcg_cutoff < 1) throw InvalidArgument("ndcg cutoff must be >= 1");
    const auto* judged = qrels.judgments(ranked.query_id);
    if (!judged) return std::nullopt;
    const auto k = static_cast<std::size_t>(config.ndcg_cutoff);

    std::vector<int> ideal;
    for (const auto& [doc, grade] : *judged)
        if (grade > 0) ideal.push_back(grade);
    if (ideal.empty()) return 0.0;
    std::sort(ideal.begin(), ideal.end(), std::greater<>());

    double idcg = 0.0;
    for (std::size_t i = 0; i < std::min(k, ideal.size()); ++i)
        idcg += gain(ideal[i], config.gain) / std::log2(static_cast<double>(i) + 2.0);

    double dcg = 0.0;
    for (std::size_t i = 0; i < std::min(k, ranked.entries.size()); ++i) {
        const auto it = judged->find(ranked.entries[i].doc_id);
        if (it != judged->end()) dcg += gain(it->second, config.gain) / std::log2(static_cast<double>(i) + 2.0);
    }
    return dcg / idcg;
}

std::optional<double> average_precision(const RankedList& ranked, const Qrels& qrels, const MetricConfig& config)
{
    if (config.binary_threshold < 1) throw InvalidArgument("binary threshold must be >= 1");
    const auto* judged = qrels.judgments(ranked.query_id);
    if (!judged) return std::nullopt;
    const auto total_relevant = std::count_if(judged->begin(), judged->end(),
                                              [&](const auto& kv) { return kv.second >= config.binary_threshold; });
    if (total_relevant == 0) return std::nullopt;

    double sum = 0.0;
    long hits = 0;
    for (std::size_t i = 0; i < ranked.entries.size(); ++i) {
        const auto it = judged->find(ranked.entries[i].doc_id);
        if (it == judged->end() || it->second < config.binary_threshold) continue;
        ++hits;
        sum += static_cast<double>(hits) / static_cast<double>(i + 1);
    }
    return sum / static_cast<double>(total_relevant);
}

std::optional<double> reciprocal_rank(const RankedList& ranked, const Qrels& qrels, const MetricConfig& config)
{
    if (config.binary_threshold < 1) throw InvalidArgument("binary threshold must be >= 1");
    const auto* judged = qrels.judgments(ranked.query_id);
    if (!judged) return std::nullopt;
    for (std::size_t i = 0; i < ranked.entries.size(); ++i) {
        const auto it = judged->find(ranked.entries[i].doc_id);
        if (it != judged->end() && it->second >= config.binary_threshold) return 1.0 / static_cast<double>(i + 1);
    }
    return 0.0;
}

EvalResult evaluate_run(std::span<const RankedList> run, const Qrels& qrels, const MetricConfig& config)
{
    EvalResult result;
    double ap_sum = 0.0;
    std::size_t ap_count = 0;
    for (const auto& ranked : run) {
        const auto ndcg = ndcg_at_k(ranked, qrels, config);
        if (!ndcg) {
            result.skipped.push_back(ranked.query_id);
            continue;
        }
        QueryMetrics m{ranked.query_id, *ndcg, average_precision(ranked, qrels, config),
                       *reciprocal_rank(ranked, qrels, config)};
        if (m.ap) {
            ap_sum += *m.ap;
            ++ap_count;
        } else {
            result.map_excluded.push_back(ranked.query_id);
        }
        result.per_query.push_back(std::move(m));
    }
    const auto n = static_cast<double>(result.per_query.size());
    if (!result.per_query.empty()) {
        double ndcg_sum = 0.0;
        double rr_sum = 0.0;
        for (const auto& m : result.per_query) {
            ndcg_sum += m.ndcg;
            rr_sum += m.rr;
        }
        result.mean_ndcg = ndcg_sum / n;
        result.mean_mrr = rr_sum / n;
    }
    if (ap_count > 0) result.mean_map = ap_sum / static_cast<double>(ap_count);
    return result;
}

Metric parse_metric(std::string_view name)
{
    if (name == "ndcg10" || name == "ndcg" || name == "ndcg@10") return Metric::ndcg10;
    if (name == "map") return Metric::map;
    if (name == "mrr") return Metric::mrr;
    throw InvalidArgument("unknown metric: " + std::string(name) + " (expected ndcg10, map or mrr)");
}

std::string_view metric_name(Metric m)
{
    switch (m) {
    case Metric::ndcg10: return "ndcg10";
    case Metric::map: return "map";
    case Metric::mrr: return "mrr";
    }
    return "?";
}

std::map<std::string, double> metric_values(const EvalResult& result, Metric metric)
{
    std::map<std::string, double> out;
    for (const auto& m : result.per_query) {
        switch (metric) {
        case Metric::ndcg10: out[m.query_id] = m.ndcg; break;
        case Metric::map:
            if (m.ap) out[m.query_id] = *m.ap;
            break;
        case Metric::mrr: out[m.query_id] = m.rr; break;
        }
    }
    return out;
}

std::string format_eval(const EvalResult& result)
{
    std::string out = "query_id\tndcg@10\tmap\tmrr\n";
    char buf[160];
    for (const auto& m : result.per_query) {
        if (m.ap)
            std::snprintf(buf, sizeof(buf), "\t%.4f\t%.4f\t%.4f\n", m.ndcg, *m.ap, m.rr);
        else
            std::snprintf(buf, sizeof(buf), "\t%.4f\t-\t%.4f\n", m.ndcg, m.rr);
        out += m.query_id;
        out += buf;
    }
    std::snprintf(buf, sizeof(buf), "all\t%.4f\t%.4f\t%.4f\n", result.mean_ndcg, result.mean_map, result.mean_mrr);
    out += buf;
    return out;
}

namespace {

// Continued fraction for the incomplete beta function (modified Lentz).
double beta_continued_fraction(double a, double b, double x)
{
    constexpr int kMaxIter = 500;
    constexpr double kEps = 1e-16;
    constexpr double kTiny = 1e-300;
    const double qab = a + b;
    const double qap = a + 1.0;
    const double qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::fabs(d) < kTiny) d = kTiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxIter; ++m) {
        const double m2 = 2.0 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::fabs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::fabs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::fabs(del - 1.0) < kEps) break;
    }
    return h;
}

} // namespace

double incomplete_beta(double a, double b, double x)
{
    if (!(a > 0.0) || !(b > 0.0)) throw InvalidArgument("incomplete_beta: a and b must be positive");
    if (!(x >= 0.0 && x <= 1.0)) throw InvalidArgument("incomplete_beta: x must lie in [0, 1]");
    if (x == 0.0 || x == 1.0) return x;
    const double log_front =
        std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
    const double front = std::exp(log_front);
    if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_continued_fraction(a, b, x) / a;
    return 1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b;
}

double student_t_cdf(double t, double dof)
{
    if (!(dof > 0.0)) throw InvalidArgument("student_t_cdf: dof must be positive");
    if (std::isinf(t)) return t > 0 ? 1.0 : 0.0;
    const double x = dof / (dof + t * t);
    const double tail = 0.5 * incomplete_beta(0.5 * dof, 0.5, x);
    return t > 0.0 ? 1.0 - tail : tail;
}

TTestResult paired_t_test(std::span<const double> a, std::span<const double> b, Tail tail)
{
    if (a.size() != b.size()) throw InvalidArgument("paired_t_test: samples differ in length");
    const std::size_t n = a.size();
    if (n < 2) throw InvalidArgument("paired_t_test: need at least 2 pairs");

    std::vector<double> diff(n);
    for (std::size_t i = 0; i < n; ++i) diff[i] = a[i] - b[i];
    const double mean = std::accumulate(diff.begin(), diff.end(), 0.0) / static_cast<double>(n);
    double ss = 0.0;
    for (const double d : diff) ss += (d - mean) * (d - mean);
    const double sd = std::sqrt(ss / static_cast<double>(n - 1));

    TTestResult r;
    r.n = n;
    r.mean_difference = mean;
    const bool all_zero = std::all_of(diff.begin(), diff.end(), [](double d) { return d == 0.0; });
    if (all_zero) {
        r.degeneracy = Degeneracy::zero_differences;
        r.t = 0.0;
        r.p = 1.0;
        return r;
    }
    if (sd == 0.0) {
        r.degeneracy = Degeneracy::zero_variance;
        r.t = mean > 0 ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
        const bool agrees = tail == Tail::two_sided || (tail == Tail::greater) == (mean > 0);
        r.p = agrees ? 0.0 : 1.0;
        return r;
    }

    r.t = mean / (sd / std::sqrt(static_cast<double>(n)));
    const double dof = static_cast<double>(n - 1);
    switch (tail) {
    case Tail::two_sided: r.p = incomplete_beta(0.5 * dof, 0.5, dof / (dof + r.t * r.t)); break;
    case Tail::greater: r.p = 1.0 - student_t_cdf(r.t, dof); break;
    case Tail::less: r.p = student_t_cdf(r.t, dof); break;
    }
    return r;
}

TTestResult paired_t_test(const std::map<std::string, double>& a, const std::map<std::string, double>& b, Tail tail)
{
    if (a.size() != b.size())
        throw InvalidArgument("paired_t_test: query sets differ (" + std::to_string(a.size()) + " vs " +
                              std::to_string(b.size()) + ")");
    std::vector<double> va;
    std::vector<double> vb;
    for (const auto& [qid, value] : a) {
        const auto it = b.find(qid);
        if (it == b.end()) throw InvalidArgument("paired_t_test: query " + qid + " missing from second run");
        va.push_back(value);
        vb.push_back(it->second);
    }
    return paired_t_test(va, vb, tail);
}

} // namespace qexp
