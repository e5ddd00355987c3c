#include "qexp/trainer.hpp"

#include "qexp/error.hpp"
#include "rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace qexp {

namespace {

// -log sigmoid(z), stable for large |z|.
double neg_log_sigmoid(double z)
{
    return z >= 0 ? std::log1p(std::exp(-z)) : -z + std::log1p(std::exp(z));
}

double sigmoid(double z)
{
    return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

void check_finite(double loss, std::size_t step)
{
    if (!std::isfinite(loss)) throw TrainingError("non-finite loss at optimizer step " + std::to_string(step));
}

// Deterministic per-epoch permutation of [0, n).
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch)
{
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    detail::Rng rng(seed * 0x9E3779B97F4A7C15ULL + epoch + 1);
    rng.shuffle(order);
    return order;
}

struct Schedule {
    std::size_t batch_size, grad_accum, epochs, per_epoch, total;
};

Schedule make_schedule(std::size_t n, std::size_t batch_size, std::size_t grad_accum, std::size_t epochs)
{
    if (n == 0) throw InvalidArgument("training set is empty");
    if (batch_size == 0 || grad_accum == 0 || epochs == 0)
        throw InvalidArgument("batch_size, grad_accum and epochs must be >= 1");
    const std::size_t effective = batch_size * grad_accum;
    const std::size_t per_epoch = (n + effective - 1) / effective;
    return {batch_size, grad_accum, epochs, per_epoch, per_epoch * epochs};
}

// Runs the epoch/step/micro-batch loop. `micro` returns the mean loss of a
// micro-batch and its mean gradient; accumulation weights by batch size so a
// step optimizes the mean over its examples.
template <typename MicroFn, typename RecordFn>
TrainReport run_loop(LanguageModel& model, std::size_t n, const Schedule& s, double base_lr, double warmup,
                     std::uint64_t seed, MicroFn&& micro, RecordFn&& on_step)
{
    TrainReport report;
    AdamW opt(model.param_count());
    std::vector<double> grad(model.param_count());
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < s.epochs; ++epoch) {
        const auto order = epoch_order(n, seed, epoch);
        double epoch_sum = 0.0;
        for (std::size_t begin = 0; begin < n; begin += s.batch_size * s.grad_accum) {
            const std::size_t end = std::min(n, begin + s.batch_size * s.grad_accum);
            const double count = static_cast<double>(end - begin);
            std::fill(grad.begin(), grad.end(), 0.0);
            double loss = 0.0;
            StepRecord rec;
            for (std::size_t mb = begin; mb < end; mb += s.batch_size) {
                const std::size_t mb_end = std::min(end, mb + s.batch_size);
                const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(mb),
                                                   order.begin() + static_cast<std::ptrdiff_t>(mb_end));
                const double w = static_cast<double>(idx.size()) / count;
                const auto [mb_loss, mb_grad] = micro(idx, rec, w);
                loss += w * mb_loss;
                for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += w * mb_grad[i];
            }
            ++step;
            check_finite(loss, step);
            rec.step = step;
            rec.epoch = epoch + 1;
            rec.lr = scheduled_lr(base_lr, step - 1, s.total, warmup);
            rec.loss = loss;
            opt.step(model.params(), grad, rec.lr);
            on_step(rec);
            report.steps.push_back(rec);
            epoch_sum += loss * count;
        }
        report.epoch_loss.push_back(epoch_sum / static_cast<double>(n));
    }
    return report;
}

} // namespace

// ------------------------------------------------------------------ losses

LossAndGrad sft_loss(const LanguageModel& model, std::span<const TokenSequence> batch)
{
    if (batch.empty()) throw InvalidArgument("sft_loss: empty batch");
    std::size_t counted = 0;
    for (const auto& s : batch) {
        if (s.prompt_length == 0 || s.prompt_length > s.tokens.size())
            throw InvalidArgument("sft_loss: prompt length must be in [1, sequence length]");
        if (s.prompt_length < s.tokens.size()) ++counted;
    }
    if (counted == 0) throw InvalidArgument("sft_loss: every sequence is fully masked");

    LossAndGrad out{0.0, std::vector<double>(model.param_count(), 0.0)};
    const double scale = -1.0 / static_cast<double>(counted);
    for (const auto& s : batch) {
        if (s.prompt_length == s.tokens.size()) continue;
        const std::span<const TokenId> all(s.tokens);
        out.loss -= log_prob_grad(model, all.first(s.prompt_length), all.subspan(s.prompt_length), out.grad, scale);
    }
    out.loss /= static_cast<double>(counted);
    return out;
}

ReferenceScores reference_scores(const ReferenceModel& ref, const PreferenceExample& ex)
{
    return {log_prob(ref.model(), ex.prompt, ex.chosen), log_prob(ref.model(), ex.prompt, ex.rejected)};
}

DpoLossResult dpo_loss(const LanguageModel& policy, const ReferenceModel& ref, std::span<const PreferenceExample> batch,
                       double beta)
{
    if (&ref.model() != &policy && ref.model().vocab() != policy.vocab())
        throw InvalidArgument("dpo_loss: policy and reference use different vocabularies");
    std::vector<ReferenceScores> scores;
    scores.reserve(batch.size());
    for (const auto& ex : batch) scores.push_back(reference_scores(ref, ex));
    return dpo_loss(policy, scores, batch, beta);
}

DpoLossResult dpo_loss(const LanguageModel& policy, std::span<const ReferenceScores> ref,
                       std::span<const PreferenceExample> batch, double beta)
{
    if (batch.empty()) throw InvalidArgument("dpo_loss: empty batch");
    if (ref.size() != batch.size()) throw InvalidArgument("dpo_loss: one reference score per pair required");
    if (!(beta > 0.0)) throw InvalidArgument("dpo_loss: beta must be > 0");

    const std::size_t np = policy.param_count();
    DpoLossResult out{0.0, std::vector<double>(np, 0.0), {}, 0};
    std::vector<double> g_plus(np), g_minus(np);
    const double n = static_cast<double>(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto& ex = batch[i];
        if (ex.chosen == ex.rejected) {
            out.inner.push_back(0.0);
            out.loss += std::numbers::ln2;
            ++out.degenerate;
            continue;
        }
        std::fill(g_plus.begin(), g_plus.end(), 0.0);
        std::fill(g_minus.begin(), g_minus.end(), 0.0);
        const double lp_plus = log_prob_grad(policy, ex.prompt, ex.chosen, g_plus, 1.0);
        const double lp_minus = log_prob_grad(policy, ex.prompt, ex.rejected, g_minus, 1.0);
        const double inner = (lp_plus - lp_minus) - (ref[i].chosen - ref[i].rejected);
        const double z = beta * inner;
        out.inner.push_back(inner);
        out.loss += neg_log_sigmoid(z);
        // d/dtheta of -log sigmoid(z) = -(1 - sigmoid(z)) * beta * (grad+ - grad-)
        const double c = -sigmoid(-z) * beta / n;
        for (std::size_t k = 0; k < np; ++k) out.grad[k] += c * (g_plus[k] - g_minus[k]);
    }
    out.loss /= n;
    return out;
}

double dpo_objective(std::span<const double> policy_chosen, std::span<const double> policy_rejected,
                     std::span<const double> ref_chosen, std::span<const double> ref_rejected, double beta)
{
    const std::size_t n = policy_chosen.size();
    if (n == 0 || policy_rejected.size() != n || ref_chosen.size() != n || ref_rejected.size() != n)
        throw InvalidArgument("dpo_objective: inputs must be non-empty and equally sized");
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        loss += neg_log_sigmoid(beta * ((policy_chosen[i] - policy_rejected[i]) - (ref_chosen[i] - ref_rejected[i])));
    return loss / static_cast<double>(n);
}

// --------------------------------------------------------------- optimizer

AdamW::AdamW(std::size_t param_count, Options options) : o_(options), m_(param_count, 0.0), v_(param_count, 0.0) {}

void AdamW::step(std::span<double> params, std::span<const double> grad, double lr)
{
    if (params.size() != m_.size() || grad.size() != m_.size()) throw InvalidArgument("AdamW: size mismatch");
    ++t_;
    const double bc1 = 1.0 - std::pow(o_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(o_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        m_[i] = o_.beta1 * m_[i] + (1.0 - o_.beta1) * grad[i];
        v_[i] = o_.beta2 * v_[i] + (1.0 - o_.beta2) * grad[i] * grad[i];
        const double mhat = m_[i] / bc1;
        const double vhat = v_[i] / bc2;
        params[i] -= lr * (mhat / (std::sqrt(vhat) + o_.eps) + o_.weight_decay * params[i]);
    }
}

double scheduled_lr(double base_lr, std::size_t step, std::size_t total_steps, double warmup_fraction)
{
    if (total_steps == 0) return base_lr;
    const auto warmup =
        static_cast<std::size_t>(std::ceil(std::clamp(warmup_fraction, 0.0, 1.0) * static_cast<double>(total_steps)));
    if (step < warmup) return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
    const double span = static_cast<double>(std::max<std::size_t>(1, total_steps - warmup));
    const double progress = std::min(1.0, static_cast<double>(step - warmup) / span);
    return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

// ---------------------------------------------------------------- training

TrainReport train_sft(LanguageModel& model, std::span<const TokenSequence> data, const SftConfig& cfg)
{
    const auto sched = make_schedule(data.size(), cfg.batch_size, cfg.grad_accum, cfg.epochs);
    std::vector<TokenSequence> mb;
    auto micro = [&](const std::vector<std::size_t>& idx, StepRecord&, double) {
        mb.clear();
        for (const auto i : idx) mb.push_back(data[i]);
        return sft_loss(model, mb);
    };
    return run_loop(model, data.size(), sched, cfg.lr, cfg.warmup_fraction, cfg.seed, micro, [](StepRecord&) {});
}

double mean_margin(const LanguageModel& policy, const ReferenceModel& ref, std::span<const PreferenceExample> pairs,
                   double beta)
{
    if (pairs.empty()) throw InvalidArgument("mean_margin: no pairs");
    double sum = 0.0;
    for (const auto& ex : pairs) {
        const auto r = reference_scores(ref, ex);
        sum += (log_prob(policy, ex.prompt, ex.chosen) - log_prob(policy, ex.prompt, ex.rejected)) -
               (r.chosen - r.rejected);
    }
    return beta * sum / static_cast<double>(pairs.size());
}

TrainReport train_dpo(LanguageModel& policy, const ReferenceModel& ref, std::span<const PreferenceExample> pairs,
                      const DpoConfig& cfg)
{
    if (!(cfg.beta > 0.0)) throw InvalidArgument("DPO beta must be > 0");
    const auto sched = make_schedule(pairs.size(), cfg.batch_size, cfg.grad_accum, cfg.epochs);
    if (ref.model().vocab() != policy.vocab())
        throw InvalidArgument("train_dpo: policy and reference use different vocabularies");

    // The reference is frozen, so its scores are computed once.
    std::vector<ReferenceScores> ref_scores;
    ref_scores.reserve(pairs.size());
    std::size_t degenerate = 0;
    for (const auto& ex : pairs) {
        ref_scores.push_back(reference_scores(ref, ex));
        if (ex.chosen == ex.rejected) ++degenerate;
    }
    const double before = mean_margin(policy, ref, pairs, cfg.beta);

    std::vector<PreferenceExample> mb;
    std::vector<ReferenceScores> mb_ref;
    double step_margin = 0.0;
    auto micro = [&](const std::vector<std::size_t>& idx, StepRecord&, double weight) {
        mb.clear();
        mb_ref.clear();
        for (const auto i : idx) {
            mb.push_back(pairs[i]);
            mb_ref.push_back(ref_scores[i]);
        }
        auto r = dpo_loss(policy, mb_ref, mb, cfg.beta);
        const double inner_mean = std::accumulate(r.inner.begin(), r.inner.end(), 0.0) / static_cast<double>(r.inner.size());
        step_margin += weight * cfg.beta * inner_mean;
        return LossAndGrad{r.loss, std::move(r.grad)};
    };
    auto on_step = [&](StepRecord& rec) {
        rec.margin = step_margin;
        step_margin = 0.0;
    };
    auto report = run_loop(policy, pairs.size(), sched, cfg.lr, cfg.warmup_fraction, cfg.seed, micro, on_step);
    report.degenerate_pairs = degenerate;
    report.margin_before = before;
    report.margin_after = mean_margin(policy, ref, pairs, cfg.beta);
    return report;
}

std::string report_jsonl(const TrainReport& report)
{
    std::string out;
    for (const auto& s : report.steps) {
        nlohmann::ordered_json j{{"step", s.step}, {"epoch", s.epoch}, {"lr", s.lr}, {"loss", s.loss}};
        if (s.margin) j["margin"] = *s.margin;
        out += j.dump() + '\n';
    }
    nlohmann::ordered_json summary{{"summary", true}, {"steps", report.steps.size()}, {"epoch_loss", report.epoch_loss}};
    if (report.margin_before) summary["margin_before"] = *report.margin_before;
    if (report.margin_after) summary["margin_after"] = *report.margin_after;
    if (report.margin_before) summary["degenerate_pairs"] = report.degenerate_pairs;
    summary["checkpoint"] = report.checkpoint;
    out += summary.dump() + '\n';
    return out;
}

// ------------------------------------------------------------- sequences

std::vector<TokenId> encode_prompt(const Vocab& vocab, std::string_view prompt, const SequenceLayout& layout)
{
    const auto ids = vocab.encode(prompt);
    const std::size_t keep = std::min(ids.size(), layout.prompt_tokens);
    std::vector<TokenId> out{Vocab::bos};
    out.insert(out.end(), ids.end() - static_cast<std::ptrdiff_t>(keep), ids.end());
    return out;
}

std::vector<TokenId> encode_target(const Vocab& vocab, std::string_view target, std::size_t budget)
{
    auto ids = vocab.encode(target);
    ids.push_back(Vocab::eos);
    if (ids.size() > budget) ids.resize(budget);
    return ids;
}

namespace {

std::size_t target_budget(const LanguageModel& model, std::size_t prompt_len)
{
    const std::size_t max = model.max_length();
    if (prompt_len >= max) throw InvalidArgument("prompt does not leave room for a continuation");
    return max - prompt_len;
}

} // namespace

TokenSequence make_sft_sequence(const LanguageModel& model, std::string_view prompt, std::string_view target,
                                const SequenceLayout& layout)
{
    TokenSequence s;
    s.tokens = encode_prompt(model.vocab(), prompt, layout);
    s.prompt_length = s.tokens.size();
    const auto y = encode_target(model.vocab(), target, target_budget(model, s.prompt_length));
    s.tokens.insert(s.tokens.end(), y.begin(), y.end());
    return s;
}

PreferenceExample make_preference_example(const LanguageModel& model, const PreferencePair& pair,
                                          const SequenceLayout& layout)
{
    PreferenceExample ex;
    ex.prompt = encode_prompt(model.vocab(), pair.prompt, layout);
    const auto budget = target_budget(model, ex.prompt.size());
    ex.chosen = encode_target(model.vocab(), pair.chosen, budget);
    ex.rejected = encode_target(model.vocab(), pair.rejected, budget);
    return ex;
}

std::string generate_text(const LanguageModel& model, std::string_view prompt, const SequenceLayout& layout,
                          std::size_t max_tokens)
{
    const auto x = encode_prompt(model.vocab(), prompt, layout);
    auto ids = greedy_generate(model, x, max_tokens);
    if (!ids.empty() && ids.back() == Vocab::eos) ids.pop_back();
    // Special tokens carry no text.
    std::erase_if(ids, [](TokenId t) { return t <= Vocab::eos; });
    return model.vocab().decode(ids);
}

std::vector<TextExample> sft_examples(std::span<const ExpansionRecord> records, SftTargets targets)
{
    std::vector<TextExample> out;
    for (const auto& r : records) {
        const auto prompt = prompt_text(build_prompt(r.query, PromptMode::zero));
        if (targets != SftTargets::e2_only) out.push_back({prompt, r.e1});
        if (targets != SftTargets::e1_only) out.push_back({prompt, r.e2});
    }
    return out;
}

} // namespace qexp
