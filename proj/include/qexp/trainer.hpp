#pragma once

#include "qexp/expansion.hpp"
#include "qexp/lm.hpp"
#include "qexp/preference.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace qexp {

// One training sequence; the loss covers tokens[prompt_length..] only.
struct TokenSequence {
    std::vector<TokenId> tokens;
    std::size_t prompt_length = 0;
};

struct PreferenceExample {
    std::vector<TokenId> prompt;
    std::vector<TokenId> chosen;
    std::vector<TokenId> rejected;
};

struct LossAndGrad {
    double loss = 0.0;
    std::vector<double> grad; // d loss / d params
};

// Mean over sequences of the summed continuation NLL. Sequences without
// continuation tokens are not counted; an all-prompt batch throws.
LossAndGrad sft_loss(const LanguageModel& model, std::span<const TokenSequence> batch);

struct DpoLossResult {
    double loss = 0.0;
    std::vector<double> grad;  // policy only
    std::vector<double> inner; // per pair: (l_pol(y+) - l_pol(y-)) - (l_ref(y+) - l_ref(y-))
    std::size_t degenerate = 0; // token-identical chosen/rejected pairs
};

// Reference log-likelihoods of (chosen, rejected) for one pair.
struct ReferenceScores {
    double chosen = 0.0;
    double rejected = 0.0;
};

ReferenceScores reference_scores(const ReferenceModel& ref, const PreferenceExample& ex);

// -mean log sigmoid(beta * inner). Identical chosen/rejected contribute ln 2
// and no gradient.
DpoLossResult dpo_loss(const LanguageModel& policy, const ReferenceModel& ref, std::span<const PreferenceExample> batch,
                       double beta);
// Same with reference scores supplied (one per pair).
DpoLossResult dpo_loss(const LanguageModel& policy, std::span<const ReferenceScores> ref,
                       std::span<const PreferenceExample> batch, double beta);

// The loss from cached log-likelihoods alone.
double dpo_objective(std::span<const double> policy_chosen, std::span<const double> policy_rejected,
                     std::span<const double> ref_chosen, std::span<const double> ref_rejected, double beta);

// Decoupled weight decay Adam.
class AdamW {
public:
    struct Options {
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
        double weight_decay = 0.01;
    };

    explicit AdamW(std::size_t param_count) : AdamW(param_count, Options{}) {}
    AdamW(std::size_t param_count, Options options);
    void step(std::span<double> params, std::span<const double> grad, double lr);
    std::size_t steps() const { return t_; }

private:
    Options o_;
    std::vector<double> m_, v_;
    std::size_t t_ = 0;
};

// Linear warmup over ceil(warmup_fraction * total) steps, then
// lr * 0.5 * (1 + cos(pi * progress)). `step` is 0-based.
double scheduled_lr(double base_lr, std::size_t step, std::size_t total_steps, double warmup_fraction);

struct SftConfig {
    double lr = 2e-5;
    std::size_t batch_size = 2;
    std::size_t grad_accum = 4;
    std::size_t epochs = 2;
    double warmup_fraction = 0.10;
    std::uint64_t seed = 0;
};

struct DpoConfig {
    double beta = 0.05;
    double lr = 2e-6;
    std::size_t batch_size = 2;
    std::size_t grad_accum = 4;
    std::size_t epochs = 2;
    double warmup_fraction = 0.05;
    std::uint64_t seed = 0;
};

struct StepRecord {
    std::size_t step = 0; // 1-based optimizer step
    std::size_t epoch = 0;
    double lr = 0.0;
    double loss = 0.0;
    std::optional<double> margin; // DPO: beta * mean inner over the step's pairs
};

struct TrainReport {
    std::vector<StepRecord> steps;
    std::vector<double> epoch_loss; // mean over examples
    std::optional<double> margin_before; // DPO: beta * mean inner over the training set
    std::optional<double> margin_after;
    std::size_t degenerate_pairs = 0;
    std::string checkpoint;
};

// Mutates `model` in place. Throws TrainingError on a non-finite loss.
TrainReport train_sft(LanguageModel& model, std::span<const TokenSequence> data, const SftConfig& cfg);
TrainReport train_dpo(LanguageModel& policy, const ReferenceModel& ref, std::span<const PreferenceExample> pairs,
                      const DpoConfig& cfg);

// beta * mean inner over `pairs`.
double mean_margin(const LanguageModel& policy, const ReferenceModel& ref, std::span<const PreferenceExample> pairs,
                   double beta);

// JSONL: one record per step, then one summary record.
std::string report_jsonl(const TrainReport& report);

// ----------------------------------------------------- text <-> sequences

// How prompt/target text is laid out in the model's window: bos, the last
// `prompt_tokens` prompt pieces, then the target (+eos if it fits).
struct SequenceLayout {
    std::size_t prompt_tokens = 16;
};

std::vector<TokenId> encode_prompt(const Vocab& vocab, std::string_view prompt, const SequenceLayout& layout);
// Target ids plus eos, cut to `budget` tokens (eos is dropped when cut).
std::vector<TokenId> encode_target(const Vocab& vocab, std::string_view target, std::size_t budget);

TokenSequence make_sft_sequence(const LanguageModel& model, std::string_view prompt, std::string_view target,
                                const SequenceLayout& layout);
PreferenceExample make_preference_example(const LanguageModel& model, const PreferencePair& pair,
                                          const SequenceLayout& layout);

// Greedy continuation of the prompt, decoded without eos.
std::string generate_text(const LanguageModel& model, std::string_view prompt, const SequenceLayout& layout,
                          std::size_t max_tokens);

enum class SftTargets { both, e1_only, e2_only };

struct TextExample {
    std::string prompt;
    std::string target;
};

// Zero-shot prompt paired with e1 and/or e2 for every record.
std::vector<TextExample> sft_examples(std::span<const ExpansionRecord> records, SftTargets targets);

} // namespace qexp
