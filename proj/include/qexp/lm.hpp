#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace qexp {

using TokenId = std::uint32_t;

// Whitespace-piece vocabulary. Ids 0-3 are the special tokens.
class Vocab {
public:
    static constexpr TokenId pad = 0;
    static constexpr TokenId unk = 1;
    static constexpr TokenId bos = 2;
    static constexpr TokenId eos = 3;

    Vocab();
    // Specials followed by every distinct piece of `texts` in byte order.
    static Vocab build(std::span<const std::string> texts);
    static Vocab from_tokens(std::vector<std::string> tokens); // specials must lead

    std::vector<TokenId> encode(std::string_view text) const; // OOV pieces map to unk
    std::string decode(std::span<const TokenId> ids) const;   // pieces joined by single spaces

    std::size_t size() const { return tokens_.size(); }
    const std::string& token(TokenId id) const { return tokens_.at(id); }
    std::optional<TokenId> find(std::string_view piece) const;
    const std::vector<std::string>& tokens() const { return tokens_; }

    bool operator==(const Vocab& other) const { return tokens_ == other.tokens_; }

private:
    explicit Vocab(std::nullptr_t) {}

    std::vector<std::string> tokens_;
    std::unordered_map<std::string, TokenId> index_;
};

enum class Architecture : std::uint8_t { bigram_softmax = 0, tiny_transformer = 1 };

struct TransformerShape {
    std::uint32_t d_model = 32;
    std::uint32_t layers = 2;
    std::uint32_t heads = 2;
    std::uint32_t context = 64;

    bool operator==(const TransformerShape&) const = default;
};

// Autoregressive LM over a flat, double-precision parameter vector. A
// sequence is scored position by position: tokens[t] is predicted from
// tokens[0..t). Instances are value-like snapshots; training mutates
// params() between steps only.
class LanguageModel {
public:
    virtual ~LanguageModel() = default;

    virtual Architecture architecture() const = 0;
    virtual std::unique_ptr<LanguageModel> clone() const = 0;
    // Longest scoreable sequence (prompt + continuation).
    virtual std::size_t max_length() const = 0;

    // Sum of log p(tokens[t] | tokens[<t]) for t >= first_target. When `grad`
    // is non-empty, adds scale * d(sum)/d(params) into it.
    virtual double score(std::span<const TokenId> tokens, std::size_t first_target, std::span<double> grad,
                         double scale) const = 0;

    // Log-probabilities of the next token after `context`.
    virtual std::vector<double> next_token_log_probs(std::span<const TokenId> context) const = 0;

    const Vocab& vocab() const { return *vocab_; }
    std::uint64_t seed() const { return seed_; }
    std::span<const double> params() const { return params_; }
    std::span<double> params() { return params_; }
    std::size_t param_count() const { return params_.size(); }

protected:
    LanguageModel(std::shared_ptr<const Vocab> vocab, std::uint64_t seed, std::size_t param_count)
        : vocab_(std::move(vocab)), seed_(seed), params_(param_count, 0.0)
    {
    }

    std::shared_ptr<const Vocab> vocab_;
    std::uint64_t seed_;
    std::vector<double> params_;
};

// V x V next-token logit table, initialized to zeros (uniform).
std::unique_ptr<LanguageModel> make_bigram(std::shared_ptr<const Vocab> vocab, std::uint64_t seed = 0);

// Pre-LayerNorm decoder: learned token + position embeddings, causal
// multi-head attention, tanh-GELU MLP (4x), final LayerNorm and an untied
// output projection. Weights ~ N(0, 0.02^2) from `seed`; biases 0; LN gains 1.
std::unique_ptr<LanguageModel> make_transformer(std::shared_ptr<const Vocab> vocab, TransformerShape shape,
                                                std::uint64_t seed);

const TransformerShape* transformer_shape(const LanguageModel& model); // nullptr for other architectures

// log p(y | x), summed over continuation tokens. Empty y gives 0.
// Throws InvalidArgument for an empty prompt or an over-long sequence.
double log_prob(const LanguageModel& model, std::span<const TokenId> x, std::span<const TokenId> y);
// Same, adding scale * d log p / d params into grad.
double log_prob_grad(const LanguageModel& model, std::span<const TokenId> x, std::span<const TokenId> y,
                     std::span<double> grad, double scale);

// Argmax decoding (lowest id wins ties) until eos or max_len tokens; the eos,
// when produced, is included. Stops early at the model's max_length().
std::vector<TokenId> greedy_generate(const LanguageModel& model, std::span<const TokenId> x, std::size_t max_len);

// Immutable deep copy used as the frozen reference policy.
class ReferenceModel {
public:
    explicit ReferenceModel(std::unique_ptr<const LanguageModel> model) : model_(std::move(model)) {}
    const LanguageModel& model() const { return *model_; }

private:
    std::shared_ptr<const LanguageModel> model_;
};

ReferenceModel clone_frozen(const LanguageModel& model);

void save_model(const LanguageModel& model, const std::filesystem::path& path);
std::unique_ptr<LanguageModel> load_model(const std::filesystem::path& path);
std::string serialize_model(const LanguageModel& model);
std::unique_ptr<LanguageModel> deserialize_model(std::string_view bytes);

} // namespace qexp
