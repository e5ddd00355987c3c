#include "qexp/lm.hpp"

#include "binary_io.hpp"
#include "qexp/error.hpp"
#include "rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <set>

namespace qexp {

namespace {

const std::vector<std::string>& special_tokens()
{
    static const std::vector<std::string> s{"<pad>", "<unk>", "<bos>", "<eos>"};
    return s;
}

template <typename F>
void for_each_piece(std::string_view text, F&& f)
{
    const auto is_space = [](char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; };
    std::size_t i = 0;
    while (i < text.size()) {
        while (i < text.size() && is_space(text[i])) ++i;
        const std::size_t start = i;
        while (i < text.size() && !is_space(text[i])) ++i;
        if (i > start) f(text.substr(start, i - start));
    }
}

// Stable log-softmax of `logits` written into `out`; returns nothing.
void log_softmax(const double* logits, std::size_t n, double* out)
{
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) m = std::max(m, logits[i]);
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) sum += std::exp(logits[i] - m);
    const double lse = m + std::log(sum);
    for (std::size_t i = 0; i < n; ++i) out[i] = logits[i] - lse;
}

void check_tokens(std::span<const TokenId> tokens, std::size_t vocab)
{
    for (const auto t : tokens)
        if (t >= vocab) throw InvalidArgument("token id " + std::to_string(t) + " outside vocabulary");
}

// ---------------------------------------------------------------- bigram

class BigramModel final : public LanguageModel {
public:
    BigramModel(std::shared_ptr<const Vocab> vocab, std::uint64_t seed)
        : LanguageModel(vocab, seed, vocab->size() * vocab->size())
    {
    }

    Architecture architecture() const override { return Architecture::bigram_softmax; }
    std::unique_ptr<LanguageModel> clone() const override { return std::make_unique<BigramModel>(*this); }
    std::size_t max_length() const override { return std::numeric_limits<std::size_t>::max(); }

    double score(std::span<const TokenId> tokens, std::size_t first_target, std::span<double> grad,
                 double scale) const override
    {
        const std::size_t v = vocab_->size();
        check_tokens(tokens, v);
        std::vector<double> lp(v);
        double total = 0.0;
        for (std::size_t t = std::max<std::size_t>(first_target, 1); t < tokens.size(); ++t) {
            const std::size_t row = tokens[t - 1] * v;
            log_softmax(params_.data() + row, v, lp.data());
            total += lp[tokens[t]];
            if (!grad.empty()) {
                for (std::size_t j = 0; j < v; ++j) grad[row + j] -= scale * std::exp(lp[j]);
                grad[row + tokens[t]] += scale;
            }
        }
        return total;
    }

    std::vector<double> next_token_log_probs(std::span<const TokenId> context) const override
    {
        if (context.empty()) throw InvalidArgument("next_token_log_probs: empty context");
        const std::size_t v = vocab_->size();
        check_tokens(context, v);
        std::vector<double> lp(v);
        log_softmax(params_.data() + context.back() * v, v, lp.data());
        return lp;
    }
};

// ----------------------------------------------------------- transformer

constexpr double kLayerNormEps = 1e-5;
constexpr double kInitStd = 0.02;

struct LayerOffsets {
    std::size_t ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o, ln2_g, ln2_b, w_1, b_1, w_2, b_2;
};

struct Layout {
    std::size_t tok, pos;
    std::vector<LayerOffsets> layers;
    std::size_t lnf_g, lnf_b, w_out, b_out;
    std::size_t total;
};

Layout make_layout(const TransformerShape& s, std::size_t v)
{
    const std::size_t d = s.d_model, f = 4 * s.d_model;
    Layout l{};
    std::size_t at = 0;
    auto take = [&](std::size_t n) {
        const auto o = at;
        at += n;
        return o;
    };
    l.tok = take(v * d);
    l.pos = take(std::size_t{s.context} * d);
    for (std::uint32_t i = 0; i < s.layers; ++i) {
        LayerOffsets o{};
        o.ln1_g = take(d);
        o.ln1_b = take(d);
        o.w_qkv = take(d * 3 * d);
        o.b_qkv = take(3 * d);
        o.w_o = take(d * d);
        o.b_o = take(d);
        o.ln2_g = take(d);
        o.ln2_b = take(d);
        o.w_1 = take(d * f);
        o.b_1 = take(f);
        o.w_2 = take(f * d);
        o.b_2 = take(d);
        l.layers.push_back(o);
    }
    l.lnf_g = take(d);
    l.lnf_b = take(d);
    l.w_out = take(d * v);
    l.b_out = take(v);
    l.total = at;
    return l;
}

// Y[t, :] = b + X[t, :] * W   (X: T x K, W: K x N)
void linear(const double* x, std::size_t t_len, std::size_t k, const double* w, const double* b, std::size_t n,
            double* y)
{
    for (std::size_t t = 0; t < t_len; ++t) {
        double* yr = y + t * n;
        std::copy(b, b + n, yr);
        const double* xr = x + t * k;
        for (std::size_t i = 0; i < k; ++i) {
            const double xi = xr[i];
            const double* wr = w + i * n;
            for (std::size_t j = 0; j < n; ++j) yr[j] += xi * wr[j];
        }
    }
}

// Accumulates dW += X^T dY, db += sum dY, dX += dY W^T (dX may be null).
void linear_backward(const double* x, const double* dy, std::size_t t_len, std::size_t k, std::size_t n,
                     const double* w, double* dw, double* db, double* dx)
{
    for (std::size_t t = 0; t < t_len; ++t) {
        const double* dyr = dy + t * n;
        const double* xr = x + t * k;
        for (std::size_t j = 0; j < n; ++j) db[j] += dyr[j];
        for (std::size_t i = 0; i < k; ++i) {
            const double xi = xr[i];
            double* dwr = dw + i * n;
            const double* wr = w + i * n;
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                dwr[j] += xi * dyr[j];
                acc += wr[j] * dyr[j];
            }
            if (dx) dx[t * k + i] += acc;
        }
    }
}

// y = g * (x - mean) / sqrt(var + eps) + b, row-wise; keeps xhat and 1/sigma.
void layer_norm(const double* x, std::size_t t_len, std::size_t d, const double* g, const double* b, double* xhat,
                double* rstd, double* y)
{
    for (std::size_t t = 0; t < t_len; ++t) {
        const double* xr = x + t * d;
        double mean = 0.0;
        for (std::size_t i = 0; i < d; ++i) mean += xr[i];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t i = 0; i < d; ++i) var += (xr[i] - mean) * (xr[i] - mean);
        var /= static_cast<double>(d);
        const double r = 1.0 / std::sqrt(var + kLayerNormEps);
        rstd[t] = r;
        for (std::size_t i = 0; i < d; ++i) {
            const double h = (xr[i] - mean) * r;
            xhat[t * d + i] = h;
            y[t * d + i] = g[i] * h + b[i];
        }
    }
}

void layer_norm_backward(const double* xhat, const double* rstd, const double* dy, std::size_t t_len, std::size_t d,
                         const double* g, double* dg, double* db, double* dx)
{
    std::vector<double> dh(d);
    for (std::size_t t = 0; t < t_len; ++t) {
        const double* hr = xhat + t * d;
        const double* dyr = dy + t * d;
        double mean_dh = 0.0, mean_dh_h = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            dg[i] += dyr[i] * hr[i];
            db[i] += dyr[i];
            dh[i] = dyr[i] * g[i];
            mean_dh += dh[i];
            mean_dh_h += dh[i] * hr[i];
        }
        mean_dh /= static_cast<double>(d);
        mean_dh_h /= static_cast<double>(d);
        for (std::size_t i = 0; i < d; ++i) dx[t * d + i] += rstd[t] * (dh[i] - mean_dh - hr[i] * mean_dh_h);
    }
}

constexpr double kGeluC = 0.7978845608028654; // sqrt(2/pi)

double gelu(double u)
{
    return 0.5 * u * (1.0 + std::tanh(kGeluC * (u + 0.044715 * u * u * u)));
}

double gelu_grad(double u)
{
    const double inner = kGeluC * (u + 0.044715 * u * u * u);
    const double th = std::tanh(inner);
    return 0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * kGeluC * (1.0 + 3.0 * 0.044715 * u * u);
}

struct LayerCache {
    std::vector<double> x_in, ln1_hat, ln1_rstd, h1, qkv, probs, att, x_mid, ln2_hat, ln2_rstd, h2, u, act;
};

class TransformerModel final : public LanguageModel {
public:
    TransformerModel(std::shared_ptr<const Vocab> vocab, TransformerShape shape, std::uint64_t seed)
        : LanguageModel(vocab, seed, make_layout(shape, vocab->size()).total),
          shape_(shape),
          layout_(make_layout(shape, vocab->size()))
    {
    }

    void initialize()
    {
        detail::Rng rng(seed_);
        const std::size_t d = shape_.d_model, f = 4 * d, v = vocab_->size();
        auto normal = [&](std::size_t off, std::size_t n) {
            for (std::size_t i = 0; i < n; ++i) params_[off + i] = kInitStd * rng.normal();
        };
        auto ones = [&](std::size_t off, std::size_t n) { std::fill_n(params_.begin() + off, n, 1.0); };
        normal(layout_.tok, v * d);
        normal(layout_.pos, std::size_t{shape_.context} * d);
        for (const auto& o : layout_.layers) {
            ones(o.ln1_g, d);
            normal(o.w_qkv, d * 3 * d);
            normal(o.w_o, d * d);
            ones(o.ln2_g, d);
            normal(o.w_1, d * f);
            normal(o.w_2, f * d);
        }
        ones(layout_.lnf_g, d);
        normal(layout_.w_out, d * v);
    }

    Architecture architecture() const override { return Architecture::tiny_transformer; }
    std::unique_ptr<LanguageModel> clone() const override { return std::make_unique<TransformerModel>(*this); }
    std::size_t max_length() const override { return shape_.context; }
    const TransformerShape& shape() const { return shape_; }

    double score(std::span<const TokenId> tokens, std::size_t first_target, std::span<double> grad,
                 double scale) const override
    {
        first_target = std::max<std::size_t>(first_target, 1);
        if (first_target >= tokens.size()) return 0.0;
        const std::size_t first_pos = first_target - 1;
        const std::size_t n_pred = tokens.size() - first_target;
        std::vector<double> logp;
        std::vector<LayerCache> caches;
        std::vector<double> hf, lnf_hat, lnf_rstd;
        forward(tokens, first_pos, logp, grad.empty() ? nullptr : &caches, hf, lnf_hat, lnf_rstd);

        const std::size_t v = vocab_->size();
        double total = 0.0;
        for (std::size_t p = 0; p < n_pred; ++p) total += logp[p * v + tokens[first_target + p]];
        if (!grad.empty()) backward(tokens, first_pos, logp, caches, hf, lnf_hat, lnf_rstd, grad, scale);
        return total;
    }

    std::vector<double> next_token_log_probs(std::span<const TokenId> context) const override
    {
        if (context.empty()) throw InvalidArgument("next_token_log_probs: empty context");
        std::vector<double> logp, hf, lnf_hat, lnf_rstd;
        forward(context, context.size() - 1, logp, nullptr, hf, lnf_hat, lnf_rstd);
        return logp;
    }

private:
    // Runs the network over `tokens`; log-probs are produced only for
    // positions >= first_pos (rows of `logp`, each of vocabulary size).
    void forward(std::span<const TokenId> tokens, std::size_t first_pos, std::vector<double>& logp,
                 std::vector<LayerCache>* caches, std::vector<double>& hf, std::vector<double>& lnf_hat,
                 std::vector<double>& lnf_rstd) const
    {
        const std::size_t t_len = tokens.size();
        if (t_len > shape_.context)
            throw InvalidArgument("sequence of " + std::to_string(t_len) + " tokens exceeds context " +
                                  std::to_string(shape_.context));
        const std::size_t v = vocab_->size();
        check_tokens(tokens, v);
        const std::size_t d = shape_.d_model, f = 4 * d, nh = shape_.heads, dh = d / nh;
        const double* p = params_.data();
        const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

        std::vector<double> x(t_len * d);
        for (std::size_t t = 0; t < t_len; ++t)
            for (std::size_t i = 0; i < d; ++i)
                x[t * d + i] = p[layout_.tok + tokens[t] * d + i] + p[layout_.pos + t * d + i];

        if (caches) caches->resize(layout_.layers.size());
        LayerCache scratch;
        for (std::size_t l = 0; l < layout_.layers.size(); ++l) {
            const auto& o = layout_.layers[l];
            LayerCache& c = caches ? (*caches)[l] : scratch;
            c.x_in = x;
            c.ln1_hat.resize(t_len * d);
            c.ln1_rstd.resize(t_len);
            c.h1.resize(t_len * d);
            layer_norm(x.data(), t_len, d, p + o.ln1_g, p + o.ln1_b, c.ln1_hat.data(), c.ln1_rstd.data(), c.h1.data());
            c.qkv.resize(t_len * 3 * d);
            linear(c.h1.data(), t_len, d, p + o.w_qkv, p + o.b_qkv, 3 * d, c.qkv.data());

            // Causal attention; probs[h][i][j] for j <= i.
            c.probs.assign(nh * t_len * t_len, 0.0);
            c.att.assign(t_len * d, 0.0);
            std::vector<double> s(t_len);
            for (std::size_t h = 0; h < nh; ++h) {
                for (std::size_t i = 0; i < t_len; ++i) {
                    const double* q = c.qkv.data() + i * 3 * d + h * dh;
                    double m = -std::numeric_limits<double>::infinity();
                    for (std::size_t j = 0; j <= i; ++j) {
                        const double* k = c.qkv.data() + j * 3 * d + d + h * dh;
                        double dot = 0.0;
                        for (std::size_t e = 0; e < dh; ++e) dot += q[e] * k[e];
                        s[j] = dot * inv_sqrt;
                        m = std::max(m, s[j]);
                    }
                    double z = 0.0;
                    for (std::size_t j = 0; j <= i; ++j) z += (s[j] = std::exp(s[j] - m));
                    double* pr = c.probs.data() + (h * t_len + i) * t_len;
                    double* out = c.att.data() + i * d + h * dh;
                    for (std::size_t j = 0; j <= i; ++j) {
                        pr[j] = s[j] / z;
                        const double* val = c.qkv.data() + j * 3 * d + 2 * d + h * dh;
                        for (std::size_t e = 0; e < dh; ++e) out[e] += pr[j] * val[e];
                    }
                }
            }
            std::vector<double> proj(t_len * d);
            linear(c.att.data(), t_len, d, p + o.w_o, p + o.b_o, d, proj.data());
            for (std::size_t i = 0; i < x.size(); ++i) x[i] += proj[i];
            c.x_mid = x;

            c.ln2_hat.resize(t_len * d);
            c.ln2_rstd.resize(t_len);
            c.h2.resize(t_len * d);
            layer_norm(x.data(), t_len, d, p + o.ln2_g, p + o.ln2_b, c.ln2_hat.data(), c.ln2_rstd.data(), c.h2.data());
            c.u.resize(t_len * f);
            linear(c.h2.data(), t_len, d, p + o.w_1, p + o.b_1, f, c.u.data());
            c.act.resize(t_len * f);
            for (std::size_t i = 0; i < c.u.size(); ++i) c.act[i] = gelu(c.u[i]);
            linear(c.act.data(), t_len, f, p + o.w_2, p + o.b_2, d, proj.data());
            for (std::size_t i = 0; i < x.size(); ++i) x[i] += proj[i];
        }

        const std::size_t n_out = t_len - first_pos;
        hf.resize(n_out * d);
        lnf_hat.resize(n_out * d);
        lnf_rstd.resize(n_out);
        layer_norm(x.data() + first_pos * d, n_out, d, p + layout_.lnf_g, p + layout_.lnf_b, lnf_hat.data(),
                   lnf_rstd.data(), hf.data());
        std::vector<double> logits(n_out * v);
        linear(hf.data(), n_out, d, p + layout_.w_out, p + layout_.b_out, v, logits.data());
        logp.resize(n_out * v);
        for (std::size_t r = 0; r < n_out; ++r) log_softmax(logits.data() + r * v, v, logp.data() + r * v);
    }

    void backward(std::span<const TokenId> tokens, std::size_t first_pos, const std::vector<double>& logp,
                  const std::vector<LayerCache>& caches, const std::vector<double>& hf,
                  const std::vector<double>& lnf_hat, const std::vector<double>& lnf_rstd, std::span<double> grad,
                  double scale) const
    {
        const std::size_t t_len = tokens.size();
        const std::size_t v = vocab_->size();
        const std::size_t d = shape_.d_model, f = 4 * d, nh = shape_.heads, dh = d / nh;
        const double* p = params_.data();
        double* g = grad.data();
        const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
        const std::size_t n_out = t_len - first_pos;

        // d(scale * log p(target)) / dlogits = scale * (onehot - softmax)
        std::vector<double> dlogits(n_out * v);
        for (std::size_t r = 0; r < n_out; ++r) {
            for (std::size_t j = 0; j < v; ++j) dlogits[r * v + j] = -scale * std::exp(logp[r * v + j]);
            if (first_pos + r + 1 < t_len) dlogits[r * v + tokens[first_pos + r + 1]] += scale;
            else std::fill_n(dlogits.begin() + static_cast<std::ptrdiff_t>(r * v), v, 0.0);
        }
        std::vector<double> dhf(n_out * d, 0.0);
        linear_backward(hf.data(), dlogits.data(), n_out, d, v, p + layout_.w_out, g + layout_.w_out,
                        g + layout_.b_out, dhf.data());
        std::vector<double> dx(t_len * d, 0.0);
        layer_norm_backward(lnf_hat.data(), lnf_rstd.data(), dhf.data(), n_out, d, p + layout_.lnf_g,
                            g + layout_.lnf_g, g + layout_.lnf_b, dx.data() + first_pos * d);

        for (std::size_t l = layout_.layers.size(); l-- > 0;) {
            const auto& o = layout_.layers[l];
            const LayerCache& c = caches[l];

            // MLP block: x_out = x_mid + W2 gelu(W1 LN2(x_mid))
            std::vector<double> dact(t_len * f, 0.0);
            linear_backward(c.act.data(), dx.data(), t_len, f, d, p + o.w_2, g + o.w_2, g + o.b_2, dact.data());
            for (std::size_t i = 0; i < dact.size(); ++i) dact[i] *= gelu_grad(c.u[i]);
            std::vector<double> dh2(t_len * d, 0.0);
            linear_backward(c.h2.data(), dact.data(), t_len, d, f, p + o.w_1, g + o.w_1, g + o.b_1, dh2.data());
            layer_norm_backward(c.ln2_hat.data(), c.ln2_rstd.data(), dh2.data(), t_len, d, p + o.ln2_g, g + o.ln2_g,
                                g + o.ln2_b, dx.data());

            // Attention block: x_mid = x_in + Wo attn(LN1(x_in))
            std::vector<double> datt(t_len * d, 0.0);
            linear_backward(c.att.data(), dx.data(), t_len, d, d, p + o.w_o, g + o.w_o, g + o.b_o, datt.data());
            std::vector<double> dqkv(t_len * 3 * d, 0.0);
            std::vector<double> dp(t_len);
            for (std::size_t h = 0; h < nh; ++h) {
                for (std::size_t i = 0; i < t_len; ++i) {
                    const double* pr = c.probs.data() + (h * t_len + i) * t_len;
                    const double* dout = datt.data() + i * d + h * dh;
                    double dot_pdp = 0.0;
                    for (std::size_t j = 0; j <= i; ++j) {
                        const double* val = c.qkv.data() + j * 3 * d + 2 * d + h * dh;
                        double* dval = dqkv.data() + j * 3 * d + 2 * d + h * dh;
                        double acc = 0.0;
                        for (std::size_t e = 0; e < dh; ++e) {
                            acc += dout[e] * val[e];
                            dval[e] += pr[j] * dout[e];
                        }
                        dp[j] = acc;
                        dot_pdp += pr[j] * acc;
                    }
                    const double* q = c.qkv.data() + i * 3 * d + h * dh;
                    double* dq = dqkv.data() + i * 3 * d + h * dh;
                    for (std::size_t j = 0; j <= i; ++j) {
                        const double ds = pr[j] * (dp[j] - dot_pdp) * inv_sqrt;
                        const double* k = c.qkv.data() + j * 3 * d + d + h * dh;
                        double* dk = dqkv.data() + j * 3 * d + d + h * dh;
                        for (std::size_t e = 0; e < dh; ++e) {
                            dq[e] += ds * k[e];
                            dk[e] += ds * q[e];
                        }
                    }
                }
            }
            std::vector<double> dh1(t_len * d, 0.0);
            linear_backward(c.h1.data(), dqkv.data(), t_len, d, 3 * d, p + o.w_qkv, g + o.w_qkv, g + o.b_qkv,
                            dh1.data());
            layer_norm_backward(c.ln1_hat.data(), c.ln1_rstd.data(), dh1.data(), t_len, d, p + o.ln1_g, g + o.ln1_g,
                                g + o.ln1_b, dx.data());
        }

        for (std::size_t t = 0; t < t_len; ++t)
            for (std::size_t i = 0; i < d; ++i) {
                g[layout_.tok + tokens[t] * d + i] += dx[t * d + i];
                g[layout_.pos + t * d + i] += dx[t * d + i];
            }
    }

    TransformerShape shape_;
    Layout layout_;
};

void validate_shape(const TransformerShape& s)
{
    if (s.d_model == 0 || s.layers == 0 || s.heads == 0 || s.context < 2)
        throw InvalidArgument("transformer shape: all dimensions must be positive and context >= 2");
    if (s.d_model % s.heads != 0) throw InvalidArgument("transformer shape: d_model must be divisible by heads");
}

constexpr std::string_view kModelMagic = "QEXPLM1\n";
constexpr std::uint32_t kModelVersion = 1;

} // namespace

// ------------------------------------------------------------------ vocab

Vocab::Vocab() : Vocab(from_tokens(special_tokens())) {}

Vocab Vocab::from_tokens(std::vector<std::string> tokens)
{
    const auto& sp = special_tokens();
    if (tokens.size() < sp.size() || !std::equal(sp.begin(), sp.end(), tokens.begin()))
        throw InvalidArgument("vocabulary must start with <pad> <unk> <bos> <eos>");
    Vocab v(nullptr);
    v.tokens_ = std::move(tokens);
    for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
        const auto& t = v.tokens_[i];
        if (t.empty() || t.find_first_of(" \t\n\r\f\v") != std::string::npos)
            throw InvalidArgument("vocabulary entry must be a non-empty whitespace-free piece");
        if (!v.index_.emplace(t, static_cast<TokenId>(i)).second)
            throw InvalidArgument("duplicate vocabulary entry: " + t);
    }
    return v;
}

Vocab Vocab::build(std::span<const std::string> texts)
{
    std::set<std::string, std::less<>> pieces;
    for (const auto& text : texts) for_each_piece(text, [&](std::string_view p) { pieces.emplace(p); });
    auto tokens = special_tokens();
    for (const auto& p : pieces)
        if (std::find(tokens.begin(), tokens.begin() + 4, p) == tokens.begin() + 4) tokens.push_back(p);
    return from_tokens(std::move(tokens));
}

std::optional<TokenId> Vocab::find(std::string_view piece) const
{
    const auto it = index_.find(std::string(piece));
    if (it == index_.end()) return std::nullopt;
    return it->second;
}

std::vector<TokenId> Vocab::encode(std::string_view text) const
{
    std::vector<TokenId> out;
    for_each_piece(text, [&](std::string_view p) { out.push_back(find(p).value_or(unk)); });
    return out;
}

std::string Vocab::decode(std::span<const TokenId> ids) const
{
    std::string out;
    for (const auto id : ids) {
        if (!out.empty()) out += ' ';
        out += token(id);
    }
    return out;
}

// ------------------------------------------------------------- factories

std::unique_ptr<LanguageModel> make_bigram(std::shared_ptr<const Vocab> vocab, std::uint64_t seed)
{
    if (!vocab) throw InvalidArgument("make_bigram: null vocabulary");
    return std::make_unique<BigramModel>(std::move(vocab), seed);
}

std::unique_ptr<LanguageModel> make_transformer(std::shared_ptr<const Vocab> vocab, TransformerShape shape,
                                                std::uint64_t seed)
{
    if (!vocab) throw InvalidArgument("make_transformer: null vocabulary");
    validate_shape(shape);
    auto m = std::make_unique<TransformerModel>(std::move(vocab), shape, seed);
    m->initialize();
    return m;
}

const TransformerShape* transformer_shape(const LanguageModel& model)
{
    const auto* t = dynamic_cast<const TransformerModel*>(&model);
    return t ? &t->shape() : nullptr;
}

// ---------------------------------------------------------------- scoring

namespace {

std::vector<TokenId> concat(std::span<const TokenId> x, std::span<const TokenId> y, const LanguageModel& model)
{
    if (x.empty()) throw InvalidArgument("log_prob: empty prompt");
    if (x.size() + y.size() > model.max_length())
        throw InvalidArgument("log_prob: sequence of " + std::to_string(x.size() + y.size()) +
                              " tokens exceeds model length " + std::to_string(model.max_length()));
    std::vector<TokenId> seq(x.begin(), x.end());
    seq.insert(seq.end(), y.begin(), y.end());
    return seq;
}

} // namespace

double log_prob(const LanguageModel& model, std::span<const TokenId> x, std::span<const TokenId> y)
{
    const auto seq = concat(x, y, model);
    return model.score(seq, x.size(), {}, 0.0);
}

double log_prob_grad(const LanguageModel& model, std::span<const TokenId> x, std::span<const TokenId> y,
                     std::span<double> grad, double scale)
{
    if (grad.size() != model.param_count()) throw InvalidArgument("log_prob_grad: gradient size mismatch");
    const auto seq = concat(x, y, model);
    return model.score(seq, x.size(), grad, scale);
}

std::vector<TokenId> greedy_generate(const LanguageModel& model, std::span<const TokenId> x, std::size_t max_len)
{
    if (x.empty()) throw InvalidArgument("greedy_generate: empty prompt");
    std::vector<TokenId> seq(x.begin(), x.end());
    std::vector<TokenId> out;
    while (out.size() < max_len && seq.size() < model.max_length()) {
        const auto lp = model.next_token_log_probs(seq);
        TokenId best = 0;
        for (TokenId i = 1; i < lp.size(); ++i)
            if (lp[i] > lp[best]) best = i;
        out.push_back(best);
        seq.push_back(best);
        if (best == Vocab::eos) break;
    }
    return out;
}

ReferenceModel clone_frozen(const LanguageModel& model)
{
    return ReferenceModel(std::unique_ptr<const LanguageModel>(model.clone()));
}

// ------------------------------------------------------------ checkpoints

std::string serialize_model(const LanguageModel& model)
{
    detail::ByteWriter w;
    w.raw(kModelMagic);
    w.pod(kModelVersion);
    w.pod(static_cast<std::uint8_t>(model.architecture()));
    w.pod(model.seed());
    const TransformerShape shape = transformer_shape(model) ? *transformer_shape(model) : TransformerShape{0, 0, 0, 0};
    w.pod(shape.d_model);
    w.pod(shape.layers);
    w.pod(shape.heads);
    w.pod(shape.context);
    const auto& tokens = model.vocab().tokens();
    w.pod(static_cast<std::uint32_t>(tokens.size()));
    for (const auto& t : tokens) w.str(t);
    w.pod(static_cast<std::uint64_t>(model.param_count()));
    for (const double p : model.params()) w.pod(p);
    w.seal();
    return w.bytes();
}

std::unique_ptr<LanguageModel> deserialize_model(std::string_view bytes)
{
    const std::string what = "model checkpoint";
    if (bytes.size() < kModelMagic.size() || bytes.substr(0, kModelMagic.size()) != kModelMagic)
        throw FormatError("not a model checkpoint (bad magic header)");
    {
        detail::ByteReader peek(bytes.substr(kModelMagic.size()), what);
        const auto version = peek.pod<std::uint32_t>();
        if (version != kModelVersion)
            throw FormatError("model checkpoint version mismatch: found " + std::to_string(version) + ", expected " +
                              std::to_string(kModelVersion));
    }
    detail::ByteReader r(detail::verify_sealed(bytes, what), what);
    r.raw(kModelMagic.size());
    r.pod<std::uint32_t>();
    const auto arch = r.pod<std::uint8_t>();
    const auto seed = r.pod<std::uint64_t>();
    TransformerShape shape;
    shape.d_model = r.pod<std::uint32_t>();
    shape.layers = r.pod<std::uint32_t>();
    shape.heads = r.pod<std::uint32_t>();
    shape.context = r.pod<std::uint32_t>();
    const auto nv = r.pod<std::uint32_t>();
    if (nv > r.remaining()) r.fail("vocabulary size exceeds file size");
    std::vector<std::string> tokens;
    tokens.reserve(nv);
    for (std::uint32_t i = 0; i < nv; ++i) tokens.push_back(r.str());
    std::shared_ptr<const Vocab> vocab;
    try {
        vocab = std::make_shared<const Vocab>(Vocab::from_tokens(std::move(tokens)));
    } catch (const InvalidArgument& e) {
        r.fail(e.what());
    }

    std::unique_ptr<LanguageModel> model;
    if (arch == static_cast<std::uint8_t>(Architecture::bigram_softmax)) {
        model = make_bigram(vocab, seed);
    } else if (arch == static_cast<std::uint8_t>(Architecture::tiny_transformer)) {
        try {
            validate_shape(shape);
        } catch (const InvalidArgument& e) {
            r.fail(e.what());
        }
        model = std::make_unique<TransformerModel>(vocab, shape, seed);
    } else {
        r.fail("unknown architecture " + std::to_string(arch));
    }
    const auto np = r.pod<std::uint64_t>();
    if (np != model->param_count()) r.fail("parameter count does not match architecture");
    auto params = model->params();
    for (std::uint64_t i = 0; i < np; ++i) params[i] = r.pod<double>();
    if (r.remaining() != 0) r.fail("trailing bytes");
    return model;
}

void save_model(const LanguageModel& model, const std::filesystem::path& path)
{
    detail::write_file(path, serialize_model(model));
}

std::unique_ptr<LanguageModel> load_model(const std::filesystem::path& path)
{
    return deserialize_model(detail::read_file(path));
}

} // namespace qexp
