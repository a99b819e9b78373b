#pragma once

// Decoder-only transformer runtime with last-token residual hooks, plus the
// synthetic activation provider used as a ground-truth oracle.

#include "steerkit/core.hpp"

#include <algorithm>
#include <array>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace steerkit {

// Byte-level vocabulary: 256 byte values, then BOS and EOS.
inline constexpr int kBosToken = 256;
inline constexpr int kEosToken = 257;
inline constexpr int kByteVocabSize = 258;

inline constexpr int kMaxNewTokensDefault = 512;

struct ModelConfig {
    int n_layers = 4;
    int hidden_dim = 64;
    int n_heads = 4;
    int vocab_size = kByteVocabSize;
    int max_seq_len = 1024;
    int ff_dim = 0; // 0 means 4 * hidden_dim
    std::uint64_t seed = 0;

    int mlp_dim() const { return ff_dim > 0 ? ff_dim : 4 * hidden_dim; }

    void validate() const {
        if (n_layers < 1) fail(ErrorKind::Config, "model: n_layers must be >= 1");
        if (hidden_dim < 1) fail(ErrorKind::Config, "model: hidden_dim must be >= 1");
        if (n_heads < 1 || hidden_dim % n_heads != 0)
            fail(ErrorKind::Config, "model: n_heads must divide hidden_dim");
        if (vocab_size < 2) fail(ErrorKind::Config, "model: vocab_size must be >= 2");
        if (max_seq_len < 2) fail(ErrorKind::Config, "model: max_seq_len must be >= 2");
        if (ff_dim < 0) fail(ErrorKind::Config, "model: ff_dim must be >= 0");
    }
};

struct TokenSequence {
    std::vector<int> tokens;

    std::size_t size() const { return tokens.size(); }
    bool empty() const { return tokens.empty(); }
    friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

/// BOS followed by the UTF-8 bytes of `text`.
inline TokenSequence encode(std::string_view text, bool add_bos = true) {
    TokenSequence seq;
    seq.tokens.reserve(text.size() + 1);
    if (add_bos) seq.tokens.push_back(kBosToken);
    for (const char c : text) seq.tokens.push_back(static_cast<unsigned char>(c));
    return seq;
}

/// Bytes only; special tokens are dropped.
inline std::string decode(std::span<const int> tokens) {
    std::string out;
    for (const int t : tokens)
        if (t >= 0 && t < 256) out.push_back(static_cast<char>(t));
    return out;
}

inline std::string decode(const TokenSequence& seq) { return decode(std::span<const int>(seq.tokens)); }

/// Residual-stream state of the last token after block `layer` (1-based).
struct Activation {
    int layer = 1;
    std::vector<float> values;

    std::size_t dim() const { return values.size(); }
    friend bool operator==(const Activation&, const Activation&) = default;
};

enum class HookMode { Read, Replace };

struct HookAction {
    HookMode mode = HookMode::Read;
    std::optional<std::vector<float>> replacement;

    static HookAction read() { return {}; }
    static HookAction replace(std::vector<float> v) { return {HookMode::Replace, std::move(v)}; }
};

using HookMap = std::map<int, HookAction>;

struct GenerationSettings {
    int max_new_tokens = kMaxNewTokensDefault;
    bool stop_at_eos = true;
};

struct ForwardResult {
    std::vector<float> logits;
    std::map<int, Activation> captured;
};

/// Per-generation KV cache. Owned by one caller; models stay immutable.
struct DecodeState {
    std::vector<std::vector<float>> keys;
    std::vector<std::vector<float>> values;
    int position = 0;
};

namespace detail {

struct NoEdit {
    void operator()(int, int, std::span<float>) const noexcept {}
};

inline void layer_norm(std::span<const float> x, std::span<const float> gain, std::span<const float> bias,
                       std::span<float> out) {
    const std::size_t n = x.size();
    double mean = 0.0;
    for (const float v : x) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (const float v : x) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    const float inv = static_cast<float>(1.0 / std::sqrt(var + 1e-5));
    const float m = static_cast<float>(mean);
    for (std::size_t i = 0; i < n; ++i) out[i] = (x[i] - m) * inv * gain[i] + bias[i];
}

// out[j] = sum_i x[i] * w[i * cols + j]
inline void matvec(std::span<const float> x, const float* w, std::size_t cols, std::span<float> out) {
    std::fill(out.begin(), out.end(), 0.0f);
    for (std::size_t i = 0; i < x.size(); ++i) {
        const float xi = x[i];
        const float* row = w + i * cols;
        for (std::size_t j = 0; j < cols; ++j) out[j] += xi * row[j];
    }
}

inline float gelu(float x) {
    constexpr float k = 0.7978845608028654f; // sqrt(2/pi)
    return 0.5f * x * (1.0f + std::tanh(k * (x + 0.044715f * x * x * x)));
}

inline void write_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }

inline std::uint32_t read_u32(std::istream& is, const std::string& what) {
    std::uint32_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), 4)) fail(ErrorKind::Data, "truncated " + what);
    return v;
}

} // namespace detail

/// Log-softmax negative log-likelihood of `target`, accumulated in double.
inline double token_nll(std::span<const float> logits, int target) {
    double mx = -INFINITY;
    for (const float l : logits) mx = std::max(mx, static_cast<double>(l));
    double sum = 0.0;
    for (const float l : logits) sum += std::exp(static_cast<double>(l) - mx);
    return (mx + std::log(sum)) - static_cast<double>(logits[static_cast<std::size_t>(target)]);
}

/// Perplexity from per-position logit rows: row i predicts targets[i].
inline double perplexity_from_logits(std::span<const std::vector<float>> rows, std::span<const int> targets) {
    if (rows.size() != targets.size() || rows.empty())
        fail(ErrorKind::Runtime, "perplexity: need one logit row per target and at least one target");
    double nll = 0.0;
    for (std::size_t i = 0; i < rows.size(); ++i) nll += token_nll(rows[i], targets[i]);
    return std::exp(nll / static_cast<double>(rows.size()));
}

class Model {
public:
    struct Block {
        std::vector<float> ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, b1, w2, b2;
    };

    explicit Model(ModelConfig config) : config_(config) {
        config_.validate();
        const auto d = static_cast<std::size_t>(config_.hidden_dim);
        const auto ff = static_cast<std::size_t>(config_.mlp_dim());
        const auto v = static_cast<std::size_t>(config_.vocab_size);
        const auto s = static_cast<std::size_t>(config_.max_seq_len);
        tok_emb_.assign(v * d, 0.0f);
        pos_emb_.assign(s * d, 0.0f);
        blocks_.resize(static_cast<std::size_t>(config_.n_layers));
        for (auto& b : blocks_) {
            b.ln1_g.assign(d, 1.0f);
            b.ln1_b.assign(d, 0.0f);
            b.wq.assign(d * d, 0.0f);
            b.wk.assign(d * d, 0.0f);
            b.wv.assign(d * d, 0.0f);
            b.wo.assign(d * d, 0.0f);
            b.ln2_g.assign(d, 1.0f);
            b.ln2_b.assign(d, 0.0f);
            b.w1.assign(d * ff, 0.0f);
            b.b1.assign(ff, 0.0f);
            b.w2.assign(ff * d, 0.0f);
            b.b2.assign(d, 0.0f);
        }
        lnf_g_.assign(d, 1.0f);
        lnf_b_.assign(d, 0.0f);
        w_out_.assign(d * v, 0.0f);
    }

    /// Seeded random initialization (scaled Gaussian), reproducible across platforms.
    static Model random(const ModelConfig& config) {
        Model m(config);
        Rng rng(config.seed);
        const double d = config.hidden_dim;
        const double ff = config.mlp_dim();
        auto fill = [&rng](std::vector<float>& t, double stddev) {
            for (auto& x : t) x = static_cast<float>(rng.normal() * stddev);
        };
        fill(m.tok_emb_, 1.0);
        fill(m.pos_emb_, 0.1);
        for (auto& b : m.blocks_) {
            fill(b.wq, 1.0 / std::sqrt(d));
            fill(b.wk, 1.0 / std::sqrt(d));
            fill(b.wv, 1.0 / std::sqrt(d));
            fill(b.wo, 1.0 / std::sqrt(d));
            fill(b.w1, 1.0 / std::sqrt(d));
            fill(b.w2, 1.0 / std::sqrt(ff));
        }
        fill(m.w_out_, 1.0 / std::sqrt(d));
        return m;
    }

    const ModelConfig& config() const { return config_; }
    int n_layers() const { return config_.n_layers; }
    int dim() const { return config_.hidden_dim; }
    int vocab_size() const { return config_.vocab_size; }

    /// Mutable tensor views, used by loaders and tests that need hand-built weights.
    std::vector<float>& output_projection() { return w_out_; }
    std::vector<float>& token_embedding() { return tok_emb_; }
    Block& block(int layer) { return blocks_.at(static_cast<std::size_t>(layer - 1)); }

    DecodeState new_state() const {
        DecodeState st;
        const auto n = static_cast<std::size_t>(config_.max_seq_len) * static_cast<std::size_t>(config_.hidden_dim);
        st.keys.assign(blocks_.size(), std::vector<float>(n, 0.0f));
        st.values.assign(blocks_.size(), std::vector<float>(n, 0.0f));
        return st;
    }

    /// Run one token through all blocks at the next cache position.
    /// `edit(step, layer, residual)` sees (and may modify) the residual after each
    /// block, before the next block runs. Logits are written when `logits` is non-empty.
    template <typename Editor>
    void step(DecodeState& st, int token, int step_index, Editor&& edit, std::span<float> logits) const {
        const auto d = static_cast<std::size_t>(config_.hidden_dim);
        const auto ff = static_cast<std::size_t>(config_.mlp_dim());
        const auto v = static_cast<std::size_t>(config_.vocab_size);
        if (st.position >= config_.max_seq_len) fail(ErrorKind::Runtime, "sequence exceeds max_seq_len");
        if (token < 0 || token >= config_.vocab_size) fail(ErrorKind::Runtime, "token id out of range");
        const auto pos = static_cast<std::size_t>(st.position);

        std::vector<float> x(d), h(d), q(d), att(d), proj(d), mid(ff);
        for (std::size_t i = 0; i < d; ++i)
            x[i] = tok_emb_[static_cast<std::size_t>(token) * d + i] + pos_emb_[pos * d + i];

        const auto n_heads = static_cast<std::size_t>(config_.n_heads);
        const std::size_t hd = d / n_heads;
        const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
        std::vector<float> scores(pos + 1);

        for (std::size_t l = 0; l < blocks_.size(); ++l) {
            const Block& b = blocks_[l];
            detail::layer_norm(x, b.ln1_g, b.ln1_b, h);
            detail::matvec(h, b.wq.data(), d, q);
            std::span<float> k_row(st.keys[l].data() + pos * d, d);
            std::span<float> v_row(st.values[l].data() + pos * d, d);
            detail::matvec(h, b.wk.data(), d, k_row);
            detail::matvec(h, b.wv.data(), d, v_row);
            for (std::size_t hh = 0; hh < n_heads; ++hh) {
                const std::size_t off = hh * hd;
                float mx = -INFINITY;
                for (std::size_t t = 0; t <= pos; ++t) {
                    const float* kt = st.keys[l].data() + t * d + off;
                    float s = 0.0f;
                    for (std::size_t i = 0; i < hd; ++i) s += q[off + i] * kt[i];
                    scores[t] = s * scale;
                    mx = std::max(mx, scores[t]);
                }
                float denom = 0.0f;
                for (std::size_t t = 0; t <= pos; ++t) {
                    scores[t] = std::exp(scores[t] - mx);
                    denom += scores[t];
                }
                for (std::size_t i = 0; i < hd; ++i) att[off + i] = 0.0f;
                for (std::size_t t = 0; t <= pos; ++t) {
                    const float w = scores[t] / denom;
                    const float* vt = st.values[l].data() + t * d + off;
                    for (std::size_t i = 0; i < hd; ++i) att[off + i] += w * vt[i];
                }
            }
            detail::matvec(att, b.wo.data(), d, proj);
            for (std::size_t i = 0; i < d; ++i) x[i] += proj[i];

            detail::layer_norm(x, b.ln2_g, b.ln2_b, h);
            detail::matvec(h, b.w1.data(), ff, mid);
            for (std::size_t j = 0; j < ff; ++j) mid[j] = detail::gelu(mid[j] + b.b1[j]);
            detail::matvec(mid, b.w2.data(), d, proj);
            for (std::size_t i = 0; i < d; ++i) x[i] += proj[i] + b.b2[i];

            edit(step_index, static_cast<int>(l) + 1, std::span<float>(x));
        }
        ++st.position;

        if (!logits.empty()) {
            detail::layer_norm(x, lnf_g_, lnf_b_, h);
            detail::matvec(h, w_out_.data(), v, logits.first(v));
        }
    }

    /// Feed the prompt; only its last position is exposed to `edit` (as step 0).
    template <typename Editor>
    std::vector<float> prefill(DecodeState& st, const TokenSequence& seq, Editor&& edit) const {
        check_sequence(seq);
        std::vector<float> logits(static_cast<std::size_t>(config_.vocab_size));
        const std::size_t n = seq.size();
        for (std::size_t i = 0; i + 1 < n; ++i) step(st, seq.tokens[i], -1, detail::NoEdit{}, {});
        step(st, seq.tokens[n - 1], 0, edit, logits);
        return logits;
    }

    ForwardResult forward(const TokenSequence& seq, const HookMap& hooks = {}) const {
        check_hooks(hooks);
        ForwardResult result;
        DecodeState st = new_state();
        result.logits = prefill(st, seq, [&](int, int layer, std::span<float> residual) {
            const auto it = hooks.find(layer);
            if (it == hooks.end()) return;
            if (it->second.mode == HookMode::Read) {
                result.captured[layer] = Activation{layer, {residual.begin(), residual.end()}};
            } else {
                std::copy(it->second.replacement->begin(), it->second.replacement->end(), residual.begin());
            }
        });
        return result;
    }

    /// Residual after every block at the last token, layers 1..L.
    std::vector<Activation> capture_all(const TokenSequence& seq) const {
        HookMap hooks;
        for (int l = 1; l <= config_.n_layers; ++l) hooks[l] = HookAction::read();
        auto r = forward(seq, hooks);
        std::vector<Activation> out;
        out.reserve(r.captured.size());
        for (auto& [l, a] : r.captured) out.push_back(std::move(a));
        return out;
    }

    /// Greedy decoding with a residual editor applied at the last position of every step.
    /// Step 0 is the prompt's last token; step s >= 1 is the s-th generated token.
    template <typename Editor>
    TokenSequence generate_with(const TokenSequence& seq, Editor&& edit, const GenerationSettings& settings) const {
        if (seq.empty()) fail(ErrorKind::Runtime, "generate: empty prompt");
        if (settings.max_new_tokens < 0) fail(ErrorKind::Config, "generate: max_new_tokens must be >= 0");
        TokenSequence out = seq;
        if (settings.max_new_tokens == 0) {
            check_sequence(seq);
            return out;
        }
        DecodeState st = new_state();
        std::vector<float> logits = prefill(st, seq, edit);
        const auto limit = static_cast<std::size_t>(config_.max_seq_len);
        for (int i = 0; i < settings.max_new_tokens && out.size() < limit; ++i) {
            const int next = argmax(logits);
            if (settings.stop_at_eos && next == kEosToken) break;
            out.tokens.push_back(next);
            if (i + 1 == settings.max_new_tokens || out.size() >= limit) break;
            step(st, next, i + 1, edit, logits);
        }
        return out;
    }

    TokenSequence generate(const TokenSequence& seq, const HookMap& hooks = {},
                           const GenerationSettings& settings = {}) const {
        check_hooks(hooks);
        return generate_with(
            seq,
            [&](int, int layer, std::span<float> residual) {
                const auto it = hooks.find(layer);
                if (it == hooks.end() || it->second.mode != HookMode::Replace) return;
                std::copy(it->second.replacement->begin(), it->second.replacement->end(), residual.begin());
            },
            settings);
    }

    /// exp(mean NLL of t_2..t_n). Hooks never participate.
    double perplexity(const TokenSequence& seq) const {
        if (seq.size() < 2) fail(ErrorKind::Runtime, "perplexity: sequence needs at least 2 tokens");
        check_sequence(seq);
        DecodeState st = new_state();
        std::vector<float> logits(static_cast<std::size_t>(config_.vocab_size));
        double nll = 0.0;
        for (std::size_t i = 0; i + 1 < seq.size(); ++i) {
            step(st, seq.tokens[i], -1, detail::NoEdit{}, logits);
            nll += token_nll(logits, seq.tokens[i + 1]);
        }
        return std::exp(nll / static_cast<double>(seq.size() - 1));
    }

    /// Logit rows for every position (row i predicts token i+1). Used by oracles.
    std::vector<std::vector<float>> all_logits(const TokenSequence& seq) const {
        check_sequence(seq);
        DecodeState st = new_state();
        std::vector<std::vector<float>> rows;
        for (const int t : seq.tokens) {
            std::vector<float> logits(static_cast<std::size_t>(config_.vocab_size));
            step(st, t, -1, detail::NoEdit{}, logits);
            rows.push_back(std::move(logits));
        }
        return rows;
    }

    static int argmax(std::span<const float> logits) {
        int best = 0;
        for (std::size_t i = 1; i < logits.size(); ++i)
            if (logits[i] > logits[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
        return best;
    }

    // Weight file: "STKW", u32 version, u32 L, d, n_heads, V, max_seq_len, ff_dim,
    // then little-endian f32 tensors: tok_emb[V,d], pos_emb[S,d], per block
    // (ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1[d,ff], b1, w2[ff,d], b2),
    // lnf_g, lnf_b, w_out[d,V]. Matrices are row-major [in, out].
    static constexpr std::uint32_t kWeightVersion = 1;

    void save(const std::filesystem::path& path) const {
        std::ofstream os(path, std::ios::binary);
        if (!os) fail(ErrorKind::Runtime, "cannot write weights: " + path.string());
        os.write("STKW", 4);
        detail::write_u32(os, kWeightVersion);
        for (const int v : {config_.n_layers, config_.hidden_dim, config_.n_heads, config_.vocab_size,
                            config_.max_seq_len, config_.mlp_dim()})
            detail::write_u32(os, static_cast<std::uint32_t>(v));
        for_each_tensor(*this, [&os](const std::vector<float>& t) {
            os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * 4));
        });
        if (!os) fail(ErrorKind::Runtime, "write failed: " + path.string());
    }

    static Model load(const std::filesystem::path& path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) fail(ErrorKind::Data, "cannot open weights: " + path.string());
        char magic[4];
        if (!is.read(magic, 4) || std::memcmp(magic, "STKW", 4) != 0)
            fail(ErrorKind::Data, "bad weight file magic: " + path.string());
        if (detail::read_u32(is, "weight header") != kWeightVersion)
            fail(ErrorKind::Data, "unsupported weight file version");
        ModelConfig c;
        c.n_layers = static_cast<int>(detail::read_u32(is, "weight header"));
        c.hidden_dim = static_cast<int>(detail::read_u32(is, "weight header"));
        c.n_heads = static_cast<int>(detail::read_u32(is, "weight header"));
        c.vocab_size = static_cast<int>(detail::read_u32(is, "weight header"));
        c.max_seq_len = static_cast<int>(detail::read_u32(is, "weight header"));
        c.ff_dim = static_cast<int>(detail::read_u32(is, "weight header"));
        try {
            c.validate();
        } catch (const Error& e) {
            fail(ErrorKind::Data, std::string("weight file: ") + e.what());
        }
        Model m(c);
        for_each_tensor(m, [&is](std::vector<float>& t) {
            if (!is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * 4)))
                fail(ErrorKind::Data, "truncated weight tensor");
        });
        if (is.peek() != std::char_traits<char>::eof()) fail(ErrorKind::Data, "trailing bytes in weight file");
        return m;
    }

private:
    template <typename Self, typename F>
    static void for_each_tensor(Self& self, F&& f) {
        f(self.tok_emb_);
        f(self.pos_emb_);
        for (auto& b : self.blocks_) {
            f(b.ln1_g), f(b.ln1_b), f(b.wq), f(b.wk), f(b.wv), f(b.wo);
            f(b.ln2_g), f(b.ln2_b), f(b.w1), f(b.b1), f(b.w2), f(b.b2);
        }
        f(self.lnf_g_);
        f(self.lnf_b_);
        f(self.w_out_);
    }

    void check_sequence(const TokenSequence& seq) const {
        if (seq.empty()) fail(ErrorKind::Runtime, "empty token sequence");
        if (seq.size() > static_cast<std::size_t>(config_.max_seq_len))
            fail(ErrorKind::Runtime, "sequence too long: " + std::to_string(seq.size()) + " > max_seq_len " +
                                         std::to_string(config_.max_seq_len));
    }

    void check_hooks(const HookMap& hooks) const {
        for (const auto& [layer, action] : hooks) {
            if (layer < 1 || layer > config_.n_layers)
                fail(ErrorKind::Runtime, "hook layer out of range: " + std::to_string(layer));
            if (action.mode == HookMode::Replace) {
                if (!action.replacement) fail(ErrorKind::Runtime, "REPLACE hook without replacement");
                if (action.replacement->size() != static_cast<std::size_t>(config_.hidden_dim))
                    fail(ErrorKind::Runtime, "replacement dimension mismatch");
                if (!all_finite(std::span<const float>(*action.replacement)))
                    fail(ErrorKind::Runtime, "non-finite replacement vector");
            }
        }
    }

    ModelConfig config_;
    std::vector<float> tok_emb_, pos_emb_;
    std::vector<Block> blocks_;
    std::vector<float> lnf_g_, lnf_b_, w_out_;
};

// ---------------------------------------------------------------------------
// Activation dumps: "STKA", u32 version, u32 count, u32 layer, u32 d, f32 data.

inline constexpr std::uint32_t kDumpVersion = 1;

struct ActivationDump {
    int layer = 1;
    int dim = 0;
    std::vector<Activation> activations;
};

inline void write_activation_dump(const std::filesystem::path& path, int layer, int dim,
                                  std::span<const Activation> acts) {
    std::ofstream os(path, std::ios::binary);
    if (!os) fail(ErrorKind::Runtime, "cannot write activation dump: " + path.string());
    os.write("STKA", 4);
    detail::write_u32(os, kDumpVersion);
    detail::write_u32(os, static_cast<std::uint32_t>(acts.size()));
    detail::write_u32(os, static_cast<std::uint32_t>(layer));
    detail::write_u32(os, static_cast<std::uint32_t>(dim));
    for (const auto& a : acts) {
        if (a.dim() != static_cast<std::size_t>(dim) || a.layer != layer)
            fail(ErrorKind::Runtime, "activation dump: inconsistent layer or dimension");
        os.write(reinterpret_cast<const char*>(a.values.data()), static_cast<std::streamsize>(a.values.size() * 4));
    }
    if (!os) fail(ErrorKind::Runtime, "write failed: " + path.string());
}

inline ActivationDump read_activation_dump(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) fail(ErrorKind::Data, "cannot open activation dump: " + path.string());
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "STKA", 4) != 0)
        fail(ErrorKind::Data, "bad activation dump magic: " + path.string());
    if (detail::read_u32(is, "dump header") != kDumpVersion) fail(ErrorKind::Data, "unsupported dump version");
    ActivationDump dump;
    const auto count = detail::read_u32(is, "dump header");
    dump.layer = static_cast<int>(detail::read_u32(is, "dump header"));
    dump.dim = static_cast<int>(detail::read_u32(is, "dump header"));
    dump.activations.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        Activation a{dump.layer, std::vector<float>(static_cast<std::size_t>(dump.dim))};
        if (!is.read(reinterpret_cast<char*>(a.values.data()), static_cast<std::streamsize>(a.values.size() * 4)))
            fail(ErrorKind::Data, "truncated activation dump: " + path.string());
        if (!all_finite(std::span<const float>(a.values)))
            fail(ErrorKind::Data, "non-finite activation in dump: " + path.string());
        dump.activations.push_back(std::move(a));
    }
    return dump;
}

// ---------------------------------------------------------------------------
// Synthetic activation provider.

enum class BiasLabel : int { Biased = 0, Unbiased = 1 };

/// Two isotropic Gaussians with means center -/+ (separation/2) * direction.
struct SyntheticSpec {
    int dim = 64;
    std::vector<double> direction;
    double separation = 4.0;
    double noise = 1.0;
    std::uint64_t seed = 0;
    std::vector<double> center; // empty means the origin

    void validate() const {
        if (dim < 1) fail(ErrorKind::Config, "synthetic: dim must be >= 1");
        if (direction.size() != static_cast<std::size_t>(dim))
            fail(ErrorKind::Config, "synthetic: direction length must equal dim");
        if (std::abs(norm(std::span<const double>(direction)) - 1.0) > 1e-9)
            fail(ErrorKind::Config, "synthetic: direction must be unit norm");
        if (!(separation >= 0.0) || !(noise >= 0.0))
            fail(ErrorKind::Config, "synthetic: separation and noise must be nonnegative");
        if (!center.empty() && center.size() != static_cast<std::size_t>(dim))
            fail(ErrorKind::Config, "synthetic: center length must equal dim");
    }

    std::vector<double> mean(BiasLabel label) const {
        const double sign = label == BiasLabel::Unbiased ? 0.5 : -0.5;
        std::vector<double> mu(static_cast<std::size_t>(dim), 0.0);
        for (std::size_t i = 0; i < mu.size(); ++i)
            mu[i] = (center.empty() ? 0.0 : center[i]) + sign * separation * direction[i];
        return mu;
    }
};

inline std::vector<double> random_unit_vector(int dim, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<double> u(static_cast<std::size_t>(dim));
    double n = 0.0;
    while (n == 0.0) {
        for (auto& x : u) x = rng.normal();
        n = norm(std::span<const double>(u));
    }
    for (auto& x : u) x /= n;
    return u;
}

/// Unit vector orthogonal to every vector in `basis` (assumed orthonormal).
inline std::vector<double> orthogonal_unit_vector(std::span<const std::vector<double>> basis, int dim,
                                                  std::uint64_t seed) {
    for (std::uint64_t attempt = 0;; ++attempt) {
        auto v = random_unit_vector(dim, mix_seed(seed + attempt));
        for (const auto& b : basis) {
            const double p = dot(std::span<const double>(v), std::span<const double>(b));
            for (std::size_t i = 0; i < v.size(); ++i) v[i] -= p * b[i];
        }
        const double n = norm(std::span<const double>(v));
        if (n > 1e-6) {
            for (auto& x : v) x /= n;
            return v;
        }
    }
}

/// Reproducible draws; the stream depends on (spec.seed, label).
inline std::vector<Activation> synth_sample(const SyntheticSpec& spec, int n_samples, BiasLabel label, int layer = 1) {
    spec.validate();
    if (n_samples <= 0) fail(ErrorKind::Runtime, "synth_sample: n_samples must be positive");
    Rng rng(derive_seed(spec.seed, static_cast<std::uint64_t>(label) + 1));
    const auto mu = spec.mean(label);
    std::vector<Activation> out;
    out.reserve(static_cast<std::size_t>(n_samples));
    for (int s = 0; s < n_samples; ++s) {
        Activation a{layer, std::vector<float>(mu.size())};
        for (std::size_t i = 0; i < mu.size(); ++i) {
            const double z = spec.noise == 0.0 ? 0.0 : rng.normal();
            a.values[i] = static_cast<float>(mu[i] + spec.noise * z);
        }
        out.push_back(std::move(a));
    }
    return out;
}

/// Multi-layer provider: class signal exists only at `planted_layer`; every
/// other layer draws both classes from the same distribution.
struct LayeredSyntheticSpec {
    int n_layers = 4;
    int planted_layer = 2;
    SyntheticSpec base;

    void validate() const {
        base.validate();
        if (n_layers < 1) fail(ErrorKind::Config, "synthetic: layers must be >= 1");
        if (planted_layer < 1 || planted_layer > n_layers)
            fail(ErrorKind::Config, "synthetic: planted_layer must be in [1, layers]");
    }

    SyntheticSpec at_layer(int layer) const {
        SyntheticSpec s = base;
        s.seed = derive_seed(base.seed, static_cast<std::uint64_t>(layer) + 100);
        if (layer != planted_layer) s.separation = 0.0;
        return s;
    }
};

} // namespace steerkit
