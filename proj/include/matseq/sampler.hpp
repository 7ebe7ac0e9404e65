#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include "matseq/crystal.hpp"
#include "matseq/errors.hpp"
#include "matseq/model.hpp"
#include "matseq/rng.hpp"
#include "matseq/tokenizer.hpp"

namespace matseq {

struct SampleConfig {
    double temperature = 1.0;
    int max_new_tokens = 4 * 20 + 10;  // longest legal sequence at the 20-atom cap
    bool constrain_grammar = true;
    std::uint64_t seed = 0;
    int n_samples = 1;
    // Optional per-token-class overrides; a token's own class picks its entry.
    std::map<TokenClass, double> class_temperature;
    LatticeRanges ranges{};
    bool coords_first = false;

    void validate() const {
        if (!(temperature > 0)) throw ConfigError("temperature must be positive");
        if (max_new_tokens < 14) throw ConfigError("max_new_tokens must be at least 14");
        if (n_samples < 1) throw ConfigError("n_samples must be at least 1");
        for (const auto& [cls, t] : class_temperature) {
            (void)cls;
            if (!(t > 0)) throw ConfigError("class temperature must be positive");
        }
        ranges.validate();
    }
};

// --- Token-level sampling -----------------------------------------------------------

// Draws from softmax(logits / temperature) restricted to `allowed` (one flag
// per vocab id). Temperatures below 1e-6 short-circuit to argmax.
template <typename Scalar>
int sample_next(const Vec<Scalar>& logits, double temperature, const std::vector<char>& allowed,
                Rng& rng) {
    const Eigen::Index V = logits.size();
    if (static_cast<Eigen::Index>(allowed.size()) != V)
        throw ConfigError("allowed mask size does not match vocabulary");
    if (temperature < 0) throw ConfigError("temperature must be non-negative");

    Eigen::Index n_allowed = 0;
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index v = 0; v < V; ++v) {
        if (!allowed[static_cast<std::size_t>(v)]) continue;
        ++n_allowed;
        mx = std::max(mx, static_cast<double>(logits[v]));
    }
    if (n_allowed == 0) throw NoAllowedTokenError("no token satisfies the grammar mask");

    if (temperature < 1e-6) {
        for (Eigen::Index v = 0; v < V; ++v)
            if (allowed[static_cast<std::size_t>(v)] && static_cast<double>(logits[v]) == mx)
                return static_cast<int>(v);
        return -1;  // unreachable
    }

    double total = 0;
    for (Eigen::Index v = 0; v < V; ++v)
        if (allowed[static_cast<std::size_t>(v)])
            total += std::exp((static_cast<double>(logits[v]) - mx) / temperature);
    const double u = rng.uniform() * total;
    double cum = 0;
    Eigen::Index last = -1;
    for (Eigen::Index v = 0; v < V; ++v) {
        if (!allowed[static_cast<std::size_t>(v)]) continue;
        cum += std::exp((static_cast<double>(logits[v]) - mx) / temperature);
        last = v;
        if (u < cum) return static_cast<int>(v);
    }
    return static_cast<int>(last);  // guards against rounding at the top end
}

// Precomputed class bit per vocab id; produces per-step masks from a
// GrammarState's allowed-class bitmask.
class GrammarMasker {
  public:
    explicit GrammarMasker(const Vocabulary& vocab) : vocab_(&vocab) {
        bits_.resize(static_cast<std::size_t>(vocab.total_size));
        for (int id = 0; id < vocab.total_size; ++id)
            bits_[static_cast<std::size_t>(id)] = class_bit(classify_token(id, vocab));
    }

    std::vector<char> mask_for(unsigned allowed_bits) const {
        std::vector<char> m(bits_.size());
        for (std::size_t i = 0; i < bits_.size(); ++i)
            m[i] = (bits_[i] & allowed_bits) != 0 ? 1 : 0;
        return m;
    }

    std::vector<char> all_allowed() const { return std::vector<char>(bits_.size(), 1); }

    const Vocabulary& vocab() const { return *vocab_; }

  private:
    const Vocabulary* vocab_;
    std::vector<unsigned> bits_;
};

// --- Generation ------------------------------------------------------------------

struct GenerationResult {
    TokenSequence tokens;
    DecodeResult decoded;
    bool hit_token_cap = false;

    bool grammar_valid() const { return std::holds_alternative<Crystal>(decoded); }
    const Crystal& crystal() const { return std::get<Crystal>(decoded); }
};

struct GenerationStats {
    int n_total = 0;
    int n_valid = 0;
    int n_charge_neutral = 0;
    long long total_tokens = 0;
    double wall_time_s = 0;
    double tokens_per_s = 0;
    double seconds_per_sample = 0;
};

struct BatchResult {
    std::vector<GenerationResult> results;
    GenerationStats stats;
};

namespace detail {

// Scales logits by each token's class temperature (identity when the map is
// empty), leaving the shared temperature to sample_next.
template <typename Scalar>
void apply_class_temperatures(Vec<Scalar>& logits, const GrammarMasker& masker,
                              const std::map<TokenClass, double>& temps) {
    if (temps.empty()) return;
    const Vocabulary& v = masker.vocab();
    for (Eigen::Index id = 0; id < logits.size(); ++id) {
        auto it = temps.find(classify_token(static_cast<int>(id), v));
        if (it != temps.end())
            logits[id] = static_cast<Scalar>(static_cast<double>(logits[id]) / it->second);
    }
}

}  // namespace detail

// Single-sequence autoregressive generation from the condition prefix, using
// the incremental step kernel. The caller owns the RNG stream.
template <typename Scalar>
GenerationResult generate_with_rng(const ModelParams<Scalar>& params, const GrammarMasker& masker,
                                   const ConditionSet& cs, const SampleConfig& cfg, Rng& rng) {
    cfg.validate();
    const ModelConfig& mc = params.config;
    if (mc.vocab_size != masker.vocab().total_size)
        throw ConfigError("model vocabulary size does not match the vocabulary");

    const int max_atoms = (cfg.max_new_tokens - 10) / 4;
    GrammarState grammar(cfg.coords_first, max_atoms);

    auto kv = KVCache<Scalar>::make(mc);
    Mat<Scalar> prefix = embed_conditions(cs, params);
    if (static_cast<int>(prefix.rows()) + cfg.max_new_tokens > mc.max_seq_len)
        throw SequenceTooLongError("prefix plus max_new_tokens exceeds max_seq_len");
    Vec<Scalar> logits;
    for (Eigen::Index r = 0; r < prefix.rows(); ++r) {
        Vec<Scalar> row = prefix.row(r).transpose();
        logits = forward_step<Scalar>(row, params, kv);
    }

    GenerationResult out;
    while (static_cast<int>(out.tokens.size()) < cfg.max_new_tokens) {
        detail::apply_class_temperatures(logits, masker, cfg.class_temperature);
        const std::vector<char> mask =
            cfg.constrain_grammar ? masker.mask_for(grammar.allowed()) : masker.all_allowed();
        const int id = sample_next(logits, cfg.temperature, mask, rng);
        out.tokens.push_back(id);
        if (cfg.constrain_grammar) {
            grammar.advance(classify_token(id, masker.vocab()));
            if (grammar.complete()) break;
        } else if (id == Vocabulary::kEos) {
            break;
        }
        Vec<Scalar> row = params.token_emb.row(id).transpose();
        logits = forward_step<Scalar>(row, params, kv);
    }
    out.hit_token_cap = static_cast<int>(out.tokens.size()) >= cfg.max_new_tokens &&
                        !(cfg.constrain_grammar ? grammar.complete()
                                                : (!out.tokens.empty() &&
                                                   out.tokens.back() == Vocabulary::kEos));
    out.decoded = decode(out.tokens, masker.vocab(), cfg.ranges, cfg.coords_first);
    return out;
}

template <typename Scalar>
GenerationResult generate(const ModelParams<Scalar>& params, const GrammarMasker& masker,
                          const ConditionSet& cs, const SampleConfig& cfg) {
    // Stream derivation matches generate_batch sample 0, so a 1-sample batch
    // reduces to this function exactly.
    Rng base(cfg.seed);
    Rng stream = base.fork(0);
    return generate_with_rng(params, masker, cs, cfg, stream);
}

// Batch generation over independent per-sample streams (seed forked by sample
// index), optionally across threads; output order and content are independent
// of the worker count.
template <typename Scalar>
BatchResult generate_batch(const ModelParams<Scalar>& params, const GrammarMasker& masker,
                           const ConditionSet& cs, const SampleConfig& cfg, int n_workers = 1) {
    cfg.validate();
    if (n_workers < 1) throw ConfigError("worker count must be at least 1");
    const auto t0 = std::chrono::steady_clock::now();

    BatchResult out;
    out.results.resize(static_cast<std::size_t>(cfg.n_samples));
    auto worker = [&](int w) {
        for (int i = w; i < cfg.n_samples; i += n_workers) {
            Rng rng(cfg.seed);
            Rng stream = rng.fork(static_cast<std::uint64_t>(i));
            out.results[static_cast<std::size_t>(i)] =
                generate_with_rng(params, masker, cs, cfg, stream);
        }
    };
    if (n_workers == 1) {
        worker(0);
    } else {
        std::vector<std::thread> threads;
        for (int w = 0; w < n_workers; ++w) threads.emplace_back(worker, w);
        for (auto& t : threads) t.join();
    }

    const auto t1 = std::chrono::steady_clock::now();
    GenerationStats& s = out.stats;
    s.n_total = cfg.n_samples;
    for (const auto& r : out.results) {
        s.total_tokens += static_cast<long long>(r.tokens.size());
        if (r.grammar_valid()) {
            s.n_valid += 1;
            if (net_charge(r.crystal()) == 0) s.n_charge_neutral += 1;
        }
    }
    s.wall_time_s = std::chrono::duration<double>(t1 - t0).count();
    s.tokens_per_s = s.wall_time_s > 0 ? static_cast<double>(s.total_tokens) / s.wall_time_s : 0;
    s.seconds_per_sample = s.n_total > 0 ? s.wall_time_s / s.n_total : 0;
    return out;
}

}  // namespace matseq
