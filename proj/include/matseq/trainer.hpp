#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "matseq/errors.hpp"
#include "matseq/model.hpp"
#include "matseq/rng.hpp"
#include "matseq/tokenizer.hpp"

namespace matseq {

struct TrainConfig {
    int batch_size = 32;          // full-scale runs use 512
    double lr_init = 4e-4;
    double lr_factor = 0.5;
    int plateau_patience = 3;     // epochs without improvement before halving
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 0.01;
    int epochs = 50;
    double cond_dropout_p = 0.5;
    std::uint64_t seed = 0;
    double grad_clip_norm = 1.0;  // 0 disables clipping

    void validate() const {
        if (!(lr_init > 0)) throw ConfigError("lr_init must be positive");
        if (!(lr_factor > 0) || !(lr_factor < 1)) throw ConfigError("lr_factor must be in (0,1)");
        if (plateau_patience < 1) throw ConfigError("plateau_patience must be at least 1");
        if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
        if (epochs < 1) throw ConfigError("epochs must be at least 1");
        if (!(cond_dropout_p >= 0) || !(cond_dropout_p <= 1))
            throw ConfigError("cond_dropout_p must be in [0,1]");
        if (!(grad_clip_norm >= 0)) throw ConfigError("grad_clip_norm must be non-negative");
        if (!(beta1 > 0 && beta1 < 1 && beta2 > 0 && beta2 < 1))
            throw ConfigError("adam betas must be in (0,1)");
        if (!(adam_eps > 0)) throw ConfigError("adam_eps must be positive");
        if (weight_decay < 0) throw ConfigError("weight_decay must be non-negative");
    }
};

struct TrainExample {
    TokenSequence tokens;
    ConditionSet conditions;
};

// Marker filling batch rows past each sequence's end.
inline constexpr int kIgnoreToken = -1;

// Rectangular batch view: rows are sequences, padded with kIgnoreToken after
// EOS. Real token counts are recoverable from the padding alone.
struct PaddedBatch {
    Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic> tokens;
    std::vector<ConditionSet> conditions;

    int size() const { return static_cast<int>(tokens.rows()); }
    int row_length(int i) const {
        int n = static_cast<int>(tokens.cols());
        while (n > 0 && tokens(i, n - 1) == kIgnoreToken) --n;
        return n;
    }
    TokenSequence row_tokens(int i) const {
        const int n = row_length(i);
        TokenSequence t(static_cast<std::size_t>(n));
        for (int j = 0; j < n; ++j) t[static_cast<std::size_t>(j)] = tokens(i, j);
        return t;
    }
};

inline PaddedBatch make_padded_batch(const std::vector<TrainExample>& examples, std::size_t begin,
                                     std::size_t end) {
    if (begin >= end || end > examples.size()) throw ConfigError("invalid batch range");
    Eigen::Index max_len = 0;
    for (std::size_t i = begin; i < end; ++i)
        max_len = std::max<Eigen::Index>(max_len,
                                         static_cast<Eigen::Index>(examples[i].tokens.size()));
    PaddedBatch b;
    b.tokens.setConstant(static_cast<Eigen::Index>(end - begin), max_len, kIgnoreToken);
    for (std::size_t i = begin; i < end; ++i) {
        const auto& t = examples[i].tokens;
        for (std::size_t j = 0; j < t.size(); ++j)
            b.tokens(static_cast<Eigen::Index>(i - begin), static_cast<Eigen::Index>(j)) = t[j];
        b.conditions.push_back(examples[i].conditions);
    }
    return b;
}

inline PaddedBatch make_padded_batch(const std::vector<TrainExample>& examples) {
    return make_padded_batch(examples, 0, examples.size());
}

// --- Loss ----------------------------------------------------------------------

namespace detail {

// Sum of next-token cross-entropies over material predictions: position
// prefix_len-1+i predicts tokens[i]. Optionally accumulates softmax-minus-onehot
// rows scaled by `grad_scale` into dlogits (which must be zeroed by the caller).
template <typename Scalar>
double masked_ce_sum(const Mat<Scalar>& logits, const TokenSequence& tokens, int prefix_len,
                     Mat<Scalar>* dlogits = nullptr, double grad_scale = 0.0) {
    const int L = static_cast<int>(tokens.size());
    if (L < 2) throw EmptyTargetsError("need at least two material tokens for next-token loss");
    if (prefix_len < 1) throw ConfigError("prefix_len must be at least 1");
    if (logits.rows() < prefix_len + L - 1)
        throw OutOfRangeError("logits do not cover all prediction positions");
    const Eigen::Index V = logits.cols();
    double total = 0;
    for (int i = 0; i < L; ++i) {
        const Eigen::Index p = prefix_len - 1 + i;
        const int target = tokens[static_cast<std::size_t>(i)];
        if (target < 0 || target >= V) throw OutOfRangeError("target token outside vocabulary");
        double mx = -std::numeric_limits<double>::infinity();
        for (Eigen::Index v = 0; v < V; ++v)
            mx = std::max(mx, static_cast<double>(logits(p, v)));
        double sum = 0;
        for (Eigen::Index v = 0; v < V; ++v)
            sum += std::exp(static_cast<double>(logits(p, v)) - mx);
        const double lse = std::log(sum) + mx;
        total += lse - static_cast<double>(logits(p, target));
        if (dlogits) {
            for (Eigen::Index v = 0; v < V; ++v) {
                const double soft = std::exp(static_cast<double>(logits(p, v)) - lse);
                const double onehot = v == target ? 1.0 : 0.0;
                (*dlogits)(p, v) += static_cast<Scalar>((soft - onehot) * grad_scale);
            }
        }
    }
    return total;
}

}  // namespace detail

// Mean next-token cross-entropy over material-token predictions only. The last
// prefix position predicts the first material token; prefix-internal positions
// carry no loss.
template <typename Scalar>
double masked_ce_loss(const Mat<Scalar>& logits, const TokenSequence& tokens, int prefix_len) {
    return detail::masked_ce_sum(logits, tokens, prefix_len) /
           static_cast<double>(tokens.size());
}

// --- Conditional dropout ------------------------------------------------------------

// Independently drops each present scalar condition with probability p; the
// formula is kept or dropped as a single unit. Draws happen in schema order
// (then formula) and only for present conditions, so the stream advance is a
// pure function of the input set.
inline ConditionSet apply_conditional_dropout(const ConditionSet& cs,
                                              const std::vector<std::string>& schema, double p,
                                              Rng& rng) {
    if (!(p >= 0.0) || !(p <= 1.0)) throw ConfigError("condition dropout p must be in [0,1]");
    ConditionSet out;
    for (const auto& name : schema) {
        auto it = cs.scalars.find(name);
        if (it == cs.scalars.end()) continue;
        if (rng.uniform() < p) continue;
        out.scalars.emplace(it->first, it->second);
    }
    if (cs.formula && !(rng.uniform() < p)) out.formula = cs.formula;
    return out;
}

// --- AdamW ---------------------------------------------------------------------

// Decoupled weight decay update (all parameter tensors treated alike).
template <typename Scalar>
void adamw_update(Scalar* w, const Scalar* g, Scalar* m, Scalar* v, Eigen::Index n,
                  long long t, double lr, double beta1, double beta2, double eps,
                  double weight_decay) {
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (Eigen::Index i = 0; i < n; ++i) {
        const double gi = static_cast<double>(g[i]);
        const double mi = beta1 * static_cast<double>(m[i]) + (1.0 - beta1) * gi;
        const double vi = beta2 * static_cast<double>(v[i]) + (1.0 - beta2) * gi * gi;
        m[i] = static_cast<Scalar>(mi);
        v[i] = static_cast<Scalar>(vi);
        const double mhat = mi / bc1;
        const double vhat = vi / bc2;
        const double wi = static_cast<double>(w[i]);
        w[i] = static_cast<Scalar>(wi - lr * weight_decay * wi -
                                   lr * mhat / (std::sqrt(vhat) + eps));
    }
}

// --- Train state ----------------------------------------------------------------

template <typename Scalar>
struct TrainState {
    TrainConfig train_config;
    ModelParams<Scalar> params;
    ModelParams<Scalar> adam_m, adam_v;
    long long adam_t = 0;  // completed optimizer steps
    int epoch = 0;
    double best_val = std::numeric_limits<double>::infinity();
    int epochs_since_improve = 0;
    double lr = 0;
    Rng rng;

    static TrainState init(const ModelConfig& mcfg, const TrainConfig& tcfg) {
        tcfg.validate();
        TrainState s;
        s.train_config = tcfg;
        s.rng.reseed(tcfg.seed);
        s.params = ModelParams<Scalar>::init(mcfg, s.rng);
        s.adam_m = ModelParams<Scalar>::zeros(mcfg);
        s.adam_v = ModelParams<Scalar>::zeros(mcfg);
        s.lr = tcfg.lr_init;
        return s;
    }
};

struct StepMetrics {
    double loss = 0;       // mean cross-entropy per predicted token
    double grad_norm = 0;  // pre-clip global L2 norm
    long long n_predictions = 0;
};

// One forward/backward/AdamW update over a padded batch. Loss is the
// prediction-weighted mean, matching an ignore-marker batched formulation.
template <typename Scalar>
StepMetrics train_step(TrainState<Scalar>& state, const PaddedBatch& batch) {
    const TrainConfig& tc = state.train_config;
    const ModelConfig& mc = state.params.config;
    if (batch.size() < 1) throw ConfigError("empty batch");

    long long total_preds = 0;
    for (int i = 0; i < batch.size(); ++i) total_preds += batch.row_length(i);
    if (total_preds == 0) throw EmptyTargetsError("batch contains no tokens");

    auto grads = ModelParams<Scalar>::zeros(mc);
    double ce_sum = 0;
    const double grad_scale = 1.0 / static_cast<double>(total_preds);
    for (int i = 0; i < batch.size(); ++i) {
        const TokenSequence toks = batch.row_tokens(i);
        const ConditionSet cs = apply_conditional_dropout(
            batch.conditions[static_cast<std::size_t>(i)], mc.condition_schema,
            tc.cond_dropout_p, state.rng);
        auto cache = forward_logits(toks, cs, state.params, RunMode::Train, &state.rng);
        Mat<Scalar> dlogits = Mat<Scalar>::Zero(cache.logits.rows(), cache.logits.cols());
        ce_sum += detail::masked_ce_sum(cache.logits, toks, cache.prefix_len, &dlogits,
                                        grad_scale);
        backward(cache, toks, state.params, dlogits, grads);
    }
    const double loss = ce_sum / static_cast<double>(total_preds);
    if (!std::isfinite(loss))
        throw NonFiniteLossError("non-finite loss at batch index " +
                                 std::to_string(state.adam_t));

    double sq = 0;
    auto gts = grads.tensors();
    for (auto& t : gts)
        for (Eigen::Index i = 0; i < t.size(); ++i)
            sq += static_cast<double>(t.data()[i]) * static_cast<double>(t.data()[i]);
    const double grad_norm = std::sqrt(sq);
    if (tc.grad_clip_norm > 0 && grad_norm > tc.grad_clip_norm) {
        const Scalar scale = static_cast<Scalar>(tc.grad_clip_norm / grad_norm);
        for (auto& t : gts)
            for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] *= scale;
    }

    state.adam_t += 1;
    auto pts = state.params.tensors();
    auto mts = state.adam_m.tensors();
    auto vts = state.adam_v.tensors();
    for (std::size_t k = 0; k < pts.size(); ++k)
        adamw_update(pts[k].data(), gts[k].data(), mts[k].data(), vts[k].data(), pts[k].size(),
                     state.adam_t, state.lr, tc.beta1, tc.beta2, tc.adam_eps, tc.weight_decay);

    return {loss, grad_norm, total_preds};
}

// Plateau rule: improvement resets the counter; otherwise the counter
// increments, and reaching `patience` halves the learning rate and resets.
template <typename Scalar>
double plateau_schedule(TrainState<Scalar>& state, double val_loss) {
    if (val_loss < state.best_val - 1e-6) {
        state.best_val = val_loss;
        state.epochs_since_improve = 0;
    } else {
        state.epochs_since_improve += 1;
        if (state.epochs_since_improve >= state.train_config.plateau_patience) {
            state.lr *= state.train_config.lr_factor;
            state.epochs_since_improve = 0;
        }
    }
    return state.lr;
}

// Prediction-weighted mean cross-entropy, eval mode, no condition dropout.
template <typename Scalar>
double evaluate_loss(const ModelParams<Scalar>& params, const std::vector<TrainExample>& examples) {
    if (examples.empty()) throw EmptyTargetsError("no validation examples");
    double ce = 0;
    long long preds = 0;
    for (const auto& ex : examples) {
        auto cache = forward_logits(ex.tokens, ex.conditions, params, RunMode::Eval);
        ce += detail::masked_ce_sum(cache.logits, ex.tokens, cache.prefix_len);
        preds += static_cast<long long>(ex.tokens.size());
    }
    return ce / static_cast<double>(preds);
}

// Next-token argmax accuracy over material predictions, eval mode.
template <typename Scalar>
double token_accuracy(const ModelParams<Scalar>& params, const std::vector<TrainExample>& examples) {
    if (examples.empty()) throw EmptyTargetsError("no examples");
    long long hits = 0, preds = 0;
    for (const auto& ex : examples) {
        auto cache = forward_logits(ex.tokens, ex.conditions, params, RunMode::Eval);
        const int P = cache.prefix_len;
        for (std::size_t i = 0; i < ex.tokens.size(); ++i) {
            Eigen::Index best = 0;
            cache.logits.row(P - 1 + static_cast<Eigen::Index>(i)).maxCoeff(&best);
            if (static_cast<int>(best) == ex.tokens[i]) ++hits;
            ++preds;
        }
    }
    return static_cast<double>(hits) / static_cast<double>(preds);
}

// --- Epoch loop -----------------------------------------------------------------

struct EpochMetrics {
    int epoch = 0;          // 1-based
    long long step = 0;     // cumulative optimizer steps
    double train_loss = 0;  // prediction-weighted over the epoch
    double val_loss = 0;
    double lr = 0;          // lr used during this epoch (before plateau update)
    double grad_norm = 0;   // mean per-step pre-clip norm
};

inline std::string metrics_csv_header() { return "epoch,step,train_loss,val_loss,lr,grad_norm"; }

inline std::string metrics_csv_row(const EpochMetrics& m) {
    std::ostringstream os;
    os.precision(10);
    os << m.epoch << ',' << m.step << ',' << m.train_loss << ',' << m.val_loss << ',' << m.lr
       << ',' << m.grad_norm;
    return os.str();
}

// Runs the remaining epochs (state.epoch..epochs-1). The callback fires after
// each epoch's validation and plateau update; returning false stops early.
template <typename Scalar>
void run_training(TrainState<Scalar>& state, const std::vector<TrainExample>& train,
                  const std::vector<TrainExample>& val,
                  const std::function<bool(const EpochMetrics&)>& on_epoch = {}) {
    const TrainConfig& tc = state.train_config;
    tc.validate();
    if (train.empty()) throw EmptyTargetsError("empty training set");
    if (val.empty()) throw EmptyTargetsError("empty validation set");

    while (state.epoch < tc.epochs) {
        // Fresh identity order each epoch so the permutation is a pure function
        // of the RNG state (resume-from-checkpoint replays it exactly).
        std::vector<std::size_t> order(train.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        state.rng.shuffle(order);
        std::vector<TrainExample> shuffled;
        shuffled.reserve(order.size());
        for (std::size_t idx : order) shuffled.push_back(train[idx]);

        const double epoch_lr = state.lr;
        double ce_weighted = 0, norm_sum = 0;
        long long preds = 0, steps = 0;
        for (std::size_t b = 0; b < shuffled.size(); b += static_cast<std::size_t>(tc.batch_size)) {
            const std::size_t e = std::min(shuffled.size(), b + static_cast<std::size_t>(tc.batch_size));
            auto metrics = train_step(state, make_padded_batch(shuffled, b, e));
            ce_weighted += metrics.loss * static_cast<double>(metrics.n_predictions);
            preds += metrics.n_predictions;
            norm_sum += metrics.grad_norm;
            ++steps;
        }
        state.epoch += 1;

        EpochMetrics em;
        em.epoch = state.epoch;
        em.step = state.adam_t;
        em.train_loss = ce_weighted / static_cast<double>(preds);
        em.val_loss = evaluate_loss(state.params, val);
        em.lr = epoch_lr;
        em.grad_norm = steps > 0 ? norm_sum / static_cast<double>(steps) : 0.0;
        plateau_schedule(state, em.val_loss);
        if (on_epoch && !on_epoch(em)) break;
    }
}

}  // namespace matseq
