#pragma once

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "matseq/data_io.hpp"
#include "matseq/errors.hpp"
#include "matseq/rng.hpp"
#include "matseq/tokenizer.hpp"

namespace matseq {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

struct ModelConfig {
    int n_layers = 12;
    int n_heads = 16;
    int d_emb = 512;
    int d_ffn_hidden = 1536;
    double dropout_rate = 0.10;
    int vocab_size = 0;
    int max_seq_len = 512;
    double rope_base = 10000.0;
    std::vector<std::string> condition_schema = {kConditionNames.begin(), kConditionNames.end()};
    int max_stoich = 20;  // formula stoichiometry table covers counts 1..max_stoich

    int n_conditions() const { return static_cast<int>(condition_schema.size()); }
    int d_head() const { return d_emb / n_heads; }

    void validate() const {
        if (n_layers < 1 || n_heads < 1 || d_emb < 1 || d_ffn_hidden < 1 || vocab_size < 1 ||
            max_seq_len < 1 || max_stoich < 1)
            throw ConfigError("model dimensions must be at least 1");
        if (d_emb % n_heads != 0) throw ConfigError("d_emb must be divisible by n_heads");
        if (d_head() % 2 != 0)
            throw OddHeadDimError("head dimension must be even for rotary embeddings");
        if (!(dropout_rate >= 0.0) || !(dropout_rate < 1.0))
            throw ConfigError("dropout_rate must lie in [0, 1)");
        if (!(rope_base > 0.0)) throw ConfigError("rope_base must be positive");
        if (condition_schema.empty()) throw ConfigError("condition schema is empty");
    }

    int condition_slot(const std::string& name) const {
        for (int i = 0; i < n_conditions(); ++i)
            if (condition_schema[static_cast<std::size_t>(i)] == name) return i;
        throw UnknownConditionError("condition not in schema: " + name);
    }
};

// Conditioning inputs for one sequence. Scalar values are post-transform
// (see transform_condition); the formula lists (element, count) pairs.
struct ConditionSet {
    std::map<std::string, double> scalars;
    std::optional<std::vector<std::pair<int, int>>> formula;

    static ConditionSet none() { return {}; }
};

// --- Parameters ------------------------------------------------------------------

template <typename Scalar>
struct ModelParams {
    ModelConfig config;

    Mat<Scalar> token_emb;  // vocab × d_emb

    struct Layer {
        Mat<Scalar> Wq, Wk, Wv, Wo;      // d_emb × d_emb
        Vec<Scalar> norm1_gain, norm2_gain;
        Mat<Scalar> Wgate, Wup;          // d_emb × d_ffn
        Mat<Scalar> Wdown;               // d_ffn × d_emb
    };
    std::vector<Layer> layers;

    Vec<Scalar> final_gain;
    Mat<Scalar> Wout;  // d_emb × vocab

    struct CondSlot {
        Vec<Scalar> value_w;    // d_emb (projection of the scalar value)
        Vec<Scalar> value_b;    // d_emb (the only biases in the model)
        Vec<Scalar> label_emb;  // d_emb
        Vec<Scalar> nan_emb;    // d_emb
    };
    std::vector<CondSlot> cond;

    Mat<Scalar> formula_elem;    // kMaxAtomicNumber × d_emb, row z-1
    Mat<Scalar> formula_stoich;  // max_stoich × d_emb, row count-1
    Vec<Scalar> formula_nan;     // d_emb

    // Every learnable tensor with a stable name, in a fixed order. Vectors are
    // exposed as n×1 matrices via Map-free references (Vec is a Matrix).
    struct Named {
        std::string name;
        Mat<Scalar>* mat = nullptr;
        Vec<Scalar>* vec = nullptr;

        Eigen::Index size() const { return mat ? mat->size() : vec->size(); }
        Scalar* data() const { return mat ? mat->data() : vec->data(); }
    };

    std::vector<Named> tensors() {
        std::vector<Named> out;
        out.push_back({"token_emb", &token_emb, nullptr});
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const std::string p = "layer" + std::to_string(l) + ".";
            Layer& L = layers[l];
            out.push_back({p + "Wq", &L.Wq, nullptr});
            out.push_back({p + "Wk", &L.Wk, nullptr});
            out.push_back({p + "Wv", &L.Wv, nullptr});
            out.push_back({p + "Wo", &L.Wo, nullptr});
            out.push_back({p + "norm1_gain", nullptr, &L.norm1_gain});
            out.push_back({p + "norm2_gain", nullptr, &L.norm2_gain});
            out.push_back({p + "Wgate", &L.Wgate, nullptr});
            out.push_back({p + "Wup", &L.Wup, nullptr});
            out.push_back({p + "Wdown", &L.Wdown, nullptr});
        }
        out.push_back({"final_gain", nullptr, &final_gain});
        out.push_back({"Wout", &Wout, nullptr});
        for (std::size_t c = 0; c < cond.size(); ++c) {
            const std::string p = "cond" + std::to_string(c) + ".";
            CondSlot& s = cond[c];
            out.push_back({p + "value_w", nullptr, &s.value_w});
            out.push_back({p + "value_b", nullptr, &s.value_b});
            out.push_back({p + "label_emb", nullptr, &s.label_emb});
            out.push_back({p + "nan_emb", nullptr, &s.nan_emb});
        }
        out.push_back({"formula_elem", &formula_elem, nullptr});
        out.push_back({"formula_stoich", &formula_stoich, nullptr});
        out.push_back({"formula_nan", nullptr, &formula_nan});
        return out;
    }

    static ModelParams zeros(const ModelConfig& cfg) {
        cfg.validate();
        ModelParams p;
        p.config = cfg;
        const int D = cfg.d_emb, H = cfg.d_ffn_hidden, V = cfg.vocab_size;
        p.token_emb = Mat<Scalar>::Zero(V, D);
        p.layers.resize(static_cast<std::size_t>(cfg.n_layers));
        for (auto& L : p.layers) {
            L.Wq = Mat<Scalar>::Zero(D, D);
            L.Wk = Mat<Scalar>::Zero(D, D);
            L.Wv = Mat<Scalar>::Zero(D, D);
            L.Wo = Mat<Scalar>::Zero(D, D);
            L.norm1_gain = Vec<Scalar>::Zero(D);
            L.norm2_gain = Vec<Scalar>::Zero(D);
            L.Wgate = Mat<Scalar>::Zero(D, H);
            L.Wup = Mat<Scalar>::Zero(D, H);
            L.Wdown = Mat<Scalar>::Zero(H, D);
        }
        p.final_gain = Vec<Scalar>::Zero(D);
        p.Wout = Mat<Scalar>::Zero(D, V);
        p.cond.resize(static_cast<std::size_t>(cfg.n_conditions()));
        for (auto& s : p.cond) {
            s.value_w = Vec<Scalar>::Zero(D);
            s.value_b = Vec<Scalar>::Zero(D);
            s.label_emb = Vec<Scalar>::Zero(D);
            s.nan_emb = Vec<Scalar>::Zero(D);
        }
        p.formula_elem = Mat<Scalar>::Zero(kMaxAtomicNumber, D);
        p.formula_stoich = Mat<Scalar>::Zero(cfg.max_stoich, D);
        p.formula_nan = Vec<Scalar>::Zero(D);
        return p;
    }

    // Truncated normal (std 0.02) for weights and embeddings, zero biases,
    // unit norm gains. Deterministic in tensor order for a given stream.
    static ModelParams init(const ModelConfig& cfg, Rng& rng) {
        ModelParams p = zeros(cfg);
        for (auto& t : p.tensors()) {
            const bool is_gain = t.name.find("gain") != std::string::npos;
            const bool is_bias = t.name.find("value_b") != std::string::npos;
            Scalar* d = t.data();
            for (Eigen::Index i = 0; i < t.size(); ++i) {
                if (is_gain)
                    d[i] = Scalar(1);
                else if (is_bias)
                    d[i] = Scalar(0);
                else
                    d[i] = static_cast<Scalar>(rng.truncated_normal(0.02));
            }
        }
        return p;
    }

    void set_zero() {
        for (auto& t : tensors()) {
            Scalar* d = t.data();
            for (Eigen::Index i = 0; i < t.size(); ++i) d[i] = Scalar(0);
        }
    }
};

// Exact learnable scalar count for a configuration.
inline long long count_params(const ModelConfig& cfg) {
    cfg.validate();
    const long long D = cfg.d_emb, H = cfg.d_ffn_hidden, V = cfg.vocab_size, L = cfg.n_layers;
    long long n = 0;
    n += V * D;                            // token embeddings
    n += L * (4 * D * D + 2 * D + 3 * D * H);  // attention, norms, FFN per block
    n += D;                                // final norm gain
    n += D * V;                            // output head
    n += 4LL * cfg.n_conditions() * D;     // value w+b, label, NaN per slot
    n += static_cast<long long>(kMaxAtomicNumber) * D;  // formula element table
    n += static_cast<long long>(cfg.max_stoich) * D;    // stoichiometry table
    n += D;                                // formula NaN vector
    return n;
}

// --- Core ops -----------------------------------------------------------------

namespace nn {

inline constexpr double kRmsEps = 1e-6;

// y = x / sqrt(mean(x^2) + eps) .* gain, row-wise. Returns inverse RMS per row.
template <typename Scalar>
Vec<Scalar> rmsnorm(const Mat<Scalar>& x, const Vec<Scalar>& gain, Mat<Scalar>& y) {
    const Eigen::Index T = x.rows(), D = x.cols();
    Vec<Scalar> inv_rms(T);
    y.resize(T, D);
    for (Eigen::Index t = 0; t < T; ++t) {
        const Scalar ms = x.row(t).squaredNorm() / static_cast<Scalar>(D);
        const Scalar r = Scalar(1) / std::sqrt(ms + static_cast<Scalar>(kRmsEps));
        inv_rms[t] = r;
        y.row(t) = (x.row(t) * r).cwiseProduct(gain.transpose());
    }
    return inv_rms;
}

// Accumulates dgain; returns dx.
template <typename Scalar>
Mat<Scalar> rmsnorm_backward(const Mat<Scalar>& x, const Vec<Scalar>& gain,
                             const Vec<Scalar>& inv_rms, const Mat<Scalar>& dy,
                             Vec<Scalar>& dgain) {
    const Eigen::Index T = x.rows(), D = x.cols();
    Mat<Scalar> dx(T, D);
    for (Eigen::Index t = 0; t < T; ++t) {
        const Scalar r = inv_rms[t];
        const auto gdy = dy.row(t).cwiseProduct(gain.transpose());
        const Scalar proj = gdy.cwiseProduct(x.row(t)).sum();
        dx.row(t) = gdy * r - x.row(t) * (r * r * r * proj / static_cast<Scalar>(D));
        dgain += (dy.row(t).cwiseProduct(x.row(t)) * r).transpose();
    }
    return dx;
}

// Rotates pairs (2i, 2i+1) of each head-dim block by pos * base^(-2i/d_head).
// Works in place on a T × d_head block; position of row t is first_pos + t.
// sign = +1 forward, -1 inverse (used by the backward pass).
template <typename Scalar, typename Block>
void rope_apply(Block block, int first_pos, double base, int sign) {
    const Eigen::Index T = block.rows(), dh = block.cols();
    if (dh % 2 != 0) throw OddHeadDimError("rope requires an even head dimension");
    for (Eigen::Index i = 0; 2 * i < dh; ++i) {
        const double freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(dh));
        for (Eigen::Index t = 0; t < T; ++t) {
            const double angle = sign * (first_pos + static_cast<double>(t)) * freq;
            const Scalar c = static_cast<Scalar>(std::cos(angle));
            const Scalar s = static_cast<Scalar>(std::sin(angle));
            const Scalar x0 = block(t, 2 * i), x1 = block(t, 2 * i + 1);
            block(t, 2 * i) = x0 * c - x1 * s;
            block(t, 2 * i + 1) = x0 * s + x1 * c;
        }
    }
}

template <typename Scalar>
Scalar silu(Scalar x) {
    const Scalar s = Scalar(1) / (Scalar(1) + std::exp(-x));
    return x * s;
}

template <typename Scalar>
Scalar silu_grad(Scalar x) {
    const Scalar s = Scalar(1) / (Scalar(1) + std::exp(-x));
    return s * (Scalar(1) + x * (Scalar(1) - s));
}

// Row-wise softmax over scores with a strict causal mask: entries j > i are
// exactly zero in the result.
template <typename Scalar>
void causal_softmax_inplace(Mat<Scalar>& s) {
    const Eigen::Index T = s.rows();
    for (Eigen::Index i = 0; i < T; ++i) {
        Scalar mx = s(i, 0);
        for (Eigen::Index j = 1; j <= i; ++j) mx = std::max(mx, s(i, j));
        Scalar sum = Scalar(0);
        for (Eigen::Index j = 0; j <= i; ++j) {
            s(i, j) = std::exp(s(i, j) - mx);
            sum += s(i, j);
        }
        for (Eigen::Index j = 0; j <= i; ++j) s(i, j) /= sum;
        for (Eigen::Index j = i + 1; j < T; ++j) s(i, j) = Scalar(0);
    }
}

}  // namespace nn

// --- Condition prefix -----------------------------------------------------------

// Where each prefix row came from; drives the backward routing.
struct PrefixInfo {
    enum class Kind { ScalarPresent, ScalarAbsent, FormulaPair, FormulaNan };
    struct Row {
        Kind kind;
        int slot = -1;     // scalar slot index
        int element = 0;   // formula pair
        int stoich = 0;
        double value = 0;  // present scalar value
    };
    std::vector<Row> rows;
};

template <typename Scalar>
Mat<Scalar> embed_conditions(const ConditionSet& cs, const ModelParams<Scalar>& params,
                             PrefixInfo* info = nullptr) {
    const ModelConfig& cfg = params.config;
    for (const auto& [name, value] : cs.scalars) {
        cfg.condition_slot(name);  // throws UnknownConditionError
        if (std::isinf(value)) throw OutOfRangeError("condition value is infinite: " + name);
    }

    std::vector<PrefixInfo::Row> rows;
    const int n_formula =
        cs.formula ? static_cast<int>(cs.formula->size()) : 1;  // absent formula -> one NaN row
    if (cs.formula && cs.formula->empty())
        throw OutOfRangeError("formula condition must have at least one pair");
    const int P = cfg.n_conditions() + n_formula;
    Mat<Scalar> prefix(P, cfg.d_emb);

    for (int i = 0; i < cfg.n_conditions(); ++i) {
        const auto& slot = params.cond[static_cast<std::size_t>(i)];
        auto it = cs.scalars.find(cfg.condition_schema[static_cast<std::size_t>(i)]);
        // A NaN value marks the condition absent, same as a missing key.
        if (it != cs.scalars.end() && std::isnan(it->second)) it = cs.scalars.end();
        if (it != cs.scalars.end()) {
            const Scalar v = static_cast<Scalar>(it->second);
            prefix.row(i) = (slot.value_w * v + slot.value_b + slot.label_emb).transpose();
            rows.push_back({PrefixInfo::Kind::ScalarPresent, i, 0, 0, it->second});
        } else {
            prefix.row(i) = (slot.nan_emb + slot.label_emb).transpose();
            rows.push_back({PrefixInfo::Kind::ScalarAbsent, i, 0, 0, 0.0});
        }
    }
    int r = cfg.n_conditions();
    if (cs.formula) {
        for (const auto& [z, count] : *cs.formula) {
            if (!is_known_element(z))
                throw UnknownElementError("formula element out of range: " + std::to_string(z));
            if (count < 1 || count > cfg.max_stoich)
                throw StoichOutOfTableError("stoichiometric count " + std::to_string(count) +
                                            " outside 1.." + std::to_string(cfg.max_stoich));
            prefix.row(r) = params.formula_elem.row(z - 1) + params.formula_stoich.row(count - 1);
            rows.push_back({PrefixInfo::Kind::FormulaPair, -1, z, count, 0.0});
            ++r;
        }
    } else {
        prefix.row(r) = params.formula_nan.transpose();
        rows.push_back({PrefixInfo::Kind::FormulaNan, -1, 0, 0, 0.0});
    }
    if (info) info->rows = std::move(rows);
    return prefix;
}

// --- Forward / backward ------------------------------------------------------------

enum class RunMode { Train, Eval };

template <typename Scalar>
struct ForwardCache {
    int prefix_len = 0;
    int total_len = 0;
    RunMode mode = RunMode::Eval;
    PrefixInfo prefix_info;

    Mat<Scalar> emb_mask;  // dropout mask on the embedding sum (train mode)
    struct LayerCache {
        Mat<Scalar> x_in, xn1;        // block input; rmsnorm output
        Vec<Scalar> rms1, rms2;       // inverse RMS per row
        Mat<Scalar> Qr, Kr, Vv;       // post-rope Q/K and V
        std::vector<Mat<Scalar>> A;   // attention rows per head
        Mat<Scalar> attn_concat;
        Mat<Scalar> drop1;            // mask after the attention projection
        Mat<Scalar> x_mid, xn2;
        Mat<Scalar> G, U, Hact;       // ffn pre-activations and hidden product
        Mat<Scalar> drop2;            // mask after the down projection
    };
    std::vector<LayerCache> layers;
    Mat<Scalar> x_final, xn_final;
    Vec<Scalar> rms_final;
    Mat<Scalar> logits;  // total_len × vocab
};

namespace nn {

template <typename Scalar>
Mat<Scalar> dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate, Rng& rng) {
    Mat<Scalar> m(rows, cols);
    const Scalar keep_scale = static_cast<Scalar>(1.0 / (1.0 - rate));
    for (Eigen::Index j = 0; j < cols; ++j)
        for (Eigen::Index i = 0; i < rows; ++i)
            m(i, j) = rng.uniform() < rate ? Scalar(0) : keep_scale;
    return m;
}

}  // namespace nn

// Logits for every position (prefix included; masking is the trainer's job).
// Train mode draws dropout from `rng`; eval mode is deterministic and `rng`
// may be null.
template <typename Scalar>
ForwardCache<Scalar> forward_logits(const TokenSequence& tokens, const ConditionSet& cs,
                                    const ModelParams<Scalar>& params, RunMode mode,
                                    Rng* rng = nullptr) {
    const ModelConfig& cfg = params.config;
    cfg.validate();
    if (mode == RunMode::Train && cfg.dropout_rate > 0.0 && rng == nullptr)
        throw ConfigError("train-mode forward with dropout requires an RNG");

    ForwardCache<Scalar> cache;
    cache.mode = mode;
    const Mat<Scalar> prefix = embed_conditions(cs, params, &cache.prefix_info);
    const int P = static_cast<int>(prefix.rows());
    const int L = static_cast<int>(tokens.size());
    const int T = P + L;
    if (T > cfg.max_seq_len)
        throw SequenceTooLongError("sequence length " + std::to_string(T) + " exceeds max " +
                                   std::to_string(cfg.max_seq_len));
    cache.prefix_len = P;
    cache.total_len = T;

    const int D = cfg.d_emb, NH = cfg.n_heads, dk = cfg.d_head(), HF = cfg.d_ffn_hidden;
    const Scalar scale = static_cast<Scalar>(1.0 / std::sqrt(static_cast<double>(dk)));
    const bool drop = mode == RunMode::Train && cfg.dropout_rate > 0.0;

    Mat<Scalar> x(T, D);
    x.topRows(P) = prefix;
    for (int i = 0; i < L; ++i) {
        const int id = tokens[static_cast<std::size_t>(i)];
        if (id < 0 || id >= cfg.vocab_size)
            throw OutOfRangeError("token id outside vocabulary: " + std::to_string(id));
        x.row(P + i) = params.token_emb.row(id);
    }
    if (drop) {
        cache.emb_mask = nn::dropout_mask<Scalar>(T, D, cfg.dropout_rate, *rng);
        x = x.cwiseProduct(cache.emb_mask);
    }

    cache.layers.resize(static_cast<std::size_t>(cfg.n_layers));
    for (int l = 0; l < cfg.n_layers; ++l) {
        auto& lc = cache.layers[static_cast<std::size_t>(l)];
        const auto& w = params.layers[static_cast<std::size_t>(l)];
        lc.x_in = x;
        lc.rms1 = nn::rmsnorm(lc.x_in, w.norm1_gain, lc.xn1);

        lc.Qr = lc.xn1 * w.Wq;
        lc.Kr = lc.xn1 * w.Wk;
        lc.Vv = lc.xn1 * w.Wv;
        for (int h = 0; h < NH; ++h) {
            nn::rope_apply<Scalar>(lc.Qr.middleCols(h * dk, dk), 0, cfg.rope_base, +1);
            nn::rope_apply<Scalar>(lc.Kr.middleCols(h * dk, dk), 0, cfg.rope_base, +1);
        }

        lc.A.resize(static_cast<std::size_t>(NH));
        lc.attn_concat.resize(T, D);
        for (int h = 0; h < NH; ++h) {
            const auto Qh = lc.Qr.middleCols(h * dk, dk);
            const auto Kh = lc.Kr.middleCols(h * dk, dk);
            const auto Vh = lc.Vv.middleCols(h * dk, dk);
            Mat<Scalar>& A = lc.A[static_cast<std::size_t>(h)];
            A = (Qh * Kh.transpose()) * scale;
            nn::causal_softmax_inplace(A);
            lc.attn_concat.middleCols(h * dk, dk) = A * Vh;
        }
        Mat<Scalar> attn_out = lc.attn_concat * w.Wo;
        if (drop) {
            lc.drop1 = nn::dropout_mask<Scalar>(T, D, cfg.dropout_rate, *rng);
            attn_out = attn_out.cwiseProduct(lc.drop1);
        }
        x += attn_out;

        lc.x_mid = x;
        lc.rms2 = nn::rmsnorm(lc.x_mid, w.norm2_gain, lc.xn2);
        lc.G = lc.xn2 * w.Wgate;
        lc.U = lc.xn2 * w.Wup;
        lc.Hact.resize(T, HF);
        for (Eigen::Index jj = 0; jj < lc.G.size(); ++jj)
            lc.Hact.data()[jj] = nn::silu(lc.G.data()[jj]) * lc.U.data()[jj];
        Mat<Scalar> ffn_out = lc.Hact * w.Wdown;
        if (drop) {
            lc.drop2 = nn::dropout_mask<Scalar>(T, D, cfg.dropout_rate, *rng);
            ffn_out = ffn_out.cwiseProduct(lc.drop2);
        }
        x += ffn_out;
    }

    cache.x_final = x;
    cache.rms_final = nn::rmsnorm(cache.x_final, params.final_gain, cache.xn_final);
    cache.logits = cache.xn_final * params.Wout;
    return cache;
}

// Analytic gradients; accumulates into `grads` (same shapes as params).
// `dlogits` is d(loss)/d(logits) for every position, total_len × vocab.
template <typename Scalar>
void backward(const ForwardCache<Scalar>& cache, const TokenSequence& tokens,
              const ModelParams<Scalar>& params, const Mat<Scalar>& dlogits,
              ModelParams<Scalar>& grads) {
    const ModelConfig& cfg = params.config;
    const int T = cache.total_len, P = cache.prefix_len;
    const int D = cfg.d_emb, NH = cfg.n_heads, dk = cfg.d_head();
    const Scalar scale = static_cast<Scalar>(1.0 / std::sqrt(static_cast<double>(dk)));
    const bool drop = cache.mode == RunMode::Train && cfg.dropout_rate > 0.0;

    // Output head and final norm.
    grads.Wout += cache.xn_final.transpose() * dlogits;
    Mat<Scalar> dxn = dlogits * params.Wout.transpose();
    Mat<Scalar> dx = nn::rmsnorm_backward(cache.x_final, params.final_gain, cache.rms_final,
                                          dxn, grads.final_gain);

    for (int l = cfg.n_layers - 1; l >= 0; --l) {
        const auto& lc = cache.layers[static_cast<std::size_t>(l)];
        const auto& w = params.layers[static_cast<std::size_t>(l)];
        auto& gw = grads.layers[static_cast<std::size_t>(l)];

        // FFN block: x = x_mid + drop2(Hact * Wdown)
        Mat<Scalar> d_ffn_out = drop ? dx.cwiseProduct(lc.drop2).eval() : dx;
        gw.Wdown += lc.Hact.transpose() * d_ffn_out;
        Mat<Scalar> dHact = d_ffn_out * w.Wdown.transpose();
        Mat<Scalar> dG(lc.G.rows(), lc.G.cols()), dU(lc.U.rows(), lc.U.cols());
        for (Eigen::Index jj = 0; jj < dG.size(); ++jj) {
            const Scalar g = lc.G.data()[jj];
            dG.data()[jj] = dHact.data()[jj] * lc.U.data()[jj] * nn::silu_grad(g);
            dU.data()[jj] = dHact.data()[jj] * nn::silu(g);
        }
        gw.Wgate += lc.xn2.transpose() * dG;
        gw.Wup += lc.xn2.transpose() * dU;
        Mat<Scalar> dxn2 = dG * w.Wgate.transpose() + dU * w.Wup.transpose();
        dx += nn::rmsnorm_backward(lc.x_mid, w.norm2_gain, lc.rms2, dxn2, gw.norm2_gain);

        // Attention block: x_mid = x_in + drop1(concat * Wo)
        Mat<Scalar> d_attn_out = drop ? dx.cwiseProduct(lc.drop1).eval() : dx;
        gw.Wo += lc.attn_concat.transpose() * d_attn_out;
        Mat<Scalar> dConcat = d_attn_out * w.Wo.transpose();

        Mat<Scalar> dQr(T, D), dKr(T, D), dVv(T, D);
        for (int h = 0; h < NH; ++h) {
            const auto Qh = lc.Qr.middleCols(h * dk, dk);
            const auto Kh = lc.Kr.middleCols(h * dk, dk);
            const auto Vh = lc.Vv.middleCols(h * dk, dk);
            const Mat<Scalar>& A = lc.A[static_cast<std::size_t>(h)];
            const auto dOh = dConcat.middleCols(h * dk, dk);

            Mat<Scalar> dA = dOh * Vh.transpose();
            dVv.middleCols(h * dk, dk) = A.transpose() * dOh;

            // Softmax backward; masked entries have A == 0, so they vanish.
            Mat<Scalar> dS(T, T);
            for (Eigen::Index i = 0; i < T; ++i) {
                const Scalar dot = A.row(i).dot(dA.row(i));
                dS.row(i) = (A.row(i).array() * (dA.row(i).array() - dot)).matrix();
            }
            dQr.middleCols(h * dk, dk) = (dS * Kh) * scale;
            dKr.middleCols(h * dk, dk) = (dS.transpose() * Qh) * scale;
            // Undo the rotations (they are orthogonal).
            nn::rope_apply<Scalar>(dQr.middleCols(h * dk, dk), 0, cfg.rope_base, -1);
            nn::rope_apply<Scalar>(dKr.middleCols(h * dk, dk), 0, cfg.rope_base, -1);
        }
        gw.Wq += lc.xn1.transpose() * dQr;
        gw.Wk += lc.xn1.transpose() * dKr;
        gw.Wv += lc.xn1.transpose() * dVv;
        Mat<Scalar> dxn1 =
            dQr * w.Wq.transpose() + dKr * w.Wk.transpose() + dVv * w.Wv.transpose();
        dx += nn::rmsnorm_backward(lc.x_in, w.norm1_gain, lc.rms1, dxn1, gw.norm1_gain);
    }

    if (drop) dx = dx.cwiseProduct(cache.emb_mask);

    // Route embedding gradients.
    for (int i = 0; i < P; ++i) {
        const auto& row = cache.prefix_info.rows[static_cast<std::size_t>(i)];
        const auto g = dx.row(i).transpose();
        switch (row.kind) {
            case PrefixInfo::Kind::ScalarPresent: {
                auto& slot = grads.cond[static_cast<std::size_t>(row.slot)];
                slot.value_w += g * static_cast<Scalar>(row.value);
                slot.value_b += g;
                slot.label_emb += g;
                break;
            }
            case PrefixInfo::Kind::ScalarAbsent: {
                auto& slot = grads.cond[static_cast<std::size_t>(row.slot)];
                slot.nan_emb += g;
                slot.label_emb += g;
                break;
            }
            case PrefixInfo::Kind::FormulaPair:
                grads.formula_elem.row(row.element - 1) += g.transpose();
                grads.formula_stoich.row(row.stoich - 1) += g.transpose();
                break;
            case PrefixInfo::Kind::FormulaNan:
                grads.formula_nan += g;
                break;
        }
    }
    for (int i = 0; i < T - P; ++i)
        grads.token_emb.row(tokens[static_cast<std::size_t>(i)]) += dx.row(P + i);
}

// --- Incremental (KV-cached) evaluation --------------------------------------------

// Per-layer key/value rows appended one position at a time. The step kernel in
// `forward_step` is the reference implementation for incremental decoding;
// replaying it from an empty cache reproduces its logits bit for bit.
template <typename Scalar>
struct KVCache {
    std::vector<Mat<Scalar>> K, V;  // each max_len × d_emb, first `length` rows valid
    int length = 0;

    static KVCache make(const ModelConfig& cfg) {
        KVCache c;
        c.K.assign(static_cast<std::size_t>(cfg.n_layers),
                   Mat<Scalar>(cfg.max_seq_len, cfg.d_emb));
        c.V.assign(static_cast<std::size_t>(cfg.n_layers),
                   Mat<Scalar>(cfg.max_seq_len, cfg.d_emb));
        return c;
    }
};

// Eval-mode forward of one position given all previous positions in `kv`.
// `x_row` is the embedding of this position (token or prefix row). Returns the
// vocab logits for this position and appends this position's K/V.
template <typename Scalar>
Vec<Scalar> forward_step(const Eigen::Ref<const Vec<Scalar>>& x_row,
                         const ModelParams<Scalar>& params, KVCache<Scalar>& kv) {
    const ModelConfig& cfg = params.config;
    const int pos = kv.length;
    if (pos >= cfg.max_seq_len) throw SequenceTooLongError("KV cache is full");
    const int D = cfg.d_emb, NH = cfg.n_heads, dk = cfg.d_head();
    const Scalar scale = static_cast<Scalar>(1.0 / std::sqrt(static_cast<double>(dk)));

    Vec<Scalar> x = x_row;
    Mat<Scalar> xn_m(1, D);
    for (int l = 0; l < cfg.n_layers; ++l) {
        const auto& w = params.layers[static_cast<std::size_t>(l)];
        Mat<Scalar> x_m = x.transpose();
        nn::rmsnorm(x_m, w.norm1_gain, xn_m);

        Mat<Scalar> q = xn_m * w.Wq;
        Mat<Scalar> k = xn_m * w.Wk;
        Mat<Scalar> v = xn_m * w.Wv;
        for (int h = 0; h < NH; ++h) {
            nn::rope_apply<Scalar>(q.middleCols(h * dk, dk), pos, cfg.rope_base, +1);
            nn::rope_apply<Scalar>(k.middleCols(h * dk, dk), pos, cfg.rope_base, +1);
        }
        auto& K = kv.K[static_cast<std::size_t>(l)];
        auto& V = kv.V[static_cast<std::size_t>(l)];
        K.row(pos) = k;
        V.row(pos) = v;

        Mat<Scalar> concat(1, D);
        for (int h = 0; h < NH; ++h) {
            const auto Kh = K.middleCols(h * dk, dk).topRows(pos + 1);
            const auto Vh = V.middleCols(h * dk, dk).topRows(pos + 1);
            Vec<Scalar> s = (Kh * q.middleCols(h * dk, dk).transpose()) * scale;
            // softmax over 0..pos
            Scalar mx = s[0];
            for (int j = 1; j <= pos; ++j) mx = std::max(mx, s[j]);
            Scalar sum = Scalar(0);
            for (int j = 0; j <= pos; ++j) {
                s[j] = std::exp(s[j] - mx);
                sum += s[j];
            }
            for (int j = 0; j <= pos; ++j) s[j] /= sum;
            concat.middleCols(h * dk, dk) = s.transpose() * Vh;
        }
        x += (concat * w.Wo).transpose();

        x_m = x.transpose();
        nn::rmsnorm(x_m, w.norm2_gain, xn_m);
        Mat<Scalar> g = xn_m * w.Wgate;
        Mat<Scalar> u = xn_m * w.Wup;
        for (Eigen::Index jj = 0; jj < g.size(); ++jj)
            g.data()[jj] = nn::silu(g.data()[jj]) * u.data()[jj];
        x += (g * w.Wdown).transpose();
    }
    Mat<Scalar> x_m = x.transpose();
    nn::rmsnorm(x_m, params.final_gain, xn_m);
    kv.length = pos + 1;
    return (xn_m * params.Wout).transpose();
}

}  // namespace matseq
