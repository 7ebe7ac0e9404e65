#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "matseq/data_io.hpp"
#include "matseq/errors.hpp"
#include "matseq/model.hpp"
#include "matseq/trainer.hpp"

namespace matseq {

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"n_layers", c.n_layers},
                       {"n_heads", c.n_heads},
                       {"d_emb", c.d_emb},
                       {"d_ffn_hidden", c.d_ffn_hidden},
                       {"dropout_rate", c.dropout_rate},
                       {"vocab_size", c.vocab_size},
                       {"max_seq_len", c.max_seq_len},
                       {"rope_base", c.rope_base},
                       {"condition_schema", c.condition_schema},
                       {"max_stoich", c.max_stoich}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    c = ModelConfig{};
    c.n_layers = j.value("n_layers", c.n_layers);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.d_emb = j.value("d_emb", c.d_emb);
    c.d_ffn_hidden = j.value("d_ffn_hidden", c.d_ffn_hidden);
    c.dropout_rate = j.value("dropout_rate", c.dropout_rate);
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
    c.rope_base = j.value("rope_base", c.rope_base);
    if (j.contains("condition_schema"))
        c.condition_schema = j.at("condition_schema").get<std::vector<std::string>>();
    c.max_stoich = j.value("max_stoich", c.max_stoich);
}

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{{"batch_size", c.batch_size},
                       {"lr_init", c.lr_init},
                       {"lr_factor", c.lr_factor},
                       {"plateau_patience", c.plateau_patience},
                       {"beta1", c.beta1},
                       {"beta2", c.beta2},
                       {"adam_eps", c.adam_eps},
                       {"weight_decay", c.weight_decay},
                       {"epochs", c.epochs},
                       {"cond_dropout_p", c.cond_dropout_p},
                       {"seed", c.seed},
                       {"grad_clip_norm", c.grad_clip_norm}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    c = TrainConfig{};
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr_init = j.value("lr_init", c.lr_init);
    c.lr_factor = j.value("lr_factor", c.lr_factor);
    c.plateau_patience = j.value("plateau_patience", c.plateau_patience);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.epochs = j.value("epochs", c.epochs);
    c.cond_dropout_p = j.value("cond_dropout_p", c.cond_dropout_p);
    c.seed = j.value("seed", c.seed);
    c.grad_clip_norm = j.value("grad_clip_norm", c.grad_clip_norm);
}

// --- Checkpoint container ----------------------------------------------------------
//
// Layout: 8-byte magic, little-endian u64 header length, JSON header, then the
// raw tensor payload (f64, column-major, in header order). The header records
// the model config, the vocabulary hash, every tensor's name and shape, and an
// arbitrary `extra` document (used for optimizer state).

namespace detail {

inline constexpr char kCkptMagic[8] = {'M', 'S', 'Q', 'C', 'K', 'P', 'T', '1'};

inline void append_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t read_u64(const std::string& s, std::size_t off) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(s[off + static_cast<std::size_t>(i)]))
             << (8 * i);
    return v;
}

template <typename Scalar>
void append_tensor_f64(std::string& out, const typename ModelParams<Scalar>::Named& t) {
    const Scalar* d = t.data();
    for (Eigen::Index i = 0; i < t.size(); ++i) {
        const double v = static_cast<double>(d[i]);
        char buf[8];
        std::memcpy(buf, &v, 8);
        out.append(buf, 8);
    }
}

template <typename Scalar>
struct NamedShape {
    std::string name;
    Eigen::Index rows, cols;
};

template <typename Scalar>
nlohmann::json tensor_index(std::vector<typename ModelParams<Scalar>::Named>& ts) {
    nlohmann::json arr = nlohmann::json::array();
    for (auto& t : ts) {
        const Eigen::Index rows = t.mat ? t.mat->rows() : t.vec->rows();
        const Eigen::Index cols = t.mat ? t.mat->cols() : 1;
        arr.push_back({{"name", t.name}, {"rows", rows}, {"cols", cols}});
    }
    return arr;
}

}  // namespace detail

struct CheckpointInfo {
    ModelConfig config;
    std::string vocab_hash;
    nlohmann::json extra;
};

template <typename Scalar>
void save_checkpoint(const std::string& path, const ModelParams<Scalar>& params,
                     const std::string& vocab_hash,
                     const nlohmann::json& extra = nlohmann::json::object()) {
    auto& mutable_params = const_cast<ModelParams<Scalar>&>(params);  // tensors() is non-const
    auto ts = mutable_params.tensors();
    nlohmann::json header{{"format", "matseq-checkpoint"},
                          {"version", 1},
                          {"scalar", "f64"},
                          {"config", params.config},
                          {"vocab_hash", vocab_hash},
                          {"tensors", detail::tensor_index<Scalar>(ts)},
                          {"extra", extra}};
    const std::string hdr = header.dump();
    std::string blob;
    long long payload = 0;
    for (auto& t : ts) payload += t.size();
    blob.reserve(16 + hdr.size() + static_cast<std::size_t>(payload) * 8);
    blob.append(detail::kCkptMagic, 8);
    detail::append_u64(blob, hdr.size());
    blob += hdr;
    for (auto& t : ts) detail::append_tensor_f64<Scalar>(blob, t);
    atomic_write_text(path, blob);
}

inline CheckpointInfo peek_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path);
    std::string head(16, '\0');
    in.read(head.data(), 16);
    if (in.gcount() != 16 || std::memcmp(head.data(), detail::kCkptMagic, 8) != 0)
        throw CheckpointError("not a checkpoint file: " + path);
    const std::uint64_t hlen = detail::read_u64(head, 8);
    if (hlen > (1ull << 30)) throw CheckpointError("corrupt checkpoint header length");
    std::string hdr(static_cast<std::size_t>(hlen), '\0');
    in.read(hdr.data(), static_cast<std::streamsize>(hlen));
    if (static_cast<std::uint64_t>(in.gcount()) != hlen)
        throw CheckpointError("truncated checkpoint header");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(hdr);
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("bad checkpoint header: ") + e.what());
    }
    if (j.value("version", 0) != 1) throw CheckpointError("unsupported checkpoint version");
    if (j.value("scalar", "") != std::string("f64"))
        throw CheckpointError("unsupported checkpoint scalar type");
    CheckpointInfo info;
    info.config = j.at("config").get<ModelConfig>();
    info.vocab_hash = j.value("vocab_hash", "");
    info.extra = j.value("extra", nlohmann::json::object());
    return info;
}

template <typename Scalar>
ModelParams<Scalar> load_checkpoint(const std::string& path, CheckpointInfo* info_out = nullptr,
                                    const std::string& expected_vocab_hash = "") {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path);
    std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (blob.size() < 16 || std::memcmp(blob.data(), detail::kCkptMagic, 8) != 0)
        throw CheckpointError("not a checkpoint file: " + path);
    const std::uint64_t hlen = detail::read_u64(blob, 8);
    if (16 + hlen > blob.size()) throw CheckpointError("truncated checkpoint header");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(blob.substr(16, static_cast<std::size_t>(hlen)));
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("bad checkpoint header: ") + e.what());
    }
    if (j.value("version", 0) != 1) throw CheckpointError("unsupported checkpoint version");
    if (j.value("scalar", "") != std::string("f64"))
        throw CheckpointError("unsupported checkpoint scalar type");

    CheckpointInfo info;
    info.config = j.at("config").get<ModelConfig>();
    info.vocab_hash = j.value("vocab_hash", "");
    info.extra = j.value("extra", nlohmann::json::object());
    if (!expected_vocab_hash.empty() && info.vocab_hash != expected_vocab_hash)
        throw CheckpointError("vocabulary hash mismatch: checkpoint " + info.vocab_hash +
                              " vs expected " + expected_vocab_hash);

    auto params = ModelParams<Scalar>::zeros(info.config);
    auto ts = params.tensors();
    const auto& index = j.at("tensors");
    if (index.size() != ts.size())
        throw CheckpointError("checkpoint tensor count does not match config");
    std::size_t off = 16 + static_cast<std::size_t>(hlen);
    for (std::size_t k = 0; k < ts.size(); ++k) {
        const auto& entry = index[k];
        const Eigen::Index rows = ts[k].mat ? ts[k].mat->rows() : ts[k].vec->rows();
        const Eigen::Index cols = ts[k].mat ? ts[k].mat->cols() : 1;
        if (entry.at("name").get<std::string>() != ts[k].name ||
            entry.at("rows").get<Eigen::Index>() != rows ||
            entry.at("cols").get<Eigen::Index>() != cols)
            throw CheckpointError("checkpoint tensor mismatch at " + ts[k].name);
        const std::size_t bytes = static_cast<std::size_t>(ts[k].size()) * 8;
        if (off + bytes > blob.size()) throw CheckpointError("truncated checkpoint payload");
        Scalar* d = ts[k].data();
        for (Eigen::Index i = 0; i < ts[k].size(); ++i) {
            double v;
            std::memcpy(&v, blob.data() + off + static_cast<std::size_t>(i) * 8, 8);
            d[i] = static_cast<Scalar>(v);
        }
        off += bytes;
    }
    if (off != blob.size()) throw CheckpointError("checkpoint has trailing bytes");
    if (info_out) *info_out = info;
    return params;
}

// --- Optimizer-state checkpoints ---------------------------------------------------
//
// Training snapshots reuse the container: model tensors first, then first and
// second moments under reserved names, with the loop bookkeeping in `extra`.

template <typename Scalar>
void save_train_checkpoint(const std::string& path, const TrainState<Scalar>& state,
                           const std::string& vocab_hash) {
    auto& st = const_cast<TrainState<Scalar>&>(state);
    auto pts = st.params.tensors();
    auto mts = st.adam_m.tensors();
    auto vts = st.adam_v.tensors();

    nlohmann::json tindex = nlohmann::json::array();
    auto add_index = [&](std::vector<typename ModelParams<Scalar>::Named>& ts,
                         const std::string& prefix) {
        for (auto& t : ts) {
            const Eigen::Index rows = t.mat ? t.mat->rows() : t.vec->rows();
            const Eigen::Index cols = t.mat ? t.mat->cols() : 1;
            tindex.push_back({{"name", prefix + t.name}, {"rows", rows}, {"cols", cols}});
        }
    };
    add_index(pts, "");
    add_index(mts, "adam_m.");
    add_index(vts, "adam_v.");

    const auto rng_state = st.rng.state();
    nlohmann::json extra{{"train_state",
                          {{"adam_t", state.adam_t},
                           {"epoch", state.epoch},
                           {"epochs_since_improve", state.epochs_since_improve},
                           {"lr", state.lr},
                           {"rng_state", {rng_state[0], rng_state[1], rng_state[2], rng_state[3]}},
                           {"train_config", state.train_config}}}};
    if (std::isfinite(state.best_val)) extra["train_state"]["best_val"] = state.best_val;

    nlohmann::json header{{"format", "matseq-checkpoint"}, {"version", 1},
                          {"scalar", "f64"},              {"config", state.params.config},
                          {"vocab_hash", vocab_hash},     {"tensors", tindex},
                          {"extra", extra}};
    const std::string hdr = header.dump();
    std::string blob;
    blob.append(detail::kCkptMagic, 8);
    detail::append_u64(blob, hdr.size());
    blob += hdr;
    for (auto* group : {&pts, &mts, &vts})
        for (auto& t : *group) detail::append_tensor_f64<Scalar>(blob, t);
    atomic_write_text(path, blob);
}

template <typename Scalar>
TrainState<Scalar> load_train_checkpoint(const std::string& path,
                                         const std::string& expected_vocab_hash = "") {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path);
    std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (blob.size() < 16 || std::memcmp(blob.data(), detail::kCkptMagic, 8) != 0)
        throw CheckpointError("not a checkpoint file: " + path);
    const std::uint64_t hlen = detail::read_u64(blob, 8);
    if (16 + hlen > blob.size()) throw CheckpointError("truncated checkpoint header");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(blob.substr(16, static_cast<std::size_t>(hlen)));
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("bad checkpoint header: ") + e.what());
    }
    if (!j.contains("extra") || !j["extra"].contains("train_state"))
        throw CheckpointError("checkpoint carries no optimizer state");
    const ModelConfig cfg = j.at("config").get<ModelConfig>();
    const std::string vocab_hash = j.value("vocab_hash", "");
    if (!expected_vocab_hash.empty() && vocab_hash != expected_vocab_hash)
        throw CheckpointError("vocabulary hash mismatch: checkpoint " + vocab_hash +
                              " vs expected " + expected_vocab_hash);

    const auto& st = j["extra"]["train_state"];
    TrainState<Scalar> state;
    state.train_config = st.at("train_config").get<TrainConfig>();
    state.params = ModelParams<Scalar>::zeros(cfg);
    state.adam_m = ModelParams<Scalar>::zeros(cfg);
    state.adam_v = ModelParams<Scalar>::zeros(cfg);
    state.adam_t = st.at("adam_t").get<long long>();
    state.epoch = st.at("epoch").get<int>();
    state.best_val = st.contains("best_val") ? st["best_val"].get<double>()
                                             : std::numeric_limits<double>::infinity();
    state.epochs_since_improve = st.at("epochs_since_improve").get<int>();
    state.lr = st.at("lr").get<double>();
    std::array<std::uint64_t, 4> rs{};
    for (int i = 0; i < 4; ++i) rs[static_cast<std::size_t>(i)] = st.at("rng_state")[static_cast<std::size_t>(i)].get<std::uint64_t>();
    state.rng.set_state(rs);

    auto pts = state.params.tensors();
    auto mts = state.adam_m.tensors();
    auto vts = state.adam_v.tensors();
    const auto& index = j.at("tensors");
    if (index.size() != pts.size() * 3)
        throw CheckpointError("checkpoint tensor count does not match optimizer layout");
    std::size_t off = 16 + static_cast<std::size_t>(hlen);
    std::size_t k = 0;
    for (auto* group : {&pts, &mts, &vts}) {
        for (auto& t : *group) {
            const auto& entry = index[k++];
            const std::size_t bytes = static_cast<std::size_t>(t.size()) * 8;
            if (entry.at("rows").get<Eigen::Index>() * entry.at("cols").get<Eigen::Index>() !=
                t.size())
                throw CheckpointError("checkpoint tensor mismatch at " +
                                      entry.at("name").get<std::string>());
            if (off + bytes > blob.size()) throw CheckpointError("truncated checkpoint payload");
            Scalar* d = t.data();
            for (Eigen::Index i = 0; i < t.size(); ++i) {
                double v;
                std::memcpy(&v, blob.data() + off + static_cast<std::size_t>(i) * 8, 8);
                d[i] = static_cast<Scalar>(v);
            }
            off += bytes;
        }
    }
    if (off != blob.size()) throw CheckpointError("checkpoint has trailing bytes");
    return state;
}

}  // namespace matseq
