// matseq command-line tool: tokenize / train / generate / evaluate / inspect.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 data error
// (unreadable/malformed inputs), 3 runtime error.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "matseq/checkpoint.hpp"
#include "matseq/crystal.hpp"
#include "matseq/data_io.hpp"
#include "matseq/evaluator.hpp"
#include "matseq/model.hpp"
#include "matseq/sampler.hpp"
#include "matseq/tokenizer.hpp"
#include "matseq/trainer.hpp"

namespace {

using namespace matseq;
using nlohmann::json;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitRuntime = 3;

struct ErrorClass {
    const char* label;
    int code;
};

ErrorClass classify_error(const Error& e) {
    if (dynamic_cast<const ConfigError*>(&e)) return {"ConfigError", kExitUsage};
    if (dynamic_cast<const OddHeadDimError*>(&e)) return {"ConfigError", kExitUsage};
    if (dynamic_cast<const ParseError*>(&e)) return {"ParseError", kExitData};
    if (dynamic_cast<const EmptyCorpusError*>(&e)) return {"EmptyCorpus", kExitData};
    if (dynamic_cast<const EmptyTableError*>(&e)) return {"EmptyTable", kExitData};
    if (dynamic_cast<const UnknownElementError*>(&e)) return {"UnknownElement", kExitData};
    if (dynamic_cast<const UnknownElementOxiError*>(&e)) return {"UnknownElementOxi", kExitData};
    if (dynamic_cast<const UnknownConditionError*>(&e)) return {"UnknownCondition", kExitData};
    if (dynamic_cast<const StoichOutOfTableError*>(&e)) return {"StoichOutOfTable", kExitData};
    if (dynamic_cast<const OutOfRangeError*>(&e)) return {"OutOfRange", kExitData};
    if (dynamic_cast<const NegativeValueError*>(&e)) return {"NegativeValue", kExitData};
    if (dynamic_cast<const CheckpointError*>(&e)) return {"Checkpoint", kExitData};
    if (dynamic_cast<const IoError*>(&e)) return {"Io", kExitData};
    if (dynamic_cast<const TooFewSamplesError*>(&e)) return {"TooFewSamples", kExitData};
    if (dynamic_cast<const TooSmallError*>(&e)) return {"TooSmall", kExitData};
    if (dynamic_cast<const DegenerateCellError*>(&e)) return {"DegenerateCell", kExitData};
    return {"Runtime", kExitRuntime};
}

template <typename Fn>
int run_guarded(Fn&& fn) {
    try {
        return fn();
    } catch (const Error& e) {
        const ErrorClass c = classify_error(e);
        std::cerr << "error (" << c.label << "): " << e.what() << "\n";
        return c.code;
    } catch (const json::exception& e) {
        std::cerr << "error (Json): " << e.what() << "\n";
        return kExitData;
    } catch (const std::exception& e) {
        std::cerr << "error (Runtime): " << e.what() << "\n";
        return kExitRuntime;
    }
}

// --- Config-file layering --------------------------------------------------------
//
// Every subcommand takes --config <json>; file values fill in options the user
// did not pass on the command line (precedence: file < flags). The fully
// resolved configuration is echoed as the run's first stdout line.

class ConfigBinder {
public:
    explicit ConfigBinder(CLI::App* cmd) : cmd_(cmd) {
        cmd_->add_option("--config", config_path_,
                         "JSON object with defaults for any long option (flags win)");
    }

    template <typename T>
    CLI::Option* bind(const std::string& flag, T& target, const std::string& desc) {
        CLI::Option* opt = cmd_->add_option(flag, target, desc);
        add_entry(flag, opt, target);
        return opt;
    }

    CLI::Option* bind_flag(const std::string& flag, bool& target, const std::string& desc) {
        CLI::Option* opt = cmd_->add_flag(flag, target, desc);
        add_entry(flag, opt, target);
        return opt;
    }

    // True once resolve() ran if the option came from the flag or the file.
    bool provided(const std::string& key) const {
        for (const Entry& e : entries_)
            if (e.key == key) return e.opt->count() > 0 || e.from_file;
        throw ConfigError("unknown option key: " + key);
    }

    json resolve() {
        json file = json::object();
        if (!config_path_.empty()) {
            std::ifstream f(config_path_);
            if (!f) throw IoError("cannot read config file: " + config_path_);
            try {
                file = json::parse(f);
            } catch (const json::exception& e) {
                throw ParseError(1, std::string("config file: ") + e.what());
            }
            if (!file.is_object()) throw ConfigError("config file must hold a JSON object");
            for (const auto& [key, value] : file.items()) {
                (void)value;
                if (std::none_of(entries_.begin(), entries_.end(),
                                 [&](const Entry& e) { return e.key == key; }))
                    throw ConfigError("config file key does not match any option: " + key);
            }
        }
        json resolved = json::object();
        for (Entry& e : entries_) {
            if (e.opt->count() == 0 && file.contains(e.key)) {
                try {
                    e.from_json(file.at(e.key));
                } catch (const json::exception& ex) {
                    throw ConfigError("config value for '" + e.key + "': " + ex.what());
                }
                e.from_file = true;
            }
            if (e.opt->count() > 0 || e.from_file || e.echo_default)
                resolved[e.key] = e.to_json();
        }
        return resolved;
    }

    // Conditions and similar optionals echo only when given; everything else
    // echoes its resolved value.
    void echo_only_when_set(const std::string& key) {
        for (Entry& e : entries_)
            if (e.key == key) e.echo_default = false;
    }

private:
    struct Entry {
        std::string key;
        CLI::Option* opt;
        std::function<void(const json&)> from_json;
        std::function<json()> to_json;
        bool from_file = false;
        bool echo_default = true;
    };

    static std::string key_of(const std::string& flag) {
        std::string name = flag.substr(flag.find_first_not_of('-'));
        std::replace(name.begin(), name.end(), '-', '_');
        return name;
    }

    template <typename T>
    void add_entry(const std::string& flag, CLI::Option* opt, T& target) {
        Entry e;
        e.key = key_of(flag);
        e.opt = opt;
        e.from_json = [&target](const json& v) { target = v.get<T>(); };
        e.to_json = [&target]() { return json(target); };
        entries_.push_back(std::move(e));
    }

    CLI::App* cmd_;
    std::string config_path_;
    std::vector<Entry> entries_;
};

void echo_resolved(const std::string& command, const json& resolved) {
    std::cout << json{{"command", command}, {"config", resolved}}.dump() << "\n";
}

void ensure_parent_dir(const std::string& path) {
    const std::filesystem::path parent = std::filesystem::path(path).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

// --- Shared loading helpers -------------------------------------------------------

struct PipelineTables {
    ElementTables tables;
    Vocabulary vocab;
    std::string vocab_hash;
};

PipelineTables load_pipeline_tables(const std::string& elements_path) {
    PipelineTables p;
    p.tables = load_element_tables(elements_path);
    p.vocab = build_vocab(p.tables.oxidation_table());
    p.vocab_hash = hex64(p.vocab.hash());
    return p;
}

// Conditions for training come from stored properties, normalized exactly like
// generation-time targets; the stored reduced formula (when parseable and
// inside the embedding tables) rides along as the composition condition.
TrainExample to_train_example(const CrystalRecord& rec, const Vocabulary& vocab,
                              const OrderingStrategy& ordering, const ModelConfig& mcfg) {
    TrainExample ex;
    ex.tokens = encode(rec.crystal, vocab, ordering);
    for (const std::string& name : mcfg.condition_schema) {
        const std::optional<double> raw = rec.properties.by_name(name);
        if (raw) ex.conditions.scalars[name] = transform_condition(name, *raw);
    }
    if (rec.properties.reduced_formula) {
        try {
            auto formula = parse_formula(*rec.properties.reduced_formula);
            const bool fits = std::all_of(formula.begin(), formula.end(), [&](const auto& zc) {
                return zc.first >= 1 && zc.first <= 103 && zc.second >= 1 &&
                       zc.second <= mcfg.max_stoich;
            });
            if (fits) ex.conditions.formula = std::move(formula);
        } catch (const Error&) {
            // Not representable in the condition tables; condition stays absent.
        }
    }
    return ex;
}

ModelParams<float> load_params_any(const std::string& path, const std::string& vocab_hash) {
    const CheckpointInfo info = peek_checkpoint(path);
    if (info.extra.contains("train_state"))
        return load_train_checkpoint<float>(path, vocab_hash).params;
    return load_checkpoint<float>(path, nullptr, vocab_hash);
}

// --- tokenize ----------------------------------------------------------------------

struct TokenizeArgs {
    std::string corpus;
    std::string elements = "data/elements.csv";
    std::string ordering = "low_first";
    std::uint64_t seed = 0;
    bool coords_first = false;
    std::string out;
    std::string stats;
};

int cmd_tokenize(const TokenizeArgs& a, const json& resolved) {
    echo_resolved("tokenize", resolved);
    const PipelineTables p = load_pipeline_tables(a.elements);
    const Corpus corpus = load_corpus(a.corpus);
    for (const CorpusWarning& w : corpus.warnings)
        std::cerr << "warning: line " << w.line << ": " << w.message << "\n";

    OrderingStrategy ordering = ordering_from_string(a.ordering, a.seed);
    std::string out_text;
    std::map<std::size_t, int> length_histogram;
    std::set<int> used_tokens;
    long long clamped_params = 0;
    int records_with_clamps = 0;
    for (const CrystalRecord& rec : corpus.records) {
        int clamps = 0;
        const TokenSequence tokens = encode(rec.crystal, p.vocab, ordering, {}, a.coords_first,
                                            &clamps);
        clamped_params += clamps;
        if (clamps > 0) ++records_with_clamps;
        length_histogram[tokens.size()] += 1;
        for (int t : tokens) used_tokens.insert(t);
        json line{{"id", rec.id}, {"tokens", tokens}, {"length", tokens.size()},
                  {"clamped_params", clamps}};
        out_text += line.dump();
        out_text += '\n';
    }
    ensure_parent_dir(a.out);
    atomic_write_text(a.out, out_text);

    json hist = json::array();
    for (const auto& [len, count] : length_histogram) hist.push_back({len, count});
    json stats{{"n_records", corpus.records.size()},
               {"n_warnings", corpus.warnings.size()},
               {"clamped_params", clamped_params},
               {"records_with_clamps", records_with_clamps},
               {"length_histogram", hist},
               {"vocab_size", p.vocab.total_size},
               {"vocab_tokens_used", used_tokens.size()},
               {"vocab_coverage", static_cast<double>(used_tokens.size()) /
                                      static_cast<double>(p.vocab.total_size)},
               {"vocab_hash", p.vocab_hash}};
    const std::string stats_path = a.stats.empty() ? a.out + ".stats.json" : a.stats;
    ensure_parent_dir(stats_path);
    atomic_write_text(stats_path, stats.dump(2) + "\n");

    std::cout << "tokenized " << corpus.records.size() << " records -> " << a.out << " ("
              << clamped_params << " clamped lattice params, stats in " << stats_path << ")\n";
    return kExitOk;
}

// --- train -------------------------------------------------------------------------

struct TrainArgs {
    std::string corpus;
    std::string elements = "data/elements.csv";
    std::string out_dir;
    std::string resume;
    std::string ordering = "low_first";
    double val_fraction = 0.1;
    // Model shape (ignored when resuming: the checkpoint fixes the model).
    int layers = 12;
    int heads = 16;
    int d_emb = 512;
    int d_ffn = 1536;
    double dropout = 0.10;
    int max_seq_len = 512;
    // Optimization.
    int batch_size = 32;
    double lr = 4e-4;
    double lr_factor = 0.5;
    int patience = 3;
    int epochs = 50;
    double cond_dropout = 0.5;
    double weight_decay = 0.01;
    double grad_clip = 1.0;
    std::uint64_t seed = 0;
};

int cmd_train(const TrainArgs& a, const json& resolved) {
    TrainConfig tcfg;
    tcfg.batch_size = a.batch_size;
    tcfg.lr_init = a.lr;
    tcfg.lr_factor = a.lr_factor;
    tcfg.plateau_patience = a.patience;
    tcfg.epochs = a.epochs;
    tcfg.cond_dropout_p = a.cond_dropout;
    tcfg.weight_decay = a.weight_decay;
    tcfg.grad_clip_norm = a.grad_clip;
    tcfg.seed = a.seed;
    tcfg.validate();  // reject bad optimization settings before any compute

    ModelConfig mcfg;
    mcfg.n_layers = a.layers;
    mcfg.n_heads = a.heads;
    mcfg.d_emb = a.d_emb;
    mcfg.d_ffn_hidden = a.d_ffn;
    mcfg.dropout_rate = a.dropout;
    mcfg.max_seq_len = a.max_seq_len;
    mcfg.vocab_size = 1;  // placeholder until the vocabulary is built
    mcfg.validate();

    echo_resolved("train", resolved);
    const PipelineTables p = load_pipeline_tables(a.elements);
    mcfg.vocab_size = p.vocab.total_size;

    const Corpus corpus = load_corpus(a.corpus);
    auto [train_recs, val_recs] = split_corpus(corpus.records, 1.0 - a.val_fraction, a.seed);
    OrderingStrategy ordering = ordering_from_string(a.ordering, a.seed);

    TrainState<float> state;
    if (!a.resume.empty()) {
        state = load_train_checkpoint<float>(a.resume, p.vocab_hash);
        state.train_config.epochs = tcfg.epochs;  // allow extending a finished run
    } else {
        state = TrainState<float>::init(mcfg, tcfg);
    }
    const ModelConfig& model_cfg = state.params.config;

    std::vector<TrainExample> train_ex, val_ex;
    train_ex.reserve(train_recs.size());
    val_ex.reserve(val_recs.size());
    for (const CrystalRecord& r : train_recs)
        train_ex.push_back(to_train_example(r, p.vocab, ordering, model_cfg));
    for (const CrystalRecord& r : val_recs)
        val_ex.push_back(to_train_example(r, p.vocab, ordering, model_cfg));

    std::filesystem::create_directories(a.out_dir);
    const std::string metrics_path = a.out_dir + "/metrics.csv";
    std::vector<std::string> metric_rows;
    if (!a.resume.empty() && std::filesystem::exists(metrics_path)) {
        std::ifstream f(metrics_path);
        std::string line;
        std::getline(f, line);  // header
        while (std::getline(f, line))
            if (!line.empty()) metric_rows.push_back(line);
    }

    std::cout << metrics_csv_header() << "\n";
    run_training<float>(state, train_ex, val_ex, [&](const EpochMetrics& em) {
        const std::string row = metrics_csv_row(em);
        std::cout << row << "\n" << std::flush;
        metric_rows.push_back(row);
        std::string csv = metrics_csv_header() + "\n";
        for (const std::string& r : metric_rows) csv += r + "\n";
        atomic_write_text(metrics_path, csv);

        char name[32];
        std::snprintf(name, sizeof(name), "epoch_%04d.ckpt", em.epoch);
        save_train_checkpoint(a.out_dir + "/" + name, state, p.vocab_hash);
        save_train_checkpoint(a.out_dir + "/latest.ckpt", state, p.vocab_hash);
        return true;
    });

    std::cout << "trained " << state.epoch << " epochs (" << state.adam_t << " steps); "
              << "checkpoints and metrics in " << a.out_dir << "\n";
    return kExitOk;
}

// --- generate ----------------------------------------------------------------------

struct GenerateArgs {
    std::string checkpoint;
    std::string elements = "data/elements.csv";
    std::string out;
    std::string stats;
    int n = 16;
    double temperature = 1.0;
    int max_new = 4 * 20 + 10;
    std::uint64_t seed = 0;
    int workers = 1;
    bool unconstrained = false;
    // Raw-scale property targets; absent flags mean unconditional slots.
    double band_gap = std::numeric_limits<double>::quiet_NaN();
    double magnetic_density = std::numeric_limits<double>::quiet_NaN();
    double density = std::numeric_limits<double>::quiet_NaN();
    double space_group = std::numeric_limits<double>::quiet_NaN();
    double hhi = std::numeric_limits<double>::quiet_NaN();
    std::string formula;
};

int cmd_generate(const GenerateArgs& a, const ConfigBinder& binder, const json& resolved) {
    echo_resolved("generate", resolved);
    const PipelineTables p = load_pipeline_tables(a.elements);
    const ModelParams<float> params = load_params_any(a.checkpoint, p.vocab_hash);
    const GrammarMasker masker(p.vocab);

    ConditionSet cs;
    json targets = json::object();
    const std::map<std::string, double> raw_values{{"band_gap", a.band_gap},
                                                   {"magnetic_density", a.magnetic_density},
                                                   {"density", a.density},
                                                   {"space_group", a.space_group},
                                                   {"hhi", a.hhi}};
    for (const auto& [name, raw] : raw_values) {
        if (!binder.provided(name)) continue;
        cs.scalars[name] = transform_condition(name, raw);
        targets[name] = raw;
    }
    if (binder.provided("formula")) {
        cs.formula = parse_formula(a.formula);
        targets["formula"] = a.formula;
    }

    SampleConfig cfg;
    cfg.temperature = a.temperature;
    cfg.max_new_tokens = a.max_new;
    cfg.constrain_grammar = !a.unconstrained;
    cfg.seed = a.seed;
    cfg.n_samples = a.n;
    cfg.validate();

    const BatchResult batch = generate_batch(params, masker, cs, cfg, a.workers);

    const auto masses = p.tables.masses();
    const auto hhi_table = p.tables.hhi_table();
    std::vector<CrystalRecord> records;
    for (std::size_t i = 0; i < batch.results.size(); ++i) {
        const GenerationResult& res = batch.results[i];
        if (!res.grammar_valid()) continue;
        CrystalRecord rec;
        char idbuf[24];
        std::snprintf(idbuf, sizeof(idbuf), "gen-%06zu", i);
        rec.id = idbuf;
        rec.crystal = res.crystal();
        rec.properties.density = density(rec.crystal, masses);
        rec.properties.hhi = hhi_of_composition(rec.crystal.sites, hhi_table);
        rec.properties.reduced_formula = formula_to_string(reduced_formula(rec.crystal));
        rec.extra["generation"] = {{"seed", a.seed},
                                   {"sample_index", i},
                                   {"temperature", a.temperature},
                                   {"constrained", !a.unconstrained},
                                   {"charge_neutral", net_charge(rec.crystal) == 0},
                                   {"hit_token_cap", res.hit_token_cap},
                                   {"targets", targets}};
        records.push_back(std::move(rec));
    }
    ensure_parent_dir(a.out);
    if (records.empty())
        atomic_write_text(a.out, "");  // nothing decodable (possible unconstrained)
    else
        save_corpus(records, a.out);

    const GenerationStats& st = batch.stats;
    json stats{{"n_requested", cfg.n_samples},
               {"n_total", st.n_total},
               {"n_valid", st.n_valid},
               {"n_charge_neutral", st.n_charge_neutral},
               {"total_tokens", st.total_tokens},
               {"wall_time_s", st.wall_time_s},
               {"tokens_per_s", st.tokens_per_s},
               {"seconds_per_sample", st.seconds_per_sample},
               {"constrained", !a.unconstrained},
               {"temperature", a.temperature},
               {"seed", a.seed},
               {"vocab_hash", p.vocab_hash},
               {"targets", targets}};
    const std::string stats_path = a.stats.empty() ? a.out + ".stats.json" : a.stats;
    ensure_parent_dir(stats_path);
    atomic_write_text(stats_path, stats.dump(2) + "\n");

    std::cout << "generated " << st.n_valid << "/" << st.n_total << " grammar-valid samples ("
              << st.n_charge_neutral << " charge-neutral) -> " << a.out << "\n";
    return kExitOk;
}

// --- evaluate ----------------------------------------------------------------------

struct EvaluateArgs {
    std::string generated;
    std::string elements = "data/elements.csv";
    std::string fingerprints;
    std::string training_corpus;
    std::string stats;
    std::string out;
    bool hhi_max = false;
    int bins = 20;
};

int cmd_evaluate(const EvaluateArgs& a, const json& resolved) {
    echo_resolved("evaluate", resolved);
    const ElementTables tables = load_element_tables(a.elements);
    const Corpus generated = load_corpus(a.generated);

    std::set<std::string> train_fps;
    if (!a.fingerprints.empty()) {
        std::ifstream f(a.fingerprints);
        if (!f) throw IoError("cannot read fingerprint file: " + a.fingerprints);
        std::string line;
        while (std::getline(f, line)) {
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (!line.empty() && line[0] != '#') train_fps.insert(line);
        }
    }
    if (!a.training_corpus.empty()) {
        const Corpus train = load_corpus(a.training_corpus);
        for (const CrystalRecord& rec : train.records)
            train_fps.insert(canonical_fingerprint(rec.crystal));
    }

    EvalOptions opts;
    opts.hhi_use_max = a.hhi_max;
    opts.histogram_bins = a.bins;
    if (!a.stats.empty()) {
        std::ifstream f(a.stats);
        if (!f) throw IoError("cannot read generation stats: " + a.stats);
        json st;
        try {
            st = json::parse(f);
        } catch (const json::exception& e) {
            throw ParseError(1, std::string("generation stats: ") + e.what());
        }
        if (st.contains("n_total")) opts.n_total_attempted = st.at("n_total").get<int>();
        if (st.contains("wall_time_s")) opts.wall_time_s = st.at("wall_time_s").get<double>();
    }

    const EvalReport report = build_eval_report(generated.records, train_fps, tables, opts);
    const json report_json = eval_report_to_json(report);
    ensure_parent_dir(a.out);
    atomic_write_text(a.out + ".json", report_json.dump(2) + "\n");
    atomic_write_text(a.out + ".csv", eval_report_to_csv(report));

    std::cout << report_json.dump() << "\n";
    std::cout << "evaluated " << report.n_grammar_valid << " records -> " << a.out << ".json, "
              << a.out << ".csv\n";
    return kExitOk;
}

// --- inspect -----------------------------------------------------------------------

struct InspectArgs {
    std::string corpus;
    std::string tokens_file;
    std::vector<int> tokens;
    std::size_t index = 0;
    std::string elements = "data/elements.csv";
    std::string ordering = "low_first";
};

void print_crystal(const Crystal& c, std::ostream& os) {
    const LatticeParams& l = c.lattice;
    os << "  formula: " << formula_to_string(reduced_formula(c)) << "\n";
    os << "  lattice: a=" << l.a << " b=" << l.b << " c=" << l.c << " alpha=" << l.alpha
       << " beta=" << l.beta << " gamma=" << l.gamma << "\n";
    os << "  volume:  " << cell_volume(l) << " A^3, net charge " << net_charge(c) << "\n";
    os << "  sites (" << c.sites.size() << "):\n";
    for (const Site& s : c.sites) {
        os << "    " << element_symbol(s.element) << " (" << (s.oxidation_state >= 0 ? "+" : "")
           << s.oxidation_state << ")  [" << s.frac[0] << ", " << s.frac[1] << ", " << s.frac[2]
           << "]\n";
    }
}

void print_tokens(const TokenSequence& tokens, const Vocabulary& vocab, std::ostream& os) {
    os << "  tokens (" << tokens.size() << "):\n";
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        std::string name;
        try {
            name = vocab.token_name(tokens[i]);
        } catch (const Error&) {
            name = "<invalid>";
        }
        os << "    " << i << "\t" << tokens[i] << "\t" << name << "\n";
    }
}

int cmd_inspect(const InspectArgs& a, const json& resolved) {
    echo_resolved("inspect", resolved);
    const int sources = (!a.corpus.empty() ? 1 : 0) + (!a.tokens_file.empty() ? 1 : 0) +
                        (!a.tokens.empty() ? 1 : 0);
    if (sources != 1)
        throw ConfigError("pass exactly one of --corpus, --tokens-file, or --tokens");
    const PipelineTables p = load_pipeline_tables(a.elements);

    TokenSequence tokens;
    if (!a.corpus.empty()) {
        const Corpus corpus = load_corpus(a.corpus);
        if (a.index >= corpus.records.size())
            throw OutOfRangeError("record index " + std::to_string(a.index) +
                                  " out of range for " + std::to_string(corpus.records.size()) +
                                  " records");
        const CrystalRecord& rec = corpus.records[a.index];
        std::cout << "record " << a.index << " (id " << rec.id << "):\n";
        print_crystal(rec.crystal, std::cout);
        auto put = [&](const char* name, const std::optional<double>& v) {
            if (v) std::cout << "  " << name << ": " << *v << "\n";
        };
        put("band_gap", rec.properties.band_gap);
        put("magnetic_density", rec.properties.magnetic_density);
        put("density", rec.properties.density);
        put("space_group", rec.properties.space_group);
        put("hhi", rec.properties.hhi);
        if (rec.properties.reduced_formula)
            std::cout << "  reduced_formula: " << *rec.properties.reduced_formula << "\n";
        OrderingStrategy ordering = ordering_from_string(a.ordering, 0);
        tokens = encode(rec.crystal, p.vocab, ordering);
        std::cout << "encoded (" << a.ordering << " ordering, 4N+10 = "
                  << 4 * rec.crystal.sites.size() + 10 << "):\n";
        print_tokens(tokens, p.vocab, std::cout);
        return kExitOk;
    }

    if (!a.tokens_file.empty()) {
        std::ifstream f(a.tokens_file);
        if (!f) throw IoError("cannot read token file: " + a.tokens_file);
        std::string line;
        std::size_t line_no = 0;
        while (std::getline(f, line)) {
            if (line.empty()) continue;
            if (line_no++ == a.index) {
                json j;
                try {
                    j = json::parse(line);
                } catch (const json::exception& e) {
                    throw ParseError(line_no, std::string("token line: ") + e.what());
                }
                tokens = j.at("tokens").get<TokenSequence>();
                if (j.contains("id")) std::cout << "sequence " << a.index << " (id "
                                                << j["id"].get<std::string>() << "):\n";
                break;
            }
        }
        if (tokens.empty())
            throw OutOfRangeError("sequence index " + std::to_string(a.index) + " not found");
    } else {
        tokens.assign(a.tokens.begin(), a.tokens.end());
    }

    print_tokens(tokens, p.vocab, std::cout);
    const DecodeResult decoded = decode(tokens, p.vocab);
    if (const Crystal* c = std::get_if<Crystal>(&decoded)) {
        std::cout << "decodes to:\n";
        print_crystal(*c, std::cout);
    } else {
        const GrammarError& ge = std::get<GrammarError>(decoded);
        std::cout << "does not decode: " << ge.message() << "\n";
    }
    return kExitOk;
}

}  // namespace

// --- entry point ---------------------------------------------------------------------

int main(int argc, char** argv) {
    CLI::App app{"crystal sequence pipeline: tokenize, train, generate, evaluate, inspect"};
    app.require_subcommand(1);

    TokenizeArgs tok;
    CLI::App* tok_cmd = app.add_subcommand("tokenize", "encode a corpus into token sequences");
    ConfigBinder tok_bind(tok_cmd);
    tok_bind.bind("--corpus", tok.corpus, "input corpus (JSONL)")->required();
    tok_bind.bind("--elements", tok.elements, "element table CSV");
    tok_bind.bind("--ordering", tok.ordering, "site ordering: low_first|high_first|xyz|random");
    tok_bind.bind("--seed", tok.seed, "seed for random ordering");
    tok_bind.bind_flag("--coords-first", tok.coords_first, "emit coordinates before the element");
    tok_bind.bind("--out", tok.out, "output token JSONL")->required();
    tok_bind.bind("--stats", tok.stats, "stats JSON path (default: <out>.stats.json)");

    TrainArgs tr;
    CLI::App* tr_cmd = app.add_subcommand("train", "train a model on a corpus");
    ConfigBinder tr_bind(tr_cmd);
    tr_bind.bind("--corpus", tr.corpus, "training corpus (JSONL)")->required();
    tr_bind.bind("--elements", tr.elements, "element table CSV");
    tr_bind.bind("--out-dir", tr.out_dir, "directory for checkpoints and metrics")->required();
    tr_bind.bind("--resume", tr.resume, "optimizer checkpoint to resume from");
    tr_bind.bind("--ordering", tr.ordering, "site ordering for encoding");
    tr_bind.bind("--val-fraction", tr.val_fraction, "held-out validation fraction");
    tr_bind.bind("--layers", tr.layers, "transformer blocks");
    tr_bind.bind("--heads", tr.heads, "attention heads");
    tr_bind.bind("--d-emb", tr.d_emb, "embedding width");
    tr_bind.bind("--d-ffn", tr.d_ffn, "feed-forward hidden width");
    tr_bind.bind("--dropout", tr.dropout, "dropout rate");
    tr_bind.bind("--max-seq-len", tr.max_seq_len, "maximum rows incl. condition prefix");
    tr_bind.bind("--batch-size", tr.batch_size, "sequences per optimizer step");
    tr_bind.bind("--lr", tr.lr, "initial learning rate");
    tr_bind.bind("--lr-factor", tr.lr_factor, "plateau decay factor");
    tr_bind.bind("--patience", tr.patience, "epochs without improvement before decay");
    tr_bind.bind("--epochs", tr.epochs, "total epochs");
    tr_bind.bind("--cond-dropout", tr.cond_dropout, "per-condition dropout probability");
    tr_bind.bind("--weight-decay", tr.weight_decay, "AdamW decoupled weight decay");
    tr_bind.bind("--grad-clip", tr.grad_clip, "global gradient-norm clip (0 disables)");
    tr_bind.bind("--seed", tr.seed, "training seed");

    GenerateArgs gen;
    CLI::App* gen_cmd = app.add_subcommand("generate", "sample structures from a checkpoint");
    ConfigBinder gen_bind(gen_cmd);
    gen_bind.bind("--checkpoint", gen.checkpoint, "model or optimizer checkpoint")->required();
    gen_bind.bind("--elements", gen.elements, "element table CSV");
    gen_bind.bind("--out", gen.out, "output corpus JSONL")->required();
    gen_bind.bind("--stats", gen.stats, "stats JSON path (default: <out>.stats.json)");
    gen_bind.bind("--n", gen.n, "number of samples");
    gen_bind.bind("--temperature", gen.temperature, "softmax temperature");
    gen_bind.bind("--max-new", gen.max_new, "token budget per sample");
    gen_bind.bind("--seed", gen.seed, "sampling seed");
    gen_bind.bind("--workers", gen.workers, "worker threads (results independent of count)");
    gen_bind.bind_flag("--unconstrained", gen.unconstrained, "disable the grammar mask");
    gen_bind.bind("--band-gap", gen.band_gap, "target band gap (eV)");
    gen_bind.bind("--magnetic-density", gen.magnetic_density, "target magnetic density (A^-3)");
    gen_bind.bind("--density", gen.density, "target density (g/cm^3)");
    gen_bind.bind("--space-group", gen.space_group, "target space group number");
    gen_bind.bind("--hhi", gen.hhi, "target supply-risk HHI (raw scale)");
    gen_bind.bind("--formula", gen.formula, "target reduced formula, e.g. Fe2O3");
    for (const char* key : {"band_gap", "magnetic_density", "density", "space_group", "hhi",
                            "formula"})
        gen_bind.echo_only_when_set(key);

    EvaluateArgs ev;
    CLI::App* ev_cmd = app.add_subcommand("evaluate", "score a generated corpus");
    ConfigBinder ev_bind(ev_cmd);
    ev_bind.bind("--generated", ev.generated, "generated corpus (JSONL)")->required();
    ev_bind.bind("--elements", ev.elements, "element table CSV");
    ev_bind.bind("--fingerprints", ev.fingerprints, "training fingerprints, one per line");
    ev_bind.bind("--training-corpus", ev.training_corpus, "training corpus for novelty");
    ev_bind.bind("--stats", ev.stats, "generation stats JSON (recovers attempted count)");
    ev_bind.bind("--out", ev.out, "output base path (writes <out>.json and <out>.csv)")
        ->required();
    ev_bind.bind_flag("--hhi-max", ev.hhi_max, "score HHI by scarcest element instead of mean");
    ev_bind.bind("--bins", ev.bins, "histogram bins");

    InspectArgs ins;
    CLI::App* ins_cmd = app.add_subcommand("inspect", "pretty-print a record or token sequence");
    ConfigBinder ins_bind(ins_cmd);
    ins_bind.bind("--corpus", ins.corpus, "corpus JSONL to read a record from");
    ins_bind.bind("--tokens-file", ins.tokens_file, "token JSONL produced by tokenize");
    ins_bind.bind("--tokens", ins.tokens, "explicit token ids");
    ins_bind.bind("--index", ins.index, "record/sequence index");
    ins_bind.bind("--elements", ins.elements, "element table CSV");
    ins_bind.bind("--ordering", ins.ordering, "site ordering when encoding a record");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }

    return run_guarded([&]() -> int {
        if (tok_cmd->parsed()) return cmd_tokenize(tok, tok_bind.resolve());
        if (tr_cmd->parsed()) return cmd_train(tr, tr_bind.resolve());
        if (gen_cmd->parsed()) return cmd_generate(gen, gen_bind, gen_bind.resolve());
        if (ev_cmd->parsed()) return cmd_evaluate(ev, ev_bind.resolve());
        if (ins_cmd->parsed()) return cmd_inspect(ins, ins_bind.resolve());
        return kExitUsage;
    });
}
