#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "matseq/crystal.hpp"
#include "matseq/data_io.hpp"
#include "matseq/elements.hpp"
#include "matseq/errors.hpp"

namespace matseq {

// --- Core metrics -----------------------------------------------------------------

inline double uniqueness(const std::vector<Crystal>& crystals) {
    if (crystals.empty()) throw TooFewSamplesError("uniqueness needs at least one crystal");
    std::set<std::string> fps;
    for (const auto& c : crystals) fps.insert(canonical_fingerprint(c));
    return static_cast<double>(fps.size()) / static_cast<double>(crystals.size());
}

inline double novelty(const std::vector<Crystal>& crystals,
                      const std::set<std::string>& training_fingerprints) {
    if (crystals.empty()) throw TooFewSamplesError("novelty needs at least one crystal");
    if (training_fingerprints.empty()) return 1.0;
    std::size_t novel = 0;
    for (const auto& c : crystals)
        if (!training_fingerprints.count(canonical_fingerprint(c))) ++novel;
    return static_cast<double>(novel) / static_cast<double>(crystals.size());
}

struct AdherenceSummary {
    double target = 0;
    int n = 0;
    double mean = 0;
    double median = 0;
    double mae = 0;
    double q25 = 0;
    double q75 = 0;
};

namespace detail {

inline double quantile_sorted(const std::vector<double>& sorted, double q) {
    if (sorted.empty()) return 0;
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(pos);
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] * (1.0 - frac) + sorted[hi] * frac;
}

inline AdherenceSummary summarize_against_target(double target, std::vector<double> values) {
    AdherenceSummary s;
    s.target = target;
    s.n = static_cast<int>(values.size());
    if (values.empty()) return s;
    double sum = 0, abs_err = 0;
    for (double v : values) {
        sum += v;
        abs_err += std::abs(v - target);
    }
    s.mean = sum / static_cast<double>(values.size());
    s.mae = abs_err / static_cast<double>(values.size());
    std::sort(values.begin(), values.end());
    s.median = quantile_sorted(values, 0.5);
    s.q25 = quantile_sorted(values, 0.25);
    s.q75 = quantile_sorted(values, 0.75);
    return s;
}

}  // namespace detail

// Groups crystals by their density target and summarizes computed densities.
// `targets` runs parallel to `crystals`.
inline std::vector<AdherenceSummary> density_adherence(const std::vector<Crystal>& crystals,
                                                       const std::vector<double>& targets,
                                                       const std::map<int, double>& masses_u) {
    if (crystals.size() != targets.size())
        throw ConfigError("crystals and targets must align one to one");
    std::map<double, std::vector<double>> grouped;
    for (std::size_t i = 0; i < crystals.size(); ++i)
        grouped[targets[i]].push_back(density(crystals[i], masses_u));
    std::vector<AdherenceSummary> out;
    for (auto& [target, values] : grouped)
        out.push_back(detail::summarize_against_target(target, std::move(values)));
    return out;
}

// Exact reduced-formula match rate; the target string normalizes through the
// same canonical reduction as the crystals (order- and multiple-insensitive).
inline double formula_match_rate(const std::vector<Crystal>& crystals,
                                 const std::string& target_formula) {
    if (crystals.empty()) throw TooFewSamplesError("formula match needs at least one crystal");
    auto target = parse_formula(target_formula);
    int g = 0;
    for (const auto& [z, n] : target) g = std::gcd(g, n);
    for (auto& [z, n] : target) n /= std::max(1, g);
    std::size_t hits = 0;
    for (const auto& c : crystals)
        if (reduced_formula(c) == target) ++hits;
    return static_cast<double>(hits) / static_cast<double>(crystals.size());
}

// Composition HHI: atom-fraction-weighted mean of per-element scores by
// default; `use_max` switches to the most-scarce-element variant.
inline double hhi_of_crystal(const Crystal& c, const std::map<int, double>& hhi_table,
                             bool use_max = false) {
    if (!use_max) return hhi_of_composition(c.sites, hhi_table);
    double worst = 0;
    for (const Site& s : c.sites) {
        auto it = hhi_table.find(s.element);
        if (it == hhi_table.end())
            throw UnknownElementError("no HHI score for element " + std::to_string(s.element));
        worst = std::max(worst, it->second);
    }
    return worst;
}

// --- Bimodality ------------------------------------------------------------------

struct BimodalitySummary {
    int n = 0;
    double coefficient = 0;  // (skewness^2 + 1) / kurtosis, population moments
    bool bimodal = false;    // coefficient above the uniform reference 5/9
    bool degenerate = false; // constant input: reported as non-bimodal
    std::vector<double> bin_edges;  // histogram_bins + 1 edges
    std::vector<int> counts;
};

inline constexpr double kBimodalityThreshold = 5.0 / 9.0;

inline BimodalitySummary bimodality_summary(const std::vector<double>& values,
                                            int histogram_bins = 20) {
    if (values.size() < 10)
        throw TooFewSamplesError("bimodality summary needs at least 10 samples");
    if (histogram_bins < 1) throw ConfigError("histogram needs at least one bin");
    BimodalitySummary s;
    s.n = static_cast<int>(values.size());

    const double n = static_cast<double>(values.size());
    const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
    double m2 = 0, m3 = 0, m4 = 0;
    for (double v : values) {
        const double d = v - mean;
        m2 += d * d;
        m3 += d * d * d;
        m4 += d * d * d * d;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    if (m2 <= 0) {
        s.degenerate = true;  // constant values: no spread, not bimodal
    } else {
        const double skew = m3 / std::pow(m2, 1.5);
        const double kurt = m4 / (m2 * m2);
        s.coefficient = (skew * skew + 1.0) / kurt;
        s.bimodal = s.coefficient > kBimodalityThreshold;
    }

    double lo = *std::min_element(values.begin(), values.end());
    double hi = *std::max_element(values.begin(), values.end());
    if (!(hi > lo)) {
        lo -= 0.5;
        hi += 0.5;
    }
    const double width = (hi - lo) / histogram_bins;
    for (int b = 0; b <= histogram_bins; ++b) s.bin_edges.push_back(lo + width * b);
    s.counts.assign(static_cast<std::size_t>(histogram_bins), 0);
    for (double v : values) {
        int b = static_cast<int>((v - lo) / width);
        b = std::clamp(b, 0, histogram_bins - 1);
        s.counts[static_cast<std::size_t>(b)] += 1;
    }
    return s;
}

// --- Report assembly ----------------------------------------------------------------

struct EvalOptions {
    bool hhi_use_max = false;
    int histogram_bins = 20;
    // Generation-side statistics (the generated file holds only decodable
    // records); when absent, n_total falls back to the record count.
    std::optional<int> n_total_attempted;
    std::optional<double> wall_time_s;
};

struct EvalReport {
    int n_total = 0;
    int n_grammar_valid = 0;
    int n_charge_neutral = 0;
    std::optional<double> frac_unique;
    std::optional<double> frac_novel;
    std::map<std::string, std::vector<AdherenceSummary>> adherence;  // density, hhi (scaled)
    std::optional<double> formula_match_rate;
    std::optional<double> mean_hhi;
    std::optional<BimodalitySummary> hhi_bimodality;
    // Placeholders for pipelines this artifact cannot run (relaxation, DFT,
    // symmetry detection); merged in externally when available.
    std::optional<double> stability_rate;
    std::optional<double> sun_rate;
    std::optional<double> space_group_match_rate;
    std::optional<double> wall_time_s;
};

// Pulls the generation-time target annotations, if any, out of a record.
struct RecordTargets {
    std::map<std::string, double> scalars;
    std::optional<std::string> formula;
};

inline RecordTargets record_targets(const CrystalRecord& rec) {
    RecordTargets t;
    if (!rec.extra.is_object() || !rec.extra.contains("generation")) return t;
    const auto& gen = rec.extra.at("generation");
    if (!gen.is_object() || !gen.contains("targets")) return t;
    for (const auto& [key, value] : gen.at("targets").items()) {
        if (key == "formula" && value.is_string())
            t.formula = value.get<std::string>();
        else if (value.is_number())
            t.scalars[key] = value.get<double>();
    }
    return t;
}

inline EvalReport build_eval_report(const std::vector<CrystalRecord>& generated,
                                    const std::set<std::string>& training_fingerprints,
                                    const ElementTables& tables, const EvalOptions& opts = {}) {
    EvalReport rep;
    rep.n_grammar_valid = static_cast<int>(generated.size());
    rep.n_total = opts.n_total_attempted.value_or(rep.n_grammar_valid);
    if (rep.n_total < rep.n_grammar_valid)
        throw ConfigError("n_total_attempted is smaller than the record count");
    rep.wall_time_s = opts.wall_time_s;
    if (generated.empty()) return rep;  // every metric stays absent, never zero

    const auto masses = tables.masses();
    const auto hhi_table = tables.hhi_table();

    std::vector<Crystal> crystals;
    crystals.reserve(generated.size());
    for (const auto& rec : generated) crystals.push_back(rec.crystal);
    for (const auto& c : crystals)
        if (net_charge(c) == 0) rep.n_charge_neutral += 1;

    rep.frac_unique = uniqueness(crystals);
    rep.frac_novel = novelty(crystals, training_fingerprints);

    // Density adherence over records that carry a density target.
    std::vector<Crystal> with_density;
    std::vector<double> density_targets;
    std::map<double, std::vector<double>> hhi_by_target;
    std::map<std::string, std::vector<const Crystal*>> formula_groups;
    for (std::size_t i = 0; i < generated.size(); ++i) {
        const RecordTargets t = record_targets(generated[i]);
        auto dt = t.scalars.find("density");
        if (dt != t.scalars.end()) {
            with_density.push_back(crystals[i]);
            density_targets.push_back(dt->second);
        }
        auto ht = t.scalars.find("hhi");
        if (ht != t.scalars.end())
            hhi_by_target[ht->second].push_back(
                hhi_of_crystal(crystals[i], hhi_table, opts.hhi_use_max));
        if (t.formula) formula_groups[*t.formula].push_back(&crystals[i]);
    }
    if (!with_density.empty())
        rep.adherence["density"] = density_adherence(with_density, density_targets, masses);
    if (!hhi_by_target.empty()) {
        // Same /1000 scaling as the condition transform, applied to both sides.
        std::vector<AdherenceSummary> rows;
        for (auto& [target, values] : hhi_by_target) {
            for (double& v : values) v = transform_condition("hhi", v);
            rows.push_back(detail::summarize_against_target(transform_condition("hhi", target),
                                                            std::move(values)));
        }
        rep.adherence["hhi"] = rows;
    }
    if (!formula_groups.empty()) {
        double hits = 0, total = 0;
        for (const auto& [target, group] : formula_groups) {
            std::vector<Crystal> cs;
            for (const Crystal* c : group) cs.push_back(*c);
            hits += formula_match_rate(cs, target) * static_cast<double>(cs.size());
            total += static_cast<double>(cs.size());
        }
        rep.formula_match_rate = hits / total;
    }

    std::vector<double> hhi_values;
    for (const auto& c : crystals)
        hhi_values.push_back(hhi_of_crystal(c, hhi_table, opts.hhi_use_max));
    rep.mean_hhi = std::accumulate(hhi_values.begin(), hhi_values.end(), 0.0) /
                   static_cast<double>(hhi_values.size());
    if (hhi_values.size() >= 10)
        rep.hhi_bimodality = bimodality_summary(hhi_values, opts.histogram_bins);
    return rep;
}

// --- Serialization -----------------------------------------------------------------

inline nlohmann::json eval_report_to_json(const EvalReport& r) {
    nlohmann::json j;
    j["n_total"] = r.n_total;
    j["n_grammar_valid"] = r.n_grammar_valid;
    j["n_charge_neutral"] = r.n_charge_neutral;
    auto put_opt = [&](const char* key, const std::optional<double>& v) {
        j[key] = v ? nlohmann::json(*v) : nlohmann::json(nullptr);
    };
    put_opt("frac_unique", r.frac_unique);
    put_opt("frac_novel", r.frac_novel);
    put_opt("formula_match_rate", r.formula_match_rate);
    put_opt("mean_hhi", r.mean_hhi);
    put_opt("stability_rate", r.stability_rate);
    put_opt("sun_rate", r.sun_rate);
    put_opt("space_group_match_rate", r.space_group_match_rate);
    put_opt("wall_time_s", r.wall_time_s);
    j["adherence"] = nlohmann::json::object();
    for (const auto& [name, rows] : r.adherence) {
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& s : rows)
            arr.push_back({{"target", s.target},
                           {"n", s.n},
                           {"mean", s.mean},
                           {"median", s.median},
                           {"mae", s.mae},
                           {"q25", s.q25},
                           {"q75", s.q75}});
        j["adherence"][name] = arr;
    }
    if (r.hhi_bimodality) {
        const auto& b = *r.hhi_bimodality;
        j["hhi_bimodality"] = {{"n", b.n},
                               {"coefficient", b.coefficient},
                               {"bimodal", b.bimodal},
                               {"degenerate", b.degenerate},
                               {"bin_edges", b.bin_edges},
                               {"counts", b.counts}};
    } else {
        j["hhi_bimodality"] = nullptr;
    }
    return j;
}

// Flat CSV: metric,value with "absent" for missing metrics; histogram rows are
// (bin_edge,count) pairs keyed by bin index.
inline std::string eval_report_to_csv(const EvalReport& r) {
    std::ostringstream os;
    os.precision(10);
    os << "metric,value\n";
    auto row = [&](const std::string& name, double v) { os << name << ',' << v << '\n'; };
    auto opt_row = [&](const std::string& name, const std::optional<double>& v) {
        if (v)
            row(name, *v);
        else
            os << name << ",absent\n";
    };
    row("n_total", r.n_total);
    row("n_grammar_valid", r.n_grammar_valid);
    row("n_charge_neutral", r.n_charge_neutral);
    opt_row("frac_unique", r.frac_unique);
    opt_row("frac_novel", r.frac_novel);
    opt_row("formula_match_rate", r.formula_match_rate);
    opt_row("mean_hhi", r.mean_hhi);
    opt_row("stability_rate", r.stability_rate);
    opt_row("sun_rate", r.sun_rate);
    opt_row("space_group_match_rate", r.space_group_match_rate);
    opt_row("wall_time_s", r.wall_time_s);
    for (const auto& [name, rows] : r.adherence) {
        for (const auto& s : rows) {
            std::ostringstream key;
            key.precision(10);
            key << name << "[target=" << s.target << "]";
            row(key.str() + ".n", s.n);
            row(key.str() + ".mean", s.mean);
            row(key.str() + ".median", s.median);
            row(key.str() + ".mae", s.mae);
            row(key.str() + ".q25", s.q25);
            row(key.str() + ".q75", s.q75);
        }
    }
    if (r.hhi_bimodality) {
        const auto& b = *r.hhi_bimodality;
        row("hhi_bimodality.coefficient", b.coefficient);
        row("hhi_bimodality.bimodal", b.bimodal ? 1 : 0);
        for (std::size_t i = 0; i < b.counts.size(); ++i) {
            row("hhi_hist[" + std::to_string(i) + "].bin_edge", b.bin_edges[i]);
            row("hhi_hist[" + std::to_string(i) + "].count", b.counts[i]);
        }
        row("hhi_hist[" + std::to_string(b.counts.size()) + "].bin_edge",
            b.bin_edges.back());
    } else {
        os << "hhi_bimodality.coefficient,absent\n";
    }
    return os.str();
}

}  // namespace matseq
