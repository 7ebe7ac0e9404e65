#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "matseq/crystal.hpp"
#include "matseq/elements.hpp"
#include "matseq/errors.hpp"
#include "matseq/rng.hpp"

namespace matseq {

// The five scalar conditioning slots, in prefix order.
inline constexpr std::array<const char*, 5> kConditionNames = {
    "band_gap", "magnetic_density", "density", "space_group", "hhi"};

inline int condition_index(const std::string& name) {
    for (int i = 0; i < static_cast<int>(kConditionNames.size()); ++i)
        if (name == kConditionNames[static_cast<std::size_t>(i)]) return i;
    throw UnknownConditionError("unknown condition: " + name);
}

// Raw property value -> the normalized value the model conditions on.
inline double transform_condition(const std::string& name, double raw) {
    if (!std::isfinite(raw)) throw OutOfRangeError("condition value is not finite");
    if (name == "band_gap" || name == "magnetic_density") {
        if (raw < 0.0)
            throw NegativeValueError(name + " must be non-negative, got " + std::to_string(raw));
        return std::log(raw + 1e-3);
    }
    if (name == "hhi") return raw / 1000.0;
    if (name == "density" || name == "space_group") return raw;
    throw UnknownConditionError("unknown condition: " + name);
}

struct RecordProperties {
    std::optional<double> band_gap;          // eV
    std::optional<double> magnetic_density;  // Å^-3
    std::optional<double> density;           // g/cm³
    std::optional<double> space_group;       // 1..230
    std::optional<double> hhi;               // raw score
    std::optional<std::string> reduced_formula;

    std::optional<double> by_name(const std::string& name) const {
        switch (condition_index(name)) {
            case 0: return band_gap;
            case 1: return magnetic_density;
            case 2: return density;
            case 3: return space_group;
            case 4: return hhi;
        }
        return std::nullopt;
    }
};

struct CrystalRecord {
    std::string id;
    Crystal crystal;
    RecordProperties properties;
    nlohmann::json extra = nlohmann::json::object();  // unknown fields, kept on round-trip
};

struct CorpusWarning {
    std::size_t line;
    std::string message;
};

struct Corpus {
    std::vector<CrystalRecord> records;
    std::vector<CorpusWarning> warnings;
};

namespace detail {

inline nlohmann::json record_to_json(const CrystalRecord& rec) {
    nlohmann::json j = rec.extra;
    j["id"] = rec.id;
    const LatticeParams& p = rec.crystal.lattice;
    j["lattice"] = {p.a, p.b, p.c, p.alpha, p.beta, p.gamma};
    nlohmann::json sites = nlohmann::json::array();
    for (const Site& s : rec.crystal.sites) {
        sites.push_back({{"element", element_symbol(s.element)},
                         {"oxidation_state", s.oxidation_state},
                         {"frac", {s.frac.x(), s.frac.y(), s.frac.z()}}});
    }
    j["sites"] = std::move(sites);
    nlohmann::json props =
        rec.extra.contains("properties") && rec.extra["properties"].is_object()
            ? rec.extra["properties"]
            : nlohmann::json::object();
    auto put = [&](const char* key, const std::optional<double>& v) {
        if (v) props[key] = *v;
    };
    put("band_gap", rec.properties.band_gap);
    put("magnetic_density", rec.properties.magnetic_density);
    put("density", rec.properties.density);
    put("space_group", rec.properties.space_group);
    put("hhi", rec.properties.hhi);
    if (rec.properties.reduced_formula) props["reduced_formula"] = *rec.properties.reduced_formula;
    if (!props.empty()) j["properties"] = std::move(props);
    return j;
}

inline CrystalRecord record_from_json(const nlohmann::json& j, std::size_t line,
                                      std::vector<CorpusWarning>* warnings) {
    if (!j.is_object()) throw ParseError(line, "record is not a JSON object");
    CrystalRecord rec;
    for (const char* field : {"id", "lattice", "sites"})
        if (!j.contains(field)) throw ParseError(line, std::string("missing field: ") + field);

    rec.id = j.at("id").get<std::string>();
    const auto& lat = j.at("lattice");
    if (!lat.is_array() || lat.size() != 6)
        throw ParseError(line, "lattice must be an array of 6 numbers");
    rec.crystal.lattice = {lat[0].get<double>(), lat[1].get<double>(), lat[2].get<double>(),
                           lat[3].get<double>(), lat[4].get<double>(), lat[5].get<double>()};

    const auto& sites = j.at("sites");
    if (!sites.is_array() || sites.empty())
        throw ParseError(line, "sites must be a non-empty array");
    for (const auto& js : sites) {
        if (!js.contains("element")) throw ParseError(line, "site missing field: element");
        if (!js.contains("frac")) throw ParseError(line, "site missing field: frac");
        Site s;
        s.element = element_from_symbol(js.at("element").get<std::string>());
        s.oxidation_state = js.value("oxidation_state", 0);
        const auto& f = js.at("frac");
        if (!f.is_array() || f.size() != 3)
            throw ParseError(line, "site frac must be an array of 3 numbers");
        for (int d = 0; d < 3; ++d) {
            const double raw = f[static_cast<std::size_t>(d)].get<double>();
            const double wrapped = wrap_frac(raw);
            if (wrapped != raw && warnings)
                warnings->push_back({line, "frac component " + std::to_string(raw) +
                                               " wrapped to " + std::to_string(wrapped)});
            s.frac[d] = wrapped;
        }
        rec.crystal.sites.push_back(s);
    }

    if (j.contains("properties")) {
        const auto& props = j.at("properties");
        if (!props.is_object()) throw ParseError(line, "properties must be an object");
        auto get = [&](const char* key) -> std::optional<double> {
            if (!props.contains(key)) return std::nullopt;
            const double v = props.at(key).get<double>();
            if (!std::isfinite(v))
                throw ParseError(line, std::string("property ") + key + " is not finite");
            return v;
        };
        rec.properties.band_gap = get("band_gap");
        rec.properties.magnetic_density = get("magnetic_density");
        rec.properties.density = get("density");
        rec.properties.space_group = get("space_group");
        rec.properties.hhi = get("hhi");
        if (props.contains("reduced_formula"))
            rec.properties.reduced_formula = props.at("reduced_formula").get<std::string>();
    }

    // Validate early so bad records carry their line number.
    try {
        rec.crystal.lattice.validate();
    } catch (const Error& e) {
        throw ParseError(line, e.what());
    }

    // Preserve fields we do not model.
    rec.extra = nlohmann::json::object();
    for (const auto& [key, value] : j.items()) {
        if (key == "id" || key == "lattice" || key == "sites") continue;
        if (key == "properties") {
            nlohmann::json rest = nlohmann::json::object();
            for (const auto& [pk, pv] : value.items()) {
                const bool known =
                    pk == "band_gap" || pk == "magnetic_density" || pk == "density" ||
                    pk == "space_group" || pk == "hhi" || pk == "reduced_formula";
                if (!known) rest[pk] = pv;
            }
            if (!rest.empty()) rec.extra["properties"] = std::move(rest);
            continue;
        }
        rec.extra[key] = value;
    }
    return rec;
}

}  // namespace detail

// Writes via a temp file in the same directory, then renames, so interrupted
// runs never leave a half-written artifact.
inline void atomic_write_text(const std::string& path, const std::string& content) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("cannot open for writing: " + tmp);
        f << content;
        f.flush();
        if (!f) throw IoError("failed writing: " + tmp);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("cannot rename " + tmp + " to " + path + ": " + ec.message());
}

inline Corpus load_corpus(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot read corpus file: " + path);
    Corpus corpus;
    std::vector<std::string> report;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            const nlohmann::json j = nlohmann::json::parse(line);
            corpus.records.push_back(detail::record_from_json(j, line_no, &corpus.warnings));
        } catch (const ParseError& e) {
            report.push_back(e.what());
        } catch (const std::exception& e) {
            report.push_back("line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    if (!report.empty()) {
        std::string msg = std::to_string(report.size()) + " malformed record(s):";
        for (const std::string& r : report) msg += "\n  " + r;
        // Position of the first failure; the message lists them all.
        std::size_t first = 0;
        std::sscanf(report.front().c_str(), "line %zu", &first);
        throw ParseError(first, msg);
    }
    if (corpus.records.empty()) throw EmptyCorpusError("corpus has no records: " + path);
    return corpus;
}

inline void save_corpus(const std::vector<CrystalRecord>& records, const std::string& path) {
    std::string out;
    for (const CrystalRecord& rec : records) {
        out += detail::record_to_json(rec).dump();
        out += '\n';
    }
    atomic_write_text(path, out);
}

// --- Element tables ------------------------------------------------------------

struct ElementEntry {
    int atomic_number = 0;
    std::string symbol;
    double mass_u = 0.0;
    std::vector<int> oxidation_states;  // in table order (most common first)
    double hhi = 0.0;
};

struct ElementTables {
    std::map<int, ElementEntry> entries;
    std::string hhi_basis;  // "production" or "reserve", from the file header

    const ElementEntry& at(int z) const {
        auto it = entries.find(z);
        if (it == entries.end())
            throw UnknownElementError("element " + std::to_string(z) + " not in tables");
        return it->second;
    }

    std::map<int, double> masses() const {
        std::map<int, double> m;
        for (const auto& [z, e] : entries) m[z] = e.mass_u;
        return m;
    }

    std::map<int, std::vector<int>> oxidation_table() const {
        std::map<int, std::vector<int>> t;
        for (const auto& [z, e] : entries) t[z] = e.oxidation_states;
        return t;
    }

    std::map<int, double> hhi_table() const {
        std::map<int, double> t;
        for (const auto& [z, e] : entries) t[z] = e.hhi;
        return t;
    }
};

inline ElementTables load_element_tables(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot read element table: " + path);
    ElementTables tables;
    std::string line;
    std::size_t line_no = 0;
    bool header_seen = false;
    while (std::getline(f, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (line[0] == '#') {
            const std::string key = "# hhi_basis:";
            if (line.rfind(key, 0) == 0) {
                std::string v = line.substr(key.size());
                v.erase(0, v.find_first_not_of(' '));
                tables.hhi_basis = v;
            }
            continue;
        }
        if (!header_seen) {
            if (line != "symbol,atomic_number,mass_u,oxidation_states(semicolon-joined),hhi" &&
                line != "symbol,atomic_number,mass_u,oxidation_states,hhi")
                throw ParseError(line_no, "unexpected element table header: " + line);
            header_seen = true;
            continue;
        }
        std::stringstream ss(line);
        std::string sym, z_s, mass_s, oxi_s, hhi_s;
        if (!std::getline(ss, sym, ',') || !std::getline(ss, z_s, ',') ||
            !std::getline(ss, mass_s, ',') || !std::getline(ss, oxi_s, ',') ||
            !std::getline(ss, hhi_s))
            throw ParseError(line_no, "expected 5 comma-separated fields");
        ElementEntry e;
        e.symbol = sym;
        try {
            e.atomic_number = std::stoi(z_s);
            e.mass_u = std::stod(mass_s);
            e.hhi = std::stod(hhi_s);
        } catch (const std::exception&) {
            throw ParseError(line_no, "non-numeric field in: " + line);
        }
        if (element_from_symbol(sym) != e.atomic_number)
            throw ParseError(line_no, "symbol/atomic number mismatch: " + line);
        if (!(e.mass_u > 0.0)) throw ParseError(line_no, "mass must be positive: " + line);
        if (!oxi_s.empty()) {
            std::stringstream os(oxi_s);
            std::string tok;
            while (std::getline(os, tok, ';')) {
                try {
                    e.oxidation_states.push_back(std::stoi(tok));
                } catch (const std::exception&) {
                    throw ParseError(line_no, "bad oxidation state '" + tok + "'");
                }
            }
        }
        if (tables.entries.count(e.atomic_number))
            throw ParseError(line_no, "duplicate element: " + sym);
        tables.entries[e.atomic_number] = std::move(e);
    }
    if (tables.entries.empty()) throw EmptyTableError("element table has no rows: " + path);
    return tables;
}

// --- Split and toy corpus --------------------------------------------------------

inline std::pair<std::vector<CrystalRecord>, std::vector<CrystalRecord>> split_corpus(
    const std::vector<CrystalRecord>& records, double train_frac, std::uint64_t seed) {
    if (!(train_frac > 0.0) || !(train_frac < 1.0))
        throw ConfigError("train_frac must lie strictly between 0 and 1");
    std::vector<std::size_t> order(records.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(seed);
    rng.shuffle(order);
    const std::size_t n_train =
        static_cast<std::size_t>(std::floor(static_cast<double>(records.size()) * train_frac));
    if (n_train == 0 || n_train == records.size())
        throw TooSmallError("split would leave an empty train or validation side");
    std::pair<std::vector<CrystalRecord>, std::vector<CrystalRecord>> out;
    out.first.reserve(n_train);
    out.second.reserve(records.size() - n_train);
    for (std::size_t i = 0; i < order.size(); ++i)
        (i < n_train ? out.first : out.second).push_back(records[order[i]]);
    return out;
}

// Composition HHI: atom-fraction-weighted mean of per-element scores.
inline double hhi_of_composition(const std::vector<Site>& sites,
                                 const std::map<int, double>& hhi_table) {
    double sum = 0.0;
    for (const Site& s : sites) {
        auto it = hhi_table.find(s.element);
        if (it == hhi_table.end())
            throw UnknownElementError("no HHI score for element " + std::to_string(s.element));
        sum += it->second;
    }
    return sum / static_cast<double>(sites.size());
}

struct ToySpec {
    std::size_t n = 1;
    std::uint64_t seed = 0;
};

// Random charge-neutral crystals from a small palette of neutral units, with
// lattice parameters inside the default quantization ranges and exact stored
// density/HHI. Deterministic per seed.
inline std::vector<CrystalRecord> synth_toy_corpus(const ToySpec& spec,
                                                   const ElementTables& tables) {
    if (spec.n < 1) throw ConfigError("toy corpus size must be at least 1");

    // (element, oxidation) multisets with zero net charge, at most 5 sites.
    // The single-atom neutral units keep 1-site budgets fillable.
    using Unit = std::vector<std::pair<int, int>>;
    static const std::vector<Unit> kUnits = {
        {{6, 0}},                                           // C
        {{14, 0}},                                          // Si
        {{3, 1}, {9, -1}},                                  // LiF
        {{11, 1}, {9, -1}},                                 // NaF
        {{12, 2}, {8, -2}},                                 // MgO
        {{56, 2}, {8, -2}},                                 // BaO
        {{3, 1}, {3, 1}, {8, -2}},                          // Li2O
        {{13, 3}, {13, 3}, {8, -2}, {8, -2}, {8, -2}},      // Al2O3
        {{26, 3}, {26, 3}, {8, -2}, {8, -2}, {8, -2}},      // Fe2O3
        {{3, 1}, {13, 3}, {8, -2}, {8, -2}},                // LiAlO2
        {{22, 4}, {8, -2}, {8, -2}},                        // TiO2
        {{19, 1}, {17, -1}},                                // KCl
    };

    const std::map<int, double> masses = tables.masses();
    const std::map<int, double> hhi = tables.hhi_table();

    std::vector<CrystalRecord> out;
    out.reserve(spec.n);
    Rng rng(spec.seed);
    for (std::size_t i = 0; i < spec.n; ++i) {
        CrystalRecord rec;
        char idbuf[24];
        std::snprintf(idbuf, sizeof(idbuf), "toy-%06zu", i);
        rec.id = idbuf;

        Crystal& c = rec.crystal;
        while (true) {
            c.sites.clear();
            // Stack whole neutral units until the 8-site budget is spent.
            int budget = 1 + static_cast<int>(rng.below(8));
            while (budget > 0) {
                const Unit& u = kUnits[rng.below(kUnits.size())];
                if (static_cast<int>(u.size()) > budget) {
                    if (c.sites.empty()) continue;  // smallest units fit; retry draw
                    break;
                }
                for (const auto& [z, oxi] : u) {
                    Site s;
                    s.element = z;
                    s.oxidation_state = oxi;
                    s.frac = {rng.uniform(), rng.uniform(), rng.uniform()};
                    c.sites.push_back(s);
                }
                budget -= static_cast<int>(u.size());
            }

            // Pick a target density, then solve for the cell scale.
            const double target_density = rng.uniform(1.0, 8.0);
            double mass_u = 0.0;
            for (const Site& s : c.sites) mass_u += masses.at(s.element);
            const double volume = mass_u * (kAmuToGram * 1e24) / target_density;  // Å³

            LatticeParams p;
            p.alpha = rng.uniform(75.0, 105.0);
            p.beta = rng.uniform(75.0, 105.0);
            p.gamma = rng.uniform(75.0, 105.0);
            const double rb = rng.uniform(1.0, 1.3);
            const double rc = rng.uniform(1.0, 1.3);
            const double gram = p.gram_factor();
            if (gram <= 0.05) continue;
            const double scale = std::cbrt(volume / (rb * rc * std::sqrt(gram)));
            p.a = scale;
            p.b = scale * rb;
            p.c = scale * rc;
            if (p.a < 2.0 || p.a > 10.0 || p.b < 2.0 || p.b > 12.5 || p.c < 2.0 || p.c > 20.0)
                continue;  // redraw; density/mass combination does not fit the ranges
            c.lattice = p;
            break;
        }

        rec.properties.density = density(c, masses);
        rec.properties.hhi = hhi_of_composition(c.sites, hhi);
        rec.properties.reduced_formula = formula_to_string(reduced_formula(c));
        rec.properties.space_group = 1.0;  // random coordinates: trivial symmetry
        rec.properties.band_gap = std::abs(rng.normal(0.0, 2.0));
        rec.properties.magnetic_density = rng.uniform(0.0, 0.2);
        out.push_back(std::move(rec));
    }
    return out;
}

}  // namespace matseq
