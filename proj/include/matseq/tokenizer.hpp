#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "matseq/crystal.hpp"
#include "matseq/elements.hpp"
#include "matseq/errors.hpp"
#include "matseq/rng.hpp"

namespace matseq {

using TokenSequence = std::vector<int>;

// Fixed id layout: specials, then the 1024 value bins shared by coordinates
// and lattice parameters, then (element, oxidation) pairs sorted by
// (atomic number, state).
struct Vocabulary {
    static constexpr int kSos = 0;
    static constexpr int kEos = 1;
    static constexpr int kAtoms = 2;
    static constexpr int kLattice = 3;
    static constexpr int kNumBins = 1024;
    static constexpr int kBinStart = 4;
    static constexpr int kElemStart = kBinStart + kNumBins;  // 1028

    std::vector<std::pair<int, int>> elem_oxi_of_id;  // indexed by id - kElemStart
    std::map<std::pair<int, int>, int> id_of_elem_oxi;
    int total_size = 0;

    bool is_bin(int id) const { return id >= kBinStart && id < kElemStart; }
    bool is_elem_oxi(int id) const { return id >= kElemStart && id < total_size; }

    int bin_id(int b) const {
        if (b < 0 || b >= kNumBins)
            throw OutOfRangeError("bin index out of range: " + std::to_string(b));
        return kBinStart + b;
    }

    int bin_of_id(int id) const {
        if (!is_bin(id)) throw OutOfRangeError("token id is not a value bin");
        return id - kBinStart;
    }

    int elem_oxi_id(int element, int oxidation_state) const {
        auto it = id_of_elem_oxi.find({element, oxidation_state});
        if (it == id_of_elem_oxi.end())
            throw UnknownElementOxiError("no token for " + element_symbol(element) + "|" +
                                         std::to_string(oxidation_state));
        return it->second;
    }

    std::pair<int, int> elem_oxi_of(int id) const {
        if (!is_elem_oxi(id)) throw OutOfRangeError("token id is not an element|oxidation pair");
        return elem_oxi_of_id[static_cast<std::size_t>(id - kElemStart)];
    }

    std::string token_name(int id) const {
        switch (id) {
            case kSos: return "[SOS]";
            case kEos: return "[EOS]";
            case kAtoms: return "[ATOMS]";
            case kLattice: return "[LATTICE]";
            default: break;
        }
        if (is_bin(id)) {
            char buf[16];
            std::snprintf(buf, sizeof(buf), "[BIN_%04d]", id - kBinStart);
            return buf;
        }
        if (is_elem_oxi(id)) {
            const auto [z, oxi] = elem_oxi_of(id);
            std::string s = "[" + element_symbol(z) + "|";
            if (oxi > 0) s += "+";
            s += std::to_string(oxi);
            return s + "]";
        }
        throw OutOfRangeError("token id out of range: " + std::to_string(id));
    }

    // Serialized body; hashing it ties checkpoints to an exact vocabulary.
    std::string serialize() const {
        std::string out = "# vocabulary v1\n";
        for (int id = 0; id < total_size; ++id) {
            out += std::to_string(id);
            out += '\t';
            out += token_name(id);
            out += '\n';
        }
        return out;
    }

    std::uint64_t hash() const { return fnv1a64(serialize()); }

    void save(const std::string& path) const {
        std::ofstream f(path, std::ios::binary);
        if (!f) throw IoError("cannot write vocabulary file: " + path);
        f << serialize();
        if (!f) throw IoError("failed writing vocabulary file: " + path);
    }

    static Vocabulary load(const std::string& path);
};

inline Vocabulary build_vocab(const std::map<int, std::vector<int>>& oxidation_table) {
    if (oxidation_table.empty()) throw EmptyTableError("oxidation table is empty");
    Vocabulary v;
    for (const auto& [z, states] : oxidation_table) {
        if (!is_known_element(z))
            throw UnknownElementError("oxidation table has unknown element " + std::to_string(z));
        std::vector<int> with_zero = states;
        if (std::find(with_zero.begin(), with_zero.end(), 0) == with_zero.end())
            with_zero.push_back(0);
        std::sort(with_zero.begin(), with_zero.end());
        with_zero.erase(std::unique(with_zero.begin(), with_zero.end()), with_zero.end());
        for (int oxi : with_zero) v.elem_oxi_of_id.emplace_back(z, oxi);
    }
    // std::map iterates elements in ascending Z; states sorted above.
    std::sort(v.elem_oxi_of_id.begin(), v.elem_oxi_of_id.end());
    v.total_size = Vocabulary::kElemStart + static_cast<int>(v.elem_oxi_of_id.size());
    for (std::size_t i = 0; i < v.elem_oxi_of_id.size(); ++i)
        v.id_of_elem_oxi[v.elem_oxi_of_id[i]] = Vocabulary::kElemStart + static_cast<int>(i);
    return v;
}

inline Vocabulary Vocabulary::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot read vocabulary file: " + path);
    std::map<int, std::vector<int>> table;
    std::string line;
    int expected_id = 0;
    int n_elem = 0;
    while (std::getline(f, line)) {
        if (line.empty() || line[0] == '#') continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos)
            throw IoError("malformed vocabulary line: " + line);
        const int id = std::stoi(line.substr(0, tab));
        if (id != expected_id++)
            throw IoError("vocabulary ids are not dense at id " + std::to_string(id));
        const std::string name = line.substr(tab + 1);
        if (id >= kElemStart) {
            if (name.size() < 4 || name.front() != '[' || name.back() != ']')
                throw IoError("malformed token name: " + name);
            const auto bar = name.find('|');
            if (bar == std::string::npos) throw IoError("malformed token name: " + name);
            const int z = element_from_symbol(name.substr(1, bar - 1));
            const int oxi = std::stoi(name.substr(bar + 1, name.size() - bar - 2));
            table[z].push_back(oxi);
            ++n_elem;
        }
    }
    if (n_elem == 0) throw EmptyTableError("vocabulary file has no element tokens: " + path);
    Vocabulary v = build_vocab(table);
    if (v.total_size != expected_id)
        throw IoError("vocabulary file is not in canonical layout: " + path);
    return v;
}

enum class Ordering { LowFirst, HighFirst, XYZ, Random };

struct OrderingStrategy {
    Ordering kind = Ordering::LowFirst;
    std::uint64_t seed = 0;  // used by Random only
};

inline OrderingStrategy ordering_from_string(const std::string& name, std::uint64_t seed = 0) {
    if (name == "low_first") return {Ordering::LowFirst, seed};
    if (name == "high_first") return {Ordering::HighFirst, seed};
    if (name == "xyz") return {Ordering::XYZ, seed};
    if (name == "random") return {Ordering::Random, seed};
    throw ConfigError("unknown ordering strategy: " + name);
}

namespace detail {

// Stable per-material value so Random ordering is one fixed permutation per
// material rather than a fresh draw every epoch.
inline std::uint64_t material_hash(const std::vector<Site>& sites) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const Site& s : sites) {
        h = fnv1a64(&s.element, sizeof(s.element), h);
        h = fnv1a64(&s.oxidation_state, sizeof(s.oxidation_state), h);
        const double coords[3] = {s.frac.x(), s.frac.y(), s.frac.z()};
        h = fnv1a64(coords, sizeof(coords), h);
    }
    return h;
}

}  // namespace detail

inline std::vector<Site> order_sites(std::vector<Site> sites, const OrderingStrategy& s) {
    auto coords_less = [](const Site& a, const Site& b) {
        if (a.frac.x() != b.frac.x()) return a.frac.x() < b.frac.x();
        if (a.frac.y() != b.frac.y()) return a.frac.y() < b.frac.y();
        return a.frac.z() < b.frac.z();
    };
    switch (s.kind) {
        case Ordering::LowFirst:
            std::stable_sort(sites.begin(), sites.end(), [&](const Site& a, const Site& b) {
                if (a.element != b.element) return a.element < b.element;
                return coords_less(a, b);
            });
            break;
        case Ordering::HighFirst:
            std::stable_sort(sites.begin(), sites.end(), [&](const Site& a, const Site& b) {
                if (a.element != b.element) return a.element > b.element;
                return coords_less(a, b);
            });
            break;
        case Ordering::XYZ:
            std::stable_sort(sites.begin(), sites.end(), [&](const Site& a, const Site& b) {
                if (coords_less(a, b)) return true;
                if (coords_less(b, a)) return false;
                return a.element < b.element;
            });
            break;
        case Ordering::Random: {
            Rng rng(s.seed ^ detail::material_hash(sites));
            rng.shuffle(sites);
            break;
        }
    }
    return sites;
}

inline int quantize_frac(double v) {
    if (!(v >= 0.0) || v >= 1.0)
        throw OutOfRangeError("fractional value outside [0,1): " + std::to_string(v));
    const int b = static_cast<int>(v * 1024.0);
    return std::min(b, 1023);
}

inline double dequantize_frac(int b) {
    if (b < 0 || b > 1023) throw OutOfRangeError("bin outside 0..1023: " + std::to_string(b));
    return (b + 0.5) / 1024.0;
}

// Per-parameter quantization ranges; indices follow (a, b, c, alpha, beta, gamma).
struct LatticeRanges {
    std::array<std::pair<double, double>, 6> bounds{{{2.0, 10.0},
                                                     {2.0, 12.5},
                                                     {2.0, 20.0},
                                                     {60.0, 120.0},
                                                     {60.0, 120.0},
                                                     {60.0, 120.0}}};

    void validate() const {
        for (const auto& [lo, hi] : bounds)
            if (!(lo < hi)) throw ConfigError("lattice range must have min < max");
    }
};

inline constexpr std::array<const char*, 6> kLatticeParamNames = {"a", "b", "c",
                                                                  "alpha", "beta", "gamma"};

inline int lattice_param_index(const std::string& name) {
    for (int i = 0; i < 6; ++i)
        if (name == kLatticeParamNames[static_cast<std::size_t>(i)]) return i;
    throw ConfigError("unknown lattice parameter name: " + name);
}

struct QuantizedParam {
    int bin = 0;
    bool clamped = false;  // true iff the raw value fell outside [min, max]
};

inline QuantizedParam quantize_lattice_param(int index, double value, const LatticeRanges& r) {
    const auto [lo, hi] = r.bounds.at(static_cast<std::size_t>(index));
    QuantizedParam q;
    if (value < lo) {
        q.bin = 0;
        q.clamped = true;
    } else if (value > hi) {
        q.bin = 1023;
        q.clamped = true;
    } else {
        const double norm = (value - lo) / (hi - lo);
        q.bin = std::min(static_cast<int>(norm * 1024.0), 1023);
    }
    return q;
}

inline QuantizedParam quantize_lattice_param(const std::string& name, double value,
                                             const LatticeRanges& r) {
    return quantize_lattice_param(lattice_param_index(name), value, r);
}

inline double dequantize_lattice_param(int index, int bin, const LatticeRanges& r) {
    const auto [lo, hi] = r.bounds.at(static_cast<std::size_t>(index));
    return lo + (hi - lo) * dequantize_frac(bin);
}

inline std::array<double, 6> lattice_param_array(const LatticeParams& p) {
    return {p.a, p.b, p.c, p.alpha, p.beta, p.gamma};
}

// --- Grammar -----------------------------------------------------------------

enum class TokenClass { Sos = 0, Eos, Atoms, Lattice, Bin, ElemOxi, Invalid };

inline TokenClass classify_token(int id, const Vocabulary& v) {
    switch (id) {
        case Vocabulary::kSos: return TokenClass::Sos;
        case Vocabulary::kEos: return TokenClass::Eos;
        case Vocabulary::kAtoms: return TokenClass::Atoms;
        case Vocabulary::kLattice: return TokenClass::Lattice;
        default: break;
    }
    if (v.is_bin(id)) return TokenClass::Bin;
    if (v.is_elem_oxi(id)) return TokenClass::ElemOxi;
    return TokenClass::Invalid;
}

inline unsigned class_bit(TokenClass c) { return 1u << static_cast<unsigned>(c); }

// Tracks the sequence phase during decoding or constrained sampling. With
// max_atoms set, the element-token option closes once that many atoms have
// been emitted, so bounded generation always reaches EOS in valid form.
class GrammarState {
  public:
    enum class Phase { ExpectSos, ExpectAtoms, ExpectGroupOrLattice, InGroup,
                       LatticeBins, ExpectEos, Done };

    explicit GrammarState(bool coords_first = false,
                          int max_atoms = std::numeric_limits<int>::max())
        : coords_first_(coords_first), max_atoms_(max_atoms) {}

    Phase phase() const { return phase_; }
    int atoms() const { return atoms_; }
    bool complete() const { return phase_ == Phase::Done; }

    // Bitmask over TokenClass of what may come next.
    unsigned allowed() const {
        switch (phase_) {
            case Phase::ExpectSos: return class_bit(TokenClass::Sos);
            case Phase::ExpectAtoms: return class_bit(TokenClass::Atoms);
            case Phase::ExpectGroupOrLattice: {
                unsigned m = 0;
                if (atoms_ < max_atoms_)
                    m |= class_bit(coords_first_ ? TokenClass::Bin : TokenClass::ElemOxi);
                if (atoms_ >= 1) m |= class_bit(TokenClass::Lattice);
                return m;
            }
            case Phase::InGroup:
                // coords-first groups end with the element token.
                if (coords_first_ && group_left_ == 1) return class_bit(TokenClass::ElemOxi);
                return class_bit(TokenClass::Bin);
            case Phase::LatticeBins: return class_bit(TokenClass::Bin);
            case Phase::ExpectEos: return class_bit(TokenClass::Eos);
            case Phase::Done: return 0;
        }
        return 0;
    }

    bool accepts(TokenClass c) const { return (allowed() & class_bit(c)) != 0; }

    std::string expected_description() const {
        switch (phase_) {
            case Phase::ExpectSos: return "SOS";
            case Phase::ExpectAtoms: return "ATOMS";
            case Phase::ExpectGroupOrLattice:
                if (atoms_ == 0) return coords_first_ ? "coordinate bin" : "element token";
                return coords_first_ ? "coordinate bin or LATTICE" : "element token or LATTICE";
            case Phase::InGroup:
                if (coords_first_ && group_left_ == 1) return "element token";
                return "coordinate bin";
            case Phase::LatticeBins: return "lattice parameter bin";
            case Phase::ExpectEos: return "EOS";
            case Phase::Done: return "end of sequence";
        }
        return "?";
    }

    // pre: accepts(c)
    void advance(TokenClass c) {
        switch (phase_) {
            case Phase::ExpectSos: phase_ = Phase::ExpectAtoms; break;
            case Phase::ExpectAtoms: phase_ = Phase::ExpectGroupOrLattice; break;
            case Phase::ExpectGroupOrLattice:
                if (c == TokenClass::Lattice) {
                    phase_ = Phase::LatticeBins;
                    group_left_ = 6;
                } else {
                    phase_ = Phase::InGroup;
                    group_left_ = 3;
                }
                break;
            case Phase::InGroup:
                if (--group_left_ == 0) {
                    ++atoms_;
                    phase_ = Phase::ExpectGroupOrLattice;
                }
                break;
            case Phase::LatticeBins:
                if (--group_left_ == 0) phase_ = Phase::ExpectEos;
                break;
            case Phase::ExpectEos: phase_ = Phase::Done; break;
            case Phase::Done: break;
        }
    }

  private:
    bool coords_first_;
    int max_atoms_;
    Phase phase_ = Phase::ExpectSos;
    int group_left_ = 0;
    int atoms_ = 0;
};

// --- Encode / decode ---------------------------------------------------------

inline TokenSequence encode(const Crystal& c, const Vocabulary& v, const OrderingStrategy& s,
                            const LatticeRanges& r = {}, bool coords_first = false,
                            int* clamp_count = nullptr) {
    if (c.sites.empty()) throw OutOfRangeError("crystal has no sites");
    r.validate();
    const Crystal reduced = niggli_reduce_crystal(c);
    const std::vector<Site> ordered = order_sites(reduced.sites, s);

    TokenSequence t;
    t.reserve(4 * ordered.size() + 10);
    t.push_back(Vocabulary::kSos);
    t.push_back(Vocabulary::kAtoms);
    for (const Site& site : ordered) {
        const int elem_id = v.elem_oxi_id(site.element, site.oxidation_state);
        std::array<int, 3> bins{};
        for (int d = 0; d < 3; ++d) bins[static_cast<std::size_t>(d)] = quantize_frac(site.frac[d]);
        if (coords_first) {
            for (int b : bins) t.push_back(v.bin_id(b));
            t.push_back(elem_id);
        } else {
            t.push_back(elem_id);
            for (int b : bins) t.push_back(v.bin_id(b));
        }
    }
    t.push_back(Vocabulary::kLattice);
    const std::array<double, 6> params = lattice_param_array(reduced.lattice);
    int clamps = 0;
    for (int i = 0; i < 6; ++i) {
        const QuantizedParam q = quantize_lattice_param(i, params[static_cast<std::size_t>(i)], r);
        if (q.clamped) ++clamps;
        t.push_back(v.bin_id(q.bin));
    }
    t.push_back(Vocabulary::kEos);
    if (clamp_count) *clamp_count = clamps;
    return t;
}

// Positioned decode failure; a value, not an exception, so fuzzed inputs are
// handled without unwinding.
struct GrammarError {
    std::size_t position = 0;
    std::string expected;

    std::string message() const {
        return "grammar error at position " + std::to_string(position) + ": expected " +
               expected;
    }
};

using DecodeResult = std::variant<Crystal, GrammarError>;

inline DecodeResult decode(const TokenSequence& t, const Vocabulary& v,
                           const LatticeRanges& r = {}, bool coords_first = false) {
    r.validate();
    GrammarState st(coords_first);
    Crystal out;
    Site site;
    int coord_idx = 0;
    std::vector<int> lattice_bins;
    std::size_t lattice_pos = 0;

    for (std::size_t pos = 0; pos < t.size(); ++pos) {
        if (st.complete()) return GrammarError{pos, "end of sequence"};
        const TokenClass cls = classify_token(t[pos], v);
        if (cls == TokenClass::Invalid || !st.accepts(cls))
            return GrammarError{pos, st.expected_description()};
        switch (cls) {
            case TokenClass::ElemOxi: {
                const auto [z, oxi] = v.elem_oxi_of(t[pos]);
                site.element = z;
                site.oxidation_state = oxi;
                if (coords_first) {
                    out.sites.push_back(site);  // coords already collected
                    coord_idx = 0;
                }
                break;
            }
            case TokenClass::Bin: {
                const int b = v.bin_of_id(t[pos]);
                if (st.phase() == GrammarState::Phase::LatticeBins) {
                    lattice_bins.push_back(b);
                } else {
                    site.frac[coord_idx++] = dequantize_frac(b);
                    if (!coords_first && coord_idx == 3) {
                        out.sites.push_back(site);
                        coord_idx = 0;
                    }
                }
                break;
            }
            case TokenClass::Lattice:
                lattice_pos = pos;
                break;
            default:
                break;
        }
        st.advance(cls);
    }
    if (!st.complete()) return GrammarError{t.size(), st.expected_description()};

    std::array<double, 6> params{};
    for (int i = 0; i < 6; ++i)
        params[static_cast<std::size_t>(i)] =
            dequantize_lattice_param(i, lattice_bins[static_cast<std::size_t>(i)], r);
    out.lattice = {params[0], params[1], params[2], params[3], params[4], params[5]};
    try {
        out.lattice.validate();
    } catch (const Error&) {
        // Grammar-conformant but physically unrealizable (possible only with
        // custom ranges); reported against the lattice section.
        return GrammarError{lattice_pos, "realizable lattice parameters"};
    }
    return out;
}

// --- Oxidation-state assignment heuristic -------------------------------------

// For structures arriving without oxidation states: per-element uniform
// assignment over the allowed states, searching for exact charge neutrality.
// Ties prefer earlier table positions (tables list common states first).
// Returns false (and assigns all zeros) when no neutral combination exists or
// the search space is too large.
inline bool assign_oxidation_states(Crystal& c,
                                    const std::map<int, std::vector<int>>& oxidation_table,
                                    std::size_t max_combinations = 1000000) {
    std::map<int, int> counts;
    for (const Site& s : c.sites) counts[s.element] += 1;

    std::vector<int> elements;
    std::vector<const std::vector<int>*> choices;
    std::size_t space = 1;
    bool feasible = true;
    for (const auto& [z, n] : counts) {
        auto it = oxidation_table.find(z);
        if (it == oxidation_table.end() || it->second.empty()) {
            feasible = false;
            break;
        }
        elements.push_back(z);
        choices.push_back(&it->second);
        if (space > max_combinations / it->second.size()) {
            feasible = false;
            break;
        }
        space *= it->second.size();
    }

    std::vector<int> pick(elements.size(), 0), best;
    if (feasible) {
        // Odometer over per-element state indices; first exact-zero hit wins,
        // and index order encodes the commonness preference.
        for (std::size_t combo = 0; combo < space && best.empty(); ++combo) {
            std::size_t rest = combo;
            long long charge = 0;
            for (std::size_t i = 0; i < elements.size(); ++i) {
                const auto& states = *choices[i];
                pick[i] = states[rest % states.size()];
                rest /= states.size();
                charge += static_cast<long long>(counts[elements[i]]) * pick[i];
            }
            if (charge == 0) best = pick;
        }
    }

    std::map<int, int> assignment;
    if (!best.empty())
        for (std::size_t i = 0; i < elements.size(); ++i) assignment[elements[i]] = best[i];
    for (Site& s : c.sites) s.oxidation_state = best.empty() ? 0 : assignment[s.element];
    return !best.empty();
}

}  // namespace matseq
