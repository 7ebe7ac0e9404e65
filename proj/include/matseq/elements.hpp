#pragma once

#include <array>
#include <cctype>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "matseq/errors.hpp"

namespace matseq {

// Elements H (1) through Lr (103).
inline constexpr int kMaxAtomicNumber = 103;

inline constexpr std::array<std::string_view, kMaxAtomicNumber + 1> kElementSymbols = {
    "",   "H",  "He", "Li", "Be", "B",  "C",  "N",  "O",  "F",  "Ne", "Na", "Mg",
    "Al", "Si", "P",  "S",  "Cl", "Ar", "K",  "Ca", "Sc", "Ti", "V",  "Cr", "Mn",
    "Fe", "Co", "Ni", "Cu", "Zn", "Ga", "Ge", "As", "Se", "Br", "Kr", "Rb", "Sr",
    "Y",  "Zr", "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In", "Sn", "Sb",
    "Te", "I",  "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd", "Pm", "Sm", "Eu", "Gd",
    "Tb", "Dy", "Ho", "Er", "Tm", "Yb", "Lu", "Hf", "Ta", "W",  "Re", "Os", "Ir",
    "Pt", "Au", "Hg", "Tl", "Pb", "Bi", "Po", "At", "Rn", "Fr", "Ra", "Ac", "Th",
    "Pa", "U",  "Np", "Pu", "Am", "Cm", "Bk", "Cf", "Es", "Fm", "Md", "No", "Lr"};

inline bool is_known_element(int z) { return z >= 1 && z <= kMaxAtomicNumber; }

inline std::string element_symbol(int z) {
    if (!is_known_element(z))
        throw UnknownElementError("atomic number out of range: " + std::to_string(z));
    return std::string(kElementSymbols[static_cast<std::size_t>(z)]);
}

inline int element_from_symbol(std::string_view symbol) {
    for (int z = 1; z <= kMaxAtomicNumber; ++z) {
        if (kElementSymbols[static_cast<std::size_t>(z)] == symbol) return z;
    }
    throw UnknownElementError("unknown element symbol: " + std::string(symbol));
}

// Parses "Fe2O3" or "Fe1O1" into (Z, count) pairs; omitted counts default to 1.
// Duplicate elements are merged and the result is sorted alphabetically by
// symbol, matching reduced-formula order.
inline std::vector<std::pair<int, int>> parse_formula(std::string_view text) {
    std::map<std::string, std::pair<int, int>> acc;  // symbol -> (Z, count)
    std::size_t i = 0;
    while (i < text.size()) {
        if (!std::isupper(static_cast<unsigned char>(text[i])))
            throw UnknownElementError("malformed formula: " + std::string(text));
        std::size_t j = i + 1;
        while (j < text.size() && std::islower(static_cast<unsigned char>(text[j]))) ++j;
        const std::string sym(text.substr(i, j - i));
        const int z = element_from_symbol(sym);
        i = j;
        int count = 0;
        while (i < text.size() && std::isdigit(static_cast<unsigned char>(text[i]))) {
            count = count * 10 + (text[i] - '0');
            ++i;
        }
        if (count == 0) count = 1;
        auto& entry = acc[sym];
        entry.first = z;
        entry.second += count;
    }
    if (acc.empty()) throw UnknownElementError("empty formula");
    std::vector<std::pair<int, int>> out;
    out.reserve(acc.size());
    for (const auto& [sym, zc] : acc) out.push_back(zc);
    return out;
}

}  // namespace matseq
