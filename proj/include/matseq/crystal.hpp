#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "matseq/elements.hpp"
#include "matseq/errors.hpp"
#include "matseq/rng.hpp"

namespace matseq {

inline constexpr double kDegToRad = M_PI / 180.0;
inline constexpr double kRadToDeg = 180.0 / M_PI;

// Atomic mass unit in grams; converts u/Å³ to g/cm³ together with the 1e-24 factor.
inline constexpr double kAmuToGram = 1.66053906660e-24;

struct LatticeParams {
    double a = 1.0, b = 1.0, c = 1.0;          // edge lengths, Å
    double alpha = 90.0, beta = 90.0, gamma = 90.0;  // angles, degrees

    // 1 - cos²α - cos²β - cos²γ + 2·cosα·cosβ·cosγ; positive for a valid cell.
    double gram_factor() const {
        const double ca = std::cos(alpha * kDegToRad);
        const double cb = std::cos(beta * kDegToRad);
        const double cg = std::cos(gamma * kDegToRad);
        return 1.0 - ca * ca - cb * cb - cg * cg + 2.0 * ca * cb * cg;
    }

    void validate() const {
        if (!(a > 0.0) || !(b > 0.0) || !(c > 0.0))
            throw OutOfRangeError("lattice lengths must be positive");
        for (double ang : {alpha, beta, gamma}) {
            if (!(ang > 0.0) || !(ang < 180.0))
                throw OutOfRangeError("lattice angles must lie in (0, 180) degrees");
        }
        // Strictly positive with a margin over rounding noise, so exactly
        // degenerate angle triples (e.g. alpha+beta == gamma) are rejected.
        if (!(gram_factor() > 1e-12))
            throw DegenerateCellError("lattice angles give a non-positive cell volume");
    }
};

// Row i holds lattice vector i, in Å.
struct LatticeMatrix {
    Eigen::Matrix3d rows = Eigen::Matrix3d::Identity();

    Eigen::Vector3d l1() const { return rows.row(0); }
    Eigen::Vector3d l2() const { return rows.row(1); }
    Eigen::Vector3d l3() const { return rows.row(2); }
};

struct Site {
    int element = 1;             // atomic number
    int oxidation_state = 0;     // signed charge
    Eigen::Vector3d frac = Eigen::Vector3d::Zero();
};

struct Crystal {
    LatticeParams lattice;
    std::vector<Site> sites;
};

// Reduce into [0, 1); values within 1e-9 of 1.0 wrap to 0.0.
inline double wrap_frac(double x) {
    double y = x - std::floor(x);
    if (y >= 1.0 - 1e-9) y = 0.0;
    return y;
}

inline Eigen::Vector3d wrap_frac(const Eigen::Vector3d& v) {
    return {wrap_frac(v.x()), wrap_frac(v.y()), wrap_frac(v.z())};
}

// Convention: l1 along x, l2 in the xy-plane, right-handed.
inline LatticeMatrix lattice_matrix(const LatticeParams& p) {
    p.validate();
    const double ca = std::cos(p.alpha * kDegToRad);
    const double cb = std::cos(p.beta * kDegToRad);
    const double cg = std::cos(p.gamma * kDegToRad);
    const double sg = std::sin(p.gamma * kDegToRad);
    const double w = std::sqrt(p.gram_factor());

    LatticeMatrix m;
    m.rows.row(0) << p.a, 0.0, 0.0;
    m.rows.row(1) << p.b * cg, p.b * sg, 0.0;
    m.rows.row(2) << p.c * cb, p.c * (ca - cb * cg) / sg, p.c * w / sg;
    return m;
}

inline LatticeParams lattice_params_of(const LatticeMatrix& m) {
    const Eigen::Vector3d v1 = m.l1(), v2 = m.l2(), v3 = m.l3();
    auto angle_deg = [](const Eigen::Vector3d& u, const Eigen::Vector3d& v) {
        const double c = u.dot(v) / (u.norm() * v.norm());
        return std::acos(std::clamp(c, -1.0, 1.0)) * kRadToDeg;
    };
    LatticeParams p;
    p.a = v1.norm();
    p.b = v2.norm();
    p.c = v3.norm();
    p.alpha = angle_deg(v2, v3);
    p.beta = angle_deg(v1, v3);
    p.gamma = angle_deg(v1, v2);
    return p;
}

inline double cell_volume(const LatticeMatrix& m) { return std::abs(m.rows.determinant()); }

inline double cell_volume(const LatticeParams& p) { return cell_volume(lattice_matrix(p)); }

inline Eigen::Vector3d frac_to_cart(const LatticeMatrix& m, const Eigen::Vector3d& frac) {
    // r_cart = f1·l1 + f2·l2 + f3·l3
    return m.rows.transpose() * frac;
}

inline double density(const Crystal& c, const std::map<int, double>& masses_u) {
    double total_u = 0.0;
    for (const Site& s : c.sites) {
        auto it = masses_u.find(s.element);
        if (it == masses_u.end())
            throw UnknownElementError("no atomic mass for element " +
                                      std::to_string(s.element));
        total_u += it->second;
    }
    const double volume = cell_volume(c.lattice);  // Å³
    return total_u * kAmuToGram / (volume * 1e-24);
}

inline int net_charge(const Crystal& c) {
    int q = 0;
    for (const Site& s : c.sites) q += s.oxidation_state;
    return q;
}

namespace detail {

// State for the Krivy-Gruber reduction: squared lengths and doubled scalar
// products of the current basis.
struct GruberState {
    double A, B, C, xi, eta, zeta;

    static GruberState from_params(const LatticeParams& p) {
        const double ca = std::cos(p.alpha * kDegToRad);
        const double cb = std::cos(p.beta * kDegToRad);
        const double cg = std::cos(p.gamma * kDegToRad);
        return {p.a * p.a, p.b * p.b, p.c * p.c,
                2.0 * p.b * p.c * ca, 2.0 * p.a * p.c * cb, 2.0 * p.a * p.b * cg};
    }

    LatticeParams to_params() const {
        LatticeParams p;
        p.a = std::sqrt(A);
        p.b = std::sqrt(B);
        p.c = std::sqrt(C);
        p.alpha = std::acos(std::clamp(xi / (2.0 * p.b * p.c), -1.0, 1.0)) * kRadToDeg;
        p.beta = std::acos(std::clamp(eta / (2.0 * p.a * p.c), -1.0, 1.0)) * kRadToDeg;
        p.gamma = std::acos(std::clamp(zeta / (2.0 * p.a * p.b), -1.0, 1.0)) * kRadToDeg;
        return p;
    }
};

inline Eigen::Matrix3i int_mat(int a00, int a01, int a02, int a10, int a11, int a12,
                               int a20, int a21, int a22) {
    Eigen::Matrix3i m;
    m << a00, a01, a02, a10, a11, a12, a20, a21, a22;
    return m;
}

// Inverse of a unimodular integer matrix via the adjugate.
inline Eigen::Matrix3i unimodular_inverse(const Eigen::Matrix3i& t) {
    const int det = t(0, 0) * (t(1, 1) * t(2, 2) - t(1, 2) * t(2, 1)) -
                    t(0, 1) * (t(1, 0) * t(2, 2) - t(1, 2) * t(2, 0)) +
                    t(0, 2) * (t(1, 0) * t(2, 1) - t(1, 1) * t(2, 0));
    Eigen::Matrix3i adj;
    adj(0, 0) = t(1, 1) * t(2, 2) - t(1, 2) * t(2, 1);
    adj(0, 1) = t(0, 2) * t(2, 1) - t(0, 1) * t(2, 2);
    adj(0, 2) = t(0, 1) * t(1, 2) - t(0, 2) * t(1, 1);
    adj(1, 0) = t(1, 2) * t(2, 0) - t(1, 0) * t(2, 2);
    adj(1, 1) = t(0, 0) * t(2, 2) - t(0, 2) * t(2, 0);
    adj(1, 2) = t(0, 2) * t(1, 0) - t(0, 0) * t(1, 2);
    adj(2, 0) = t(1, 0) * t(2, 1) - t(1, 1) * t(2, 0);
    adj(2, 1) = t(0, 1) * t(2, 0) - t(0, 0) * t(2, 1);
    adj(2, 2) = t(0, 0) * t(1, 1) - t(0, 1) * t(1, 0);
    if (det == 1) return adj;
    if (det == -1) return -adj;
    throw Error("matrix is not unimodular");
}

}  // namespace detail

struct NiggliResult {
    LatticeParams params;
    // new_basis = transform · old_basis (rows are lattice vectors).
    Eigen::Matrix3i transform;
    int steps = 0;
};

// Krivy-Gruber (1976) reduction with the numerical tolerances of
// Grosse-Kunstleve et al. (2004). The returned transform is unimodular, so the
// output describes the same lattice with equal volume.
inline NiggliResult niggli_reduce_full(const LatticeParams& input, int max_steps = 1000) {
    using detail::int_mat;
    input.validate();
    detail::GruberState g = detail::GruberState::from_params(input);
    Eigen::Matrix3i total = Eigen::Matrix3i::Identity();
    const double eps = 1e-5 * std::pow(cell_volume(input), 2.0 / 3.0);

    auto apply = [&](const Eigen::Matrix3i& m) { total = m * total; };

    int step = 0;
    while (true) {
        if (++step > max_steps)
            throw NonConvergenceError("cell reduction exceeded " +
                                      std::to_string(max_steps) + " steps");

        // A1: order A <= B
        if (g.A > g.B + eps ||
            (std::abs(g.A - g.B) < eps && std::abs(g.xi) > std::abs(g.eta) + eps)) {
            apply(int_mat(0, -1, 0, -1, 0, 0, 0, 0, -1));
            std::swap(g.A, g.B);
            std::swap(g.xi, g.eta);
        }
        // A2: order B <= C
        if (g.B > g.C + eps ||
            (std::abs(g.B - g.C) < eps && std::abs(g.eta) > std::abs(g.zeta) + eps)) {
            apply(int_mat(-1, 0, 0, 0, 0, -1, 0, -1, 0));
            std::swap(g.B, g.C);
            std::swap(g.eta, g.zeta);
            continue;
        }
        // A3 / A4: sign normalization of (xi, eta, zeta)
        {
            const int sx = g.xi > eps ? 1 : (g.xi < -eps ? -1 : 0);
            const int sy = g.eta > eps ? 1 : (g.eta < -eps ? -1 : 0);
            const int sz = g.zeta > eps ? 1 : (g.zeta < -eps ? -1 : 0);
            int i = 1, j = 1, k = 1;
            if (sx * sy * sz > 0) {
                // A3: make all positive
                i = sx < 0 ? -1 : 1;
                j = sy < 0 ? -1 : 1;
                k = sz < 0 ? -1 : 1;
            } else {
                // A4: make all non-positive
                i = sx > 0 ? -1 : 1;
                j = sy > 0 ? -1 : 1;
                k = sz > 0 ? -1 : 1;
                if (i * j * k == -1) {
                    if (sz == 0)
                        k = -1;
                    else if (sy == 0)
                        j = -1;
                    else if (sx == 0)
                        i = -1;
                }
            }
            if (i != 1 || j != 1 || k != 1) {
                apply(int_mat(i, 0, 0, 0, j, 0, 0, 0, k));
                g.xi *= j * k;
                g.eta *= i * k;
                g.zeta *= i * j;
            }
        }
        // A5
        if (std::abs(g.xi) > g.B + eps ||
            (std::abs(g.xi - g.B) < eps && 2.0 * g.eta < g.zeta - eps) ||
            (std::abs(g.xi + g.B) < eps && g.zeta < -eps)) {
            const int s = g.xi > 0 ? 1 : -1;
            apply(int_mat(1, 0, 0, 0, 1, 0, 0, -s, 1));
            g.C += g.B - s * g.xi;
            g.eta -= s * g.zeta;
            g.xi -= 2.0 * s * g.B;
            continue;
        }
        // A6
        if (std::abs(g.eta) > g.A + eps ||
            (std::abs(g.eta - g.A) < eps && 2.0 * g.xi < g.zeta - eps) ||
            (std::abs(g.eta + g.A) < eps && g.zeta < -eps)) {
            const int s = g.eta > 0 ? 1 : -1;
            apply(int_mat(1, 0, 0, 0, 1, 0, -s, 0, 1));
            g.C += g.A - s * g.eta;
            g.xi -= s * g.zeta;
            g.eta -= 2.0 * s * g.A;
            continue;
        }
        // A7
        if (std::abs(g.zeta) > g.A + eps ||
            (std::abs(g.zeta - g.A) < eps && 2.0 * g.xi < g.eta - eps) ||
            (std::abs(g.zeta + g.A) < eps && g.eta < -eps)) {
            const int s = g.zeta > 0 ? 1 : -1;
            apply(int_mat(1, 0, 0, -s, 1, 0, 0, 0, 1));
            g.B += g.A - s * g.zeta;
            g.xi -= s * g.eta;
            g.zeta -= 2.0 * s * g.A;
            continue;
        }
        // A8
        const double sum = g.xi + g.eta + g.zeta + g.A + g.B;
        if (sum < -eps || (std::abs(sum) < eps && 2.0 * (g.A + g.eta) + g.zeta > eps)) {
            apply(int_mat(1, 0, 0, 0, 1, 0, 1, 1, 1));
            g.C += sum;
            g.xi += 2.0 * g.B + g.zeta;
            g.eta += 2.0 * g.A + g.zeta;
            continue;
        }
        break;
    }
    return NiggliResult{g.to_params(), total, step};
}

inline LatticeParams niggli_reduce(const LatticeParams& p, int max_steps = 1000) {
    return niggli_reduce_full(p, max_steps).params;
}

// Checks the main Niggli conditions (ordering, Buerger bounds, consistent
// angle-type signs) on reduced parameters.
inline bool niggli_conditions_satisfied(const LatticeParams& p, double tol = 1e-5) {
    detail::GruberState g = detail::GruberState::from_params(p);
    const double eps = tol * std::pow(cell_volume(p), 2.0 / 3.0);
    if (g.A > g.B + eps || g.B > g.C + eps) return false;
    if (std::abs(g.xi) > g.B + eps) return false;
    if (std::abs(g.eta) > g.A + eps) return false;
    if (std::abs(g.zeta) > g.A + eps) return false;
    const bool pos = g.xi > eps && g.eta > eps && g.zeta > eps;
    const bool nonpos = g.xi < eps && g.eta < eps && g.zeta < eps;
    return pos || nonpos;
}

// Reduces the lattice and re-expresses fractional coordinates in the new
// basis, wrapped into [0, 1).
inline Crystal niggli_reduce_crystal(const Crystal& c, int max_steps = 1000) {
    const NiggliResult res = niggli_reduce_full(c.lattice, max_steps);
    // f' = T^{-T} f keeps Cartesian positions fixed modulo lattice vectors.
    const Eigen::Matrix3i inv = detail::unimodular_inverse(res.transform);
    const Eigen::Matrix3d coord_map = inv.cast<double>().transpose();
    Crystal out;
    out.lattice = res.params;
    out.sites.reserve(c.sites.size());
    for (const Site& s : c.sites) {
        Site t = s;
        t.frac = wrap_frac((coord_map * s.frac).eval());
        out.sites.push_back(t);
    }
    return out;
}

// Element counts divided by their GCD, sorted alphabetically by symbol.
inline std::vector<std::pair<int, int>> reduced_formula(const Crystal& c) {
    std::map<std::string, std::pair<int, int>> counts;  // symbol -> (Z, count)
    for (const Site& s : c.sites) {
        auto& entry = counts[element_symbol(s.element)];
        entry.first = s.element;
        entry.second += 1;
    }
    int g = 0;
    for (const auto& [sym, zc] : counts) g = std::gcd(g, zc.second);
    std::vector<std::pair<int, int>> out;
    out.reserve(counts.size());
    for (const auto& [sym, zc] : counts) out.emplace_back(zc.first, zc.second / g);
    return out;
}

inline std::string formula_to_string(const std::vector<std::pair<int, int>>& formula) {
    std::ostringstream os;
    for (const auto& [z, count] : formula) {
        os << element_symbol(z);
        if (count != 1) os << count;
    }
    return os.str();
}

// Order-, translation- and sub-tolerance-jitter-invariant structure hash.
// Built from the Niggli-reduced lattice (quantized at param_tol), the
// composition, and sorted quantized site coordinates relative to a canonical
// anchor site.
inline std::string canonical_fingerprint(const Crystal& c, double site_tol = 1e-2,
                                         double param_tol = 1e-2) {
    const Crystal red = niggli_reduce_crystal(c);

    std::ostringstream os;
    os << "lat:";
    for (double len : {red.lattice.a, red.lattice.b, red.lattice.c})
        os << std::llround(std::log(len) / param_tol) << ",";
    // Angle buckets are param_tol * 90 degrees wide.
    for (double ang : {red.lattice.alpha, red.lattice.beta, red.lattice.gamma})
        os << std::llround(ang / (param_tol * 90.0)) << ",";
    os << ";comp:" << formula_to_string(reduced_formula(red));

    const long long n_buckets = std::llround(1.0 / site_tol);
    auto quantize = [&](double v) { return std::llround(v / site_tol) % n_buckets; };

    // Anchor at each site of the smallest (element, oxidation) class and keep
    // the lexicographically smallest resulting description, which removes the
    // dependence on any common translation of all sites.
    std::pair<int, int> anchor_class{kMaxAtomicNumber + 1, 0};
    for (const Site& s : red.sites)
        anchor_class = std::min(anchor_class, {s.element, s.oxidation_state});

    using QSite = std::array<long long, 5>;
    std::vector<QSite> best;
    for (const Site& anchor : red.sites) {
        if (std::pair<int, int>{anchor.element, anchor.oxidation_state} != anchor_class)
            continue;
        std::vector<QSite> rep;
        rep.reserve(red.sites.size());
        for (const Site& s : red.sites) {
            const Eigen::Vector3d rel = wrap_frac((s.frac - anchor.frac).eval());
            rep.push_back({s.element, s.oxidation_state, quantize(rel.x()),
                           quantize(rel.y()), quantize(rel.z())});
        }
        std::sort(rep.begin(), rep.end());
        if (best.empty() || rep < best) best = std::move(rep);
    }
    os << ";sites:";
    for (const QSite& q : best) {
        for (long long v : q) os << v << ",";
        os << "|";
    }

    const std::uint64_t h = fnv1a64(os.str());
    std::ostringstream hex;
    hex << std::hex << h;
    return hex.str();
}

}  // namespace matseq
