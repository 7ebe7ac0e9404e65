#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <map>
#include <vector>

#include "matseq/tokenizer.hpp"
#include "test_util.hpp"

using namespace matseq;

namespace {

std::map<int, std::vector<int>> small_table() {
    return {{1, {-1, 1}},   {3, {1}},      {8, {-2}},      {9, {-1}},  {11, {1}},
            {12, {2}},      {13, {3}},     {26, {2, 3}},   {56, {2}}};
}

Vocabulary small_vocab() { return build_vocab(small_table()); }

Site site(int z, int oxi, double x, double y, double zz) {
    Site s;
    s.element = z;
    s.oxidation_state = oxi;
    s.frac = {x, y, zz};
    return s;
}

}  // namespace

TEST(Vocab, LayoutExample) {
    const Vocabulary v = build_vocab({{1, {-1, 0, 1}}});
    EXPECT_EQ(v.total_size, 4 + 1024 + 3);
    EXPECT_EQ(Vocabulary::kSos, 0);
    EXPECT_EQ(Vocabulary::kEos, 1);
    EXPECT_EQ(Vocabulary::kAtoms, 2);
    EXPECT_EQ(Vocabulary::kLattice, 3);
    EXPECT_EQ(v.bin_id(0), 4);
    EXPECT_EQ(v.bin_id(1023), 1027);
    EXPECT_EQ(v.elem_oxi_id(1, -1), 1028);
    EXPECT_EQ(v.elem_oxi_id(1, 0), 1029);
    EXPECT_EQ(v.elem_oxi_id(1, 1), 1030);
}

TEST(Vocab, ZeroStateAddedWhenMissing) {
    const Vocabulary v = build_vocab({{26, {2, 3}}});
    // (26,0) is injected, ids sorted by (Z, state).
    EXPECT_EQ(v.elem_oxi_id(26, 0), 1028);
    EXPECT_EQ(v.elem_oxi_id(26, 2), 1029);
    EXPECT_EQ(v.elem_oxi_id(26, 3), 1030);
    EXPECT_EQ(v.total_size, 1031);
}

TEST(Vocab, EmptyTableThrows) { EXPECT_THROW(build_vocab({}), EmptyTableError); }

TEST(Vocab, TokenNames) {
    const Vocabulary v = small_vocab();
    EXPECT_EQ(v.token_name(0), "[SOS]");
    EXPECT_EQ(v.token_name(1), "[EOS]");
    EXPECT_EQ(v.token_name(2), "[ATOMS]");
    EXPECT_EQ(v.token_name(3), "[LATTICE]");
    EXPECT_EQ(v.token_name(v.bin_id(7)), "[BIN_0007]");
    EXPECT_EQ(v.token_name(v.bin_id(1023)), "[BIN_1023]");
    EXPECT_EQ(v.token_name(v.elem_oxi_id(26, 3)), "[Fe|+3]");
    EXPECT_EQ(v.token_name(v.elem_oxi_id(8, -2)), "[O|-2]");
    EXPECT_EQ(v.token_name(v.elem_oxi_id(1, 0)), "[H|0]");
}

TEST(Vocab, DeterministicAndSorted) {
    const Vocabulary a = small_vocab();
    const Vocabulary b = small_vocab();
    EXPECT_EQ(a.elem_oxi_of_id, b.elem_oxi_of_id);
    EXPECT_EQ(a.hash(), b.hash());
    for (std::size_t i = 1; i < a.elem_oxi_of_id.size(); ++i)
        EXPECT_LT(a.elem_oxi_of_id[i - 1], a.elem_oxi_of_id[i]);
}

TEST(Vocab, SaveLoadRoundTrip) {
    const Vocabulary v = small_vocab();
    const std::string path =
        (std::filesystem::temp_directory_path() / "vocab_roundtrip.txt").string();
    v.save(path);
    const Vocabulary w = Vocabulary::load(path);
    EXPECT_EQ(w.total_size, v.total_size);
    EXPECT_EQ(w.elem_oxi_of_id, v.elem_oxi_of_id);
    EXPECT_EQ(w.hash(), v.hash());
    std::remove(path.c_str());
}

TEST(OrderSites, Examples) {
    const std::vector<Site> pair = {site(26, 3, 0.1, 0.1, 0.1), site(1, 1, 0.9, 0.9, 0.9)};
    auto low = order_sites(pair, {Ordering::LowFirst});
    EXPECT_EQ(low[0].element, 1);
    EXPECT_EQ(low[1].element, 26);
    auto high = order_sites(pair, {Ordering::HighFirst});
    EXPECT_EQ(high[0].element, 26);
    EXPECT_EQ(high[1].element, 1);

    const std::vector<Site> xy = {site(8, -2, 0.2, 0, 0), site(1, 1, 0.5, 0, 0)};
    auto xyz = order_sites(xy, {Ordering::XYZ});
    EXPECT_EQ(xyz[0].element, 8);
    EXPECT_EQ(xyz[1].element, 1);
}

TEST(OrderSites, DeterministicTotalOrder) {
    Rng rng(41);
    Crystal c = testutil::random_crystal(rng, 8);
    for (Ordering kind : {Ordering::LowFirst, Ordering::HighFirst, Ordering::XYZ}) {
        const auto sorted = order_sites(c.sites, {kind});
        std::vector<Site> shuffled = c.sites;
        rng.shuffle(shuffled);
        const auto sorted2 = order_sites(shuffled, {kind});
        ASSERT_EQ(sorted.size(), sorted2.size());
        for (std::size_t i = 0; i < sorted.size(); ++i) {
            EXPECT_EQ(sorted[i].element, sorted2[i].element);
            EXPECT_TRUE(sorted[i].frac.isApprox(sorted2[i].frac));
        }
    }
}

TEST(OrderSites, RandomSeededAndStable) {
    Rng rng(42);
    const Crystal c = testutil::random_crystal(rng, 8);
    const auto p1 = order_sites(c.sites, {Ordering::Random, 7});
    const auto p2 = order_sites(c.sites, {Ordering::Random, 7});
    ASSERT_EQ(p1.size(), p2.size());
    for (std::size_t i = 0; i < p1.size(); ++i) {
        EXPECT_EQ(p1[i].element, p2[i].element);
        EXPECT_TRUE(p1[i].frac.isApprox(p2[i].frac));
    }
    // Same multiset of elements.
    auto elems = [](const std::vector<Site>& v) {
        std::multiset<int> m;
        for (const Site& s : v) m.insert(s.element);
        return m;
    };
    EXPECT_EQ(elems(p1), elems(c.sites));
}

TEST(Quantize, FracExamples) {
    EXPECT_EQ(quantize_frac(0.0), 0);
    EXPECT_EQ(quantize_frac(0.5), 512);
    EXPECT_EQ(quantize_frac(0.9999), 1023);
    EXPECT_THROW(quantize_frac(-0.01), OutOfRangeError);
    EXPECT_THROW(quantize_frac(1.0), OutOfRangeError);
}

TEST(Quantize, DequantizeExamplesAndBound) {
    EXPECT_DOUBLE_EQ(dequantize_frac(0), 0.00048828125);
    EXPECT_DOUBLE_EQ(dequantize_frac(512), 0.50048828125);
    EXPECT_THROW(dequantize_frac(-1), OutOfRangeError);
    EXPECT_THROW(dequantize_frac(1024), OutOfRangeError);
    Rng rng(43);
    for (int i = 0; i < 10000; ++i) {
        const double x = rng.uniform();
        EXPECT_LE(std::abs(dequantize_frac(quantize_frac(x)) - x), 1.0 / 2048.0 + 1e-15);
    }
}

TEST(Quantize, LatticeParamExamples) {
    const LatticeRanges r;
    EXPECT_EQ(quantize_lattice_param("a", 2.0, r).bin, 0);
    EXPECT_FALSE(quantize_lattice_param("a", 2.0, r).clamped);
    EXPECT_EQ(quantize_lattice_param("a", 6.0, r).bin, 512);
    const QuantizedParam over = quantize_lattice_param("c", 25.0, r);
    EXPECT_EQ(over.bin, 1023);
    EXPECT_TRUE(over.clamped);
    const QuantizedParam under = quantize_lattice_param("b", 1.0, r);
    EXPECT_EQ(under.bin, 0);
    EXPECT_TRUE(under.clamped);
    // Range maximum maps to the top bin without counting as a clamp.
    const QuantizedParam top = quantize_lattice_param("a", 10.0, r);
    EXPECT_EQ(top.bin, 1023);
    EXPECT_FALSE(top.clamped);
    EXPECT_THROW(quantize_lattice_param("q", 1.0, r), ConfigError);
}

TEST(Encode, LengthLaw) {
    const Vocabulary v = small_vocab();
    Rng rng(44);
    for (int n = 1; n <= 20; ++n) {
        Crystal c;
        c.lattice = {4, 5, 6, 90, 90, 90};
        for (int i = 0; i < n; ++i)
            c.sites.push_back(site(26, 3, rng.uniform(), rng.uniform(), rng.uniform()));
        EXPECT_EQ(encode(c, v, {Ordering::LowFirst}).size(),
                  static_cast<std::size_t>(4 * n + 10));
    }
}

TEST(Encode, MinimalCrystalTokens) {
    const Vocabulary v = small_vocab();
    Crystal c;
    c.lattice = {2, 2, 2, 90, 90, 90};
    c.sites.push_back(site(26, 3, 0, 0, 0));
    const TokenSequence t = encode(c, v, {Ordering::LowFirst});
    const int b0 = v.bin_id(0);
    const int b512 = v.bin_id(512);  // 90 deg -> (90-60)/60 = 0.5
    const TokenSequence expected = {Vocabulary::kSos,     Vocabulary::kAtoms,
                                    v.elem_oxi_id(26, 3), b0,
                                    b0,                   b0,
                                    Vocabulary::kLattice, b0,
                                    b0,                   b0,
                                    b512,                 b512,
                                    b512,                 Vocabulary::kEos};
    EXPECT_EQ(t, expected);
}

TEST(Encode, ClampCounting) {
    const Vocabulary v = small_vocab();
    Crystal c;
    c.lattice = {3, 3, 25, 90, 90, 90};  // c above range max
    c.sites.push_back(site(26, 3, 0.1, 0.2, 0.3));
    int clamps = -1;
    encode(c, v, {Ordering::LowFirst}, {}, false, &clamps);
    EXPECT_EQ(clamps, 1);
}

TEST(Encode, UnknownPairThrows) {
    const Vocabulary v = small_vocab();
    Crystal c;
    c.lattice = {4, 4, 4, 90, 90, 90};
    c.sites.push_back(site(92, 4, 0.1, 0.2, 0.3));  // U not in table
    EXPECT_THROW(encode(c, v, {Ordering::LowFirst}), UnknownElementOxiError);
    c.sites[0] = site(26, 7, 0.1, 0.2, 0.3);  // Fe has no +7 token
    EXPECT_THROW(encode(c, v, {Ordering::LowFirst}), UnknownElementOxiError);
}

TEST(Encode, AppliesNiggliReduction) {
    const Vocabulary v = small_vocab();
    Crystal c;
    c.lattice = {4, 4, 4, 90, 90, 60};  // not Niggli-reduced
    c.sites.push_back(site(26, 3, 0.1, 0.2, 0.3));
    const TokenSequence t = encode(c, v, {Ordering::LowFirst});
    const Crystal out = std::get<Crystal>(decode(t, v));
    EXPECT_TRUE(niggli_conditions_satisfied(out.lattice, 1e-2));
}

TEST(RoundTrip, RandomCrystals) {
    const Vocabulary v = small_vocab();
    const LatticeRanges r;
    Rng rng(45);
    for (int iter = 0; iter < 300; ++iter) {
        const Crystal c = testutil::random_crystal(rng);
        const Crystal reduced = niggli_reduce_crystal(c);
        const std::vector<Site> ordered = order_sites(reduced.sites, {Ordering::LowFirst});

        const TokenSequence t = encode(c, v, {Ordering::LowFirst}, r);
        EXPECT_EQ(t.size(), 4 * c.sites.size() + 10);
        const DecodeResult res = decode(t, v, r);
        ASSERT_TRUE(std::holds_alternative<Crystal>(res));
        const Crystal& d = std::get<Crystal>(res);

        ASSERT_EQ(d.sites.size(), ordered.size());
        for (std::size_t i = 0; i < ordered.size(); ++i) {
            EXPECT_EQ(d.sites[i].element, ordered[i].element);
            EXPECT_EQ(d.sites[i].oxidation_state, ordered[i].oxidation_state);
            for (int dim = 0; dim < 3; ++dim)
                EXPECT_LE(std::abs(d.sites[i].frac[dim] - ordered[i].frac[dim]),
                          1.0 / 2048.0 + 1e-12);
        }
        const std::array<double, 6> orig = lattice_param_array(reduced.lattice);
        const std::array<double, 6> got = lattice_param_array(d.lattice);
        for (int i = 0; i < 6; ++i) {
            const auto [lo, hi] = r.bounds[static_cast<std::size_t>(i)];
            const double clamped = std::clamp(orig[static_cast<std::size_t>(i)], lo, hi);
            EXPECT_LE(std::abs(got[static_cast<std::size_t>(i)] - clamped),
                      (hi - lo) / 2048.0 + 1e-12);
        }
    }
}

TEST(RoundTrip, CoordsFirstVariant) {
    const Vocabulary v = small_vocab();
    Rng rng(46);
    for (int iter = 0; iter < 50; ++iter) {
        const Crystal c = testutil::random_crystal(rng);
        const TokenSequence t = encode(c, v, {Ordering::LowFirst}, {}, true);
        EXPECT_EQ(t.size(), 4 * c.sites.size() + 10);
        const DecodeResult res = decode(t, v, {}, true);
        ASSERT_TRUE(std::holds_alternative<Crystal>(res));
        EXPECT_EQ(std::get<Crystal>(res).sites.size(), c.sites.size());
        // The same tokens under the default grammar are invalid.
        EXPECT_TRUE(std::holds_alternative<GrammarError>(decode(t, v)));
    }
}

TEST(Decode, GrammarErrors) {
    const Vocabulary v = small_vocab();
    const int fe = v.elem_oxi_id(26, 3);
    const int b = v.bin_id(10);

    // Missing LATTICE section.
    const DecodeResult no_lat =
        decode({Vocabulary::kSos, Vocabulary::kAtoms, fe, b, b, b, Vocabulary::kEos}, v);
    ASSERT_TRUE(std::holds_alternative<GrammarError>(no_lat));
    EXPECT_EQ(std::get<GrammarError>(no_lat).position, 6u);

    // Element token where a bin is expected.
    const DecodeResult elem_as_bin =
        decode({Vocabulary::kSos, Vocabulary::kAtoms, fe, fe, b, b}, v);
    ASSERT_TRUE(std::holds_alternative<GrammarError>(elem_as_bin));
    EXPECT_EQ(std::get<GrammarError>(elem_as_bin).position, 3u);
    EXPECT_EQ(std::get<GrammarError>(elem_as_bin).expected, "coordinate bin");

    // N = 0.
    const DecodeResult zero_atoms =
        decode({Vocabulary::kSos, Vocabulary::kAtoms, Vocabulary::kLattice, b, b, b, b, b, b,
                Vocabulary::kEos},
               v);
    ASSERT_TRUE(std::holds_alternative<GrammarError>(zero_atoms));
    EXPECT_EQ(std::get<GrammarError>(zero_atoms).position, 2u);

    // Truncation reports at end-of-input.
    const DecodeResult trunc = decode({Vocabulary::kSos, Vocabulary::kAtoms, fe, b}, v);
    ASSERT_TRUE(std::holds_alternative<GrammarError>(trunc));
    EXPECT_EQ(std::get<GrammarError>(trunc).position, 4u);

    // Trailing token after EOS.
    Crystal c;
    c.lattice = {4, 4, 4, 90, 90, 90};
    c.sites.push_back(site(26, 3, 0.5, 0.5, 0.5));
    TokenSequence t = encode(c, v, {Ordering::LowFirst});
    t.push_back(b);
    const DecodeResult trailing = decode(t, v);
    ASSERT_TRUE(std::holds_alternative<GrammarError>(trailing));
    EXPECT_EQ(std::get<GrammarError>(trailing).position, t.size() - 1);

    // Empty and lone-SOS inputs.
    EXPECT_TRUE(std::holds_alternative<GrammarError>(decode({}, v)));
    EXPECT_TRUE(std::holds_alternative<GrammarError>(decode({Vocabulary::kSos}, v)));
}

TEST(Decode, FuzzNeverCrashes) {
    const Vocabulary v = small_vocab();
    Rng rng(47);
    int n_ok = 0;
    for (int iter = 0; iter < 20000; ++iter) {
        TokenSequence t(rng.below(40));
        for (std::size_t i = 0; i < t.size(); ++i)  // range includes out-of-vocab ids
            t[i] = static_cast<int>(rng.below(static_cast<std::uint64_t>(v.total_size + 5))) - 3;
        const DecodeResult res = decode(t, v);
        if (std::holds_alternative<Crystal>(res)) ++n_ok;
        else EXPECT_FALSE(std::get<GrammarError>(res).expected.empty());
    }
    // Random streams essentially never form valid sequences.
    EXPECT_LT(n_ok, 10);
}

TEST(Grammar, StateMachineTransitions) {
    GrammarState st;
    EXPECT_EQ(st.allowed(), class_bit(TokenClass::Sos));
    st.advance(TokenClass::Sos);
    EXPECT_EQ(st.allowed(), class_bit(TokenClass::Atoms));
    st.advance(TokenClass::Atoms);
    EXPECT_EQ(st.allowed(), class_bit(TokenClass::ElemOxi));  // N >= 1 forces an atom
    st.advance(TokenClass::ElemOxi);
    EXPECT_EQ(st.allowed(), class_bit(TokenClass::Bin));
    st.advance(TokenClass::Bin);
    st.advance(TokenClass::Bin);
    st.advance(TokenClass::Bin);
    EXPECT_EQ(st.allowed(), class_bit(TokenClass::ElemOxi) | class_bit(TokenClass::Lattice));
    st.advance(TokenClass::Lattice);
    for (int i = 0; i < 6; ++i) {
        EXPECT_EQ(st.allowed(), class_bit(TokenClass::Bin));
        st.advance(TokenClass::Bin);
    }
    EXPECT_EQ(st.allowed(), class_bit(TokenClass::Eos));
    st.advance(TokenClass::Eos);
    EXPECT_TRUE(st.complete());
    EXPECT_EQ(st.allowed(), 0u);
}

TEST(Grammar, AtomCapForcesLattice) {
    GrammarState st(false, 2);
    st.advance(TokenClass::Sos);
    st.advance(TokenClass::Atoms);
    for (int atom = 0; atom < 2; ++atom) {
        ASSERT_TRUE(st.accepts(TokenClass::ElemOxi));
        st.advance(TokenClass::ElemOxi);
        for (int i = 0; i < 3; ++i) st.advance(TokenClass::Bin);
    }
    EXPECT_EQ(st.allowed(), class_bit(TokenClass::Lattice));
}

TEST(OxidationAssignment, ChargeBalance) {
    const auto table = small_table();
    Crystal fe2o3;
    fe2o3.lattice = {5, 5, 5, 90, 90, 90};
    for (int i = 0; i < 2; ++i) fe2o3.sites.push_back(site(26, 0, 0.1 * i, 0, 0));
    for (int i = 0; i < 3; ++i) fe2o3.sites.push_back(site(8, 0, 0.1 * i, 0.5, 0));
    EXPECT_TRUE(assign_oxidation_states(fe2o3, table));
    for (const Site& s : fe2o3.sites)
        EXPECT_EQ(s.oxidation_state, s.element == 26 ? 3 : -2);
    EXPECT_EQ(net_charge(fe2o3), 0);

    Crystal feo;
    feo.lattice = {4, 4, 4, 90, 90, 90};
    feo.sites.push_back(site(26, 0, 0, 0, 0));
    feo.sites.push_back(site(8, 0, 0.5, 0.5, 0.5));
    EXPECT_TRUE(assign_oxidation_states(feo, table));
    EXPECT_EQ(feo.sites[0].oxidation_state, 2);

    // Two neutral combinations exist; earlier table positions win the tie.
    Crystal tie;
    tie.lattice = {4, 4, 4, 90, 90, 90};
    tie.sites.push_back(site(1, 0, 0, 0, 0));
    tie.sites.push_back(site(9, 0, 0.5, 0.5, 0.5));
    EXPECT_TRUE(assign_oxidation_states(tie, {{1, {1, 2}}, {9, {-1, -2}}}));
    EXPECT_EQ(tie.sites[0].oxidation_state, 1);
    EXPECT_EQ(tie.sites[1].oxidation_state, -1);

    Crystal lone_h;
    lone_h.lattice = {4, 4, 4, 90, 90, 90};
    lone_h.sites.push_back(site(3, 0, 0, 0, 0));  // Li has only +1: cannot neutralize
    EXPECT_FALSE(assign_oxidation_states(lone_h, table));
    EXPECT_EQ(lone_h.sites[0].oxidation_state, 0);
}
