#include "matseq/evaluator.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "matseq/rng.hpp"
#include "test_util.hpp"

using namespace matseq;

namespace {

const ElementTables& tables() {
    static const ElementTables t =
        load_element_tables(std::string(MATSEQ_SOURCE_DIR) + "/data/elements.csv");
    return t;
}

// Cubic cell holding the given sites, scaled so the computed density comes out
// at `target_density` (inverting mass / volume by hand).
Crystal crystal_with_density(const std::vector<int>& elements, double target_density) {
    double mass_u = 0;
    for (int z : elements) mass_u += tables().masses().at(z);
    const double volume = mass_u * kAmuToGram / (target_density * 1e-24);  // Å³
    Crystal c;
    c.lattice = {std::cbrt(volume), std::cbrt(volume), std::cbrt(volume), 90, 90, 90};
    double offset = 0.0;
    for (int z : elements) {
        Site s;
        s.element = z;
        s.frac = Eigen::Vector3d(offset, offset, offset);
        c.sites.push_back(s);
        offset += 1.0 / static_cast<double>(elements.size() + 1);
    }
    return c;
}

Crystal simple_crystal(double a, int element) {
    Crystal c;
    c.lattice = {a, a, a, 90, 90, 90};
    Site s;
    s.element = element;
    c.sites.push_back(s);
    return c;
}

CrystalRecord record_with_targets(Crystal c, const std::map<std::string, double>& scalars,
                                  const std::string& formula = "") {
    CrystalRecord rec;
    rec.crystal = std::move(c);
    for (const auto& [k, v] : scalars) rec.extra["generation"]["targets"][k] = v;
    if (!formula.empty()) rec.extra["generation"]["targets"]["formula"] = formula;
    return rec;
}

// --- Uniqueness / novelty -----------------------------------------------------------

TEST(Uniqueness, IdenticalCrystalsScoreOneOverN) {
    std::vector<Crystal> cs(5, simple_crystal(4.0, 26));
    EXPECT_DOUBLE_EQ(uniqueness(cs), 1.0 / 5.0);
}

TEST(Uniqueness, DistinctCrystalsScoreOne) {
    std::vector<Crystal> cs;
    for (int i = 0; i < 4; ++i) cs.push_back(simple_crystal(3.0 + i, 26));
    EXPECT_DOUBLE_EQ(uniqueness(cs), 1.0);
}

TEST(Uniqueness, SiteOrderDoesNotSplitFingerprints) {
    Crystal a;
    a.lattice = {4, 4, 4, 90, 90, 90};
    Site s1;
    s1.element = 26;
    s1.frac = Eigen::Vector3d(0, 0, 0);
    Site s2;
    s2.element = 8;
    s2.frac = Eigen::Vector3d(0.5, 0.5, 0.5);
    a.sites = {s1, s2};
    Crystal b = a;
    std::swap(b.sites[0], b.sites[1]);
    EXPECT_DOUBLE_EQ(uniqueness({a, b}), 0.5);
}

TEST(Uniqueness, EmptyInputThrows) {
    EXPECT_THROW(uniqueness({}), TooFewSamplesError);
}

TEST(Novelty, DisjointFromTrainingScoresOne) {
    std::vector<Crystal> cs{simple_crystal(4.0, 26), simple_crystal(5.0, 26)};
    std::set<std::string> train{canonical_fingerprint(simple_crystal(7.0, 8))};
    EXPECT_DOUBLE_EQ(novelty(cs, train), 1.0);
}

TEST(Novelty, AllSeenInTrainingScoresZero) {
    std::vector<Crystal> cs{simple_crystal(4.0, 26), simple_crystal(5.0, 26)};
    std::set<std::string> train;
    for (const auto& c : cs) train.insert(canonical_fingerprint(c));
    EXPECT_DOUBLE_EQ(novelty(cs, train), 0.0);
}

TEST(Novelty, MixedSetCountsOnlyUnseen) {
    std::vector<Crystal> cs{simple_crystal(4.0, 26), simple_crystal(5.0, 26),
                            simple_crystal(6.0, 26), simple_crystal(7.0, 26)};
    std::set<std::string> train{canonical_fingerprint(cs[0]), canonical_fingerprint(cs[1])};
    EXPECT_DOUBLE_EQ(novelty(cs, train), 0.5);
}

TEST(Novelty, EmptyTrainingSetScoresOne) {
    std::vector<Crystal> cs{simple_crystal(4.0, 26)};
    EXPECT_DOUBLE_EQ(novelty(cs, {}), 1.0);
}

// --- Summary statistics ---------------------------------------------------------------

TEST(Adherence, SummaryStatisticsMatchHandComputedValues) {
    // {1,2,3,4} against target 2: mean 2.5, median 2.5, mae (1+0+1+2)/4,
    // interpolated quartiles 1.75 and 3.25.
    auto s = detail::summarize_against_target(2.0, {4, 1, 3, 2});
    EXPECT_EQ(s.n, 4);
    EXPECT_DOUBLE_EQ(s.mean, 2.5);
    EXPECT_DOUBLE_EQ(s.median, 2.5);
    EXPECT_DOUBLE_EQ(s.mae, 1.0);
    EXPECT_DOUBLE_EQ(s.q25, 1.75);
    EXPECT_DOUBLE_EQ(s.q75, 3.25);
}

TEST(Adherence, OddCountMedianIsMiddleValue) {
    auto s = detail::summarize_against_target(0.0, {5, 1, 3});
    EXPECT_DOUBLE_EQ(s.median, 3.0);
    EXPECT_DOUBLE_EQ(s.q25, 2.0);
    EXPECT_DOUBLE_EQ(s.q75, 4.0);
}

TEST(Adherence, DensityGroupsByTargetAndRecomputesDensities) {
    std::vector<Crystal> cs;
    std::vector<double> targets;
    const std::vector<double> low{1.9, 2.0, 2.4};
    const std::vector<double> high{5.8, 6.1, 6.3};
    for (double d : low) {
        cs.push_back(crystal_with_density({26}, d));
        targets.push_back(2.0);
    }
    for (double d : high) {
        cs.push_back(crystal_with_density({26, 8}, d));
        targets.push_back(6.0);
    }
    auto rows = density_adherence(cs, targets, tables().masses());
    ASSERT_EQ(rows.size(), 2u);
    EXPECT_DOUBLE_EQ(rows[0].target, 2.0);
    EXPECT_EQ(rows[0].n, 3);
    EXPECT_NEAR(rows[0].mean, (1.9 + 2.0 + 2.4) / 3.0, 1e-9);
    EXPECT_NEAR(rows[0].median, 2.0, 1e-9);
    EXPECT_NEAR(rows[0].mae, (0.1 + 0.0 + 0.4) / 3.0, 1e-9);
    EXPECT_NEAR(rows[0].q25, 1.95, 1e-9);
    EXPECT_NEAR(rows[0].q75, 2.2, 1e-9);
    EXPECT_DOUBLE_EQ(rows[1].target, 6.0);
    EXPECT_NEAR(rows[1].median, 6.1, 1e-9);
    EXPECT_NEAR(rows[1].mae, (0.2 + 0.1 + 0.3) / 3.0, 1e-9);
}

TEST(Adherence, MismatchedLengthsThrow) {
    EXPECT_THROW(density_adherence({simple_crystal(4, 26)}, {2.0, 3.0}, tables().masses()),
                 ConfigError);
}

// --- Formula match ---------------------------------------------------------------------

Crystal crystal_with_composition(const std::vector<std::pair<int, int>>& comp) {
    Crystal c;
    c.lattice = {6, 6, 6, 90, 90, 90};
    int k = 0;
    for (const auto& [z, count] : comp)
        for (int i = 0; i < count; ++i) {
            Site s;
            s.element = z;
            s.frac = Eigen::Vector3d(0.1 * k, 0.05 * k, 0.02 * k);
            c.sites.push_back(s);
            ++k;
        }
    return c;
}

TEST(FormulaMatch, ExactAndScaledCompositionsMatch) {
    // Fe2O3 and Fe4O6 both reduce to Fe2O3.
    std::vector<Crystal> cs{crystal_with_composition({{26, 2}, {8, 3}}),
                            crystal_with_composition({{26, 4}, {8, 6}})};
    EXPECT_DOUBLE_EQ(formula_match_rate(cs, "Fe2O3"), 1.0);
}

TEST(FormulaMatch, TargetStringNormalizesLikeCrystals) {
    std::vector<Crystal> cs{crystal_with_composition({{26, 2}, {8, 3}})};
    EXPECT_DOUBLE_EQ(formula_match_rate(cs, "Fe4O6"), 1.0);  // scaled target
    EXPECT_DOUBLE_EQ(formula_match_rate(cs, "O3Fe2"), 1.0);  // element order
    EXPECT_DOUBLE_EQ(formula_match_rate(cs, "FeO"), 0.0);
}

TEST(FormulaMatch, MixedSetReportsFraction) {
    std::vector<Crystal> cs{crystal_with_composition({{26, 1}, {8, 1}}),
                            crystal_with_composition({{26, 2}, {8, 3}}),
                            crystal_with_composition({{26, 3}, {8, 3}}),
                            crystal_with_composition({{12, 1}, {8, 1}})};
    // FeO, Fe2O3, Fe3O3 -> FeO, MgO: two of four reduce to FeO.
    EXPECT_DOUBLE_EQ(formula_match_rate(cs, "FeO"), 0.5);
}

// --- HHI ---------------------------------------------------------------------------------

TEST(Hhi, AtomFractionMeanAndMaxVariants) {
    std::map<int, double> hhi{{26, 500.0}, {8, 800.0}};
    Crystal c = crystal_with_composition({{26, 1}, {8, 1}});
    EXPECT_DOUBLE_EQ(hhi_of_crystal(c, hhi), 650.0);
    EXPECT_DOUBLE_EQ(hhi_of_crystal(c, hhi, /*use_max=*/true), 800.0);
}

TEST(Hhi, DuplicatedCellKeepsAtomFractions) {
    std::map<int, double> hhi{{26, 500.0}, {8, 800.0}};
    Crystal one = crystal_with_composition({{26, 1}, {8, 2}});
    Crystal two = crystal_with_composition({{26, 2}, {8, 4}});
    EXPECT_DOUBLE_EQ(hhi_of_crystal(one, hhi), hhi_of_crystal(two, hhi));
    EXPECT_DOUBLE_EQ(hhi_of_crystal(one, hhi), (500.0 + 2 * 800.0) / 3.0);
}

TEST(Hhi, ScarceElementDominatesMixedComposition) {
    // Fe is a low-risk commodity; Gd sits near the top of the scale.
    const auto& hhi = tables().hhi_table();
    Crystal fe = crystal_with_composition({{26, 2}, {8, 3}});
    Crystal gd = crystal_with_composition({{64, 2}, {8, 3}});
    EXPECT_GT(hhi_of_crystal(gd, hhi), hhi_of_crystal(fe, hhi));
}

// --- Bimodality -------------------------------------------------------------------------

TEST(Bimodality, TwoPointMassMarksBimodal) {
    // Alternating ±1: skew 0, kurtosis 1 -> coefficient (0+1)/1 = 1 > 5/9.
    std::vector<double> values;
    for (int i = 0; i < 24; ++i) values.push_back(i % 2 == 0 ? -1.0 : 1.0);
    auto s = bimodality_summary(values, 4);
    EXPECT_EQ(s.n, 24);
    EXPECT_NEAR(s.coefficient, 1.0, 1e-12);
    EXPECT_TRUE(s.bimodal);
    EXPECT_FALSE(s.degenerate);
}

TEST(Bimodality, GaussianSampleMarksUnimodal) {
    // Normal: skew 0, kurtosis 3 -> coefficient near 1/3 < 5/9.
    Rng rng(42);
    std::vector<double> values;
    for (int i = 0; i < 4000; ++i) values.push_back(rng.normal(3.0, 0.7));
    auto s = bimodality_summary(values);
    EXPECT_LT(s.coefficient, kBimodalityThreshold);
    EXPECT_FALSE(s.bimodal);
}

TEST(Bimodality, SeparatedMixtureMarksBimodal) {
    Rng rng(7);
    std::vector<double> values;
    for (int i = 0; i < 2000; ++i) values.push_back(rng.normal(0.0, 0.5));
    for (int i = 0; i < 2000; ++i) values.push_back(rng.normal(10.0, 0.5));
    auto s = bimodality_summary(values);
    EXPECT_GT(s.coefficient, kBimodalityThreshold);
    EXPECT_TRUE(s.bimodal);
}

TEST(Bimodality, ConstantInputIsDegenerateNotBimodal) {
    std::vector<double> values(12, 3.25);
    auto s = bimodality_summary(values, 4);
    EXPECT_TRUE(s.degenerate);
    EXPECT_FALSE(s.bimodal);
    EXPECT_DOUBLE_EQ(s.coefficient, 0.0);
    // Degenerate histogram still has well-formed edges around the point.
    ASSERT_EQ(s.bin_edges.size(), 5u);
    EXPECT_LT(s.bin_edges.front(), 3.25);
    EXPECT_GT(s.bin_edges.back(), 3.25);
    int total = 0;
    for (int c : s.counts) total += c;
    EXPECT_EQ(total, 12);
}

TEST(Bimodality, FewerThanTenSamplesThrows) {
    std::vector<double> values(9, 1.0);
    EXPECT_THROW(bimodality_summary(values), TooFewSamplesError);
}

TEST(Bimodality, HistogramBinsCoverRangeEvenly) {
    std::vector<double> values;
    for (int i = 0; i < 20; ++i) values.push_back(static_cast<double>(i));
    auto s = bimodality_summary(values, 4);
    ASSERT_EQ(s.bin_edges.size(), 5u);
    EXPECT_DOUBLE_EQ(s.bin_edges.front(), 0.0);
    EXPECT_DOUBLE_EQ(s.bin_edges.back(), 19.0);
    ASSERT_EQ(s.counts.size(), 4u);
    for (int c : s.counts) EXPECT_EQ(c, 5);
}

// --- Report assembly -------------------------------------------------------------------

TEST(EvalReport, EmptyInputLeavesMetricsAbsent) {
    auto rep = build_eval_report({}, {}, tables());
    EXPECT_EQ(rep.n_total, 0);
    EXPECT_EQ(rep.n_grammar_valid, 0);
    EXPECT_EQ(rep.n_charge_neutral, 0);
    EXPECT_FALSE(rep.frac_unique.has_value());
    EXPECT_FALSE(rep.frac_novel.has_value());
    EXPECT_FALSE(rep.formula_match_rate.has_value());
    EXPECT_FALSE(rep.mean_hhi.has_value());
    EXPECT_FALSE(rep.hhi_bimodality.has_value());
    EXPECT_TRUE(rep.adherence.empty());
}

TEST(EvalReport, CountsChargeNeutralAndTotals) {
    Crystal neutral = crystal_with_composition({{26, 1}, {8, 1}});
    neutral.sites[0].oxidation_state = 2;
    neutral.sites[1].oxidation_state = -2;
    Crystal charged = crystal_with_composition({{26, 1}, {8, 1}});
    charged.sites[0].oxidation_state = 3;
    charged.sites[1].oxidation_state = -2;
    std::vector<CrystalRecord> recs{record_with_targets(neutral, {}),
                                    record_with_targets(charged, {})};
    EvalOptions opts;
    opts.n_total_attempted = 10;  // 8 raw samples failed to decode
    auto rep = build_eval_report(recs, {}, tables(), opts);
    EXPECT_EQ(rep.n_total, 10);
    EXPECT_EQ(rep.n_grammar_valid, 2);
    EXPECT_EQ(rep.n_charge_neutral, 1);
    ASSERT_TRUE(rep.frac_novel.has_value());
    EXPECT_DOUBLE_EQ(*rep.frac_novel, 1.0);
}

TEST(EvalReport, AttemptCountBelowRecordCountThrows) {
    std::vector<CrystalRecord> recs{record_with_targets(simple_crystal(4, 26), {})};
    EvalOptions opts;
    opts.n_total_attempted = 0;
    EXPECT_THROW(build_eval_report(recs, {}, tables(), opts), ConfigError);
}

TEST(EvalReport, DensityTargetsGroupIntoAdherenceRows) {
    std::vector<CrystalRecord> recs;
    for (double d : {1.9, 2.1}) recs.push_back(
        record_with_targets(crystal_with_density({26}, d), {{"density", 2.0}}));
    for (double d : {5.9, 6.2}) recs.push_back(
        record_with_targets(crystal_with_density({26, 8}, d), {{"density", 6.0}}));
    recs.push_back(record_with_targets(simple_crystal(4, 26), {}));  // no target
    auto rep = build_eval_report(recs, {}, tables());
    ASSERT_EQ(rep.adherence.count("density"), 1u);
    const auto& rows = rep.adherence.at("density");
    ASSERT_EQ(rows.size(), 2u);
    EXPECT_DOUBLE_EQ(rows[0].target, 2.0);
    EXPECT_EQ(rows[0].n, 2);
    EXPECT_NEAR(rows[0].mean, 2.0, 1e-9);
    EXPECT_DOUBLE_EQ(rows[1].target, 6.0);
    EXPECT_NEAR(rows[1].median, 6.05, 1e-9);
}

TEST(EvalReport, HhiTargetsAreScaledLikeConditions) {
    Crystal c = crystal_with_composition({{26, 1}});
    const double raw = hhi_of_crystal(c, tables().hhi_table());
    std::vector<CrystalRecord> recs{record_with_targets(c, {{"hhi", raw}})};
    auto rep = build_eval_report(recs, {}, tables());
    ASSERT_EQ(rep.adherence.count("hhi"), 1u);
    const auto& row = rep.adherence.at("hhi")[0];
    EXPECT_NEAR(row.target, raw / 1000.0, 1e-12);  // both sides on model scale
    EXPECT_NEAR(row.mean, raw / 1000.0, 1e-12);
    EXPECT_NEAR(row.mae, 0.0, 1e-12);
    ASSERT_TRUE(rep.mean_hhi.has_value());
    EXPECT_NEAR(*rep.mean_hhi, raw, 1e-12);  // headline mean stays on raw scale
}

TEST(EvalReport, FormulaTargetsScoreThroughNormalizedMatch) {
    std::vector<CrystalRecord> recs{
        record_with_targets(crystal_with_composition({{26, 2}, {8, 3}}), {}, "Fe2O3"),
        record_with_targets(crystal_with_composition({{26, 1}, {8, 1}}), {}, "Fe2O3"),
        record_with_targets(crystal_with_composition({{12, 1}, {8, 1}}), {}, "MgO")};
    auto rep = build_eval_report(recs, {}, tables());
    ASSERT_TRUE(rep.formula_match_rate.has_value());
    EXPECT_NEAR(*rep.formula_match_rate, 2.0 / 3.0, 1e-12);
}

TEST(EvalReport, NoveltyUsesProvidedFingerprints) {
    Crystal seen = simple_crystal(4.0, 26);
    Crystal unseen = simple_crystal(5.0, 26);
    std::vector<CrystalRecord> recs{record_with_targets(seen, {}),
                                    record_with_targets(unseen, {})};
    std::set<std::string> train{canonical_fingerprint(seen)};
    auto rep = build_eval_report(recs, train, tables());
    ASSERT_TRUE(rep.frac_novel.has_value());
    EXPECT_DOUBLE_EQ(*rep.frac_novel, 0.5);
    ASSERT_TRUE(rep.frac_unique.has_value());
    EXPECT_DOUBLE_EQ(*rep.frac_unique, 1.0);
}

TEST(EvalReport, BimodalityAppearsOnceTenRecordsExist) {
    std::vector<CrystalRecord> recs;
    for (int i = 0; i < 6; ++i)
        recs.push_back(record_with_targets(crystal_with_composition({{26, 1}}), {}));
    for (int i = 0; i < 6; ++i)
        recs.push_back(record_with_targets(crystal_with_composition({{64, 1}}), {}));
    auto rep = build_eval_report(recs, {}, tables());
    ASSERT_TRUE(rep.hhi_bimodality.has_value());
    EXPECT_TRUE(rep.hhi_bimodality->bimodal);  // two far-apart HHI point masses
}

// --- Serialization ----------------------------------------------------------------------

TEST(EvalReportOutput, JsonUsesNullForAbsentMetrics) {
    auto rep = build_eval_report({}, {}, tables());
    auto j = eval_report_to_json(rep);
    EXPECT_TRUE(j.at("frac_unique").is_null());
    EXPECT_TRUE(j.at("hhi_bimodality").is_null());
    EXPECT_EQ(j.at("n_total").get<int>(), 0);
    EXPECT_TRUE(j.at("adherence").is_object());
    EXPECT_TRUE(j.at("adherence").empty());
}

TEST(EvalReportOutput, JsonRoundsTripPopulatedReport) {
    std::vector<CrystalRecord> recs;
    for (double d : {1.9, 2.1, 2.0})
        recs.push_back(record_with_targets(crystal_with_density({26}, d), {{"density", 2.0}}));
    auto rep = build_eval_report(recs, {}, tables());
    auto j = eval_report_to_json(rep);
    EXPECT_DOUBLE_EQ(j.at("frac_unique").get<double>(), 1.0);
    ASSERT_EQ(j.at("adherence").at("density").size(), 1u);
    EXPECT_DOUBLE_EQ(j.at("adherence").at("density")[0].at("target").get<double>(), 2.0);
    EXPECT_EQ(j.at("adherence").at("density")[0].at("n").get<int>(), 3);
}

TEST(EvalReportOutput, CsvHasHeaderAbsentMarkersAndHistogramPairs) {
    auto empty_rep = build_eval_report({}, {}, tables());
    std::string csv = eval_report_to_csv(empty_rep);
    EXPECT_EQ(csv.rfind("metric,value\n", 0), 0u);
    EXPECT_NE(csv.find("frac_unique,absent"), std::string::npos);
    EXPECT_NE(csv.find("hhi_bimodality.coefficient,absent"), std::string::npos);

    std::vector<CrystalRecord> recs;
    for (int i = 0; i < 6; ++i)
        recs.push_back(record_with_targets(crystal_with_composition({{26, 1}}), {}));
    for (int i = 0; i < 6; ++i)
        recs.push_back(record_with_targets(crystal_with_composition({{64, 1}}), {}));
    EvalOptions opts;
    opts.histogram_bins = 3;
    auto rep = build_eval_report(recs, {}, tables(), opts);
    csv = eval_report_to_csv(rep);
    EXPECT_NE(csv.find("n_grammar_valid,12"), std::string::npos);
    EXPECT_NE(csv.find("hhi_hist[0].bin_edge,"), std::string::npos);
    EXPECT_NE(csv.find("hhi_hist[0].count,6"), std::string::npos);
    EXPECT_NE(csv.find("hhi_hist[2].count,6"), std::string::npos);
    EXPECT_NE(csv.find("hhi_hist[3].bin_edge,"), std::string::npos);  // trailing edge
    EXPECT_EQ(csv.find("hhi_hist[3].count"), std::string::npos);
}

TEST(EvalReportOutput, RecordTargetsParserHandlesMissingAndMixedFields) {
    CrystalRecord bare;
    auto t0 = record_targets(bare);
    EXPECT_TRUE(t0.scalars.empty());
    EXPECT_FALSE(t0.formula.has_value());

    CrystalRecord rec;
    rec.extra["generation"]["targets"]["density"] = 5.0;
    rec.extra["generation"]["targets"]["formula"] = "Fe2O3";
    rec.extra["generation"]["seed"] = 7;  // sibling fields are ignored
    auto t1 = record_targets(rec);
    EXPECT_DOUBLE_EQ(t1.scalars.at("density"), 5.0);
    ASSERT_TRUE(t1.formula.has_value());
    EXPECT_EQ(*t1.formula, "Fe2O3");
}

}  // namespace
