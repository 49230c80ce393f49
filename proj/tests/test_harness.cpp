#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "chemo/harness.hpp"

using namespace chemo;

#ifndef CHEMO_CONFIG_DIR
#error "CHEMO_CONFIG_DIR must point at the shipped configs"
#endif

namespace {

ExperimentConfig small_config(int tau = 0) {
    std::ostringstream s;
    s << "solver.tau = " << tau << "\n"
      << "domain.nodes_x = 33\nsolver.dt = 2e-3\nsolver.t_final = 0.2\nident.trials = 4\n";
    return ExperimentConfig::from_config(Config::parse(s.str()));
}

}  // namespace

TEST(Config, ParsesCommentsAndWhitespace) {
    const Config c = Config::parse("# header\n  solver.dt = 1e-3   # trailing\n\ntruth.chi=0.2\n");
    EXPECT_EQ(c.values().size(), 2u);
    EXPECT_EQ(c.values().at("solver.dt"), "1e-3");
    EXPECT_EQ(c.values().at("truth.chi"), "0.2");
}

TEST(Config, ReportsLineNumbers) {
    try {
        (void)Config::parse("a.b = 1\n\nnot a pair\n");
        FAIL() << "expected a parse error";
    } catch (const InvalidArgument& e) {
        EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos);
    }
    EXPECT_THROW(Config::parse("a = 1\na = 2\n"), InvalidArgument);
    EXPECT_THROW(Config::parse("Bad Key = 1\n"), InvalidArgument);
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
    EXPECT_THROW(ExperimentConfig::from_config(Config::parse("solver.dtt = 1\n")), InvalidArgument);
    EXPECT_THROW(ExperimentConfig::from_config(Config::parse("solver.dt = fast\n")), InvalidArgument);
    EXPECT_THROW(ExperimentConfig::from_config(Config::parse("solver.tau = 2\n")), InvalidArgument);
    EXPECT_THROW(ExperimentConfig::from_config(Config::parse("pipeline.r_modes = 1-0\n")), InvalidArgument);
    EXPECT_THROW(ExperimentConfig::from_config(Config::parse("convergence.levels = 17,33\n")), InvalidArgument);
    EXPECT_THROW(ExperimentConfig::from_config(Config::parse("solver.t_final = 0.10025\n")), InvalidArgument);
}

TEST(Config, RoundTripIsIdentityOnShippedConfigs) {
    std::size_t seen = 0;
    for (const auto& entry : std::filesystem::directory_iterator(CHEMO_CONFIG_DIR)) {
        if (entry.path().extension() != ".cfg") continue;
        ++seen;
        const ExperimentConfig e = ExperimentConfig::load(entry.path().string());
        const Config once = e.to_config();
        const Config twice = ExperimentConfig::from_config(Config::parse(once.serialize())).to_config();
        EXPECT_EQ(once, twice) << entry.path();
        EXPECT_EQ(once.serialize(), twice.serialize()) << entry.path();
        // every key the user wrote survives with the same meaning
        const Config raw = Config::load(entry.path().string());
        for (const auto& [k, v] : raw.values()) {
            ASSERT_TRUE(once.has(k)) << k;
        }
    }
    EXPECT_GE(seen, 5u);
}

TEST(ExperimentConfig, BuildsModulatedTruthAndKinetics) {
    const ExperimentConfig e = ExperimentConfig::from_config(Config::parse(
        "domain.dim = 2\ndomain.nodes_x = 17\ndomain.nodes_y = 9\ntruth.alpha_mod = 0.3\n"
        "kinetics.g02 = 0.25\nkinetics.g02_profile = cos_linear\nsolver.dt = 1e-2\nsolver.t_final = 0.1\n"));
    const ParameterSet p = e.parameters();
    ASSERT_FALSE(p.alpha.is_constant());
    EXPECT_NEAR(p.alpha.field()[0], 1.3, 1e-14);
    const KineticsSpec k = e.kinetics();
    const Field g02 = k.g(0, 2).field();
    const Domain d = e.domain();
    EXPECT_NEAR(g02[d.index(0, d.nodes(1) - 1)], 0.5, 1e-14);  // 0.25 * cos(0) * (1 + 1)
    EXPECT_NEAR(g02[d.index(d.nodes(0) - 1, 0)], -0.25, 1e-14);
    EXPECT_EQ(k.g(1, 0).field().raw(), p.alpha.field().raw());
}

TEST(MeasurementDistance, IsSymmetricZeroOnSelfAndChecksGrids) {
    const ExperimentConfig e = small_config();
    const MeasurementRecord a = simulate_measurement(e, e.parameters(), e.solver);
    ParameterSet q = e.parameters();
    q.chi = 0.3;
    const MeasurementRecord b = simulate_measurement(e, q, e.solver);
    EXPECT_EQ(measurement_distance(a, a), 0.0);
    EXPECT_EQ(measurement_distance(a, b), measurement_distance(b, a));
    EXPECT_GT(measurement_distance(a, b), 0.0);

    ExperimentConfig other = e;
    other.nodes[0] = 17;
    const MeasurementRecord c = simulate_measurement(other, other.parameters(), other.solver);
    EXPECT_THROW(measurement_distance(a, c), InvalidArgument);
}

TEST(MeasurementDistance, IsTheMaxOfTraceAndFinalParts) {
    const Domain d = Domain::line(1.0, 9);
    MeasurementRecord a;
    a.domain = d;
    a.boundary = d.boundary_nodes();
    a.times = {0.0, 1.0};
    a.boundary_u = a.boundary_v = a.boundary_w = {{0.0, 0.0}, {0.0, 0.0}};
    a.final_u = Field(d, 1.0);
    a.final_v = a.final_w = Field(d, 0.0);
    MeasurementRecord b = a;
    b.boundary_w[1][1] = 0.25;
    EXPECT_DOUBLE_EQ(measurement_distance(a, b), 0.25);
    b.final_u = Field(d, 2.0);
    // relative L2 with symmetric normalisation: |1| / sqrt((1 + 4)/2)
    EXPECT_NEAR(measurement_distance(a, b), 1.0 / std::sqrt(2.5), 1e-14);
}

TEST(ParameterDistance, IsTheLargestRelativeGap) {
    ParameterSet a, b;
    a.r = 0.5;
    b.r = 0.55;
    b.mu = 0.98;
    EXPECT_NEAR(parameter_distance(a, b), 0.1, 1e-12);
    EXPECT_EQ(parameter_distance(a, a), 0.0);
}

TEST(Identifiability, EqualParametersAreNeverAViolation) {
    const ExperimentConfig e = small_config();
    for (double tol : {0.0, 1e-12, 1.0}) {
        const IdentReport r = identifiability_experiment(e.parameters(), e.parameters(), e, tol);
        EXPECT_EQ(r.verdict, "consistent");
        EXPECT_EQ(r.measurement_distance, 0.0);
    }
}

TEST(Identifiability, VerdictRule) {
    EXPECT_EQ(make_ident_report(0.1, 1e-6, 1e-3, 1e-3).verdict, "violation");
    EXPECT_EQ(make_ident_report(0.1, 1e-2, 1e-3, 1e-3).verdict, "consistent");
    EXPECT_EQ(make_ident_report(1e-4, 1e-6, 1e-3, 1e-3).verdict, "consistent");
}

TEST(Identifiability, MatchToleranceFollowsSelfConvergence) {
    const ExperimentConfig e = small_config();
    const double s = self_convergence_distance(e);
    EXPECT_GT(s, 0.0);
    EXPECT_DOUBLE_EQ(default_match_tol(e), 10.0 * s);
    ExperimentConfig fixed = e;
    fixed.ident_match_tol = 0.123;
    EXPECT_EQ(default_match_tol(fixed), 0.123);
}

TEST(Identifiability, SweepIsSeededAndRespectsTheGap) {
    const ExperimentConfig e = small_config();
    const auto a = random_sweep(e, 1e-3), b = random_sweep(e, 1e-3);
    ASSERT_EQ(a.size(), 4u);
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_GE(a[i].report.parameter_distance, e.ident_min_gap);
        EXPECT_EQ(a[i].report.measurement_distance, b[i].report.measurement_distance);
    }
    ExperimentConfig other = e;
    other.ident_seed += 1;
    EXPECT_NE(random_sweep(other, 1e-3)[0].report.measurement_distance, a[0].report.measurement_distance);
}

TEST(Identifiability, NearCollisionSearchKeepsTheAnchorGapWithinBudget) {
    ExperimentConfig e = small_config();
    e.ident_min_gap = 0.05;
    const NearCollision nc = near_collision_search(e, 1e-3, 24);
    EXPECT_LE(nc.evaluations, 24u + 8u);
    EXPECT_GE(nc.best.report.parameter_distance, 0.05 - 1e-12);
    EXPECT_TRUE(std::isfinite(nc.best.report.measurement_distance));
}

TEST(Convergence, ReportsExpectedOrders) {
    const ExperimentConfig e = small_config(1);
    const ConvergenceTable t = convergence_study(e, {17, 33, 65});
    EXPECT_NEAR(t.fitted_order.at("forward_space"), 2.0, 0.2);
    EXPECT_NEAR(t.fitted_order.at("forward_time"), 1.0, 0.2);
    EXPECT_NEAR(t.fitted_order.at("elliptic"), 2.0, 0.2);
    EXPECT_NEAR(t.fitted_order.at("variation1"), 2.0, 0.2);
    EXPECT_NEAR(t.fitted_order.at("variation2"), 2.0, 0.2);
    for (const auto& r : t.rows) EXPECT_FALSE(r.non_monotone) << r.study << " " << r.nodes;
    EXPECT_THROW(convergence_study(e, {17, 33}), InvalidArgument);
}

TEST(Convergence, FlagsAndExcludesCflViolatingLevels) {
    // Strong attraction makes the coarse-dt levels of the temporal study violate CFL.
    ExperimentConfig e = small_config(1);
    e.truth.chi = 60.0;
    e.init[0] = ModeSpec{1.0, 0.9, {1, 0}};
    const ConvergenceTable t = convergence_study(e, {17, 33, 65});
    bool flagged = false;
    for (const auto& r : t.rows)
        if (r.cfl_violation) {
            flagged = true;
            EXPECT_TRUE(r.excluded);
        }
    EXPECT_TRUE(flagged);
}
