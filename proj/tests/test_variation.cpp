#include <gtest/gtest.h>

#include <cmath>

#include "chemo/forward.hpp"
#include "chemo/probes.hpp"
#include "chemo/variation.hpp"

using namespace chemo;

namespace {

ParameterSet reference_truth() {
    ParameterSet p;
    p.chi = 0.1;
    p.xi = 0.05;
    p.r = 0.5;
    p.mu = 1.0;
    return p;
}

SolverConfig config(int tau, double dt, double t_final) {
    SolverConfig c;
    c.tau = tau;
    c.dt = dt;
    c.t_final = t_final;
    return c;
}

ForwardMap forward_map(const ParameterSet& p, const KineticsSpec& k, const SolverConfig& c) {
    return [=](const Field& f, const Field& g, const Field& h) { return solve_forward(f, g, h, p, k, c); };
}

}  // namespace

TEST(PerturbationFamily, ValidatesLadderAndSign) {
    const Domain d = Domain::line(1.0, 17);
    PerturbationFamily fam = PerturbationFamily::first_order(Field(d, 1.0), Field(d), Field(d));
    EXPECT_NO_THROW(fam.validate({}));
    fam.epsilons = {1e-2, 2e-2};
    EXPECT_THROW(fam.validate({}), InvalidArgument);
    fam.epsilons = {1e-2};
    fam.f1 = Field(d, -1.0);
    EXPECT_THROW(fam.validate({}), InvalidArgument);
    // negative direction is fine about a positive equilibrium
    EXPECT_NO_THROW(fam.validate({0.5, 0.5, 0.5}));
}

TEST(FirstVariation, ModeAboutZeroFollowsTheDiscreteFactor) {
    // About u = v = w = 0 the advection drops out: (1/dt + lambda_h) U^{n+1} = (1/dt + r) U^n,
    // and for tau = 0 the chemical is the elliptic slave alpha/(lambda_h + beta) U.
    ParameterSet p = reference_truth();
    p.beta = 1.5;
    const Domain d = Domain::line(1.0, 33);
    const EigenMode m = neumann_eigenmode(d, {2, 0});
    const double dt = 1e-3;
    const auto fam = PerturbationFamily::first_order(m.values, Field(d), Field(d));
    const VariationStack s = solve_first_variation(p, applied_kinetics(p, {}), fam, config(0, dt, 0.1));
    const double a = std::pow((1.0 + p.r * dt) / (1.0 + m.lambda_h * dt), 100);
    Field eu = m.values;
    eu *= a;
    Field ev = eu;
    ev *= 1.0 / (m.lambda_h + p.beta);
    EXPECT_LT(max_abs(s.order1.final_state().u - eu), 1e-12);
    EXPECT_LT(max_abs(s.order1.final_state().v - ev), 1e-10);
}

TEST(FirstVariation, IsLinearInTheData) {
    const ParameterSet p = reference_truth();
    const KineticsSpec k = applied_kinetics(p, {});
    const Domain d = Domain::box(1.0, 1.0, 13, 11);
    const Field f = Field::sample(d, [](double x, double y) { return 1.0 + std::cos(M_PI * x) * y; });
    const Field g = Field::sample(d, [](double x, double) { return 0.5 + 0.2 * x; });
    const SolverConfig c = config(1, 1e-2, 0.2);
    const auto a = solve_first_variation(p, k, PerturbationFamily::first_order(f, g, Field(d)), c);
    Field f3 = f;
    f3 *= 3.0;
    Field g3 = g;
    g3 *= 3.0;
    const auto b = solve_first_variation(p, k, PerturbationFamily::first_order(f3, g3, Field(d)), c);
    Field diff = b.order1.final_state().u;
    diff.axpy(-3.0, a.order1.final_state().u);
    EXPECT_LT(max_abs(diff), 1e-12);
}

TEST(SecondVariation, LogisticTermAboutZeroMatchesClosedForm) {
    // chi = xi = 0, U1 = e^{(r - lambda)t} cos: the discrete recursion for the mean of U2 is
    // (1/dt) m^{n+1} = (1/dt + r) m^n - mu (U1^n)^2 averaged.
    ParameterSet p;
    p.r = 0.5;
    p.mu = 2.0;
    const Domain d = Domain::line(1.0, 33);
    const EigenMode m = neumann_eigenmode(d, {1, 0});
    const double dt = 1e-3;
    const SolverConfig c = config(0, dt, 0.05);
    const KineticsSpec k = applied_kinetics(p, {});
    const auto fam = PerturbationFamily::first_order(m.values, Field(d), Field(d));
    const auto s1 = solve_first_variation(p, k, fam, c);
    const auto s2 = solve_second_variation(p, k, fam, s1, c);
    const double msq = quadrature(hadamard(m.values, m.values));
    const double a = (1.0 + p.r * dt) / (1.0 + m.lambda_h * dt);
    double mean = 0.0, amp = 1.0;
    for (int n = 0; n < 50; ++n) {
        mean = (1.0 + p.r * dt) * mean - 2.0 * p.mu * dt * amp * amp * msq;
        amp *= a;
    }
    EXPECT_NEAR(quadrature(s2.order2->final_state().u), mean, 1e-12);
}

TEST(SecondVariation, RecomputesADenseFirstVariationWhenStrided) {
    const ParameterSet p = reference_truth();
    const KineticsSpec k = applied_kinetics(p, {});
    const Domain d = Domain::line(1.0, 17);
    const Field f = Field::sample(d, [](double x, double) { return 1.0 + 0.5 * std::cos(M_PI * x); });
    const auto fam = PerturbationFamily::first_order(f, Field(d), Field(d));
    SolverConfig dense = config(1, 1e-2, 0.2), sparse = dense;
    sparse.stride = 5;
    const auto a = solve_second_variation(p, k, fam, solve_first_variation(p, k, fam, dense), dense);
    const auto b = solve_second_variation(p, k, fam, solve_first_variation(p, k, fam, sparse), sparse);
    EXPECT_EQ(a.order2->final_state().u.raw(), b.order2->final_state().u.raw());
}

TEST(Consistency, FiniteDifferencesConvergeToTheDirectVariations) {
    for (int tau : {0, 1}) {
        const ParameterSet p = reference_truth();
        const KineticsSpec k = applied_kinetics(p, {});
        const Domain d = Domain::line(1.0, 65);
        const Field f = Field::sample(d, [](double x, double) { return 1.0 + 0.5 * std::cos(M_PI * x); });
        const Field g = Field::sample(d, [](double x, double) { return 0.5 + 0.5 * std::cos(2 * M_PI * x); });
        const auto fam = PerturbationFamily::first_order(f, tau == 1 ? g : Field(d), Field(d));
        const SolverConfig c = config(tau, 1e-3, 0.3);
        VariationStack direct = solve_first_variation(p, k, fam, c);
        direct = solve_second_variation(p, k, fam, direct, c);
        const VariationStack fd = extract_variation_fd(forward_map(p, k, c), k, fam, 2);
        const ConsistencyReport rep = consistency_report(direct, fd);
        EXPECT_GE(rep.slope_order1, 0.8) << "tau = " << tau;
        EXPECT_GE(rep.slope_order2, 0.8) << "tau = " << tau;
        // the extrapolated estimates beat every single quotient
        EXPECT_LT(max_abs(fd.order1.final_state().u - direct.order1.final_state().u), 1e-5);
    }
}

TEST(Consistency, RequiresAFiniteDifferenceStack) {
    const ParameterSet p = reference_truth();
    const Domain d = Domain::line(1.0, 17);
    const auto fam = PerturbationFamily::first_order(Field(d, 1.0), Field(d), Field(d));
    const auto s = solve_first_variation(p, applied_kinetics(p, {}), fam, config(0, 0.1, 0.2));
    EXPECT_THROW(consistency_report(s, s), InvalidArgument);
}

TEST(Spacetime, NormOfConstantTrajectory) {
    const Domain d = Domain::line(2.0, 17);
    Trajectory t{d, 0, 0.5, 1, {0.0, 0.5, 1.0}, {}};
    for (int i = 0; i < 3; ++i) t.states.push_back({Field(d, 3.0), Field(d), Field(d)});
    // sqrt(9 * |Omega| * T)
    EXPECT_NEAR(spacetime_l2(t, &State::u), std::sqrt(9.0 * 2.0 * 1.0), 1e-13);
}
