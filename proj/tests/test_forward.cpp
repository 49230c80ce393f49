#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "chemo/forward.hpp"
#include "chemo/probes.hpp"

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

double max_diff(const Field& a, const Field& b) { return max_abs(a - b); }

}  // namespace

TEST(Forward, SteadyStateIsAFixedPoint) {
    const ParameterSet p = reference_truth();
    const EquilibriumState eq = steady_state(p);
    EXPECT_DOUBLE_EQ(eq.u0, 0.5);
    for (int tau : {0, 1}) {
        const Domain d = Domain::line(1.0, 65);
        ForwardSolver fs(d, p, applied_kinetics(p, {}), config(tau, 1e-3, 1.0));
        State s{Field(d, eq.u0), Field(d, eq.v0), Field(d, eq.w0)};
        double drift = 0.0;
        for (int n = 0; n < 1000; ++n) {
            State next = fs.step(s);
            drift = std::max({drift, max_diff(next.u, s.u), max_diff(next.v, s.v), max_diff(next.w, s.w)});
            s = std::move(next);
        }
        EXPECT_LE(drift, 1e-12) << "tau = " << tau;
    }
}

TEST(Forward, HeatModeFollowsTheDiscreteAmplificationFactor) {
    // chi = xi = 0 and negligible mu: (1/dt + lambda_h) u^{n+1} = (1/dt + r) u^n on an exact eigenvector.
    ParameterSet p;
    p.r = 0.3;
    p.mu = 1e-300;
    const Domain d = Domain::box(1.0, 1.0, 17, 13);
    const EigenMode m = neumann_eigenmode(d, {2, 1});
    const double dt = 1e-3;
    const SolverConfig cfg = config(1, dt, 0.05);
    ForwardSolver fs(d, p, applied_kinetics(p, {}), cfg);
    Field f(d, 1.0);
    f.axpy(0.5, m.values);
    const Trajectory t = fs.solve(f, Field(d), Field(d));
    const double steps = 50;
    const double factor = std::pow((1.0 + p.r * dt) / (1.0 + m.lambda_h * dt), steps);
    const double mean_factor = std::pow(1.0 + p.r * dt, steps);
    Field expect(d, mean_factor);
    expect.axpy(0.5 * factor, m.values);
    EXPECT_LT(max_diff(t.final_state().u, expect), 1e-12);
}

TEST(Forward, HeatModeErrorIsFirstOrderInTimeAndSecondInSpace) {
    ParameterSet p;
    p.mu = 1e-300;
    const double tf = 0.1;
    // amp(dt) = exact decay, or the implicit-Euler factor to isolate the spatial error
    auto err = [&](std::size_t n, double dt, bool time_discrete) {
        const Domain d = Domain::line(1.0, n);
        const Field f = Field::sample(d, [](double x, double) { return 1.0 + std::cos(M_PI * x); });
        ForwardSolver fs(d, p, applied_kinetics(p, {}), config(1, dt, tf));
        const Field u = fs.solve(f, Field(d), Field(d)).final_state().u;
        const double amp = time_discrete ? std::pow(1.0 + M_PI * M_PI * dt, -std::round(tf / dt))
                                         : std::exp(-M_PI * M_PI * tf);
        double e = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            e = std::max(e, std::abs(u[i] - 1.0 - amp * std::cos(M_PI * d.coord(0, i))));
        return e;
    };
    const double e1 = err(17, 1e-4, true), e2 = err(33, 1e-4, true), e3 = err(65, 1e-4, true);
    EXPECT_NEAR(std::log2(e1 / e2), 2.0, 0.2);
    EXPECT_NEAR(std::log2(e2 / e3), 2.0, 0.2);
    const double t1 = err(257, 4e-3, false), t2 = err(257, 2e-3, false), t3 = err(257, 1e-3, false);
    EXPECT_NEAR(std::log2(t1 / t2), 1.0, 0.2);
    EXPECT_NEAR(std::log2(t2 / t3), 1.0, 0.2);
}

TEST(Forward, ParabolicChemicalDecaysAtTheImplicitRate) {
    ParameterSet p;
    p.mu = 1.0;
    p.beta = 2.0;
    const Domain d = Domain::line(1.0, 33);
    const EigenMode m = neumann_eigenmode(d, {1, 0});
    SolverConfig cfg = config(1, 1e-3, 0.02);
    cfg.chem_speedup = 2.0;
    ForwardSolver fs(d, p, applied_kinetics(p, {}), cfg);
    Field v(d, 1.0);
    v.axpy(0.5, m.values);
    const Trajectory t = fs.solve(Field(d), v, Field(d));
    // (1/(s dt) + lambda_h + beta) v^{n+1} = v^n/(s dt)
    const double s = 2.0, dt = 1e-3;
    const double mode = std::pow(1.0 / (1.0 + s * dt * (m.lambda_h + p.beta)), 20);
    const double mean = std::pow(1.0 / (1.0 + s * dt * p.beta), 20);
    Field expect(d, mean);
    expect.axpy(0.5 * mode, m.values);
    EXPECT_LT(max_diff(t.final_state().v, expect), 1e-12);
}

TEST(Forward, EllipticChemicalsSolveTheirEquations) {
    const ParameterSet p = reference_truth();
    const Domain d = Domain::box(1.0, 1.0, 17, 17);
    ForwardSolver fs(d, p, applied_kinetics(p, {}), config(0, 1e-3, 1e-3));
    const Field f = Field::sample(d, [](double x, double y) { return 1.0 + 0.5 * std::cos(M_PI * x) * std::cos(M_PI * y); });
    const State s = fs.step(fs.initial_state(f, Field(d), Field(d)));
    // -Lap v + beta v = alpha u, -Lap w + delta w = gamma u
    Field rv = HelmholtzSolver::apply(s.v, p.beta);
    rv.axpy(-1.0, s.u);
    Field rw = HelmholtzSolver::apply(s.w, p.delta);
    rw.axpy(-1.0, s.u);
    EXPECT_LT(max_abs(rv), 1e-8);
    EXPECT_LT(max_abs(rw), 1e-8);
}

TEST(Forward, MassIsConservedWithoutReactions) {
    ParameterSet p;
    p.chi = 2.0;
    p.xi = 0.5;
    p.mu = 1e-300;
    const Domain d = Domain::line(1.0, 65);
    const Field f = Field::sample(d, [](double x, double) { return 1.0 + 0.8 * std::cos(2 * M_PI * x); });
    for (int tau : {0, 1}) {
        ForwardSolver fs(d, p, applied_kinetics(p, {}), config(tau, 1e-3, 0.2));
        const Trajectory t = fs.solve(f, Field(d), Field(d));
        EXPECT_NEAR(quadrature(t.final_state().u), quadrature(f), 1e-11);
    }
}

TEST(Forward, StaysNonNegativeUnderCfl) {
    ParameterSet p;
    p.chi = 5.0;
    p.xi = 0.1;
    p.r = 0.5;
    const Domain d = Domain::line(1.0, 129);
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0.0, 2.0);
    Field f(d);
    for (double& v : f.raw()) v = u(rng);
    f[40] = 0.0;
    for (int tau : {0, 1}) {
        ForwardSolver fs(d, p, applied_kinetics(p, {}), config(tau, 5e-4, 0.5));
        const Trajectory t = fs.solve(f, Field(d), Field(d));
        double umin = 1.0;
        for (const State& s : t.states) umin = std::min(umin, *std::min_element(s.u.raw().begin(), s.u.raw().end()));
        EXPECT_GE(umin, -1e-9);
    }
}

TEST(Forward, ReportsCflViolation) {
    ParameterSet p;
    p.chi = 500.0;
    const Domain d = Domain::line(1.0, 129);
    const Field f = Field::sample(d, [](double x, double) { return 1.0 + std::cos(M_PI * x); });
    ForwardSolver fs(d, p, applied_kinetics(p, {}), config(0, 1e-2, 0.1));
    EXPECT_THROW(fs.solve(f, Field(d), Field(d)), CflViolation);
}

TEST(Forward, RejectsBadInput) {
    const Domain d = Domain::line(1.0, 17);
    const ParameterSet p = reference_truth();
    Field neg(d, 1.0);
    neg[2] = -0.1;
    ForwardSolver fs(d, p, applied_kinetics(p, {}), config(0, 1e-2, 0.1));
    EXPECT_THROW(fs.solve(neg, Field(d), Field(d)), InvalidArgument);
    EXPECT_THROW(fs.solve(Field(Domain::line(1.0, 18), 1.0), Field(d), Field(d)), InvalidArgument);
    EXPECT_THROW(ForwardSolver(d, p, applied_kinetics(p, {}), config(0, 0.03, 0.1)), InvalidArgument);
    EXPECT_THROW(ForwardSolver(d, p, applied_kinetics(p, {}), config(2, 0.01, 0.1)), InvalidArgument);
    ParameterSet bad = p;
    bad.beta = 0.0;
    EXPECT_THROW(ForwardSolver(d, bad, applied_kinetics(p, {}), config(0, 0.01, 0.1)), InvalidArgument);
}

TEST(Forward, StrideKeepsTheFinalState) {
    const Domain d = Domain::line(1.0, 17);
    const ParameterSet p = reference_truth();
    SolverConfig c = config(1, 1e-2, 0.25);
    c.stride = 10;
    const Trajectory t = solve_forward(Field(d, 1.0), Field(d), Field(d), p, applied_kinetics(p, {}), c);
    ASSERT_EQ(t.times.size(), 4u);  // 0, 0.1, 0.2, 0.25
    EXPECT_NEAR(t.times.back(), 0.25, 1e-14);
}

TEST(Forward, IsDeterministic) {
    const Domain d = Domain::box(1.0, 1.0, 17, 17);
    const ParameterSet p = reference_truth();
    const Field f = Field::sample(d, [](double x, double y) { return 1.0 + 0.5 * std::cos(M_PI * x) * y; });
    const auto run = [&] { return solve_forward(f, Field(d), Field(d), p, applied_kinetics(p, {}), config(0, 1e-2, 0.2)); };
    const Trajectory a = run(), b = run();
    ASSERT_EQ(a.states.size(), b.states.size());
    for (std::size_t n = 0; n < a.states.size(); ++n) EXPECT_EQ(a.states[n].u.raw(), b.states[n].u.raw());
}

TEST(Measure, RecordsBoundaryTracesAndFinalFields) {
    const Domain d = Domain::box(1.0, 1.0, 9, 10);
    const ParameterSet p = reference_truth();
    const Trajectory t = solve_forward(Field(d, 1.0), Field(d), Field(d), p, applied_kinetics(p, {}), config(1, 0.1, 0.3));
    const MeasurementRecord m = measure(t);
    EXPECT_EQ(m.boundary.size(), 2 * 9 + 2 * 10 - 4u);
    EXPECT_EQ(m.boundary_u.size(), t.times.size());
    EXPECT_EQ(m.value_count(), 3 * (t.times.size() * m.boundary.size() + d.size()));
    EXPECT_EQ(m.final_w.raw(), t.final_state().w.raw());
}
