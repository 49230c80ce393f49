#pragma once

// First- and second-order variations of the solution map with respect to the
// amplitude of an initial-data perturbation about a constant equilibrium.
//
// The direct solvers differentiate the discrete forward scheme, so the
// finite-difference quotients of the nonlinear solver converge to them with no
// discretization mismatch; only the O(eps) remainder is left.
//
// Family convention: f(eps) = u0 + eps f1 + eps^2 f2 / 2, so the second
// variation starts from f2.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "chemo/errors.hpp"
#include "chemo/forward.hpp"
#include "chemo/grid.hpp"
#include "chemo/helmholtz.hpp"
#include "chemo/model.hpp"

namespace chemo {

struct PerturbationFamily {
    Field f1, g1, h1;
    Field f2, g2, h2;
    std::vector<double> epsilons{1e-2, 5e-3, 2.5e-3};

    /// First-order data only; second-order parts are zero.
    static PerturbationFamily first_order(const Field& f1, const Field& g1, const Field& h1) {
        const Domain& d = f1.domain();
        return {f1, g1, h1, Field(d), Field(d), Field(d), {1e-2, 5e-3, 2.5e-3}};
    }

    const Domain& domain() const { return f1.domain(); }

    /// Initial data u0 + eps f1 + eps^2 f2/2 (and likewise for v, w).
    State initial(const EquilibriumState& eq, double eps) const {
        auto build = [&](double base, const Field& a, const Field& b) {
            Field out(a.domain(), base);
            out.axpy(eps, a);
            out.axpy(0.5 * eps * eps, b);
            return out;
        };
        return {build(eq.u0, f1, f2), build(eq.v0, g1, g2), build(eq.w0, h1, h2)};
    }

    void validate(const EquilibriumState& eq) const {
        const Domain& d = domain();
        for (const Field* f : {&g1, &h1, &f2, &g2, &h2})
            if (!(f->domain() == d)) throw InvalidArgument("PerturbationFamily: fields on different grids");
        if (epsilons.empty()) throw InvalidArgument("PerturbationFamily: empty epsilon ladder");
        for (std::size_t i = 0; i < epsilons.size(); ++i) {
            if (!(epsilons[i] > 0.0)) throw InvalidArgument("PerturbationFamily: epsilons must be positive");
            if (i > 0 && !(epsilons[i] < epsilons[i - 1]))
                throw InvalidArgument("PerturbationFamily: epsilons must be strictly decreasing");
            const State s = initial(eq, epsilons[i]);
            for (const Field* f : {&s.u, &s.v, &s.w})
                for (double v : f->values())
                    if (!(v >= 0.0))
                        throw InvalidArgument("PerturbationFamily: initial data negative at eps = " +
                                              std::to_string(epsilons[i]));
        }
    }
};

enum class Provenance { direct, finite_difference };

inline const char* to_string(Provenance p) {
    return p == Provenance::direct ? "direct" : "finite-difference";
}

struct VariationStack {
    Provenance provenance = Provenance::direct;
    Trajectory order1;
    std::optional<Trajectory> order2;

    /// Finite-difference runs only: the ladder and S(eps) - S(0) per rung.
    std::vector<double> epsilons;
    std::vector<Trajectory> increments;
};

namespace detail {

/// d/deps of the kinetics minus its (0,1) term, at eps = 0: a10 U1.
inline Field kinetics_first(const std::map<KineticsSpec::Key, Coefficient>& table, const Field& u1) {
    Field out(u1.domain());
    const auto it = table.find({1, 0});
    if (it == table.end()) return out;
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = it->second.at(k) * u1[k];
    return out;
}

/// d^2/deps^2 of the kinetics minus its (0,1) term, at eps = 0.
inline Field kinetics_second(const std::map<KineticsSpec::Key, Coefficient>& table, const Field& u1,
                             const Field& c1, const Field& u2) {
    Field out = kinetics_first(table, u2);
    for (const auto& [key, c] : table) {
        if (key.first + key.second != 2 || c.is_zero()) continue;
        for (std::size_t k = 0; k < out.size(); ++k)
            out[k] += 2.0 * c.at(k) * ipow(u1[k], key.first) * ipow(c1[k], key.second);
    }
    return out;
}

inline void require_stack_compatible(const Trajectory& a, const Trajectory& b) {
    if (!(a.domain == b.domain) || a.times.size() != b.times.size())
        throw InvalidArgument("variation: trajectories on different grids or time sets");
    for (std::size_t i = 0; i < a.times.size(); ++i)
        if (a.times[i] != b.times[i]) throw InvalidArgument("variation: time sets differ");
}

/// Shared stepping loop of the linearised systems. `source_u(n)` and
/// `source_c(which, n)` supply the inhomogeneous terms; the linear part is the
/// tangent of the forward scheme at the equilibrium.
class TangentIntegrator {
public:
    TangentIntegrator(const ParameterSet& p, const KineticsSpec& k, const SolverConfig& cfg, const Domain& d)
        : p_(p), k_(k), cfg_(cfg), solver_(d, cfg.elliptic_tol) {}

    double growth() const { return p_.r - 2.0 * p_.mu * k_.expansion_point().u0; }

    Field potential(const State& s) const {
        Field out = p_.chi * s.v;
        out.axpy(-p_.xi, s.w);
        return out;
    }

    /// u-part of one step given the explicit source (without U^n/dt).
    Field step_u(const State& s, const Field& extra) {
        const double inv_dt = 1.0 / cfg_.dt;
        const double u0 = k_.expansion_point().u0;
        Field rhs = laplacian_neumann(potential(s));
        for (std::size_t k = 0; k < rhs.size(); ++k)
            rhs[k] = s.u[k] * inv_dt - u0 * rhs[k] + growth() * s.u[k] + extra[k];
        return solver_.solve(rhs, inv_dt, &s.u);
    }

    /// Chemical update for component `c_old` with kinetics source `src`.
    Field step_c(double decay, const Field& c_old, const Field& src) {
        if (cfg_.tau == 0) return solver_.solve(src, decay, &c_old);
        const double inv = 1.0 / (cfg_.chem_speedup * cfg_.dt);
        Field rhs = src;
        rhs.axpy(inv, c_old);
        return solver_.solve(rhs, decay + inv, &c_old);
    }

    Field slave(double decay, const Field& src) { return solver_.solve(src, decay); }

private:
    const ParameterSet& p_;
    const KineticsSpec& k_;
    const SolverConfig& cfg_;
    HelmholtzSolver solver_;
};

inline Trajectory empty_like(const Domain& d, const SolverConfig& cfg) {
    return Trajectory{d, cfg.tau, cfg.dt, cfg.stride, {}, {}};
}

inline void store(Trajectory& t, std::size_t n, std::size_t total, const SolverConfig& cfg, const State& s) {
    if (n == 0 || n % static_cast<std::size_t>(cfg.stride) == 0 || n == total) {
        t.times.push_back(static_cast<double>(n) * cfg.dt);
        t.states.push_back(s);
    }
}

}  // namespace detail

/// Direct solve of the first-order variation system.
inline VariationStack solve_first_variation(const ParameterSet& p, const KineticsSpec& k,
                                            const PerturbationFamily& fam, const SolverConfig& cfg) {
    p.validate();
    k.validate(fam.domain());
    cfg.validate();
    const Domain& d = fam.domain();
    detail::TangentIntegrator ti(p, k, cfg, d);
    const double bv = k.v_decay(), bw = k.w_decay();

    State s{fam.f1, fam.g1, fam.h1};
    if (cfg.tau == 0) {
        s.v = ti.slave(bv, detail::kinetics_first(k.g_table(), s.u));
        s.w = ti.slave(bw, detail::kinetics_first(k.h_table(), s.u));
    }
    const std::size_t total = cfg.steps();
    VariationStack out;
    out.provenance = Provenance::direct;
    out.order1 = detail::empty_like(d, cfg);
    detail::store(out.order1, 0, total, cfg, s);
    const Field zero(d);
    for (std::size_t n = 1; n <= total; ++n) {
        State next;
        next.u = ti.step_u(s, zero);
        next.v = ti.step_c(bv, s.v, detail::kinetics_first(k.g_table(), next.u));
        next.w = ti.step_c(bw, s.w, detail::kinetics_first(k.h_table(), next.u));
        s = std::move(next);
        detail::store(out.order1, n, total, cfg, s);
    }
    return out;
}

/// Direct solve of the second-order variation system; needs the first
/// variation at every step, so `first` must have been produced with stride 1
/// or is recomputed internally when it was not.
inline VariationStack solve_second_variation(const ParameterSet& p, const KineticsSpec& k,
                                             const PerturbationFamily& fam, const VariationStack& first,
                                             const SolverConfig& cfg) {
    if (first.order1.states.empty())
        throw InvalidArgument("solve_second_variation: missing first variation");
    p.validate();
    k.validate(fam.domain());
    cfg.validate();
    const Domain& d = fam.domain();
    const std::size_t total = cfg.steps();

    // Stepping needs every level of the first variation.
    const Trajectory* t1 = &first.order1;
    VariationStack dense;
    if (t1->states.size() != total + 1) {
        SolverConfig c1 = cfg;
        c1.stride = 1;
        dense = solve_first_variation(p, k, fam, c1);
        t1 = &dense.order1;
    }
    if (!(t1->domain == d)) throw InvalidArgument("solve_second_variation: grid mismatch");

    detail::TangentIntegrator ti(p, k, cfg, d);
    const double bv = k.v_decay(), bw = k.w_decay();
    const double mu2 = -2.0 * p.mu;

    State s{fam.f2, fam.g2, fam.h2};
    const State& s1_0 = t1->states[0];
    if (cfg.tau == 0) {
        s.v = ti.slave(bv, detail::kinetics_second(k.g_table(), s1_0.u, s1_0.v, s.u));
        s.w = ti.slave(bw, detail::kinetics_second(k.h_table(), s1_0.u, s1_0.w, s.u));
    }
    VariationStack out = first;
    out.order2 = detail::empty_like(d, cfg);
    detail::store(*out.order2, 0, total, cfg, s);
    for (std::size_t n = 1; n <= total; ++n) {
        const State& a = t1->states[n - 1];
        const State& b = t1->states[n];
        // -2 div(U1 grad P1) + F'' U1^2; upwinding follows grad P1 (eps > 0).
        Field extra = advective_flux_div(a.u, ti.potential(a), 1.0);
        for (std::size_t i = 0; i < extra.size(); ++i) extra[i] = -2.0 * extra[i] + mu2 * a.u[i] * a.u[i];
        State next;
        next.u = ti.step_u(s, extra);
        // tau=1 uses the explicit chemical level, tau=0 the new one.
        const Field& cv = cfg.tau == 0 ? b.v : a.v;
        const Field& cw = cfg.tau == 0 ? b.w : a.w;
        next.v = ti.step_c(bv, s.v, detail::kinetics_second(k.g_table(), b.u, cv, next.u));
        next.w = ti.step_c(bw, s.w, detail::kinetics_second(k.h_table(), b.u, cw, next.u));
        s = std::move(next);
        detail::store(*out.order2, n, total, cfg, s);
    }
    return out;
}

/// Callable forward map (f, g, h) -> Trajectory.
using ForwardMap = std::function<Trajectory(const Field&, const Field&, const Field&)>;

namespace detail {

/// Weights c such that sum_i c_i D_i is the degree-(m-1) polynomial
/// extrapolation to eps = 0 of samples D_i taken at eps_i.
inline std::vector<double> extrapolation_weights(const std::vector<double>& eps) {
    const std::size_t m = eps.size();
    std::vector<double> c(m);
    for (std::size_t i = 0; i < m; ++i) {
        double l = 1.0;
        for (std::size_t j = 0; j < m; ++j)
            if (j != i) l *= eps[j] / (eps[j] - eps[i]);
        c[i] = l;
    }
    return c;
}

inline Trajectory combine(const std::vector<const Trajectory*>& ts, const std::vector<double>& w) {
    Trajectory out = *ts[0];
    for (std::size_t n = 0; n < out.states.size(); ++n) {
        State& s = out.states[n];
        for (Field State::*m : {&State::u, &State::v, &State::w}) {
            Field acc(out.domain);
            for (std::size_t i = 0; i < ts.size(); ++i) acc.axpy(w[i], ts[i]->states[n].*m);
            s.*m = std::move(acc);
        }
    }
    return out;
}

inline double max_abs_traj(const Trajectory& t) {
    double m = 0.0;
    for (const State& s : t.states) m = std::max({m, max_abs(s.u), max_abs(s.v), max_abs(s.w)});
    return m;
}

inline double max_diff_traj(const Trajectory& a, const Trajectory& b) {
    double m = 0.0;
    for (std::size_t n = 0; n < a.states.size(); ++n)
        for (Field State::*f : {&State::u, &State::v, &State::w})
            for (std::size_t k = 0; k < a.domain.size(); ++k)
                m = std::max(m, std::abs((a.states[n].*f)[k] - (b.states[n].*f)[k]));
    return m;
}

}  // namespace detail

/// Tolerance on the extrapolation diagnostic: the full-ladder estimate and the
/// estimate without the coarsest rung must agree to this relative level.
inline constexpr double kExtrapolationTolerance = 5e-2;
inline constexpr double kExtrapolationNoise = 1e-7;

/// Variations from the nonlinear forward map by one-sided eps differences.
///
/// S(eps) - S(0) is fitted by a polynomial a1 eps + a2 eps^2 + ... through the
/// ladder, which is the Richardson extrapolation of the quotients
/// (S(eps)-S(0))/eps and 2(S(eps)-S(0)-eps u1)/eps^2 to eps = 0.
inline VariationStack extract_variation_fd(const ForwardMap& forward, const KineticsSpec& k,
                                           const PerturbationFamily& fam, int order) {
    if (order != 1 && order != 2) throw InvalidArgument("extract_variation_fd: order must be 1 or 2");
    const EquilibriumState& eq = k.expansion_point();
    fam.validate(eq);
    const std::vector<double>& eps = fam.epsilons;
    const std::size_t m = eps.size();
    if (m < static_cast<std::size_t>(order) + 1)
        throw InvalidArgument("extract_variation_fd: ladder needs at least order+1 rungs");

    const State base = fam.initial(eq, 0.0);
    const Trajectory s0 = forward(base.u, base.v, base.w);
    VariationStack out;
    out.provenance = Provenance::finite_difference;
    out.epsilons = eps;
    out.increments.reserve(m);
    for (double e : eps) {
        const State init = fam.initial(eq, e);
        Trajectory se = forward(init.u, init.v, init.w);
        detail::require_stack_compatible(se, s0);
        for (std::size_t n = 0; n < se.states.size(); ++n) {
            se.states[n].u -= s0.states[n].u;
            se.states[n].v -= s0.states[n].v;
            se.states[n].w -= s0.states[n].w;
        }
        out.increments.push_back(std::move(se));
    }

    // Coefficients of the interpolating polynomial p(eps) = sum_j a_j eps^j
    // (no constant term) through (eps_i, S(eps_i)-S(0)).
    auto coefficient_weights = [](const std::vector<double>& e, int j) {
        const Eigen::Index n = static_cast<Eigen::Index>(e.size());
        Eigen::MatrixXd v(n, n);
        for (Eigen::Index i = 0; i < n; ++i)
            for (Eigen::Index c = 0; c < n; ++c) v(i, c) = std::pow(e[i], static_cast<double>(c + 1));
        const Eigen::MatrixXd inv = v.inverse();
        std::vector<double> w(e.size());
        for (Eigen::Index i = 0; i < n; ++i) w[i] = inv(j - 1, i);
        return w;
    };
    std::vector<const Trajectory*> all, fine;
    for (std::size_t i = 0; i < m; ++i) all.push_back(&out.increments[i]);
    for (std::size_t i = 1; i < m; ++i) fine.push_back(&out.increments[i]);
    const std::vector<double> fine_eps(eps.begin() + 1, eps.end());

    auto extract = [&](int j) {
        const double factor = j == 1 ? 1.0 : 2.0;
        auto w = coefficient_weights(eps, j);
        for (double& x : w) x *= factor;
        Trajectory est = detail::combine(all, w);
        if (static_cast<int>(fine.size()) >= j) {
            auto wf = coefficient_weights(fine_eps, j);
            for (double& x : wf) x *= factor;
            const Trajectory alt = detail::combine(fine, wf);
            // Below this the quotients carry only solver and rounding noise.
            const double noise = kExtrapolationNoise * detail::max_abs_traj(out.increments.front()) /
                                 std::pow(eps.back(), static_cast<double>(j));
            const double scale = std::max(detail::max_abs_traj(est), noise);
            const double gap = detail::max_diff_traj(est, alt);
            if (scale > 0.0 && gap > kExtrapolationTolerance * scale)
                throw NumericalFailure("variation", "epsilon ladder too coarse: extrapolation estimates differ by " +
                                                        std::to_string(gap / scale) + " (relative)");
        }
        return est;
    };
    out.order1 = extract(1);
    if (order == 2) out.order2 = extract(2);
    return out;
}

/// Space-time L2 norm: trapezoid in space, trapezoid over the stored times.
inline double spacetime_l2(const Trajectory& t, Field State::*member) {
    double acc = 0.0;
    for (std::size_t n = 0; n < t.times.size(); ++n) {
        double w = 0.0;
        if (n > 0) w += 0.5 * (t.times[n] - t.times[n - 1]);
        if (n + 1 < t.times.size()) w += 0.5 * (t.times[n + 1] - t.times[n]);
        const double l2 = l2_norm(t.states[n].*member);
        acc += w * l2 * l2;
    }
    return std::sqrt(acc);
}

struct ConsistencyRow {
    int order = 1;
    double epsilon = 0.0;
    double l2 = 0.0;    ///< space-time L2 discrepancy of the u component
    double linf = 0.0;  ///< max over u, v, w, nodes and times
};

struct ConsistencyReport {
    std::vector<ConsistencyRow> rows;
    double slope_order1 = std::numeric_limits<double>::quiet_NaN();
    double slope_order2 = std::numeric_limits<double>::quiet_NaN();
    bool floor_order1 = false;  ///< discrepancies at the solver floor, slope not fitted
    bool floor_order2 = false;
};

namespace detail {

inline double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
    const std::size_t n = x.size();
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double lx = std::log(x[i]), ly = std::log(y[i]);
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    const double dn = static_cast<double>(n);
    return (dn * sxy - sx * sy) / (dn * sxx - sx * sx);
}

}  // namespace detail

/// Raw per-eps quotients of the finite-difference stack against the direct
/// variations: (S(eps)-S(0))/eps - u1 and 2(S(eps)-S(0)-eps u1)/eps^2 - u2.
inline ConsistencyReport consistency_report(const VariationStack& direct, const VariationStack& fd,
                                            double floor = 1e-9) {
    if (fd.provenance != Provenance::finite_difference || fd.increments.empty())
        throw InvalidArgument("consistency_report: second argument must be a finite-difference stack");
    if (direct.order1.states.empty()) throw InvalidArgument("consistency_report: direct stack is empty");
    detail::require_stack_compatible(direct.order1, fd.increments.front());
    ConsistencyReport rep;
    const double scale1 = std::max(1.0, detail::max_abs_traj(direct.order1));
    const double scale2 = direct.order2 ? std::max(1.0, detail::max_abs_traj(*direct.order2)) : 1.0;
    std::vector<double> e1, d1, e2, d2;
    for (std::size_t i = 0; i < fd.epsilons.size(); ++i) {
        const double e = fd.epsilons[i];
        const Trajectory& inc = fd.increments[i];
        Trajectory q1 = inc, q2 = inc;
        for (std::size_t n = 0; n < inc.states.size(); ++n)
            for (Field State::*f : {&State::u, &State::v, &State::w}) {
                const Field& s = inc.states[n].*f;
                const Field& a = direct.order1.states[n].*f;
                Field& r1 = q1.states[n].*f;
                Field& r2 = q2.states[n].*f;
                for (std::size_t k = 0; k < s.size(); ++k) {
                    r1[k] = s[k] / e - a[k];
                    r2[k] = direct.order2 ? 2.0 * (s[k] - e * a[k]) / (e * e) - ((*direct.order2).states[n].*f)[k]
                                          : 0.0;
                }
            }
        const ConsistencyRow row1{1, e, spacetime_l2(q1, &State::u), detail::max_abs_traj(q1)};
        rep.rows.push_back(row1);
        e1.push_back(e);
        d1.push_back(row1.l2);
        if (direct.order2) {
            const ConsistencyRow row2{2, e, spacetime_l2(q2, &State::u), detail::max_abs_traj(q2)};
            rep.rows.push_back(row2);
            e2.push_back(e);
            d2.push_back(row2.l2);
        }
    }
    auto fit = [&](const std::vector<double>& e, const std::vector<double>& d, double scale, bool& at_floor) {
        at_floor = false;
        for (double v : d)
            if (!(v > floor * scale)) at_floor = true;
        if (at_floor || e.size() < 2) return std::numeric_limits<double>::quiet_NaN();
        return detail::loglog_slope(e, d);
    };
    rep.slope_order1 = fit(e1, d1, scale1, rep.floor_order1);
    if (direct.order2) rep.slope_order2 = fit(e2, d2, scale2, rep.floor_order2);
    return rep;
}

}  // namespace chemo
