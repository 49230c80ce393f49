#pragma once

// IMEX Euler integration of the attraction-repulsion system
//
//   u_t = Lap u - div(u grad(chi v - xi w)) + r u - mu u^2
//   tau v_t = Lap v + G(x,u,v),   tau w_t = Lap w + H(x,u,w)
//
// with homogeneous Neumann conditions. Diffusion (and the linear decay of the
// chemicals) is implicit; chemotactic advection and reactions are explicit.
// The u update uses the chemical fields of the previous level; the chemicals
// are then updated against the new u.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "chemo/errors.hpp"
#include "chemo/grid.hpp"
#include "chemo/helmholtz.hpp"
#include "chemo/model.hpp"

namespace chemo {

struct State {
    Field u, v, w;
};

struct Trajectory {
    Domain domain;
    int tau = 0;
    double dt = 0.0;
    int stride = 1;
    std::vector<double> times;
    std::vector<State> states;

    std::size_t size() const { return times.size(); }
    const State& final_state() const { return states.back(); }
};

struct MeasurementRecord {
    Domain domain;
    std::vector<std::size_t> boundary;  ///< node indices of the traces
    std::vector<double> times;
    /// [time][boundary node]
    std::vector<std::vector<double>> boundary_u, boundary_v, boundary_w;
    Field final_u, final_v, final_w;

    std::size_t value_count() const {
        return 3 * times.size() * boundary.size() + 3 * domain.size();
    }
};

namespace detail {

inline double ipow(double x, int n) {
    double r = 1.0;
    for (int i = 0; i < n; ++i) r *= x;
    return r;
}

/// sum of a_pq U^p V^q over the table, skipping (0,1).
inline Field kinetics_rest(const std::map<KineticsSpec::Key, Coefficient>& table, const Field& dev_u,
                           const Field& dev_v) {
    Field out(dev_u.domain());
    for (const auto& [key, c] : table) {
        if (key == KineticsSpec::Key{0, 1} || c.is_zero()) continue;
        for (std::size_t k = 0; k < out.size(); ++k)
            out[k] += c.at(k) * ipow(dev_u[k], key.first) * ipow(dev_v[k], key.second);
    }
    return out;
}

/// True when the table has a term other than (0,1) that depends on the chemical.
inline bool rest_depends_on_chemical(const std::map<KineticsSpec::Key, Coefficient>& table) {
    for (const auto& [key, c] : table)
        if (key.second >= 1 && key != KineticsSpec::Key{0, 1} && !c.is_zero()) return true;
    return false;
}

inline Field shifted(const Field& f, double c) {
    Field out = f;
    for (double& x : out.raw()) x += c;
    return out;
}

}  // namespace detail

class ForwardSolver {
public:
    ForwardSolver(const Domain& d, ParameterSet p, KineticsSpec k, SolverConfig cfg)
        : domain_(d), p_(std::move(p)), k_(std::move(k)), cfg_(cfg), solver_(d, cfg.elliptic_tol) {
        p_.validate();
        k_.validate(d);
        cfg_.validate();
    }

    const Domain& domain() const { return domain_; }
    const ParameterSet& parameters() const { return p_; }
    const KineticsSpec& kinetics() const { return k_; }
    const SolverConfig& config() const { return cfg_; }

    /// For tau=0 the chemicals are replaced by their elliptic slaves of f.
    State initial_state(const Field& f, const Field& g, const Field& h) {
        State s{f, g, h};
        if (cfg_.tau == 0) {
            s.v = slave(k_.g_table(), k_.v_decay(), s.u, s.v, k_.expansion_point().v0);
            s.w = slave(k_.h_table(), k_.w_decay(), s.u, s.w, k_.expansion_point().w0);
        }
        return s;
    }

    State step(const State& s) {
        const EquilibriumState& eq = k_.expansion_point();
        Field potential = p_.chi * s.v;
        potential.axpy(-p_.xi, s.w);
        check_cfl(potential);

        const double inv_dt = 1.0 / cfg_.dt;
        Field rhs = advective_flux_div(s.u, potential, 1.0);
        for (std::size_t k = 0; k < rhs.size(); ++k) {
            const double u = s.u[k];
            rhs[k] = u * inv_dt - rhs[k] + p_.r * u - p_.mu * u * u;
        }
        State next;
        next.u = solver_.solve(rhs, inv_dt, &s.u);
        const double umin = *std::min_element(next.u.raw().begin(), next.u.raw().end());
        if (umin < -1e-9)
            throw NumericalFailure("forward", "density went negative (" + std::to_string(umin) +
                                                  "); the step is unstable");

        if (cfg_.tau == 0) {
            next.v = slave(k_.g_table(), k_.v_decay(), next.u, s.v, eq.v0);
            next.w = slave(k_.h_table(), k_.w_decay(), next.u, s.w, eq.w0);
        } else {
            next.v = relax(k_.g_table(), k_.v_decay(), next.u, s.v, eq.v0);
            next.w = relax(k_.h_table(), k_.w_decay(), next.u, s.w, eq.w0);
        }
        return next;
    }

    Trajectory solve(const Field& f, const Field& g, const Field& h) {
        for (const Field* x : {&f, &g, &h}) {
            if (!(x->domain() == domain_)) throw InvalidArgument("solve_forward: domain mismatch");
            for (double v : x->values())
                if (!(v >= 0.0)) throw InvalidArgument("solve_forward: initial data must be non-negative");
        }
        Trajectory traj{domain_, cfg_.tau, cfg_.dt, cfg_.stride, {}, {}};
        State s = initial_state(f, g, h);
        traj.times.push_back(0.0);
        traj.states.push_back(s);
        const std::size_t n = cfg_.steps();
        for (std::size_t i = 1; i <= n; ++i) {
            s = step(s);
            if (i % static_cast<std::size_t>(cfg_.stride) == 0 || i == n) {
                traj.times.push_back(static_cast<double>(i) * cfg_.dt);
                traj.states.push_back(s);
            }
        }
        return traj;
    }

private:
    void check_cfl(const Field& potential) const {
        const auto speed = max_face_speed(potential);
        double courant = 0.0;
        for (std::size_t a = 0; a < domain_.dim(); ++a) courant += cfg_.dt * speed[a] / domain_.spacing(a);
        if (courant > cfg_.cfl_safety)
            throw CflViolation("dt=" + std::to_string(cfg_.dt) + " gives Courant number " +
                               std::to_string(courant) + " > " + std::to_string(cfg_.cfl_safety));
    }

    // 0 = Lap c + K(u, c): the linear decay is inverted and the remaining
    // terms are iterated (Picard) when they depend on c.
    Field slave(const std::map<KineticsSpec::Key, Coefficient>& table, double decay, const Field& u,
                const Field& guess, double c0) {
        const Field du = detail::shifted(u, -k_.expansion_point().u0);
        Field dc = detail::shifted(guess, -c0);
        const bool iterate = detail::rest_depends_on_chemical(table);
        for (int it = 0; it < cfg_.picard_max_iter; ++it) {
            const Field rhs = detail::kinetics_rest(table, du, dc);
            Field next = solver_.solve(rhs, decay, &dc);
            if (!iterate) return detail::shifted(next, c0);
            double diff = 0.0;
            for (std::size_t k = 0; k < next.size(); ++k) diff = std::max(diff, std::abs(next[k] - dc[k]));
            dc = std::move(next);
            if (diff <= cfg_.picard_tol * std::max(1.0, max_abs(dc))) return detail::shifted(dc, c0);
        }
        throw NumericalFailure("elliptic", "Picard iteration for the chemical equation did not converge");
    }

    // dc/dt = s (Lap c - decay c + rest(u_new, c_old))
    Field relax(const std::map<KineticsSpec::Key, Coefficient>& table, double decay, const Field& u_new,
                const Field& c_old, double c0) {
        const double s = cfg_.chem_speedup;
        const double inv = 1.0 / (s * cfg_.dt);
        const Field du = detail::shifted(u_new, -k_.expansion_point().u0);
        const Field dc = detail::shifted(c_old, -c0);
        Field rhs = detail::kinetics_rest(table, du, dc);
        rhs.axpy(inv, dc);
        return detail::shifted(solver_.solve(rhs, decay + inv, &dc), c0);
    }

    Domain domain_;
    ParameterSet p_;
    KineticsSpec k_;
    SolverConfig cfg_;
    HelmholtzSolver solver_;
};

inline State step(const State& s, const ParameterSet& p, const KineticsSpec& k, const SolverConfig& cfg) {
    ForwardSolver fs(s.u.domain(), p, k, cfg);
    return fs.step(s);
}

inline Trajectory solve_forward(const Field& f, const Field& g, const Field& h, const ParameterSet& p,
                                const KineticsSpec& k, const SolverConfig& cfg) {
    ForwardSolver fs(f.domain(), p, k, cfg);
    return fs.solve(f, g, h);
}

inline MeasurementRecord measure(const Trajectory& traj) {
    if (traj.states.empty()) throw InvalidArgument("measure: empty trajectory");
    MeasurementRecord m;
    m.domain = traj.domain;
    m.boundary = traj.domain.boundary_nodes();
    m.times = traj.times;
    for (const State& s : traj.states) {
        std::vector<double> bu, bv, bw;
        bu.reserve(m.boundary.size());
        for (std::size_t k : m.boundary) {
            bu.push_back(s.u[k]);
            bv.push_back(s.v[k]);
            bw.push_back(s.w[k]);
        }
        m.boundary_u.push_back(std::move(bu));
        m.boundary_v.push_back(std::move(bv));
        m.boundary_w.push_back(std::move(bw));
    }
    m.final_u = traj.final_state().u;
    m.final_v = traj.final_state().v;
    m.final_w = traj.final_state().w;
    return m;
}

}  // namespace chemo
