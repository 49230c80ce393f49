#pragma once

// Model description: the biological parameter set, truncated Taylor kinetics
// for the two chemical equations, the constant equilibrium they are expanded
// around, and solver settings.

#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "chemo/errors.hpp"
#include "chemo/grid.hpp"

namespace chemo {

/// A(x) = A1(x_1..x_{d-1}) * A2(x_d). In 1D the transverse factor is empty
/// and treated as 1.
struct SeparableField {
    std::vector<double> transverse;
    std::vector<double> axial;

    Field to_field(const Domain& d) const {
        const std::size_t ax = d.dim() - 1;
        if (axial.size() != d.nodes(ax))
            throw InvalidArgument("SeparableField: axial factor does not match the grid");
        if (d.dim() == 2 && transverse.size() != d.nodes(0))
            throw InvalidArgument("SeparableField: transverse factor does not match the grid");
        Field out(d);
        for (std::size_t j = 0; j < d.nodes(1); ++j)
            for (std::size_t i = 0; i < d.nodes(0); ++i) {
                const double t = d.dim() == 2 ? transverse[i] : 1.0;
                const double a = d.dim() == 2 ? axial[j] : axial[i];
                out[d.index(i, j)] = t * a;
            }
        return out;
    }

    /// Trapezoid integral of the axial factor over its interval.
    double axial_integral(const Domain& d) const {
        const std::size_t ax = d.dim() - 1;
        double s = 0.0;
        for (std::size_t i = 0; i < axial.size(); ++i) s += d.axis_weight(ax, i) * axial[i];
        return s;
    }
};

/// A coefficient that is either a constant or a nodal field.
class Coefficient {
public:
    Coefficient(double c = 0.0) : value_(c) {}  // NOLINT(google-explicit-constructor)
    Coefficient(Field f) : value_(std::move(f)) {}  // NOLINT(google-explicit-constructor)

    bool is_constant() const { return std::holds_alternative<double>(value_); }
    double constant() const {
        if (!is_constant()) throw InvalidArgument("Coefficient: not a constant");
        return std::get<double>(value_);
    }
    const Field& field() const { return std::get<Field>(value_); }

    double at(std::size_t k) const {
        return is_constant() ? std::get<double>(value_) : std::get<Field>(value_)[k];
    }

    bool is_zero() const {
        if (is_constant()) return std::get<double>(value_) == 0.0;
        for (double v : field().values())
            if (v != 0.0) return false;
        return true;
    }

    /// Volume average (the constant itself for constants).
    double mean() const {
        if (is_constant()) return std::get<double>(value_);
        const Field& f = field();
        return quadrature(f) / f.domain().volume();
    }

    Field sample(const Domain& d) const {
        if (is_constant()) return Field(d, std::get<double>(value_));
        if (!(field().domain() == d)) throw InvalidArgument("Coefficient: domain mismatch");
        return field();
    }

private:
    std::variant<double, Field> value_;
};

struct ParameterSet {
    double chi = 0.0;
    double xi = 0.0;
    double r = 0.0;
    double mu = 1.0;
    Coefficient alpha = 1.0;
    double beta = 1.0;
    Coefficient gamma = 1.0;
    double delta = 1.0;

    void validate() const {
        if (!(chi >= 0.0) || !(xi >= 0.0)) throw InvalidArgument("ParameterSet: chi, xi must be >= 0");
        if (!(r >= 0.0)) throw InvalidArgument("ParameterSet: r must be >= 0");
        if (!(mu > 0.0) || !(beta > 0.0) || !(delta > 0.0))
            throw InvalidArgument("ParameterSet: mu, beta, delta must be > 0");
        for (const Coefficient* c : {&alpha, &gamma})
            if (!c->is_constant())
                for (double v : c->field().values())
                    if (!(v >= 0.0)) throw InvalidArgument("ParameterSet: alpha/gamma fields must be >= 0");
    }

    /// (chi, xi, r, mu, alpha, beta, gamma, delta) with field entries averaged.
    std::array<double, 8> as_vector() const {
        return {chi, xi, r, mu, alpha.mean(), beta, gamma.mean(), delta};
    }

    static constexpr std::array<const char*, 8> kNames{"chi", "xi",   "r",     "mu",
                                                       "alpha", "beta", "gamma", "delta"};
};

struct EquilibriumState {
    double u0 = 0.0;
    double v0 = 0.0;
    double w0 = 0.0;
};

/// Constant steady state of the applied model. `trivial` selects u0=v0=w0=0.
inline EquilibriumState steady_state(const ParameterSet& p, bool trivial = false) {
    if (!(p.mu > 0.0) || !(p.beta > 0.0) || !(p.delta > 0.0))
        throw InvalidArgument("steady_state: mu, beta, delta must be > 0");
    if (trivial || p.r == 0.0) return {};
    if (!p.alpha.is_constant() || !p.gamma.is_constant())
        throw InvalidArgument(
            "steady_state: spatially varying alpha/gamma admit no constant non-trivial steady state");
    const double u0 = p.r / p.mu;
    return {u0, p.alpha.constant() * u0 / p.beta, p.gamma.constant() * u0 / p.delta};
}

/// Taylor tables for G(x,u,v) and H(x,u,w), written in deviations from the
/// expansion point: G = sum_{p+q>=1} a_pq(x) (u-u0)^p (v-v0)^q.
class KineticsSpec {
public:
    using Key = std::pair<int, int>;

    KineticsSpec() = default;
    KineticsSpec(int max_order, EquilibriumState expansion) : max_order_(max_order), eq_(expansion) {
        if (max_order < 1) throw InvalidArgument("KineticsSpec: max_order must be >= 1");
    }

    int max_order() const { return max_order_; }
    const EquilibriumState& expansion_point() const { return eq_; }
    void set_expansion_point(EquilibriumState e) { eq_ = e; }

    void set_g(int p, int q, Coefficient c) { set(g_, p, q, std::move(c)); }
    void set_h(int p, int q, Coefficient c) { set(h_, p, q, std::move(c)); }

    const Coefficient& g(int p, int q) const { return get(g_, p, q); }
    const Coefficient& h(int p, int q) const { return get(h_, p, q); }

    const std::map<Key, Coefficient>& g_table() const { return g_; }
    const std::map<Key, Coefficient>& h_table() const { return h_; }

    /// Linear decay rate of the v equation (-a01), required positive.
    double v_decay() const { return -g(0, 1).constant(); }
    double w_decay() const { return -h(0, 1).constant(); }

    /// True when all entries of total order >= 2 vanish.
    bool is_linear() const {
        for (const auto* t : {&g_, &h_})
            for (const auto& [k, c] : *t)
                if (k.first + k.second >= 2 && !c.is_zero()) return false;
        return true;
    }

    void validate(const Domain& d) const {
        for (const auto* t : {&g_, &h_}) {
            const auto it = t->find({0, 1});
            if (it != t->end() && !it->second.is_constant())
                throw InvalidArgument("KineticsSpec: first-order self coefficient must be constant");
            const auto lin = t->find({1, 0});
            if (lin != t->end() && !lin->second.is_constant() && d.dim() == 2 &&
                !independent_of_last_axis(lin->second.field()))
                throw InvalidArgument(
                    "KineticsSpec: first-order cross coefficient must not depend on the last coordinate");
        }
        if (!(v_decay() > 0.0) || !(w_decay() > 0.0))
            throw InvalidArgument(
                "KineticsSpec: -a01 and -b01 must be positive (non-SPD elliptic operator rejected)");
    }

    static bool independent_of_last_axis(const Field& f, double tol = 1e-12) {
        const Domain& d = f.domain();
        const double scale = std::max(1.0, max_abs(f));
        for (std::size_t j = 1; j < d.nodes(1); ++j)
            for (std::size_t i = 0; i < d.nodes(0); ++i)
                if (std::abs(f[d.index(i, j)] - f[d.index(i, 0)]) > tol * scale) return false;
        return true;
    }

private:
    void set(std::map<Key, Coefficient>& t, int p, int q, Coefficient c) {
        if (p < 0 || q < 0 || p + q < 1 || p + q > max_order_)
            throw InvalidArgument("KineticsSpec: coefficient order out of range");
        t[{p, q}] = std::move(c);
    }
    static const Coefficient& get(const std::map<Key, Coefficient>& t, int p, int q) {
        static const Coefficient zero{0.0};
        const auto it = t.find({p, q});
        return it == t.end() ? zero : it->second;
    }

    int max_order_ = 2;
    EquilibriumState eq_;
    std::map<Key, Coefficient> g_;
    std::map<Key, Coefficient> h_;
};

/// Kinetics of the applied model: G = alpha u - beta v, H = gamma u - delta w.
inline KineticsSpec applied_kinetics(const ParameterSet& p, const EquilibriumState& eq,
                                     int max_order = 2) {
    KineticsSpec k(max_order, eq);
    k.set_g(1, 0, p.alpha);
    k.set_g(0, 1, -p.beta);
    k.set_h(1, 0, p.gamma);
    k.set_h(0, 1, -p.delta);
    return k;
}

struct SolverConfig {
    int tau = 0;
    double dt = 1e-3;
    double t_final = 1.0;
    double elliptic_tol = 1e-10;
    double cfl_safety = 0.9;
    int stride = 1;              ///< store every stride-th step
    double chem_speedup = 1.0;   ///< tau=1 only: tau dv/dt = s (Lap v + G)
    double picard_tol = 1e-13;
    int picard_max_iter = 200;

    std::size_t steps() const {
        const double n = t_final / dt;
        const auto rounded = static_cast<std::size_t>(std::llround(n));
        if (std::abs(n - static_cast<double>(rounded)) > 1e-6 * std::max(1.0, n))
            throw InvalidArgument("SolverConfig: t_final must be an integer multiple of dt");
        return rounded;
    }

    void validate() const {
        if (tau != 0 && tau != 1) throw InvalidArgument("SolverConfig: tau must be 0 or 1");
        if (!(dt > 0.0) || !(t_final > 0.0)) throw InvalidArgument("SolverConfig: dt, t_final must be > 0");
        if (!(cfl_safety > 0.0 && cfl_safety <= 1.0))
            throw InvalidArgument("SolverConfig: cfl_safety must lie in (0,1]");
        if (!(elliptic_tol > 0.0)) throw InvalidArgument("SolverConfig: elliptic_tol must be > 0");
        if (stride < 1) throw InvalidArgument("SolverConfig: stride must be >= 1");
        if (!(chem_speedup > 0.0)) throw InvalidArgument("SolverConfig: chem_speedup must be > 0");
        (void)steps();
    }
};

}  // namespace chemo
