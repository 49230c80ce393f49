#pragma once

// Identification pipeline. The forward map is only reachable through an
// Oracle; variations are extracted from its answers by finite differences
// about the trivial equilibrium u = v = w = 0, and each stage inverts an
// identity satisfied by the discrete variations:
//
//   r                 modal growth of u1 (the Laplacian's cosine modes are exact
//                     discrete eigenvectors)
//   a10, a01 (b..)    the chemical equations of the first variation
//   chi, xi, mu       the u2 equation, projected on parabolic CGO weights
//   a11, a20, a02 ..  the chemical equations of the second variation

#include <Eigen/Dense>
#include <cstdio>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "chemo/errors.hpp"
#include "chemo/forward.hpp"
#include "chemo/grid.hpp"
#include "chemo/model.hpp"
#include "chemo/probes.hpp"
#include "chemo/variation.hpp"

namespace chemo {

/// Black-box access to the measurement-generating forward map. Interior
/// trajectories of probing runs are exposed; parameters are not.
class Oracle {
public:
    Oracle(const Domain& d, ParameterSet truth, KineticsSpec kinetics, SolverConfig cfg)
        : domain_(d), truth_(std::move(truth)), kinetics_(std::move(kinetics)), cfg_(cfg) {
        truth_.validate();
        kinetics_.validate(d);
        cfg_.validate();
    }

    const Domain& domain() const { return domain_; }
    const SolverConfig& config() const { return cfg_; }
    std::size_t query_count() const { return queries_; }

    Trajectory query(const Field& f, const Field& g, const Field& h) {
        ++queries_;
        ForwardSolver fs(domain_, truth_, kinetics_, cfg_);
        return fs.solve(f, g, h);
    }

    MeasurementRecord measure_map(const Field& f, const Field& g, const Field& h) { return measure(query(f, g, h)); }

    ForwardMap as_map() {
        return [this](const Field& f, const Field& g, const Field& h) { return query(f, g, h); };
    }

private:
    Domain domain_;
    ParameterSet truth_;
    KineticsSpec kinetics_;
    SolverConfig cfg_;
    std::size_t queries_ = 0;
};

enum class TimeModel { continuous, imex_euler };
enum class CoefficientShape { constant, field, separable };

inline const char* to_string(TimeModel m) { return m == TimeModel::continuous ? "continuous" : "imex_euler"; }
inline const char* to_string(CoefficientShape s) {
    switch (s) {
        case CoefficientShape::constant: return "constant";
        case CoefficientShape::field: return "field";
        default: return "separable";
    }
}

/// Names of the second-order Taylor entries, g = v equation, h = w equation.
inline const std::array<std::pair<const char*, KineticsSpec::Key>, 3> kSecondOrderKeys{
    {{"11", {1, 1}}, {"20", {2, 0}}, {"02", {0, 2}}}};

struct PipelineConfig {
    std::vector<double> epsilons{1e-2, 5e-3, 2.5e-3};
    std::vector<std::array<std::size_t, 2>> r_modes{{1, 0}, {2, 0}};
    std::vector<std::array<std::size_t, 2>> second_modes{{1, 0}, {2, 0}, {3, 0}};
    double probe_amplitude = 0.5;
    TimeModel time_model = TimeModel::imex_euler;
    double u_floor_rel = 1e-4;
    double mode_sigma_floor = 1e-3;
    double nonexp_tol = 1e-3;  ///< rms of the log-amplitude fit
    double cgo_tol = 1e-2;
    double cond_max = 1e6;
    double residual_tol = 1e-2;
    CoefficientShape alpha_shape = CoefficientShape::constant;
    CoefficientShape gamma_shape = CoefficientShape::constant;
    bool second_order = true;
    std::map<std::string, CoefficientShape> second_shapes;  ///< "g02" -> separable, default constant
    double declared_gamma0 = 1.0;
    std::size_t moment_order = 6;
    double lambda_reg = 1e-8;
    double separability_tol = 0.1;

    /// Defaults with probing modes suited to the domain's dimension.
    static PipelineConfig for_domain(const Domain& d) {
        PipelineConfig c;
        if (d.dim() == 2) {
            c.r_modes = {{1, 0}, {1, 1}};
            c.second_modes = {{1, 0}, {0, 1}, {1, 1}};
        }
        return c;
    }

    CoefficientShape second_shape(const std::string& name) const {
        const auto it = second_shapes.find(name);
        return it == second_shapes.end() ? CoefficientShape::constant : it->second;
    }
};

// ---------------------------------------------------------------------------
// Probing experiments

struct ProbeExperiment {
    std::string label;
    Field f1, g1, h1;
};

/// base + amplitude * cosine mode k.
inline Field probe_field(const Domain& d, std::array<std::size_t, 2> k, double amplitude, double base = 1.0) {
    Field out = neumann_eigenmode(d, k).values;
    for (double& v : out.raw()) v = base + amplitude * v;
    return out;
}

inline std::string mode_label(std::array<std::size_t, 2> k) {
    return "(" + std::to_string(k[0]) + "," + std::to_string(k[1]) + ")";
}

/// Runs the eps ladder of one probing experiment through the oracle.
class ProbeRunner {
public:
    ProbeRunner(Oracle& oracle, std::vector<double> epsilons) : oracle_(oracle), eps_(std::move(epsilons)) {}

    VariationStack run(const ProbeExperiment& e, int order) {
        PerturbationFamily fam = PerturbationFamily::first_order(e.f1, e.g1, e.h1);
        fam.epsilons = eps_;
        const KineticsSpec origin(1, EquilibriumState{});
        ForwardMap map = [this](const Field& f, const Field& g, const Field& h) {
            const bool zero = max_abs(f) == 0.0 && max_abs(g) == 0.0 && max_abs(h) == 0.0;
            if (zero) {
                if (!zero_) zero_ = oracle_.query(f, g, h);
                return *zero_;
            }
            return oracle_.query(f, g, h);
        };
        used_.push_back(e.label);
        return extract_variation_fd(map, origin, fam, order);
    }

    const std::vector<std::string>& experiments() const { return used_; }

private:
    Oracle& oracle_;
    std::vector<double> eps_;
    std::optional<Trajectory> zero_;
    std::vector<std::string> used_;
};

// ---------------------------------------------------------------------------
// Stage 1: growth rate r

struct ModeFit {
    std::array<std::size_t, 2> index{0, 0};
    double lambda = 0.0;  ///< eigenvalue used by the time model
    double slope = 0.0;   ///< d log(amplitude) / dt
    double r = 0.0;
    double sigma = 0.0;
    double log_rms = 0.0;
    std::size_t samples = 0;
};

struct RResult {
    double r = 0.0;
    double sigma = 0.0;
    std::vector<ModeFit> fits;
    double cgo_drift = 0.0;  ///< max relative drift of int u1 * omega over time
};

namespace detail {

inline std::string format_sci(double c) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3g", c);
    return buf;
}

inline double modal_amplitude(const Field& u, const Field& mode) {
    return inner_product(u, mode) / inner_product(mode, mode);
}

/// Time factor of the discrete or continuous mode e^{theta t}.
inline double mode_factor(TimeModel model, double r, double lambda, double t, double dt) {
    if (model == TimeModel::continuous) return std::exp((r - lambda) * t);
    const double n = std::round(t / dt);
    return std::pow((1.0 + r * dt) / (1.0 + lambda * dt), n);
}

}  // namespace detail

/// Fits the modal growth of a first variation u1 (trajectory component u).
inline ModeFit fit_mode(const Trajectory& u1, std::array<std::size_t, 2> k, TimeModel model,
                        double nonexp_tol = 1e-3) {
    const EigenMode m = neumann_eigenmode(u1.domain, k);
    std::vector<double> t, la;
    double a0 = 0.0;
    std::vector<double> amp;
    for (const State& s : u1.states) amp.push_back(detail::modal_amplitude(s.u, m.values));
    for (double a : amp) a0 = std::max(a0, std::abs(a));
    if (!(a0 > 0.0)) throw NumericalFailure("r", "mode " + mode_label(k) + " is not excited by the probe");
    const double sign = amp.front() >= 0.0 ? 1.0 : -1.0;
    for (std::size_t n = 0; n < amp.size(); ++n) {
        if (sign * amp[n] < 1e-3 * a0) continue;
        t.push_back(u1.times[n]);
        la.push_back(std::log(sign * amp[n]));
    }
    if (t.size() < 3) throw NumericalFailure("r", "mode " + mode_label(k) + " decays below the fit floor too fast");
    const double nt = static_cast<double>(t.size());
    double st = 0, sl = 0, stt = 0, stl = 0;
    for (std::size_t i = 0; i < t.size(); ++i) {
        st += t[i];
        sl += la[i];
        stt += t[i] * t[i];
        stl += t[i] * la[i];
    }
    const double den = nt * stt - st * st;
    const double slope = (nt * stl - st * sl) / den;
    const double icpt = (sl - slope * st) / nt;
    double ss = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) {
        const double e = la[i] - icpt - slope * t[i];
        ss += e * e;
    }
    ModeFit f;
    f.index = k;
    f.samples = t.size();
    f.slope = slope;
    f.log_rms = std::sqrt(ss / nt);
    if (f.log_rms > nonexp_tol)
        throw NumericalFailure("r", "non-exponential modal decay for mode " + mode_label(k) + " (log rms " +
                                        detail::format_sci(f.log_rms) + "); model mismatch");
    const double se = nt > 2 ? std::sqrt(ss / (nt - 2) * nt / den) : 0.0;
    if (model == TimeModel::continuous) {
        f.lambda = m.lambda;
        f.r = slope + m.lambda;
        f.sigma = se;
    } else {
        const double dt = u1.dt;
        f.lambda = m.lambda_h;
        const double rho = std::exp(slope * dt);
        f.r = (rho * (1.0 + m.lambda_h * dt) - 1.0) / dt;
        f.sigma = se * rho * (1.0 + m.lambda_h * dt);
    }
    return f;
}

/// Combines per-mode fits and checks the CGO identity: with omega the mode
/// times its inverse time factor, int u1 omega is constant in time.
inline RResult estimate_r(const std::vector<std::pair<const Trajectory*, std::array<std::size_t, 2>>>& inputs,
                          TimeModel model, double sigma_floor = 1e-3, double nonexp_tol = 1e-3,
                          double cgo_tol = 1e-2) {
    if (inputs.size() < 2) throw InvalidArgument("recover_r: needs at least two modes");
    RResult res;
    for (std::size_t i = 0; i < inputs.size(); ++i)
        for (std::size_t j = 0; j < i; ++j) {
            const EigenMode a = neumann_eigenmode(inputs[i].first->domain, inputs[i].second);
            const EigenMode b = neumann_eigenmode(inputs[j].first->domain, inputs[j].second);
            if (std::abs(a.lambda - b.lambda) < 1e-12 * std::max(1.0, a.lambda))
                throw InvalidArgument("recover_r: modes must have distinct eigenvalues");
        }
    double wsum = 0.0, acc = 0.0;
    for (const auto& [traj, k] : inputs) {
        ModeFit f = fit_mode(*traj, k, model, nonexp_tol);
        const double s = std::max(f.sigma, sigma_floor);
        wsum += 1.0 / (s * s);
        acc += f.r / (s * s);
        res.fits.push_back(f);
    }
    res.r = acc / wsum;
    res.sigma = 1.0 / std::sqrt(wsum);
    for (const ModeFit& f : res.fits)
        if (std::abs(f.r - res.r) > 3.0 * std::max(f.sigma, sigma_floor))
            throw NumericalFailure("r", "estimates from different modes disagree beyond 3 sigma (mode " +
                                            mode_label(f.index) + ": " + detail::format_sci(f.r) + " vs " +
                                            detail::format_sci(res.r) + ")");
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        const Trajectory& tr = *inputs[i].first;
        const EigenMode m = neumann_eigenmode(tr.domain, inputs[i].second);
        const double lam = res.fits[i].lambda;
        // Only where the mode is above the fit floor; later samples are roundoff.
        const double c0 = inner_product(tr.states.front().u, m.values);
        for (std::size_t n = 0; n < tr.states.size(); ++n) {
            const double raw = inner_product(tr.states[n].u, m.values);
            if (std::abs(raw) < 1e-3 * std::abs(c0)) break;
            const double c = raw / detail::mode_factor(model, res.r, lam, tr.times[n], tr.dt);
            res.cgo_drift = std::max(res.cgo_drift, std::abs(c - c0) / std::abs(c0));
        }
    }
    if (res.cgo_drift > cgo_tol)
        throw NumericalFailure("r", "CGO identity violated with the fitted r (drift " +
                                        detail::format_sci(res.cgo_drift) + ")");
    return res;
}

inline std::vector<ProbeExperiment> r_experiments(const Domain& d, const PipelineConfig& cfg) {
    std::vector<ProbeExperiment> out;
    for (const auto& k : cfg.r_modes)
        out.push_back({"first-order f1=1+a*phi" + mode_label(k), probe_field(d, k, cfg.probe_amplitude), Field(d),
                       Field(d)});
    return out;
}

inline RResult recover_r(Oracle& oracle, const PipelineConfig& cfg) {
    ProbeRunner runner(oracle, cfg.epsilons);
    std::vector<VariationStack> stacks;
    const auto exps = r_experiments(oracle.domain(), cfg);
    for (const auto& e : exps) stacks.push_back(runner.run(e, 1));
    std::vector<std::pair<const Trajectory*, std::array<std::size_t, 2>>> in;
    for (std::size_t i = 0; i < exps.size(); ++i) in.emplace_back(&stacks[i].order1, cfg.r_modes[i]);
    return estimate_r(in, cfg.time_model, cfg.mode_sigma_floor, cfg.nonexp_tol, cfg.cgo_tol);
}

// ---------------------------------------------------------------------------
// Stage 2: linear kinetics

struct LinearKinetics {
    Coefficient a10, b10;
    double a01 = 0.0, b01 = 0.0;
    Field a10_pointwise, b10_pointwise;
    double a10_misfit = 0.0, b10_misfit = 0.0;  ///< projection misfit
    double residual = 0.0;                      ///< relative residual of the identities
};

namespace detail {

inline void require_dense(const Trajectory& t, const char* who) {
    if (t.stride != 1 || t.states.size() < 2)
        throw InvalidArgument(std::string(who) + ": needs every time step (stride 1)");
}

/// Averages along the last axis (2D) or over the whole line (1D, constant).
inline Field project_last_axis(const Field& f) {
    const Domain& d = f.domain();
    Field out(d);
    if (d.dim() == 1) {
        out = Field(d, quadrature(f) / d.volume());
        return out;
    }
    for (std::size_t i = 0; i < d.nodes(0); ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < d.nodes(1); ++j) s += d.axis_weight(1, j) * f[d.index(i, j)];
        s /= d.length(1);
        for (std::size_t j = 0; j < d.nodes(1); ++j) out[d.index(i, j)] = s;
    }
    return out;
}

inline double relative_l2(const Field& a, const Field& ref) {
    const double n = l2_norm(ref);
    return n > 0.0 ? l2_norm(a - ref) / n : l2_norm(a);
}

inline Coefficient shape_coefficient(const Field& pointwise, CoefficientShape shape, double& misfit) {
    if (shape == CoefficientShape::constant) {
        const double m = quadrature(pointwise) / pointwise.domain().volume();
        misfit = relative_l2(Field(pointwise.domain(), m), pointwise);
        return Coefficient(m);
    }
    const Field p = project_last_axis(pointwise);
    misfit = relative_l2(p, pointwise);
    if (pointwise.domain().dim() == 1) return Coefficient(pointwise);
    return Coefficient(p);
}

/// Pointwise least-squares ratio sum_t num*den / sum_t den^2 over masked
/// samples, accumulated across calls.
struct RatioAccumulator {
    explicit RatioAccumulator(const Domain& d) : num(d.size(), 0.0), den(d.size(), 0.0) {}
    void add(const Field& target, const Field& factor, double floor) {
        for (std::size_t k = 0; k < num.size(); ++k)
            if (std::abs(factor[k]) >= floor) {
                num[k] += target[k] * factor[k];
                den[k] += factor[k] * factor[k];
            }
    }
    Field result(const Domain& d) const {
        Field out(d);
        for (std::size_t k = 0; k < num.size(); ++k) {
            if (den[k] == 0.0)
                throw NumericalFailure("linear_kinetics", "probe too weak: |u1| below u_floor at some nodes");
            out[k] = num[k] / den[k];
        }
        return out;
    }
    std::vector<double> num, den;
};

inline double traj_max_abs(const Trajectory& t, Field State::*m) {
    double a = 0.0;
    for (const State& s : t.states) a = std::max(a, max_abs(s.*m));
    return a;
}

}  // namespace detail

/// tau = 0. From two or more first variations with different spatial
/// patterns: eliminating a10 between experiments i, j gives
///   a01 sum (C_i U_j - C_j U_i)^2 = sum (C_i U_j - C_j U_i)(U_i Lap C_j - U_j Lap C_i),
/// then a10 = (-Lap C - a01 C)/U, time-averaged where |U| >= u_floor.
inline std::pair<double, Field> linear_chemical_tau0(const std::vector<const Trajectory*>& first,
                                                     Field State::*chem, double u_floor_rel) {
    if (first.size() < 2) throw InvalidArgument("linear_kinetics: tau=0 needs two first-order experiments");
    const Domain& d = first.front()->domain;
    double umax = 0.0;
    for (const Trajectory* t : first) umax = std::max(umax, detail::traj_max_abs(*t, &State::u));
    if (!(umax > 0.0)) throw NumericalFailure("linear_kinetics", "probe too weak: first variation of u vanishes");
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < first.size(); ++i)
        for (std::size_t j = 0; j < i; ++j) {
            const Trajectory& a = *first[i];
            const Trajectory& b = *first[j];
            for (std::size_t n = 0; n < a.states.size(); ++n) {
                const Field& ua = a.states[n].u;
                const Field& ub = b.states[n].u;
                const Field& ca = a.states[n].*chem;
                const Field& cb = b.states[n].*chem;
                const Field la = laplacian_neumann(ca), lb = laplacian_neumann(cb);
                for (std::size_t k = 0; k < d.size(); ++k) {
                    const double q = ca[k] * ub[k] - cb[k] * ua[k];
                    num += d.weight(k) * q * (ua[k] * lb[k] - ub[k] * la[k]);
                    den += d.weight(k) * q * q;
                }
            }
        }
    if (!(den > 0.0))
        throw NumericalFailure("linear_kinetics", "first-order experiments are not independent (same pattern)");
    const double a01 = num / den;
    detail::RatioAccumulator acc(d);
    for (const Trajectory* t : first)
        for (const State& s : t->states) {
            Field target = laplacian_neumann(s.*chem);
            for (std::size_t k = 0; k < target.size(); ++k) target[k] = -target[k] - a01 * (s.*chem)[k];
            acc.add(target, s.u, u_floor_rel * umax);
        }
    return {a01, acc.result(d)};
}

/// tau = 1, stage A: with u1 = 0 the chemical obeys D_t C = Lap C - decay C.
inline double decay_tau1(const Trajectory& selective, Field State::*chem) {
    detail::require_dense(selective, "linear_kinetics");
    const Domain& d = selective.domain;
    const double dt = selective.dt;
    double num = 0.0, den = 0.0;
    for (std::size_t n = 0; n + 1 < selective.states.size(); ++n) {
        const Field& c0 = selective.states[n].*chem;
        const Field& c1 = selective.states[n + 1].*chem;
        const Field lap = laplacian_neumann(c1);
        for (std::size_t k = 0; k < d.size(); ++k) {
            num += d.weight(k) * c1[k] * ((c1[k] - c0[k]) / dt - lap[k]);
            den += d.weight(k) * c1[k] * c1[k];
        }
    }
    if (!(den > 0.0)) throw NumericalFailure("linear_kinetics", "selective probe leaves the chemical at zero");
    return -num / den;
}

/// tau = 1, stage B: a10 U^{n+1} = D_t C - Lap C^{n+1} + decay C^{n+1}.
inline Field cross_tau1(const std::vector<const Trajectory*>& first, Field State::*chem, double decay,
                        double u_floor_rel) {
    const Domain& d = first.front()->domain;
    double umax = 0.0;
    for (const Trajectory* t : first) umax = std::max(umax, detail::traj_max_abs(*t, &State::u));
    if (!(umax > 0.0)) throw NumericalFailure("linear_kinetics", "probe too weak: first variation of u vanishes");
    detail::RatioAccumulator acc(d);
    for (const Trajectory* t : first) {
        detail::require_dense(*t, "linear_kinetics");
        for (std::size_t n = 0; n + 1 < t->states.size(); ++n) {
            const Field& c0 = t->states[n].*chem;
            const Field& c1 = t->states[n + 1].*chem;
            Field target = laplacian_neumann(c1);
            for (std::size_t k = 0; k < d.size(); ++k)
                target[k] = (c1[k] - c0[k]) / t->dt - target[k] + decay * c1[k];
            acc.add(target, t->states[n + 1].u, u_floor_rel * umax);
        }
    }
    return acc.result(d);
}

inline ProbeExperiment selective_experiment(const Domain& d, const PipelineConfig& cfg) {
    const auto k1 = cfg.r_modes.front();
    const auto k2 = cfg.r_modes.size() > 1 ? cfg.r_modes[1] : k1;
    return {"selective f1=0, g1=1+a*phi" + mode_label(k1) + ", h1=1+a*phi" + mode_label(k2), Field(d),
            probe_field(d, k1, cfg.probe_amplitude), probe_field(d, k2, cfg.probe_amplitude)};
}

namespace detail {

inline double linear_residual(const std::vector<const Trajectory*>& first, const LinearKinetics& lk, int tau) {
    double num = 0.0, den = 0.0;
    for (const Trajectory* t : first) {
        const Domain& d = t->domain;
        const std::size_t start = tau == 0 ? 0 : 1;
        for (std::size_t n = start; n < t->states.size(); ++n) {
            const State& s = t->states[n];
            for (auto [chem, a10, a01] : {std::tuple{&State::v, &lk.a10, lk.a01}, std::tuple{&State::w, &lk.b10, lk.b01}}) {
                const Field lap = laplacian_neumann(s.*chem);
                for (std::size_t k = 0; k < d.size(); ++k) {
                    double dtc = 0.0;
                    if (tau == 1) dtc = ((s.*chem)[k] - (t->states[n - 1].*chem)[k]) / t->dt;
                    const double res = dtc - lap[k] - a01 * (s.*chem)[k] - a10->at(k) * s.u[k];
                    num += d.weight(k) * res * res;
                    den += d.weight(k) * (dtc * dtc + lap[k] * lap[k]);
                }
            }
        }
    }
    return den > 0.0 ? std::sqrt(num / den) : 0.0;
}

}  // namespace detail

/// Linear kinetics from first variations. `first` are experiments with
/// f1 > 0 (and, for tau=1, zero chemical data); `selective` is the tau=1
/// f1 = 0 experiment.
inline LinearKinetics linear_kinetics_from_variations(const std::vector<const Trajectory*>& first,
                                                      const Trajectory* selective, int tau,
                                                      const PipelineConfig& cfg) {
    if (first.empty()) throw InvalidArgument("linear_kinetics: no first-order experiments");
    LinearKinetics lk;
    if (tau == 0) {
        auto [a01, a10] = linear_chemical_tau0(first, &State::v, cfg.u_floor_rel);
        auto [b01, b10] = linear_chemical_tau0(first, &State::w, cfg.u_floor_rel);
        lk.a01 = a01;
        lk.b01 = b01;
        lk.a10_pointwise = std::move(a10);
        lk.b10_pointwise = std::move(b10);
    } else {
        if (!selective) throw InvalidArgument("linear_kinetics: tau=1 needs the f1=0 selective experiment");
        lk.a01 = -decay_tau1(*selective, &State::v);
        lk.b01 = -decay_tau1(*selective, &State::w);
        lk.a10_pointwise = cross_tau1(first, &State::v, -lk.a01, cfg.u_floor_rel);
        lk.b10_pointwise = cross_tau1(first, &State::w, -lk.b01, cfg.u_floor_rel);
    }
    if (!(lk.a01 < 0.0) || !(lk.b01 < 0.0))
        throw NumericalFailure("linear_kinetics", "recovered a01/b01 violates the beta, delta > 0 convention (a01 = " +
                                                      detail::format_sci(lk.a01) + ", b01 = " + detail::format_sci(lk.b01) +
                                                      ")");
    lk.a10 = detail::shape_coefficient(lk.a10_pointwise, cfg.alpha_shape, lk.a10_misfit);
    lk.b10 = detail::shape_coefficient(lk.b10_pointwise, cfg.gamma_shape, lk.b10_misfit);
    lk.residual = detail::linear_residual(first, lk, tau);
    return lk;
}

inline LinearKinetics recover_linear_kinetics(Oracle& oracle, double r, const PipelineConfig& cfg) {
    (void)r;  // the identities below hold for the measured u1 whatever r is
    ProbeRunner runner(oracle, cfg.epsilons);
    std::vector<VariationStack> stacks;
    for (const auto& e : r_experiments(oracle.domain(), cfg)) stacks.push_back(runner.run(e, 1));
    std::vector<const Trajectory*> first;
    for (const auto& s : stacks) first.push_back(&s.order1);
    std::optional<VariationStack> sel;
    if (oracle.config().tau == 1) sel = runner.run(selective_experiment(oracle.domain(), cfg), 1);
    return linear_kinetics_from_variations(first, sel ? &sel->order1 : nullptr, oracle.config().tau, cfg);
}

// ---------------------------------------------------------------------------
// Stage 3: chi, xi, mu

struct ChiXiMuOptions {
    std::optional<double> fixed_chi;
    std::optional<double> fixed_xi;
    double cond_max = 1e6;
    double residual_tol = 1e-2;
    int max_upwind_iterations = 10;
};

struct ChiXiMuResult {
    double chi = 0.0, xi = 0.0, mu = 0.0;
    double residual = 0.0;
    double cond = 0.0;
    int upwind_iterations = 0;
    std::size_t rows = 0;
};

namespace detail {

/// Centred-flux divergence of u grad(potential).
inline Field centred_flux_div(const Field& u, const Field& potential) {
    const Domain& d = u.domain();
    Field out(d);
    for_each_face(d, [&](std::size_t a, std::size_t k0, std::size_t k1) {
        const double flux = (potential[k1] - potential[k0]) / d.spacing(a) * 0.5 * (u[k0] + u[k1]);
        out[k0] += flux / control_width(d, a, k0);
        out[k1] -= flux / control_width(d, a, k1);
    });
    return out;
}

inline std::vector<std::vector<double>> default_zetas(const Domain& d) {
    const double a = M_PI / d.length(0);
    if (d.dim() == 1) return {{0.0}, {a}, {2.0 * a}, {3.0 * a}};
    const double b = M_PI / d.length(1);
    return {{0.0, 0.0}, {a, 0.0}, {0.0, b}, {a, b}, {2.0 * a, 0.0}, {0.0, 2.0 * b}};
}

inline Eigen::MatrixXd column_normalised(const Eigen::MatrixXd& a) {
    Eigen::MatrixXd out = a;
    for (Eigen::Index c = 0; c < a.cols(); ++c) {
        const double n = a.col(c).norm();
        if (n > 0.0) out.col(c) /= n;
    }
    return out;
}

}  // namespace detail

/// u2 identity, linear in (chi, xi, mu) once u1, v1, w1 are known:
///   D_t U2 - Lap U2^{n+1} - r U2^n
///     = chi (-2 div(U1 grad V1)) + xi (2 div(U1 grad W1)) + mu (-2 U1^2),
/// with every term at level n. Projected on parabolic CGO weights, stacked
/// over experiments (real and imaginary rows, normalised per experiment). The
/// weights are exp(-i zeta.x), the CGO solutions of the adjoint with rate
/// |zeta|^2.
inline ChiXiMuResult chi_xi_mu_from_variations(const std::vector<const VariationStack*>& stacks, double r,
                                               const ChiXiMuOptions& opt = {}) {
    if (stacks.empty()) throw InvalidArgument("chi_xi_mu: no experiments");
    for (const VariationStack* s : stacks) {
        if (!s->order2) throw InvalidArgument("chi_xi_mu: experiments need second variations");
        detail::require_dense(s->order1, "chi_xi_mu");
    }
    const Domain& d = stacks.front()->order1.domain;
    const auto zetas = detail::default_zetas(d);
    std::vector<bool> free{!opt.fixed_chi.has_value(), !opt.fixed_xi.has_value(), true};
    const int nfree = static_cast<int>(std::count(free.begin(), free.end(), true));

    // Targets are fixed; regressors depend on the upwind choice.
    std::vector<SpaceTimeData> targets;
    for (const VariationStack* s : stacks) {
        const Trajectory& t2 = *s->order2;
        SpaceTimeData y;
        for (std::size_t n = 0; n + 1 < t2.states.size(); ++n) {
            const Field& a = t2.states[n].u;
            const Field& b = t2.states[n + 1].u;
            Field lap = laplacian_neumann(b);
            Field val(d);
            for (std::size_t k = 0; k < d.size(); ++k) val[k] = (b[k] - a[k]) / t2.dt - lap[k] - r * a[k];
            y.times.push_back(t2.times[n]);
            y.slices.push_back(std::move(val));
        }
        targets.push_back(std::move(y));
    }

    auto assemble = [&](double chi, double xi, bool centred, Eigen::MatrixXd& a, Eigen::VectorXd& b,
                        std::vector<signed char>& pattern) {
        std::vector<std::array<double, 3>> rows;
        std::vector<double> rhs;
        pattern.clear();
        for (std::size_t e = 0; e < stacks.size(); ++e) {
            const Trajectory& t1 = stacks[e]->order1;
            std::array<SpaceTimeData, 3> reg;
            for (std::size_t n = 0; n + 1 < t1.states.size(); ++n) {
                const State& s = t1.states[n];
                Field pot = chi * s.v;
                pot.axpy(-xi, s.w);
                Field rc(d), rx(d);
                if (centred) {
                    rc = detail::centred_flux_div(s.u, s.v);
                    rx = detail::centred_flux_div(s.u, s.w);
                } else {
                    rc = advective_flux_div(s.u, s.v, 1.0, &pot);
                    rx = advective_flux_div(s.u, s.w, 1.0, &pot);
                    detail::for_each_face(d, [&](std::size_t, std::size_t k0, std::size_t k1) {
                        pattern.push_back(pot[k1] - pot[k0] >= 0.0 ? 1 : -1);
                    });
                }
                Field rm(d);
                for (std::size_t k = 0; k < d.size(); ++k) {
                    rc[k] *= -2.0;
                    rx[k] *= 2.0;
                    rm[k] = -2.0 * s.u[k] * s.u[k];
                }
                for (int c = 0; c < 3; ++c) reg[c].times.push_back(t1.times[n]);
                reg[0].slices.push_back(std::move(rc));
                reg[1].slices.push_back(std::move(rx));
                reg[2].slices.push_back(std::move(rm));
            }
            // One scale per experiment: rows where every regressor nearly
            // vanishes keep their small weight instead of amplifying noise.
            std::vector<std::array<double, 3>> erows;
            std::vector<double> erhs;
            double escale = 0.0;
            for (const auto& z : zetas) {
                // rate = |zeta|^2 keeps the weight flat in time; with rate = r the
                // factor exp((|zeta|^2 - r) t) amplifies late-time roundoff.
                double zz = 0.0;
                for (double c : z) zz += c * c;
                const CGOProbe probe = cgo_parabolic(z, zz);
                const cplx ty = weighted_integral(targets[e], probe);
                std::array<cplx, 3> tr{};
                for (int c = 0; c < 3; ++c) tr[c] = weighted_integral(reg[c], probe);
                for (int part = 0; part < 2; ++part) {
                    auto pick = [part](cplx v) { return part == 0 ? v.real() : v.imag(); };
                    std::array<double, 3> row{pick(tr[0]), pick(tr[1]), pick(tr[2])};
                    double yv = pick(ty);
                    const double size = std::max({std::abs(row[0]), std::abs(row[1]), std::abs(row[2])});
                    if (!(size > 0.0)) continue;
                    if (opt.fixed_chi) yv -= *opt.fixed_chi * row[0];
                    if (opt.fixed_xi) yv -= *opt.fixed_xi * row[1];
                    escale = std::max(escale, size);
                    erows.push_back(row);
                    erhs.push_back(yv);
                }
            }
            for (std::size_t i = 0; i < erows.size(); ++i) {
                for (double& v : erows[i]) v /= escale;
                rows.push_back(erows[i]);
                rhs.push_back(erhs[i] / escale);
            }
        }
        a.resize(static_cast<Eigen::Index>(rows.size()), nfree);
        b.resize(static_cast<Eigen::Index>(rows.size()));
        for (std::size_t i = 0; i < rows.size(); ++i) {
            int c = 0;
            for (int j = 0; j < 3; ++j)
                if (free[j]) a(static_cast<Eigen::Index>(i), c++) = rows[i][j];
            b(static_cast<Eigen::Index>(i)) = rhs[i];
        }
    };

    ChiXiMuResult res;
    double chi = opt.fixed_chi.value_or(0.0), xi = opt.fixed_xi.value_or(0.0), mu = 0.0;
    std::vector<signed char> last_pattern;
    for (int it = 0; it <= opt.max_upwind_iterations; ++it) {
        Eigen::MatrixXd a;
        Eigen::VectorXd b;
        std::vector<signed char> pattern;
        assemble(chi, xi, it == 0, a, b, pattern);
        if (a.rows() < nfree) throw NumericalFailure("chi_xi_mu", "too few independent probe rows");
        res.cond = detail::condition_number(detail::column_normalised(a));
        if (!(res.cond <= opt.cond_max))
            throw NumericalFailure("chi_xi_mu", "regressors dependent (condition number " + detail::format_sci(res.cond) +
                                                    " > " + detail::format_sci(opt.cond_max) + "); probe redesign needed");
        const Eigen::VectorXd x = a.colPivHouseholderQr().solve(b);
        int c = 0;
        if (free[0]) chi = x(c++);
        if (free[1]) xi = x(c++);
        mu = x(c++);
        res.rows = static_cast<std::size_t>(a.rows());
        res.residual = b.norm() > 0.0 ? (a * x - b).norm() / b.norm() : 0.0;
        res.upwind_iterations = it;
        if (it > 0 && pattern == last_pattern) break;
        if (it > 0) last_pattern = std::move(pattern);
        if (it == 0) last_pattern.clear();
    }
    if (res.residual > opt.residual_tol)
        throw NumericalFailure("chi_xi_mu", "identity residual " + detail::format_sci(res.residual) +
                                                " after the fit exceeds tolerance; model mismatch");
    res.chi = chi;
    res.xi = xi;
    res.mu = mu;
    return res;
}

inline std::vector<ProbeExperiment> second_experiments(const Domain& d, int tau, const PipelineConfig& cfg) {
    std::vector<ProbeExperiment> out;
    const auto& m = cfg.second_modes;
    const std::size_t n = m.size();
    const double a = cfg.probe_amplitude;
    for (std::size_t e = 0; e < n; ++e) {
        ProbeExperiment x;
        x.f1 = probe_field(d, m[e], a);
        if (tau == 1) {
            x.g1 = probe_field(d, m[(e + 1) % n], a);
            x.h1 = probe_field(d, m[(e + 2) % n], -0.5 * a, 0.5);
            x.label = "second-order f1=1+a*phi" + mode_label(m[e]) + ", g1=1+a*phi" + mode_label(m[(e + 1) % n]) +
                      ", h1=0.5-0.5a*phi" + mode_label(m[(e + 2) % n]);
        } else {
            x.g1 = Field(d);
            x.h1 = Field(d);
            x.label = "second-order f1=1+a*phi" + mode_label(m[e]);
        }
        out.push_back(std::move(x));
    }
    return out;
}

inline ChiXiMuResult recover_chi_xi_mu(Oracle& oracle, double r, const PipelineConfig& cfg,
                                       const ChiXiMuOptions& opt = {}) {
    ProbeRunner runner(oracle, cfg.epsilons);
    std::vector<VariationStack> stacks;
    for (const auto& e : second_experiments(oracle.domain(), oracle.config().tau, cfg))
        stacks.push_back(runner.run(e, 2));
    std::vector<const VariationStack*> ptr;
    for (const auto& s : stacks) ptr.push_back(&s);
    ChiXiMuOptions o = opt;
    o.cond_max = cfg.cond_max;
    o.residual_tol = cfg.residual_tol;
    return chi_xi_mu_from_variations(ptr, r, o);
}

// ---------------------------------------------------------------------------
// Stage 4: second-order kinetics

struct SecondOrderEstimate {
    std::string name;  ///< g11, g20, g02, h11, h20, h02
    CoefficientShape shape = CoefficientShape::constant;
    Coefficient value;
    Field pointwise;
    std::optional<MomentRecovery> separable;
    double separability_misfit = 0.0;
};

struct SecondKineticsResult {
    std::vector<SecondOrderEstimate> estimates;
    double residual = 0.0;
    double cond = 0.0;

    const SecondOrderEstimate& get(const std::string& name) const {
        for (const auto& e : estimates)
            if (e.name == name) return e;
        throw InvalidArgument("second kinetics: no estimate named " + name);
    }
};

namespace detail {

/// Per-node normal equations of the three-coefficient fit.
struct NodeSystems {
    explicit NodeSystems(std::size_t n) : a(n, Eigen::Matrix3d::Zero()), b(n, Eigen::Vector3d::Zero()) {}
    std::vector<Eigen::Matrix3d> a;
    std::vector<Eigen::Vector3d> b;
    double target_sq = 0.0;  ///< sum of squared identity terms, the residual's scale
};

}  // namespace detail

/// Chemical equation of the second variation (component `chem`, linear part
/// known: a10, decay). The unknown sources are
///   2 a11 U1 C1 + 2 a20 U1^2 + 2 a02 C1^2,
/// sampled at every stored time (tau=0) or every transition (tau=1), and
/// fitted jointly across experiments.
inline std::vector<SecondOrderEstimate> second_chemical_fit(const std::vector<const VariationStack*>& stacks,
                                                            Field State::*chem, const Coefficient& a10,
                                                            double decay, int tau, const std::string& prefix,
                                                            const PipelineConfig& cfg, double& residual,
                                                            double& cond) {
    const Domain& d = stacks.front()->order1.domain;
    const std::size_t nn = d.size();
    detail::NodeSystems sys(nn);
    auto visit = [&](auto&& sink) {
        for (const VariationStack* s : stacks) {
            const Trajectory& t1 = s->order1;
            const Trajectory& t2 = *s->order2;
            if (tau == 0) {
                for (std::size_t n = 0; n < t1.states.size(); ++n) {
                    const State& a = t1.states[n];
                    const State& b = t2.states[n];
                    const Field lap = laplacian_neumann(b.*chem);
                    for (std::size_t k = 0; k < nn; ++k) {
                        const double q1 = lap[k], q2 = decay * (b.*chem)[k], q3 = a10.at(k) * b.u[k];
                        const Eigen::Vector3d x(2.0 * a.u[k] * (a.*chem)[k], 2.0 * a.u[k] * a.u[k],
                                                2.0 * (a.*chem)[k] * (a.*chem)[k]);
                        sink(k, x, -q1 + q2 - q3, q1 * q1 + q2 * q2 + q3 * q3);
                    }
                }
            } else {
                detail::require_dense(t1, "second_kinetics");
                for (std::size_t n = 0; n + 1 < t1.states.size(); ++n) {
                    const State& a0 = t1.states[n];
                    const State& a1 = t1.states[n + 1];
                    const State& b0 = t2.states[n];
                    const State& b1 = t2.states[n + 1];
                    const Field lap = laplacian_neumann(b1.*chem);
                    for (std::size_t k = 0; k < nn; ++k) {
                        const double q0 = ((b1.*chem)[k] - (b0.*chem)[k]) / t2.dt, q1 = lap[k],
                                     q2 = decay * (b1.*chem)[k], q3 = a10.at(k) * b1.u[k];
                        const Eigen::Vector3d x(2.0 * a1.u[k] * (a0.*chem)[k], 2.0 * a1.u[k] * a1.u[k],
                                                2.0 * (a0.*chem)[k] * (a0.*chem)[k]);
                        sink(k, x, q0 - q1 + q2 - q3, q0 * q0 + q1 * q1 + q2 * q2 + q3 * q3);
                    }
                }
            }
        }
    };
    visit([&](std::size_t k, const Eigen::Vector3d& x, double y, double terms) {
        sys.a[k] += x * x.transpose();
        sys.b[k] += x * y;
        sys.target_sq += d.weight(k) * terms;
    });

    Eigen::Matrix3d global = Eigen::Matrix3d::Zero();
    double trace = 0.0;
    for (std::size_t k = 0; k < nn; ++k) {
        global += d.weight(k) * sys.a[k];
        trace += d.weight(k) * sys.a[k].trace();
    }
    if (!(trace > 1e-300))
        throw NumericalFailure("second_kinetics", "positivity factors (u1^2, u1 c1, c1^2) below floor");

    std::array<CoefficientShape, 3> shape{};
    for (int c = 0; c < 3; ++c) shape[c] = cfg.second_shape(prefix + kSecondOrderKeys[c].first);
    // A coefficient enters only if some experiment excites it.
    std::array<bool, 3> active{};
    for (int c = 0; c < 3; ++c) active[c] = global(c, c) > 1e-14 * trace;

    // Pass 1: pointwise solve of every active coefficient.
    std::vector<Eigen::Vector3d> point(nn, Eigen::Vector3d::Zero());
    auto solve_node = [&](std::size_t k, const std::array<bool, 3>& which, const Eigen::Vector3d& fixed) {
        Eigen::Matrix3d a = sys.a[k];
        Eigen::Vector3d b = sys.b[k];
        for (int c = 0; c < 3; ++c)
            if (!which[c]) b -= a.col(c) * fixed(c);
        std::vector<int> idx;
        for (int c = 0; c < 3; ++c)
            if (which[c]) idx.push_back(c);
        Eigen::MatrixXd sa(idx.size(), idx.size());
        Eigen::VectorXd sb(idx.size());
        for (std::size_t i = 0; i < idx.size(); ++i) {
            sb(i) = b(idx[i]);
            for (std::size_t j = 0; j < idx.size(); ++j) sa(i, j) = a(idx[i], idx[j]);
        }
        sa.diagonal().array() += 1e-13 * std::max(sa.trace(), 1e-300);
        const Eigen::VectorXd x = sa.ldlt().solve(sb);
        Eigen::Vector3d out = fixed;
        for (std::size_t i = 0; i < idx.size(); ++i) out(idx[i]) = x(i);
        return out;
    };
    for (std::size_t k = 0; k < nn; ++k) point[k] = solve_node(k, active, Eigen::Vector3d::Zero());

    // Pass 2: constants by a global fit with field-shaped entries held at pass 1.
    std::array<bool, 3> is_const{}, is_field{};
    for (int c = 0; c < 3; ++c) {
        is_const[c] = active[c] && shape[c] == CoefficientShape::constant;
        is_field[c] = active[c] && shape[c] != CoefficientShape::constant;
    }
    Eigen::Vector3d constants = Eigen::Vector3d::Zero();
    {
        std::vector<int> idx;
        for (int c = 0; c < 3; ++c)
            if (is_const[c]) idx.push_back(c);
        if (!idx.empty()) {
            Eigen::MatrixXd ga = Eigen::MatrixXd::Zero(idx.size(), idx.size());
            Eigen::VectorXd gb = Eigen::VectorXd::Zero(idx.size());
            for (std::size_t k = 0; k < nn; ++k) {
                Eigen::Vector3d b = sys.b[k];
                for (int c = 0; c < 3; ++c)
                    if (is_field[c]) b -= sys.a[k].col(c) * point[k](c);
                for (std::size_t i = 0; i < idx.size(); ++i) {
                    gb(i) += d.weight(k) * b(idx[i]);
                    for (std::size_t j = 0; j < idx.size(); ++j) ga(i, j) += d.weight(k) * sys.a[k](idx[i], idx[j]);
                }
            }
            const Eigen::VectorXd x = ga.ldlt().solve(gb);
            for (std::size_t i = 0; i < idx.size(); ++i) constants(idx[i]) = x(i);
        }
    }
    // Pass 3: field-shaped entries with the constants fixed.
    if (std::any_of(is_field.begin(), is_field.end(), [](bool b) { return b; }))
        for (std::size_t k = 0; k < nn; ++k) point[k] = solve_node(k, is_field, constants);

    std::vector<SecondOrderEstimate> out;
    for (int c = 0; c < 3; ++c) {
        SecondOrderEstimate e;
        e.name = prefix + kSecondOrderKeys[c].first;
        e.shape = shape[c];
        e.pointwise = Field(d);
        for (std::size_t k = 0; k < nn; ++k) e.pointwise[k] = is_field[c] ? point[k](c) : constants(c);
        if (!active[c]) {
            e.value = Coefficient(0.0);
        } else if (shape[c] == CoefficientShape::constant) {
            e.value = Coefficient(constants(c));
        } else if (shape[c] == CoefficientShape::separable && d.dim() == 2) {
            MomentRecovery mr = moment_recover(transform_samples(e.pointwise), cfg.declared_gamma0, cfg.moment_order,
                                               cfg.lambda_reg);
            Field prod = mr.factors.to_field(d);
            e.separability_misfit = detail::relative_l2(prod, e.pointwise);
            if (e.separability_misfit > cfg.separability_tol)
                throw NumericalFailure("second_kinetics", e.name + ": separability misfit " +
                                                              detail::format_sci(e.separability_misfit) + " > " +
                                                              detail::format_sci(cfg.separability_tol));
            e.value = Coefficient(prod);
            e.separable = std::move(mr);
        } else {
            e.value = Coefficient(e.pointwise);
        }
        out.push_back(std::move(e));
    }

    double rss = 0.0;
    visit([&](std::size_t k, const Eigen::Vector3d& x, double y, double) {
        double pred = 0.0;
        for (int c = 0; c < 3; ++c) pred += x(c) * out[c].value.at(k);
        rss += d.weight(k) * (y - pred) * (y - pred);
    });
    residual = sys.target_sq > 0.0 ? std::sqrt(rss / sys.target_sq) : 0.0;
    Eigen::MatrixXd act(3, 3);
    act = global;
    std::vector<int> idx;
    for (int c = 0; c < 3; ++c)
        if (active[c]) idx.push_back(c);
    Eigen::MatrixXd sub(idx.size(), idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < idx.size(); ++j) sub(i, j) = act(idx[i], idx[j]);
    Eigen::VectorXd dsc = sub.diagonal().cwiseSqrt().cwiseInverse();
    cond = idx.empty() ? 0.0 : std::sqrt(detail::condition_number(dsc.asDiagonal() * sub * dsc.asDiagonal()));
    return out;
}

inline SecondKineticsResult second_kinetics_from_variations(const std::vector<const VariationStack*>& stacks,
                                                            const LinearKinetics& lk, int tau,
                                                            const PipelineConfig& cfg) {
    if (stacks.empty()) throw InvalidArgument("second_kinetics: no experiments");
    for (const VariationStack* s : stacks)
        if (!s->order2) throw InvalidArgument("second_kinetics: experiments need second variations");
    SecondKineticsResult res;
    double rv = 0, cv = 0, rw = 0, cw = 0;
    auto g = second_chemical_fit(stacks, &State::v, lk.a10, -lk.a01, tau, "g", cfg, rv, cv);
    auto h = second_chemical_fit(stacks, &State::w, lk.b10, -lk.b01, tau, "h", cfg, rw, cw);
    res.estimates = std::move(g);
    for (auto& e : h) res.estimates.push_back(std::move(e));
    res.residual = std::max(rv, rw);
    res.cond = std::max(cv, cw);
    if (res.residual > cfg.residual_tol)
        throw NumericalFailure("second_kinetics", "identity residual " + detail::format_sci(res.residual) +
                                                      " exceeds tolerance; model mismatch");
    return res;
}

// ---------------------------------------------------------------------------
// Report and full pipeline

struct StageEstimate {
    std::string name;
    double estimate = 0.0;
    double residual = std::numeric_limits<double>::quiet_NaN();
    double cond = std::numeric_limits<double>::quiet_NaN();
    std::optional<double> truth;
    std::optional<double> rel_error;  ///< for fields: relative L2 error
};

struct StageReport {
    std::string stage;
    bool completed = false;
    std::string reason;
    double residual = std::numeric_limits<double>::quiet_NaN();
    double cond = std::numeric_limits<double>::quiet_NaN();
    std::vector<StageEstimate> estimates;
};

struct RecoveryReport {
    std::vector<StageReport> stages;
    bool complete = false;
    std::string failure;
    ParameterSet parameters;  ///< recovered (alpha, gamma may be fields)
    KineticsSpec kinetics;
    std::map<std::string, Field> fields;  ///< spatially varying estimates
    std::vector<std::string> experiments;
    std::size_t oracle_queries = 0;

    const StageEstimate* find(const std::string& name) const {
        for (const auto& s : stages)
            for (const auto& e : s.estimates)
                if (e.name == name) return &e;
        return nullptr;
    }

    /// Fills truth and error columns from a known parameter set.
    void attach_truth(const ParameterSet& p, const KineticsSpec& k) {
        std::map<std::string, Coefficient> truth{
            {"chi", p.chi},        {"xi", p.xi},      {"r", p.r},           {"mu", p.mu},
            {"alpha", p.alpha},    {"beta", p.beta},  {"gamma", p.gamma},   {"delta", p.delta}};
        for (const auto& [label, key] : kSecondOrderKeys) {
            truth[std::string("g") + label] = k.g(key.first, key.second);
            truth[std::string("h") + label] = k.h(key.first, key.second);
        }
        for (auto& s : stages)
            for (auto& e : s.estimates) {
                const auto it = truth.find(e.name);
                if (it == truth.end()) continue;
                const Coefficient& t = it->second;
                const auto f = fields.find(e.name);
                if (f != fields.end()) {
                    const Field tf = t.sample(f->second.domain());
                    e.truth = t.mean();
                    e.rel_error = detail::relative_l2(f->second, tf);
                } else {
                    e.truth = t.mean();
                    e.rel_error = *e.truth != 0.0 ? std::abs(e.estimate - *e.truth) / std::abs(*e.truth)
                                                  : std::abs(e.estimate);
                }
            }
    }
};

namespace detail {

inline void add_coefficient(StageReport& st, RecoveryReport& rep, const std::string& name, const Coefficient& c,
                            double residual, double cond) {
    st.estimates.push_back({name, c.mean(), residual, cond, std::nullopt, std::nullopt});
    if (!c.is_constant()) rep.fields[name] = c.field();
}

}  // namespace detail

/// Stages in order r -> linear kinetics -> (chi, xi, mu) -> second-order
/// kinetics; a failing stage stops the run and is recorded with its reason.
inline RecoveryReport run_full_pipeline(Oracle& oracle, const PipelineConfig& cfg) {
    RecoveryReport rep;
    const Domain& d = oracle.domain();
    const int tau = oracle.config().tau;
    ProbeRunner runner(oracle, cfg.epsilons);
    rep.kinetics = KineticsSpec(2, EquilibriumState{});

    const std::vector<std::string> names{"r", "linear_kinetics", "chi_xi_mu", "second_kinetics"};
    std::size_t current = 0;
    auto begin_stage = [&](const std::string& n) {
        rep.stages.push_back(StageReport{n, false, "", std::numeric_limits<double>::quiet_NaN(),
                                         std::numeric_limits<double>::quiet_NaN(), {}});
        return &rep.stages.back();
    };
    try {
        // Stage 1
        StageReport* st = begin_stage(names[0]);
        std::vector<VariationStack> first_exps;
        for (const auto& e : r_experiments(d, cfg)) first_exps.push_back(runner.run(e, 1));
        std::vector<std::pair<const Trajectory*, std::array<std::size_t, 2>>> rin;
        for (std::size_t i = 0; i < first_exps.size(); ++i) rin.emplace_back(&first_exps[i].order1, cfg.r_modes[i]);
        const RResult rr = estimate_r(rin, cfg.time_model, cfg.mode_sigma_floor, cfg.nonexp_tol, cfg.cgo_tol);
        st->residual = rr.cgo_drift;
        st->estimates.push_back({"r", rr.r, rr.cgo_drift, std::numeric_limits<double>::quiet_NaN(), {}, {}});
        st->completed = true;
        rep.parameters.r = rr.r;
        ++current;

        // Stage 2
        st = begin_stage(names[1]);
        std::optional<VariationStack> selective;
        if (tau == 1) selective = runner.run(selective_experiment(d, cfg), 2);
        std::vector<const Trajectory*> first;
        for (const auto& s : first_exps) first.push_back(&s.order1);
        const LinearKinetics lk =
            linear_kinetics_from_variations(first, selective ? &selective->order1 : nullptr, tau, cfg);
        st->residual = lk.residual;
        detail::add_coefficient(*st, rep, "alpha", lk.a10, lk.a10_misfit, std::numeric_limits<double>::quiet_NaN());
        st->estimates.push_back({"beta", -lk.a01, lk.residual, std::numeric_limits<double>::quiet_NaN(), {}, {}});
        detail::add_coefficient(*st, rep, "gamma", lk.b10, lk.b10_misfit, std::numeric_limits<double>::quiet_NaN());
        st->estimates.push_back({"delta", -lk.b01, lk.residual, std::numeric_limits<double>::quiet_NaN(), {}, {}});
        st->completed = true;
        rep.parameters.alpha = lk.a10;
        rep.parameters.beta = -lk.a01;
        rep.parameters.gamma = lk.b10;
        rep.parameters.delta = -lk.b01;
        rep.kinetics.set_g(1, 0, lk.a10);
        rep.kinetics.set_g(0, 1, lk.a01);
        rep.kinetics.set_h(1, 0, lk.b10);
        rep.kinetics.set_h(0, 1, lk.b01);
        ++current;

        // Stage 3
        st = begin_stage(names[2]);
        std::vector<VariationStack> second_exps;
        for (const auto& e : second_experiments(d, tau, cfg)) second_exps.push_back(runner.run(e, 2));
        std::vector<const VariationStack*> sptr;
        for (const auto& s : second_exps) sptr.push_back(&s);
        ChiXiMuOptions opt;
        opt.cond_max = cfg.cond_max;
        opt.residual_tol = cfg.residual_tol;
        const ChiXiMuResult cx = chi_xi_mu_from_variations(sptr, rr.r, opt);
        st->residual = cx.residual;
        st->cond = cx.cond;
        for (auto [n, v] : {std::pair{"chi", cx.chi}, std::pair{"xi", cx.xi}, std::pair{"mu", cx.mu}})
            st->estimates.push_back({n, v, cx.residual, cx.cond, {}, {}});
        st->completed = true;
        rep.parameters.chi = cx.chi;
        rep.parameters.xi = cx.xi;
        rep.parameters.mu = cx.mu;
        ++current;

        // Stage 4
        if (cfg.second_order) {
            st = begin_stage(names[3]);
            if (selective) sptr.push_back(&*selective);
            const SecondKineticsResult sk = second_kinetics_from_variations(sptr, lk, tau, cfg);
            st->residual = sk.residual;
            st->cond = sk.cond;
            for (const auto& e : sk.estimates) {
                detail::add_coefficient(*st, rep, e.name, e.value, sk.residual, sk.cond);
                const int p = e.name[1] - '0', q = e.name[2] - '0';
                if (e.name[0] == 'g')
                    rep.kinetics.set_g(p, q, e.value);
                else
                    rep.kinetics.set_h(p, q, e.value);
            }
            st->completed = true;
        }
        ++current;
        rep.complete = true;
    } catch (const NumericalFailure& e) {
        rep.stages.back().reason = e.what();
        rep.failure = e.what();
        for (std::size_t i = current + 1; i < names.size(); ++i) {
            if (names[i] == "second_kinetics" && !cfg.second_order) continue;
            rep.stages.push_back(StageReport{names[i], false, "skipped: previous stage failed",
                                             std::numeric_limits<double>::quiet_NaN(),
                                             std::numeric_limits<double>::quiet_NaN(), {}});
        }
    }
    rep.experiments = runner.experiments();
    rep.oracle_queries = oracle.query_count();
    return rep;
}

}  // namespace chemo
