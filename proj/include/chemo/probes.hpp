#pragma once

// Analytic test functions: Neumann cosine modes, complex-exponential (CGO)
// probes, space-time weighted integrals, and recovery of a multiplicatively
// separable coefficient A1(x1) A2(x2) from its exponential transforms.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <complex>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "chemo/errors.hpp"
#include "chemo/forward.hpp"
#include "chemo/grid.hpp"
#include "chemo/model.hpp"

namespace chemo {

using cplx = std::complex<double>;

struct EigenMode {
    std::array<std::size_t, 2> index{0, 0};
    double lambda = 0.0;    ///< continuum eigenvalue sum (k_a pi / L_a)^2
    double lambda_h = 0.0;  ///< eigenvalue of the discrete Laplacian on the same samples
    double theta = 0.0;     ///< r - lambda
    Field values;
};

/// Product-cosine mode cos(k1 pi x/L1) [cos(k2 pi y/L2)].
inline EigenMode neumann_eigenmode(const Domain& d, std::array<std::size_t, 2> k, double r = 0.0) {
    if (d.dim() == 1 && k[1] != 0) throw InvalidArgument("neumann_eigenmode: 1D domain takes one index");
    EigenMode m;
    m.index = k;
    for (std::size_t a = 0; a < d.dim(); ++a) {
        const double w = static_cast<double>(k[a]) * M_PI / d.length(a);
        m.lambda += w * w;
        const double h = d.spacing(a);
        const double th = M_PI * static_cast<double>(k[a]) / static_cast<double>(d.nodes(a) - 1);
        m.lambda_h += (2.0 - 2.0 * std::cos(th)) / (h * h);
    }
    m.theta = r - m.lambda;
    m.values = Field(d);
    for (std::size_t j = 0; j < d.nodes(1); ++j)
        for (std::size_t i = 0; i < d.nodes(0); ++i) {
            // Exact integer phase keeps the samples symmetric.
            double v = std::cos(M_PI * static_cast<double>(k[0] * i) / static_cast<double>(d.nodes(0) - 1));
            if (d.dim() == 2)
                v *= std::cos(M_PI * static_cast<double>(k[1] * j) / static_cast<double>(d.nodes(1) - 1));
            m.values[d.index(i, j)] = v;
        }
    return m;
}

struct CGOProbe {
    enum class Kind { parabolic, elliptic };

    Kind kind = Kind::parabolic;
    std::size_t dim = 1;
    std::array<cplx, 2> zeta{};
    /// parabolic: omega solves -omega_t - Lap omega - rate*omega = 0
    double rate = 0.0;

    double zeta_sq() const { return std::norm(zeta[0]) + std::norm(zeta[1]); }

    /// parabolic: exponent of the time factor, |zeta|^2 - rate
    double growth() const { return zeta_sq() - rate; }

    /// zeta . zeta (no conjugation); zero for elliptic probes.
    cplx zeta_dot_zeta() const { return zeta[0] * zeta[0] + zeta[1] * zeta[1]; }

    /// Coefficient c with (-d_t - Lap - rate) omega = c omega, from the closed
    /// forms d_t omega = growth*omega and Lap omega = -|zeta|^2 omega.
    double closed_form_residual() const {
        if (kind != Kind::parabolic) throw InvalidArgument("closed_form_residual: parabolic probes only");
        return -growth() + (zeta_sq() - rate);
    }

    cplx operator()(double x, double y, double t) const {
        if (kind == Kind::parabolic) {
            const double phase = zeta[0].real() * x + (dim == 2 ? zeta[1].real() * y : 0.0);
            return std::exp(cplx(growth() * t, -phase));
        }
        return std::exp(zeta[0] * x + zeta[1] * y);
    }

    ComplexField sample(const Domain& d, double t = 0.0) const {
        if (d.dim() != dim) throw InvalidArgument("CGOProbe: dimension mismatch");
        ComplexField out(d);
        for (std::size_t j = 0; j < d.nodes(1); ++j)
            for (std::size_t i = 0; i < d.nodes(0); ++i)
                out[d.index(i, j)] = (*this)(d.coord(0, i), d.dim() == 2 ? d.coord(1, j) : 0.0, t);
        return out;
    }
};

/// omega = exp((|zeta|^2 - rate) t - i zeta.x) for a real wave vector zeta.
/// rate = r gives the logistic-linearisation probe; rate = -beta the
/// decaying-chemical variant.
inline CGOProbe cgo_parabolic(const std::vector<double>& zeta, double rate) {
    if (zeta.empty() || zeta.size() > 2) throw InvalidArgument("cgo_parabolic: zeta must have 1 or 2 entries");
    CGOProbe p;
    p.kind = CGOProbe::Kind::parabolic;
    p.dim = zeta.size();
    p.zeta = {cplx(zeta[0], 0.0), cplx(zeta.size() == 2 ? zeta[1] : 0.0, 0.0)};
    p.rate = rate;
    return p;
}

/// Harmonic exponential exp(zeta.x) with zeta = (i xi', sign |xi'|).
inline CGOProbe cgo_elliptic(double xi_prime, int sign, std::size_t dim = 2) {
    if (dim < 2) throw InvalidArgument("cgo_elliptic: needs a transverse direction (d >= 2)");
    if (sign != 1 && sign != -1) throw InvalidArgument("cgo_elliptic: sign must be +1 or -1");
    CGOProbe p;
    p.kind = CGOProbe::Kind::elliptic;
    p.dim = 2;
    p.zeta = {cplx(0.0, xi_prime), cplx(sign * std::abs(xi_prime), 0.0)};
    return p;
}

/// Field samples on a time grid.
struct SpaceTimeData {
    std::vector<double> times;
    std::vector<Field> slices;
};

inline SpaceTimeData component(const Trajectory& t, Field State::*member) {
    SpaceTimeData out{t.times, {}};
    out.slices.reserve(t.states.size());
    for (const State& s : t.states) out.slices.push_back(s.*member);
    return out;
}

/// Trapezoid in space and time of field * probe.
inline cplx weighted_integral(const SpaceTimeData& data, const CGOProbe& probe) {
    if (data.times.size() != data.slices.size() || data.times.empty())
        throw InvalidArgument("weighted_integral: time grid and slices disagree");
    const Domain& d = data.slices.front().domain();
    for (const Field& f : data.slices)
        if (!(f.domain() == d)) throw InvalidArgument("weighted_integral: grid mismatch");
    if (d.dim() != probe.dim) throw InvalidArgument("weighted_integral: probe dimension mismatch");
    const std::size_t nt = data.times.size();
    cplx total = 0.0;
    for (std::size_t n = 0; n < nt; ++n) {
        double wt = 0.0;
        if (nt == 1) wt = 1.0;
        if (n > 0) wt += 0.5 * (data.times[n] - data.times[n - 1]);
        if (n + 1 < nt) wt += 0.5 * (data.times[n + 1] - data.times[n]);
        if (wt == 0.0) continue;
        const ComplexField om = probe.sample(d, data.times[n]);
        cplx s = 0.0;
        for (std::size_t k = 0; k < d.size(); ++k) s += d.weight(k) * data.slices[n][k] * om[k];
        total += wt * s;
    }
    return total;
}

/// Spatial integral of a field against a probe at time t.
inline cplx weighted_integral(const Field& f, const CGOProbe& probe, double t = 0.0) {
    return weighted_integral(SpaceTimeData{{t}, {f}}, probe);
}

struct MomentVector {
    std::vector<double> gammas;  ///< (1/j!) int A2(x) x^j dx, j = 0..J
};

/// Trapezoid moments of axial samples on the last axis of d.
inline MomentVector moment_vector(const std::vector<double>& axial, const Domain& d, std::size_t J) {
    const std::size_t ax = d.dim() - 1;
    if (axial.size() != d.nodes(ax)) throw InvalidArgument("moment_vector: size mismatch");
    MomentVector m;
    double fact = 1.0;
    for (std::size_t j = 0; j <= J; ++j) {
        if (j > 0) fact *= static_cast<double>(j);
        double s = 0.0;
        for (std::size_t i = 0; i < axial.size(); ++i)
            s += d.axis_weight(ax, i) * axial[i] * std::pow(d.coord(ax, i), static_cast<double>(j));
        m.gammas.push_back(s / fact);
    }
    return m;
}

/// Transform data of a coefficient g on a 2D box:
///  - transverse: int g(x) cos(xi' x1) dx at the cosine frequencies xi' = pi m / L1
///    (no axial weight), i.e. A1-hat(xi') Gamma_0 for a separable g;
///  - axial: int g(x) exp(zeta.x) dx for harmonic zeta = (i xi', s), s = +-|xi'|,
///    at small |xi'|.
struct TransformSamples {
    Domain domain;
    std::vector<double> transverse_freq;
    std::vector<double> transverse_values;
    std::vector<double> axial_xi;
    std::vector<double> axial_s;
    std::vector<cplx> axial_values;
};

/// Largest |xi'| used for moment extraction: |xi'| diam <= 0.4.
inline double moment_frequency_limit(const Domain& d) { return 0.4 / d.diameter(); }

/// Forward quadrature of the transform data of g.
inline TransformSamples transform_samples(const Field& g, std::size_t axial_count = 16) {
    const Domain& d = g.domain();
    if (d.dim() != 2) throw InvalidArgument("transform_samples: separable recovery needs a 2D domain");
    TransformSamples ts;
    ts.domain = d;
    const std::size_t n1 = d.nodes(0);
    for (std::size_t m = 0; m < n1; ++m) {
        ts.transverse_freq.push_back(M_PI * static_cast<double>(m) / d.length(0));
        double s = 0.0;
        for (std::size_t j = 0; j < d.nodes(1); ++j)
            for (std::size_t i = 0; i < n1; ++i) {
                const std::size_t k = d.index(i, j);
                const double c = std::cos(M_PI * static_cast<double>((m * i) % (2 * (n1 - 1))) /
                                          static_cast<double>(n1 - 1));
                s += d.weight(k) * g[k] * c;
            }
        ts.transverse_values.push_back(s);
    }
    const double smax = moment_frequency_limit(d);
    for (std::size_t q = 1; q <= axial_count; ++q) {
        const double xi = smax * static_cast<double>(q) / static_cast<double>(axial_count);
        for (int sign : {1, -1}) {
            const CGOProbe p = cgo_elliptic(xi, sign);
            ts.axial_xi.push_back(xi);
            ts.axial_s.push_back(sign * xi);
            ts.axial_values.push_back(weighted_integral(g, p));
        }
    }
    return ts;
}

struct MomentRecovery {
    SeparableField factors;
    MomentVector moments;
    double misfit = 0.0;     ///< relative residual of the axial transform fit
    double condition = 0.0;  ///< of the column-scaled moment fit
};

inline constexpr std::size_t kMaxMomentOrder = 12;

namespace detail {

inline double legendre(std::size_t l, double x) {
    double p0 = 1.0, p1 = x;
    if (l == 0) return p0;
    for (std::size_t n = 1; n < l; ++n) {
        const double p2 = ((2.0 * n + 1.0) * x * p1 - static_cast<double>(n) * p0) / (n + 1.0);
        p0 = p1;
        p1 = p2;
    }
    return p1;
}

inline double condition_number(const Eigen::MatrixXd& a) {
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(a);
    const auto& s = svd.singularValues();
    if (s.size() == 0 || s(s.size() - 1) == 0.0) return std::numeric_limits<double>::infinity();
    return s(0) / s(s.size() - 1);
}

}  // namespace detail

/// Recovers A1 (transverse) and A2 (axial) with int A2 = gamma0 from transform
/// samples of a separable coefficient on a 2D box.
inline MomentRecovery moment_recover(const TransformSamples& ts, double gamma0, std::size_t J = 6,
                                     double lambda_reg = 1e-8) {
    const Domain& d = ts.domain;
    if (d.dim() != 2) throw InvalidArgument("moment_recover: needs a 2D domain");
    if (!(std::abs(gamma0) > 1e-12)) throw InvalidArgument("moment_recover: |Gamma_0| below tolerance");
    if (J < 1 || J > kMaxMomentOrder)
        throw InvalidArgument("moment_recover: moment order must lie in [1, " + std::to_string(kMaxMomentOrder) + "]");
    const std::size_t n1 = d.nodes(0), n2 = d.nodes(1);
    if (ts.transverse_values.size() != n1)
        throw InvalidArgument("moment_recover: transverse samples must cover every cosine frequency");
    if (ts.axial_values.size() < J) throw InvalidArgument("moment_recover: too few axial samples");

    MomentRecovery out;
    // Transverse: inverse type-I cosine transform of the samples, divided by gamma0.
    out.factors.transverse.assign(n1, 0.0);
    const std::size_t period = 2 * (n1 - 1);
    for (std::size_t i = 0; i < n1; ++i) {
        double s = 0.0;
        for (std::size_t m = 0; m < n1; ++m) {
            const double half = (m == 0 || m + 1 == n1) ? 0.5 : 1.0;
            s += half * ts.transverse_values[m] *
                 std::cos(M_PI * static_cast<double>((m * i) % period) / static_cast<double>(n1 - 1));
        }
        out.factors.transverse[i] = 2.0 / d.length(0) * s / gamma0;
    }

    auto a1_hat = [&](double xi) {
        cplx s = 0.0;
        for (std::size_t i = 0; i < n1; ++i)
            s += d.axis_weight(0, i) * out.factors.transverse[i] * std::exp(cplx(0.0, xi * d.coord(0, i)));
        return s;
    };

    // Axial moments: g-hat - A1-hat gamma0 = A1-hat sum_{j>=1} Gamma_j s^j.
    const double smax = moment_frequency_limit(d);
    const std::size_t ns = ts.axial_values.size();
    Eigen::MatrixXd a(2 * ns, J);
    Eigen::VectorXd b(2 * ns);
    std::vector<cplx> ahat(ns);
    for (std::size_t q = 0; q < ns; ++q) {
        ahat[q] = a1_hat(ts.axial_xi[q]);
        const cplx rhs = ts.axial_values[q] - ahat[q] * gamma0;
        b(2 * q) = rhs.real();
        b(2 * q + 1) = rhs.imag();
        for (std::size_t j = 1; j <= J; ++j) {
            const cplx c = ahat[q] * std::pow(ts.axial_s[q] / smax, static_cast<double>(j));
            a(2 * q, j - 1) = c.real();
            a(2 * q + 1, j - 1) = c.imag();
        }
    }
    out.condition = detail::condition_number(a);
    if (!std::isfinite(out.condition) || out.condition > 1e14)
        throw NumericalFailure("moments", "axial moment system is singular (transverse factor too small?)");
    const Eigen::VectorXd sol = a.colPivHouseholderQr().solve(b);
    out.moments.gammas.assign(J + 1, 0.0);
    out.moments.gammas[0] = gamma0;
    for (std::size_t j = 1; j <= J; ++j) out.moments.gammas[j] = sol(j - 1) / std::pow(smax, static_cast<double>(j));

    // Axial factor: Legendre expansion on [0, L2] matched to the moments by
    // Tikhonov-regularised least squares with trapezoid-consistent moments.
    // Moment j enters the transform data as Gamma_j s^j, so each equation is
    // weighted by smax^j: badly determined high moments get little say.
    const double l2 = d.length(1);
    Eigen::MatrixXd m(J + 1, J + 1);
    Eigen::VectorXd g(J + 1);
    double fact = 1.0;
    for (std::size_t j = 0; j <= J; ++j) {
        if (j > 0) fact *= static_cast<double>(j);
        const double row_scale = l2 / std::pow(smax, static_cast<double>(j));
        for (std::size_t l = 0; l <= J; ++l) {
            double s = 0.0;
            for (std::size_t i = 0; i < n2; ++i) {
                const double x = d.coord(1, i);
                s += d.axis_weight(1, i) * detail::legendre(l, 2.0 * x / l2 - 1.0) * std::pow(x, static_cast<double>(j));
            }
            m(j, l) = s / fact / row_scale;
        }
        g(j) = out.moments.gammas[j] / row_scale;
    }
    Eigen::MatrixXd normal = m.transpose() * m;
    normal.diagonal().array() += lambda_reg;
    const Eigen::VectorXd c = normal.ldlt().solve(m.transpose() * g);
    out.factors.axial.assign(n2, 0.0);
    for (std::size_t i = 0; i < n2; ++i) {
        const double x = 2.0 * d.coord(1, i) / l2 - 1.0;
        double s = 0.0;
        for (std::size_t l = 0; l <= J; ++l) s += c(static_cast<Eigen::Index>(l)) * detail::legendre(l, x);
        out.factors.axial[i] = s;
    }

    double num = 0.0, den = 0.0;
    for (std::size_t q = 0; q < ns; ++q) {
        cplx bfit = 0.0;
        for (std::size_t i = 0; i < n2; ++i)
            bfit += d.axis_weight(1, i) * out.factors.axial[i] * std::exp(ts.axial_s[q] * d.coord(1, i));
        num += std::norm(ts.axial_values[q] - ahat[q] * bfit);
        den += std::norm(ts.axial_values[q]);
    }
    out.misfit = den > 0.0 ? std::sqrt(num / den) : 0.0;
    return out;
}

}  // namespace chemo
