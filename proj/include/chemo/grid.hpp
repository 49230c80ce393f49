#pragma once

// Node-centred tensor grids on axis-aligned boxes, fields on them, and the
// discrete operators shared by every solver: the ghost-reflection Neumann
// Laplacian, the conservative upwind advection divergence and trapezoidal
// quadrature.
//
// Node i on axis a sits at x = i*h_a with h_a = L_a/(N_a - 1). Boundary nodes
// own half control volumes, so the trapezoid weights double as the mass matrix
// under which the Laplacian is self-adjoint.

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "chemo/errors.hpp"

namespace chemo {

class Domain {
public:
    static constexpr std::size_t kMinNodes = 8;

    Domain() = default;

    Domain(std::size_t dim, std::array<double, 2> lengths, std::array<std::size_t, 2> nodes)
        : dim_(dim), lengths_(lengths), nodes_(nodes) {
        if (dim != 1 && dim != 2) throw InvalidArgument("Domain: dim must be 1 or 2");
        if (dim == 1) {
            lengths_[1] = 0.0;
            nodes_[1] = 1;
        }
        for (std::size_t a = 0; a < dim; ++a) {
            if (!(lengths_[a] > 0.0) || !std::isfinite(lengths_[a]))
                throw InvalidArgument("Domain: lengths must be positive");
            if (nodes_[a] < kMinNodes)
                throw InvalidArgument("Domain: each axis needs at least 8 nodes");
            spacing_[a] = lengths_[a] / static_cast<double>(nodes_[a] - 1);
        }
    }

    static Domain line(double length, std::size_t n) { return Domain(1, {length, 0.0}, {n, 1}); }
    static Domain box(double lx, double ly, std::size_t nx, std::size_t ny) {
        return Domain(2, {lx, ly}, {nx, ny});
    }

    std::size_t dim() const { return dim_; }
    double length(std::size_t a) const { return lengths_[a]; }
    std::size_t nodes(std::size_t a) const { return nodes_[a]; }
    double spacing(std::size_t a) const { return spacing_[a]; }
    std::size_t size() const { return nodes_[0] * nodes_[1]; }

    std::size_t index(std::size_t i, std::size_t j = 0) const { return i + nodes_[0] * j; }

    double coord(std::size_t a, std::size_t i) const {
        if (i + 1 == nodes_[a]) return lengths_[a];
        return static_cast<double>(i) * spacing_[a];
    }

    /// Trapezoid weight of a single axis node.
    double axis_weight(std::size_t a, std::size_t i) const {
        const bool edge = (i == 0 || i + 1 == nodes_[a]);
        return edge ? 0.5 * spacing_[a] : spacing_[a];
    }

    double weight(std::size_t k) const {
        const std::size_t i = k % nodes_[0];
        double w = axis_weight(0, i);
        if (dim_ == 2) w *= axis_weight(1, k / nodes_[0]);
        return w;
    }

    double volume() const { return dim_ == 1 ? lengths_[0] : lengths_[0] * lengths_[1]; }

    double diameter() const {
        return dim_ == 1 ? lengths_[0] : std::hypot(lengths_[0], lengths_[1]);
    }

    double min_spacing() const {
        return dim_ == 1 ? spacing_[0] : std::min(spacing_[0], spacing_[1]);
    }

    /// Linear indices of the nodes on the boundary, in a fixed order.
    std::vector<std::size_t> boundary_nodes() const {
        std::vector<std::size_t> out;
        const std::size_t nx = nodes_[0];
        if (dim_ == 1) return {0, nx - 1};
        const std::size_t ny = nodes_[1];
        for (std::size_t i = 0; i < nx; ++i) out.push_back(index(i, 0));
        for (std::size_t j = 1; j + 1 < ny; ++j) {
            out.push_back(index(0, j));
            out.push_back(index(nx - 1, j));
        }
        for (std::size_t i = 0; i < nx; ++i) out.push_back(index(i, ny - 1));
        return out;
    }

    friend bool operator==(const Domain& a, const Domain& b) {
        return a.dim_ == b.dim_ && a.lengths_ == b.lengths_ && a.nodes_ == b.nodes_;
    }

private:
    std::size_t dim_ = 1;
    std::array<double, 2> lengths_{1.0, 0.0};
    std::array<std::size_t, 2> nodes_{kMinNodes, 1};
    std::array<double, 2> spacing_{1.0 / (kMinNodes - 1), 0.0};
};

template <typename T>
class BasicField {
public:
    using value_type = T;

    BasicField() = default;
    explicit BasicField(const Domain& d, T fill = T{}) : domain_(d), values_(d.size(), fill) {}
    BasicField(const Domain& d, std::vector<T> values) : domain_(d), values_(std::move(values)) {
        if (values_.size() != domain_.size())
            throw InvalidArgument("Field: value count does not match domain node count");
    }

    /// Sample a callable f(x) or f(x, y) at the nodes.
    template <typename F>
    static BasicField sample(const Domain& d, F&& f) {
        BasicField out(d);
        for (std::size_t j = 0; j < d.nodes(1); ++j)
            for (std::size_t i = 0; i < d.nodes(0); ++i) {
                if constexpr (std::is_invocable_v<F, double>) {
                    out[d.index(i, j)] = f(d.coord(0, i));
                } else {
                    out[d.index(i, j)] = f(d.coord(0, i), d.dim() == 2 ? d.coord(1, j) : 0.0);
                }
            }
        return out;
    }

    const Domain& domain() const { return domain_; }
    std::size_t size() const { return values_.size(); }
    T& operator[](std::size_t k) { return values_[k]; }
    const T& operator[](std::size_t k) const { return values_[k]; }
    std::span<T> values() { return values_; }
    std::span<const T> values() const { return values_; }
    std::vector<T>& raw() { return values_; }
    const std::vector<T>& raw() const { return values_; }

    bool all_finite() const {
        for (const T& v : values_) {
            if constexpr (std::is_same_v<T, double>) {
                if (!std::isfinite(v)) return false;
            } else {
                if (!std::isfinite(v.real()) || !std::isfinite(v.imag())) return false;
            }
        }
        return true;
    }

    BasicField& operator+=(const BasicField& o) {
        check_same(o);
        for (std::size_t k = 0; k < values_.size(); ++k) values_[k] += o.values_[k];
        return *this;
    }
    BasicField& operator-=(const BasicField& o) {
        check_same(o);
        for (std::size_t k = 0; k < values_.size(); ++k) values_[k] -= o.values_[k];
        return *this;
    }
    BasicField& operator*=(T s) {
        for (T& v : values_) v *= s;
        return *this;
    }
    /// this += s * o
    BasicField& axpy(T s, const BasicField& o) {
        check_same(o);
        for (std::size_t k = 0; k < values_.size(); ++k) values_[k] += s * o.values_[k];
        return *this;
    }

    friend BasicField operator+(BasicField a, const BasicField& b) { return a += b; }
    friend BasicField operator-(BasicField a, const BasicField& b) { return a -= b; }
    friend BasicField operator*(T s, BasicField a) { return a *= s; }
    friend BasicField operator*(BasicField a, T s) { return a *= s; }

    void check_same(const BasicField& o) const {
        if (!(domain_ == o.domain_)) throw InvalidArgument("Field: mismatched domains");
    }

private:
    Domain domain_;
    std::vector<T> values_;
};

using Field = BasicField<double>;
using ComplexField = BasicField<std::complex<double>>;

/// Pointwise product.
inline Field hadamard(const Field& a, const Field& b) {
    a.check_same(b);
    Field out(a.domain());
    for (std::size_t k = 0; k < a.size(); ++k) out[k] = a[k] * b[k];
    return out;
}

inline double max_abs(const Field& f) {
    double m = 0.0;
    for (double v : f.values()) m = std::max(m, std::abs(v));
    return m;
}

namespace detail {

inline void require_finite(const Field& f, const char* who) {
    if (!f.all_finite()) throw InvalidArgument(std::string(who) + ": non-finite input values");
}

// Visits the faces between node k and its +1 neighbour along axis a.
template <typename F>
void for_each_face(const Domain& d, F&& visit) {
    const std::size_t nx = d.nodes(0), ny = d.nodes(1);
    for (std::size_t j = 0; j < ny; ++j)
        for (std::size_t i = 0; i + 1 < nx; ++i) visit(0, d.index(i, j), d.index(i + 1, j));
    if (d.dim() == 2)
        for (std::size_t j = 0; j + 1 < ny; ++j)
            for (std::size_t i = 0; i < nx; ++i) visit(1, d.index(i, j), d.index(i, j + 1));
}

inline double control_width(const Domain& d, std::size_t a, std::size_t k) {
    const std::size_t i = (a == 0) ? k % d.nodes(0) : k / d.nodes(0);
    return d.axis_weight(a, i);
}

}  // namespace detail

/// Second-order Laplacian with ghost-node reflection (zero normal derivative).
inline Field laplacian_neumann(const Field& f) {
    detail::require_finite(f, "laplacian_neumann");
    const Domain& d = f.domain();
    Field out(d);
    // Face-difference form: identical to the reflected stencil, and exactly
    // telescoping under the trapezoid weights.
    detail::for_each_face(d, [&](std::size_t a, std::size_t k0, std::size_t k1) {
        const double flux = (f[k1] - f[k0]) / d.spacing(a);
        out[k0] += flux / detail::control_width(d, a, k0);
        out[k1] -= flux / detail::control_width(d, a, k1);
    });
    return out;
}

/// Discrete divergence of strength * u * grad(potential), conservative form.
///
/// Face fluxes use the centred potential difference and take u from the
/// upwind side of the face velocity. The velocity that selects the upwind
/// side is strength*grad(potential) unless `upwind_ref` is given, in which
/// case the sign of grad(upwind_ref) decides; the linearised solvers need
/// this to split one physical flux into per-coefficient pieces. No flux
/// crosses the boundary.
inline Field advective_flux_div(const Field& u, const Field& potential, double strength,
                                const Field* upwind_ref = nullptr) {
    u.check_same(potential);
    detail::require_finite(u, "advective_flux_div");
    detail::require_finite(potential, "advective_flux_div");
    if (upwind_ref) u.check_same(*upwind_ref);
    const Domain& d = u.domain();
    Field out(d);
    detail::for_each_face(d, [&](std::size_t a, std::size_t k0, std::size_t k1) {
        const double vel = strength * (potential[k1] - potential[k0]) / d.spacing(a);
        const double dir = upwind_ref ? ((*upwind_ref)[k1] - (*upwind_ref)[k0]) : vel;
        const double flux = vel * (dir >= 0.0 ? u[k0] : u[k1]);
        out[k0] += flux / detail::control_width(d, a, k0);
        out[k1] -= flux / detail::control_width(d, a, k1);
    });
    return out;
}

/// Largest |face velocity| per axis of grad(potential).
inline std::array<double, 2> max_face_speed(const Field& potential) {
    std::array<double, 2> m{0.0, 0.0};
    const Domain& d = potential.domain();
    detail::for_each_face(d, [&](std::size_t a, std::size_t k0, std::size_t k1) {
        m[a] = std::max(m[a], std::abs(potential[k1] - potential[k0]) / d.spacing(a));
    });
    return m;
}

/// Trapezoidal rule over the box.
template <typename T>
T quadrature(const BasicField<T>& f) {
    const Domain& d = f.domain();
    T sum{};
    for (std::size_t k = 0; k < f.size(); ++k) sum += d.weight(k) * f[k];
    return sum;
}

inline double inner_product(const Field& f, const Field& g) {
    f.check_same(g);
    const Domain& d = f.domain();
    double sum = 0.0;
    for (std::size_t k = 0; k < f.size(); ++k) sum += d.weight(k) * f[k] * g[k];
    return sum;
}

inline double l2_norm(const Field& f) { return std::sqrt(inner_product(f, f)); }

}  // namespace chemo
