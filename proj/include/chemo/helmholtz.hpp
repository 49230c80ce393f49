#pragma once

// Conjugate-gradient solver for (-Delta_h + shift) x = s under Neumann
// reflection. The operator is self-adjoint in the trapezoid-weighted inner
// product, so CG runs in that inner product. The optional spectral
// preconditioner applies the exact inverse through the type-I discrete cosine
// transform (the reflected stencil is diagonal in that basis), which turns
// each solve into one or two iterations.

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <string>
#include <vector>

#include "chemo/errors.hpp"
#include "chemo/grid.hpp"

namespace chemo {

enum class Preconditioner { none, spectral };

namespace detail {

class CosineTransform {
public:
    explicit CosineTransform(const Domain& d) : domain_(d), n_(d.size()) {
        buf_ = static_cast<double*>(fftw_malloc(sizeof(double) * n_));
        const int nx = static_cast<int>(d.nodes(0));
        if (d.dim() == 1) {
            plan_ = fftw_plan_r2r_1d(nx, buf_, buf_, FFTW_REDFT00, FFTW_ESTIMATE);
            scale_ = 1.0 / (2.0 * (nx - 1));
        } else {
            const int ny = static_cast<int>(d.nodes(1));
            plan_ = fftw_plan_r2r_2d(ny, nx, buf_, buf_, FFTW_REDFT00, FFTW_REDFT00, FFTW_ESTIMATE);
            scale_ = 1.0 / (4.0 * (nx - 1) * (ny - 1));
        }
        eig_.resize(n_);
        for (std::size_t k = 0; k < n_; ++k) {
            const std::size_t i = k % d.nodes(0), j = k / d.nodes(0);
            eig_[k] = eigenvalue(0, i) + (d.dim() == 2 ? eigenvalue(1, j) : 0.0);
        }
    }
    CosineTransform(const CosineTransform&) = delete;
    CosineTransform& operator=(const CosineTransform&) = delete;
    ~CosineTransform() {
        fftw_destroy_plan(plan_);
        fftw_free(buf_);
    }

    /// Discrete eigenvalue of -Delta_h for cosine index m on axis a.
    double eigenvalue(std::size_t a, std::size_t m) const {
        const double h = domain_.spacing(a);
        const double th = M_PI * static_cast<double>(m) / static_cast<double>(domain_.nodes(a) - 1);
        return (2.0 - 2.0 * std::cos(th)) / (h * h);
    }

    /// out = (-Delta_h + shift)^{-1} in
    void apply_inverse(const std::vector<double>& in, std::vector<double>& out, double shift) {
        std::copy(in.begin(), in.end(), buf_);
        fftw_execute(plan_);
        for (std::size_t k = 0; k < n_; ++k) buf_[k] /= (eig_[k] + shift);
        fftw_execute(plan_);
        out.resize(n_);
        for (std::size_t k = 0; k < n_; ++k) out[k] = buf_[k] * scale_;
    }

private:
    Domain domain_;
    std::size_t n_;
    double* buf_ = nullptr;
    fftw_plan plan_{};
    double scale_ = 1.0;
    std::vector<double> eig_;
};

}  // namespace detail

struct SolveStats {
    int iterations = 0;
    double relative_residual = 0.0;
};

class HelmholtzSolver {
public:
    HelmholtzSolver(const Domain& d, double tol = 1e-10,
                    Preconditioner pc = Preconditioner::spectral, int max_iter = 0)
        : domain_(d), tol_(tol), pc_(pc),
          max_iter_(max_iter > 0 ? max_iter : static_cast<int>(4 * d.size() + 50)) {
        if (!(tol > 0.0)) throw InvalidArgument("HelmholtzSolver: tolerance must be positive");
        if (pc_ == Preconditioner::spectral)
            transform_ = std::make_shared<detail::CosineTransform>(d);
    }

    const Domain& domain() const { return domain_; }
    double tolerance() const { return tol_; }
    const SolveStats& last_stats() const { return stats_; }

    /// Solves (-Delta_h + shift) x = source; `guess` seeds the iteration.
    Field solve(const Field& source, double shift, const Field* guess = nullptr) {
        if (!(shift > 0.0))
            throw InvalidArgument("elliptic_solve: decay must be positive (operator singular otherwise)");
        if (!(source.domain() == domain_)) throw InvalidArgument("elliptic_solve: domain mismatch");
        detail::require_finite(source, "elliptic_solve");

        const std::size_t n = domain_.size();
        Field x = guess ? *guess : Field(domain_);
        const double snorm = l2_norm(source);
        stats_ = {};
        if (snorm == 0.0) return Field(domain_);

        Field r = source - apply(x, shift);
        double rnorm = l2_norm(r);
        if (rnorm <= tol_ * snorm) {
            stats_.relative_residual = rnorm / snorm;
            return x;
        }
        Field z = precondition(r, shift);
        Field p = z;
        double rz = inner_product(r, z);
        for (int it = 1; it <= max_iter_; ++it) {
            const Field ap = apply(p, shift);
            const double alpha = rz / inner_product(p, ap);
            for (std::size_t k = 0; k < n; ++k) {
                x[k] += alpha * p[k];
                r[k] -= alpha * ap[k];
            }
            rnorm = l2_norm(r);
            if (rnorm <= tol_ * snorm) {
                stats_ = {it, rnorm / snorm};
                return x;
            }
            z = precondition(r, shift);
            const double rz_new = inner_product(r, z);
            const double beta = rz_new / rz;
            rz = rz_new;
            for (std::size_t k = 0; k < n; ++k) p[k] = z[k] + beta * p[k];
        }
        throw NumericalFailure("elliptic", "conjugate gradient did not converge (relative residual " +
                                               std::to_string(rnorm / snorm) + ")");
    }

    static Field apply(const Field& x, double shift) {
        Field out = laplacian_neumann(x);
        for (std::size_t k = 0; k < out.size(); ++k) out[k] = shift * x[k] - out[k];
        return out;
    }

private:
    Field precondition(const Field& r, double shift) {
        if (!transform_) return r;
        Field z(domain_);
        transform_->apply_inverse(r.raw(), z.raw(), shift);
        return z;
    }

    Domain domain_;
    double tol_;
    Preconditioner pc_;
    int max_iter_;
    std::shared_ptr<detail::CosineTransform> transform_;
    SolveStats stats_;
};

/// Solves -Delta v + decay v = source with homogeneous Neumann conditions.
inline Field elliptic_solve(const Field& source, double decay, double tol = 1e-10,
                            Preconditioner pc = Preconditioner::spectral) {
    HelmholtzSolver solver(source.domain(), tol, pc);
    return solver.solve(source, decay);
}

}  // namespace chemo
