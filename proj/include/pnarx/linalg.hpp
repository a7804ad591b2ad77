#pragma once

#include <optional>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include "pnarx/matrix.hpp"

// Thin Eigen-backed solvers over the row-major Matrix type. Everything here is
// generic numerical plumbing; the method-specific assembly lives with its module.

namespace pnarx::linalg {

using EigenMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using EigenMutMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

inline EigenMap map(const Matrix& m) {
    return EigenMap(m.data(), static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols()));
}

struct LstsqResult {
    std::vector<double> x;
    int rank = 0;
    bool rank_deficient = false;
    double condition = 0.0; // |R(0,0)/R(k,k)| from the pivoted QR
};

//! Least-squares solve min ||A x - b|| via column-pivoted QR.
//! Rank-deficient systems get the basic solution (dependent columns zeroed).
inline LstsqResult lstsq(const Matrix& a, const std::vector<double>& b) {
    if (b.size() != a.rows()) throw DimensionMismatch("lstsq: rhs length");
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(map(a));
    const Eigen::VectorXd rhs = Eigen::Map<const Eigen::VectorXd>(b.data(), static_cast<Eigen::Index>(b.size()));
    Eigen::VectorXd x = qr.solve(rhs);

    LstsqResult r;
    r.rank = static_cast<int>(qr.rank());
    r.rank_deficient = r.rank < static_cast<int>(a.cols());
    const auto& R = qr.matrixR();
    const double r00 = std::abs(R(0, 0));
    const Eigen::Index k = std::min<Eigen::Index>(a.rows(), a.cols()) - 1;
    const double rkk = k >= 0 ? std::abs(R(k, k)) : r00;
    r.condition = rkk > 0.0 ? r00 / rkk : std::numeric_limits<double>::infinity();
    r.x.assign(x.data(), x.data() + x.size());
    return r;
}

//! Multi-RHS least squares: minimizes ||A X - B||_F column by column.
inline Matrix lstsq_multi(const Matrix& a, const Matrix& b, bool* rank_deficient = nullptr) {
    if (b.rows() != a.rows()) throw DimensionMismatch("lstsq_multi: rhs rows");
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(map(a));
    Eigen::MatrixXd x = qr.solve(Eigen::MatrixXd(map(b)));
    if (rank_deficient) *rank_deficient = qr.rank() < static_cast<Eigen::Index>(a.cols());
    Matrix out(a.cols(), b.cols());
    EigenMutMap(out.data(), x.rows(), x.cols()) = x;
    return out;
}

//! Cholesky solve of a symmetric positive (semi)definite system A x = b.
//! Marginal pivots get a few escalating diagonal jitters (relative to the
//! mean diagonal) before the eigenvalue pseudo-inverse takes over as the
//! minimum-norm last resort; `fallback` reports any non-plain-LLT path.
inline std::vector<double> solve_spd(const Matrix& a, const std::vector<double>& b, bool* fallback = nullptr) {
    if (a.rows() != a.cols() || b.size() != a.rows()) throw DimensionMismatch("solve_spd: shape");
    const Eigen::MatrixXd A = map(a);
    const Eigen::VectorXd rhs = Eigen::Map<const Eigen::VectorXd>(b.data(), static_cast<Eigen::Index>(b.size()));

    double mean_diag = A.diagonal().cwiseAbs().mean();
    if (mean_diag <= 0.0) mean_diag = 1.0;
    for (int attempt = 0; attempt < 5; ++attempt) {
        Eigen::MatrixXd work = A;
        if (attempt > 0) {
            const double jitter = mean_diag * std::pow(10.0, -15 + 3 * attempt);
            work.diagonal().array() += jitter;
        }
        Eigen::LLT<Eigen::MatrixXd> llt(work);
        if (llt.info() != Eigen::Success) continue;
        Eigen::VectorXd x = llt.solve(rhs);
        if (!x.allFinite()) continue;
        if (fallback) *fallback = attempt > 0;
        return std::vector<double>(x.data(), x.data() + x.size());
    }

    // genuinely singular; minimum-norm pseudo-inverse (cheap only when small)
    if (fallback) *fallback = true;
    if (a.rows() <= 64) {
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(A);
        const Eigen::VectorXd& ev = eig.eigenvalues();
        const double cutoff = ev.cwiseAbs().maxCoeff() * 1e-12;
        Eigen::VectorXd inv = ev.unaryExpr([cutoff](double v) { return std::abs(v) > cutoff ? 1.0 / v : 0.0; });
        Eigen::VectorXd x = eig.eigenvectors() * inv.asDiagonal() * eig.eigenvectors().transpose() * rhs;
        return std::vector<double>(x.data(), x.data() + x.size());
    }
    Eigen::MatrixXd work = A;
    work.diagonal().array() += mean_diag * 1e-2;
    Eigen::LLT<Eigen::MatrixXd> llt(work);
    Eigen::VectorXd x = llt.solve(rhs);
    return std::vector<double>(x.data(), x.data() + x.size());
}

//! Lower Cholesky factor of a symmetric matrix, or nullopt when not PD.
inline std::optional<Matrix> cholesky_lower(const Matrix& a) {
    if (a.rows() != a.cols()) throw DimensionMismatch("cholesky_lower: square");
    Eigen::LLT<Eigen::MatrixXd> llt(Eigen::MatrixXd(map(a)));
    if (llt.info() != Eigen::Success) return std::nullopt;
    Eigen::MatrixXd l = llt.matrixL();
    Matrix out(a.rows(), a.cols());
    EigenMutMap(out.data(), l.rows(), l.cols()) = l;
    return out;
}

//! Orthonormalize the columns of a (thin QR); trailing columns beyond the
//! rank keep their normalized Gram-Schmidt residual direction.
inline Matrix orthonormal_columns(const Matrix& a) {
    Matrix q = a;
    const std::size_t n = q.rows(), r = q.cols();
    for (std::size_t j = 0; j < r; ++j) {
        auto v = q.col(j);
        for (std::size_t k = 0; k < j; ++k) {
            const auto u = q.col(k);
            const double p = dot(u, v);
            for (std::size_t i = 0; i < n; ++i) v[i] -= p * u[i];
        }
        const double nv = norm2(v);
        if (nv > 1e-14) {
            for (auto& x : v) x /= nv;
        }
        q.set_col(j, v);
    }
    return q;
}

} // namespace pnarx::linalg
