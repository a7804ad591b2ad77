#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "pnarx/matrix.hpp"

namespace pnarx {

//! Dense third-order tensor, axes (output s, input k, operating point l).
//!
//! Entry (s,k,l) of a diagonal (CPD) tensor is sum_i W(s,i) V(k,i) H(l,i).
//! The matricization index maps below are fixed so that
//!   mode 1:  J1(s, k + n*l)  =  [W (H kr V)^T](s, k + n*l)
//!   mode 2:  J2(k, s + m*l)  =  [V (H kr W)^T](...)
//!   mode 3:  J3(l, s + m*k)  =  [H (V kr W)^T](...)
//! hold exactly, with kr the Khatri-Rao product defined here.
class Tensor3 {
public:
    Tensor3() = default;
    Tensor3(std::size_t dim_out, std::size_t dim_in, std::size_t dim_pts, double fill = 0.0)
        : m_(dim_out), n_(dim_in), npts_(dim_pts), data_(dim_out * dim_in * dim_pts, fill) {}

    std::size_t dim_out() const { return m_; }
    std::size_t dim_in() const { return n_; }
    std::size_t dim_pts() const { return npts_; }
    std::size_t size() const { return data_.size(); }

    double& operator()(std::size_t s, std::size_t k, std::size_t l) {
        return data_[s + m_ * k + m_ * n_ * l];
    }
    double operator()(std::size_t s, std::size_t k, std::size_t l) const {
        return data_[s + m_ * k + m_ * n_ * l];
    }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

private:
    std::size_t m_ = 0, n_ = 0, npts_ = 0;
    std::vector<double> data_;
};

//! Khatri-Rao (columnwise Kronecker) product of a (p x r) and b (q x r).
//! Column i of the result is kron(a_i, b_i), b-index fastest.
inline Matrix khatri_rao(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols())
        throw ColumnMismatch("khatri_rao: column counts differ");
    const std::size_t p = a.rows(), q = b.rows(), r = a.cols();
    Matrix out(p * q, r);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t ia = 0; ia < p; ++ia) {
            const double av = a(ia, i);
            for (std::size_t ib = 0; ib < q; ++ib)
                out(ia * q + ib, i) = av * b(ib, i);
        }
    return out;
}

//! Mode-wise unfolding; mode in {1,2,3}. Shapes: m x nN, n x mN, N x mn.
inline Matrix matricize(const Tensor3& t, int mode) {
    const std::size_t m = t.dim_out(), n = t.dim_in(), npts = t.dim_pts();
    switch (mode) {
    case 1: {
        Matrix out(m, n * npts);
        for (std::size_t l = 0; l < npts; ++l)
            for (std::size_t k = 0; k < n; ++k)
                for (std::size_t s = 0; s < m; ++s) out(s, k + n * l) = t(s, k, l);
        return out;
    }
    case 2: {
        Matrix out(n, m * npts);
        for (std::size_t l = 0; l < npts; ++l)
            for (std::size_t k = 0; k < n; ++k)
                for (std::size_t s = 0; s < m; ++s) out(k, s + m * l) = t(s, k, l);
        return out;
    }
    case 3: {
        Matrix out(npts, m * n);
        for (std::size_t l = 0; l < npts; ++l)
            for (std::size_t k = 0; k < n; ++k)
                for (std::size_t s = 0; s < m; ++s) out(l, s + m * k) = t(s, k, l);
        return out;
    }
    default:
        throw DimensionMismatch("matricize: mode must be 1, 2 or 3");
    }
}

//! Rebuild a tensor from a mode unfolding (inverse of matricize).
inline Tensor3 fold(const Matrix& u, int mode, std::size_t m, std::size_t n, std::size_t npts) {
    Tensor3 t(m, n, npts);
    for (std::size_t l = 0; l < npts; ++l)
        for (std::size_t k = 0; k < n; ++k)
            for (std::size_t s = 0; s < m; ++s) {
                switch (mode) {
                case 1: t(s, k, l) = u(s, k + n * l); break;
                case 2: t(s, k, l) = u(k, s + m * l); break;
                case 3: t(s, k, l) = u(l, s + m * k); break;
                default: throw DimensionMismatch("fold: mode must be 1, 2 or 3");
                }
            }
    return t;
}

//! Diagonal (rank-r) reconstruction: entry (s,k,l) = sum_i w_si v_ki h_li.
inline Tensor3 cpd_reconstruct(const Matrix& w, const Matrix& v, const Matrix& h) {
    if (w.cols() != v.cols() || v.cols() != h.cols())
        throw ColumnMismatch("cpd_reconstruct: factor column counts differ");
    const std::size_t m = w.rows(), n = v.rows(), npts = h.rows(), r = w.cols();
    Tensor3 t(m, n, npts);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t l = 0; l < npts; ++l) {
            const double hv = h(l, i);
            for (std::size_t k = 0; k < n; ++k) {
                const double vh = v(k, i) * hv;
                for (std::size_t s = 0; s < m; ++s) t(s, k, l) += w(s, i) * vh;
            }
        }
    return t;
}

inline double frob_norm(const Tensor3& t) {
    double s = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) s += t.data()[i] * t.data()[i];
    return std::sqrt(s);
}

inline double frob_norm(const Matrix& m) {
    double s = 0.0;
    for (std::size_t i = 0; i < m.size(); ++i) s += m.data()[i] * m.data()[i];
    return std::sqrt(s);
}

} // namespace pnarx
