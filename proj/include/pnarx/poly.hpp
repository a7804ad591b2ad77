#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <vector>

#include "pnarx/linalg.hpp"
#include "pnarx/matrix.hpp"

namespace pnarx {

//! Monomial basis over n variables up to a total degree, in graded
//! lexicographic order: ascending total degree, and within one degree the
//! exponent tuples sorted lexicographically descending (x1^2 before x1*x2
//! before x2^2). The order is what makes serialized coefficient vectors
//! portable, so it must never change.
struct MonomialBasis {
    int n_vars = 0;
    int degree = 0;
    bool include_constant = false;
    std::vector<std::vector<int>> exponents;

    std::size_t size() const { return exponents.size(); }
};

namespace detail {

inline void enumerate_degree(int n_vars, int remaining, std::vector<int>& current,
                             std::vector<std::vector<int>>& out) {
    const int pos = static_cast<int>(current.size());
    if (pos == n_vars - 1) {
        current.push_back(remaining);
        out.push_back(current);
        current.pop_back();
        return;
    }
    for (int e = remaining; e >= 0; --e) {
        current.push_back(e);
        enumerate_degree(n_vars, remaining - e, current, out);
        current.pop_back();
    }
}

} // namespace detail

inline MonomialBasis basis_enumerate(int n_vars, int degree, bool include_constant) {
    MonomialBasis b;
    b.n_vars = n_vars;
    b.degree = degree;
    b.include_constant = include_constant;
    std::vector<int> current;
    for (int g = include_constant ? 0 : 1; g <= degree; ++g)
        detail::enumerate_degree(n_vars, g, current, b.exponents);
    return b;
}

//! Multivariate polynomial in the monomial basis.
struct MultiPoly {
    MonomialBasis basis;
    std::vector<double> coeffs;

    MultiPoly() = default;
    explicit MultiPoly(MonomialBasis b) : basis(std::move(b)), coeffs(basis.size(), 0.0) {}
    MultiPoly(MonomialBasis b, std::vector<double> c) : basis(std::move(b)), coeffs(std::move(c)) {
        if (coeffs.size() != basis.size())
            throw DimensionMismatch("MultiPoly: coefficient count vs basis size");
    }

    int n_vars() const { return basis.n_vars; }
};

namespace detail {

inline double int_pow(double x, int e) {
    double p = 1.0;
    for (int i = 0; i < e; ++i) p *= x;
    return p;
}

inline double monomial_eval(const std::vector<int>& exps, std::span<const double> x) {
    double p = 1.0;
    for (std::size_t v = 0; v < exps.size(); ++v)
        if (exps[v] != 0) p *= int_pow(x[v], exps[v]);
    return p;
}

} // namespace detail

inline double poly_eval(const MultiPoly& p, std::span<const double> x) {
    if (static_cast<int>(x.size()) != p.basis.n_vars)
        throw DimensionMismatch("poly_eval: point dimension");
    double s = 0.0;
    for (std::size_t j = 0; j < p.coeffs.size(); ++j)
        s += p.coeffs[j] * detail::monomial_eval(p.basis.exponents[j], x);
    return s;
}

inline std::vector<double> poly_gradient(const MultiPoly& p, std::span<const double> x) {
    if (static_cast<int>(x.size()) != p.basis.n_vars)
        throw DimensionMismatch("poly_gradient: point dimension");
    const int n = p.basis.n_vars;
    std::vector<double> g(n, 0.0);
    for (std::size_t j = 0; j < p.coeffs.size(); ++j) {
        const double c = p.coeffs[j];
        if (c == 0.0) continue;
        const auto& e = p.basis.exponents[j];
        for (int v = 0; v < n; ++v) {
            if (e[v] == 0) continue;
            double term = c * e[v] * detail::int_pow(x[v], e[v] - 1);
            for (int u = 0; u < n; ++u)
                if (u != v && e[u] != 0) term *= detail::int_pow(x[u], e[u]);
            g[v] += term;
        }
    }
    return g;
}

inline Matrix poly_hessian(const MultiPoly& p, std::span<const double> x) {
    if (static_cast<int>(x.size()) != p.basis.n_vars)
        throw DimensionMismatch("poly_hessian: point dimension");
    const int n = p.basis.n_vars;
    Matrix h(n, n);
    for (std::size_t j = 0; j < p.coeffs.size(); ++j) {
        const double c = p.coeffs[j];
        if (c == 0.0) continue;
        const auto& e = p.basis.exponents[j];
        for (int v = 0; v < n; ++v) {
            if (e[v] == 0) continue;
            // diagonal d^2/dx_v^2
            if (e[v] >= 2) {
                double term = c * e[v] * (e[v] - 1) * detail::int_pow(x[v], e[v] - 2);
                for (int u = 0; u < n; ++u)
                    if (u != v && e[u] != 0) term *= detail::int_pow(x[u], e[u]);
                h(v, v) += term;
            }
            // mixed d^2/dx_v dx_w, w > v
            for (int w = v + 1; w < n; ++w) {
                if (e[w] == 0) continue;
                double term = c * e[v] * e[w] * detail::int_pow(x[v], e[v] - 1) *
                              detail::int_pow(x[w], e[w] - 1);
                for (int u = 0; u < n; ++u)
                    if (u != v && u != w && e[u] != 0) term *= detail::int_pow(x[u], e[u]);
                h(v, w) += term;
                h(w, v) += term;
            }
        }
    }
    return h;
}

//! Univariate polynomial c_0 + c_1 z + ... + c_d z^d.
struct UnivariatePoly {
    std::vector<double> coeffs; // size degree+1

    UnivariatePoly() : coeffs(1, 0.0) {}
    explicit UnivariatePoly(std::vector<double> c) : coeffs(std::move(c)) {
        if (coeffs.empty()) coeffs.assign(1, 0.0);
    }

    int degree() const { return static_cast<int>(coeffs.size()) - 1; }

    double operator()(double z) const {
        double s = 0.0;
        for (std::size_t j = coeffs.size(); j-- > 0;) s = s * z + coeffs[j];
        return s;
    }

    UnivariatePoly derivative() const {
        if (coeffs.size() <= 1) return UnivariatePoly();
        std::vector<double> d(coeffs.size() - 1);
        for (std::size_t j = 1; j < coeffs.size(); ++j) d[j - 1] = coeffs[j] * static_cast<double>(j);
        return UnivariatePoly(std::move(d));
    }
};

//! Vandermonde matrix: row k = (1?, z_k, z_k^2, ..., z_k^d).
inline Matrix vandermonde(std::span<const double> z, int degree, bool include_constant) {
    const std::size_t cols = static_cast<std::size_t>(degree) + (include_constant ? 1 : 0);
    Matrix v(z.size(), cols);
    for (std::size_t k = 0; k < z.size(); ++k) {
        double p = include_constant ? 1.0 : z[k];
        for (std::size_t j = 0; j < cols; ++j) {
            v(k, j) = p;
            p *= z[k];
        }
    }
    return v;
}

//! Least-squares fit of a degree-d polynomial (with constant) through (z, samples).
inline UnivariatePoly fit_univariate(std::span<const double> z, std::span<const double> samples, int degree) {
    if (z.size() != samples.size())
        throw DimensionMismatch("fit_univariate: z/sample lengths");
    std::vector<double> distinct(z.begin(), z.end());
    std::sort(distinct.begin(), distinct.end());
    distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
    if (distinct.size() < static_cast<std::size_t>(degree) + 1)
        throw RankDeficient("fit_univariate: fewer distinct z values than degree+1");

    const Matrix v = vandermonde(z, degree, true);
    auto res = linalg::lstsq(v, std::vector<double>(samples.begin(), samples.end()));
    return UnivariatePoly(std::move(res.x));
}

} // namespace pnarx
