#pragma once

// Shared test oracles. Everything here is deliberately independent of the
// library code paths it is used to check: finite differences, naive
// enumeration, and direct multinomial expansion.

#include <cmath>
#include <functional>
#include <map>
#include <vector>

#include "pnarx/matrix.hpp"
#include "pnarx/poly.hpp"
#include "pnarx/rng.hpp"

namespace testsup {

// central finite-difference gradient of an arbitrary callable
template <typename F>
std::vector<double> fd_gradient(F&& f, std::vector<double> x, double step) {
    std::vector<double> g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double xi = x[i];
        x[i] = xi + step;
        const double fp = f(x);
        x[i] = xi - step;
        const double fm = f(x);
        x[i] = xi;
        g[i] = (fp - fm) / (2.0 * step);
    }
    return g;
}

// central finite difference of a vector-valued callable (used for Hessians)
template <typename F>
pnarx::Matrix fd_jacobian(F&& f, std::vector<double> x, double step) {
    const std::vector<double> f0 = f(x);
    pnarx::Matrix j(f0.size(), x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double xi = x[i];
        x[i] = xi + step;
        const auto fp = f(x);
        x[i] = xi - step;
        const auto fm = f(x);
        x[i] = xi;
        for (std::size_t r = 0; r < f0.size(); ++r) j(r, i) = (fp[r] - fm[r]) / (2.0 * step);
    }
    return j;
}

// double-loop Kronecker-per-column Khatri-Rao oracle
inline pnarx::Matrix naive_khatri_rao(const pnarx::Matrix& a, const pnarx::Matrix& b) {
    pnarx::Matrix out(a.rows() * b.rows(), a.cols());
    for (std::size_t c = 0; c < a.cols(); ++c) {
        std::size_t row = 0;
        for (std::size_t i = 0; i < a.rows(); ++i)
            for (std::size_t j = 0; j < b.rows(); ++j) out(row++, c) = a(i, c) * b(j, c);
    }
    return out;
}

inline pnarx::MultiPoly random_poly(int n_vars, int degree, pnarx::Rng& rng, bool include_constant = true) {
    pnarx::MultiPoly p(pnarx::basis_enumerate(n_vars, degree, include_constant));
    for (auto& c : p.coeffs) c = rng.uniform(-1.0, 1.0);
    return p;
}

inline std::vector<double> random_point(int n, pnarx::Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::vector<double> x(n);
    for (auto& v : x) v = rng.uniform(lo, hi);
    return x;
}

// Expand sum_i g_i(v_i^T x) into the monomial basis by multinomial expansion.
// Independent route to the same function a DecoupledNarxModel evaluates.
inline pnarx::MultiPoly expand_decoupled(const pnarx::Matrix& v,
                                         const std::vector<pnarx::UnivariatePoly>& branches) {
    const int n = static_cast<int>(v.rows());
    int max_deg = 1;
    for (const auto& g : branches) max_deg = std::max(max_deg, g.degree());
    pnarx::MultiPoly out(pnarx::basis_enumerate(n, max_deg, true));

    std::map<std::vector<int>, std::size_t> index;
    for (std::size_t j = 0; j < out.basis.exponents.size(); ++j) index[out.basis.exponents[j]] = j;

    const auto factorial = [](int k) {
        double f = 1.0;
        for (int i = 2; i <= k; ++i) f *= i;
        return f;
    };

    for (std::size_t i = 0; i < branches.size(); ++i) {
        const auto& g = branches[i];
        for (int deg = 0; deg <= g.degree(); ++deg) {
            const double c = g.coeffs[deg];
            if (c == 0.0) continue;
            // (v^T x)^deg = sum over exponent tuples |e|=deg of multinom * prod v^e * x^e
            std::vector<int> e(n, 0);
            const std::function<void(int, int)> rec = [&](int var, int remaining) {
                if (var == n - 1) {
                    e[var] = remaining;
                    double coeff = c * factorial(deg);
                    for (int u = 0; u < n; ++u) {
                        coeff /= factorial(e[u]);
                        for (int q = 0; q < e[u]; ++q) coeff *= v(u, i);
                    }
                    out.coeffs[index.at(e)] += coeff;
                    e[var] = 0;
                    return;
                }
                for (int q = remaining; q >= 0; --q) {
                    e[var] = q;
                    rec(var + 1, remaining - q);
                    e[var] = 0;
                }
            };
            rec(0, deg);
        }
    }
    return out;
}

// Random exact-decoupled cubic test function: unit-norm directions, cubic
// branches. Returns the expanded polynomial and the ground-truth factors.
struct DecoupledTruth {
    pnarx::Matrix v;
    std::vector<pnarx::UnivariatePoly> branches; // output weights absorbed
    pnarx::MultiPoly f;
};

inline DecoupledTruth random_decoupled_cubic(int n, int r, pnarx::Rng& rng) {
    DecoupledTruth t;
    t.v = pnarx::Matrix(n, r);
    for (int i = 0; i < r; ++i) {
        std::vector<double> col(n);
        for (auto& x : col) x = rng.normal();
        const double nv = pnarx::norm2(col);
        for (auto& x : col) x /= nv;
        t.v.set_col(i, col);
    }
    for (int i = 0; i < r; ++i) {
        std::vector<double> c(4);
        for (auto& x : c) x = rng.uniform(-1.0, 1.0);
        if (std::abs(c[3]) < 0.2) c[3] = c[3] < 0 ? -0.5 : 0.5; // keep it genuinely cubic
        t.branches.emplace_back(std::move(c));
    }
    t.f = expand_decoupled(t.v, t.branches);
    return t;
}

} // namespace testsup
