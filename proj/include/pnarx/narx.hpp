#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "pnarx/linalg.hpp"
#include "pnarx/poly.hpp"

namespace pnarx {

//! Lag structure of a NARX model. The regressor at time t is
//! [u(t), u(t-1), ..., u(t-n_u), y(t-1), ..., y(t-n_y)], dimension n_u+n_y+1.
struct NarxStructure {
    int n_u = 1;
    int n_y = 3;
    int degree = 3;

    int regressor_dim() const { return n_u + n_y + 1; }
    int max_lag() const { return std::max(n_u, n_y); }
};

//! Polynomial NARX model: y(t) = f(x(t)) with f a multivariate polynomial.
struct PNarxModel {
    NarxStructure structure;
    MultiPoly f;

    double eval(std::span<const double> x) const { return poly_eval(f, x); }
    std::size_t parameter_count() const { return f.coeffs.size(); }
};

//! Decoupled NARX model: y(t) = sum_i g_i(v_i^T x(t)).
//! Output weights are absorbed into the branch coefficients; V columns are
//! kept at unit Euclidean norm.
struct DecoupledNarxModel {
    NarxStructure structure;
    Matrix v;                            // n x r
    std::vector<UnivariatePoly> branches; // r polynomials

    int rank() const { return static_cast<int>(branches.size()); }

    double eval(std::span<const double> x) const {
        double s = 0.0;
        for (std::size_t i = 0; i < branches.size(); ++i) {
            double z = 0.0;
            for (std::size_t k = 0; k < v.rows(); ++k) z += v(k, i) * x[k];
            s += branches[i](z);
        }
        return s;
    }

    std::size_t parameter_count() const {
        std::size_t c = v.rows() * v.cols();
        for (const auto& g : branches) c += g.coeffs.size();
        return c;
    }
};

struct RegressorData {
    Matrix x;                   // one regressor per row
    std::vector<double> targets; // y(t) aligned with rows
    int start_index = 0;        // first t used (== max lag)
};

//! Build the regression problem for equation-error fitting. Rows run from
//! t = max(n_u, n_y) to the end of the record.
inline RegressorData build_regressors(std::span<const double> u, std::span<const double> y,
                                      const NarxStructure& s) {
    if (u.size() != y.size()) throw DimensionMismatch("build_regressors: u/y lengths");
    const int t0 = s.max_lag();
    if (static_cast<int>(u.size()) <= t0)
        throw TooShort("build_regressors: record shorter than the lag structure");

    const std::size_t rows = u.size() - static_cast<std::size_t>(t0);
    RegressorData out;
    out.start_index = t0;
    out.x = Matrix(rows, s.regressor_dim());
    out.targets.resize(rows);
    for (std::size_t row = 0; row < rows; ++row) {
        const std::size_t t = row + static_cast<std::size_t>(t0);
        std::size_t c = 0;
        for (int lag = 0; lag <= s.n_u; ++lag) out.x(row, c++) = u[t - lag];
        for (int lag = 1; lag <= s.n_y; ++lag) out.x(row, c++) = y[t - lag];
        out.targets[row] = y[t];
    }
    return out;
}

struct PnarxFitInfo {
    double condition = 0.0;
    bool rank_deficient = false;
    int rank = 0;
    double residual_rms = 0.0;
};

//! Equation-error least squares over the constant-free monomial basis of the
//! configured degree. Rank-deficient problems return the basic (pivoted-QR)
//! solution; the deficiency is reported through `info`.
inline PNarxModel fit_pnarx(std::span<const double> u, std::span<const double> y,
                            const NarxStructure& s, PnarxFitInfo* info = nullptr) {
    const RegressorData reg = build_regressors(u, y, s);
    MonomialBasis basis = basis_enumerate(s.regressor_dim(), s.degree, false);
    if (reg.targets.size() < basis.size())
        throw TooShort("fit_pnarx: fewer regression rows than basis terms");

    Matrix phi(reg.x.rows(), basis.size());
    std::vector<double> xrow(s.regressor_dim());
    for (std::size_t row = 0; row < reg.x.rows(); ++row) {
        for (int c = 0; c < s.regressor_dim(); ++c) xrow[c] = reg.x(row, c);
        for (std::size_t j = 0; j < basis.size(); ++j)
            phi(row, j) = detail::monomial_eval(basis.exponents[j], xrow);
    }

    auto res = linalg::lstsq(phi, reg.targets);
    if (info) {
        info->condition = res.condition;
        info->rank_deficient = res.rank_deficient;
        info->rank = res.rank;
        double ss = 0.0;
        for (std::size_t row = 0; row < phi.rows(); ++row) {
            double pred = 0.0;
            for (std::size_t j = 0; j < basis.size(); ++j) pred += phi(row, j) * res.x[j];
            const double e = reg.targets[row] - pred;
            ss += e * e;
        }
        info->residual_rms = std::sqrt(ss / static_cast<double>(phi.rows()));
    }
    return PNarxModel{s, MultiPoly(std::move(basis), std::move(res.x))};
}

struct SimOptions {
    double divergence_factor = 1e6;
    double bound_override = 0.0; // > 0 replaces the derived bound
};

//! Free-run simulation. The first max(n_u, n_y) outputs are copied from
//! y_init, after which the model recursion runs on its own outputs.
template <typename Model>
std::vector<double> simulate(const Model& model, std::span<const double> u,
                             std::span<const double> y_init, const SimOptions& opts = {}) {
    const NarxStructure& s = model.structure;
    const int t0 = s.max_lag();
    if (static_cast<int>(y_init.size()) < s.n_y)
        throw TooShort("simulate: initialization window shorter than n_y");
    if (static_cast<int>(u.size()) < t0)
        throw TooShort("simulate: input shorter than the lag structure");

    double bound = opts.bound_override;
    if (bound <= 0.0) {
        const double init_rms = rms(std::vector<double>(y_init.begin(), y_init.end()));
        const double u_rms = rms(std::vector<double>(u.begin(), u.end()));
        bound = opts.divergence_factor * (init_rms > 0.0 ? init_rms : (u_rms > 0.0 ? u_rms : 1.0));
    }

    std::vector<double> ys(u.size(), 0.0);
    const std::size_t ncopy = std::min<std::size_t>(t0, y_init.size());
    for (std::size_t t = 0; t < ncopy; ++t) ys[t] = y_init[t];

    std::vector<double> x(s.regressor_dim());
    for (std::size_t t = static_cast<std::size_t>(t0); t < u.size(); ++t) {
        std::size_t c = 0;
        for (int lag = 0; lag <= s.n_u; ++lag) x[c++] = u[t - lag];
        for (int lag = 1; lag <= s.n_y; ++lag) x[c++] = ys[t - lag];
        const double yt = model.eval(x);
        if (!std::isfinite(yt) || std::abs(yt) > bound)
            throw Diverged("simulate: output exceeded divergence bound at sample " + std::to_string(t));
        ys[t] = yt;
    }
    return ys;
}

//! Relative RMS simulation error in percent: 100 * rms(y - y_s) / rms(y).
inline double e_rms(std::span<const double> y, std::span<const double> y_s) {
    if (y.size() != y_s.size()) throw DimensionMismatch("e_rms: signal lengths");
    double num = 0.0, den = 0.0;
    for (std::size_t k = 0; k < y.size(); ++k) {
        const double e = y[k] - y_s[k];
        num += e * e;
        den += y[k] * y[k];
    }
    if (den == 0.0) throw ZeroReference("e_rms: reference signal is identically zero");
    return 100.0 * std::sqrt(num / den);
}

//! Relative RMS function-approximation error in percent over operating points.
inline double e_f(const MultiPoly& f, const DecoupledNarxModel& f_d, const Matrix& x_o) {
    if (x_o.rows() == 0) throw DimensionMismatch("e_f: empty operating point set");
    double num = 0.0, den = 0.0;
    std::vector<double> x(x_o.cols());
    for (std::size_t l = 0; l < x_o.rows(); ++l) {
        for (std::size_t c = 0; c < x_o.cols(); ++c) x[c] = x_o(l, c);
        const double fv = poly_eval(f, x);
        const double dv = f_d.eval(x);
        num += (fv - dv) * (fv - dv);
        den += fv * fv;
    }
    if (den == 0.0) throw ZeroReference("e_f: reference function is zero on the operating points");
    return 100.0 * std::sqrt(num / den);
}

} // namespace pnarx
