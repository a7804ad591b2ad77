#pragma once

#include <cmath>
#include <vector>

#include "pnarx/fcpd.hpp"
#include "pnarx/finetune.hpp"
#include "pnarx/linalg.hpp"
#include "pnarx/narx.hpp"
#include "pnarx/poly.hpp"
#include "pnarx/rng.hpp"

namespace pnarx {

//! Factors of the symmetric curvature fit: shared direction matrix V and the
//! stacked polynomial coefficients c = [c_0, c_{1,1}..c_{d,1}, ..., c_{d,r}].
//! Only the degree >= 2 entries are determined by the Hessian tensor; c_0 and
//! the c_{1,i} come from recover_linear_part.
struct HessianFactors {
    Matrix v;              // n x r, unit-norm columns
    std::vector<double> c; // length 1 + r*d
    int degree = 3;

    double c0() const { return c[0]; }
    double coeff(std::size_t branch, int j) const { return c[1 + branch * degree + (j - 1)]; }
    double& coeff(std::size_t branch, int j) { return c[1 + branch * degree + (j - 1)]; }
};

struct HessianFitOptions {
    int max_iters = 150;
    int restarts = 4;
    double mu_init = 1e-4;
    double rel_tol = 1e-12;
};

struct HessianFitInfo {
    double objective = 0.0;     // squared residual at exit
    double tensor_norm_sq = 0.0;
    int iterations = 0;
    bool no_descent = false;    // no restart produced an accepted step
    int restarts_used = 0;
};

//! Stack the Hessians of f at the operating points into an n x n x N tensor.
inline Tensor3 build_hessian_tensor(const MultiPoly& f, const Matrix& xo) {
    if (static_cast<std::size_t>(f.n_vars()) != xo.cols())
        throw DimensionMismatch("build_hessian_tensor: f arity vs point dimension");
    const std::size_t n = xo.cols(), npts = xo.rows();
    Tensor3 h(n, n, npts);
    std::vector<double> x(n);
    for (std::size_t l = 0; l < npts; ++l) {
        for (std::size_t c = 0; c < n; ++c) x[c] = xo(l, c);
        const Matrix hl = poly_hessian(f, x);
        for (std::size_t a = 0; a < n; ++a)
            for (std::size_t b = 0; b < n; ++b) h(a, b, l) = hl(a, b);
    }
    return h;
}

namespace hessian_detail {

//! Residual of the slice-symmetric fit, upper triangle only with sqrt(2)
//! off-diagonal weights (preserves the Frobenius objective).
inline void residual(const Tensor3& h, const Matrix& xo, const Matrix& v,
                     const std::vector<double>& c2, int degree, std::vector<double>& res) {
    const std::size_t n = v.rows(), r = v.cols(), npts = xo.rows();
    const double sq2 = std::sqrt(2.0);
    const int ncurv = degree - 1; // coefficients c_2..c_d per branch

    std::vector<double> g2(r);
    std::size_t at = 0;
    for (std::size_t l = 0; l < npts; ++l) {
        for (std::size_t i = 0; i < r; ++i) {
            double z = 0.0;
            for (std::size_t k = 0; k < n; ++k) z += v(k, i) * xo(l, k);
            // g_i'' (z) = sum_{j>=2} c_j j (j-1) z^{j-2}
            double acc = 0.0, zp = 1.0;
            for (int j = 2; j <= degree; ++j) {
                acc += c2[i * ncurv + (j - 2)] * j * (j - 1) * zp;
                zp *= z;
            }
            g2[i] = acc;
        }
        for (std::size_t a = 0; a < n; ++a)
            for (std::size_t b = a; b < n; ++b) {
                double model = 0.0;
                for (std::size_t i = 0; i < r; ++i) model += g2[i] * v(a, i) * v(b, i);
                const double w = a == b ? 1.0 : sq2;
                res[at++] = w * (h(a, b, l) - model);
            }
    }
}

//! Linear least squares for the curvature coefficients given V.
inline std::vector<double> curvature_ls(const Tensor3& h, const Matrix& xo, const Matrix& v,
                                        int degree) {
    const std::size_t n = v.rows(), r = v.cols(), npts = xo.rows();
    const int ncurv = degree - 1;
    if (ncurv <= 0) return {};
    const std::size_t np = r * static_cast<std::size_t>(ncurv);
    const double sq2 = std::sqrt(2.0);

    Matrix a_mat(npts * n * (n + 1) / 2, np);
    std::vector<double> rhs;
    rhs.reserve(a_mat.rows());
    std::size_t row = 0;
    for (std::size_t l = 0; l < npts; ++l) {
        std::vector<double> z(r, 0.0);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t k = 0; k < n; ++k) z[i] += v(k, i) * xo(l, k);
        for (std::size_t a = 0; a < n; ++a)
            for (std::size_t b = a; b < n; ++b) {
                const double w = a == b ? 1.0 : sq2;
                for (std::size_t i = 0; i < r; ++i) {
                    double zp = 1.0;
                    for (int j = 2; j <= degree; ++j) {
                        a_mat(row, i * ncurv + (j - 2)) = w * v(a, i) * v(b, i) * j * (j - 1) * zp;
                        zp *= z[i];
                    }
                }
                rhs.push_back(w * h(a, b, l));
                ++row;
            }
    }
    return linalg::lstsq(a_mat, rhs).x;
}

} // namespace hessian_detail

//! Fit H ~ sum_i g_i''(v_i^T x) v_i v_i^T over (V, curvature coefficients) by
//! damped Gauss-Newton with seeded random restarts. Degree <= 1 leaves no
//! curvature to fit; the objective is then just ||H||_F^2.
inline HessianFactors structured_hessian_decouple(const Tensor3& h, int r, int degree,
                                                  const Matrix& xo, std::uint64_t seed,
                                                  const HessianFitOptions& opts = {},
                                                  HessianFitInfo* info = nullptr) {
    const std::size_t n = xo.cols(), npts = xo.rows();
    if (h.dim_out() != n || h.dim_in() != n || h.dim_pts() != npts)
        throw DimensionMismatch("structured_hessian_decouple: tensor vs points shape");
    if (npts < static_cast<std::size_t>(degree) + 1)
        throw TooShort("structured_hessian_decouple: need at least degree+1 points");

    const int ncurv = degree - 1;
    const std::size_t np_v = n * static_cast<std::size_t>(r);
    const std::size_t np = np_v + static_cast<std::size_t>(r) * std::max(ncurv, 0);
    const std::size_t nres = npts * n * (n + 1) / 2;

    double hnorm_sq = 0.0;
    {
        const double sq2 = std::sqrt(2.0);
        for (std::size_t l = 0; l < npts; ++l)
            for (std::size_t a = 0; a < n; ++a)
                for (std::size_t b = a; b < n; ++b) {
                    const double w = a == b ? 1.0 : sq2;
                    hnorm_sq += w * w * h(a, b, l) * h(a, b, l);
                }
    }

    HessianFitInfo local;
    HessianFitInfo& fi = info ? *info : local;
    fi = HessianFitInfo{};
    fi.tensor_norm_sq = hnorm_sq;

    Matrix best_v(n, r);
    std::vector<double> best_c2(static_cast<std::size_t>(r) * std::max(ncurv, 0), 0.0);
    double best_obj = std::numeric_limits<double>::infinity();
    bool any_accept = false;

    std::vector<double> res(nres), res_cand(nres);
    for (int restart = 0; restart < std::max(1, opts.restarts); ++restart) {
        const std::uint64_t rs = restart == 0 ? seed : Rng::derive(seed, static_cast<std::uint64_t>(restart));
        Rng rng(rs);
        Matrix v(n, r);
        for (std::size_t i = 0; i < v.size(); ++i) v.data()[i] = rng.normal();
        v = fcpd_detail::normalize_columns(linalg::orthonormal_columns(v));
        std::vector<double> c2 = hessian_detail::curvature_ls(h, xo, v, degree);

        hessian_detail::residual(h, xo, v, c2, degree, res);
        double sse = dot(res, res);

        if (ncurv <= 0) {
            // linear branches: nothing to fit, objective is the tensor energy
            if (sse < best_obj) {
                best_obj = sse;
                best_v = v;
                best_c2 = c2;
            }
            fi.restarts_used = restart + 1;
            continue;
        }

        double mu = opts.mu_init;
        for (int iter = 0; iter < opts.max_iters; ++iter) {
            // forward-difference Jacobian over (V, c2)
            Matrix jac(nres, np);
            {
                Matrix vp = v;
                std::vector<double> cp = c2;
                for (std::size_t pidx = 0; pidx < np; ++pidx) {
                    double* slot = pidx < np_v ? &vp(pidx % n, pidx / n) : &cp[pidx - np_v];
                    const double save = *slot;
                    const double step = 1e-7 * (1.0 + std::abs(save));
                    *slot = save + step;
                    hessian_detail::residual(h, xo, vp, cp, degree, res_cand);
                    *slot = save;
                    for (std::size_t t = 0; t < nres; ++t)
                        jac(t, pidx) = (res_cand[t] - res[t]) / step;
                }
            }

            Matrix jtj(np, np);
            std::vector<double> jtr(np, 0.0);
            for (std::size_t t = 0; t < nres; ++t)
                for (std::size_t a = 0; a < np; ++a) {
                    const double ja = jac(t, a);
                    if (ja == 0.0) continue;
                    jtr[a] += ja * res[t];
                    for (std::size_t b = a; b < np; ++b) jtj(a, b) += ja * jac(t, b);
                }
            for (std::size_t a = 0; a < np; ++a)
                for (std::size_t b = 0; b < a; ++b) jtj(a, b) = jtj(b, a);

            bool accepted = false;
            for (int attempt = 0; attempt < 6; ++attempt) {
                Matrix damped = jtj;
                for (std::size_t a = 0; a < np; ++a) damped(a, a) += mu * (1.0 + jtj(a, a));
                const auto delta = linalg::solve_spd(damped, jtr);

                Matrix v_cand = v;
                std::vector<double> c_cand = c2;
                for (std::size_t pidx = 0; pidx < np; ++pidx) {
                    if (pidx < np_v)
                        v_cand(pidx % n, pidx / n) -= delta[pidx];
                    else
                        c_cand[pidx - np_v] -= delta[pidx];
                }
                hessian_detail::residual(h, xo, v_cand, c_cand, degree, res_cand);
                const double sse_cand = dot(res_cand, res_cand);
                if (sse_cand < sse) {
                    const double gain = (sse - sse_cand) / std::max(sse, 1e-300);
                    v = v_cand;
                    c2 = c_cand;
                    std::swap(res, res_cand);
                    sse = sse_cand;
                    mu = std::max(mu * 0.3, 1e-14);
                    accepted = true;
                    any_accept = true;
                    fi.iterations++;
                    if (gain < opts.rel_tol) iter = opts.max_iters;
                    break;
                }
                mu *= 10.0;
            }
            if (!accepted) break;
        }

        fi.restarts_used = restart + 1;
        if (sse < best_obj) {
            best_obj = sse;
            best_v = v;
            best_c2 = c2;
        }
        if (best_obj <= 1e-14 * std::max(hnorm_sq, 1e-300)) break; // exact fit found
    }

    fi.objective = best_obj;
    fi.no_descent = !any_accept && ncurv > 0;

    // unit-norm columns with the scale absorbed into the coefficients
    HessianFactors out;
    out.degree = degree;
    out.v = best_v;
    out.c.assign(1 + static_cast<std::size_t>(r) * degree, 0.0);
    for (std::size_t i = 0; i < static_cast<std::size_t>(r); ++i) {
        double s = 0.0;
        for (std::size_t k = 0; k < n; ++k) s += out.v(k, i) * out.v(k, i);
        s = std::sqrt(s);
        if (s > 0.0) {
            for (std::size_t k = 0; k < n; ++k) out.v(k, i) /= s;
            double sj = s * s;
            for (int j = 2; j <= degree; ++j) {
                out.coeff(i, j) = best_c2[i * std::max(ncurv, 0) + (j - 2)] * sj;
                sj *= s;
            }
        }
    }
    return out;
}

//! Fill c_0 and the linear coefficients c_{1,i} by least squares of
//! f(x) minus the curvature part onto [1, z_1, ..., z_r]. Collinear
//! projections fall back to the basic pivoted-QR solution (reported).
inline void recover_linear_part(const MultiPoly& f, HessianFactors& factors, const Matrix& xo,
                                bool* rank_deficient = nullptr) {
    const std::size_t n = factors.v.rows(), r = factors.v.cols(), npts = xo.rows();
    Matrix a(npts, r + 1);
    std::vector<double> rhs(npts);
    std::vector<double> x(n);
    for (std::size_t l = 0; l < npts; ++l) {
        a(l, 0) = 1.0;
        double curv = 0.0;
        for (std::size_t i = 0; i < r; ++i) {
            double z = 0.0;
            for (std::size_t k = 0; k < n; ++k) z += factors.v(k, i) * xo(l, k);
            a(l, 1 + i) = z;
            double zp = z * z;
            for (int j = 2; j <= factors.degree; ++j) {
                curv += factors.coeff(i, j) * zp;
                zp *= z;
            }
        }
        for (std::size_t c = 0; c < n; ++c) x[c] = xo(l, c);
        rhs[l] = poly_eval(f, x) - curv;
    }
    const auto fit = linalg::lstsq(a, rhs);
    if (rank_deficient) *rank_deficient = fit.rank_deficient;
    factors.c[0] = fit.x[0];
    for (std::size_t i = 0; i < r; ++i) factors.coeff(i, 1) = fit.x[1 + i];
}

//! Convert the factors into a decoupled model; c_0 is folded into the first
//! branch's constant.
inline DecoupledNarxModel hessian_factors_to_model(const HessianFactors& factors,
                                                   const NarxStructure& structure) {
    DecoupledNarxModel model;
    model.structure = structure;
    model.v = factors.v;
    const std::size_t r = factors.v.cols();
    for (std::size_t i = 0; i < r; ++i) {
        std::vector<double> c(factors.degree + 1, 0.0);
        for (int j = 1; j <= factors.degree; ++j) c[j] = factors.coeff(i, j);
        model.branches.emplace_back(std::move(c));
    }
    if (!model.branches.empty()) model.branches.front().coeffs[0] += factors.c0();
    return model;
}

struct HessianPipelineOptions {
    int r = 4;
    int degree = 3;
    std::uint64_t seed = 1;
    HessianFitOptions fit;
    bool finetune = true;
    LmOptions lm;
};

struct HessianPipelineInfo {
    HessianFitInfo fit;
    bool linear_rank_deficient = false;
    FinetuneResult finetune;
};

//! Full rival pipeline: curvature tensor fit, linear-part recovery, model
//! conversion, and (optionally) the same output-error fine-tuning stage the
//! filtered-CPD route uses.
inline DecoupledNarxModel hessian_pipeline(const MultiPoly& f, const Matrix& xo,
                                           std::span<const SignalRecord> training,
                                           const NarxStructure& structure,
                                           const HessianPipelineOptions& opts,
                                           HessianPipelineInfo* info = nullptr) {
    HessianPipelineInfo local;
    HessianPipelineInfo& pi = info ? *info : local;

    const Tensor3 h = build_hessian_tensor(f, xo);
    HessianFactors factors =
        structured_hessian_decouple(h, opts.r, opts.degree, xo, opts.seed, opts.fit, &pi.fit);
    recover_linear_part(f, factors, xo, &pi.linear_rank_deficient);
    DecoupledNarxModel model = hessian_factors_to_model(factors, structure);

    if (opts.finetune && !training.empty()) {
        pi.finetune = finetune_sim(model, training, opts.lm);
        model = pi.finetune.model;
    }
    return model;
}

} // namespace pnarx
