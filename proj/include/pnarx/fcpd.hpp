#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "pnarx/linalg.hpp"
#include "pnarx/narx.hpp"
#include "pnarx/poly.hpp"
#include "pnarx/rng.hpp"
#include "pnarx/signal.hpp"
#include "pnarx/tensor.hpp"

namespace pnarx {

//! Operating points for derivative sampling, one point per row.
struct OperatingPointSet {
    Matrix points; // N x n
    std::string provenance;
    std::uint64_t seed = 0;
    bool covariance_fallback = false; // diagonal covariance was used

    std::size_t count() const { return points.rows(); }
    std::size_t dim() const { return points.cols(); }
};

struct FcpdConfig {
    int r = 4;
    double lambda = 1.0;
    int max_sweeps = 200;
    double rel_tol = 1e-9;      // relative objective change stopping rule
    double abs_floor = 1e-14;   // stop when objective <= abs_floor * ||J||_F^2
    int v_max_inner = 2;        // damped Gauss-Newton rounds per sweep
    int v_max_attempts = 3;     // damping retries per round
    double v_damping_init = 1e-3;
    double v_damping_up = 10.0;
    double v_damping_down = 0.3;
    int n_starts = 1;           // seeded restarts; best final objective wins
    std::uint64_t seed = 1;
};

//! ALS factors: W (m x r), V (n x r, unit-norm columns), G (N x r samples of
//! the branch functions at the operating points, row-aligned with X_o).
struct FcpdFactors {
    Matrix w, v, g;
};

//! One difference row with up to three taps: value = sum_t w[t] * g[idx[t]],
//! written to output slot `out`. Tap weights sum to zero by construction, so
//! every filter annihilates constants.
struct FilterRow {
    int out;
    int idx[3];
    double w[3];
};

//! Difference filters for one branch, acting on X_o-ordered vectors. Rows are
//! enumerated in sorted-z order; `order[k]` is the point index at sorted
//! position k.
struct FilterBranch {
    std::vector<int> order;
    std::vector<FilterRow> central, left, right;
    bool repaired = false; // coincident z values were jittered apart
};

struct FilterSet {
    std::vector<FilterBranch> branches;

    bool any_repaired() const {
        for (const auto& b : branches)
            if (b.repaired) return true;
        return false;
    }
};

namespace fcpd_detail {

inline std::vector<double> project(const Matrix& xo, const Matrix& v, std::size_t branch) {
    std::vector<double> z(xo.rows(), 0.0);
    for (std::size_t l = 0; l < xo.rows(); ++l) {
        double s = 0.0;
        for (std::size_t k = 0; k < xo.cols(); ++k) s += xo(l, k) * v(k, branch);
        z[l] = s;
    }
    return z;
}

inline std::vector<int> argsort(const std::vector<double>& z) {
    std::vector<int> idx(z.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return z[a] < z[b]; });
    return idx;
}

//! Stencils on a given point ordering. `repair` monotonically separates
//! coincident z values (documented jitter of 1e-9 * range); when repair is
//! off, near-zero gaps are clamped instead so candidate evaluations during
//! frozen-permutation solves stay finite.
inline FilterBranch make_branch(std::vector<int> order, std::vector<double> z, bool repair,
                                bool* warned, double clamp_frac = 1e-12) {
    const std::size_t n = order.size();
    FilterBranch b;
    b.order = std::move(order);

    std::vector<double> zs(n);
    for (std::size_t k = 0; k < n; ++k) zs[k] = z[static_cast<std::size_t>(b.order[k])];
    const double range = zs.back() - zs.front();
    if (repair) {
        if (range <= 0.0)
            throw DegenerateGrid("build_fd_filters: all projected z values coincide");
        const double min_gap = 1e-12 * range;
        for (std::size_t k = 1; k < n; ++k)
            if (zs[k] - zs[k - 1] < min_gap) {
                zs[k] = zs[k - 1] + 1e-9 * range;
                b.repaired = true;
                if (warned) *warned = true;
            }
    }
    const double clamp = clamp_frac * (std::abs(range) > 0.0 ? std::abs(range) : 1.0);
    const auto gap = [&](double hi, double lo) {
        double d = hi - lo;
        if (std::abs(d) < clamp) d = d < 0.0 ? -clamp : clamp;
        return d;
    };
    const auto two_point = [](int out, int plus, int minus, double inv_d) {
        return FilterRow{out, {plus, minus, minus}, {inv_d, -inv_d, 0.0}};
    };

    b.central.resize(n);
    b.left.resize(n);
    b.right.resize(n);
    for (std::size_t k = 0; k < n; ++k) {
        const int out = b.order[k];
        const std::size_t kp = k + 1 < n ? k + 1 : k;
        const std::size_t km = k > 0 ? k - 1 : k;

        // central: 3-point second-order stencil on the non-uniform interior,
        // one-sided difference at both ends
        if (k == 0)
            b.central[k] = two_point(out, b.order[1], b.order[0], 1.0 / gap(zs[1], zs[0]));
        else if (k + 1 == n)
            b.central[k] = two_point(out, b.order[n - 1], b.order[n - 2], 1.0 / gap(zs[n - 1], zs[n - 2]));
        else {
            const double hm = gap(zs[k], zs[km]);
            const double hp = gap(zs[kp], zs[k]);
            const double span = hm + hp;
            b.central[k] = FilterRow{out,
                                     {b.order[km], b.order[k], b.order[kp]},
                                     {-hp / (hm * span), (hp - hm) / (hp * hm), hm / (hp * span)}};
        }

        if (k == 0)
            b.left[k] = two_point(out, b.order[1], b.order[0], 1.0 / gap(zs[1], zs[0]));
        else
            b.left[k] = two_point(out, b.order[k], b.order[km], 1.0 / gap(zs[k], zs[km]));

        if (k + 1 == n)
            b.right[k] = two_point(out, b.order[n - 1], b.order[n - 2], 1.0 / gap(zs[n - 1], zs[n - 2]));
        else
            b.right[k] = two_point(out, b.order[kp], b.order[k], 1.0 / gap(zs[kp], zs[k]));
    }
    return b;
}

} // namespace fcpd_detail

//! Build per-branch central/left/right difference filters on the grids
//! z_i = X_o v_i. Needs at least 3 points; coincident grid values are
//! repaired by a documented jitter and reported through `repaired`.
inline FilterSet build_fd_filters(const Matrix& v, const Matrix& xo) {
    if (v.rows() != xo.cols()) throw DimensionMismatch("build_fd_filters: V rows vs point dim");
    if (xo.rows() < 3) throw DegenerateGrid("build_fd_filters: need at least 3 operating points");
    FilterSet fs;
    for (std::size_t i = 0; i < v.cols(); ++i) {
        auto z = fcpd_detail::project(xo, v, i);
        auto order = fcpd_detail::argsort(z);
        fs.branches.push_back(fcpd_detail::make_branch(std::move(order), std::move(z), true, nullptr));
    }
    return fs;
}

//! Filters with the sort permutations frozen to `orders` (weights still follow
//! the candidate V). Used inside the V update where the objective must stay
//! smooth in V. Gaps are floored at a fraction of the mean grid spacing:
//! near-coincident projections otherwise put unbounded curvature into the
//! inner model, stalling the Gauss-Newton step, while the exact objective is
//! restored by the accept test anyway.
inline FilterSet build_filters_frozen(const Matrix& v, const Matrix& xo,
                                      const std::vector<std::vector<int>>& orders) {
    FilterSet fs;
    const double gap_frac = 0.125 / static_cast<double>(xo.rows());
    for (std::size_t i = 0; i < v.cols(); ++i) {
        auto z = fcpd_detail::project(xo, v, i);
        fs.branches.push_back(
            fcpd_detail::make_branch(orders[i], std::move(z), false, nullptr, gap_frac));
    }
    return fs;
}

inline std::vector<double> filter_apply(const std::vector<FilterRow>& rows,
                                        std::span<const double> g) {
    std::vector<double> h(rows.size(), 0.0);
    for (const auto& row : rows)
        h[static_cast<std::size_t>(row.out)] = row.w[0] * g[static_cast<std::size_t>(row.idx[0])] +
                                               row.w[1] * g[static_cast<std::size_t>(row.idx[1])] +
                                               row.w[2] * g[static_cast<std::size_t>(row.idx[2])];
    return h;
}

//! H = F_C(V) o G: column i is the central-filtered column i of G.
inline Matrix filtered_g(const FilterSet& fs, const Matrix& g) {
    Matrix h(g.rows(), g.cols());
    for (std::size_t i = 0; i < g.cols(); ++i) {
        const auto hi = filter_apply(fs.branches[i].central, g.col(i));
        h.set_col(i, hi);
    }
    return h;
}

//! Squared Frobenius norm of (F_L o G) - (F_R o G), the smoothness penalty.
inline double smoothness_penalty(const FilterSet& fs, const Matrix& g) {
    double s = 0.0;
    for (std::size_t i = 0; i < g.cols(); ++i) {
        const auto gi = g.col(i);
        const auto l = filter_apply(fs.branches[i].left, gi);
        const auto r = filter_apply(fs.branches[i].right, gi);
        for (std::size_t k = 0; k < l.size(); ++k) {
            const double d = l[k] - r[k];
            s += d * d;
        }
    }
    return s;
}

//! Squared tensor residual ||J - [[W, V, H]]||_F^2 without materializing the model tensor.
inline double tensor_residual_sq(const Tensor3& j, const Matrix& w, const Matrix& v, const Matrix& h) {
    const std::size_t m = j.dim_out(), n = j.dim_in(), npts = j.dim_pts(), r = w.cols();
    double s = 0.0;
    for (std::size_t l = 0; l < npts; ++l)
        for (std::size_t k = 0; k < n; ++k)
            for (std::size_t sdx = 0; sdx < m; ++sdx) {
                double model = 0.0;
                for (std::size_t i = 0; i < r; ++i) model += w(sdx, i) * v(k, i) * h(l, i);
                const double d = j(sdx, k, l) - model;
                s += d * d;
            }
    return s;
}

//! Full joint objective at V with freshly built filters.
inline double fcpd_objective(const Tensor3& j, const Matrix& xo, const Matrix& w, const Matrix& v,
                             const Matrix& g, double lambda, FilterSet* fs_out = nullptr) {
    FilterSet fs = build_fd_filters(v, xo);
    const double obj = tensor_residual_sq(j, w, v, filtered_g(fs, g)) + lambda * smoothness_penalty(fs, g);
    if (fs_out) *fs_out = std::move(fs);
    return obj;
}

//! Sample operating points from the joint normal fitted to the simulated
//! training regressors of the model.
inline OperatingPointSet sample_operating_points(const PNarxModel& model, const SignalRecord& training,
                                                 std::size_t n_points, std::uint64_t seed) {
    if (!training.has_output())
        throw DimensionMismatch("sample_operating_points: training record has no output");
    const int t0 = model.structure.max_lag();
    const std::vector<double> y_init(training.y.begin(), training.y.begin() + t0);
    const auto y_sim = simulate(model, training.u, y_init);
    const auto reg = build_regressors(training.u, y_sim, model.structure);

    const std::size_t n = reg.x.cols(), rows = reg.x.rows();
    std::vector<double> mean(n, 0.0);
    for (std::size_t t = 0; t < rows; ++t)
        for (std::size_t c = 0; c < n; ++c) mean[c] += reg.x(t, c);
    for (auto& v : mean) v /= static_cast<double>(rows);

    Matrix cov(n, n);
    for (std::size_t t = 0; t < rows; ++t)
        for (std::size_t a = 0; a < n; ++a) {
            const double da = reg.x(t, a) - mean[a];
            for (std::size_t b = 0; b < n; ++b) cov(a, b) += da * (reg.x(t, b) - mean[b]);
        }
    for (std::size_t i = 0; i < cov.size(); ++i) cov.data()[i] /= static_cast<double>(rows);

    OperatingPointSet out;
    out.seed = seed;
    auto chol = linalg::cholesky_lower(cov);
    Matrix l(n, n);
    if (chol) {
        l = *chol;
        out.provenance = "joint normal fit of simulated training regressors";
    } else {
        out.covariance_fallback = true;
        out.provenance = "diagonal-covariance fallback (singular covariance)";
        for (std::size_t a = 0; a < n; ++a) l(a, a) = std::sqrt(std::max(cov(a, a), 0.0));
    }

    Rng rng(seed);
    out.points = Matrix(n_points, n);
    std::vector<double> xi(n);
    for (std::size_t pt = 0; pt < n_points; ++pt) {
        for (auto& x : xi) x = rng.normal();
        for (std::size_t a = 0; a < n; ++a) {
            double s = mean[a];
            for (std::size_t b = 0; b <= a; ++b) s += l(a, b) * xi[b];
            out.points(pt, a) = s;
        }
    }
    return out;
}

//! Stack the gradients of f at the operating points into a 1 x n x N tensor.
inline Tensor3 build_jacobian_tensor(const MultiPoly& f, const Matrix& xo) {
    if (static_cast<std::size_t>(f.n_vars()) != xo.cols())
        throw DimensionMismatch("build_jacobian_tensor: f arity vs point dimension");
    Tensor3 j(1, xo.cols(), xo.rows());
    std::vector<double> x(xo.cols());
    for (std::size_t l = 0; l < xo.rows(); ++l) {
        for (std::size_t c = 0; c < xo.cols(); ++c) x[c] = xo(l, c);
        const auto grad = poly_gradient(f, x);
        for (std::size_t k = 0; k < grad.size(); ++k) j(0, k, l) = grad[k];
    }
    return j;
}

//! Closed-form W update: least squares of J1 against ((F_C o G) kr V)^T.
//! Gram deficiencies fall back to the minimum-norm solution (reported).
inline Matrix update_w(const Matrix& j1, const Matrix& v, const Matrix& g, const FilterSet& fs,
                       bool* fallback = nullptr) {
    const std::size_t n = v.rows(), r = v.cols(), npts = g.rows();
    const std::size_t m = j1.rows();
    if (j1.cols() != n * npts) throw DimensionMismatch("update_w: J1 shape");

    const Matrix h = filtered_g(fs, g);
    Matrix gram(r, r);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t q = 0; q < r; ++q) {
            double hv = 0.0, vv = 0.0;
            for (std::size_t l = 0; l < npts; ++l) hv += h(l, i) * h(l, q);
            for (std::size_t k = 0; k < n; ++k) vv += v(k, i) * v(k, q);
            gram(i, q) = hv * vv;
        }

    // rhs(s, i) = sum_{k,l} J1(s, k + n l) h(l,i) v(k,i)
    Matrix rhs(m, r);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t s = 0; s < m; ++s) {
            double acc = 0.0;
            for (std::size_t l = 0; l < npts; ++l) {
                double inner = 0.0;
                for (std::size_t k = 0; k < n; ++k) inner += j1(s, k + n * l) * v(k, i);
                acc += inner * h(l, i);
            }
            rhs(s, i) = acc;
        }

    Matrix w(m, r);
    bool any_fb = false;
    for (std::size_t s = 0; s < m; ++s) {
        bool fb = false;
        const auto row = linalg::solve_spd(gram, rhs.transposed().col(s), &fb);
        any_fb = any_fb || fb;
        for (std::size_t i = 0; i < r; ++i) w(s, i) = row[i];
    }
    if (fallback) *fallback = any_fb;
    return w;
}

//! Exact joint G update: one linear least-squares problem in vec(G) combining
//! the mode-3 tensor fit and the left/right smoothness penalty. The constants
//! direction (filter nullspace) is pinned to mean-zero columns, which leaves
//! the objective value untouched.
inline Matrix update_g(const Matrix& j3, const Matrix& w, const Matrix& v, const FilterSet& fs,
                       double lambda, bool* fallback = nullptr) {
    const std::size_t m = w.rows(), n = v.rows(), r = v.cols(), npts = j3.rows();
    if (j3.cols() != m * n) throw DimensionMismatch("update_g: J3 shape");
    const std::size_t dim = npts * r;

    // coupling coefficients c_iq = (v_i . v_q)(w_i . w_q)
    Matrix coup(r, r);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t q = 0; q < r; ++q) {
            double vv = 0.0, ww = 0.0;
            for (std::size_t k = 0; k < n; ++k) vv += v(k, i) * v(k, q);
            for (std::size_t s = 0; s < m; ++s) ww += w(s, i) * w(s, q);
            coup(i, q) = vv * ww;
        }

    // per-branch D rows (left minus right), up to 6 tap contributions
    struct Entry {
        int idx;
        double wgt;
    };
    const auto d_row = [&](const FilterBranch& b, std::size_t k, Entry ent[6]) {
        const FilterRow& l = b.left[k];
        const FilterRow& rr = b.right[k];
        for (int t = 0; t < 3; ++t) {
            ent[t] = {l.idx[t], l.w[t]};
            ent[3 + t] = {rr.idx[t], -rr.w[t]};
        }
    };

    Matrix h(dim, dim);
    std::vector<double> rhs(dim, 0.0);

    // tensor-fit blocks: H[(i,a),(q,b)] += c_iq * sum_rows F_i[row,a] F_q[row,b]
    // rows of F_i and F_q are matched through their common output slot.
    std::vector<std::vector<int>> pos(r, std::vector<int>(npts));
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t k = 0; k < npts; ++k)
            pos[i][static_cast<std::size_t>(fs.branches[i].order[k])] = static_cast<int>(k);

    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t q = 0; q < r; ++q) {
            const double c = coup(i, q);
            if (c == 0.0) continue;
            const std::size_t bi = i * npts, bq = q * npts;
            for (std::size_t o = 0; o < npts; ++o) {
                const FilterRow& fi = fs.branches[i].central[static_cast<std::size_t>(pos[i][o])];
                const FilterRow& fq = fs.branches[q].central[static_cast<std::size_t>(pos[q][o])];
                for (int a = 0; a < 3; ++a) {
                    if (fi.w[a] == 0.0) continue;
                    const double pa = c * fi.w[a];
                    for (int bb = 0; bb < 3; ++bb)
                        h(bi + fi.idx[a], bq + fq.idx[bb]) += pa * fq.w[bb];
                }
            }
        }

    // rhs_i = F_i^T (J3 k_i) with k_i column i of (V kr W)
    for (std::size_t i = 0; i < r; ++i) {
        std::vector<double> t(npts, 0.0);
        for (std::size_t l = 0; l < npts; ++l) {
            double acc = 0.0;
            for (std::size_t k = 0; k < n; ++k)
                for (std::size_t s = 0; s < m; ++s) acc += j3(l, s + m * k) * v(k, i) * w(s, i);
            t[l] = acc;
        }
        for (std::size_t k = 0; k < npts; ++k) {
            const FilterRow& row = fs.branches[i].central[k];
            const double tv = t[static_cast<std::size_t>(row.out)];
            for (int a = 0; a < 3; ++a) rhs[i * npts + static_cast<std::size_t>(row.idx[a])] += row.w[a] * tv;
        }
    }

    // smoothness penalty: lambda * D_i^T D_i on the diagonal blocks
    if (lambda > 0.0) {
        Entry ent[6];
        for (std::size_t i = 0; i < r; ++i) {
            const std::size_t base = i * npts;
            for (std::size_t k = 0; k < npts; ++k) {
                d_row(fs.branches[i], k, ent);
                for (int a = 0; a < 6; ++a)
                    for (int b = 0; b < 6; ++b)
                        h(base + ent[a].idx, base + ent[b].idx) += lambda * ent[a].wgt * ent[b].wgt;
            }
        }
    }

    // centering: the all-ones direction of every branch is objective-neutral;
    // a quadratic on the column mean pins it without moving the minimum value
    double avg_diag = 0.0;
    for (std::size_t d = 0; d < dim; ++d) avg_diag += h(d, d);
    avg_diag = std::max(avg_diag / static_cast<double>(dim), 1e-300);
    const double mu = avg_diag / static_cast<double>(npts);
    for (std::size_t i = 0; i < r; ++i) {
        const std::size_t base = i * npts;
        for (std::size_t a = 0; a < npts; ++a)
            for (std::size_t b = 0; b < npts; ++b) h(base + a, base + b) += mu;
    }

    const auto x = linalg::solve_spd(h, rhs, fallback);
    Matrix g(npts, r);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t l = 0; l < npts; ++l) g(l, i) = x[i * npts + l];
    return g;
}

struct VUpdateResult {
    Matrix v;
    bool accepted = false; // at least one damped step lowered the joint objective
    double objective = 0.0; // accept metric: joint objective after a one-pass G refit
};

namespace fcpd_detail {

inline std::vector<double> v_residual(const Tensor3& j, const Matrix& xo, const Matrix& w,
                                      const Matrix& v, const Matrix& g, double lambda,
                                      const std::vector<std::vector<int>>& orders,
                                      double norm_pin) {
    const std::size_t m = j.dim_out(), n = j.dim_in(), npts = j.dim_pts(), r = v.cols();
    const FilterSet fs = build_filters_frozen(v, xo, orders);
    const Matrix h = filtered_g(fs, g);

    std::vector<double> res;
    res.reserve(n * m * npts + npts * r + r);
    for (std::size_t l = 0; l < npts; ++l)
        for (std::size_t k = 0; k < n; ++k)
            for (std::size_t s = 0; s < m; ++s) {
                double model = 0.0;
                for (std::size_t i = 0; i < r; ++i) model += w(s, i) * v(k, i) * h(l, i);
                res.push_back(j(s, k, l) - model);
            }
    const double sl = std::sqrt(lambda);
    for (std::size_t i = 0; i < r; ++i) {
        const auto gi = g.col(i);
        const auto lft = filter_apply(fs.branches[i].left, gi);
        const auto rgt = filter_apply(fs.branches[i].right, gi);
        for (std::size_t k = 0; k < npts; ++k) res.push_back(sl * (lft[k] - rgt[k]));
    }
    // unit-norm pinning rows: candidates get re-normalized anyway, so keep the
    // Gauss-Newton step from wandering along the objective's scale direction
    for (std::size_t i = 0; i < r; ++i) {
        double nv = 0.0;
        for (std::size_t k = 0; k < n; ++k) nv += v(k, i) * v(k, i);
        res.push_back(norm_pin * (nv - 1.0));
    }
    return res;
}

inline Matrix normalize_columns(Matrix v) {
    for (std::size_t i = 0; i < v.cols(); ++i) {
        double nv = 0.0;
        for (std::size_t k = 0; k < v.rows(); ++k) nv += v(k, i) * v(k, i);
        nv = std::sqrt(nv);
        if (nv > 0.0)
            for (std::size_t k = 0; k < v.rows(); ++k) v(k, i) /= nv;
    }
    return v;
}

} // namespace fcpd_detail

namespace fcpd_detail {

//! One Gauss-Seidel pass of exact per-branch G solves at the given filters.
//! Starting from g_start, every branch solve can only lower the joint
//! objective, so the result upper-bounds min_G and is safe for accept tests.
inline Matrix refit_g_one_pass(const Matrix& j3, const Matrix& w, const Matrix& v,
                               const FilterSet& fs, double lambda, const Matrix& g_start) {
    const std::size_t m = w.rows(), n = v.rows(), r = v.cols(), npts = g_start.rows();
    Matrix g = g_start;
    Matrix h(npts, r);
    for (std::size_t i = 0; i < r; ++i) h.set_col(i, filter_apply(fs.branches[i].central, g.col(i)));

    Matrix coup(r, r);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t q = 0; q < r; ++q) {
            double vv = 0.0, ww = 0.0;
            for (std::size_t k = 0; k < n; ++k) vv += v(k, i) * v(k, q);
            for (std::size_t s = 0; s < m; ++s) ww += w(s, i) * w(s, q);
            coup(i, q) = vv * ww;
        }

    std::vector<double> tj(npts);
    for (std::size_t i = 0; i < r; ++i) {
        // s_i = J3 k_i - sum_{q != i} (k_q . k_i) h_q
        for (std::size_t l = 0; l < npts; ++l) {
            double acc = 0.0;
            for (std::size_t k = 0; k < n; ++k)
                for (std::size_t s = 0; s < m; ++s) acc += j3(l, s + m * k) * v(k, i) * w(s, i);
            for (std::size_t q = 0; q < r; ++q)
                if (q != i) acc -= coup(i, q) * h(l, q);
            tj[l] = acc;
        }

        Matrix a(npts, npts);
        std::vector<double> rhs(npts, 0.0);
        const double cii = coup(i, i);
        for (std::size_t k = 0; k < npts; ++k) {
            const FilterRow& row = fs.branches[i].central[k];
            const double tv = tj[static_cast<std::size_t>(row.out)];
            for (int p = 0; p < 3; ++p) {
                rhs[static_cast<std::size_t>(row.idx[p])] += row.w[p] * tv;
                const double pa = cii * row.w[p];
                if (pa == 0.0) continue;
                for (int q = 0; q < 3; ++q) a(row.idx[p], row.idx[q]) += pa * row.w[q];
            }
        }
        if (lambda > 0.0) {
            for (std::size_t k = 0; k < npts; ++k) {
                const FilterRow& lr = fs.branches[i].left[k];
                const FilterRow& rr = fs.branches[i].right[k];
                const int idx[6] = {lr.idx[0], lr.idx[1], lr.idx[2], rr.idx[0], rr.idx[1], rr.idx[2]};
                const double wgt[6] = {lr.w[0], lr.w[1], lr.w[2], -rr.w[0], -rr.w[1], -rr.w[2]};
                for (int p = 0; p < 6; ++p)
                    for (int q = 0; q < 6; ++q) a(idx[p], idx[q]) += lambda * wgt[p] * wgt[q];
            }
        }
        double avg_diag = 0.0;
        for (std::size_t d = 0; d < npts; ++d) avg_diag += a(d, d);
        const double mu = std::max(avg_diag / static_cast<double>(npts), 1e-300) /
                          static_cast<double>(npts);
        for (std::size_t p = 0; p < npts; ++p)
            for (std::size_t q = 0; q < npts; ++q) a(p, q) += mu;

        const auto gi = linalg::solve_spd(a, rhs);
        g.set_col(i, gi);
        h.set_col(i, filter_apply(fs.branches[i].central, gi));
    }
    return g;
}

//! Classic ALS proposal: minimize the tensor term alone with h held at the
//! current filters, where V appears linearly. Often jumps straight toward the
//! right subspace when the damped local step is bogged down by the penalty.
inline Matrix v_linear_proposal(const Matrix& j2, const Matrix& w, const Matrix& v,
                                const Matrix& h) {
    const std::size_t m = w.rows(), n = v.rows(), r = v.cols(), npts = h.rows();
    Matrix gram(r, r);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t q = 0; q < r; ++q) {
            double hh = 0.0, ww = 0.0;
            for (std::size_t l = 0; l < npts; ++l) hh += h(l, i) * h(l, q);
            for (std::size_t s = 0; s < m; ++s) ww += w(s, i) * w(s, q);
            gram(i, q) = hh * ww;
        }
    // rhs(k, i) = sum_{s,l} J2(k, s + m l) h(l,i) w(s,i)
    Matrix rhs(n, r);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t k = 0; k < n; ++k) {
            double acc = 0.0;
            for (std::size_t l = 0; l < npts; ++l) {
                double inner = 0.0;
                for (std::size_t s = 0; s < m; ++s) inner += j2(k, s + m * l) * w(s, i);
                acc += inner * h(l, i);
            }
            rhs(k, i) = acc;
        }
    Matrix v_new(n, r);
    for (std::size_t k = 0; k < n; ++k) {
        const auto row = linalg::solve_spd(gram, rhs.transposed().col(k));
        for (std::size_t i = 0; i < r; ++i) v_new(k, i) = row[i];
    }
    return v_new;
}

} // namespace fcpd_detail

//! Damped Gauss-Newton V update on the joint objective. The sort permutations
//! are frozen at the incoming V for each inner solve and rebuilt for the
//! accept test. Because G stores samples tied to the current projections, any
//! sizeable V move makes the raw penalty explode; candidates are therefore
//! judged on the joint objective after a one-pass exact G refit, which
//! upper-bounds what the following G update will reach, so acceptance keeps
//! the alternating scheme strictly non-increasing. Each inner round also
//! offers the linearized fixed-h proposal under the same accept rule.
inline VUpdateResult update_v(const Tensor3& j, const Matrix& xo, const Matrix& w,
                              const Matrix& v_current, const Matrix& g, double lambda,
                              const FcpdConfig& cfg) {
    const std::size_t n = v_current.rows(), r = v_current.cols();
    const std::size_t nparam = n * r;

    const Matrix j2 = matricize(j, 2);
    const Matrix j3 = matricize(j, 3);

    VUpdateResult out;
    out.v = fcpd_detail::normalize_columns(v_current);
    out.objective = fcpd_objective(j, xo, w, out.v, g, lambda);

    // exact joint G refit is affordable for small N*r; above that one
    // Gauss-Seidel pass still upper-bounds the post-update objective
    const bool exact_refit = g.rows() * r <= 600;
    const auto refit_objective = [&](const Matrix& cand) {
        const FilterSet fs = build_fd_filters(cand, xo);
        const Matrix g_refit = exact_refit
                                   ? update_g(j3, w, cand, fs, lambda)
                                   : fcpd_detail::refit_g_one_pass(j3, w, cand, fs, lambda, g);
        return tensor_residual_sq(j, w, cand, filtered_g(fs, g_refit)) +
               lambda * smoothness_penalty(fs, g_refit);
    };

    const auto try_accept = [&](const Matrix& cand) {
        double cand_obj = std::numeric_limits<double>::infinity();
        try {
            cand_obj = refit_objective(cand);
        } catch (const DegenerateGrid&) {
            return false;
        }
        if (cand_obj < out.objective) {
            out.v = cand;
            out.objective = cand_obj;
            out.accepted = true;
            return true;
        }
        return false;
    };

    double mu = cfg.v_damping_init;
    for (int inner = 0; inner < cfg.v_max_inner; ++inner) {
        {
            const FilterSet fs_cur = build_fd_filters(out.v, xo);
            const Matrix h = filtered_g(fs_cur, g);
            try_accept(fcpd_detail::normalize_columns(
                fcpd_detail::v_linear_proposal(j2, w, out.v, h)));
        }

        std::vector<std::vector<int>> orders(r);
        for (std::size_t i = 0; i < r; ++i)
            orders[i] = fcpd_detail::argsort(fcpd_detail::project(xo, out.v, i));

        const double norm_pin = std::sqrt(out.objective) + 1.0;
        const auto res0 = fcpd_detail::v_residual(j, xo, w, out.v, g, lambda, orders, norm_pin);
        const std::size_t nres = res0.size();

        // forward-difference Jacobian in the frozen-permutation residual
        Matrix jac(nres, nparam);
        Matrix vpert = out.v;
        for (std::size_t p = 0; p < nparam; ++p) {
            const std::size_t k = p % n, i = p / n;
            const double save = vpert(k, i);
            const double step = 1e-7 * (1.0 + std::abs(save));
            vpert(k, i) = save + step;
            const auto resp = fcpd_detail::v_residual(j, xo, w, vpert, g, lambda, orders, norm_pin);
            vpert(k, i) = save;
            for (std::size_t t = 0; t < nres; ++t) jac(t, p) = (resp[t] - res0[t]) / step;
        }

        Matrix jtj(nparam, nparam);
        std::vector<double> jtr(nparam, 0.0);
        for (std::size_t t = 0; t < nres; ++t)
            for (std::size_t a = 0; a < nparam; ++a) {
                const double ja = jac(t, a);
                if (ja == 0.0) continue;
                jtr[a] += ja * res0[t];
                for (std::size_t b = a; b < nparam; ++b) jtj(a, b) += ja * jac(t, b);
            }
        for (std::size_t a = 0; a < nparam; ++a)
            for (std::size_t b = 0; b < a; ++b) jtj(a, b) = jtj(b, a);

        bool stepped = false;
        for (int attempt = 0; attempt < cfg.v_max_attempts; ++attempt) {
            Matrix damped = jtj;
            for (std::size_t a = 0; a < nparam; ++a) damped(a, a) += mu * (1.0 + jtj(a, a));
            const auto delta = linalg::solve_spd(damped, jtr);

            Matrix cand = out.v;
            for (std::size_t p = 0; p < nparam; ++p) cand(p % n, p / n) -= delta[p];
            cand = fcpd_detail::normalize_columns(cand);
            if (try_accept(cand)) {
                mu = std::max(mu * cfg.v_damping_down, 1e-12);
                stepped = true;
                break;
            }
            mu *= cfg.v_damping_up;
            if (mu > 1e14) break;
        }
        if (!stepped && !out.accepted) break; // LineSearchFailed: V unchanged
        if (!stepped) break;
    }
    return out;
}

struct FcpdDiagnostics {
    std::vector<double> objective_trace; // joint objective after every sweep
    double tensor_residual = 0.0;        // ||J - model||_F at exit
    int sweeps = 0;
    bool v_stalled = false;     // some sweep accepted no V step
    bool rank_fallback = false; // a linear solve needed the pseudo-inverse path
    bool filters_repaired = false;
};

namespace fcpd_detail {

//! Scale gauge: the tensor model is invariant under (w_i, g_i) -> (w_i/s, s g_i)
//! while the smoothness penalty is not, so an unpinned W scale lets the ALS
//! shrink G into filter-error wiggles and blow W up to compensate. Keeping W
//! columns at unit norm (scale absorbed into G) closes that escape.
inline void fix_w_gauge(Matrix& w, Matrix& g) {
    for (std::size_t i = 0; i < w.cols(); ++i) {
        double s = 0.0;
        for (std::size_t k = 0; k < w.rows(); ++k) s += w(k, i) * w(k, i);
        s = std::sqrt(s);
        if (s <= 0.0) continue;
        for (std::size_t k = 0; k < w.rows(); ++k) w(k, i) /= s;
        for (std::size_t l = 0; l < g.rows(); ++l) g(l, i) *= s;
    }
}

inline FcpdFactors decompose_single(const Tensor3& j, const Matrix& xo, const FcpdConfig& cfg,
                                    std::uint64_t seed, FcpdDiagnostics& d) {
    const std::size_t n = j.dim_in(), npts = j.dim_pts();
    const std::size_t r = static_cast<std::size_t>(cfg.r);

    Rng rng(seed);
    Matrix v(n, r);
    for (std::size_t i = 0; i < v.size(); ++i) v.data()[i] = rng.normal();
    v = normalize_columns(linalg::orthonormal_columns(v));

    // identity branches: G starts as the projections themselves
    FcpdFactors f;
    f.v = v;
    f.g = Matrix(npts, r);
    for (std::size_t i = 0; i < r; ++i) f.g.set_col(i, project(xo, v, i));

    const Matrix j1 = matricize(j, 1);
    const Matrix j3 = matricize(j, 3);
    const double jnorm_sq = frob_norm(j) * frob_norm(j);

    d = FcpdDiagnostics{};
    {
        const FilterSet fs = build_fd_filters(f.v, xo);
        d.filters_repaired = d.filters_repaired || fs.any_repaired();
        bool fb = false;
        f.w = update_w(j1, f.v, f.g, fs, &fb);
        fix_w_gauge(f.w, f.g);
        d.rank_fallback = d.rank_fallback || fb;
    }

    double prev_obj = fcpd_objective(j, xo, f.w, f.v, f.g, cfg.lambda);
    for (int sweep = 0; sweep < cfg.max_sweeps; ++sweep) {
        bool fb = false;
        {
            const FilterSet fs = build_fd_filters(f.v, xo);
            d.filters_repaired = d.filters_repaired || fs.any_repaired();
            f.w = update_w(j1, f.v, f.g, fs, &fb);
            fix_w_gauge(f.w, f.g);
            d.rank_fallback = d.rank_fallback || fb;
        }

        const auto vres = update_v(j, xo, f.w, f.v, f.g, cfg.lambda, cfg);
        f.v = vres.v;
        d.v_stalled = d.v_stalled || !vres.accepted;

        {
            const FilterSet fs = build_fd_filters(f.v, xo);
            d.filters_repaired = d.filters_repaired || fs.any_repaired();
            f.g = update_g(j3, f.w, f.v, fs, cfg.lambda, &fb);
            d.rank_fallback = d.rank_fallback || fb;
        }

        const double obj = fcpd_objective(j, xo, f.w, f.v, f.g, cfg.lambda);
        d.objective_trace.push_back(obj);
        d.sweeps = sweep + 1;
        const bool converged = std::abs(prev_obj - obj) < cfg.rel_tol * std::max(prev_obj, 1e-30);
        prev_obj = obj;
        if (converged || obj <= cfg.abs_floor * jnorm_sq) break;
    }

    {
        const FilterSet fs = build_fd_filters(f.v, xo);
        d.tensor_residual = std::sqrt(tensor_residual_sq(j, f.w, f.v, filtered_g(fs, f.g)));
    }
    return f;
}

} // namespace fcpd_detail

//! Alternating updates W -> V -> G from a seeded random start until the
//! relative joint-objective change drops below rel_tol, the absolute floor is
//! reached, or max_sweeps is hit. With n_starts > 1 the restart with the
//! lowest final joint objective wins (seeds derived deterministically).
inline FcpdFactors fcpd_decompose(const Tensor3& j, const Matrix& xo, const FcpdConfig& cfg,
                                  FcpdDiagnostics* diag = nullptr) {
    const std::size_t n = j.dim_in(), npts = j.dim_pts();
    const std::size_t r = static_cast<std::size_t>(cfg.r);
    if (xo.rows() != npts || xo.cols() != n)
        throw DimensionMismatch("fcpd_decompose: operating points vs tensor shape");
    if (npts < 2 * r + 1)
        throw TooShort("fcpd_decompose: need at least 2r+1 operating points");

    FcpdDiagnostics local;
    FcpdDiagnostics& d = diag ? *diag : local;

    FcpdFactors best;
    double best_obj = std::numeric_limits<double>::infinity();
    const double jnorm_sq = frob_norm(j) * frob_norm(j);
    const int starts = std::max(1, cfg.n_starts);
    for (int s = 0; s < starts; ++s) {
        const std::uint64_t seed = s == 0 ? cfg.seed : Rng::derive(cfg.seed, static_cast<std::uint64_t>(s));
        FcpdDiagnostics ds;
        FcpdFactors f = fcpd_detail::decompose_single(j, xo, cfg, seed, ds);
        const double obj = ds.objective_trace.empty()
                               ? std::numeric_limits<double>::infinity()
                               : ds.objective_trace.back();
        if (obj < best_obj) {
            best_obj = obj;
            best = std::move(f);
            d = std::move(ds);
        }
        if (best_obj <= cfg.abs_floor * jnorm_sq) break; // exact fit found
    }
    return best;
}

//! Levenberg-damped Gauss-Newton refinement of (V, branch coefficients)
//! against the gradient residual grad f(x_l) - grad f_d(x_l) over the
//! operating points. First-order information only; constants are untouched
//! (they are invisible to gradients). Columns of V return unit-norm with the
//! scale absorbed into the coefficients (c_j -> c_j s^j).
inline void refine_decoupled_gradient(DecoupledNarxModel& model, const MultiPoly& f_ref,
                                      const Matrix& xo, int max_iters = 60) {
    const std::size_t n = model.v.rows(), r = model.branches.size(), npts = xo.rows();
    int degree = 0;
    for (const auto& g : model.branches) degree = std::max(degree, g.degree());
    const std::size_t np = n * r + r * static_cast<std::size_t>(degree);
    const std::size_t nres = n * npts;

    const Tensor3 jt = build_jacobian_tensor(f_ref, xo);

    // parameter layout: vec(V) columnwise, then per branch c_1..c_d
    const auto pack = [&](const DecoupledNarxModel& m, std::vector<double>& p) {
        std::size_t at = 0;
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t k = 0; k < n; ++k) p[at++] = m.v(k, i);
        for (std::size_t i = 0; i < r; ++i)
            for (int q = 1; q <= degree; ++q)
                p[at++] = q < static_cast<int>(m.branches[i].coeffs.size()) ? m.branches[i].coeffs[q] : 0.0;
    };
    const auto unpack = [&](const std::vector<double>& p, DecoupledNarxModel& m) {
        std::size_t at = 0;
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t k = 0; k < n; ++k) m.v(k, i) = p[at++];
        for (std::size_t i = 0; i < r; ++i) {
            m.branches[i].coeffs.resize(degree + 1);
            for (int q = 1; q <= degree; ++q) m.branches[i].coeffs[q] = p[at++];
        }
    };

    const auto residual = [&](const DecoupledNarxModel& m, std::vector<double>& res) {
        std::size_t at = 0;
        for (std::size_t l = 0; l < npts; ++l) {
            for (std::size_t k = 0; k < n; ++k) {
                double grad = 0.0;
                for (std::size_t i = 0; i < r; ++i) {
                    double z = 0.0;
                    for (std::size_t kk = 0; kk < n; ++kk) z += m.v(kk, i) * xo(l, kk);
                    grad += m.v(k, i) * m.branches[i].derivative()(z);
                }
                res[at++] = jt(0, k, l) - grad;
            }
        }
    };

    std::vector<double> p(np), res(nres), res_cand(nres);
    pack(model, p);
    DecoupledNarxModel work = model;
    residual(work, res);
    double sse = dot(res, res);

    double mu = 1e-8;
    for (int iter = 0; iter < max_iters; ++iter) {
        // analytic Jacobian of the residual in the packed parameters
        Matrix jac(nres, np);
        std::vector<double> zs(r), g1(r), g2(r);
        std::size_t at = 0;
        for (std::size_t l = 0; l < npts; ++l) {
            for (std::size_t i = 0; i < r; ++i) {
                double z = 0.0;
                for (std::size_t kk = 0; kk < n; ++kk) z += work.v(kk, i) * xo(l, kk);
                zs[i] = z;
                const auto d1 = work.branches[i].derivative();
                g1[i] = d1(z);
                g2[i] = d1.derivative()(z);
            }
            for (std::size_t k = 0; k < n; ++k, ++at) {
                for (std::size_t i = 0; i < r; ++i) {
                    const std::size_t vbase = i * n;
                    // d grad_k / d V(k', i) = delta_{k k'} g'_i + V(k,i) g''_i x_{k'}
                    for (std::size_t kp = 0; kp < n; ++kp) {
                        double dgrad = work.v(k, i) * g2[i] * xo(l, kp);
                        if (kp == k) dgrad += g1[i];
                        jac(at, vbase + kp) = -dgrad;
                    }
                    const std::size_t cbase = n * r + i * degree;
                    double zp = 1.0;
                    for (int q = 1; q <= degree; ++q) {
                        jac(at, cbase + q - 1) = -work.v(k, i) * q * zp;
                        zp *= zs[i];
                    }
                }
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
            std::vector<double> cand(np);
            for (std::size_t a = 0; a < np; ++a) cand[a] = p[a] - delta[a];
            unpack(cand, work);
            residual(work, res_cand);
            const double sse_cand = dot(res_cand, res_cand);
            if (sse_cand < sse) {
                p = cand;
                res = res_cand;
                const double gain = (sse - sse_cand) / std::max(sse, 1e-300);
                sse = sse_cand;
                mu = std::max(mu * 0.3, 1e-14);
                accepted = true;
                if (gain < 1e-12) iter = max_iters; // converged
                break;
            }
            mu *= 10.0;
        }
        if (!accepted) break;
    }
    unpack(p, work);

    // restore unit-norm columns, scale absorbed into the coefficients
    for (std::size_t i = 0; i < r; ++i) {
        double s = 0.0;
        for (std::size_t k = 0; k < n; ++k) s += work.v(k, i) * work.v(k, i);
        s = std::sqrt(s);
        if (s <= 0.0) continue;
        for (std::size_t k = 0; k < n; ++k) work.v(k, i) /= s;
        double sq = s;
        for (int q = 1; q <= degree; ++q) {
            work.branches[i].coeffs[q] *= sq;
            sq *= s;
        }
    }
    model = work;
}

//! Fit degree-d polynomials to the branch samples, absorb the single-output
//! weights, optionally refine (V, coefficients) on the Jacobian residual, and
//! pin the global constant (derivative information cannot see it) by one
//! scalar least squares against f on the points.
inline DecoupledNarxModel parameterize(const FcpdFactors& factors, const Matrix& xo,
                                       const MultiPoly& f_ref, const NarxStructure& structure,
                                       int degree, bool refine = true) {
    if (factors.w.rows() != 1)
        throw DimensionMismatch("parameterize: single-output factors expected");
    const std::size_t r = factors.v.cols();

    DecoupledNarxModel model;
    model.structure = structure;
    model.v = factors.v;
    for (std::size_t i = 0; i < r; ++i) {
        const auto z = fcpd_detail::project(xo, factors.v, i);
        UnivariatePoly g = fit_univariate(z, factors.g.col(i), degree);
        for (auto& c : g.coeffs) c *= factors.w(0, i);
        model.branches.push_back(std::move(g));
    }

    if (refine) refine_decoupled_gradient(model, f_ref, xo);

    // shared constant offset: mean residual over the operating points
    double offset = 0.0;
    std::vector<double> x(xo.cols());
    for (std::size_t l = 0; l < xo.rows(); ++l) {
        for (std::size_t c = 0; c < xo.cols(); ++c) x[c] = xo(l, c);
        offset += poly_eval(f_ref, x) - model.eval(x);
    }
    offset /= static_cast<double>(xo.rows());
    model.branches.front().coeffs[0] += offset;
    return model;
}

} // namespace pnarx
