#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "pnarx/linalg.hpp"
#include "pnarx/narx.hpp"
#include "pnarx/signal.hpp"

namespace pnarx {

struct LmOptions {
    int max_iters = 100;
    double mu_init = 1e-3;
    double mu_up = 10.0;
    double mu_down = 0.3;
    double grad_tol = 1e-10; // on ||J^T r||_inf
    double step_tol = 1e-12; // on the relative sse improvement
    double fd_step = 1e-6;   // forward-difference scale, * (1 + |param|)
};

enum class LmStatus { converged, max_iters, no_progress };

struct LmTracePoint {
    int iter;
    double sse;
    double mu;
    bool accepted;
};

struct FinetuneResult {
    DecoupledNarxModel model;
    std::vector<LmTracePoint> trace;
    LmStatus status = LmStatus::max_iters;
    double initial_sse = 0.0;
    double final_sse = 0.0;
    int accepted_steps = 0;
};

namespace finetune_detail {

inline std::size_t param_count(const DecoupledNarxModel& m) {
    std::size_t np = m.v.rows() * m.v.cols();
    for (const auto& g : m.branches) np += g.coeffs.size();
    return np;
}

inline void pack(const DecoupledNarxModel& m, std::vector<double>& p) {
    std::size_t at = 0;
    for (std::size_t i = 0; i < m.v.cols(); ++i)
        for (std::size_t k = 0; k < m.v.rows(); ++k) p[at++] = m.v(k, i);
    for (const auto& g : m.branches)
        for (double c : g.coeffs) p[at++] = c;
}

inline void unpack(const std::vector<double>& p, DecoupledNarxModel& m) {
    std::size_t at = 0;
    for (std::size_t i = 0; i < m.v.cols(); ++i)
        for (std::size_t k = 0; k < m.v.rows(); ++k) m.v(k, i) = p[at++];
    for (auto& g : m.branches)
        for (double& c : g.coeffs) c = p[at++];
}

} // namespace finetune_detail

//! Free-run residuals y - y_s over all records, initialization windows
//! excluded (consistent with how e_rms is reported). Throws Diverged if any
//! record's simulation explodes.
inline std::vector<double> finetune_residual(const DecoupledNarxModel& model,
                                             std::span<const SignalRecord> records) {
    std::vector<double> res;
    const int t0 = model.structure.max_lag();
    for (const auto& rec : records) {
        const std::vector<double> y_init(rec.y.begin(), rec.y.begin() + t0);
        const auto ys = simulate(model, rec.u, y_init);
        for (std::size_t t = static_cast<std::size_t>(t0); t < rec.y.size(); ++t)
            res.push_back(rec.y[t] - ys[t]);
    }
    return res;
}

//! Forward-difference Jacobian of the free-run residual in the packed
//! parameters (V columnwise, then branch coefficients).
inline Matrix finetune_jacobian(const DecoupledNarxModel& model,
                                std::span<const SignalRecord> records, double fd_step) {
    const std::size_t np = finetune_detail::param_count(model);
    const auto res0 = finetune_residual(model, records);
    Matrix jac(res0.size(), np);

    std::vector<double> p(np);
    finetune_detail::pack(model, p);
    DecoupledNarxModel work = model;
    for (std::size_t a = 0; a < np; ++a) {
        const double save = p[a];
        const double step = fd_step * (1.0 + std::abs(save));
        p[a] = save + step;
        finetune_detail::unpack(p, work);
        const auto resp = finetune_residual(work, records);
        p[a] = save;
        for (std::size_t t = 0; t < res0.size(); ++t) jac(t, a) = (resp[t] - res0[t]) / step;
    }
    return jac;
}

//! Levenberg-Marquardt minimization of the free-run simulation error over
//! {V, branch coefficients}. Steps are accepted only when the SSE decreases;
//! candidates whose simulation diverges count as failed steps (damping up).
//! V columns are re-normalized at the end with scale absorbed into the
//! coefficients.
inline FinetuneResult finetune_sim(const DecoupledNarxModel& model,
                                   std::span<const SignalRecord> records,
                                   const LmOptions& opts = {}) {
    for (const auto& rec : records)
        if (!rec.has_output()) throw DimensionMismatch("finetune_sim: record without output");

    const std::size_t np = finetune_detail::param_count(model);
    FinetuneResult out;
    out.model = model;

    std::vector<double> res = finetune_residual(out.model, records); // throws if diverging at entry
    double sse = dot(res, res);
    out.initial_sse = sse;

    std::vector<double> p(np);
    finetune_detail::pack(out.model, p);
    DecoupledNarxModel work = out.model;

    double mu = opts.mu_init;
    bool converged = false;
    for (int iter = 0; iter < opts.max_iters; ++iter) {
        const Matrix jac = finetune_jacobian(out.model, records, opts.fd_step);

        Matrix jtj(np, np);
        std::vector<double> jtr(np, 0.0);
        for (std::size_t t = 0; t < res.size(); ++t)
            for (std::size_t a = 0; a < np; ++a) {
                const double ja = jac(t, a);
                if (ja == 0.0) continue;
                jtr[a] += ja * res[t];
                for (std::size_t b = a; b < np; ++b) jtj(a, b) += ja * jac(t, b);
            }
        for (std::size_t a = 0; a < np; ++a)
            for (std::size_t b = 0; b < a; ++b) jtj(a, b) = jtj(b, a);

        double gmax = 0.0;
        for (double gv : jtr) gmax = std::max(gmax, std::abs(gv));
        if (gmax <= opts.grad_tol * std::max(1.0, sse)) {
            converged = true;
            break;
        }

        bool accepted = false;
        for (int attempt = 0; attempt < 8; ++attempt) {
            Matrix damped = jtj;
            for (std::size_t a = 0; a < np; ++a) damped(a, a) += mu * (1.0 + jtj(a, a));
            const auto delta = linalg::solve_spd(damped, jtr);

            std::vector<double> cand(np);
            for (std::size_t a = 0; a < np; ++a) cand[a] = p[a] - delta[a];
            finetune_detail::unpack(cand, work);

            double cand_sse = std::numeric_limits<double>::infinity();
            std::vector<double> cand_res;
            try {
                cand_res = finetune_residual(work, records);
                cand_sse = dot(cand_res, cand_res);
            } catch (const Diverged&) {
                // candidate unstable in free run: reject and damp harder
            }

            out.trace.push_back({iter, cand_sse < sse ? cand_sse : sse, mu, cand_sse < sse});
            if (cand_sse < sse) {
                const double gain = (sse - cand_sse) / std::max(sse, 1e-300);
                p = cand;
                res = std::move(cand_res);
                sse = cand_sse;
                out.model = work;
                out.accepted_steps++;
                mu = std::max(mu * opts.mu_down, 1e-14);
                accepted = true;
                if (gain < opts.step_tol) converged = true;
                break;
            }
            mu *= opts.mu_up;
            if (mu > 1e14) break;
        }
        if (!accepted || converged) break;
    }

    if (converged)
        out.status = LmStatus::converged;
    else if (out.accepted_steps == 0)
        out.status = LmStatus::no_progress;
    else
        out.status = LmStatus::max_iters;
    out.final_sse = sse;

    // unit-norm columns, scale absorbed into the branch coefficients
    for (std::size_t i = 0; i < out.model.v.cols(); ++i) {
        double s = 0.0;
        for (std::size_t k = 0; k < out.model.v.rows(); ++k) s += out.model.v(k, i) * out.model.v(k, i);
        s = std::sqrt(s);
        if (s <= 0.0) continue;
        for (std::size_t k = 0; k < out.model.v.rows(); ++k) out.model.v(k, i) /= s;
        double sq = s;
        for (std::size_t q = 1; q < out.model.branches[i].coeffs.size(); ++q) {
            out.model.branches[i].coeffs[q] *= sq;
            sq *= s;
        }
    }
    return out;
}

inline FinetuneResult finetune_sim(const DecoupledNarxModel& model, const SignalRecord& training,
                                   const LmOptions& opts = {}) {
    return finetune_sim(model, std::span<const SignalRecord>(&training, 1), opts);
}

} // namespace pnarx
