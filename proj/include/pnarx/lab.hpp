#pragma once

#include <atomic>
#include <filesystem>
#include <string>
#include <thread>
#include <vector>

#include "pnarx/fcpd.hpp"
#include "pnarx/finetune.hpp"
#include "pnarx/hessian.hpp"
#include "pnarx/model_io.hpp"
#include "pnarx/narx.hpp"
#include "pnarx/signal.hpp"

// Synthetic forced-Duffing data lab and the batch pipeline pieces shared by
// the command-line driver and the integration tests: dataset generation and
// serialization, record-set metrics, and the (r, lambda) scan.

namespace pnarx {

struct LabConfig {
    double fs = 1.5;                 // resonance sits near fs/9.4, mirroring the benchmark geometry
    std::size_t period = 8192;       // samples per multisine period (power of two)
    std::size_t max_bin = 2683;      // odd harmonics 1..max_bin excited (1342 lines)
    double amplitude = 0.001;        // per excited line; keeps the cubic term strong but non-chaotic
    int realisations = 9;
    double snr_db = 40.0;            // output measurement noise; infinity = noiseless
    std::uint64_t seed = 1;
    DuffingParams duffing{1.0, 0.05, 1.0, 5.0};
    int substeps = 64;               // integrator steps per sample
    double validation_amplitude = 1.2; // peak factor relative to the training peak
    std::size_t validation_length = 8192;
};

inline Json lab_config_to_json(const LabConfig& c) {
    Json j;
    j["fs"] = c.fs;
    j["period"] = c.period;
    j["bins"] = c.max_bin;
    j["amplitude"] = c.amplitude;
    j["realisations"] = c.realisations;
    if (std::isinf(c.snr_db))
        j["snr_db"] = nullptr;
    else
        j["snr_db"] = c.snr_db;
    j["seed"] = c.seed;
    j["duffing"] = Json{{"m", c.duffing.mass},
                        {"c", c.duffing.damping},
                        {"alpha", c.duffing.alpha},
                        {"beta", c.duffing.beta}};
    j["substeps"] = c.substeps;
    j["validation_amplitude"] = c.validation_amplitude;
    j["validation_length"] = c.validation_length;
    return j;
}

inline LabConfig lab_config_from_json(const Json& j) {
    LabConfig c;
    const auto check = [&](const char* field, bool ok) {
        if (!ok) throw ParseError(std::string("config field '") + field + "' is invalid");
    };
    if (j.contains("fs")) c.fs = j.at("fs").get<double>();
    check("fs", c.fs > 0.0);
    if (j.contains("period")) c.period = j.at("period").get<std::size_t>();
    check("period", c.period >= 8 && (c.period & (c.period - 1)) == 0);
    if (j.contains("bins"))
        c.max_bin = j.at("bins").get<std::size_t>();
    else if (j.contains("f_max"))
        c.max_bin = static_cast<std::size_t>(j.at("f_max").get<double>() / (c.fs / static_cast<double>(c.period)));
    check("bins", c.max_bin >= 1 && c.max_bin < c.period / 2);
    if (j.contains("amplitude")) c.amplitude = j.at("amplitude").get<double>();
    check("amplitude", c.amplitude > 0.0);
    if (j.contains("realisations")) c.realisations = j.at("realisations").get<int>();
    check("realisations", c.realisations >= 1);
    if (j.contains("snr_db")) {
        if (j.at("snr_db").is_null())
            c.snr_db = std::numeric_limits<double>::infinity();
        else
            c.snr_db = j.at("snr_db").get<double>();
    }
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("duffing")) {
        const auto& d = j.at("duffing");
        if (d.contains("m")) c.duffing.mass = d.at("m").get<double>();
        if (d.contains("c")) c.duffing.damping = d.at("c").get<double>();
        if (d.contains("alpha")) c.duffing.alpha = d.at("alpha").get<double>();
        if (d.contains("beta")) c.duffing.beta = d.at("beta").get<double>();
        check("duffing.m", c.duffing.mass > 0.0);
    }
    if (j.contains("substeps")) c.substeps = j.at("substeps").get<int>();
    check("substeps", c.substeps >= 1);
    if (j.contains("validation_amplitude")) c.validation_amplitude = j.at("validation_amplitude").get<double>();
    check("validation_amplitude", c.validation_amplitude > 0.0);
    if (j.contains("validation_length")) c.validation_length = j.at("validation_length").get<std::size_t>();
    check("validation_length", c.validation_length >= 8 &&
                                   (c.validation_length & (c.validation_length - 1)) == 0);
    return c;
}

struct LabDataset {
    std::vector<SignalRecord> training; // one steady-state period per realisation
    SignalRecord validation;            // band-limited ramped noise sequence
};

namespace lab_detail {

//! Evaluate a length-`coarse` periodic band-limited signal (given by its
//! positive-frequency spectrum lines) on a `factor`-times refined grid via a
//! zero-padded inverse FFT. Exact between samples because the signal is
//! band-limited and periodic.
inline std::vector<double> refined_periodic(const std::vector<std::complex<double>>& lines,
                                            std::size_t coarse, std::size_t factor) {
    const std::size_t fine = coarse * factor;
    std::vector<std::complex<double>> spec(fine, {0.0, 0.0});
    for (std::size_t k = 1; k < coarse / 2; ++k) {
        if (lines[k] == std::complex<double>(0.0, 0.0)) continue;
        // rescale for the longer transform so amplitudes are preserved
        const std::complex<double> line = lines[k] * static_cast<double>(factor);
        spec[k] = line;
        spec[fine - k] = std::conj(line);
    }
    fft_inplace(spec, true);
    std::vector<double> out(fine);
    for (std::size_t t = 0; t < fine; ++t) out[t] = spec[t].real();
    return out;
}

//! Half-substep input grid over n_samples, reading a refined periodic carrier
//! (refinement factor 2*substeps) with optional per-position gain.
template <typename Gain>
std::vector<double> half_grid(const std::vector<double>& carrier_fine, std::size_t start_coarse,
                              std::size_t n_samples, int substeps, Gain&& gain) {
    const std::size_t per_sample = 2 * static_cast<std::size_t>(substeps);
    std::vector<double> u(per_sample * n_samples + 1);
    const std::size_t fine = carrier_fine.size();
    for (std::size_t j = 0; j < u.size(); ++j) {
        const std::size_t pos = start_coarse * per_sample + j;
        const double tau = static_cast<double>(j) / static_cast<double>(per_sample);
        u[j] = carrier_fine[pos % fine] * gain(tau);
    }
    return u;
}

} // namespace lab_detail

//! One realisation: seeded random-phase odd multisine, simulated through the
//! oscillator under the continuous band-limited drive for two periods, first
//! (transient) period discarded, measurement noise added at the configured
//! SNR. The physical drive is a smooth signal, so the integrator consumes it
//! on the exact substep grid rather than a zero-order hold.
inline SignalRecord lab_training_record(const LabConfig& cfg, int realisation) {
    const std::uint64_t phase_seed = Rng::derive(cfg.seed, 100 + static_cast<std::uint64_t>(realisation));
    const std::uint64_t noise_seed = Rng::derive(cfg.seed, 200 + static_cast<std::uint64_t>(realisation));

    Rng rng(phase_seed);
    std::vector<std::complex<double>> lines(cfg.period, {0.0, 0.0});
    for (std::size_t bin = 1; bin <= cfg.max_bin; bin += 2) {
        const double phase = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
        lines[bin] = 0.5 * cfg.amplitude * static_cast<double>(cfg.period) *
                     std::complex<double>(std::cos(phase), std::sin(phase));
    }
    const auto fine =
        lab_detail::refined_periodic(lines, cfg.period, 2 * static_cast<std::size_t>(cfg.substeps));

    const auto u_half = lab_detail::half_grid(fine, 0, 2 * cfg.period, cfg.substeps,
                                              [](double) { return 1.0; });
    const auto y2 =
        duffing_simulate_dense(cfg.duffing, u_half, cfg.fs, 2 * cfg.period, cfg.substeps);

    SignalRecord rec;
    rec.fs = cfg.fs;
    rec.u.resize(cfg.period);
    const std::size_t per_sample = 2 * static_cast<std::size_t>(cfg.substeps);
    for (std::size_t t = 0; t < cfg.period; ++t) rec.u[t] = fine[(t * per_sample) % fine.size()];
    rec.y.assign(y2.begin() + static_cast<std::ptrdiff_t>(cfg.period), y2.end());
    if (!std::isinf(cfg.snr_db)) rec.y = add_noise(rec.y, cfg.snr_db, noise_seed);
    rec.meta["realisation"] = std::to_string(realisation);
    rec.meta["seed"] = std::to_string(phase_seed);
    return rec;
}

//! Validation record: band-limited Gaussian noise over the excited band with
//! a linearly increasing amplitude reaching the configured factor of the
//! training peak, so the model is pushed slightly beyond the training range.
inline SignalRecord lab_validation_record(const LabConfig& cfg, double training_peak) {
    const std::uint64_t noise_seed = Rng::derive(cfg.seed, 300);
    const std::uint64_t meas_seed = Rng::derive(cfg.seed, 301);

    Rng rng(noise_seed);
    const std::size_t len = cfg.validation_length;
    const std::size_t cutoff = std::min<std::size_t>(cfg.max_bin * len / cfg.period, len / 2 - 1);
    std::vector<std::complex<double>> lines(len, {0.0, 0.0});
    for (std::size_t k = 1; k <= cutoff; ++k) {
        // unit-variance-ish random spectral lines; the scale is fixed below
        lines[k] = std::complex<double>(rng.normal(), rng.normal());
    }
    const auto fine =
        lab_detail::refined_periodic(lines, len, 2 * static_cast<std::size_t>(cfg.substeps));

    const std::size_t per_sample = 2 * static_cast<std::size_t>(cfg.substeps);
    const double denom = static_cast<double>(len - 1);
    double peak = 0.0;
    for (std::size_t t = 0; t < len; ++t) {
        const double v = fine[t * per_sample] * (static_cast<double>(t) / denom);
        peak = std::max(peak, std::abs(v));
    }
    const double scale = peak > 0.0 ? cfg.validation_amplitude * training_peak / peak : 1.0;

    const auto u_half = lab_detail::half_grid(
        fine, 0, len, cfg.substeps,
        [&](double tau) { return scale * std::min(tau / denom, 1.0); });
    const auto y = duffing_simulate_dense(cfg.duffing, u_half, cfg.fs, len, cfg.substeps);

    SignalRecord rec;
    rec.fs = cfg.fs;
    rec.u.resize(len);
    for (std::size_t t = 0; t < len; ++t)
        rec.u[t] = fine[t * per_sample] * scale * (static_cast<double>(t) / denom);
    rec.y = y;
    if (!std::isinf(cfg.snr_db)) rec.y = add_noise(rec.y, cfg.snr_db, meas_seed);
    rec.meta["kind"] = "validation";
    rec.meta["seed"] = std::to_string(noise_seed);
    return rec;
}

inline LabDataset generate_lab_data(const LabConfig& cfg) {
    LabDataset ds;
    double training_peak = 0.0;
    for (int i = 0; i < cfg.realisations; ++i) {
        ds.training.push_back(lab_training_record(cfg, i));
        for (double v : ds.training.back().u) training_peak = std::max(training_peak, std::abs(v));
    }
    ds.validation = lab_validation_record(cfg, training_peak);
    return ds;
}

//! Write the dataset plus a manifest (config echo, seeds, file list).
inline std::string write_lab_dataset(const LabDataset& ds, const LabConfig& cfg,
                                     const std::string& out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    Json manifest;
    manifest["config"] = lab_config_to_json(cfg);
    Json files = Json::array();
    for (std::size_t i = 0; i < ds.training.size(); ++i) {
        const std::string name = "train_r" + std::to_string(i) + ".csv";
        csv_write(ds.training[i], (fs::path(out_dir) / name).string());
        files.push_back(name);
    }
    manifest["training"] = files;
    csv_write(ds.validation, (fs::path(out_dir) / "validation.csv").string());
    manifest["validation"] = "validation.csv";
    const std::string mpath = (fs::path(out_dir) / "manifest.json").string();
    write_json_file(manifest, mpath);
    return mpath;
}

//! Load a dataset back from a manifest.json path (paths resolve relative to it).
inline LabDataset load_lab_dataset(const std::string& manifest_path) {
    namespace fs = std::filesystem;
    const Json manifest = read_json_file(manifest_path);
    const fs::path base = fs::path(manifest_path).parent_path();
    LabDataset ds;
    for (const auto& f : io_detail::require(manifest, "training"))
        ds.training.push_back(csv_read((base / f.get<std::string>()).string()));
    ds.validation = csv_read((base / io_detail::require(manifest, "validation").get<std::string>()).string());
    return ds;
}

//! Stacked equation-error regression over all training records (rows never
//! cross record boundaries).
inline PNarxModel fit_pnarx_records(const std::vector<SignalRecord>& records,
                                    const NarxStructure& s, PnarxFitInfo* info = nullptr) {
    std::size_t total_rows = 0;
    std::vector<RegressorData> parts;
    for (const auto& rec : records) {
        parts.push_back(build_regressors(rec.u, rec.y, s));
        total_rows += parts.back().x.rows();
    }
    MonomialBasis basis = basis_enumerate(s.regressor_dim(), s.degree, false);
    if (total_rows < basis.size()) throw TooShort("fit_pnarx_records: not enough rows");

    Matrix phi(total_rows, basis.size());
    std::vector<double> targets(total_rows);
    std::vector<double> xrow(s.regressor_dim());
    std::size_t at = 0;
    for (const auto& part : parts) {
        for (std::size_t row = 0; row < part.x.rows(); ++row, ++at) {
            for (int c = 0; c < s.regressor_dim(); ++c) xrow[c] = part.x(row, c);
            for (std::size_t jj = 0; jj < basis.size(); ++jj)
                phi(at, jj) = detail::monomial_eval(basis.exponents[jj], xrow);
            targets[at] = part.targets[row];
        }
    }
    auto res = linalg::lstsq(phi, targets);
    if (info) {
        info->condition = res.condition;
        info->rank_deficient = res.rank_deficient;
        info->rank = res.rank;
    }
    return PNarxModel{s, MultiPoly(std::move(basis), std::move(res.x))};
}

//! Free-run e_rms over a record, initialization window excluded.
template <typename Model>
double record_e_rms(const Model& model, const SignalRecord& rec) {
    const int t0 = model.structure.max_lag();
    const std::vector<double> y_init(rec.y.begin(), rec.y.begin() + t0);
    const auto ys = simulate(model, rec.u, y_init);
    return e_rms(std::span<const double>(rec.y).subspan(t0),
                 std::span<const double>(ys).subspan(t0));
}

//! Aggregate e_rms over several records (pooled residual and reference power).
template <typename Model>
double records_e_rms(const Model& model, const std::vector<SignalRecord>& records) {
    double num = 0.0, den = 0.0;
    for (const auto& rec : records) {
        const int t0 = model.structure.max_lag();
        const std::vector<double> y_init(rec.y.begin(), rec.y.begin() + t0);
        const auto ys = simulate(model, rec.u, y_init);
        for (std::size_t t = static_cast<std::size_t>(t0); t < rec.y.size(); ++t) {
            const double e = rec.y[t] - ys[t];
            num += e * e;
            den += rec.y[t] * rec.y[t];
        }
    }
    if (den == 0.0) throw ZeroReference("records_e_rms: zero reference");
    return 100.0 * std::sqrt(num / den);
}

//! Operating points from the joint normal of the simulated regressors pooled
//! over all training records.
inline OperatingPointSet sample_operating_points_records(const PNarxModel& model,
                                                         const std::vector<SignalRecord>& records,
                                                         std::size_t n_points, std::uint64_t seed) {
    const int t0 = model.structure.max_lag();
    std::vector<Matrix> regs;
    std::size_t total = 0, n = 0;
    for (const auto& rec : records) {
        const std::vector<double> y_init(rec.y.begin(), rec.y.begin() + t0);
        const auto ys = simulate(model, rec.u, y_init);
        regs.push_back(build_regressors(rec.u, ys, model.structure).x);
        total += regs.back().rows();
        n = regs.back().cols();
    }
    std::vector<double> mean(n, 0.0);
    for (const auto& x : regs)
        for (std::size_t t = 0; t < x.rows(); ++t)
            for (std::size_t c = 0; c < n; ++c) mean[c] += x(t, c);
    for (auto& v : mean) v /= static_cast<double>(total);

    Matrix cov(n, n);
    for (const auto& x : regs)
        for (std::size_t t = 0; t < x.rows(); ++t)
            for (std::size_t a = 0; a < n; ++a) {
                const double da = x(t, a) - mean[a];
                for (std::size_t b = 0; b < n; ++b) cov(a, b) += da * (x(t, b) - mean[b]);
            }
    for (std::size_t i = 0; i < cov.size(); ++i) cov.data()[i] /= static_cast<double>(total);

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

struct ScanCell {
    int r = 0;
    double lambda = 0.0;
    std::uint64_t seed = 0;
    double e_f = std::numeric_limits<double>::quiet_NaN();
    double e_rms_val_pre = std::numeric_limits<double>::quiet_NaN();
    double e_rms_val_post = std::numeric_limits<double>::quiet_NaN();
    std::string status = "ok";
    DecoupledNarxModel model; // fine-tuned when finetuning succeeded
};

struct ScanOptions {
    std::vector<int> r_set = {1, 2, 3, 4, 5, 6};
    std::vector<double> lambda_set = {1e-1, 1e0, 1e1, 1e2, 1e3, 1e4, 1e5};
    std::size_t n_points = 200;
    std::uint64_t seed = 1;
    int jobs = 0; // 0: hardware concurrency
    int max_sweeps = 150;
    LmOptions lm{.max_iters = 60};
};

//! Run decouple + fine-tune on every (r, lambda) grid cell. Cells run
//! concurrently on a shared operating-point set; failures are recorded
//! in-cell and the scan continues. Output order is canonical (r-major).
inline std::vector<ScanCell> scan_grid(const PNarxModel& reference,
                                       const std::vector<SignalRecord>& training,
                                       const SignalRecord& validation, const ScanOptions& opts,
                                       OperatingPointSet* points_out = nullptr) {
    const OperatingPointSet ops =
        sample_operating_points_records(reference, training, opts.n_points, opts.seed);
    if (points_out) *points_out = ops;
    const Tensor3 jt = build_jacobian_tensor(reference.f, ops.points);

    std::vector<ScanCell> cells;
    for (int r : opts.r_set)
        for (double lambda : opts.lambda_set) {
            ScanCell cell;
            cell.r = r;
            cell.lambda = lambda;
            cell.seed = Rng::derive(opts.seed, 7000 + cells.size());
            cells.push_back(std::move(cell));
        }

    std::atomic<std::size_t> next{0};
    const auto worker = [&]() {
        for (;;) {
            const std::size_t idx = next.fetch_add(1);
            if (idx >= cells.size()) return;
            ScanCell& cell = cells[idx];
            try {
                FcpdConfig cfg;
                cfg.r = cell.r;
                cfg.lambda = cell.lambda;
                cfg.seed = cell.seed;
                cfg.max_sweeps = opts.max_sweeps;
                const auto factors = fcpd_decompose(jt, ops.points, cfg);
                auto model = parameterize(factors, ops.points, reference.f,
                                          reference.structure, reference.structure.degree);
                cell.e_f = e_f(reference.f, model, ops.points);
                try {
                    cell.e_rms_val_pre = record_e_rms(model, validation);
                } catch (const Diverged&) {
                    cell.status = "pre_diverged";
                }
                const auto tuned = finetune_sim(model, std::span<const SignalRecord>(training), opts.lm);
                cell.model = tuned.model;
                cell.e_rms_val_post = record_e_rms(cell.model, validation);
                if (cell.status == "pre_diverged") cell.status = "ok_post_only";
            } catch (const Error& e) {
                cell.status = std::string("error: ") + e.what();
            }
        }
    };

    int jobs = opts.jobs > 0 ? opts.jobs : static_cast<int>(std::thread::hardware_concurrency());
    jobs = std::max(1, std::min<int>(jobs, static_cast<int>(cells.size())));
    std::vector<std::thread> pool;
    for (int t = 0; t < jobs; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
    return cells;
}

//! Per-r best cell indices by lowest e_f (spec's selection rule).
inline std::vector<std::size_t> scan_best_per_r(const std::vector<ScanCell>& cells) {
    std::vector<std::size_t> best;
    std::vector<int> seen;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        const int r = cells[i].r;
        bool found = false;
        for (std::size_t b = 0; b < best.size(); ++b) {
            if (cells[best[b]].r != r) continue;
            found = true;
            if (!(cells[i].e_f >= cells[best[b]].e_f) && std::isfinite(cells[i].e_f)) best[b] = i;
        }
        if (!found && std::isfinite(cells[i].e_f)) best.push_back(i);
    }
    return best;
}

inline std::string scan_csv_header() {
    return "r,lambda,e_f,e_rms_val_pre,e_rms_val_post,seed,status";
}

inline std::string scan_cell_csv(const ScanCell& c) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g,%.17g,%llu,%s", c.r, c.lambda, c.e_f,
                  c.e_rms_val_pre, c.e_rms_val_post, static_cast<unsigned long long>(c.seed),
                  c.status.c_str());
    return buf;
}

} // namespace pnarx
