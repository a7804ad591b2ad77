#pragma once

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "pnarx/errors.hpp"
#include "pnarx/fft.hpp"
#include "pnarx/matrix.hpp"
#include "pnarx/rng.hpp"

namespace pnarx {

//! Sampled input/output record. `y` may be empty for input-only records.
struct SignalRecord {
    double fs = 1.0;
    std::vector<double> u;
    std::vector<double> y;
    std::map<std::string, std::string> meta;

    bool has_output() const { return !y.empty(); }
};

//! Forced Duffing oscillator m y'' + c y' + (alpha + beta y^2) y = u.
struct DuffingParams {
    double mass = 1.0;
    double damping = 0.05;
    double alpha = 1.0;
    double beta = 5.0;
};

//! One period of a random-phase multisine on the given harmonic bins.
//!
//! u[t] = amplitude * sum_k cos(2 pi k t / period + phi_k) with phases i.i.d.
//! uniform in [0, 2pi). Synthesis runs through an exact inverse DFT, which is
//! the same cosine sum evaluated in O(P log P). Exactly periodic with the
//! requested period by construction.
inline SignalRecord multisine(double fs, std::size_t period_samples,
                              const std::vector<std::size_t>& excited_bins, double amplitude,
                              std::uint64_t seed) {
    const std::size_t p = period_samples;
    if (p == 0 || (p & (p - 1)) != 0)
        throw DimensionMismatch("multisine: period must be a power of two");
    for (std::size_t bin : excited_bins)
        if (bin < 1 || bin >= p / 2)
            throw BinOutOfRange("multisine: bin " + std::to_string(bin) + " outside [1, period/2)");

    Rng rng(seed);
    std::vector<std::complex<double>> spec(p, {0.0, 0.0});
    for (std::size_t bin : excited_bins) {
        const double phase = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
        const std::complex<double> line =
            0.5 * amplitude * static_cast<double>(p) * std::complex<double>(std::cos(phase), std::sin(phase));
        spec[bin] = line;
        spec[p - bin] = std::conj(line);
    }
    fft_inplace(spec, true);

    SignalRecord rec;
    rec.fs = fs;
    rec.u.resize(p);
    for (std::size_t t = 0; t < p; ++t) rec.u[t] = spec[t].real();
    return rec;
}

//! Odd harmonic indices 1, 3, 5, ... up to and including max_bin.
inline std::vector<std::size_t> odd_bins(std::size_t max_bin) {
    std::vector<std::size_t> bins;
    for (std::size_t k = 1; k <= max_bin; k += 2) bins.push_back(k);
    return bins;
}

//! Fixed-step RK4 integration of the forced Duffing ODE with zero-order hold
//! on the input. `substeps` integrator steps are taken per output sample;
//! the returned signal holds y at the sample instants.
inline std::vector<double> duffing_simulate(const DuffingParams& p, std::span<const double> u,
                                            double fs, double y0 = 0.0, double v0 = 0.0,
                                            int substeps = 1) {
    if (fs <= 0.0) throw DimensionMismatch("duffing_simulate: fs must be positive");
    if (substeps < 1) throw DimensionMismatch("duffing_simulate: substeps must be >= 1");

    const double h = 1.0 / (fs * static_cast<double>(substeps));
    const double inv_m = 1.0 / p.mass;
    const auto accel = [&](double y, double v, double force) {
        return (force - p.damping * v - (p.alpha + p.beta * y * y) * y) * inv_m;
    };

    std::vector<double> out(u.size());
    double y = y0, v = v0;
    for (std::size_t t = 0; t < u.size(); ++t) {
        out[t] = y;
        const double force = u[t];
        for (int s = 0; s < substeps; ++s) {
            const double k1y = v, k1v = accel(y, v, force);
            const double k2y = v + 0.5 * h * k1v, k2v = accel(y + 0.5 * h * k1y, v + 0.5 * h * k1v, force);
            const double k3y = v + 0.5 * h * k2v, k3v = accel(y + 0.5 * h * k2y, v + 0.5 * h * k2v, force);
            const double k4y = v + h * k3v, k4v = accel(y + h * k3y, v + h * k3v, force);
            y += h / 6.0 * (k1y + 2.0 * k2y + 2.0 * k3y + k4y);
            v += h / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v);
        }
        if (!std::isfinite(y) || !std::isfinite(v))
            throw NonFinite("duffing_simulate: state non-finite at sample " + std::to_string(t));
    }
    return out;
}

//! RK4 with the input given on the half-substep grid: u_half[2*substeps*t + j]
//! holds u at time (t + j/(2*substeps))/fs, and one trailing value closes the
//! last step. Used for band-limited drives evaluated between samples, where a
//! zero-order hold would misrepresent the excitation.
inline std::vector<double> duffing_simulate_dense(const DuffingParams& p,
                                                  std::span<const double> u_half, double fs,
                                                  std::size_t n_samples, int substeps,
                                                  double y0 = 0.0, double v0 = 0.0) {
    if (fs <= 0.0) throw DimensionMismatch("duffing_simulate_dense: fs must be positive");
    if (substeps < 1) throw DimensionMismatch("duffing_simulate_dense: substeps must be >= 1");
    const std::size_t need = 2 * static_cast<std::size_t>(substeps) * n_samples + 1;
    if (u_half.size() < need)
        throw DimensionMismatch("duffing_simulate_dense: input grid too short");

    const double h = 1.0 / (fs * static_cast<double>(substeps));
    const double inv_m = 1.0 / p.mass;
    const auto accel = [&](double y, double v, double force) {
        return (force - p.damping * v - (p.alpha + p.beta * y * y) * y) * inv_m;
    };

    std::vector<double> out(n_samples);
    double y = y0, v = v0;
    std::size_t at = 0;
    for (std::size_t t = 0; t < n_samples; ++t) {
        out[t] = y;
        for (int s = 0; s < substeps; ++s, at += 2) {
            const double u0 = u_half[at], um = u_half[at + 1], u1 = u_half[at + 2];
            const double k1y = v, k1v = accel(y, v, u0);
            const double k2y = v + 0.5 * h * k1v, k2v = accel(y + 0.5 * h * k1y, v + 0.5 * h * k1v, um);
            const double k3y = v + 0.5 * h * k2v, k3v = accel(y + 0.5 * h * k2y, v + 0.5 * h * k2v, um);
            const double k4y = v + h * k3v, k4v = accel(y + h * k3y, v + h * k3v, u1);
            y += h / 6.0 * (k1y + 2.0 * k2y + 2.0 * k3y + k4y);
            v += h / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v);
        }
        if (!std::isfinite(y) || !std::isfinite(v))
            throw NonFinite("duffing_simulate_dense: state non-finite at sample " + std::to_string(t));
    }
    return out;
}

//! Add white Gaussian noise scaled so the realized SNR equals snr_db exactly.
//! An infinite snr_db returns the signal unchanged.
inline std::vector<double> add_noise(std::span<const double> y, double snr_db, std::uint64_t seed) {
    std::vector<double> out(y.begin(), y.end());
    if (std::isinf(snr_db)) return out;

    double p_signal = 0.0;
    for (double v : y) p_signal += v * v;
    if (p_signal == 0.0) throw ZeroSignal("add_noise: signal is identically zero");
    p_signal /= static_cast<double>(y.size());

    Rng rng(seed);
    std::vector<double> noise(y.size());
    double p_noise = 0.0;
    for (auto& v : noise) {
        v = rng.normal();
        p_noise += v * v;
    }
    p_noise /= static_cast<double>(y.size());

    const double target = p_signal * std::pow(10.0, -snr_db / 10.0);
    const double scale = std::sqrt(target / p_noise);
    for (std::size_t k = 0; k < out.size(); ++k) out[k] += scale * noise[k];
    return out;
}

namespace detail {

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

} // namespace detail

//! Write a record as CSV: `# fs=...` (plus one comment line per meta entry),
//! a `u,y` header, then one row per sample with full round-trip precision.
inline void csv_write(const SignalRecord& rec, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw ParseError("csv_write: cannot open " + path);
    out << "# fs=" << detail::format_double(rec.fs) << "\n";
    for (const auto& [key, value] : rec.meta) out << "# " << key << "=" << value << "\n";
    if (rec.has_output()) {
        if (rec.y.size() != rec.u.size()) throw DimensionMismatch("csv_write: u/y lengths");
        out << "u,y\n";
        for (std::size_t k = 0; k < rec.u.size(); ++k)
            out << detail::format_double(rec.u[k]) << ',' << detail::format_double(rec.y[k]) << "\n";
    } else {
        out << "u\n";
        for (double v : rec.u) out << detail::format_double(v) << "\n";
    }
}

inline SignalRecord csv_read(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("csv_read: cannot open " + path);

    SignalRecord rec;
    std::string line;
    std::size_t lineno = 0;
    bool have_header = false;
    bool has_y = false;

    const auto parse_double = [&](const std::string& text) {
        char* end = nullptr;
        const double v = std::strtod(text.c_str(), &end);
        if (end == text.c_str() || *end != '\0')
            throw ParseError("csv_read: line " + std::to_string(lineno) + ": bad number '" + text + "'");
        return v;
    };

    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (line.front() == '#') {
            std::string body = line.substr(1);
            const std::size_t start = body.find_first_not_of(' ');
            if (start == std::string::npos) continue;
            body = body.substr(start);
            const std::size_t eq = body.find('=');
            if (eq == std::string::npos) continue;
            const std::string key = body.substr(0, eq);
            const std::string value = body.substr(eq + 1);
            if (key == "fs")
                rec.fs = parse_double(value);
            else
                rec.meta[key] = value;
            continue;
        }
        if (!have_header) {
            if (line == "u,y")
                has_y = true;
            else if (line == "u")
                has_y = false;
            else
                throw ParseError("csv_read: line " + std::to_string(lineno) +
                                 ": expected column header 'u' or 'u,y'");
            have_header = true;
            continue;
        }
        const std::size_t comma = line.find(',');
        if (has_y) {
            if (comma == std::string::npos)
                throw ParseError("csv_read: line " + std::to_string(lineno) + ": missing y column");
            rec.u.push_back(parse_double(line.substr(0, comma)));
            rec.y.push_back(parse_double(line.substr(comma + 1)));
        } else {
            if (comma != std::string::npos)
                throw ParseError("csv_read: line " + std::to_string(lineno) + ": unexpected extra column");
            rec.u.push_back(parse_double(line));
        }
    }
    if (!have_header) throw ParseError("csv_read: missing column header in " + path);
    return rec;
}

} // namespace pnarx
