#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "pnarx/signal.hpp"

using namespace pnarx;

namespace {

std::string temp_path(const char* name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

} // namespace

TEST_CASE("multisine produces one exact period of the requested length") {
    const auto rec = multisine(610.0, 8192, odd_bins(2683), 0.1, 42);
    CHECK(rec.u.size() == 8192);
    CHECK(rec.fs == 610.0);
    CHECK(odd_bins(2683).size() == 1342);
}

TEST_CASE("single excited bin with unit amplitude is a pure cosine") {
    const auto rec = multisine(64.0, 64, {1}, 1.0, 7);
    const auto spec = fft_real(rec.u);
    const double mag1 = std::abs(spec[1]);
    CHECK(mag1 == doctest::Approx(32.0).epsilon(1e-12)); // P/2 * amplitude
    for (std::size_t k = 0; k <= 32; ++k) {
        if (k == 1) continue;
        CHECK(std::abs(spec[k]) < 1e-10 * mag1);
    }
    // peak of a single cosine equals the line amplitude
    double peak = 0.0;
    for (double v : rec.u) peak = std::max(peak, std::abs(v));
    CHECK(peak <= 1.0 + 1e-12);
}

TEST_CASE("multisine spectrum is empty on non-excited bins, even bins included") {
    const std::size_t p = 1024;
    const auto bins = odd_bins(301);
    const auto rec = multisine(100.0, p, bins, 0.5, 123);
    const auto spec = fft_real(rec.u);

    double max_excited = 0.0;
    for (std::size_t b : bins) max_excited = std::max(max_excited, std::abs(spec[b]));
    std::vector<bool> excited(p / 2 + 1, false);
    for (std::size_t b : bins) excited[b] = true;
    for (std::size_t k = 0; k <= p / 2; ++k) {
        if (excited[k]) continue;
        CHECK(std::abs(spec[k]) < 1e-10 * max_excited);
    }
}

TEST_CASE("multisine is reproducible per seed") {
    const auto a = multisine(10.0, 256, odd_bins(63), 1.0, 99);
    const auto b = multisine(10.0, 256, odd_bins(63), 1.0, 99);
    const auto c = multisine(10.0, 256, odd_bins(63), 1.0, 100);
    REQUIRE(a.u.size() == b.u.size());
    bool same = true, differs = false;
    for (std::size_t k = 0; k < a.u.size(); ++k) {
        same = same && (a.u[k] == b.u[k]);
        differs = differs || (a.u[k] != c.u[k]);
    }
    CHECK(same);
    CHECK(differs);
}

TEST_CASE("multisine rejects out-of-band bins") {
    CHECK_THROWS_AS(multisine(10.0, 64, {32}, 1.0, 1), BinOutOfRange);
    CHECK_THROWS_AS(multisine(10.0, 64, {0}, 1.0, 1), BinOutOfRange);
}

TEST_CASE("duffing linear case matches cos(t)") {
    DuffingParams p{1.0, 0.0, 1.0, 0.0};
    const std::size_t len = 10000; // 10 s at 1 kHz
    const std::vector<double> u(len, 0.0);
    const auto y = duffing_simulate(p, u, 1000.0, 1.0, 0.0);
    double max_err = 0.0;
    for (std::size_t t = 0; t < len; ++t)
        max_err = std::max(max_err, std::abs(y[t] - std::cos(static_cast<double>(t) / 1000.0)));
    CHECK(max_err < 1e-6);
}

TEST_CASE("duffing at rest stays at rest") {
    DuffingParams p;
    const std::vector<double> u(100, 0.0);
    const auto y = duffing_simulate(p, u, 10.0, 0.0, 0.0, 8);
    for (double v : y) CHECK(v == 0.0);
}

TEST_CASE("halving the integrator step changes the nominal output below 1e-7 rms") {
    DuffingParams p{1.0, 0.05, 1.0, 5.0};
    const auto drive = multisine(1.5, 2048, odd_bins(599), 0.005, 5);
    const auto coarse = duffing_simulate(p, drive.u, drive.fs, 0.0, 0.0, 64);
    const auto fine = duffing_simulate(p, drive.u, drive.fs, 0.0, 0.0, 128);
    double ss = 0.0;
    for (std::size_t t = 0; t < coarse.size(); ++t) {
        const double d = coarse[t] - fine[t];
        ss += d * d;
    }
    CHECK(std::sqrt(ss / static_cast<double>(coarse.size())) < 1e-7);
}

TEST_CASE("undamped unforced duffing keeps its oscillation amplitude") {
    DuffingParams p{1.0, 0.0, 1.0, 0.0};
    const std::size_t steps = 10000;
    const std::vector<double> u(steps, 0.0);
    // energy 0.5 v^2 + 0.5 alpha y^2 shows up as the squared peak amplitude:
    // any drift over 1e4 steps would move the late-window peak away from 1
    const auto y = duffing_simulate(p, u, 1000.0, 1.0, 0.0, 1);
    double peak = 0.0;
    for (std::size_t t = steps - 2000; t < steps; ++t) peak = std::max(peak, std::abs(y[t]));
    CHECK(std::abs(peak - 1.0) < 1e-6);
}

TEST_CASE("add_noise hits the requested snr exactly") {
    std::vector<double> y(4096);
    for (std::size_t t = 0; t < y.size(); ++t) y[t] = std::sin(0.01 * static_cast<double>(t));
    const auto noisy = add_noise(y, 40.0, 17);

    double p_signal = 0.0, p_noise = 0.0;
    for (std::size_t t = 0; t < y.size(); ++t) {
        p_signal += y[t] * y[t];
        const double n = noisy[t] - y[t];
        p_noise += n * n;
    }
    const double snr = 10.0 * std::log10(p_signal / p_noise);
    CHECK(std::abs(snr - 40.0) < 1e-9);
    CHECK(std::sqrt(p_noise / p_signal) == doctest::Approx(0.01).epsilon(1e-9));
}

TEST_CASE("add_noise edge cases") {
    std::vector<double> y = {1.0, -1.0, 0.5};
    const auto same = add_noise(y, std::numeric_limits<double>::infinity(), 3);
    for (std::size_t k = 0; k < y.size(); ++k) CHECK(same[k] == y[k]);

    const std::vector<double> zero(10, 0.0);
    CHECK_THROWS_AS(add_noise(zero, 40.0, 3), ZeroSignal);

    const auto a = add_noise(y, 20.0, 5);
    const auto b = add_noise(y, 20.0, 5);
    for (std::size_t k = 0; k < y.size(); ++k) CHECK(a[k] == b[k]);
}

TEST_CASE("csv round trip is bit exact") {
    SignalRecord rec;
    rec.fs = 610.0 / 3.0;
    rec.meta["origin"] = "unit-test";
    Rng rng(31);
    rec.u.resize(200);
    rec.y.resize(200);
    for (std::size_t k = 0; k < rec.u.size(); ++k) {
        rec.u[k] = rng.normal() * 1e-3;
        rec.y[k] = rng.normal() * 1e3;
    }
    const auto path = temp_path("pnarx_roundtrip.csv");
    csv_write(rec, path);
    const auto back = csv_read(path);
    CHECK(back.fs == rec.fs);
    CHECK(back.meta.at("origin") == "unit-test");
    REQUIRE(back.u.size() == rec.u.size());
    REQUIRE(back.y.size() == rec.y.size());
    for (std::size_t k = 0; k < rec.u.size(); ++k) {
        CHECK(back.u[k] == rec.u[k]);
        CHECK(back.y[k] == rec.y[k]);
    }
    std::remove(path.c_str());
}

TEST_CASE("csv with input only") {
    SignalRecord rec;
    rec.fs = 2.0;
    rec.u = {0.25, -0.5, 0.75};
    const auto path = temp_path("pnarx_uonly.csv");
    csv_write(rec, path);
    const auto back = csv_read(path);
    CHECK_FALSE(back.has_output());
    REQUIRE(back.u.size() == 3);
    CHECK(back.u[1] == -0.5);
    std::remove(path.c_str());
}

TEST_CASE("csv parse errors name the offending line") {
    const auto path = temp_path("pnarx_bad.csv");
    {
        std::ofstream out(path);
        out << "# fs=2\nu,y\n1.0,2.0\n3.0,oops\n";
    }
    try {
        csv_read(path);
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(std::string(e.what()).find("line 4") != std::string::npos);
    }
    std::remove(path.c_str());
}
