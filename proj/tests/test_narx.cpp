#include <doctest.h>

#include <cmath>

#include "pnarx/narx.hpp"
#include "pnarx/rng.hpp"
#include "support.hpp"

using namespace pnarx;

namespace {

// bounded random-coefficient P-NARX whose recursion stays contractive
PNarxModel small_stable_pnarx(const NarxStructure& s, Rng& rng, double scale = 0.05) {
    MultiPoly f(basis_enumerate(s.regressor_dim(), s.degree, false));
    for (auto& c : f.coeffs) c = scale * rng.uniform(-1.0, 1.0);
    return PNarxModel{s, std::move(f)};
}

std::vector<double> random_signal(std::size_t len, Rng& rng, double amp = 1.0) {
    std::vector<double> u(len);
    for (auto& x : u) x = amp * rng.uniform(-1.0, 1.0);
    return u;
}

} // namespace

TEST_CASE("build_regressors hand case n_u=0 n_y=1") {
    const std::vector<double> u = {1.0, 2.0};
    const std::vector<double> y = {10.0, 20.0};
    const auto reg = build_regressors(u, y, NarxStructure{0, 1, 1});
    REQUIRE(reg.x.rows() == 1);
    REQUIRE(reg.x.cols() == 2);
    CHECK(reg.x(0, 0) == 2.0);
    CHECK(reg.x(0, 1) == 10.0);
    CHECK(reg.targets[0] == 20.0);
    CHECK(reg.start_index == 1);
}

TEST_CASE("regressor width is 5 for n_u=1 n_y=3") {
    Rng rng(1);
    const auto u = random_signal(20, rng);
    const auto y = random_signal(20, rng);
    const auto reg = build_regressors(u, y, NarxStructure{1, 3, 3});
    CHECK(reg.x.cols() == 5);
    CHECK(reg.x.rows() == 17);
}

TEST_CASE("constant signals give identical regressor rows") {
    const std::vector<double> u(10, 0.5);
    const std::vector<double> y(10, -1.5);
    const auto reg = build_regressors(u, y, NarxStructure{2, 2, 1});
    for (std::size_t row = 1; row < reg.x.rows(); ++row)
        for (std::size_t c = 0; c < reg.x.cols(); ++c) CHECK(reg.x(row, c) == reg.x(0, c));
}

TEST_CASE("build_regressors rejects too-short records") {
    const std::vector<double> u = {1.0, 2.0, 3.0};
    const std::vector<double> y = {1.0, 2.0, 3.0};
    CHECK_THROWS_AS(build_regressors(u, y, NarxStructure{1, 3, 1}), TooShort);
}

TEST_CASE("fit_pnarx recovers a known model from noiseless data") {
    Rng rng(5);
    const NarxStructure s{1, 2, 2};
    const PNarxModel truth = small_stable_pnarx(s, rng, 0.08);

    const auto u = random_signal(4000, rng);
    std::vector<double> y(u.size(), 0.0);
    std::vector<double> x(s.regressor_dim());
    for (std::size_t t = static_cast<std::size_t>(s.max_lag()); t < u.size(); ++t) {
        std::size_t c = 0;
        for (int lag = 0; lag <= s.n_u; ++lag) x[c++] = u[t - lag];
        for (int lag = 1; lag <= s.n_y; ++lag) x[c++] = y[t - lag];
        y[t] = truth.eval(x);
    }

    const PNarxModel fit = fit_pnarx(u, y, s);
    for (std::size_t j = 0; j < truth.f.coeffs.size(); ++j) {
        const double scale = std::max(1e-3, std::abs(truth.f.coeffs[j]));
        CHECK(std::abs(fit.f.coeffs[j] - truth.f.coeffs[j]) / scale < 1e-8);
    }
}

TEST_CASE("fit_pnarx with degree 1 equals the ordinary ARX estimate") {
    Rng rng(7);
    const NarxStructure s{1, 2, 1};
    const auto u = random_signal(1500, rng);
    std::vector<double> y(u.size(), 0.0);
    for (std::size_t t = 2; t < u.size(); ++t)
        y[t] = 0.4 * y[t - 1] - 0.2 * y[t - 2] + 0.7 * u[t] + 0.1 * u[t - 1] + 0.01 * rng.normal();

    const PNarxModel fit = fit_pnarx(u, y, s);

    // independent ARX least squares via plain normal equations
    const auto reg = build_regressors(u, y, s);
    const std::size_t n = reg.x.cols();
    Matrix ata(n, n);
    std::vector<double> atb(n, 0.0);
    for (std::size_t row = 0; row < reg.x.rows(); ++row)
        for (std::size_t a = 0; a < n; ++a) {
            atb[a] += reg.x(row, a) * reg.targets[row];
            for (std::size_t b = 0; b < n; ++b) ata(a, b) += reg.x(row, a) * reg.x(row, b);
        }
    const auto arx = linalg::solve_spd(ata, atb);

    // degree-1 constant-free basis enumerates the plain regressors in order
    REQUIRE(fit.f.coeffs.size() == n);
    for (std::size_t j = 0; j < n; ++j)
        CHECK(fit.f.coeffs[j] == doctest::Approx(arx[j]).epsilon(1e-8));
}

TEST_CASE("fit_pnarx on zero output returns zero coefficients") {
    Rng rng(9);
    const auto u = random_signal(500, rng);
    const std::vector<double> y(u.size(), 0.0);
    PnarxFitInfo info;
    const PNarxModel fit = fit_pnarx(u, y, NarxStructure{1, 2, 2}, &info);
    for (double c : fit.f.coeffs) CHECK(std::abs(c) < 1e-12);
    CHECK(info.rank_deficient);
}

TEST_CASE("simulate with zero polynomial returns zero after the window") {
    NarxStructure s{1, 2, 2};
    PNarxModel zero{s, MultiPoly(basis_enumerate(s.regressor_dim(), s.degree, false))};
    Rng rng(11);
    const auto u = random_signal(50, rng);
    const std::vector<double> y_init = {0.3, -0.4};
    const auto ys = simulate(zero, u, y_init);
    CHECK(ys[0] == 0.3);
    CHECK(ys[1] == -0.4);
    for (std::size_t t = 2; t < ys.size(); ++t) CHECK(ys[t] == 0.0);
}

TEST_CASE("simulate of a stable ARX model matches the difference equation") {
    const NarxStructure s{1, 2, 1};
    MultiPoly f(basis_enumerate(s.regressor_dim(), 1, false));
    // coefficients in regressor order [u(t), u(t-1), y(t-1), y(t-2)]
    f.coeffs = {0.5, 0.25, 0.6, -0.2};
    const PNarxModel model{s, f};

    std::vector<double> u(200, 1.0); // step input
    std::vector<double> expect(u.size(), 0.0);
    for (std::size_t t = 2; t < u.size(); ++t)
        expect[t] = 0.5 * u[t] + 0.25 * u[t - 1] + 0.6 * expect[t - 1] - 0.2 * expect[t - 2];

    const std::vector<double> y_init = {0.0, 0.0};
    const auto ys = simulate(model, u, y_init);
    for (std::size_t t = 0; t < u.size(); ++t)
        CHECK(std::abs(ys[t] - expect[t]) < 1e-10);
}

TEST_CASE("simulate flags divergence of an unstable recursion") {
    const NarxStructure s{0, 1, 1};
    MultiPoly f(basis_enumerate(2, 1, false));
    f.coeffs = {0.0, 2.0}; // y(t) = 2 y(t-1)
    const PNarxModel model{s, f};
    const std::vector<double> u(100, 0.0);
    const std::vector<double> y_init = {1.0};
    CHECK_THROWS_AS(simulate(model, u, y_init), Diverged);
}

TEST_CASE("noiseless self-simulation reproduces training data") {
    Rng rng(13);
    const NarxStructure s{1, 2, 2};
    const PNarxModel truth = small_stable_pnarx(s, rng, 0.06);
    const auto u = random_signal(3000, rng);
    std::vector<double> y(u.size(), 0.0);
    std::vector<double> x(s.regressor_dim());
    for (std::size_t t = 2; t < u.size(); ++t) {
        std::size_t c = 0;
        for (int lag = 0; lag <= s.n_u; ++lag) x[c++] = u[t - lag];
        for (int lag = 1; lag <= s.n_y; ++lag) x[c++] = y[t - lag];
        y[t] = truth.eval(x);
    }
    const PNarxModel fit = fit_pnarx(u, y, s);
    const auto ys = simulate(fit, u, std::vector<double>(y.begin(), y.begin() + 2));
    const auto err = e_rms(std::span<const double>(y).subspan(2), std::span<const double>(ys).subspan(2));
    CHECK(err < 1e-6);
}

TEST_CASE("fit_pnarx residual is a least-squares minimum") {
    Rng rng(17);
    const NarxStructure s{1, 1, 2};
    const auto u = random_signal(400, rng);
    std::vector<double> y(u.size());
    for (std::size_t t = 0; t < y.size(); ++t) y[t] = rng.uniform(-1.0, 1.0);

    const PNarxModel fit = fit_pnarx(u, y, s);
    const auto reg = build_regressors(u, y, s);
    const auto sse = [&](const MultiPoly& f) {
        double ssum = 0.0;
        std::vector<double> x(s.regressor_dim());
        for (std::size_t row = 0; row < reg.x.rows(); ++row) {
            for (int c = 0; c < s.regressor_dim(); ++c) x[c] = reg.x(row, c);
            const double e = reg.targets[row] - poly_eval(f, x);
            ssum += e * e;
        }
        return ssum;
    };
    const double best = sse(fit.f);
    for (std::size_t j = 0; j < fit.f.coeffs.size(); ++j) {
        for (double d : {-1e-3, 1e-3}) {
            MultiPoly f = fit.f;
            f.coeffs[j] += d;
            CHECK(sse(f) >= best - 1e-10);
        }
    }
}

TEST_CASE("e_rms hand values and properties") {
    const std::vector<double> y = {3.0, 4.0};
    CHECK(e_rms(y, y) == 0.0);
    CHECK(e_rms(y, std::vector<double>{0.0, 0.0}) == doctest::Approx(100.0));
    CHECK(e_rms(y, std::vector<double>{3.0, 0.0}) == doctest::Approx(80.0));

    const std::vector<double> zero = {0.0, 0.0};
    CHECK_THROWS_AS(e_rms(zero, y), ZeroReference);

    // scale invariance
    Rng rng(19);
    std::vector<double> a(50), b(50);
    for (std::size_t i = 0; i < a.size(); ++i) {
        a[i] = rng.normal();
        b[i] = rng.normal();
    }
    const double base = e_rms(a, b);
    std::vector<double> a2 = a, b2 = b;
    for (auto& v : a2) v *= -3.7;
    for (auto& v : b2) v *= -3.7;
    CHECK(e_rms(a2, b2) == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("e_f on exact and degenerate decouplings") {
    Rng rng(23);
    // f = 2 x1 + 3 x2 decouples exactly with one branch
    MultiPoly f(basis_enumerate(2, 1, false));
    f.coeffs = {2.0, 3.0};

    const double nv = std::sqrt(13.0);
    Matrix v(2, 1);
    v(0, 0) = 2.0 / nv;
    v(1, 0) = 3.0 / nv;
    DecoupledNarxModel fd{NarxStructure{0, 1, 1}, v, {UnivariatePoly({0.0, nv})}};

    Matrix xo(40, 2);
    for (std::size_t i = 0; i < xo.size(); ++i) xo.data()[i] = rng.uniform(-1.0, 1.0);
    CHECK(e_f(f, fd, xo) < 1e-10);

    DecoupledNarxModel zero{NarxStructure{0, 1, 1}, v, {UnivariatePoly({0.0, 0.0})}};
    CHECK(e_f(f, zero, xo) == doctest::Approx(100.0));

    // exact equality case through the multinomial expansion oracle
    const auto truth = testsup::random_decoupled_cubic(3, 2, rng);
    DecoupledNarxModel exact{NarxStructure{1, 1, 3}, truth.v, truth.branches};
    Matrix xo3(30, 3);
    for (std::size_t i = 0; i < xo3.size(); ++i) xo3.data()[i] = rng.uniform(-1.0, 1.0);
    CHECK(e_f(truth.f, exact, xo3) < 1e-9);
}

TEST_CASE("decoupled model parameter count") {
    Matrix v(5, 4);
    std::vector<UnivariatePoly> branches(4, UnivariatePoly({0.0, 0.0, 0.0, 0.0}));
    DecoupledNarxModel m{NarxStructure{1, 3, 3}, v, branches};
    CHECK(m.parameter_count() == 36);
}
