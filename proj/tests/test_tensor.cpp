#include <doctest.h>

#include "pnarx/tensor.hpp"
#include "pnarx/rng.hpp"
#include "support.hpp"

using namespace pnarx;

namespace {

Tensor3 random_tensor(std::size_t m, std::size_t n, std::size_t p, Rng& rng) {
    Tensor3 t(m, n, p);
    for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = rng.uniform(-1.0, 1.0);
    return t;
}

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng) {
    Matrix m(r, c);
    for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-1.0, 1.0);
    return m;
}

} // namespace

TEST_CASE("khatri_rao identity case") {
    const Matrix a = Matrix::from_rows({{1.0}});
    const Matrix b = Matrix::from_rows({{1.0}});
    const Matrix k = khatri_rao(a, b);
    CHECK(k.rows() == 1);
    CHECK(k.cols() == 1);
    CHECK(k(0, 0) == 1.0);
}

TEST_CASE("khatri_rao 2x2 against kron-per-column oracle") {
    const Matrix a = Matrix::from_rows({{1, 2}, {3, 4}});
    const Matrix b = Matrix::from_rows({{5, 6}, {7, 8}});
    const Matrix k = khatri_rao(a, b);
    const Matrix expect = Matrix::from_rows({{5, 12}, {7, 16}, {15, 24}, {21, 32}});
    REQUIRE(k.rows() == 4);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 2; ++j) CHECK(k(i, j) == expect(i, j));

    const Matrix oracle = testsup::naive_khatri_rao(a, b);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 2; ++j) CHECK(k(i, j) == oracle(i, j));
}

TEST_CASE("khatri_rao rejects mismatched column counts") {
    Rng rng(7);
    const Matrix a = random_matrix(2, 2, rng);
    const Matrix b = random_matrix(2, 3, rng);
    CHECK_THROWS_AS(khatri_rao(a, b), ColumnMismatch);
}

TEST_CASE("khatri_rao column i depends only on columns i of the inputs") {
    Rng rng(11);
    Matrix a = random_matrix(3, 3, rng);
    Matrix b = random_matrix(2, 3, rng);
    const Matrix k0 = khatri_rao(a, b);
    // perturb column 2 only; columns 0,1 of the product must not move
    a(0, 2) += 1.0;
    b(1, 2) -= 2.0;
    const Matrix k1 = khatri_rao(a, b);
    for (std::size_t i = 0; i < k0.rows(); ++i)
        for (std::size_t j = 0; j < 2; ++j) CHECK(k0(i, j) == k1(i, j));
}

TEST_CASE("matricize of a 1x1x1 tensor") {
    Tensor3 t(1, 1, 1);
    t(0, 0, 0) = 42.0;
    for (int mode : {1, 2, 3}) {
        const Matrix m = matricize(t, mode);
        CHECK(m.rows() == 1);
        CHECK(m.cols() == 1);
        CHECK(m(0, 0) == 42.0);
    }
}

TEST_CASE("mode-1 unfolding of a rank-1 tensor equals w (h kr v)^T") {
    // w=[1], v=[1,2], h=[3,4]; entries enumerated by brute force
    const Matrix w = Matrix::from_rows({{1.0}});
    const Matrix v = Matrix::from_rows({{1.0}, {2.0}});
    const Matrix h = Matrix::from_rows({{3.0}, {4.0}});
    const Tensor3 t = cpd_reconstruct(w, v, h);
    for (std::size_t k = 0; k < 2; ++k)
        for (std::size_t l = 0; l < 2; ++l) CHECK(t(0, k, l) == v(k, 0) * h(l, 0));

    const Matrix j1 = matricize(t, 1);
    const double expect[4] = {3.0, 6.0, 4.0, 8.0};
    REQUIRE(j1.rows() == 1);
    REQUIRE(j1.cols() == 4);
    for (std::size_t c = 0; c < 4; ++c) CHECK(j1(0, c) == expect[c]);
}

TEST_CASE("refolding all three unfoldings returns the original tensor") {
    Rng rng(13);
    const Tensor3 t = random_tensor(2, 3, 4, rng);
    for (int mode : {1, 2, 3}) {
        const Tensor3 back = fold(matricize(t, mode), mode, 2, 3, 4);
        for (std::size_t i = 0; i < t.size(); ++i) CHECK(back.data()[i] == t.data()[i]);
    }
}

TEST_CASE("unfoldings are entry bijections") {
    Rng rng(17);
    Tensor3 t(2, 3, 4);
    // give every entry a unique value, then check each appears exactly once
    for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = static_cast<double>(i);
    for (int mode : {1, 2, 3}) {
        const Matrix m = matricize(t, mode);
        std::vector<int> seen(t.size(), 0);
        for (std::size_t i = 0; i < m.size(); ++i) seen[static_cast<std::size_t>(m.data()[i])]++;
        for (int c : seen) CHECK(c == 1);
    }
}

TEST_CASE("cpd_reconstruct zero factors give the zero tensor") {
    const Tensor3 t = cpd_reconstruct(Matrix(2, 2), Matrix(3, 2), Matrix(4, 2));
    for (std::size_t i = 0; i < t.size(); ++i) CHECK(t.data()[i] == 0.0);
}

TEST_CASE("cpd_reconstruct hand-evaluated rank-1 entries") {
    const Matrix w = Matrix::from_rows({{1.0}});
    const Matrix v = Matrix::from_rows({{2.0}, {3.0}});
    const Matrix h = Matrix::from_rows({{4.0}, {5.0}});
    const Tensor3 t = cpd_reconstruct(w, v, h);
    CHECK(t(0, 0, 0) == 8.0);
    CHECK(t(0, 1, 0) == 12.0);
    CHECK(t(0, 0, 1) == 10.0);
    CHECK(t(0, 1, 1) == 15.0);
}

TEST_CASE("cpd_reconstruct is linear in the rank-one terms") {
    Rng rng(19);
    const Matrix w = random_matrix(2, 2, rng);
    const Matrix v = random_matrix(3, 2, rng);
    const Matrix h = random_matrix(4, 2, rng);
    const Tensor3 sum = cpd_reconstruct(w, v, h);

    Matrix w0(2, 1), v0(3, 1), h0(4, 1), w1(2, 1), v1(3, 1), h1(4, 1);
    for (std::size_t i = 0; i < 2; ++i) { w0(i, 0) = w(i, 0); w1(i, 0) = w(i, 1); }
    for (std::size_t i = 0; i < 3; ++i) { v0(i, 0) = v(i, 0); v1(i, 0) = v(i, 1); }
    for (std::size_t i = 0; i < 4; ++i) { h0(i, 0) = h(i, 0); h1(i, 0) = h(i, 1); }
    const Tensor3 a = cpd_reconstruct(w0, v0, h0);
    const Tensor3 b = cpd_reconstruct(w1, v1, h1);
    for (std::size_t i = 0; i < sum.size(); ++i)
        CHECK(sum.data()[i] == doctest::Approx(a.data()[i] + b.data()[i]).epsilon(1e-14));
}

TEST_CASE("cpd_reconstruct rejects mismatched factor columns") {
    CHECK_THROWS_AS(cpd_reconstruct(Matrix(2, 2), Matrix(3, 1), Matrix(4, 2)), ColumnMismatch);
}

TEST_CASE("frob_norm basics and sum-of-squares oracle") {
    CHECK(frob_norm(Tensor3(2, 2, 2)) == 0.0);
    CHECK(frob_norm(Matrix::from_rows({{3.0, 4.0}})) == doctest::Approx(5.0));

    Rng rng(23);
    const Tensor3 t = random_tensor(3, 2, 5, rng);
    double ss = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) ss += t.data()[i] * t.data()[i];
    CHECK(frob_norm(t) * frob_norm(t) == doctest::Approx(ss).epsilon(1e-13));
}

TEST_CASE("mode-1 identity J1 = W (H kr V)^T holds for random factors") {
    Rng rng(29);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t m = 1 + rng.raw() % 3, n = 1 + rng.raw() % 4,
                          p = 1 + rng.raw() % 5, r = 1 + rng.raw() % 3;
        const Matrix w = random_matrix(m, r, rng);
        const Matrix v = random_matrix(n, r, rng);
        const Matrix h = random_matrix(p, r, rng);
        const Matrix j1 = matricize(cpd_reconstruct(w, v, h), 1);
        const Matrix rhs = w * khatri_rao(h, v).transposed();
        REQUIRE(j1.rows() == rhs.rows());
        REQUIRE(j1.cols() == rhs.cols());
        for (std::size_t i = 0; i < j1.size(); ++i)
            CHECK(j1.data()[i] == doctest::Approx(rhs.data()[i]).epsilon(1e-13));
    }
}

TEST_CASE("mode-2 and mode-3 identities for random factors") {
    Rng rng(31);
    const Matrix w = random_matrix(2, 3, rng);
    const Matrix v = random_matrix(4, 3, rng);
    const Matrix h = random_matrix(5, 3, rng);
    const Tensor3 t = cpd_reconstruct(w, v, h);

    const Matrix j2 = matricize(t, 2);
    const Matrix rhs2 = v * khatri_rao(h, w).transposed();
    for (std::size_t i = 0; i < j2.size(); ++i)
        CHECK(j2.data()[i] == doctest::Approx(rhs2.data()[i]).epsilon(1e-13));

    const Matrix j3 = matricize(t, 3);
    const Matrix rhs3 = h * khatri_rao(v, w).transposed();
    for (std::size_t i = 0; i < j3.size(); ++i)
        CHECK(j3.data()[i] == doctest::Approx(rhs3.data()[i]).epsilon(1e-13));
}
