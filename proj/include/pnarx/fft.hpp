#pragma once

#include <complex>
#include <vector>

#include "pnarx/errors.hpp"

namespace pnarx {

//! In-place iterative radix-2 FFT; size must be a power of two.
inline void fft_inplace(std::vector<std::complex<double>>& a, bool inverse) {
    const std::size_t n = a.size();
    if (n == 0 || (n & (n - 1)) != 0)
        throw DimensionMismatch("fft: length must be a power of two");

    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (std::size_t len = 2; len <= n; len <<= 1) {
        const double ang = (inverse ? 2.0 : -2.0) * 3.14159265358979323846 / static_cast<double>(len);
        const std::complex<double> wl(std::cos(ang), std::sin(ang));
        for (std::size_t i = 0; i < n; i += len) {
            std::complex<double> w(1.0, 0.0);
            for (std::size_t k = 0; k < len / 2; ++k) {
                const auto even = a[i + k];
                const auto odd = a[i + k + len / 2] * w;
                a[i + k] = even + odd;
                a[i + k + len / 2] = even - odd;
                w *= wl;
            }
        }
    }
    if (inverse)
        for (auto& x : a) x /= static_cast<double>(n);
}

//! DFT of a real signal (length must be a power of two).
inline std::vector<std::complex<double>> fft_real(const std::vector<double>& x) {
    std::vector<std::complex<double>> a(x.begin(), x.end());
    fft_inplace(a, false);
    return a;
}

} // namespace pnarx
