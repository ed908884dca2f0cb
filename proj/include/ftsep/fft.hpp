#ifndef FTSEP_FFT_HPP
#define FTSEP_FFT_HPP

#include <cmath>
#include <complex>
#include <cstdint>
#include <vector>

namespace ftsep::fft {

constexpr double kPi = 3.141592653589793238462643383279502884;

inline bool is_pow2(size_t n) { return n != 0 && (n & (n - 1)) == 0; }

/// In-place complex FFT. Radix-2 for powers of two, O(n^2) DFT otherwise.
/// inverse=true computes the unscaled inverse transform (caller divides by n).
template <typename T>
void transform(std::vector<std::complex<T>>& a, bool inverse) {
    const size_t n = a.size();
    if (n <= 1) return;
    if (!is_pow2(n)) {
        std::vector<std::complex<T>> out(n);
        const double sign = inverse ? 1.0 : -1.0;
        for (size_t k = 0; k < n; ++k) {
            std::complex<double> acc(0.0, 0.0);
            for (size_t j = 0; j < n; ++j) {
                double ang = sign * 2.0 * kPi * static_cast<double>(j * k % n) / static_cast<double>(n);
                std::complex<double> x(a[j].real(), a[j].imag());
                acc += x * std::complex<double>(std::cos(ang), std::sin(ang));
            }
            out[k] = std::complex<T>(static_cast<T>(acc.real()), static_cast<T>(acc.imag()));
        }
        a = std::move(out);
        return;
    }
    // bit-reversal permutation
    for (size_t i = 1, j = 0; i < n; ++i) {
        size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (size_t len = 2; len <= n; len <<= 1) {
        double ang = 2.0 * kPi / static_cast<double>(len) * (inverse ? 1.0 : -1.0);
        std::complex<T> wlen(static_cast<T>(std::cos(ang)), static_cast<T>(std::sin(ang)));
        for (size_t i = 0; i < n; i += len) {
            std::complex<T> w(1);
            for (size_t j = 0; j < len / 2; ++j) {
                std::complex<T> u = a[i + j];
                std::complex<T> v = a[i + j + len / 2] * w;
                a[i + j] = u + v;
                a[i + j + len / 2] = u - v;
                w *= wlen;
            }
        }
    }
}

template <typename T>
void forward(std::vector<std::complex<T>>& a) {
    transform(a, false);
}

/// Normalized inverse.
template <typename T>
void inverse(std::vector<std::complex<T>>& a) {
    transform(a, true);
    const T inv_n = static_cast<T>(1.0 / static_cast<double>(a.size()));
    for (auto& x : a) x *= inv_n;
}

}  // namespace ftsep::fft

#endif  // FTSEP_FFT_HPP
