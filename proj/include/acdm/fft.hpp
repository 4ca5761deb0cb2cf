#pragma once

#include <fftw3.h>

#include <complex>
#include <map>
#include <mutex>
#include <stdexcept>
#include <vector>

namespace acdm::fft {

/// Thin wrapper over FFTW double-precision transforms with a process-wide
/// plan cache. Plan creation is serialized; execution uses the new-array
/// interface so cached plans can run on caller buffers.
///
/// Conventions: forward transforms are unnormalized, inverse transforms
/// divide by the logical element count (numpy-style).
class Plans {
public:
    static Plans& instance() {
        static Plans p;
        return p;
    }

    /// Complex 1D DFT, in/out length n.
    void dft_1d(int n, const std::complex<double>* in, std::complex<double>* out, bool inverse) {
        fftw_plan p = plan_c2c({n, 0, inverse ? 1 : 0, 1});
        run_c2c(p, in, out);
        if (inverse) scale(out, n, 1.0 / n);
    }

    /// Complex 2D DFT on row-major [h][w].
    void dft_2d(int h, int w, const std::complex<double>* in, std::complex<double>* out, bool inverse) {
        fftw_plan p = plan_c2c({h, w, inverse ? 1 : 0, 2});
        run_c2c(p, in, out);
        if (inverse) scale(out, static_cast<size_t>(h) * w, 1.0 / (static_cast<double>(h) * w));
    }

    /// Real-to-complex 2D DFT: real [h][w] -> complex [h][w/2+1].
    void rfft_2d(int h, int w, const double* in, std::complex<double>* out) {
        fftw_plan p = plan_r2c(h, w);
        // r2c new-array execution requires non-const in; FFTW does not write it.
        fftw_execute_dft_r2c(p, const_cast<double*>(in), reinterpret_cast<fftw_complex*>(out));
    }

    /// Complex-to-real inverse of rfft_2d, normalized by h*w.
    /// Clobbers `in` (FFTW c2r transforms destroy their input).
    void irfft_2d(int h, int w, std::complex<double>* in, double* out) {
        fftw_plan p = plan_c2r(h, w);
        fftw_execute_dft_c2r(p, reinterpret_cast<fftw_complex*>(in), out);
        double inv = 1.0 / (static_cast<double>(h) * w);
        for (size_t i = 0; i < static_cast<size_t>(h) * w; ++i) out[i] *= inv;
    }

private:
    struct Key {
        int n0, n1, sign, rank;
        bool operator<(const Key& o) const {
            if (n0 != o.n0) return n0 < o.n0;
            if (n1 != o.n1) return n1 < o.n1;
            if (sign != o.sign) return sign < o.sign;
            return rank < o.rank;
        }
    };

    Plans() = default;
    ~Plans() = default;  // plans leak at exit; harmless, avoids destruction-order issues

    fftw_plan plan_c2c(Key k) {
        std::lock_guard<std::mutex> lock(mu_);
        auto it = c2c_.find(k);
        if (it != c2c_.end()) return it->second;
        size_t n = k.rank == 1 ? k.n0 : static_cast<size_t>(k.n0) * k.n1;
        std::vector<std::complex<double>> scratch(n);
        auto* buf = reinterpret_cast<fftw_complex*>(scratch.data());
        fftw_plan p = k.rank == 1
            ? fftw_plan_dft_1d(k.n0, buf, buf, k.sign ? FFTW_BACKWARD : FFTW_FORWARD, FFTW_ESTIMATE)
            : fftw_plan_dft_2d(k.n0, k.n1, buf, buf, k.sign ? FFTW_BACKWARD : FFTW_FORWARD, FFTW_ESTIMATE);
        if (!p) throw std::runtime_error("fftw plan creation failed");
        c2c_.emplace(k, p);
        return p;
    }

    fftw_plan plan_r2c(int h, int w) {
        std::lock_guard<std::mutex> lock(mu_);
        Key k{h, w, 0, 3};
        auto it = c2c_.find(k);
        if (it != c2c_.end()) return it->second;
        std::vector<double> rin(static_cast<size_t>(h) * w);
        std::vector<std::complex<double>> cout(static_cast<size_t>(h) * (w / 2 + 1));
        fftw_plan p = fftw_plan_dft_r2c_2d(h, w, rin.data(),
                                           reinterpret_cast<fftw_complex*>(cout.data()), FFTW_ESTIMATE);
        if (!p) throw std::runtime_error("fftw r2c plan creation failed");
        c2c_.emplace(k, p);
        return p;
    }

    fftw_plan plan_c2r(int h, int w) {
        std::lock_guard<std::mutex> lock(mu_);
        Key k{h, w, 0, 4};
        auto it = c2c_.find(k);
        if (it != c2c_.end()) return it->second;
        std::vector<std::complex<double>> cin(static_cast<size_t>(h) * (w / 2 + 1));
        std::vector<double> rout(static_cast<size_t>(h) * w);
        fftw_plan p = fftw_plan_dft_c2r_2d(h, w, reinterpret_cast<fftw_complex*>(cin.data()),
                                           rout.data(), FFTW_ESTIMATE);
        if (!p) throw std::runtime_error("fftw c2r plan creation failed");
        c2c_.emplace(k, p);
        return p;
    }

    void run_c2c(fftw_plan p, const std::complex<double>* in, std::complex<double>* out) {
        // FFTW's execute_dft does not modify input for out-of-place c2c.
        fftw_execute_dft(p, reinterpret_cast<fftw_complex*>(const_cast<std::complex<double>*>(in)),
                         reinterpret_cast<fftw_complex*>(out));
    }

    static void scale(std::complex<double>* v, size_t n, double s) {
        for (size_t i = 0; i < n; ++i) v[i] *= s;
    }

    std::mutex mu_;
    std::map<Key, fftw_plan> c2c_;
};

inline void dft_1d(int n, const std::complex<double>* in, std::complex<double>* out, bool inverse = false) {
    Plans::instance().dft_1d(n, in, out, inverse);
}
inline void dft_2d(int h, int w, const std::complex<double>* in, std::complex<double>* out, bool inverse = false) {
    Plans::instance().dft_2d(h, w, in, out, inverse);
}
inline void rfft_2d(int h, int w, const double* in, std::complex<double>* out) {
    Plans::instance().rfft_2d(h, w, in, out);
}
inline void irfft_2d(int h, int w, std::complex<double>* in, double* out) {
    Plans::instance().irfft_2d(h, w, in, out);
}

}  // namespace acdm::fft
