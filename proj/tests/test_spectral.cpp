#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "acdm/ops.hpp"

using namespace acdm;
using Catch::Approx;

namespace {

// Plane wave sin(2*pi*(kx*x/W + ky*y/H) + phase) on an HxW grid.
TensorPtr<double> plane_wave(int h, int w, int kx, int ky, double phase = 0.4) {
    auto t = tensor<double>({1, 1, h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            t->data[static_cast<size_t>(y) * w + x] =
                std::sin(2.0 * M_PI * (static_cast<double>(kx) * x / w + static_cast<double>(ky) * y / h) + phase);
    return t;
}

// Identity mixing: 1 + 0i on every retained mode, single channel pair.
TensorPtr<double> identity_weights(int mx, int my) {
    auto w = tensor<double>({1, 1, my, mx, 2});
    for (int ky = 0; ky < my; ++ky)
        for (int kx = 0; kx < mx; ++kx) w->data[(static_cast<size_t>(ky) * mx + kx) * 2] = 1.0;
    return w;
}

}  // namespace

TEST_CASE("spectral_conv2d pass-band identity", "[spectral]") {
    const int h = 16, w = 32, mx = 6, my = 4;
    auto wts = identity_weights(mx, my);
    for (auto [kx, ky] : {std::pair{1, 0}, {0, 2}, {3, 1}, {5, 3}}) {
        auto x = plane_wave(h, w, kx, ky);
        auto y = spectral_conv2d(x, wts, mx, my);
        double max_err = 0;
        for (size_t i = 0; i < x->data.size(); ++i)
            max_err = std::max(max_err, std::abs(y->data[i] - x->data[i]));
        INFO("mode (" << kx << "," << ky << ")");
        CHECK(max_err <= 1e-10);
    }
}

TEST_CASE("spectral_conv2d stop-band annihilation", "[spectral]") {
    const int h = 16, w = 32, mx = 6, my = 4;
    auto wts = identity_weights(mx, my);
    for (auto [kx, ky] : {std::pair{7, 0}, {0, 5}, {9, 6}, {8, 2}}) {
        auto x = plane_wave(h, w, kx, ky);
        auto y = spectral_conv2d(x, wts, mx, my);
        double max_abs = 0;
        for (double v : y->data) max_abs = std::max(max_abs, std::abs(v));
        INFO("mode (" << kx << "," << ky << ")");
        CHECK(max_abs <= 1e-10);
    }
}

TEST_CASE("spectral_conv2d rejects modes beyond Nyquist", "[spectral]") {
    auto x = tensor<double>({1, 1, 8, 8});
    auto w_ok = tensor<double>({1, 1, 5, 5, 2});
    CHECK_NOTHROW(spectral_conv2d(x, w_ok, 5, 5));  // 8/2+1 = 5 is the limit
    auto w_bad = tensor<double>({1, 1, 6, 5, 2});
    REQUIRE_THROWS_AS(spectral_conv2d(x, w_bad, 5, 6), std::invalid_argument);
    auto w_bad2 = tensor<double>({1, 1, 5, 6, 2});
    REQUIRE_THROWS_AS(spectral_conv2d(x, w_bad2, 6, 5), std::invalid_argument);
}

TEST_CASE("spectral_conv2d output is real-valued for complex weights", "[spectral]") {
    // Mixing with arbitrary complex weights must keep real inputs real;
    // checked implicitly by construction, here via energy comparison against
    // a double application (linearity sanity).
    const int h = 12, w = 10, mx = 4, my = 3;
    auto wts = tensor<double>({1, 1, my, mx, 2});
    for (size_t i = 0; i < wts->data.size(); ++i) wts->data[i] = 0.1 * static_cast<double>(i % 7) - 0.3;
    auto x = plane_wave(h, w, 2, 1);
    auto y1 = spectral_conv2d(x, wts, mx, my);
    auto x2 = scale(x, 2.0);
    auto y2 = spectral_conv2d(x2, wts, mx, my);
    for (size_t i = 0; i < y1->data.size(); ++i) CHECK(y2->data[i] == Approx(2.0 * y1->data[i]).margin(1e-12));
}
