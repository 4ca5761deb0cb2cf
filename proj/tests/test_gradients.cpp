#include <catch2/catch_amalgamated.hpp>

#include "acdm/ops.hpp"
#include "acdm/rng.hpp"
#include "gradcheck.hpp"

using namespace acdm;

// Every differentiable op: analytic gradients vs central finite differences
// (step 1e-5) on at least 5 random shapes, rel-err <= 1e-4 at f64.

namespace {
constexpr double kTol = 1e-4;
constexpr int kShapes = 5;
}  // namespace

TEST_CASE("gradcheck conv2d", "[grad]") {
    Rng rng(1001);
    for (int t = 0; t < kShapes; ++t) {
        int n = 1 + t % 2, c = 1 + static_cast<int>(rng.uniform_int(0, 2));
        int o = 1 + static_cast<int>(rng.uniform_int(0, 2));
        int kh = 3, kw = 1 + 2 * static_cast<int>(rng.uniform_int(0, 1));
        int dil = 1 + static_cast<int>(rng.uniform_int(0, 1));
        int h = 5 + static_cast<int>(rng.uniform_int(0, 2)), w = 5 + static_cast<int>(rng.uniform_int(0, 2));
        auto x = leaf<double>({n, c, h, w}, "x");
        auto k = leaf<double>({o, c, kh, kw}, "k");
        test::fill_random(x, rng);
        test::fill_random(k, rng);
        auto fwd = [&] { return conv2d(x, k, 1, dil * (kh - 1) / 2, dil); };
        auto rx = test::check_op_gradient(fwd, {x, k}, x, rng);
        INFO("conv2d input grad, trial " << t << " worst " << rx.analytic << " vs " << rx.numeric);
        CHECK(rx.max_rel_err <= kTol);
        auto rk = test::check_op_gradient(fwd, {x, k}, k, rng);
        INFO("conv2d kernel grad, trial " << t);
        CHECK(rk.max_rel_err <= kTol);
    }
}

TEST_CASE("gradcheck group_norm", "[grad]") {
    Rng rng(1002);
    for (int t = 0; t < kShapes; ++t) {
        int groups = 1 + static_cast<int>(rng.uniform_int(0, 2));
        int c = groups * (1 + static_cast<int>(rng.uniform_int(0, 2)));
        int n = 1 + t % 2, h = 3 + static_cast<int>(rng.uniform_int(0, 3)), w = 3 + static_cast<int>(rng.uniform_int(0, 3));
        auto x = leaf<double>({n, c, h, w}, "x");
        auto g = leaf<double>({c}, "g");
        auto b = leaf<double>({c}, "b");
        test::fill_random(x, rng);
        test::fill_random(g, rng);
        test::fill_random(b, rng);
        auto fwd = [&] { return group_norm(x, groups, g, b); };
        CHECK(test::check_op_gradient(fwd, {x, g, b}, x, rng).max_rel_err <= kTol);
        CHECK(test::check_op_gradient(fwd, {x, g, b}, g, rng).max_rel_err <= kTol);
        CHECK(test::check_op_gradient(fwd, {x, g, b}, b, rng).max_rel_err <= kTol);
    }
}

TEST_CASE("gradcheck dense", "[grad]") {
    Rng rng(1003);
    for (int t = 0; t < kShapes; ++t) {
        int n = 1 + static_cast<int>(rng.uniform_int(0, 3));
        int fin = 2 + static_cast<int>(rng.uniform_int(0, 4));
        int fout = 1 + static_cast<int>(rng.uniform_int(0, 4));
        auto x = leaf<double>({n, fin}, "x");
        auto w = leaf<double>({fout, fin}, "w");
        auto b = leaf<double>({fout}, "b");
        test::fill_random(x, rng);
        test::fill_random(w, rng);
        test::fill_random(b, rng);
        auto fwd = [&] { return dense(x, w, b); };
        CHECK(test::check_op_gradient(fwd, {x, w, b}, x, rng).max_rel_err <= kTol);
        CHECK(test::check_op_gradient(fwd, {x, w, b}, w, rng).max_rel_err <= kTol);
        CHECK(test::check_op_gradient(fwd, {x, w, b}, b, rng).max_rel_err <= kTol);
    }
}

TEST_CASE("gradcheck silu", "[grad]") {
    Rng rng(1004);
    for (int t = 0; t < kShapes; ++t) {
        auto x = leaf<double>({2 + t, 3}, "x");
        test::fill_random(x, rng, 2.0);
        auto fwd = [&] { return silu(x); };
        CHECK(test::check_op_gradient(fwd, {x}, x, rng).max_rel_err <= kTol);
    }
}

TEST_CASE("gradcheck pooling and upsampling", "[grad]") {
    Rng rng(1005);
    for (int t = 0; t < kShapes; ++t) {
        int n = 1 + t % 2, c = 1 + static_cast<int>(rng.uniform_int(0, 2));
        int h = 2 * (2 + static_cast<int>(rng.uniform_int(0, 2)));
        int w = 2 * (2 + static_cast<int>(rng.uniform_int(0, 2)));
        auto x = leaf<double>({n, c, h, w}, "x");
        test::fill_random(x, rng);
        auto fwd_pool = [&] { return avg_pool2(x); };
        CHECK(test::check_op_gradient(fwd_pool, {x}, x, rng).max_rel_err <= kTol);
        auto fwd_up = [&] { return nearest_upsample2(x); };
        CHECK(test::check_op_gradient(fwd_up, {x}, x, rng).max_rel_err <= kTol);
    }
}

TEST_CASE("gradcheck spectral_conv2d", "[grad]") {
    Rng rng(1006);
    for (int t = 0; t < kShapes; ++t) {
        int n = 1, c = 1 + static_cast<int>(rng.uniform_int(0, 1));
        int o = 1 + static_cast<int>(rng.uniform_int(0, 1));
        int h = 4 + static_cast<int>(rng.uniform_int(0, 4));
        int w = 4 + static_cast<int>(rng.uniform_int(0, 4));
        int mx = 1 + static_cast<int>(rng.uniform_int(0, w / 2));
        int my = 1 + static_cast<int>(rng.uniform_int(0, h / 2));
        auto x = leaf<double>({n, c, h, w}, "x");
        auto wts = leaf<double>({o, c, my, mx, 2}, "wts");
        test::fill_random(x, rng);
        test::fill_random(wts, rng);
        auto fwd = [&] { return spectral_conv2d(x, wts, mx, my); };
        INFO("spectral shapes h=" << h << " w=" << w << " mx=" << mx << " my=" << my);
        CHECK(test::check_op_gradient(fwd, {x, wts}, wts, rng).max_rel_err <= kTol);
        CHECK(test::check_op_gradient(fwd, {x, wts}, x, rng).max_rel_err <= kTol);
    }
}

TEST_CASE("gradcheck losses", "[grad]") {
    Rng rng(1007);
    for (int t = 0; t < kShapes; ++t) {
        int n = 3 + static_cast<int>(rng.uniform_int(0, 8));
        auto p = leaf<double>({n}, "p");
        auto q = leaf<double>({n}, "q");
        test::fill_random(p, rng);
        test::fill_random(q, rng);
        {
            auto loss_fn = [&]() {
                NoGradGuard ng;
                return static_cast<double>(huber_loss(p, q, 0.7)->item());
            };
            auto loss = huber_loss(p, q, 0.7);
            backward(loss);
            auto res = test::grad_check(loss_fn, p, p->grad);
            CHECK(res.max_rel_err <= kTol);
            std::fill(p->grad.begin(), p->grad.end(), 0.0);
            std::fill(q->grad.begin(), q->grad.end(), 0.0);
        }
        {
            auto loss_fn = [&]() {
                NoGradGuard ng;
                return static_cast<double>(mse_loss(p, q)->item());
            };
            auto loss = mse_loss(p, q);
            backward(loss);
            auto res = test::grad_check(loss_fn, p, p->grad);
            CHECK(res.max_rel_err <= kTol);
            auto rest = test::grad_check(loss_fn, q, q->grad);
            CHECK(rest.max_rel_err <= kTol);
            std::fill(p->grad.begin(), p->grad.end(), 0.0);
            std::fill(q->grad.begin(), q->grad.end(), 0.0);
        }
    }
}

TEST_CASE("gradcheck channel plumbing", "[grad]") {
    Rng rng(1008);
    for (int t = 0; t < kShapes; ++t) {
        int n = 1 + t % 2, c1 = 1 + static_cast<int>(rng.uniform_int(0, 2)),
            c2 = 1 + static_cast<int>(rng.uniform_int(0, 2));
        int h = 2 + static_cast<int>(rng.uniform_int(0, 2)), w = 2 + static_cast<int>(rng.uniform_int(0, 2));
        auto a = leaf<double>({n, c1, h, w}, "a");
        auto b = leaf<double>({n, c2, h, w}, "b");
        auto bias = leaf<double>({c1}, "bias");
        auto semb = leaf<double>({n, c1}, "semb");
        test::fill_random(a, rng);
        test::fill_random(b, rng);
        test::fill_random(bias, rng);
        test::fill_random(semb, rng);

        auto fwd_cat = [&] { return concat_channels(a, b); };
        CHECK(test::check_op_gradient(fwd_cat, {a, b}, a, rng).max_rel_err <= kTol);
        CHECK(test::check_op_gradient(fwd_cat, {a, b}, b, rng).max_rel_err <= kTol);

        auto fwd_slice = [&] { return slice_channels(concat_channels(a, b), c1, c2); };
        CHECK(test::check_op_gradient(fwd_slice, {a, b}, b, rng).max_rel_err <= kTol);

        auto fwd_bias = [&] { return bias_channel(a, bias); };
        CHECK(test::check_op_gradient(fwd_bias, {a, bias}, bias, rng).max_rel_err <= kTol);

        auto fwd_semb = [&] { return bias_sample_channel(a, semb); };
        CHECK(test::check_op_gradient(fwd_semb, {a, semb}, semb, rng).max_rel_err <= kTol);

        auto s = leaf<double>({1}, "s");
        s->data[0] = rng.normal();
        auto fwd_scale = [&] { return scale_by(a, s); };
        CHECK(test::check_op_gradient(fwd_scale, {a, s}, s, rng).max_rel_err <= kTol);
        CHECK(test::check_op_gradient(fwd_scale, {a, s}, a, rng).max_rel_err <= kTol);
    }
}

TEST_CASE("gradcheck attention building blocks", "[grad]") {
    Rng rng(1010);
    for (int t = 0; t < kShapes; ++t) {
        int n = 1 + t % 2, a = 2 + static_cast<int>(rng.uniform_int(0, 2)),
            b = 2 + static_cast<int>(rng.uniform_int(0, 2)), c = 2 + static_cast<int>(rng.uniform_int(0, 2));
        auto x = leaf<double>({n, a, b}, "x");
        auto y = leaf<double>({n, b, c}, "y");
        test::fill_random(x, rng);
        test::fill_random(y, rng);

        auto fwd_bmm = [&] { return bmm(x, y); };
        CHECK(test::check_op_gradient(fwd_bmm, {x, y}, x, rng).max_rel_err <= kTol);
        CHECK(test::check_op_gradient(fwd_bmm, {x, y}, y, rng).max_rel_err <= kTol);

        auto fwd_tr = [&] { return transpose_12(x); };
        CHECK(test::check_op_gradient(fwd_tr, {x}, x, rng).max_rel_err <= kTol);

        auto fwd_sm = [&] { return softmax_last(x); };
        CHECK(test::check_op_gradient(fwd_sm, {x}, x, rng).max_rel_err <= kTol);

        auto fwd_rs = [&] { return reshape(x, {n * a, 1, b}); };
        CHECK(test::check_op_gradient(fwd_rs, {x}, x, rng).max_rel_err <= kTol);
    }
}

TEST_CASE("gradient accumulates across fan-out in a composite net", "[grad]") {
    // Residual-style wiring: y = gn(conv(x)) + x, checked end to end.
    Rng rng(1009);
    auto x = leaf<double>({1, 2, 6, 6}, "x");
    auto k = leaf<double>({2, 2, 3, 3}, "k");
    auto g = leaf<double>({2}, "g");
    auto b = leaf<double>({2}, "b");
    test::fill_random(x, rng);
    test::fill_random(k, rng, 0.5);
    test::fill_random(g, rng);
    test::fill_random(b, rng);
    auto fwd = [&] { return add(group_norm(conv2d(x, k, 1, 1, 1), 1, g, b), x); };
    CHECK(test::check_op_gradient(fwd, {x, k, g, b}, x, rng).max_rel_err <= kTol);
    CHECK(test::check_op_gradient(fwd, {x, k, g, b}, k, rng).max_rel_err <= kTol);
}
