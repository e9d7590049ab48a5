#include <doctest.h>

#include <cmath>

#include "tadp/error.hpp"
#include "tadp/rng.hpp"
#include "tadp/tensor.hpp"

using namespace tadp;
using namespace tadp::nn;

TEST_CASE("tensor shape and indexing") {
    Tensor t({2, 3});
    CHECK(t.numel() == 6);
    CHECK(t.ndim() == 2);
    t.at(1, 2) = 5.0f;
    CHECK(t[5] == 5.0f);
    Tensor r = t.reshaped({3, 2});
    CHECK(r.at(2, 1) == 5.0f);
    CHECK_THROWS_AS(t.reshaped({4, 2}), ValidationError);
    CHECK_THROWS_AS(Tensor({2, -1}), ValidationError);
}

TEST_CASE("tensor fill helpers") {
    Tensor z = Tensor::zeros({2, 2});
    for (int i = 0; i < 4; ++i) CHECK(z[i] == 0.0f);
    Tensor f = Tensor::full({3}, 2.5f);
    CHECK(f[2] == 2.5f);
}

TEST_CASE("matmul known values") {
    Tensor a({2, 2});
    a.at(0, 0) = 1; a.at(0, 1) = 2; a.at(1, 0) = 3; a.at(1, 1) = 4;
    Tensor b({2, 2});
    b.at(0, 0) = 5; b.at(0, 1) = 6; b.at(1, 0) = 7; b.at(1, 1) = 8;
    Tensor c = matmul(a, b);
    CHECK(c.at(0, 0) == 19.0f);
    CHECK(c.at(0, 1) == 22.0f);
    CHECK(c.at(1, 0) == 43.0f);
    CHECK(c.at(1, 1) == 50.0f);
    CHECK_THROWS_AS(matmul(a, Tensor({3, 2})), ValidationError);
}

TEST_CASE("transpose2d") {
    Tensor a({2, 3});
    for (int i = 0; i < 6; ++i) a[i] = static_cast<float>(i);
    Tensor t = transpose2d(a);
    CHECK(t.dim(0) == 3);
    CHECK(t.dim(1) == 2);
    CHECK(t.at(2, 1) == a.at(1, 2));
}

TEST_CASE("bilinear resize matches half-pixel convention") {
    // 1x1x2 row [1,2] upsampled to width 4
    Tensor x({1, 1, 2});
    x[0] = 1.0f;
    x[1] = 2.0f;
    Tensor y = resize_bilinear(x, 1, 4);
    CHECK(y[0] == doctest::Approx(1.0f));
    CHECK(y[1] == doctest::Approx(1.25f));
    CHECK(y[2] == doctest::Approx(1.75f));
    CHECK(y[3] == doctest::Approx(2.0f));
}

TEST_CASE("bilinear resize keeps constant fields constant") {
    Tensor x = Tensor::full({2, 3, 5}, 0.7f);
    Tensor up = resize_bilinear(x, 7, 11);
    for (std::int64_t i = 0; i < up.numel(); ++i) CHECK(up[i] == doctest::Approx(0.7f));
    Tensor down = resize_bilinear(x, 2, 2);
    for (std::int64_t i = 0; i < down.numel(); ++i) CHECK(down[i] == doctest::Approx(0.7f));
}

TEST_CASE("bilinear resize stays inside the input range") {
    Rng rng(7);
    Tensor x({1, 6, 6});
    for (std::int64_t i = 0; i < x.numel(); ++i) x[i] = static_cast<float>(rng.uniform());
    Tensor y = resize_bilinear(x, 13, 9);
    float lo = 1.0f, hi = 0.0f;
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        lo = std::min(lo, x[i]);
        hi = std::max(hi, x[i]);
    }
    for (std::int64_t i = 0; i < y.numel(); ++i) {
        CHECK(y[i] >= lo - 1e-6f);
        CHECK(y[i] <= hi + 1e-6f);
    }
}

TEST_CASE("nearest resize duplicates blocks") {
    Tensor x({1, 2, 2});
    x[0] = 1; x[1] = 2; x[2] = 3; x[3] = 4;
    Tensor y = resize_nearest(x, 4, 4);
    CHECK(y.at(0, 0, 0) == 1.0f);
    CHECK(y.at(0, 0, 3) == 2.0f);
    CHECK(y.at(0, 3, 0) == 3.0f);
    CHECK(y.at(0, 3, 3) == 4.0f);
}

TEST_CASE("conv2d known values") {
    Tensor x({1, 3, 3});
    for (int i = 0; i < 9; ++i) x[i] = static_cast<float>(i + 1);
    Tensor w({1, 1, 2, 2});
    for (int i = 0; i < 4; ++i) w[i] = 1.0f;
    Tensor b({1});
    b[0] = 1.0f;

    Tensor y = conv2d(x, w, b, 1, 0);
    CHECK(y.dim(1) == 2);
    CHECK(y.dim(2) == 2);
    CHECK(y.at(0, 0, 0) == 13.0f);  // 1+2+4+5 + 1
    CHECK(y.at(0, 0, 1) == 17.0f);
    CHECK(y.at(0, 1, 0) == 25.0f);
    CHECK(y.at(0, 1, 1) == 29.0f);

    Tensor w3({1, 1, 3, 3});
    for (int i = 0; i < 9; ++i) w3[i] = 1.0f;
    Tensor yp = conv2d(x, w3, Tensor(), 1, 1);
    CHECK(yp.dim(1) == 3);
    CHECK(yp.at(0, 1, 1) == 45.0f);  // full sum, zero padding outside

    Tensor ys = conv2d(x, w, Tensor(), 2, 0);
    CHECK(ys.dim(1) == 1);
    CHECK(ys.at(0, 0, 0) == 12.0f);
}

TEST_CASE("conv2d validates channel agreement") {
    Tensor x({2, 4, 4});
    Tensor w({1, 3, 3, 3});
    CHECK_THROWS_AS(conv2d(x, w, Tensor(), 1, 1), ValidationError);
}

TEST_CASE("rng determinism and distribution") {
    Rng a(42), b(42);
    for (int i = 0; i < 10; ++i) CHECK(a.next_u64() == b.next_u64());
    Rng c(42), d(43);
    CHECK(c.next_u64() != d.next_u64());

    Rng r(123);
    double acc = 0.0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) acc += r.uniform();
    CHECK(acc / n == doctest::Approx(0.5).epsilon(0.02));

    Rng g(7);
    double mean = 0.0, m2 = 0.0;
    for (int i = 0; i < n; ++i) {
        double v = g.normal();
        mean += v;
        m2 += v * v;
    }
    mean /= n;
    CHECK(mean == doctest::Approx(0.0).scale(1).epsilon(0.05));
    CHECK(m2 / n - mean * mean == doctest::Approx(1.0).epsilon(0.05));

    Rng base(9);
    Rng f1 = base.fork(1), f2 = base.fork(2);
    CHECK(f1.next_u64() != f2.next_u64());

    Rng bounds(5);
    for (int i = 0; i < 100; ++i) {
        int v = bounds.uniform_int(3, 7);
        CHECK(v >= 3);
        CHECK(v <= 7);
    }
}

TEST_CASE("fnv1a64 is stable") {
    CHECK(fnv1a64("") == 0xcbf29ce484222325ull);
    CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cull);
    CHECK(fnv1a64("abc") == fnv1a64("abc"));
    CHECK(fnv1a64("abc") != fnv1a64("abd"));
}
