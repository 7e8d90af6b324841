#include <doctest.h>

#include <vector>

#include "dtseg/kernels.hpp"
#include "support.hpp"

using namespace dtseg;
namespace k = dtseg::kernels;

namespace {

std::vector<double> rand_vec(size_t n, uint64_t seed) {
    Rng rng(seed);
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(-1, 1);
    return v;
}

double max_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0;
    for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

std::vector<double> transposed(int rows, int cols, const std::vector<double>& src) {
    std::vector<double> dst(src.size());
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) dst[size_t(c) * rows + r] = src[size_t(r) * cols + c];
    return dst;
}

}  // namespace

TEST_CASE("gemm variants agree with the serial reference") {
    struct Dims {
        int m, n, k;
    };
    for (Dims d : {Dims{1, 1, 1}, Dims{7, 33, 5}, Dims{16, 16, 16}, Dims{5, 64, 3}, Dims{33, 17, 70}, Dims{64, 256, 27}}) {
        CAPTURE(d.m);
        CAPTURE(d.n);
        CAPTURE(d.k);
        auto A = rand_vec(size_t(d.m) * d.k, 1);
        auto B = rand_vec(size_t(d.k) * d.n, 2);
        auto C0 = rand_vec(size_t(d.m) * d.n, 3);

        for (bool acc : {false, true}) {
            auto want = C0, got = C0;
            k::reference::gemm(d.m, d.n, d.k, A, B, want, acc);
            k::gemm(d.m, d.n, d.k, A, B, got, acc);
            CHECK(max_diff(want, got) < 1e-12);

            auto got_tn = C0;
            k::gemm_tn(d.m, d.n, d.k, transposed(d.m, d.k, A), B, got_tn, acc);
            CHECK(max_diff(want, got_tn) < 1e-12);

            auto got_nt = C0;
            k::gemm_nt(d.m, d.n, d.k, A, transposed(d.k, d.n, B), got_nt, acc);
            CHECK(max_diff(want, got_nt) < 1e-12);
        }
    }
}

TEST_CASE("im2col convolution matches direct convolution") {
    for (auto [kernel, stride, pad] : {std::tuple{1, 1, 0}, {3, 1, 1}, {3, 2, 1}, {3, 1, 0}, {5, 2, 2}}) {
        k::ConvGeometry g{4, 11, 9, kernel, stride, pad};
        const int out_c = 6;
        auto img = rand_vec(size_t(g.in_c) * g.in_h * g.in_w, 4);
        auto w = rand_vec(size_t(out_c) * g.patch(), 5);
        auto b = rand_vec(out_c, 6);
        std::vector<double> want(size_t(out_c) * g.out_h() * g.out_w()), got(want.size());
        k::reference::conv2d(g, out_c, img, w, b, want);
        k::conv2d(g, out_c, img, w, b, got);
        CHECK(max_diff(want, got) < 1e-12);
    }
}

TEST_CASE("col2im is the adjoint of im2col") {
    k::ConvGeometry g{3, 10, 7, 3, 2, 1};
    auto x = rand_vec(size_t(g.in_c) * g.in_h * g.in_w, 7);
    auto c = rand_vec(size_t(g.patch()) * g.out_h() * g.out_w(), 8);
    std::vector<double> col(c.size()), img(x.size(), 0.0);
    k::im2col(g, x, col);
    k::col2im(g, c, img);
    double lhs = 0, rhs = 0;
    for (size_t i = 0; i < c.size(); ++i) lhs += col[i] * c[i];
    for (size_t i = 0; i < x.size(); ++i) rhs += x[i] * img[i];
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("bilinear resize matches reference and its backward is the adjoint") {
    const int c = 3, ih = 5, iw = 7, oh = 16, ow = 12;
    auto src = rand_vec(size_t(c) * ih * iw, 9);
    std::vector<double> want(size_t(c) * oh * ow), got(want.size());
    k::reference::upsample_bilinear(c, ih, iw, oh, ow, src, want);
    k::upsample_bilinear(c, ih, iw, oh, ow, src, got);
    CHECK(max_diff(want, got) < 1e-12);

    auto gy = rand_vec(got.size(), 10);
    std::vector<double> gx(src.size(), 0.0);
    k::upsample_bilinear_backward(c, ih, iw, oh, ow, gy, gx);
    double lhs = 0, rhs = 0;
    for (size_t i = 0; i < gy.size(); ++i) lhs += got[i] * gy[i];
    for (size_t i = 0; i < src.size(); ++i) rhs += src[i] * gx[i];
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("bilinear resize to the same size is the identity") {
    auto src = rand_vec(2 * 6 * 6, 11);
    std::vector<double> dst(src.size());
    k::upsample_bilinear(2, 6, 6, 6, 6, src, dst);
    CHECK(max_diff(src, dst) == 0.0);
}

TEST_CASE("softmax rows match reference and sum to one") {
    auto a = rand_vec(13 * 7, 12);
    for (auto& x : a) x *= 40;  // exercise the max-shift
    auto b = a;
    k::softmax_rows(13, 7, a);
    k::reference::softmax_rows(13, 7, b);
    CHECK(max_diff(a, b) < 1e-15);
    for (int r = 0; r < 13; ++r) {
        double s = 0;
        for (int c = 0; c < 7; ++c) s += a[size_t(r) * 7 + c];
        CHECK(s == doctest::Approx(1.0).epsilon(1e-14));
    }
}

TEST_CASE("scratch buffers are at least the requested size and reused") {
    auto a = k::scratch(100, 0);
    CHECK(a.size() >= 100);
    auto b = k::scratch(50, 0);
    CHECK(b.data() == a.data());
    auto c = k::scratch(10, 1);
    CHECK(c.data() != a.data());
}
