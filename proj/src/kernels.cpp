#include "dtseg/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "dtseg/errors.hpp"

namespace dtseg::kernels {

namespace {

constexpr int kMR = 4;
constexpr int kNR = 16;

// Register-tiled MR×NR block of C from a packed, zero-padded K×NR panel of
// B. Only the first `nr` columns are written.
template <int MR>
inline void micro_kernel(int K, int nr, const double* A, int lda, const double* panel, double* C, int ldc,
                         bool accumulate) {
    double acc[MR][kNR] = {};
    for (int k = 0; k < K; ++k) {
        const double* b = panel + size_t(k) * kNR;
        for (int r = 0; r < MR; ++r) {
            const double a = A[size_t(r) * lda + k];
#pragma omp simd
            for (int j = 0; j < kNR; ++j) acc[r][j] += a * b[j];
        }
    }
    for (int r = 0; r < MR; ++r)
        for (int j = 0; j < nr; ++j) {
            double& dst = C[size_t(r) * ldc + j];
            dst = accumulate ? dst + acc[r][j] : acc[r][j];
        }
}

// out[r][s] = Σ_k A[r·K + k] · B[s·K + k] for r, s < 4.
inline void dot_block4(int K, const double* A, const double* B, double out[4][4]) {
    const double *a0 = A, *a1 = A + K, *a2 = A + 2 * size_t(K), *a3 = A + 3 * size_t(K);
    const double *b0 = B, *b1 = B + K, *b2 = B + 2 * size_t(K), *b3 = B + 3 * size_t(K);
    double s00 = 0, s01 = 0, s02 = 0, s03 = 0, s10 = 0, s11 = 0, s12 = 0, s13 = 0;
    double s20 = 0, s21 = 0, s22 = 0, s23 = 0, s30 = 0, s31 = 0, s32 = 0, s33 = 0;
#pragma omp simd reduction(+ : s00, s01, s02, s03, s10, s11, s12, s13, s20, s21, s22, s23, s30, s31, s32, s33)
    for (int k = 0; k < K; ++k) {
        const double x0 = a0[k], x1 = a1[k], x2 = a2[k], x3 = a3[k];
        const double y0 = b0[k], y1 = b1[k], y2 = b2[k], y3 = b3[k];
        s00 += x0 * y0, s01 += x0 * y1, s02 += x0 * y2, s03 += x0 * y3;
        s10 += x1 * y0, s11 += x1 * y1, s12 += x1 * y2, s13 += x1 * y3;
        s20 += x2 * y0, s21 += x2 * y1, s22 += x2 * y2, s23 += x2 * y3;
        s30 += x3 * y0, s31 += x3 * y1, s32 += x3 * y2, s33 += x3 * y3;
    }
    const double t[4][4] = {{s00, s01, s02, s03}, {s10, s11, s12, s13}, {s20, s21, s22, s23}, {s30, s31, s32, s33}};
    for (int r = 0; r < 4; ++r)
        for (int s = 0; s < 4; ++s) out[r][s] = t[r][s];
}

void check_sizes(const char* who, size_t a, size_t need_a, size_t b, size_t need_b, size_t c, size_t need_c) {
    if (a < need_a || b < need_b || c < need_c) throw ShapeError(std::string(who) + ": buffer too small");
}

}  // namespace

std::span<double> scratch(size_t n, int slot) {
    thread_local std::vector<double> buffers[4];
    auto& b = buffers[slot];
    if (b.size() < n) b.resize(n);
    return {b.data(), n};
}

void gemm(int M, int N, int K, std::span<const double> A, std::span<const double> B, std::span<double> C,
          bool accumulate) {
    check_sizes("gemm", A.size(), size_t(M) * K, B.size(), size_t(K) * N, C.size(), size_t(M) * N);
    if (M == 0 || N == 0) return;
    if (K == 0) {
        if (!accumulate) std::fill_n(C.data(), size_t(M) * N, 0.0);
        return;
    }
    const int row_blocks = (M + kMR - 1) / kMR;
    const int col_blocks = (N + kNR - 1) / kNR;
    const double* a = A.data();
    const double* b = B.data();
    double* c = C.data();
    // Each column panel of B is packed contiguously first: rows of B are N
    // apart, and power-of-two N would otherwise alias in cache.
#pragma omp parallel
    {
        std::vector<double> panel(size_t(K) * kNR);
#pragma omp for schedule(static)
        for (int jb = 0; jb < col_blocks; ++jb) {
            const int j0 = jb * kNR;
            const int nr = std::min(kNR, N - j0);
            for (int k = 0; k < K; ++k) {
                const double* src = b + size_t(k) * N + j0;
                double* dst = panel.data() + size_t(k) * kNR;
                std::copy_n(src, nr, dst);
                std::fill(dst + nr, dst + kNR, 0.0);
            }
            for (int ib = 0; ib < row_blocks; ++ib) {
                const int i0 = ib * kMR;
                const int mr = std::min(kMR, M - i0);
                const double* ap = a + size_t(i0) * K;
                double* cp = c + size_t(i0) * N + j0;
                if (mr == kMR) {
                    micro_kernel<kMR>(K, nr, ap, K, panel.data(), cp, N, accumulate);
                } else {
                    for (int r = 0; r < mr; ++r)
                        micro_kernel<1>(K, nr, ap + size_t(r) * K, K, panel.data(), cp + size_t(r) * N, N,
                                        accumulate);
                }
            }
        }
    }
}

void transpose(int rows, int cols, std::span<const double> src, std::span<double> dst) {
    if (src.size() < size_t(rows) * cols || dst.size() < size_t(rows) * cols)
        throw ShapeError("transpose: buffer too small");
    constexpr int kTile = 32;
#pragma omp parallel for schedule(static)
    for (int cb = 0; cb < cols; cb += kTile)
        for (int rb = 0; rb < rows; rb += kTile)
            for (int c = cb; c < std::min(cols, cb + kTile); ++c)
                for (int r = rb; r < std::min(rows, rb + kTile); ++r)
                    dst[size_t(c) * rows + r] = src[size_t(r) * cols + c];
}

void gemm_tn(int M, int N, int K, std::span<const double> A, std::span<const double> B, std::span<double> C,
             bool accumulate) {
    std::span<double> at = scratch(size_t(M) * K, 3);
    transpose(K, M, A, at);
    gemm(M, N, K, at, B, C, accumulate);
}

void gemm_nt(int M, int N, int K, std::span<const double> A, std::span<const double> B, std::span<double> C,
             bool accumulate) {
    check_sizes("gemm_nt", A.size(), size_t(M) * K, B.size(), size_t(N) * K, C.size(), size_t(M) * N);
    if (M == 0 || N == 0) return;
    // Both operands are row-major along K, so each output is a dot product;
    // 4×4 output blocks reuse every loaded element four times.
    const int row_blocks = (M + 3) / 4;
    const int col_blocks = (N + 3) / 4;
    const double* a = A.data();
    const double* b = B.data();
    double* c = C.data();
#pragma omp parallel for collapse(2) schedule(static)
    for (int ib = 0; ib < row_blocks; ++ib) {
        for (int jb = 0; jb < col_blocks; ++jb) {
            const int i0 = ib * 4, j0 = jb * 4;
            double out[4][4];
            if (i0 + 4 <= M && j0 + 4 <= N) {
                dot_block4(K, a + size_t(i0) * K, b + size_t(j0) * K, out);
            } else {
                for (int r = 0; r < std::min(4, M - i0); ++r)
                    for (int s = 0; s < std::min(4, N - j0); ++s) {
                        const double* x = a + size_t(i0 + r) * K;
                        const double* y = b + size_t(j0 + s) * K;
                        double acc = 0.0;
#pragma omp simd reduction(+ : acc)
                        for (int k = 0; k < K; ++k) acc += x[k] * y[k];
                        out[r][s] = acc;
                    }
            }
            for (int r = 0; r < std::min(4, M - i0); ++r)
                for (int s = 0; s < std::min(4, N - j0); ++s) {
                    double& dst = c[size_t(i0 + r) * N + j0 + s];
                    dst = accumulate ? dst + out[r][s] : out[r][s];
                }
        }
    }
}

namespace {

// Output columns ox whose input column ox·stride − pad + kx lies inside [0, in_w).
inline void valid_range(int ow, int in_w, int stride, int pad, int kx, int& lo, int& hi) {
    lo = 0;
    while (lo < ow && lo * stride - pad + kx < 0) ++lo;
    hi = ow;
    while (hi > lo && (hi - 1) * stride - pad + kx >= in_w) --hi;
}

}  // namespace

void im2col(const ConvGeometry& g, std::span<const double> image, std::span<double> col) {
    const int oh = g.out_h(), ow = g.out_w(), k = g.kernel, st = g.stride;
    const size_t cols = size_t(oh) * ow;
    if (col.size() < size_t(g.patch()) * cols) throw ShapeError("im2col: buffer too small");
#pragma omp parallel for schedule(static)
    for (int row = 0; row < g.patch(); ++row) {
        const int c = row / (k * k);
        const int ky = (row / k) % k;
        const int kx = row % k;
        int lo, hi;
        valid_range(ow, g.in_w, st, g.pad, kx, lo, hi);
        const double* src = image.data() + size_t(c) * g.in_h * g.in_w;
        double* dst = col.data() + size_t(row) * cols;
        for (int oy = 0; oy < oh; ++oy) {
            const int iy = oy * st - g.pad + ky;
            double* d = dst + size_t(oy) * ow;
            if (iy < 0 || iy >= g.in_h) {
                std::fill_n(d, ow, 0.0);
                continue;
            }
            const double* s = src + size_t(iy) * g.in_w;
            const int off = kx - g.pad;
            std::fill_n(d, lo, 0.0);
            if (st == 1)
                std::copy(s + lo + off, s + hi + off, d + lo);
            else
                for (int ox = lo; ox < hi; ++ox) d[ox] = s[ox * st + off];
            std::fill(d + hi, d + ow, 0.0);
        }
    }
}

void col2im(const ConvGeometry& g, std::span<const double> col, std::span<double> image) {
    const int oh = g.out_h(), ow = g.out_w(), k = g.kernel, st = g.stride;
    const size_t cols = size_t(oh) * ow;
    // Parallel over input channels: each channel's rows are owned by one thread.
#pragma omp parallel for schedule(static)
    for (int c = 0; c < g.in_c; ++c) {
        double* dst = image.data() + size_t(c) * g.in_h * g.in_w;
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
                int lo, hi;
                valid_range(ow, g.in_w, st, g.pad, kx, lo, hi);
                const double* src = col.data() + (size_t(c) * k * k + ky * k + kx) * cols;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * st - g.pad + ky;
                    if (iy < 0 || iy >= g.in_h) continue;
                    double* d = dst + size_t(iy) * g.in_w;
                    const double* s = src + size_t(oy) * ow;
                    const int off = kx - g.pad;
                    if (st == 1) {
#pragma omp simd
                        for (int ox = lo; ox < hi; ++ox) d[ox + off] += s[ox];
                    } else {
                        for (int ox = lo; ox < hi; ++ox) d[ox * st + off] += s[ox];
                    }
                }
            }
    }
}

void conv2d(const ConvGeometry& g, int out_c, std::span<const double> image, std::span<const double> weight,
            std::span<const double> bias, std::span<double> out) {
    const int cols = g.out_h() * g.out_w();
    const bool pointwise = g.kernel == 1 && g.stride == 1 && g.pad == 0;
    if (pointwise) {
        gemm(out_c, cols, g.in_c, weight, image, out);
    } else {
        std::span<double> col = scratch(size_t(g.patch()) * cols);
        im2col(g, image, col);
        gemm(out_c, cols, g.patch(), weight, col, out);
    }
    if (!bias.empty()) {
#pragma omp parallel for schedule(static)
        for (int o = 0; o < out_c; ++o) {
            double* row = out.data() + size_t(o) * cols;
            const double b = bias[o];
            for (int i = 0; i < cols; ++i) row[i] += b;
        }
    }
}

namespace {

struct Tap {
    int i0, i1;
    double frac;
};

std::vector<Tap> bilinear_taps(int in, int out) {
    std::vector<Tap> taps(out);
    const double scale = double(in) / double(out);
    for (int o = 0; o < out; ++o) {
        double src = (o + 0.5) * scale - 0.5;
        if (src < 0.0) src = 0.0;
        int i0 = int(std::floor(src));
        if (i0 > in - 1) i0 = in - 1;
        const int i1 = std::min(i0 + 1, in - 1);
        taps[o] = {i0, i1, src - i0};
    }
    return taps;
}

}  // namespace

void upsample_bilinear(int channels, int in_h, int in_w, int out_h, int out_w, std::span<const double> src,
                       std::span<double> dst) {
    const auto ty = bilinear_taps(in_h, out_h);
    const auto tx = bilinear_taps(in_w, out_w);
#pragma omp parallel for schedule(static)
    for (int c = 0; c < channels; ++c) {
        const double* s = src.data() + size_t(c) * in_h * in_w;
        double* d = dst.data() + size_t(c) * out_h * out_w;
        for (int y = 0; y < out_h; ++y) {
            const Tap& a = ty[y];
            const double* r0 = s + size_t(a.i0) * in_w;
            const double* r1 = s + size_t(a.i1) * in_w;
            for (int x = 0; x < out_w; ++x) {
                const Tap& b = tx[x];
                const double top = r0[b.i0] + (r0[b.i1] - r0[b.i0]) * b.frac;
                const double bot = r1[b.i0] + (r1[b.i1] - r1[b.i0]) * b.frac;
                d[size_t(y) * out_w + x] = top + (bot - top) * a.frac;
            }
        }
    }
}

void upsample_bilinear_backward(int channels, int in_h, int in_w, int out_h, int out_w,
                                std::span<const double> grad_dst, std::span<double> grad_src) {
    const auto ty = bilinear_taps(in_h, out_h);
    const auto tx = bilinear_taps(in_w, out_w);
#pragma omp parallel for schedule(static)
    for (int c = 0; c < channels; ++c) {
        const double* g = grad_dst.data() + size_t(c) * out_h * out_w;
        double* s = grad_src.data() + size_t(c) * in_h * in_w;
        for (int y = 0; y < out_h; ++y) {
            const Tap& a = ty[y];
            for (int x = 0; x < out_w; ++x) {
                const Tap& b = tx[x];
                const double v = g[size_t(y) * out_w + x];
                const double top = v * (1.0 - a.frac), bot = v * a.frac;
                s[size_t(a.i0) * in_w + b.i0] += top * (1.0 - b.frac);
                s[size_t(a.i0) * in_w + b.i1] += top * b.frac;
                s[size_t(a.i1) * in_w + b.i0] += bot * (1.0 - b.frac);
                s[size_t(a.i1) * in_w + b.i1] += bot * b.frac;
            }
        }
    }
}

void softmax_rows(int rows, int cols, std::span<double> data) {
#pragma omp parallel for schedule(static)
    for (int r = 0; r < rows; ++r) {
        double* row = data.data() + size_t(r) * cols;
        double mx = row[0];
        for (int j = 1; j < cols; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (int j = 0; j < cols; ++j) {
            row[j] = std::exp(row[j] - mx);
            sum += row[j];
        }
        const double inv = 1.0 / sum;
        for (int j = 0; j < cols; ++j) row[j] *= inv;
    }
}

namespace reference {

void gemm(int M, int N, int K, std::span<const double> A, std::span<const double> B, std::span<double> C,
          bool accumulate) {
    for (int i = 0; i < M; ++i)
        for (int j = 0; j < N; ++j) {
            double s = accumulate ? C[size_t(i) * N + j] : 0.0;
            for (int k = 0; k < K; ++k) s += A[size_t(i) * K + k] * B[size_t(k) * N + j];
            C[size_t(i) * N + j] = s;
        }
}

void conv2d(const ConvGeometry& g, int out_c, std::span<const double> image, std::span<const double> weight,
            std::span<const double> bias, std::span<double> out) {
    const int oh = g.out_h(), ow = g.out_w(), k = g.kernel;
    for (int o = 0; o < out_c; ++o)
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
                double s = bias.empty() ? 0.0 : bias[o];
                for (int c = 0; c < g.in_c; ++c)
                    for (int ky = 0; ky < k; ++ky)
                        for (int kx = 0; kx < k; ++kx) {
                            const int iy = oy * g.stride - g.pad + ky;
                            const int ix = ox * g.stride - g.pad + kx;
                            if (iy < 0 || iy >= g.in_h || ix < 0 || ix >= g.in_w) continue;
                            s += weight[((size_t(o) * g.in_c + c) * k + ky) * k + kx] *
                                 image[(size_t(c) * g.in_h + iy) * g.in_w + ix];
                        }
                out[(size_t(o) * oh + oy) * ow + ox] = s;
            }
}

void upsample_bilinear(int channels, int in_h, int in_w, int out_h, int out_w, std::span<const double> src,
                       std::span<double> dst) {
    auto coord = [](int o, int in, int out) {
        const double s = std::max(0.0, (o + 0.5) * double(in) / double(out) - 0.5);
        return s;
    };
    for (int c = 0; c < channels; ++c)
        for (int y = 0; y < out_h; ++y)
            for (int x = 0; x < out_w; ++x) {
                const double sy = coord(y, in_h, out_h), sx = coord(x, in_w, out_w);
                const int y0 = std::min(int(sy), in_h - 1), x0 = std::min(int(sx), in_w - 1);
                const int y1 = std::min(y0 + 1, in_h - 1), x1 = std::min(x0 + 1, in_w - 1);
                const double fy = sy - y0, fx = sx - x0;
                auto at = [&](int yy, int xx) { return src[(size_t(c) * in_h + yy) * in_w + xx]; };
                dst[(size_t(c) * out_h + y) * out_w + x] = (1 - fy) * (1 - fx) * at(y0, x0) +
                                                           (1 - fy) * fx * at(y0, x1) + fy * (1 - fx) * at(y1, x0) +
                                                           fy * fx * at(y1, x1);
            }
}

void softmax_rows(int rows, int cols, std::span<double> data) {
    for (int r = 0; r < rows; ++r) {
        double* row = data.data() + size_t(r) * cols;
        const double mx = *std::max_element(row, row + cols);
        double sum = 0.0;
        for (int j = 0; j < cols; ++j) sum += std::exp(row[j] - mx);
        for (int j = 0; j < cols; ++j) row[j] = std::exp(row[j] - mx) / sum;
    }
}

}  // namespace reference

}  // namespace dtseg::kernels
