#pragma once

#include <span>

namespace dtseg::kernels {

// Row-major dense kernels used by every layer. The functions in this namespace
// are blocked and OpenMP-parallel; every parallel loop partitions independent
// output elements, so results do not depend on the thread count.
// `kernels::reference` holds straightforward serial versions used as test
// oracles and benchmark baselines.

// C[M×N] (+)= A[M×K] · B[K×N]
void gemm(int M, int N, int K, std::span<const double> A, std::span<const double> B, std::span<double> C,
          bool accumulate = false);
// C[M×N] (+)= A[K×M]ᵀ · B[K×N]
void gemm_tn(int M, int N, int K, std::span<const double> A, std::span<const double> B, std::span<double> C,
             bool accumulate = false);
// C[M×N] (+)= A[M×K] · B[N×K]ᵀ
void gemm_nt(int M, int N, int K, std::span<const double> A, std::span<const double> B, std::span<double> C,
             bool accumulate = false);

// Reusable per-thread buffer (slots 0..3) with unspecified contents; valid
// until the next call with the same slot on this thread.
std::span<double> scratch(size_t n, int slot = 0);

void transpose(int rows, int cols, std::span<const double> src, std::span<double> dst);

struct ConvGeometry {
    int in_c, in_h, in_w;
    int kernel, stride, pad;
    int out_h() const { return (in_h + 2 * pad - kernel) / stride + 1; }
    int out_w() const { return (in_w + 2 * pad - kernel) / stride + 1; }
    int patch() const { return in_c * kernel * kernel; }
};

// col[(c·k·k) × (out_h·out_w)]
void im2col(const ConvGeometry& g, std::span<const double> image, std::span<double> col);
// Adjoint of im2col; accumulates into image.
void col2im(const ConvGeometry& g, std::span<const double> col, std::span<double> image);

// One sample: out[out_c × out_h·out_w] = weight[out_c × patch] · im2col(image) + bias.
void conv2d(const ConvGeometry& g, int out_c, std::span<const double> image, std::span<const double> weight,
            std::span<const double> bias, std::span<double> out);

// Per-channel bilinear resize (half-pixel centers, edge clamped).
void upsample_bilinear(int channels, int in_h, int in_w, int out_h, int out_w, std::span<const double> src,
                       std::span<double> dst);
// Adjoint of upsample_bilinear; accumulates into grad_src.
void upsample_bilinear_backward(int channels, int in_h, int in_w, int out_h, int out_w,
                                std::span<const double> grad_dst, std::span<double> grad_src);

// In-place numerically stable softmax over each row of a rows×cols matrix.
void softmax_rows(int rows, int cols, std::span<double> data);

namespace reference {

void gemm(int M, int N, int K, std::span<const double> A, std::span<const double> B, std::span<double> C,
          bool accumulate = false);
// Direct 7-loop convolution, no im2col.
void conv2d(const ConvGeometry& g, int out_c, std::span<const double> image, std::span<const double> weight,
            std::span<const double> bias, std::span<double> out);
void upsample_bilinear(int channels, int in_h, int in_w, int out_h, int out_w, std::span<const double> src,
                       std::span<double> dst);
void softmax_rows(int rows, int cols, std::span<double> data);

}  // namespace reference

}  // namespace dtseg::kernels
