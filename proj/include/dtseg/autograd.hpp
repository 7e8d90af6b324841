#pragma once

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "dtseg/tensor.hpp"

// Minimal reverse-mode automatic differentiation over NCHW tensors.
//
// A Var is a shared node holding a value, an optional gradient, and a closure
// that pushes its gradient to its parents. Graphs are built eagerly by the op
// functions below and released when the last Var referencing them goes away.
namespace dtseg::ag {

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
    Tensor value;
    Tensor grad;  // allocated on first use
    bool requires_grad = false;
    std::vector<Var> parents;
    std::function<void(Node&)> backward_fn;

    Tensor& grad_buffer();
    void zero_grad();
};

Var leaf(Tensor value, bool requires_grad);
inline Var constant(Tensor value) { return leaf(std::move(value), false); }

// Seeds d(root)/d(root) = 1 for a single-element root and propagates.
void backward(const Var& root);

bool grad_enabled();

// Disables graph construction in scope (inference / frozen feature extraction).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

// weight [out, in, k, k]; bias [1, out, 1, 1] or nullptr.
Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad);
Var add(const Var& a, const Var& b);
Var scale(const Var& x, double s);
// x [N,C,H,W] + e [N,C,1,1] broadcast over space.
Var add_channel_bias(const Var& x, const Var& e);
Var silu(const Var& x);
Var relu(const Var& x);
Var concat_channels(const std::vector<Var>& parts);
Var upsample_bilinear(const Var& x, int out_h, int out_w);
Var upsample_nearest(const Var& x, int factor);
Var avg_pool(const Var& x, int factor);
// Normalizes over channels independently at every pixel; gamma/beta [1,C,1,1].
Var layer_norm_channels(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
Var group_norm(const Var& x, int groups, const Var& gamma, const Var& beta, double eps = 1e-5);
// Multi-head scaled dot-product self-attention. q, k, v: [N, d, 1, L].
Var attention(const Var& q, const Var& k, const Var& v, int heads);
// Per-pixel softmax across channels.
Var softmax_channels(const Var& x);
// Multiclass soft Dice over the whole batch; labels hold N·H·W class ids.
Var dice_loss(const Var& probs, std::span<const int> labels, double smooth);
Var mse_loss(const Var& pred, const Tensor& target);
Var reshape(const Var& x, Shape shape);

}  // namespace dtseg::ag
