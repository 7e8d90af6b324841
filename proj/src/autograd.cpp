#include "dtseg/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <unordered_set>

#include "dtseg/errors.hpp"
#include "dtseg/evalkit.hpp"
#include "dtseg/kernels.hpp"

namespace dtseg::ag {

namespace {

thread_local bool g_grad_enabled = true;

Var make_result(Tensor value, std::vector<Var> parents, std::function<void(Node&)> fn) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    if (!g_grad_enabled) return node;
    const bool any = std::any_of(parents.begin(), parents.end(), [](const Var& p) { return p && p->requires_grad; });
    if (!any) return node;
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward_fn = std::move(fn);
    return node;
}

bool wants(const Var& v) { return v && v->requires_grad; }

void require_same(const Shape& a, const Shape& b, const char* who) {
    if (!(a == b)) throw ShapeError(std::string(who) + ": shape " + a.str() + " vs " + b.str());
}

}  // namespace

Tensor& Node::grad_buffer() {
    if (grad.shape() != value.shape() || grad.empty()) grad = Tensor(value.shape());
    return grad;
}

void Node::zero_grad() {
    if (!grad.empty()) grad.fill(0.0);
}

Var leaf(Tensor value, bool requires_grad) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->requires_grad = requires_grad;
    return node;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void backward(const Var& root) {
    if (root->value.numel() != 1) throw ShapeError("backward: root must be a scalar");
    if (!root->requires_grad) return;

    // Iterative post-order DFS gives a topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, size_t>> stack{{root.get(), 0}};
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (p && p->requires_grad && !p->parents.empty() && seen.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    root->grad_buffer().fill(1.0);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
        // Interior gradients are not needed after propagation.
        if (n != root.get()) n->grad = Tensor();
    }
}

Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad) {
    const Shape xs = x->value.shape();
    const Shape ws = weight->value.shape();
    if (ws.c != xs.c || ws.h != ws.w)
        throw ShapeError("conv2d: weight " + ws.str() + " incompatible with input " + xs.str());
    if (bias && bias->value.numel() != size_t(ws.n)) throw ShapeError("conv2d: bias size mismatch");
    const kernels::ConvGeometry g{xs.c, xs.h, xs.w, ws.h, stride, pad};
    const int oh = g.out_h(), ow = g.out_w();
    if (oh <= 0 || ow <= 0) throw ShapeError("conv2d: empty output for input " + xs.str());
    Tensor out(xs.n, ws.n, oh, ow);
    const size_t in_per = size_t(xs.c) * xs.h * xs.w;
    const size_t out_per = size_t(ws.n) * oh * ow;
    std::span<const double> b = bias ? bias->value.span() : std::span<const double>{};
    for (int n = 0; n < xs.n; ++n)
        kernels::conv2d(g, ws.n, {x->value.sample(n), in_per}, weight->value.span(), b,
                        {out.sample(n), out_per});

    return make_result(std::move(out), {x, weight, bias}, [x, weight, bias, g, stride](Node& self) {
        const int out_c = weight->value.n();
        const int P = g.out_h() * g.out_w();
        const int patch = g.patch();
        const bool pointwise = g.kernel == 1 && stride == 1 && g.pad == 0;
        const size_t in_per = size_t(g.in_c) * g.in_h * g.in_w;
        std::span<double> col = kernels::scratch(pointwise ? 0 : size_t(patch) * P, 1);
        std::span<double> dcol = kernels::scratch(pointwise ? 0 : size_t(patch) * P, 2);
        for (int n = 0; n < self.value.n(); ++n) {
            std::span<const double> dy{self.grad.sample(n), size_t(out_c) * P};
            std::span<const double> xin{x->value.sample(n), in_per};
            std::span<const double> cols = xin;
            if (!pointwise && wants(weight)) {
                kernels::im2col(g, xin, col);
                cols = col;
            }
            if (wants(weight)) kernels::gemm_nt(out_c, patch, P, dy, cols, weight->grad_buffer().span(), true);
            if (wants(bias)) {
                double* db = bias->grad_buffer().data();
                for (int o = 0; o < out_c; ++o) {
                    double s = 0.0;
                    for (int i = 0; i < P; ++i) s += dy[size_t(o) * P + i];
                    db[o] += s;
                }
            }
            if (wants(x)) {
                std::span<double> dx{x->grad_buffer().sample(n), in_per};
                if (pointwise) {
                    kernels::gemm_tn(patch, P, out_c, weight->value.span(), dy, dx, true);
                } else {
                    kernels::gemm_tn(patch, P, out_c, weight->value.span(), dy, dcol, false);
                    kernels::col2im(g, dcol, dx);
                }
            }
        }
    });
}

Var add(const Var& a, const Var& b) {
    require_same(a->value.shape(), b->value.shape(), "add");
    Tensor out = a->value;
    for (size_t i = 0; i < out.numel(); ++i) out[i] += b->value[i];
    return make_result(std::move(out), {a, b}, [a, b](Node& self) {
        for (const Var& p : {a, b}) {
            if (!wants(p)) continue;
            Tensor& g = p->grad_buffer();
            for (size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
        }
    });
}

Var scale(const Var& x, double s) {
    Tensor out = x->value;
    for (auto& v : out.vec()) v *= s;
    return make_result(std::move(out), {x}, [x, s](Node& self) {
        Tensor& g = x->grad_buffer();
        for (size_t i = 0; i < g.numel(); ++i) g[i] += s * self.grad[i];
    });
}

Var add_channel_bias(const Var& x, const Var& e) {
    const Shape xs = x->value.shape();
    const Shape es = e->value.shape();
    if (es.n != xs.n || es.c != xs.c || es.h != 1 || es.w != 1)
        throw ShapeError("add_channel_bias: " + xs.str() + " + " + es.str());
    Tensor out = x->value;
    const size_t plane = xs.plane();
    for (int n = 0; n < xs.n; ++n)
        for (int c = 0; c < xs.c; ++c) {
            const double b = e->value[size_t(n) * xs.c + c];
            double* p = out.sample(n) + size_t(c) * plane;
            for (size_t i = 0; i < plane; ++i) p[i] += b;
        }
    return make_result(std::move(out), {x, e}, [x, e, plane](Node& self) {
        if (wants(x)) {
            Tensor& g = x->grad_buffer();
            for (size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
        }
        if (wants(e)) {
            Tensor& g = e->grad_buffer();
            for (size_t nc = 0; nc < g.numel(); ++nc) {
                const double* p = self.grad.data() + nc * plane;
                double s = 0.0;
                for (size_t i = 0; i < plane; ++i) s += p[i];
                g[nc] += s;
            }
        }
    });
}

Var silu(const Var& x) {
    Tensor out = x->value;
    auto sig = std::make_shared<Tensor>(out.shape());
#pragma omp parallel for schedule(static)
    for (size_t i = 0; i < out.numel(); ++i) {
        const double v = out[i];
        const double s = 1.0 / (1.0 + std::exp(-v));
        (*sig)[i] = s;
        out[i] = v * s;
    }
    return make_result(std::move(out), {x}, [x, sig](Node& self) {
        Tensor& g = x->grad_buffer();
#pragma omp parallel for schedule(static)
        for (size_t i = 0; i < g.numel(); ++i) {
            const double s = (*sig)[i];
            g[i] += self.grad[i] * s * (1.0 + x->value[i] * (1.0 - s));
        }
    });
}

Var relu(const Var& x) {
    Tensor out = x->value;
    for (auto& v : out.vec()) v = v > 0.0 ? v : 0.0;
    return make_result(std::move(out), {x}, [x](Node& self) {
        Tensor& g = x->grad_buffer();
        for (size_t i = 0; i < g.numel(); ++i)
            if (x->value[i] > 0.0) g[i] += self.grad[i];
    });
}

Var concat_channels(const std::vector<Var>& parts) {
    std::vector<Tensor> values;
    values.reserve(parts.size());
    for (const auto& p : parts) values.push_back(p->value);
    Tensor out = Tensor::concat_channels(values);
    return make_result(std::move(out), parts, [parts](Node& self) {
        const Shape s = self.value.shape();
        const size_t plane = s.plane();
        for (int n = 0; n < s.n; ++n) {
            const double* src = self.grad.sample(n);
            for (const auto& p : parts) {
                const size_t cnt = size_t(p->value.c()) * plane;
                if (wants(p)) {
                    double* dst = p->grad_buffer().sample(n);
                    for (size_t i = 0; i < cnt; ++i) dst[i] += src[i];
                }
                src += cnt;
            }
        }
    });
}

Var upsample_bilinear(const Var& x, int out_h, int out_w) {
    const Shape s = x->value.shape();
    Tensor out(s.n, s.c, out_h, out_w);
    kernels::upsample_bilinear(s.n * s.c, s.h, s.w, out_h, out_w, x->value.span(), out.span());
    return make_result(std::move(out), {x}, [x, s, out_h, out_w](Node& self) {
        kernels::upsample_bilinear_backward(s.n * s.c, s.h, s.w, out_h, out_w, self.grad.span(),
                                            x->grad_buffer().span());
    });
}

Var upsample_nearest(const Var& x, int factor) {
    const Shape s = x->value.shape();
    if (factor < 1) throw ArgumentError("upsample_nearest: factor must be >= 1");
    const int oh = s.h * factor, ow = s.w * factor;
    Tensor out(s.n, s.c, oh, ow);
    for (int nc = 0; nc < s.n * s.c; ++nc) {
        const double* src = x->value.data() + size_t(nc) * s.plane();
        double* dst = out.data() + size_t(nc) * oh * ow;
        for (int y = 0; y < oh; ++y)
            for (int xx = 0; xx < ow; ++xx) dst[size_t(y) * ow + xx] = src[size_t(y / factor) * s.w + xx / factor];
    }
    return make_result(std::move(out), {x}, [x, s, factor](Node& self) {
        const int oh = s.h * factor, ow = s.w * factor;
        Tensor& g = x->grad_buffer();
        for (int nc = 0; nc < s.n * s.c; ++nc) {
            const double* src = self.grad.data() + size_t(nc) * oh * ow;
            double* dst = g.data() + size_t(nc) * s.plane();
            for (int y = 0; y < oh; ++y)
                for (int xx = 0; xx < ow; ++xx) dst[size_t(y / factor) * s.w + xx / factor] += src[size_t(y) * ow + xx];
        }
    });
}

Var avg_pool(const Var& x, int factor) {
    const Shape s = x->value.shape();
    if (factor < 1 || s.h % factor != 0 || s.w % factor != 0)
        throw ArgumentError("avg_pool: factor " + std::to_string(factor) + " does not divide " + s.str());
    if (factor == 1) return x;
    const int oh = s.h / factor, ow = s.w / factor;
    const double inv = 1.0 / double(factor * factor);
    Tensor out(s.n, s.c, oh, ow);
    for (int nc = 0; nc < s.n * s.c; ++nc) {
        const double* src = x->value.data() + size_t(nc) * s.plane();
        double* dst = out.data() + size_t(nc) * oh * ow;
        for (int y = 0; y < s.h; ++y)
            for (int xx = 0; xx < s.w; ++xx) dst[size_t(y / factor) * ow + xx / factor] += src[size_t(y) * s.w + xx];
        for (int i = 0; i < oh * ow; ++i) dst[i] *= inv;
    }
    return make_result(std::move(out), {x}, [x, s, factor, inv](Node& self) {
        const int oh = s.h / factor, ow = s.w / factor;
        Tensor& g = x->grad_buffer();
        for (int nc = 0; nc < s.n * s.c; ++nc) {
            const double* src = self.grad.data() + size_t(nc) * oh * ow;
            double* dst = g.data() + size_t(nc) * s.plane();
            for (int y = 0; y < s.h; ++y)
                for (int xx = 0; xx < s.w; ++xx) dst[size_t(y) * s.w + xx] += inv * src[size_t(y / factor) * ow + xx / factor];
        }
    });
}

Var layer_norm_channels(const Var& x, const Var& gamma, const Var& beta, double eps) {
    const Shape s = x->value.shape();
    if (gamma->value.numel() != size_t(s.c) || beta->value.numel() != size_t(s.c))
        throw ShapeError("layer_norm_channels: affine size mismatch for " + s.str());
    const size_t plane = s.plane();
    Tensor out(s);
    // Normalized values and inverse std are kept for the backward pass.
    auto xhat = std::make_shared<Tensor>(s);
    auto inv_std = std::make_shared<std::vector<double>>(size_t(s.n) * plane);
#pragma omp parallel for schedule(static)
    for (int n = 0; n < s.n; ++n) {
        const double* src = x->value.sample(n);
        for (size_t p = 0; p < plane; ++p) {
            double mean = 0.0;
            for (int c = 0; c < s.c; ++c) mean += src[c * plane + p];
            mean /= s.c;
            double var = 0.0;
            for (int c = 0; c < s.c; ++c) {
                const double d = src[c * plane + p] - mean;
                var += d * d;
            }
            var /= s.c;
            const double is = 1.0 / std::sqrt(var + eps);
            (*inv_std)[size_t(n) * plane + p] = is;
            for (int c = 0; c < s.c; ++c) {
                const size_t idx = x->value.index(n, c, 0, 0) + p;
                const double h = (src[c * plane + p] - mean) * is;
                (*xhat)[idx] = h;
                out[idx] = gamma->value[c] * h + beta->value[c];
            }
        }
    }
    return make_result(std::move(out), {x, gamma, beta}, [x, gamma, beta, xhat, inv_std, s, plane](Node& self) {
        if (wants(gamma) || wants(beta)) {
            std::vector<double> dg(s.c, 0.0), db(s.c, 0.0);
            for (int n = 0; n < s.n; ++n)
                for (int c = 0; c < s.c; ++c) {
                    const size_t base = self.value.index(n, c, 0, 0);
                    for (size_t p = 0; p < plane; ++p) {
                        dg[c] += self.grad[base + p] * (*xhat)[base + p];
                        db[c] += self.grad[base + p];
                    }
                }
            if (wants(gamma))
                for (int c = 0; c < s.c; ++c) gamma->grad_buffer()[c] += dg[c];
            if (wants(beta))
                for (int c = 0; c < s.c; ++c) beta->grad_buffer()[c] += db[c];
        }
        if (!wants(x)) return;
        Tensor& gx = x->grad_buffer();
#pragma omp parallel for schedule(static)
        for (int n = 0; n < s.n; ++n) {
            for (size_t p = 0; p < plane; ++p) {
                double m1 = 0.0, m2 = 0.0;
                for (int c = 0; c < s.c; ++c) {
                    const size_t idx = self.value.index(n, c, 0, 0) + p;
                    const double dh = self.grad[idx] * gamma->value[c];
                    m1 += dh;
                    m2 += dh * (*xhat)[idx];
                }
                m1 /= s.c;
                m2 /= s.c;
                const double is = (*inv_std)[size_t(n) * plane + p];
                for (int c = 0; c < s.c; ++c) {
                    const size_t idx = self.value.index(n, c, 0, 0) + p;
                    const double dh = self.grad[idx] * gamma->value[c];
                    gx[idx] += is * (dh - m1 - (*xhat)[idx] * m2);
                }
            }
        }
    });
}

Var group_norm(const Var& x, int groups, const Var& gamma, const Var& beta, double eps) {
    const Shape s = x->value.shape();
    if (groups < 1 || s.c % groups != 0)
        throw ArgumentError("group_norm: " + std::to_string(groups) + " groups do not divide " + std::to_string(s.c));
    if (gamma->value.numel() != size_t(s.c) || beta->value.numel() != size_t(s.c))
        throw ShapeError("group_norm: affine size mismatch");
    const int cpg = s.c / groups;
    const size_t plane = s.plane();
    const size_t count = size_t(cpg) * plane;
    Tensor out(s);
    auto xhat = std::make_shared<Tensor>(s);
    auto inv_std = std::make_shared<std::vector<double>>(size_t(s.n) * groups);
#pragma omp parallel for collapse(2) schedule(static)
    for (int n = 0; n < s.n; ++n)
        for (int g = 0; g < groups; ++g) {
            const size_t base = x->value.index(n, g * cpg, 0, 0);
            const double* src = x->value.data() + base;
            double mean = 0.0;
            for (size_t i = 0; i < count; ++i) mean += src[i];
            mean /= double(count);
            double var = 0.0;
            for (size_t i = 0; i < count; ++i) var += (src[i] - mean) * (src[i] - mean);
            var /= double(count);
            const double is = 1.0 / std::sqrt(var + eps);
            (*inv_std)[size_t(n) * groups + g] = is;
            for (size_t i = 0; i < count; ++i) {
                const int c = g * cpg + int(i / plane);
                const double h = (src[i] - mean) * is;
                (*xhat)[base + i] = h;
                out[base + i] = gamma->value[c] * h + beta->value[c];
            }
        }
    return make_result(std::move(out), {x, gamma, beta},
                       [x, gamma, beta, xhat, inv_std, s, groups, cpg, plane, count](Node& self) {
        if (wants(gamma) || wants(beta)) {
            std::vector<double> dg(s.c, 0.0), db(s.c, 0.0);
            for (int n = 0; n < s.n; ++n)
                for (int c = 0; c < s.c; ++c) {
                    const size_t base = self.value.index(n, c, 0, 0);
                    for (size_t p = 0; p < plane; ++p) {
                        dg[c] += self.grad[base + p] * (*xhat)[base + p];
                        db[c] += self.grad[base + p];
                    }
                }
            if (wants(gamma))
                for (int c = 0; c < s.c; ++c) gamma->grad_buffer()[c] += dg[c];
            if (wants(beta))
                for (int c = 0; c < s.c; ++c) beta->grad_buffer()[c] += db[c];
        }
        if (!wants(x)) return;
        Tensor& gx = x->grad_buffer();
#pragma omp parallel for collapse(2) schedule(static)
        for (int n = 0; n < s.n; ++n)
            for (int g = 0; g < groups; ++g) {
                const size_t base = self.value.index(n, g * cpg, 0, 0);
                double m1 = 0.0, m2 = 0.0;
                for (size_t i = 0; i < count; ++i) {
                    const double dh = self.grad[base + i] * gamma->value[g * cpg + int(i / plane)];
                    m1 += dh;
                    m2 += dh * (*xhat)[base + i];
                }
                m1 /= double(count);
                m2 /= double(count);
                const double is = (*inv_std)[size_t(n) * groups + g];
                for (size_t i = 0; i < count; ++i) {
                    const double dh = self.grad[base + i] * gamma->value[g * cpg + int(i / plane)];
                    gx[base + i] += is * (dh - m1 - (*xhat)[base + i] * m2);
                }
            }
    });
}

Var attention(const Var& q, const Var& k, const Var& v, int heads) {
    const Shape s = q->value.shape();
    require_same(s, k->value.shape(), "attention(k)");
    require_same(s, v->value.shape(), "attention(v)");
    if (s.h != 1) throw ShapeError("attention: expects token layout [N, d, 1, L], got " + s.str());
    if (heads < 1 || s.c % heads != 0)
        throw ArgumentError("attention: " + std::to_string(heads) + " heads do not divide width " + std::to_string(s.c));
    const int L = s.w, dh = s.c / heads;
    const double inv_sqrt = 1.0 / std::sqrt(double(dh));
    // Attention probabilities per (sample, head): L×L rows = queries.
    auto probs = std::make_shared<std::vector<double>>(size_t(s.n) * heads * L * L);
    Tensor out(s);
    for (int n = 0; n < s.n; ++n)
        for (int h = 0; h < heads; ++h) {
            const size_t off = q->value.index(n, h * dh, 0, 0);
            std::span<const double> Q{q->value.data() + off, size_t(dh) * L};
            std::span<const double> K{k->value.data() + off, size_t(dh) * L};
            std::span<const double> V{v->value.data() + off, size_t(dh) * L};
            std::span<double> P{probs->data() + (size_t(n) * heads + h) * L * L, size_t(L) * L};
            kernels::gemm_tn(L, L, dh, Q, K, P);  // S = Qᵀ K
            for (auto& val : P) val *= inv_sqrt;
            kernels::softmax_rows(L, L, P);
            kernels::gemm_nt(dh, L, L, V, P, {out.data() + off, size_t(dh) * L});  // O = V Pᵀ
        }
    return make_result(std::move(out), {q, k, v}, [q, k, v, probs, s, heads, L, dh, inv_sqrt](Node& self) {
        std::vector<double> dP(size_t(L) * L), tmp(size_t(dh) * L);
        for (int n = 0; n < s.n; ++n)
            for (int h = 0; h < heads; ++h) {
                const size_t off = q->value.index(n, h * dh, 0, 0);
                const size_t sz = size_t(dh) * L;
                std::span<const double> Q{q->value.data() + off, sz};
                std::span<const double> K{k->value.data() + off, sz};
                std::span<const double> V{v->value.data() + off, sz};
                std::span<const double> dO{self.grad.data() + off, sz};
                std::span<const double> P{probs->data() + (size_t(n) * heads + h) * L * L, size_t(L) * L};
                if (wants(v)) kernels::gemm(dh, L, L, dO, P, {v->grad_buffer().data() + off, sz}, true);  // dV = dO P
                if (!wants(q) && !wants(k)) continue;
                kernels::gemm_tn(L, L, dh, dO, V, dP);  // dP = dOᵀ V
                for (int i = 0; i < L; ++i) {
                    double* row = dP.data() + size_t(i) * L;
                    const double* prow = P.data() + size_t(i) * L;
                    double dot = 0.0;
                    for (int j = 0; j < L; ++j) dot += row[j] * prow[j];
                    for (int j = 0; j < L; ++j) row[j] = prow[j] * (row[j] - dot) * inv_sqrt;
                }
                // dS (scaled) now in dP.
                if (wants(q)) kernels::gemm_nt(dh, L, L, K, dP, {q->grad_buffer().data() + off, sz}, true);  // K dSᵀ
                if (wants(k)) kernels::gemm(dh, L, L, Q, dP, {k->grad_buffer().data() + off, sz}, true);     // Q dS
            }
    });
}

Var softmax_channels(const Var& x) {
    const Shape s = x->value.shape();
    const size_t plane = s.plane();
    Tensor out(s);
    for (int n = 0; n < s.n; ++n) {
        const double* src = x->value.sample(n);
        double* dst = out.sample(n);
        for (size_t p = 0; p < plane; ++p) {
            double mx = src[p];
            for (int c = 1; c < s.c; ++c) mx = std::max(mx, src[c * plane + p]);
            double sum = 0.0;
            for (int c = 0; c < s.c; ++c) {
                const double e = std::exp(src[c * plane + p] - mx);
                dst[c * plane + p] = e;
                sum += e;
            }
            for (int c = 0; c < s.c; ++c) dst[c * plane + p] /= sum;
        }
    }
    return make_result(std::move(out), {x}, [x, s, plane](Node& self) {
        Tensor& g = x->grad_buffer();
        for (int n = 0; n < s.n; ++n) {
            const double* y = self.value.sample(n);
            const double* dy = self.grad.sample(n);
            double* dx = g.sample(n);
            for (size_t p = 0; p < plane; ++p) {
                double dot = 0.0;
                for (int c = 0; c < s.c; ++c) dot += y[c * plane + p] * dy[c * plane + p];
                for (int c = 0; c < s.c; ++c) dx[c * plane + p] += y[c * plane + p] * (dy[c * plane + p] - dot);
            }
        }
    });
}

Var dice_loss(const Var& probs, std::span<const int> labels, double smooth) {
    const double loss = evalkit::dice_loss(probs->value, labels, smooth);
    auto labels_copy = std::make_shared<std::vector<int>>(labels.begin(), labels.end());
    return make_result(Tensor(1, 1, 1, 1, loss), {probs}, [probs, labels_copy, smooth](Node& self) {
        Tensor grad = evalkit::dice_loss_grad(probs->value, *labels_copy, smooth);
        Tensor& g = probs->grad_buffer();
        const double up = self.grad[0];
        for (size_t i = 0; i < g.numel(); ++i) g[i] += up * grad[i];
    });
}

Var mse_loss(const Var& pred, const Tensor& target) {
    require_same(pred->value.shape(), target.shape(), "mse_loss");
    const size_t count = target.numel();
    double s = 0.0;
    for (size_t i = 0; i < count; ++i) {
        const double d = pred->value[i] - target[i];
        s += d * d;
    }
    auto tgt = std::make_shared<Tensor>(target);
    return make_result(Tensor(1, 1, 1, 1, s / double(count)), {pred}, [pred, tgt, count](Node& self) {
        Tensor& g = pred->grad_buffer();
        const double k = 2.0 * self.grad[0] / double(count);
        for (size_t i = 0; i < count; ++i) g[i] += k * (pred->value[i] - (*tgt)[i]);
    });
}

Var reshape(const Var& x, Shape shape) {
    Tensor out = x->value.reshaped(shape);
    return make_result(std::move(out), {x}, [x](Node& self) {
        Tensor& g = x->grad_buffer();
        for (size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    });
}

}  // namespace dtseg::ag
