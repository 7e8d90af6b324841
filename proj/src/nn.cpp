#include "dtseg/nn.hpp"

#include <cmath>
#include <cstring>

#include "dtseg/errors.hpp"
#include "dtseg/hashing.hpp"

namespace dtseg {

uint64_t mix_seed(uint64_t seed, uint64_t stream) {
    uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

Tensor Rng::normal_tensor(Shape shape) {
    Tensor t(shape);
    for (auto& v : t.vec()) v = normal();
    return t;
}

ParamSet::ParamSet(const ParamSet& other) : names_(other.names_) {
    vars_.reserve(other.vars_.size());
    for (const auto& v : other.vars_) vars_.push_back(ag::leaf(v->value, v->requires_grad));
}

ParamSet& ParamSet::operator=(const ParamSet& other) {
    if (this != &other) {
        ParamSet copy(other);
        *this = std::move(copy);
    }
    return *this;
}

size_t ParamSet::add(std::string name, Tensor init) {
    for (const auto& n : names_)
        if (n == name) throw ArgumentError("duplicate parameter name " + name);
    names_.push_back(std::move(name));
    vars_.push_back(ag::leaf(std::move(init), true));
    return vars_.size() - 1;
}

size_t ParamSet::count() const {
    size_t total = 0;
    for (const auto& v : vars_) total += v->value.numel();
    return total;
}

size_t ParamSet::find(const std::string& name) const {
    for (size_t i = 0; i < names_.size(); ++i)
        if (names_[i] == name) return i;
    throw ArgumentError("no parameter named " + name);
}

void ParamSet::set_trainable(bool trainable) {
    for (auto& v : vars_) v->requires_grad = trainable;
}

void ParamSet::zero_grad() {
    for (auto& v : vars_) v->zero_grad();
}

std::string ParamSet::checksum() const {
    Sha256 h;
    for (size_t i = 0; i < vars_.size(); ++i) {
        h.update(names_[i]);
        const Shape s = vars_[i]->value.shape();
        const int dims[4] = {s.n, s.c, s.h, s.w};
        h.update(dims, sizeof dims);
        h.update(vars_[i]->value.data(), vars_[i]->value.numel() * sizeof(double));
    }
    return h.hex();
}

void assign_params(ParamSet& target, const ParamSet& source) {
    if (target.size() != source.size())
        throw ShapeError("parameter count mismatch: " + std::to_string(target.size()) + " vs " +
                         std::to_string(source.size()));
    for (size_t i = 0; i < target.size(); ++i) {
        if (target.name(i) != source.name(i))
            throw ShapeError("parameter name mismatch: " + target.name(i) + " vs " + source.name(i));
        if (!(target[i]->value.shape() == source[i]->value.shape()))
            throw ShapeError("parameter " + target.name(i) + " shape " + target[i]->value.shape().str() + " vs " +
                             source[i]->value.shape().str());
        target[i]->value = source[i]->value;
    }
}

Conv2d Conv2d::create(ParamSet& ps, const std::string& name, int in, int out, int kernel, int stride, int pad,
                      Rng& rng, Init init) {
    if (in < 1 || out < 1 || kernel < 1 || stride < 1 || pad < 0)
        throw ArgumentError("conv " + name + ": invalid geometry");
    Conv2d c;
    c.in = in;
    c.out = out;
    c.kernel = kernel;
    c.stride = stride;
    c.pad = pad;
    Tensor w(out, in, kernel, kernel);
    Tensor b(1, out, 1, 1);
    if (init == Init::uniform) {
        const double bound = 1.0 / std::sqrt(double(in * kernel * kernel));
        for (auto& v : w.vec()) v = rng.uniform(-bound, bound);
        for (auto& v : b.vec()) v = rng.uniform(-bound, bound);
    }
    c.weight = ps.add(name + ".weight", std::move(w));
    c.bias = ps.add(name + ".bias", std::move(b));
    return c;
}

ag::Var Conv2d::operator()(const ParamSet& ps, const ag::Var& x) const {
    return ag::conv2d(x, ps[weight], ps[bias], stride, pad);
}

GroupNorm GroupNorm::create(ParamSet& ps, const std::string& name, int channels, int groups) {
    GroupNorm g;
    g.groups = groups;
    g.gamma = ps.add(name + ".gamma", Tensor(1, channels, 1, 1, 1.0));
    g.beta = ps.add(name + ".beta", Tensor(1, channels, 1, 1, 0.0));
    return g;
}

ag::Var GroupNorm::operator()(const ParamSet& ps, const ag::Var& x) const {
    return ag::group_norm(x, groups, ps[gamma], ps[beta]);
}

ChannelLayerNorm ChannelLayerNorm::create(ParamSet& ps, const std::string& name, int channels) {
    ChannelLayerNorm l;
    l.gamma = ps.add(name + ".gamma", Tensor(1, channels, 1, 1, 1.0));
    l.beta = ps.add(name + ".beta", Tensor(1, channels, 1, 1, 0.0));
    return l;
}

ag::Var ChannelLayerNorm::operator()(const ParamSet& ps, const ag::Var& x) const {
    return ag::layer_norm_channels(x, ps[gamma], ps[beta]);
}

RMSprop::RMSprop(ParamSet& params, double lr, double decay, double eps)
    : params_(params), lr_(lr), decay_(decay), eps_(eps) {
    if (!(lr > 0.0)) throw ArgumentError("optimizer learning rate must be > 0");
    sq_.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) sq_[i].assign(params[i]->value.numel(), 0.0);
}

void RMSprop::step() {
    ++t_;
    const double correction = 1.0 - std::pow(decay_, double(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
        const ag::Var& p = params_[i];
        if (!p->requires_grad || p->grad.empty()) continue;
        auto& sq = sq_[i];
        double* w = p->value.data();
        const double* g = p->grad.data();
        for (size_t j = 0; j < sq.size(); ++j) {
            sq[j] = decay_ * sq[j] + (1.0 - decay_) * g[j] * g[j];
            w[j] -= lr_ * g[j] / (std::sqrt(sq[j] / correction) + eps_);
        }
        p->zero_grad();
    }
}

void check_loss(double loss, int step, const std::string& what) {
    if (!std::isfinite(loss))
        throw TrainingError(what + ": non-finite loss at step " + std::to_string(step));
}

}  // namespace dtseg
