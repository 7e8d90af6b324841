#include "dtseg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "dtseg/errors.hpp"

namespace dtseg {

std::string Shape::str() const {
    return "[" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," + std::to_string(w) + "]";
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.numel())
        throw ShapeError("tensor data size " + std::to_string(data_.size()) + " does not match shape " + shape_.str());
}

Tensor Tensor::reshaped(Shape shape) const {
    Tensor t = *this;
    t.reshape(shape);
    return t;
}

void Tensor::reshape(Shape shape) {
    if (shape.numel() != data_.size())
        throw ShapeError("cannot reshape " + shape_.str() + " to " + shape.str());
    shape_ = shape;
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor Tensor::slice_batch(int begin, int count) const {
    if (begin < 0 || count < 0 || begin + count > shape_.n)
        throw ArgumentError("batch slice out of range");
    Tensor out(count, shape_.c, shape_.h, shape_.w);
    const size_t per = size_t(shape_.c) * shape_.plane();
    std::copy_n(data_.data() + size_t(begin) * per, size_t(count) * per, out.data());
    return out;
}

Tensor Tensor::gather(std::span<const int> samples) const {
    Tensor out(int(samples.size()), shape_.c, shape_.h, shape_.w);
    const size_t per = size_t(shape_.c) * shape_.plane();
    for (size_t i = 0; i < samples.size(); ++i) {
        if (samples[i] < 0 || samples[i] >= shape_.n) throw ArgumentError("gather index out of range");
        std::copy_n(data_.data() + size_t(samples[i]) * per, per, out.data() + i * per);
    }
    return out;
}

Tensor Tensor::slice_channels(int begin, int count) const {
    if (begin < 0 || count < 0 || begin + count > shape_.c)
        throw ArgumentError("channel slice out of range");
    Tensor out(shape_.n, count, shape_.h, shape_.w);
    const size_t plane = shape_.plane();
    for (int n = 0; n < shape_.n; ++n)
        std::copy_n(sample(n) + size_t(begin) * plane, size_t(count) * plane, out.sample(n));
    return out;
}

Tensor Tensor::stack(std::span<const Tensor> samples) {
    if (samples.empty()) throw ArgumentError("stack of zero tensors");
    Shape s = samples[0].shape();
    int total = 0;
    for (const auto& t : samples) {
        if (t.c() != s.c || t.h() != s.h || t.w() != s.w)
            throw ShapeError("stack: mismatched shapes " + s.str() + " vs " + t.shape().str());
        total += t.n();
    }
    Tensor out(total, s.c, s.h, s.w);
    double* dst = out.data();
    for (const auto& t : samples) dst = std::copy(t.data(), t.data() + t.numel(), dst);
    return out;
}

Tensor Tensor::concat_channels(std::span<const Tensor> parts) {
    if (parts.empty()) throw ArgumentError("concat of zero tensors");
    const Shape s = parts[0].shape();
    int channels = 0;
    for (const auto& p : parts) {
        if (p.n() != s.n || p.h() != s.h || p.w() != s.w)
            throw ShapeError("concat: mismatched shapes " + s.str() + " vs " + p.shape().str());
        channels += p.c();
    }
    Tensor out(s.n, channels, s.h, s.w);
    for (int n = 0; n < s.n; ++n) {
        double* dst = out.sample(n);
        for (const auto& p : parts) {
            const size_t cnt = size_t(p.c()) * p.shape().plane();
            std::memcpy(dst, p.sample(n), cnt * sizeof(double));
            dst += cnt;
        }
    }
    return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw ShapeError("max_abs_diff: " + a.shape().str() + " vs " + b.shape().str());
    double m = 0.0;
    for (size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace dtseg
