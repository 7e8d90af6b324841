#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace dtseg {

// Dense 4-D tensor in NCHW order. Token sequences are stored as [N, C, 1, L]
// and plain vectors as [N, C, 1, 1].
struct Shape {
    int n = 0, c = 0, h = 0, w = 0;

    size_t numel() const { return size_t(n) * size_t(c) * size_t(h) * size_t(w); }
    size_t plane() const { return size_t(h) * size_t(w); }
    bool operator==(const Shape&) const = default;
    std::string str() const;
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0) : shape_(shape), data_(shape.numel(), fill) {}
    Tensor(int n, int c, int h, int w, double fill = 0.0) : Tensor(Shape{n, c, h, w}, fill) {}
    Tensor(Shape shape, std::vector<double> data);

    const Shape& shape() const { return shape_; }
    int n() const { return shape_.n; }
    int c() const { return shape_.c; }
    int h() const { return shape_.h; }
    int w() const { return shape_.w; }
    size_t numel() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::span<double> span() { return data_; }
    std::span<const double> span() const { return data_; }
    std::vector<double>& vec() { return data_; }
    const std::vector<double>& vec() const { return data_; }

    double& operator[](size_t i) { return data_[i]; }
    double operator[](size_t i) const { return data_[i]; }

    size_t index(int n, int c, int y, int x) const {
        return ((size_t(n) * shape_.c + c) * shape_.h + y) * shape_.w + x;
    }
    double& at(int n, int c, int y, int x) { return data_[index(n, c, y, x)]; }
    double at(int n, int c, int y, int x) const { return data_[index(n, c, y, x)]; }

    // Pointer to the first element of sample n (channel 0).
    double* sample(int n) { return data_.data() + size_t(n) * shape_.c * shape_.plane(); }
    const double* sample(int n) const { return data_.data() + size_t(n) * shape_.c * shape_.plane(); }

    // Same data, new dims; element count must match.
    Tensor reshaped(Shape shape) const;
    void reshape(Shape shape);

    void fill(double v);
    bool all_finite() const;

    // Copies samples [begin, begin + count).
    Tensor slice_batch(int begin, int count) const;
    // Copies channels [begin, begin + count) of every sample.
    Tensor slice_channels(int begin, int count) const;

    // Copies the listed samples, in order (repeats allowed).
    Tensor gather(std::span<const int> samples) const;

    static Tensor stack(std::span<const Tensor> samples);
    static Tensor concat_channels(std::span<const Tensor> parts);

    bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

private:
    Shape shape_;
    std::vector<double> data_;
};

double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace dtseg
