#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "dtseg/autograd.hpp"

namespace dtseg {

// splitmix64 finalizer; derives independent child seeds from (seed, stream).
uint64_t mix_seed(uint64_t seed, uint64_t stream);

class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}
    double uniform(double lo = 0.0, double hi = 1.0) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
    double normal() { return normal_(engine_); }
    int randint(int lo, int hi_inclusive) { return std::uniform_int_distribution<int>(lo, hi_inclusive)(engine_); }
    Tensor normal_tensor(Shape shape);
    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
};

// Ordered, named collection of trainable tensors. Copies are deep: copying a
// component never aliases the original's weights.
class ParamSet {
public:
    ParamSet() = default;
    ParamSet(const ParamSet& other);
    ParamSet& operator=(const ParamSet& other);
    ParamSet(ParamSet&&) noexcept = default;
    ParamSet& operator=(ParamSet&&) noexcept = default;

    size_t add(std::string name, Tensor init);
    const ag::Var& operator[](size_t i) const { return vars_[i]; }
    const std::string& name(size_t i) const { return names_[i]; }
    size_t size() const { return vars_.size(); }
    // Total number of scalar parameters.
    size_t count() const;
    // Index of `name`; throws ArgumentError if absent.
    size_t find(const std::string& name) const;

    void set_trainable(bool trainable);
    void zero_grad();
    // Hex SHA-256 over names, shapes and raw values.
    std::string checksum() const;

private:
    std::vector<std::string> names_;
    std::vector<ag::Var> vars_;
};

// Copies values from `source` into `target`; names and shapes must match exactly.
void assign_params(ParamSet& target, const ParamSet& source);

enum class Init { uniform, zeros };

// 2-D convolution; kernel 1 with stride 1 acts as a per-pixel linear layer.
struct Conv2d {
    size_t weight = 0, bias = 0;
    int in = 0, out = 0, kernel = 1, stride = 1, pad = 0;

    static Conv2d create(ParamSet& ps, const std::string& name, int in, int out, int kernel, int stride, int pad,
                         Rng& rng, Init init = Init::uniform);
    static Conv2d pointwise(ParamSet& ps, const std::string& name, int in, int out, Rng& rng,
                            Init init = Init::uniform) {
        return create(ps, name, in, out, 1, 1, 0, rng, init);
    }
    ag::Var operator()(const ParamSet& ps, const ag::Var& x) const;
};

struct GroupNorm {
    size_t gamma = 0, beta = 0;
    int groups = 1;

    static GroupNorm create(ParamSet& ps, const std::string& name, int channels, int groups);
    ag::Var operator()(const ParamSet& ps, const ag::Var& x) const;
};

// Per-pixel normalization across channels.
struct ChannelLayerNorm {
    size_t gamma = 0, beta = 0;

    static ChannelLayerNorm create(ParamSet& ps, const std::string& name, int channels);
    ag::Var operator()(const ParamSet& ps, const ag::Var& x) const;
};

// RMSprop without momentum, with bias-corrected running square average.
class RMSprop {
public:
    RMSprop(ParamSet& params, double lr, double decay = 0.99, double eps = 1e-8);
    // Applies one update from the accumulated gradients, then clears them.
    void step();
    long steps() const { return t_; }

private:
    ParamSet& params_;
    double lr_, decay_, eps_;
    long t_ = 0;
    std::vector<std::vector<double>> sq_;
};

struct TrainOptions {
    int steps = 0;
    int batch = 1;
    double lr = 1e-3;
    uint64_t seed = 0;
};

// Per-step training losses, optionally collected by the train_* functions.
using LossHistory = std::vector<double>;

// Throws TrainingError naming `what` and the step when loss is not finite.
void check_loss(double loss, int step, const std::string& what);

}  // namespace dtseg
