#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "dtseg/autograd.hpp"
#include "dtseg/nn.hpp"

namespace testing {

inline dtseg::Tensor random_tensor(dtseg::Shape s, uint64_t seed, double lo = -1.0, double hi = 1.0) {
    dtseg::Rng rng(seed);
    dtseg::Tensor t(s);
    for (size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

// Worst relative error between the analytic gradients of `loss(leaves)` and
// central differences, normalized by max(|analytic|, |numeric|, floor).
inline double gradient_error(const std::function<dtseg::ag::Var(const std::vector<dtseg::ag::Var>&)>& loss,
                             std::vector<dtseg::ag::Var> leaves, double h = 1e-5, double floor = 1e-6,
                             size_t max_probes = 64) {
    for (auto& v : leaves) v->zero_grad();
    dtseg::ag::backward(loss(leaves));
    double worst = 0.0;
    for (auto& leaf : leaves) {
        auto& x = leaf->value;
        const size_t n = x.numel();
        const size_t step = std::max<size_t>(1, n / max_probes);
        for (size_t i = 0; i < n; i += step) {
            const double keep = x[i];
            double fp, fm;
            {
                dtseg::ag::NoGradGuard g;
                x[i] = keep + h;
                fp = loss(leaves)->value[0];
                x[i] = keep - h;
                fm = loss(leaves)->value[0];
            }
            x[i] = keep;
            const double numeric = (fp - fm) / (2 * h);
            const double analytic = leaf->grad.numel() ? leaf->grad[i] : 0.0;
            const double scale = std::max({std::abs(numeric), std::abs(analytic), floor});
            worst = std::max(worst, std::abs(numeric - analytic) / scale);
        }
    }
    return worst;
}

// Fresh, empty directory under the system temp dir.
inline std::string temp_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("dtseg_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p.string();
}

}  // namespace testing
