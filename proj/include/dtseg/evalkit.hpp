#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dtseg/tensor.hpp"
#include "dtseg/types.hpp"

namespace dtseg::evalkit {

// ---------------------------------------------------------------------------
// Dice loss
//
// loss = 1 - (1/K) Σ_k (2 Σ p_k g_k + smooth) / (Σ p_k + Σ g_k + smooth)
// with g = one-hot(labels). Sums run over every pixel of every sample in
// `probs` ([N, K, H, W]); background is an ordinary class.
// ---------------------------------------------------------------------------

// Throws ArgumentError when a pixel's probabilities do not sum to 1 within 1e-4.
double dice_loss(const Tensor& probs, std::span<const int> labels, double smooth);
double dice_loss(const Tensor& probs, const SegMask& gt, double smooth);
// d loss / d probs, same shape as probs.
Tensor dice_loss_grad(const Tensor& probs, std::span<const int> labels, double smooth);

// Rows = ground truth class, columns = predicted class.
class ConfusionMatrix {
public:
    explicit ConfusionMatrix(int num_classes);

    int num_classes() const { return k_; }
    uint64_t at(int gt, int pred) const { return counts_[size_t(gt) * k_ + pred]; }
    uint64_t& at(int gt, int pred) { return counts_[size_t(gt) * k_ + pred]; }
    uint64_t total() const;
    ConfusionMatrix transposed() const;
    void accumulate(const SegMask& pred, const SegMask& gt);
    ConfusionMatrix& operator+=(const ConfusionMatrix& other);
    bool operator==(const ConfusionMatrix&) const = default;

private:
    int k_;
    std::vector<uint64_t> counts_;
};

ConfusionMatrix confusion_matrix(const SegMask& pred, const SegMask& gt, int num_classes);

// Per-class scores; nullopt for classes absent from both prediction and ground truth.
std::vector<std::optional<double>> per_class_iou(const ConfusionMatrix& cm);
std::vector<std::optional<double>> per_class_f1(const ConfusionMatrix& cm);

// Mean over present classes. With include_background=false class 0 is
// skipped. Throws UndefinedMetricError when no class is present.
double miou(const ConfusionMatrix& cm, bool include_background = true);
double f1(const ConfusionMatrix& cm, bool include_background = true);

struct RunStats {
    double mean = 0.0;
    double sd = 0.0;  // sample standard deviation (n - 1)
};

// Requires at least two values.
RunStats aggregate_runs(std::span<const double> values);

struct TTestResult {
    double t = 0.0;
    double p = 1.0;
    double df = 0.0;
};

// Two-sided Welch unequal-variance t-test. When both samples have zero
// variance: p = 1 if the means are equal, else p = 0 (t = ±inf).
TTestResult welch_ttest(std::span<const double> a, std::span<const double> b);

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct RunMetrics {
    uint64_t seed = 0;
    std::vector<std::optional<double>> per_class_iou;
    std::vector<std::optional<double>> per_class_f1;
    double miou = 0.0;
    double macro_f1 = 0.0;
};

RunMetrics score(const ConfusionMatrix& cm, uint64_t seed, bool include_background = true);

struct MetricSummary {
    std::vector<double> runs;
    double mean = 0.0;
    std::optional<double> sd;  // absent with a single run
};

struct ModelReport {
    std::string model;
    std::vector<RunMetrics> runs;
    MetricSummary miou;
    MetricSummary f1;
};

struct PairwiseTest {
    std::string metric;
    std::string model_a, model_b;
    TTestResult result;
};

struct MetricsReport {
    std::vector<std::string> class_names;
    bool include_background = true;
    std::vector<ModelReport> models;
    std::vector<PairwiseTest> tests;

    std::string to_json() const;
    // One row per (model, run, metric).
    std::string to_csv() const;
};

MetricSummary summarize(std::span<const double> runs);

// Fills the summaries and pairwise Welch tests (mIoU and F1) from the runs.
void finalize(MetricsReport& report);

}  // namespace dtseg::evalkit
