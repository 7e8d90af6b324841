#include "dtseg/evalkit.hpp"

#include <boost/math/distributions/students_t.hpp>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "dtseg/errors.hpp"

namespace dtseg::evalkit {

namespace {

struct DiceTerms {
    std::vector<double> inter, psum, gsum;
};

DiceTerms dice_terms(const Tensor& probs, std::span<const int> labels, double smooth) {
    const Shape s = probs.shape();
    const size_t plane = s.plane();
    if (labels.size() != size_t(s.n) * plane)
        throw ShapeError("dice_loss: " + std::to_string(labels.size()) + " labels for probs " + s.str());
    if (!(smooth > 0.0)) throw ArgumentError("dice_loss: smooth must be > 0");
    DiceTerms t{std::vector<double>(s.c, 0.0), std::vector<double>(s.c, 0.0), std::vector<double>(s.c, 0.0)};
    for (int n = 0; n < s.n; ++n) {
        const double* p = probs.sample(n);
        for (size_t i = 0; i < plane; ++i) {
            const int label = labels[size_t(n) * plane + i];
            if (label < 0 || label >= s.c) throw ArgumentError("dice_loss: label out of range");
            double row = 0.0;
            for (int k = 0; k < s.c; ++k) {
                const double v = p[k * plane + i];
                row += v;
                t.psum[k] += v;
            }
            if (std::abs(row - 1.0) > 1e-4) throw ArgumentError("dice_loss: probability rows must sum to 1");
            t.inter[label] += p[label * plane + i];
            t.gsum[label] += 1.0;
        }
    }
    return t;
}

}  // namespace

double dice_loss(const Tensor& probs, std::span<const int> labels, double smooth) {
    const DiceTerms t = dice_terms(probs, labels, smooth);
    const int K = probs.c();
    double acc = 0.0;
    for (int k = 0; k < K; ++k) acc += (2.0 * t.inter[k] + smooth) / (t.psum[k] + t.gsum[k] + smooth);
    return 1.0 - acc / K;
}

double dice_loss(const Tensor& probs, const SegMask& gt, double smooth) {
    if (probs.n() != 1 || probs.h() != gt.h || probs.w() != gt.w)
        throw ShapeError("dice_loss: probs " + probs.shape().str() + " vs mask " + std::to_string(gt.h) + "x" +
                         std::to_string(gt.w));
    return dice_loss(probs, gt.labels, smooth);
}

Tensor dice_loss_grad(const Tensor& probs, std::span<const int> labels, double smooth) {
    const DiceTerms t = dice_terms(probs, labels, smooth);
    const Shape s = probs.shape();
    const size_t plane = s.plane();
    const int K = s.c;
    // dD_k/dp = (2 g (S + s) - (2 I + s)) / (S + s)^2, loss = 1 - mean_k D_k.
    std::vector<double> denom(K), numer(K);
    for (int k = 0; k < K; ++k) {
        denom[k] = t.psum[k] + t.gsum[k] + smooth;
        numer[k] = 2.0 * t.inter[k] + smooth;
    }
    Tensor grad(s);
    for (int n = 0; n < s.n; ++n) {
        double* g = grad.sample(n);
        for (size_t i = 0; i < plane; ++i) {
            const int label = labels[size_t(n) * plane + i];
            for (int k = 0; k < K; ++k) {
                const double gk = (label == k) ? 1.0 : 0.0;
                const double dD = (2.0 * gk * denom[k] - numer[k]) / (denom[k] * denom[k]);
                g[k * plane + i] = -dD / K;
            }
        }
    }
    return grad;
}

ConfusionMatrix::ConfusionMatrix(int num_classes) : k_(num_classes), counts_(size_t(num_classes) * num_classes, 0) {
    if (num_classes < 1) throw ArgumentError("confusion matrix needs at least one class");
}

uint64_t ConfusionMatrix::total() const { return std::accumulate(counts_.begin(), counts_.end(), uint64_t{0}); }

ConfusionMatrix ConfusionMatrix::transposed() const {
    ConfusionMatrix t(k_);
    for (int i = 0; i < k_; ++i)
        for (int j = 0; j < k_; ++j) t.at(j, i) = at(i, j);
    return t;
}

void ConfusionMatrix::accumulate(const SegMask& pred, const SegMask& gt) {
    if (pred.h != gt.h || pred.w != gt.w || pred.size() != gt.size())
        throw ArgumentError("confusion_matrix: prediction " + std::to_string(pred.h) + "x" + std::to_string(pred.w) +
                            " vs ground truth " + std::to_string(gt.h) + "x" + std::to_string(gt.w));
    for (size_t i = 0; i < gt.size(); ++i) {
        const int g = gt.labels[i], p = pred.labels[i];
        if (g < 0 || g >= k_ || p < 0 || p >= k_) throw ArgumentError("confusion_matrix: label out of range");
        ++counts_[size_t(g) * k_ + p];
    }
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
    if (other.k_ != k_) throw ArgumentError("confusion matrix class count mismatch");
    for (size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
    return *this;
}

ConfusionMatrix confusion_matrix(const SegMask& pred, const SegMask& gt, int num_classes) {
    ConfusionMatrix cm(num_classes);
    cm.accumulate(pred, gt);
    return cm;
}

namespace {

struct ClassCounts {
    uint64_t tp, fp, fn;
};

ClassCounts counts_for(const ConfusionMatrix& cm, int k) {
    ClassCounts c{cm.at(k, k), 0, 0};
    for (int j = 0; j < cm.num_classes(); ++j) {
        if (j == k) continue;
        c.fn += cm.at(k, j);
        c.fp += cm.at(j, k);
    }
    return c;
}

double mean_present(const std::vector<std::optional<double>>& scores, bool include_background, const char* name) {
    double sum = 0.0;
    int present = 0;
    for (size_t k = include_background ? 0 : 1; k < scores.size(); ++k) {
        if (!scores[k]) continue;
        sum += *scores[k];
        ++present;
    }
    if (present == 0) throw UndefinedMetricError(std::string(name) + ": every class is absent");
    return sum / present;
}

}  // namespace

std::vector<std::optional<double>> per_class_iou(const ConfusionMatrix& cm) {
    std::vector<std::optional<double>> out(cm.num_classes());
    for (int k = 0; k < cm.num_classes(); ++k) {
        const auto c = counts_for(cm, k);
        const uint64_t denom = c.tp + c.fp + c.fn;
        if (denom > 0) out[k] = double(c.tp) / double(denom);
    }
    return out;
}

std::vector<std::optional<double>> per_class_f1(const ConfusionMatrix& cm) {
    std::vector<std::optional<double>> out(cm.num_classes());
    for (int k = 0; k < cm.num_classes(); ++k) {
        const auto c = counts_for(cm, k);
        const uint64_t denom = 2 * c.tp + c.fp + c.fn;
        if (denom > 0) out[k] = 2.0 * double(c.tp) / double(denom);
    }
    return out;
}

double miou(const ConfusionMatrix& cm, bool include_background) {
    return mean_present(per_class_iou(cm), include_background, "miou");
}

double f1(const ConfusionMatrix& cm, bool include_background) {
    return mean_present(per_class_f1(cm), include_background, "f1");
}

RunStats aggregate_runs(std::span<const double> values) {
    if (values.size() < 2) throw ArgumentError("aggregate_runs: need at least 2 values");
    const double n = double(values.size());
    const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
    double ss = 0.0;
    for (double v : values) ss += (v - mean) * (v - mean);
    return {mean, std::sqrt(ss / (n - 1.0))};
}

TTestResult welch_ttest(std::span<const double> a, std::span<const double> b) {
    if (a.size() < 2 || b.size() < 2) throw ArgumentError("welch_ttest: each sample needs at least 2 values");
    const RunStats sa = aggregate_runs(a), sb = aggregate_runs(b);
    const double na = double(a.size()), nb = double(b.size());
    const double va = sa.sd * sa.sd / na, vb = sb.sd * sb.sd / nb;
    const double diff = sa.mean - sb.mean;
    if (va + vb == 0.0) {
        if (diff == 0.0) return {0.0, 1.0, na + nb - 2.0};
        return {diff > 0 ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity(), 0.0,
                na + nb - 2.0};
    }
    const double t = diff / std::sqrt(va + vb);
    const double df = (va + vb) * (va + vb) / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
    boost::math::students_t dist(df);
    const double p = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t)));
    return {t, std::min(1.0, p), df};
}

RunMetrics score(const ConfusionMatrix& cm, uint64_t seed, bool include_background) {
    RunMetrics r;
    r.seed = seed;
    r.per_class_iou = per_class_iou(cm);
    r.per_class_f1 = per_class_f1(cm);
    r.miou = miou(cm, include_background);
    r.macro_f1 = f1(cm, include_background);
    return r;
}

MetricSummary summarize(std::span<const double> runs) {
    MetricSummary s;
    s.runs.assign(runs.begin(), runs.end());
    if (runs.empty()) return s;
    if (runs.size() == 1) {
        s.mean = runs[0];
        return s;
    }
    const RunStats st = aggregate_runs(runs);
    s.mean = st.mean;
    s.sd = st.sd;
    return s;
}

void finalize(MetricsReport& report) {
    for (auto& m : report.models) {
        std::vector<double> mi, fs;
        for (const auto& r : m.runs) {
            mi.push_back(r.miou);
            fs.push_back(r.macro_f1);
        }
        m.miou = summarize(mi);
        m.f1 = summarize(fs);
    }
    report.tests.clear();
    for (size_t i = 0; i < report.models.size(); ++i)
        for (size_t j = i + 1; j < report.models.size(); ++j) {
            const auto& a = report.models[i];
            const auto& b = report.models[j];
            if (a.runs.size() < 2 || b.runs.size() < 2) continue;
            report.tests.push_back({"miou", a.model, b.model, welch_ttest(a.miou.runs, b.miou.runs)});
            report.tests.push_back({"f1", a.model, b.model, welch_ttest(a.f1.runs, b.f1.runs)});
        }
}

namespace {

nlohmann::json optional_list(const std::vector<std::optional<double>>& v) {
    auto arr = nlohmann::json::array();
    for (const auto& x : v) arr.push_back(x ? nlohmann::json(*x) : nlohmann::json(nullptr));
    return arr;
}

nlohmann::json finite_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

nlohmann::json summary_json(const MetricSummary& s) {
    return {{"runs", s.runs}, {"mean", s.mean}, {"sd", s.sd ? nlohmann::json(*s.sd) : nlohmann::json(nullptr)}};
}

}  // namespace

std::string MetricsReport::to_json() const {
    nlohmann::json j;
    j["class_names"] = class_names;
    j["include_background"] = include_background;
    auto models_json = nlohmann::json::array();
    for (const auto& m : models) {
        auto runs = nlohmann::json::array();
        for (const auto& r : m.runs)
            runs.push_back({{"seed", r.seed},
                            {"miou", r.miou},
                            {"macro_f1", r.macro_f1},
                            {"per_class_iou", optional_list(r.per_class_iou)},
                            {"per_class_f1", optional_list(r.per_class_f1)}});
        models_json.push_back({{"model", m.model}, {"runs", runs}, {"miou", summary_json(m.miou)},
                               {"f1", summary_json(m.f1)}});
    }
    j["models"] = models_json;
    auto tests_json = nlohmann::json::array();
    for (const auto& t : tests)
        tests_json.push_back({{"metric", t.metric},
                              {"model_a", t.model_a},
                              {"model_b", t.model_b},
                              {"t", finite_or_null(t.result.t)},
                              {"df", t.result.df},
                              {"p", t.result.p}});
    j["p_values"] = tests_json;
    return j.dump(2) + "\n";
}

std::string MetricsReport::to_csv() const {
    std::ostringstream os;
    os << std::setprecision(17);
    os << "model,seed,metric,value\n";
    for (const auto& m : models)
        for (const auto& r : m.runs) {
            os << m.model << ',' << r.seed << ",miou," << r.miou << '\n';
            os << m.model << ',' << r.seed << ",macro_f1," << r.macro_f1 << '\n';
            for (size_t k = 0; k < r.per_class_iou.size(); ++k) {
                const std::string name = k < class_names.size() ? class_names[k] : std::to_string(k);
                os << m.model << ',' << r.seed << ",iou_" << name << ',';
                if (r.per_class_iou[k]) os << *r.per_class_iou[k];
                os << '\n';
            }
        }
    return os.str();
}

}  // namespace dtseg::evalkit
