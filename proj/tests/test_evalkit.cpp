#include <doctest.h>

#include <algorithm>
#include <set>

#include <json.hpp>

#include "dtseg/errors.hpp"
#include "dtseg/evalkit.hpp"
#include "support.hpp"

using namespace dtseg;
using namespace dtseg::evalkit;

namespace {

SegMask mask_of(int h, int w, int k, std::vector<int> labels) {
    SegMask m(h, w, k);
    m.labels = std::move(labels);
    return m;
}

Tensor one_hot(const SegMask& m) {
    Tensor t(1, m.num_classes, m.h, m.w);
    for (int y = 0; y < m.h; ++y)
        for (int x = 0; x < m.w; ++x) t.at(0, m.at(y, x), y, x) = 1.0;
    return t;
}

// Brute-force oracle: per class, count pixels by set membership.
std::pair<double, double> naive_scores(const SegMask& pred, const SegMask& gt, int k) {
    double iou_sum = 0, f1_sum = 0;
    int present = 0;
    for (int c = 0; c < k; ++c) {
        std::set<size_t> P, G;
        for (size_t i = 0; i < pred.size(); ++i) {
            if (pred.labels[i] == c) P.insert(i);
            if (gt.labels[i] == c) G.insert(i);
        }
        if (P.empty() && G.empty()) continue;
        std::vector<size_t> inter, uni;
        std::set_intersection(P.begin(), P.end(), G.begin(), G.end(), std::back_inserter(inter));
        std::set_union(P.begin(), P.end(), G.begin(), G.end(), std::back_inserter(uni));
        iou_sum += double(inter.size()) / double(uni.size());
        f1_sum += 2.0 * double(inter.size()) / double(P.size() + G.size());
        ++present;
    }
    return {iou_sum / present, f1_sum / present};
}

}  // namespace

TEST_CASE("dice: perfect prediction is near zero") {
    auto gt = mask_of(2, 2, 2, {0, 1, 1, 0});
    CHECK(dice_loss(one_hot(gt), gt, 1e-6) < 1e-3);
}

TEST_CASE("dice: uniform probabilities on a half/half mask give 0.5") {
    auto gt = mask_of(2, 2, 2, {0, 0, 1, 1});
    Tensor probs(Shape{1, 2, 2, 2}, 0.5);
    // per class: 2·(0.5·2) / (2 + 2) = 0.5
    CHECK(dice_loss(probs, gt, 1e-12) == doctest::Approx(0.5).epsilon(1e-9));
}

TEST_CASE("dice: disjoint prediction approaches one") {
    auto gt = mask_of(2, 2, 2, {0, 0, 0, 0});
    auto wrong = mask_of(2, 2, 2, {1, 1, 1, 1});
    CHECK(dice_loss(one_hot(wrong), gt, 1e-9) == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("dice: unnormalized rows are rejected") {
    auto gt = mask_of(1, 2, 2, {0, 1});
    Tensor probs(Shape{1, 2, 1, 2}, 0.6);
    CHECK_THROWS_AS(dice_loss(probs, gt, 1.0), ArgumentError);
}

TEST_CASE("dice: analytic gradient matches central differences (4x4, K=2)") {
    Rng rng(3);
    Tensor probs(Shape{1, 2, 4, 4});
    std::vector<int> labels(16);
    for (int i = 0; i < 16; ++i) {
        double p = rng.uniform(0.05, 0.95);
        probs[size_t(i)] = p;
        probs[size_t(16 + i)] = 1 - p;
        labels[size_t(i)] = rng.randint(0, 1);
    }
    const double smooth = 1.0, h = 1e-5;
    Tensor g = dice_loss_grad(probs, labels, smooth);
    // The row-sum check would reject single-entry perturbations, so difference the formula through
    // the autograd Dice, which shares no code path with dice_loss_grad.
    double worst = 0;
    for (size_t i = 0; i < probs.numel(); ++i) {
        Tensor a = probs, b = probs;
        a[i] += h;
        b[i] -= h;
        double fp = ag::dice_loss(ag::constant(a), labels, smooth)->value[0];
        double fm = ag::dice_loss(ag::constant(b), labels, smooth)->value[0];
        double num = (fp - fm) / (2 * h);
        worst = std::max(worst, std::abs(num - g[i]) / std::max({std::abs(num), std::abs(g[i]), 1e-8}));
    }
    CHECK(worst < 1e-4);
    CHECK(ag::dice_loss(ag::constant(probs), labels, smooth)->value[0] ==
          doctest::Approx(dice_loss(probs, labels, smooth)).epsilon(1e-14));
}

TEST_CASE("dice: bounded in [0, 1]") {
    Rng rng(4);
    for (int trial = 0; trial < 50; ++trial) {
        Tensor probs(Shape{2, 3, 4, 4});
        std::vector<int> labels(32);
        for (int n = 0; n < 2; ++n)
            for (int p = 0; p < 16; ++p) {
                double a = rng.uniform(), b = rng.uniform(), c = rng.uniform(), s = a + b + c;
                probs.at(n, 0, p / 4, p % 4) = a / s;
                probs.at(n, 1, p / 4, p % 4) = b / s;
                probs.at(n, 2, p / 4, p % 4) = c / s;
                labels[size_t(n * 16 + p)] = rng.randint(0, 2);
            }
        double l = dice_loss(probs, labels, 1.0);
        CHECK(l >= 0.0);
        CHECK(l <= 1.0);
    }
}

TEST_CASE("confusion matrix examples") {
    auto gt = mask_of(1, 4, 2, {0, 0, 1, 1});
    auto pred = mask_of(1, 4, 2, {0, 0, 0, 0});
    auto cm = confusion_matrix(pred, gt, 2);
    CHECK(cm.at(0, 0) == 2);
    CHECK(cm.at(0, 1) == 0);
    CHECK(cm.at(1, 0) == 2);
    CHECK(cm.at(1, 1) == 0);
    CHECK(cm.total() == 4);

    auto same = confusion_matrix(gt, gt, 2);
    CHECK(same.at(0, 0) + same.at(1, 1) == 4);
    CHECK(same.at(0, 1) + same.at(1, 0) == 0);

    auto three = confusion_matrix(pred, gt, 3);
    CHECK(three.at(2, 0) + three.at(2, 1) + three.at(2, 2) == 0);

    CHECK_THROWS_AS(confusion_matrix(mask_of(1, 3, 2, {0, 0, 0}), gt, 2), ArgumentError);
}

TEST_CASE("miou and f1 examples") {
    auto gt = mask_of(1, 4, 2, {0, 0, 1, 1});
    auto pred = mask_of(1, 4, 2, {0, 0, 0, 0});
    auto cm = confusion_matrix(pred, gt, 2);
    CHECK(miou(cm) == doctest::Approx(0.25).epsilon(1e-15));
    CHECK(f1(cm) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    CHECK(miou(confusion_matrix(gt, gt, 2)) == 1.0);
    CHECK(f1(confusion_matrix(gt, gt, 2)) == 1.0);

    // K=3 with class 2 absent: mean over the two present classes only.
    auto cm3 = confusion_matrix(pred, gt, 3);
    CHECK(miou(cm3) == doctest::Approx(0.25).epsilon(1e-15));
    CHECK_FALSE(per_class_iou(cm3)[2].has_value());

    // Single present class, perfectly predicted.
    auto bg = mask_of(1, 4, 3, {0, 0, 0, 0});
    CHECK(f1(confusion_matrix(bg, bg, 3)) == 1.0);

    // Without background, class 1 alone.
    CHECK(miou(cm, false) == 0.0);

    CHECK_THROWS_AS(miou(ConfusionMatrix(2)), UndefinedMetricError);
    CHECK_THROWS_AS(f1(ConfusionMatrix(3)), UndefinedMetricError);
}

TEST_CASE("metrics match a brute-force counting oracle on 500 random pairs") {
    Rng rng(5);
    for (int trial = 0; trial < 500; ++trial) {
        const int k = std::array{2, 3, 5}[size_t(trial % 3)];
        SegMask pred(16, 16, k), gt(16, 16, k);
        for (size_t i = 0; i < pred.size(); ++i) {
            pred.labels[i] = rng.randint(0, k - 1);
            gt.labels[i] = rng.uniform() < 0.6 ? pred.labels[i] : rng.randint(0, k - 1);
        }
        auto cm = confusion_matrix(pred, gt, k);
        auto [want_iou, want_f1] = naive_scores(pred, gt, k);
        CHECK(std::abs(miou(cm) - want_iou) <= 1e-12);
        CHECK(std::abs(f1(cm) - want_f1) <= 1e-12);
        CHECK(confusion_matrix(gt, pred, k) == cm.transposed());
    }
}

TEST_CASE("aggregate_runs") {
    std::vector<double> same{0.5, 0.5, 0.5};
    auto s = aggregate_runs(same);
    CHECK(s.mean == 0.5);
    CHECK(s.sd == 0.0);

    std::vector<double> v{0.4, 0.5, 0.6};
    auto r = aggregate_runs(v);
    CHECK(r.mean == doctest::Approx(0.5).epsilon(1e-14));
    CHECK(r.sd == doctest::Approx(0.1).epsilon(1e-12));

    std::vector<double> perm{0.6, 0.4, 0.5};
    CHECK(aggregate_runs(perm).mean == doctest::Approx(r.mean).epsilon(1e-15));

    std::vector<double> one{0.3};
    CHECK_THROWS_AS(aggregate_runs(one), ArgumentError);
}

TEST_CASE("welch t-test") {
    // Reference values frozen from an independent statistics package (scipy.stats.ttest_ind, equal_var=False).
    std::vector<double> a{1, 2, 3}, b{4, 5, 6};
    auto r = welch_ttest(a, b);
    CHECK(r.t == doctest::Approx(-3.6742346141747673).epsilon(1e-12));
    CHECK(r.p == doctest::Approx(0.021311641128756727).epsilon(1e-9));

    std::vector<double> c{0.41, 0.44, 0.47}, d{0.39, 0.40, 0.45};
    auto r2 = welch_ttest(c, d);
    CHECK(r2.t == doctest::Approx(1.0504514628777786).epsilon(1e-12));
    CHECK(r2.p == doctest::Approx(0.35304507997266094).epsilon(1e-9));

    auto same = welch_ttest(a, a);
    CHECK(same.t == 0.0);
    CHECK(same.p == doctest::Approx(1.0));

    std::vector<double> a3{3, 6, 9}, b3{12, 15, 18};
    auto scaled = welch_ttest(a3, b3);
    CHECK(scaled.t == doctest::Approx(r.t).epsilon(1e-12));
    CHECK(scaled.p == doctest::Approx(r.p).epsilon(1e-12));

    std::vector<double> z1{1, 1}, z2{1, 1}, z3{2, 2};
    CHECK(welch_ttest(z1, z2).p == 1.0);
    CHECK(welch_ttest(z1, z3).p == 0.0);

    std::vector<double> tiny{1};
    CHECK_THROWS_AS(welch_ttest(tiny, a), ArgumentError);
}

TEST_CASE("metrics report summaries and serialization") {
    MetricsReport rep;
    rep.class_names = {"bg", "a"};
    for (const char* name : {"x", "y"}) {
        ModelReport m;
        m.model = name;
        for (int s = 0; s < 3; ++s) {
            RunMetrics r;
            r.seed = uint64_t(s);
            r.miou = 0.5 + 0.1 * s + (name[0] == 'y' ? 0.05 : 0.0);
            r.macro_f1 = r.miou;
            r.per_class_iou = {r.miou, std::nullopt};
            r.per_class_f1 = {r.miou, std::nullopt};
            m.runs.push_back(r);
        }
        rep.models.push_back(m);
    }
    finalize(rep);
    CHECK(rep.models[0].miou.mean == doctest::Approx(0.6).epsilon(1e-14));
    REQUIRE(rep.models[0].miou.sd.has_value());
    CHECK(*rep.models[0].miou.sd >= 0.0);
    CHECK(rep.tests.size() == 2);
    auto j = nlohmann::json::parse(rep.to_json());
    CHECK(j["models"].size() == 2);
    CHECK(j["models"][0]["runs"].size() == 3);
    CHECK(j["models"][0]["runs"][0]["per_class_iou"][1].is_null());
    auto csv = rep.to_csv();
    CHECK(csv.rfind("model,seed,metric,value\n", 0) == 0);
}
