#include <doctest.h>

#include "dtseg/collab.hpp"
#include "dtseg/datakit.hpp"
#include "dtseg/errors.hpp"
#include "support.hpp"

using namespace dtseg;
using namespace dtseg::collab;

namespace {

std::shared_ptr<const BaselineParams> small_baseline(uint64_t seed) {
    BaselineConfig c;
    c.width = 8;
    c.fpn_width = 8;
    return std::make_shared<const BaselineParams>(BaselineParams::init(c, 3, seed));
}

DtsegStack small_stack() {
    latentcodec::CodecConfig cc;
    cc.factor = 1;
    DtsegStack s;
    s.codec = std::make_shared<const latentcodec::CodecParams>(latentcodec::CodecParams::init(cc, 0));
    s.denoiser = std::make_shared<const diffusion::DenoiserParams>(
        diffusion::DenoiserParams::init(diffusion::DenoiserConfig{}, 1));
    s.schedule = diffusion::build_schedule(100, 1e-4, 0.02);
    segdecoder::DecoderConfig dc;
    dc.timesteps = {5, 20};
    dc.common_channels = 4;
    dc.heads = 2;
    s.decoder = std::make_shared<const segdecoder::DecoderParams>(
        segdecoder::DecoderParams::init(dc, segdecoder::block_channels_for(*s.denoiser, dc), 3, 2));
    return s;
}

Tensor images_of(const DatasetBundle& b) {
    std::vector<Tensor> v;
    for (const auto& p : b.pairs) v.push_back(p.image.pixels);
    return Tensor::stack(v);
}

CollabConfig small_collab() {
    CollabConfig c;
    c.common_channels = 6;
    c.head_hidden = 5;
    return c;
}

}  // namespace

TEST_CASE("baseline network shapes and training contract") {
    auto bp = small_baseline(0);
    auto x = testing::random_tensor({2, 3, 16, 24}, 1, 0, 1);
    CHECK(baseline_features(*bp, ag::constant(x))->value.shape() == Shape{2, 8, 16, 24});
    auto probs = baseline_probs(*bp, x);
    CHECK(probs.shape() == Shape{2, 3, 16, 24});
    CHECK_THROWS(baseline_features(*bp, ag::constant(Tensor(1, 3, 12, 16))));

    auto bundle = datakit::generate_synthetic(4, 16, 16, 3, 1);
    BaselineConfig c = bp->config;
    CHECK(train_baseline(bundle, c, {0, 2, 1e-3, 0}).checksum() == BaselineParams::init(c, 3, 0).checksum());
    LossHistory h1, h2;
    auto a = train_baseline(bundle, c, {30, 2, 1e-3, 4}, &h1);
    auto b = train_baseline(bundle, c, {30, 2, 1e-3, 4}, &h2);
    CHECK(a.checksum() == b.checksum());
    CHECK(h1 == h2);
    CHECK(BaselineConfig::from_json(c.to_json()).to_json() == c.to_json());
}

TEST_CASE("participants: shape, determinism and extraction noise") {
    auto bundle = datakit::generate_synthetic(3, 16, 16, 3, 2);
    auto base = make_baseline_participant(small_baseline(1));
    auto fb = participant_features(base, bundle);
    CHECK(fb.shape() == Shape{3, base.channels, 16, 16});
    CHECK(participant_features(base, bundle) == fb);

    auto stack = small_stack();
    auto d0 = make_dtseg_participant(stack, 0);
    auto d1 = make_dtseg_participant(stack, 1);
    CHECK(d0.channels == 12);
    auto x = images_of(bundle);
    auto f0 = d0.feature_fn(x);
    CHECK(f0.shape() == Shape{3, 12, 16, 16});
    CHECK(d0.feature_fn(x) == f0);
    CHECK_FALSE(d1.feature_fn(x) == f0);
    CHECK(d0.checksum() == d1.checksum());

    Participant liar = base;
    liar.channels = 9;
    CHECK_THROWS_AS(participant_features(liar, bundle), ShapeError);
}

TEST_CASE("fusion: widths, census and probability output") {
    CollabConfig c;  // C = 64
    auto cp = CollabParams::init(c, 24, 32, 3, 0);
    CHECK(cp.params.count() == cp.expected_parameter_count());
    CHECK(cp.params.count() == size_t(64 * 56 + 128 + (128 * 32 + 32) + (32 * 3 + 3)));
    auto f1 = ag::constant(testing::random_tensor({2, 24, 4, 4}, 1));
    auto f2 = ag::constant(testing::random_tensor({2, 32, 4, 4}, 2));
    auto mapped = ag::concat_channels({cp.map1(cp.params, f1), cp.map2(cp.params, f2)});
    CHECK(mapped->value.c() == 128);
    auto p = fuse_and_predict(f1->value, f2->value, cp);
    CHECK(p.shape() == Shape{2, 3, 4, 4});
    for (int n = 0; n < 2; ++n)
        for (int i = 0; i < 16; ++i) {
            double s = 0;
            for (int k = 0; k < 3; ++k) s += p.at(n, k, i / 4, i % 4);
            CHECK(s == doctest::Approx(1.0).epsilon(1e-14));
        }
    CHECK_THROWS_AS(fuse_logits(cp, f2, f1), ShapeError);
    CHECK_THROWS_AS(fuse_logits(cp, f1, ag::constant(Tensor(2, 32, 4, 5))), ArgumentError);
    CHECK_THROWS_AS(CollabParams::init(c, 0, 32, 3, 0), ArgumentError);
}

TEST_CASE("a zeroed mapping isolates its participant") {
    auto cp = CollabParams::init(small_collab(), 4, 5, 3, 1);
    for (size_t idx : {cp.map2.weight, cp.map2.bias}) {
        auto& t = cp.params[idx]->value;
        std::fill(t.vec().begin(), t.vec().end(), 0.0);
    }
    auto f1 = testing::random_tensor({1, 4, 3, 3}, 3);
    auto a = fuse_and_predict(f1, testing::random_tensor({1, 5, 3, 3}, 4), cp);
    auto b = fuse_and_predict(f1, testing::random_tensor({1, 5, 3, 3}, 5, -10, 10), cp);
    CHECK(a == b);
    CHECK_FALSE(fuse_and_predict(testing::random_tensor({1, 4, 3, 3}, 6), testing::random_tensor({1, 5, 3, 3}, 4),
                                 cp) == a);
}

TEST_CASE("swapping participants with matching weights is symmetric") {
    auto cfg = small_collab();
    const int C = cfg.common_channels, H = cfg.head_hidden;
    auto ab = CollabParams::init(cfg, 4, 7, 3, 2);
    auto ba = CollabParams::init(cfg, 7, 4, 3, 9);
    auto copy = [](const CollabParams& from, size_t i, CollabParams& to, size_t j) {
        to.params[j]->value = from.params[i]->value;
    };
    copy(ab, ab.map1.weight, ba, ba.map2.weight);
    copy(ab, ab.map1.bias, ba, ba.map2.bias);
    copy(ab, ab.map2.weight, ba, ba.map1.weight);
    copy(ab, ab.map2.bias, ba, ba.map1.bias);
    copy(ab, ab.head1.bias, ba, ba.head1.bias);
    copy(ab, ab.head2.weight, ba, ba.head2.weight);
    copy(ab, ab.head2.bias, ba, ba.head2.bias);
    const auto& w = ab.params[ab.head1.weight]->value;
    auto& w2 = ba.params[ba.head1.weight]->value;
    for (int o = 0; o < H; ++o)
        for (int i = 0; i < 2 * C; ++i) w2[size_t(o) * 2 * C + size_t((i + C) % (2 * C))] = w[size_t(o) * 2 * C + size_t(i)];

    auto f1 = testing::random_tensor({2, 4, 3, 3}, 7);
    auto f2 = testing::random_tensor({2, 7, 3, 3}, 8);
    CHECK(max_abs_diff(fuse_and_predict(f1, f2, ab), fuse_and_predict(f2, f1, ba)) < 1e-14);
}

TEST_CASE("collaborative training: frozen participants, zero steps, determinism") {
    auto bundle = datakit::generate_synthetic(4, 16, 16, 3, 3);
    auto bp = small_baseline(5);
    auto p1 = make_baseline_participant(bp);
    auto p2 = make_dtseg_participant(small_stack(), 0);
    const auto s1 = p1.checksum(), s2 = p2.checksum();
    auto cfg = small_collab();

    CHECK(train_collab(bundle, p1, p2, cfg, {0, 2, 1e-3, 3}).checksum() ==
          CollabParams::init(cfg, p1.channels, p2.channels, 3, 3).checksum());
    LossHistory h1, h2;
    auto a = train_collab(bundle, p1, p2, cfg, {20, 2, 2e-3, 3}, &h1);
    auto b = train_collab(bundle, p1, p2, cfg, {20, 2, 2e-3, 3}, &h2);
    CHECK(a.checksum() == b.checksum());
    CHECK(h1 == h2);
    CHECK(p1.checksum() == s1);
    CHECK(p2.checksum() == s2);
    CHECK(CollabConfig::from_json(cfg.to_json()).to_json() == cfg.to_json());

    DatasetBundle unlabeled = bundle;
    for (auto& p : unlabeled.pairs) p.mask.reset();
    CHECK_THROWS_AS(train_collab(unlabeled, p1, p2, cfg, {1, 1, 1e-3, 0}), ArgumentError);
}
