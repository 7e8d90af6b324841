#include <doctest.h>

#include "dtseg/datakit.hpp"
#include "dtseg/errors.hpp"
#include "dtseg/segdecoder.hpp"
#include "support.hpp"

using namespace dtseg;
using namespace dtseg::segdecoder;
using ag::Var;

namespace {

struct Toy {
    latentcodec::CodecParams codec;
    diffusion::NoiseSchedule schedule = diffusion::build_schedule(100, 1e-4, 0.02);
    diffusion::DenoiserParams denoiser = diffusion::DenoiserParams::init(diffusion::DenoiserConfig{}, 1);

    Toy() {
        latentcodec::CodecConfig c;
        c.factor = 1;
        codec = latentcodec::CodecParams::init(c, 0);
    }
    Backbone backbone() const { return {denoiser, codec, schedule}; }
};

DecoderConfig toy_config() {
    DecoderConfig c;
    c.timesteps = {5, 20, 50};
    c.common_channels = 8;
    c.heads = 2;
    c.head_hidden = 16;
    return c;
}

Var constant_rand(Shape s, uint64_t seed) { return ag::constant(testing::random_tensor(s, seed)); }

Tensor slice_tokens(const Tensor& x, const std::vector<int>& perm) {
    Tensor out(x.shape());
    for (int c = 0; c < x.c(); ++c)
        for (size_t l = 0; l < perm.size(); ++l) out.at(0, c, 0, int(l)) = x.at(0, c, 0, perm[l]);
    return out;
}

}  // namespace

TEST_CASE("alignment: shapes, order and errors") {
    auto cfg = toy_config();
    auto dp = DecoderParams::init(cfg, {6, 10, 4}, 3, 0);
    std::vector<Var> blocks{constant_rand({2, 6, 4, 4}, 1), constant_rand({2, 10, 8, 8}, 2),
                            constant_rand({2, 4, 16, 16}, 3)};
    auto out = align_features(dp, blocks, 16, 16);
    REQUIRE(out.size() == 3);
    for (const auto& o : out) CHECK(o->value.shape() == Shape{2, 8, 16, 16});

    // Each output depends only on its own block.
    auto changed = blocks;
    changed[1] = constant_rand({2, 10, 8, 8}, 4);
    auto out2 = align_features(dp, changed, 16, 16);
    CHECK(out2[0]->value == out[0]->value);
    CHECK_FALSE(out2[1]->value == out[1]->value);
    CHECK(out2[2]->value == out[2]->value);

    CHECK_THROWS_AS(align_features(dp, {blocks[0], blocks[1]}, 16, 16), ArgumentError);
    CHECK_THROWS_AS(align_features(dp, {blocks[1], blocks[0], blocks[2]}, 16, 16), ShapeError);
    CHECK_THROWS_AS(align_features(dp, blocks, 8, 8), ArgumentError);
    CHECK_THROWS_AS(align_features(dp, {}, 16, 16), ArgumentError);
}

TEST_CASE("alignment: identity projection and projection/upsample commute") {
    auto cfg = toy_config();
    cfg.blocks = {9};
    auto dp = DecoderParams::init(cfg, {8}, 2, 0);
    auto& w = dp.params[dp.align[0].weight]->value;
    auto& b = dp.params[dp.align[0].bias]->value;
    std::fill(w.vec().begin(), w.vec().end(), 0.0);
    std::fill(b.vec().begin(), b.vec().end(), 0.0);
    for (int i = 0; i < 8; ++i) w[size_t(i) * 8 + size_t(i)] = 1.0;
    auto x = constant_rand({1, 8, 16, 16}, 5);
    CHECK(align_features(dp, {x}, 16, 16)[0]->value == x->value);

    auto fresh = DecoderParams::init(cfg, {8}, 2, 7);
    auto low = constant_rand({1, 8, 4, 4}, 6);
    auto got = align_features(fresh, {low}, 16, 16)[0]->value;
    auto want = fresh.align[0](fresh.params, ag::upsample_bilinear(low, 16, 16))->value;
    CHECK(max_abs_diff(got, want) < 1e-12);
}

TEST_CASE("transformer layer: permutation equivariance over tokens") {
    ParamSet ps;
    Rng rng(1);
    auto layer = TransformerLayer::create(ps, "t", 8, 2, true, false, rng);
    auto x = testing::random_tensor({1, 8, 1, 6}, 2);
    const std::vector<int> perm{3, 0, 5, 1, 4, 2};
    auto y = transformer_layer(ps, layer, ag::constant(x), 1)->value;
    auto yp = transformer_layer(ps, layer, ag::constant(slice_tokens(x, perm)), 1)->value;
    CHECK(max_abs_diff(yp, slice_tokens(y, perm)) < 1e-12);
}

TEST_CASE("transformer layer: zero-initialized outputs give the identity") {
    ParamSet ps;
    Rng rng(2);
    auto layer = TransformerLayer::create(ps, "t", 8, 4, true, true, rng);
    auto x = testing::random_tensor({2, 8, 8, 8}, 3);
    CHECK(transformer_layer(ps, layer, ag::constant(x), 4)->value == x);
    CHECK_THROWS_AS(transformer_layer(ps, layer, ag::constant(Tensor(1, 8, 6, 6)), 4), ArgumentError);
    CHECK_THROWS_AS(transformer_layer(ps, layer, ag::constant(Tensor(1, 4, 8, 8)), 4), ShapeError);
}

TEST_CASE("transformer layer without self-attention is pointwise") {
    ParamSet ps;
    Rng rng(3);
    auto layer = TransformerLayer::create(ps, "t", 8, 2, false, false, rng);
    auto x = testing::random_tensor({1, 8, 4, 4}, 4);
    auto y = transformer_layer(ps, layer, ag::constant(x), 4)->value;
    auto x2 = x;
    for (int c = 0; c < 8; ++c) x2.at(0, c, 2, 1) += 0.5;
    auto y2 = transformer_layer(ps, layer, ag::constant(x2), 4)->value;
    for (int yy = 0; yy < 4; ++yy)
        for (int xx = 0; xx < 4; ++xx) {
            bool same = true;
            for (int c = 0; c < 8; ++c) same &= y.at(0, c, yy, xx) == y2.at(0, c, yy, xx);
            CHECK(same == !(yy == 2 && xx == 1));
        }
}

TEST_CASE("aggregation width in both modes and single-block equivalence") {
    for (Mode mode : {Mode::parallel, Mode::serial}) {
        auto cfg = toy_config();
        cfg.mode = mode;
        auto dp = DecoderParams::init(cfg, {4, 4, 4}, 3, 0);
        CHECK(dp.transformers.size() == (mode == Mode::parallel ? 3u : 1u));
        std::vector<Var> a{constant_rand({1, 8, 8, 8}, 1), constant_rand({1, 8, 8, 8}, 2),
                           constant_rand({1, 8, 8, 8}, 3)};
        CHECK(aggregate(dp, a)->value.shape() == Shape{1, 24, 8, 8});
        CHECK_THROWS_AS(aggregate(dp, {a[0], constant_rand({1, 8, 4, 4}, 4), a[2]}), ArgumentError);
    }
    CHECK(mode_from_string(to_string(Mode::serial)) == Mode::serial);
    CHECK_THROWS_AS(mode_from_string("diagonal"), ArgumentError);

    auto cfg = toy_config();
    cfg.blocks = {8};
    auto par = DecoderParams::init(cfg, {4}, 3, 9);
    cfg.mode = Mode::serial;
    auto ser = DecoderParams::init(cfg, {4}, 3, 9);
    CHECK(par.checksum() == ser.checksum());
    auto x = constant_rand({1, 8, 8, 8}, 5);
    CHECK(aggregate(par, {x})->value == aggregate(ser, {x})->value);
}

TEST_CASE("segmentation head: distribution and constant input") {
    auto dp = DecoderParams::init(toy_config(), {4, 4, 4}, 3, 0);
    auto probs = ag::softmax_channels(segmentation_head(dp, constant_rand({2, 24, 5, 5}, 1)))->value;
    for (int n = 0; n < 2; ++n)
        for (int y = 0; y < 5; ++y)
            for (int x = 0; x < 5; ++x) {
                double s = 0;
                for (int k = 0; k < 3; ++k) s += probs.at(n, k, y, x);
                CHECK(s == doctest::Approx(1.0).epsilon(1e-14));
            }
    Tensor flat(1, 24, 4, 4);
    for (int c = 0; c < 24; ++c)
        for (int i = 0; i < 16; ++i) flat.at(0, c, i / 4, i % 4) = 0.1 * c - 1;
    auto p = ag::softmax_channels(segmentation_head(dp, ag::constant(flat)))->value;
    for (int k = 0; k < 3; ++k)
        for (int i = 1; i < 16; ++i) CHECK(p.at(0, k, i / 4, i % 4) == p.at(0, k, 0, 0));
    CHECK_THROWS_AS(segmentation_head(dp, constant_rand({1, 16, 4, 4}, 2)), ShapeError);
}

TEST_CASE("decoder + head gradient under Dice") {
    auto cfg = toy_config();
    cfg.blocks = {7, 9};
    cfg.common_channels = 4;
    cfg.attention_pool = 2;
    cfg.head_hidden = 6;
    auto dp = DecoderParams::init(cfg, {3, 5}, 3, 4);
    std::vector<int> labels(2 * 16);
    for (size_t i = 0; i < labels.size(); ++i) labels[i] = int((i * 5) % 3);
    auto b0 = ag::leaf(testing::random_tensor({2, 3, 2, 2}, 1), true);
    auto b1 = ag::leaf(testing::random_tensor({2, 5, 4, 4}, 2), true);
    std::vector<Var> leaves{b0, b1};
    for (size_t i = 0; i < dp.params.size(); ++i) leaves.push_back(dp.params[i]);
    auto err = testing::gradient_error(
        [&](const std::vector<Var>& v) {
            auto fused = aggregate(dp, align_features(dp, {v[0], v[1]}, 4, 4));
            return ag::dice_loss(ag::softmax_channels(segmentation_head(dp, fused)), labels, 1.0);
        },
        leaves);
    CHECK(err < 1e-4);
}

TEST_CASE("training leaves the backbone frozen; zero steps returns the init") {
    Toy toy;
    auto bundle = datakit::generate_synthetic(3, 16, 16, 3, 2);
    const auto codec_sum = toy.codec.checksum(), den_sum = toy.denoiser.checksum();
    auto cfg = toy_config();

    auto zero = train_dtseg(bundle, toy.backbone(), cfg, {0, 2, 1e-3, 5});
    CHECK(zero.checksum() ==
          DecoderParams::init(cfg, block_channels_for(toy.denoiser, cfg), 3, 5).checksum());

    LossHistory h1, h2;
    auto a = train_dtseg(bundle, toy.backbone(), cfg, {6, 2, 1e-3, 5}, &h1);
    auto b = train_dtseg(bundle, toy.backbone(), cfg, {6, 2, 1e-3, 5}, &h2);
    CHECK(toy.codec.checksum() == codec_sum);
    CHECK(toy.denoiser.checksum() == den_sum);
    CHECK(a.checksum() == b.checksum());
    CHECK(h1 == h2);
    CHECK(a.checksum() != zero.checksum());

    DatasetBundle unlabeled = bundle;
    for (auto& p : unlabeled.pairs) p.mask.reset();
    CHECK_THROWS_AS(train_dtseg(unlabeled, toy.backbone(), cfg, {1, 1, 1e-3, 0}), ArgumentError);
}

TEST_CASE("ablations train and predict valid masks") {
    Toy toy;
    auto bundle = datakit::generate_synthetic(2, 16, 16, 3, 3);
    auto base = toy_config();
    std::vector<DecoderConfig> variants(4, base);
    variants[0].mode = Mode::serial;
    variants[1].self_attention = false;
    variants[2].blocks = {9};
    variants[3].timesteps = {20};
    for (const auto& cfg : variants) {
        auto dp = train_dtseg(bundle, toy.backbone(), cfg, {3, 2, 1e-3, 1});
        auto probs = predict_probs(bundle.pairs[0].image.pixels, toy.backbone(), dp);
        CHECK(probs.shape() == Shape{1, 3, 16, 16});
        auto mask = predict(bundle.pairs[0].image, toy.backbone(), dp);
        for (int v : mask.labels) CHECK((v >= 0 && v < 3));
        auto feats = predict_features(bundle.pairs[0].image.pixels, toy.backbone(), dp, 0);
        CHECK(feats.c() == dp.fused_channels());
    }
}

TEST_CASE("argmax masks pick the largest score") {
    Tensor s(1, 3, 1, 2);
    s.at(0, 0, 0, 0) = 0.1, s.at(0, 1, 0, 0) = 0.7, s.at(0, 2, 0, 0) = 0.2;
    s.at(0, 0, 0, 1) = 0.5, s.at(0, 1, 0, 1) = 0.1, s.at(0, 2, 0, 1) = 0.4;
    auto m = argmax_masks(s);
    REQUIRE(m.size() == 1);
    CHECK(m[0].at(0, 0) == 1);
    CHECK(m[0].at(0, 1) == 0);
}

TEST_CASE("default decoder stays under two million parameters") {
    auto den = diffusion::DenoiserParams::init(diffusion::DenoiserConfig{}, 0);
    DecoderConfig cfg;
    auto dp = DecoderParams::init(cfg, block_channels_for(den, cfg), 3, 0);
    CHECK(dp.params.count() < 2'000'000);
    CHECK(DecoderConfig::from_json(cfg.to_json()).to_json() == cfg.to_json());
    cfg.feature_views = 0;
    CHECK_THROWS_AS(cfg.validate(), ArgumentError);
}
