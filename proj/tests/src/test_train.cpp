#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include <doctest.h>

#include "liverformer/model.hpp"
#include "liverformer/rng.hpp"
#include "liverformer/train.hpp"
#include "support.hpp"

using namespace liverformer;

TEST_CASE("lr schedule lands exactly on the decade rungs") {
    TrainConfig cfg;

    // Exact equality on purpose: repeated multiplication by the double
    // nearest 0.1 happens to round to the doubles nearest 1e-4 and 1e-5,
    // and the schedule promises those values bit-for-bit.
    CHECK(lr_at(0, cfg) == 1e-3);
    CHECK(lr_at(1, cfg) == 1e-3);
    CHECK(lr_at(49, cfg) == 1e-3);
    CHECK(lr_at(50, cfg) == 1e-4);
    CHECK(lr_at(99, cfg) == 1e-4);
    CHECK(lr_at(100, cfg) == 1e-5);
    CHECK(lr_at(149, cfg) == 1e-5);

    SUBCASE("decay_every and factor are honored") {
        cfg.decay_every = 10;
        cfg.decay_factor = 0.5;
        cfg.lr0 = 1.0;
        CHECK(lr_at(9, cfg) == 1.0);
        CHECK(lr_at(10, cfg) == 0.5);
        CHECK(lr_at(20, cfg) == 0.25);
    }
}

TEST_CASE("train config validation") {
    TrainConfig cfg;
    CHECK_NOTHROW(cfg.validate());

    SUBCASE("decay factor zero") {
        cfg.decay_factor = 0.0;
        CHECK_THROWS_AS(cfg.validate(), TrainError);
    }
    SUBCASE("decay factor above one") {
        cfg.decay_factor = 1.5;
        CHECK_THROWS_AS(cfg.validate(), TrainError);
    }
    SUBCASE("non-positive counts") {
        cfg.epochs = 0;
        CHECK_THROWS_AS(cfg.validate(), TrainError);
    }
    SUBCASE("ratios must sum to one") {
        cfg.train_ratio = 0.5;
        cfg.val_ratio = 0.1;
        cfg.test_ratio = 0.1;
        CHECK_THROWS_AS(cfg.validate(), TrainError);
    }
}

TEST_CASE("split_dataset produces the 87/18/18 protocol split") {
    TrainConfig cfg;
    const SplitIndices s =
        split_dataset(123, {cfg.train_ratio, cfg.val_ratio, cfg.test_ratio}, 7);
    CHECK(s.train.size() == 87);
    CHECK(s.val.size() == 18);
    CHECK(s.test.size() == 18);

    // A partition: every index 0..122 exactly once.
    std::vector<std::size_t> all;
    all.insert(all.end(), s.train.begin(), s.train.end());
    all.insert(all.end(), s.val.begin(), s.val.end());
    all.insert(all.end(), s.test.begin(), s.test.end());
    std::sort(all.begin(), all.end());
    std::vector<std::size_t> expect(123);
    std::iota(expect.begin(), expect.end(), std::size_t{0});
    CHECK(all == expect);
}

TEST_CASE("split_dataset determinism and seed sensitivity") {
    const std::array<double, 3> ratios{0.6, 0.2, 0.2};
    const SplitIndices a = split_dataset(50, ratios, 11);
    const SplitIndices b = split_dataset(50, ratios, 11);
    CHECK(a.train == b.train);
    CHECK(a.val == b.val);
    CHECK(a.test == b.test);

    const SplitIndices c = split_dataset(50, ratios, 12);
    CHECK(a.train != c.train);
}

TEST_CASE("largest-remainder rounding hands ties to the earlier split") {
    // 10 * {0.5, 0.25, 0.25} = {5, 2.5, 2.5}: one leftover seat, and the
    // tied fractional parts resolve in favor of val over test.
    const SplitIndices s = split_dataset(10, {0.5, 0.25, 0.25}, 0);
    CHECK(s.train.size() == 5);
    CHECK(s.val.size() == 3);
    CHECK(s.test.size() == 2);
}

TEST_CASE("split_dataset rejects degenerate inputs") {
    CHECK_THROWS_AS(split_dataset(2, {0.4, 0.3, 0.3}, 0), TooFewCases);
    CHECK_THROWS_AS(split_dataset(10, {0.5, 0.1, 0.1}, 0), TrainError);

    const SplitIndices s = split_dataset(3, {1.0 / 3, 1.0 / 3, 1.0 / 3}, 0);
    CHECK(s.train.size() == 1);
    CHECK(s.val.size() == 1);
    CHECK(s.test.size() == 1);
}

TEST_CASE("adam first step matches the closed form") {
    // With fresh moments, mhat == g and vhat == g*g, so the first update is
    // lr * g / (|g| + eps) regardless of beta values.
    std::vector<ad::Tensor<double>> params;
    params.push_back(ad::Tensor<double>::parameter({2}, {1.0, -2.0}, "p"));
    params[0].grad() = {0.5, -0.25};

    AdamState<double> state;
    adam_step(params, state, 0.1, 0.9, 0.999, 1e-8);

    CHECK(state.t == 1);
    CHECK(params[0].value()[0] ==
          doctest::Approx(1.0 - 0.1 * 0.5 / (0.5 + 1e-8)).epsilon(1e-12));
    CHECK(params[0].value()[1] ==
          doctest::Approx(-2.0 + 0.1 * 0.25 / (0.25 + 1e-8)).epsilon(1e-12));
}

TEST_CASE("adam minimizes a quadratic") {
    std::vector<ad::Tensor<double>> params;
    params.push_back(ad::Tensor<double>::parameter({1}, {3.0}, "x"));
    AdamState<double> state;
    for (int i = 0; i < 400; ++i) {
        params[0].grad() = {params[0].value()[0]};  // d/dx of x^2 / 2
        adam_step(params, state, 0.1, 0.9, 0.999, 1e-8);
    }
    CHECK(std::abs(params[0].value()[0]) < 1e-2);
}

TEST_CASE("adam rejects a registry that changed shape underneath it") {
    std::vector<ad::Tensor<double>> params;
    params.push_back(ad::Tensor<double>::parameter({2}, {1.0, 2.0}, "p"));
    params[0].grad() = {0.1, 0.1};
    AdamState<double> state;
    adam_step(params, state, 0.1, 0.9, 0.999, 1e-8);

    params.push_back(ad::Tensor<double>::parameter({1}, {0.0}, "q"));
    CHECK_THROWS_AS(adam_step(params, state, 0.1, 0.9, 0.999, 1e-8), ad::ShapeMismatch);
}

namespace {

// Tiny but learnable: intensity tracks the label, so a few epochs of Adam
// separate the classes.
LiverFormerConfig trainer_config() {
    LiverFormerConfig cfg;
    cfg.encoder_channels = {4};
    cfg.encoder_strides = {1};
    cfg.patch_size = 2;
    cfg.hidden_dim = 8;
    cfg.transformer_layers = 1;
    cfg.heads = 2;
    cfg.mlp_ratio = 2;
    cfg.classes = 3;
    cfg.input_dims = Dims{4, 4, 4};
    return cfg;
}

LabeledCase make_case(std::uint64_t seed, const char* id) {
    const Dims dims{4, 4, 4};
    Rng rng(seed);
    LabeledCase c;
    c.id = id;
    c.image = ImageVolume(dims, {1, 1, 1});
    c.labels = LabelVolume(dims, {1, 1, 1});
    for (std::size_t d = 0; d < dims.d; ++d)
        for (std::size_t h = 0; h < dims.h; ++h)
            for (std::size_t w = 0; w < dims.w; ++w) {
                const std::uint8_t cls = w < 2 ? (h < 2 ? 0 : 1) : 2;
                c.labels.data[c.labels.index(d, h, w)] = cls;
                c.image.data[c.image.index(d, h, w)] =
                    0.15f + 0.3f * static_cast<float>(cls) +
                    0.02f * static_cast<float>(rng.uniform() - 0.5);
            }
    return c;
}

}  // namespace

TEST_CASE("trainer logs epochs and improves the loss") {
    Rng rng(3);
    LiverFormer<float> model(trainer_config(), rng);

    std::vector<LabeledCase> train{make_case(1, "a"), make_case(2, "b")};
    std::vector<LabeledCase> val{make_case(3, "v")};
    TrainConfig cfg;
    cfg.lr0 = 1e-2;
    cfg.seed = 5;

    Trainer<LiverFormer<float>> tr(model, train, val, cfg);
    for (int e = 0; e < 8; ++e) tr.run_epoch();

    const auto& hist = tr.history();
    REQUIRE(hist.size() == 8);
    for (int e = 0; e < 8; ++e) {
        CHECK(hist[e].epoch == e);
        CHECK(hist[e].lr == lr_at(e, cfg));
        CHECK(std::isfinite(hist[e].train_loss));
        CHECK(std::isfinite(hist[e].val_dice));
    }
    CHECK(hist.back().train_loss < hist.front().train_loss);
    CHECK(tr.has_best());
    CHECK(tr.best_val_dice() >= 0.0);
}

TEST_CASE("identically seeded runs emit byte-identical logs") {
    std::vector<LabeledCase> train{make_case(1, "a"), make_case(2, "b")};
    std::vector<LabeledCase> val{make_case(3, "v")};
    TrainConfig cfg;
    cfg.lr0 = 1e-2;
    cfg.seed = 9;

    std::string log_a, log_b;
    for (std::string* log : {&log_a, &log_b}) {
        Rng rng(21);
        LiverFormer<float> model(trainer_config(), rng);
        Trainer<LiverFormer<float>> tr(model, train, val, cfg);
        for (int e = 0; e < 4; ++e) tr.run_epoch();
        *log = tr.log_csv();
    }
    CHECK(log_a == log_b);
    CHECK(log_a.rfind("epoch,lr,train_loss,val_dice\n", 0) == 0);
    CHECK(std::count(log_a.begin(), log_a.end(), '\n') == 5);
}

TEST_CASE("restore_best returns the parameters of the best-validation epoch") {
    Rng rng(17);
    LiverFormer<float> model(trainer_config(), rng);

    std::vector<LabeledCase> train{make_case(1, "a"), make_case(2, "b")};
    std::vector<LabeledCase> val{make_case(3, "v")};
    TrainConfig cfg;
    cfg.lr0 = 1e-2;
    cfg.seed = 2;

    Trainer<LiverFormer<float>> tr(model, train, val, cfg);
    for (int e = 0; e < 6; ++e) tr.run_epoch();
    REQUIRE(tr.has_best());

    tr.restore_best();
    const double redone = mean_case_dice(model, val);
    CHECK(redone == doctest::Approx(tr.best_val_dice()).epsilon(1e-12));
}

TEST_CASE("training without a validation split leaves val_dice empty") {
    Rng rng(8);
    LiverFormer<float> model(trainer_config(), rng);

    std::vector<LabeledCase> train{make_case(1, "a")};
    TrainConfig cfg;
    cfg.seed = 1;

    Trainer<LiverFormer<float>> tr(model, train, {}, cfg);
    tr.run_epoch();
    CHECK(std::isnan(tr.history()[0].val_dice));
    CHECK_FALSE(tr.has_best());

    const std::string log = tr.log_csv();
    CHECK(log.find(",\n") != std::string::npos);
}

TEST_CASE("trainer refuses an empty train split") {
    Rng rng(4);
    LiverFormer<float> model(trainer_config(), rng);
    TrainConfig cfg;
    CHECK_THROWS_AS((Trainer<LiverFormer<float>>(model, {}, {}, cfg)), TooFewCases);
}

TEST_CASE("train_loop runs the configured number of epochs") {
    Rng rng(6);
    LiverFormer<float> model(trainer_config(), rng);
    std::vector<LabeledCase> train{make_case(1, "a")};
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.seed = 0;

    auto tr = train_loop(model, train, {}, cfg);
    CHECK(tr.history().size() == 3);
}
