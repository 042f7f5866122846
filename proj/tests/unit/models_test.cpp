#include <gtest/gtest.h>

#include <cmath>

#include "maskdime/models.hpp"
#include "maskdime/synthdata.hpp"
#include "support/finite_diff.hpp"
#include "support/reference_nets.hpp"
#include "support/temp_dir.hpp"

using namespace maskdime;

namespace {

Tensor image(RngStream& r) {
    Tensor x({1, 32, 32});
    for (float& v : x.vec()) v = static_cast<float>(r.uniform(-1, 1));
    return x;
}

Tensor small_set(int n) {
    synth::DatasetSpec spec;
    spec.n_train = n;
    spec.n_eval = 2;
    return synth::stack_images(synth::generate_split(spec, synth::Split::train));
}

}  // namespace

TEST(EpsilonNet, UntrainedPredictsZeroSoMseIsNoiseVariance) {
    const EpsilonNet net(1);
    RngStream r(2);
    const Tensor eps = r.normal_tensor({1, 32, 32});
    const Tensor pred = net.predict(eps, 100);
    double mse = 0;
    for (std::size_t i = 0; i < eps.numel(); ++i) mse += (pred[i] - eps[i]) * (pred[i] - eps[i]);
    EXPECT_NEAR(mse / eps.numel(), 1.0, 0.1);
}

TEST(EpsilonNet, ShapesAndBatchConsistency) {
    EpsilonNet net(3);
    RngStream r(4);
    Tensor& w = net.params[net.params.find("out.w")];
    for (float& v : w.vec()) v = static_cast<float>(0.05 * r.normal());
    const Tensor a = image(r), b = image(r);
    Tensor both({2, 1, 32, 32});
    std::copy(a.vec().begin(), a.vec().end(), both.data());
    std::copy(b.vec().begin(), b.vec().end(), both.data() + a.numel());
    const Tensor pb = net.predict(both, 17);
    EXPECT_EQ(net.predict(a, 17).shape(), a.shape());
    const Tensor pa = net.predict(a, 17);
    for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(pb[i], pa[i], 1e-5);
    EXPECT_THROW(net.predict(Tensor({1, 30, 32}), 5), ShapeError);
}

TEST(EpsilonNet, TrainingIsDeterministic) {
    const Tensor x = small_set(32);
    EpsTrainConfig cfg;
    cfg.epochs = 1;
    cfg.seed = 9;
    const EpsilonNet a = train_epsilon(x, Schedule::linear(), cfg);
    const EpsilonNet b = train_epsilon(x, Schedule::linear(), cfg);
    ASSERT_EQ(a.params.count(), b.params.count());
    for (std::size_t i = 0; i < a.params.size(); ++i) EXPECT_TRUE(a.params[i].bit_equal(b.params[i]));
    EXPECT_TRUE(std::isfinite(a.final_loss));
}

TEST(EpsilonNet, CheckpointRoundTrip) {
    testing_support::TempDir dir;
    EpsilonNet net(5);
    RngStream r(6);
    for (float& v : net.params[net.params.find("out.w")].vec()) v = static_cast<float>(r.normal());
    persist::save_checkpoint(dir.path() / "eps.mdck", net.params.to_checkpoint(EpsilonNet::kKind));
    EpsilonNet back(99);
    back.params.load(persist::load_checkpoint(dir.path() / "eps.mdck"), EpsilonNet::kKind);
    const Tensor z = image(r);
    EXPECT_TRUE(net.predict(z, 50).bit_equal(back.predict(z, 50)));
    Classifier c;
    EXPECT_THROW(c.params.load(persist::load_checkpoint(dir.path() / "eps.mdck"), Classifier::kKind), FormatError);
}

TEST(Classifier, ProbabilitiesAreNormalized) {
    const Classifier c(7);
    RngStream r(8);
    for (int i = 0; i < 20; ++i) {
        const Tensor p = c.probs(image(r));
        EXPECT_NEAR(p[0] + p[1], 1.0, 1e-6);
        EXPECT_GE(p[0], 0.0f);
        EXPECT_GE(p[1], 0.0f);
    }
}

TEST(Classifier, SymmetricHeadGivesHalf) {
    Classifier c(9);
    Tensor& w = c.params[c.params.find("head.w")];
    for (int j = 0; j < w.dim(1); ++j) w[static_cast<std::size_t>(w.dim(1) + j)] = w[static_cast<std::size_t>(j)];
    Tensor& b = c.params[c.params.find("head.b")];
    b[1] = b[0];
    RngStream r(10);
    EXPECT_EQ(c.class_prob(image(r), 1), 0.5f);
}

TEST(Classifier, MatchesDoubleReference) {
    const Classifier c(11);
    RngStream r(12);
    for (int i = 0; i < 5; ++i) {
        const Tensor x = image(r);
        Tape tape(false);
        const Tensor logits = c.forward(tape, c.params.bind(tape, false), tape.constant(nets::as_batch(x))).logits.value();
        const std::vector<double> ref = testing_support::classifier_logits(c, x);
        EXPECT_NEAR(logits[0], ref[0], 1e-4);
        EXPECT_NEAR(logits[1], ref[1], 1e-4);
    }
}

// Tape gradient of log p(y|x) against central differences of the double reference,
// on a random subset of coordinates per input.
TEST(Classifier, InputGradientMatchesFiniteDifferences) {
    const Classifier c(13);
    RngStream r(14);
    for (int n = 0; n < 20; ++n) {
        const Tensor x = image(r);
        const int y = n % 2;
        Tape tape;
        Var xv = tape.variable(nets::as_batch(x));
        Var lp = ndgrad::pick(ndgrad::log_softmax(c.forward(tape, c.params.bind(tape, false), xv).logits), {y});
        const Tensor g = tape.grad(lp, xv);
        double worst = 0, scale = 0;
        int used = 0;
        for (int k = 0; k < 24; ++k) {
            const std::size_t i = static_cast<std::size_t>(r.uniform_int(0, 1023));
            const auto fd = testing_support::coordinate_difference(
                x, i, 1e-4, [&](const Tensor& v) { return -testing_support::class_loss(c, v, y); });
            if (!fd) continue;
            ++used;
            worst = std::max(worst, std::fabs(*fd - g[i]));
            scale = std::max(scale, std::fabs(*fd));
        }
        EXPECT_GE(used, 16);
        EXPECT_LE(worst / std::max(scale, 1e-6), 1e-3) << n;
    }
}

TEST(Classifier, TrainingIsDeterministic) {
    synth::DatasetSpec spec;
    spec.n_train = 64;
    const auto s = synth::generate_split(spec, synth::Split::train);
    std::vector<int> labels;
    for (const auto& v : s) labels.push_back(v.label);
    ClfTrainConfig cfg;
    cfg.epochs = 1;
    const Classifier a = train_classifier(synth::stack_images(s), labels, cfg);
    const Classifier b = train_classifier(synth::stack_images(s), labels, cfg);
    for (std::size_t i = 0; i < a.params.size(); ++i) EXPECT_TRUE(a.params[i].bit_equal(b.params[i]));
    EXPECT_THROW(train_classifier(synth::stack_images(s), {1, 0}, cfg), ArgumentError);
}

TEST(FeatureNet, MatchesDoubleReference) {
    const FeatureNet f(15);
    RngStream r(16);
    const Tensor x = image(r);
    const Tensor a = f.features(x);
    const std::vector<double> ref = testing_support::features(f, x);
    ASSERT_EQ(a.numel(), ref.size());
    ASSERT_EQ(a.numel(), 128u);
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(a[i], ref[i], 1e-4);
}

// Independent noise images must not collapse to one feature direction.
TEST(FeatureNet, NoiseImagesAreNotCollinear) {
    const FeatureNet f(1);
    RngStream r(17);
    double acc = 0;
    int n = 0;
    for (int i = 0; i < 50; ++i) {
        const Tensor a = f.features(r.normal_tensor({1, 32, 32}));
        const Tensor b = f.features(r.normal_tensor({1, 32, 32}));
        acc += std::fabs(cosine(a, b));
        ++n;
    }
    EXPECT_LT(acc / n, 0.9);
}

TEST(TimestepEmbedding, DistinctPerStep) {
    const Tensor e = timestep_embedding({1, 2, 200});
    EXPECT_EQ(e.shape(), (Shape{3, 64}));
    double d = 0;
    for (int j = 0; j < 64; ++j) d += std::fabs(e[static_cast<std::size_t>(j)] - e[static_cast<std::size_t>(64 + j)]);
    EXPECT_GT(d, 1e-3);
}
