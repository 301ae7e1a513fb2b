#include "cdfsod/proto.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace cdfsod;
using testutil::code_of;

namespace {

Embedding random_embedding(std::mt19937_64& rng, std::size_t dim) {
    std::normal_distribution<double> g(0.0, 1.0);
    std::vector<double> v(dim);
    for (double& x : v) x = g(rng);
    return Embedding(v);
}

void expect_near(const Embedding& a, const Embedding& b, double tol) {
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], tol) << "component " << i;
}

}  // namespace

TEST(MeanPrototype, SingleInstanceNormalized) {
    const std::vector<Embedding> xs{Embedding{0, 3, 4}};
    expect_near(mean_prototype(xs), Embedding{0, 0.6, 0.8}, 1e-15);
}

TEST(MeanPrototype, OppositeVectorsCancel) {
    const std::vector<Embedding> xs{Embedding{1, 0}, Embedding{-1, 0}};
    EXPECT_EQ(code_of([&] { mean_prototype(xs); }), Errc::ZeroVector);
}

TEST(MeanPrototype, TwoAxes) {
    const std::vector<Embedding> xs{Embedding{1, 0}, Embedding{0, 1}};
    const double h = std::sqrt(2.0) / 2.0;
    expect_near(mean_prototype(xs), Embedding{h, h}, 1e-15);
}

TEST(MeanPrototype, Empty) { EXPECT_EQ(code_of([] { mean_prototype({}); }), Errc::EmptyClass); }

TEST(ReweightedPrototype, AlphaZeroIsMean) {
    std::mt19937_64 rng(1);
    std::vector<Embedding> xs;
    for (int i = 0; i < 5; ++i) xs.push_back(random_embedding(rng, 6));
    const std::vector<double> w{0.1, 3.0, 0.2, 0.0, 1.0};
    expect_near(reweighted_prototype(xs, w, 0.0), mean_prototype(xs), 1e-12);
}

TEST(ReweightedPrototype, UniformWeightsIsMean) {
    std::mt19937_64 rng(2);
    std::vector<Embedding> xs;
    for (int i = 0; i < 4; ++i) xs.push_back(random_embedding(rng, 6));
    const std::vector<double> w(4, 0.8);
    for (double alpha : {0.0, 0.3, 0.7, 1.0}) expect_near(reweighted_prototype(xs, w, alpha), mean_prototype(xs), 1e-12);
}

TEST(ReweightedPrototype, SoftmaxByHand) {
    // softmax(ln 3, 0) = (3/4, 1/4)
    const std::vector<Embedding> xs{Embedding{1, 0}, Embedding{0, 1}};
    const std::vector<double> w{std::log(3.0), 0.0};
    const double n = std::sqrt(0.75 * 0.75 + 0.25 * 0.25);
    expect_near(reweighted_prototype(xs, w, 1.0), Embedding{0.75 / n, 0.25 / n}, 1e-12);
}

TEST(ReweightedPrototype, ShiftInvariance) {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0.0, 4.0);
    for (int t = 0; t < 50; ++t) {
        std::vector<Embedding> xs;
        std::vector<double> w, shifted;
        const double c = u(rng);
        for (int i = 0; i < 5; ++i) {
            xs.push_back(random_embedding(rng, 8));
            w.push_back(u(rng));
            shifted.push_back(w.back() + c);
        }
        expect_near(reweighted_prototype(xs, w, 0.7), reweighted_prototype(xs, shifted, 0.7), 1e-12);
    }
}

TEST(ReweightedPrototype, Errors) {
    const std::vector<Embedding> xs{Embedding{1, 0}, Embedding{0, 1}};
    EXPECT_EQ(code_of([&] { reweighted_prototype(xs, std::vector<double>{-1, 0}, 0.5); }), Errc::NegativeWeight);
    EXPECT_EQ(code_of([&] { reweighted_prototype(xs, std::vector<double>{1}, 0.5); }), Errc::InvalidArgument);
    EXPECT_EQ(code_of([&] { reweighted_prototype(xs, std::vector<double>{1, 1}, 1.5); }), Errc::InvalidArgument);
    EXPECT_EQ(code_of([&] { reweighted_prototype({}, {}, 0.5); }), Errc::EmptyClass);
}

TEST(MultiscaleFuse, IdenticalScales) {
    const Embedding e{0.6, 0.8};
    const std::vector<ScaledEmbedding> s{{0.9, e}, {1.0, e}, {1.1, e}, {1.2, e}};
    expect_near(multiscale_fuse(s), e, 1e-15);
}

TEST(MultiscaleFuse, ColdLimitPicksBestQuality) {
    const std::vector<ScaledEmbedding> s{{1.0, Embedding{1, 0}}, {1.1, Embedding{0, 1}}, {1.2, Embedding{0.6, 0.8}}};
    const std::vector<double> q{0.2, 0.5, 0.1};
    expect_near(multiscale_fuse(s, q, 1e-6), Embedding{0, 1}, 1e-3);
}

TEST(MultiscaleFuse, TwoScaleSoftmaxByHand) {
    const std::vector<ScaledEmbedding> s{{1.0, Embedding{1, 0}}, {1.1, Embedding{0, 1}}};
    const std::vector<double> q{0.1, 0.0};
    const double e = std::exp(1.0);
    const double w0 = e / (e + 1.0), w1 = 1.0 / (e + 1.0);
    EXPECT_NEAR(w0, 0.7311, 1e-4);
    const double n = std::hypot(w0, w1);
    expect_near(multiscale_fuse(s, q, 0.1), Embedding{w0 / n, w1 / n}, 1e-12);
}

TEST(MultiscaleFuse, JointScalingOfQualityAndTemperature) {
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int t = 0; t < 50; ++t) {
        std::vector<ScaledEmbedding> s;
        std::vector<double> q, q2;
        const double k = 0.1 + 5.0 * u(rng);
        for (double sc : default_scales()) {
            s.push_back({sc, random_embedding(rng, 6)});
            q.push_back(u(rng));
            q2.push_back(q.back() * k);
        }
        expect_near(multiscale_fuse(s, q, 0.3), multiscale_fuse(s, q2, 0.3 * k), 1e-12);
    }
}

TEST(MultiscaleFuse, Errors) {
    const std::vector<ScaledEmbedding> s{{1.0, Embedding{1, 0}}};
    EXPECT_EQ(code_of([] { multiscale_fuse({}, 0.1); }), Errc::EmptyInput);
    EXPECT_EQ(code_of([&] { multiscale_fuse(s, 0.0); }), Errc::NonPositiveTemperature);
    EXPECT_EQ(code_of([&] { multiscale_fuse(s, std::vector<double>{1, 2}, 0.1); }), Errc::InvalidArgument);
}

TEST(Jitter, ForcedFailure) {
    const std::vector<PositiveBox> p{{{10, 10, 10, 10}, 100, 100}};
    JitterOptions o;
    o.shift_frac = 0.0;
    o.scale_min = o.scale_max = 1.0;
    EXPECT_EQ(code_of([&] { jitter_negatives(p, o); }), Errc::RetryExhausted);
}

TEST(Jitter, DeterministicForSeed) {
    const std::vector<PositiveBox> p{{{10, 10, 10, 10}, 100, 100}, {{50, 40, 30, 20}, 100, 100}};
    JitterOptions o;
    o.seed = 9;
    EXPECT_EQ(jitter_negatives(p, o), jitter_negatives(p, o));
    auto o2 = o;
    o2.seed = 10;
    EXPECT_NE(jitter_negatives(p, o), jitter_negatives(p, o2));
}

TEST(Jitter, LowOverlapAndInsideImage) {
    const std::vector<PositiveBox> p{{{45, 45, 10, 10}, 100, 100}};
    JitterOptions o;
    o.n_per_box = 4;
    o.seed = 3;
    const auto boxes = jitter_negatives(p, o);
    ASSERT_EQ(boxes.size(), 4u);
    for (const auto& b : boxes) {
        EXPECT_LT(oracle::box_iou(b, p[0].box), 0.5);
        EXPECT_GE(b.x, 0.0);
        EXPECT_GE(b.y, 0.0);
        EXPECT_LE(b.x + b.w, 100.0 + 1e-9);
        EXPECT_LE(b.y + b.h, 100.0 + 1e-9);
        EXPECT_GT(b.w, 0.0);
        EXPECT_GT(b.h, 0.0);
    }
}

TEST(Jitter, ManyPositivesRespectBound) {
    std::mt19937_64 rng(12);
    std::vector<PositiveBox> p;
    for (int i = 0; i < 30; ++i) {
        auto b = oracle::random_box(rng, 150.0, 4.0, 50.0);
        p.push_back({b, 200, 200});
    }
    JitterOptions o;
    o.seed = 5;
    const auto boxes = jitter_negatives(p, o);
    ASSERT_EQ(boxes.size(), p.size() * o.n_per_box);
    for (std::size_t i = 0; i < boxes.size(); ++i) EXPECT_LT(oracle::box_iou(boxes[i], p[i / o.n_per_box].box), 0.5);
}

TEST(BackgroundPrototypes, RoundRobinMeans) {
    const std::vector<Embedding> neg{Embedding{1, 0}, Embedding{0, 1}, Embedding{1, 0}, Embedding{0, 1}, Embedding{1, 1}};
    const auto bg = background_prototypes(neg, 2);
    ASSERT_EQ(bg.size(), 2u);
    // bucket 0: e0, e2, e4 -> (3, 1); bucket 1: e1, e3 -> (0, 2)
    const double n = std::sqrt(10.0);
    expect_near(bg[0], Embedding{3 / n, 1 / n}, 1e-12);
    expect_near(bg[1], Embedding{0, 1}, 1e-12);
    EXPECT_EQ(background_prototypes(neg, 16).size(), neg.size());
    EXPECT_TRUE(background_prototypes({}, 16).empty());
}

TEST(BuildPrototypes, UnitNormAndJsonRoundTrip) {
    std::mt19937_64 rng(6);
    std::map<CategoryId, ClassInstances> per_class;
    for (CategoryId c = 1; c <= 3; ++c)
        for (int i = 0; i < 5; ++i) per_class[c].instances.push_back(random_embedding(rng, 10));
    per_class[2].weights = {0.1, 0.2, 0.3, 0.4, 0.5};
    std::vector<Embedding> neg;
    for (int i = 0; i < 20; ++i) neg.push_back(random_embedding(rng, 10));
    const auto set = build_prototypes(per_class, neg);
    EXPECT_EQ(set.class_protos.size(), 3u);
    EXPECT_EQ(set.bg_protos.size(), kDefaultBackgroundCount);
    EXPECT_DOUBLE_EQ(set.alpha, 0.7);
    for (const auto& [c, p] : set.class_protos) EXPECT_NEAR(norm(p), 1.0, 1e-12);
    expect_near(set.class_protos.at(1), mean_prototype(per_class[1].instances), 1e-12);
    expect_near(set.class_protos.at(2), reweighted_prototype(per_class[2].instances, per_class[2].weights, 0.7), 1e-12);

    const auto back = prototypes_from_json(prototypes_to_json(set));
    ASSERT_EQ(back.class_protos.size(), 3u);
    for (const auto& [c, p] : set.class_protos) expect_near(back.class_protos.at(c), p, 1e-12);
    EXPECT_EQ(back.bg_protos.size(), set.bg_protos.size());
}

TEST(BuildPrototypes, MalformedJson) {
    EXPECT_EQ(code_of([] { prototypes_from_json(nlohmann::json::array()); }), Errc::MalformedJson);
}
