#include "cdfsod/evalmod.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

using namespace cdfsod;
using testutil::code_of;

namespace {

DatasetSplit small_gt() {
    DatasetSplit gt;
    gt.categories = {{1, "a"}, {2, "b"}};
    gt.images = {{1, 100, 100, ""}, {2, 100, 100, ""}, {3, 100, 100, ""}};
    gt.annotations = {{1, {10, 10, 20, 20}, 1, 1, true, std::nullopt}, {1, {50, 50, 30, 30}, 2, 2, true, std::nullopt},
                      {2, {5, 5, 40, 40}, 1, 3, true, std::nullopt},   {3, {60, 10, 20, 25}, 2, 4, true, std::nullopt},
                      {3, {10, 60, 15, 15}, 1, 5, true, std::nullopt}};
    return gt;
}

ScoreCells cells_of(const std::array<double, 9>& v) {
    ScoreCells c{};
    for (std::size_t i = 0; i < 9; ++i) c[i / 3][i % 3] = v[i];
    return c;
}

}  // namespace

TEST(Thresholds, CocoGrid) {
    const auto t = coco_iou_thresholds();
    ASSERT_EQ(t.size(), 10u);
    EXPECT_EQ(t.front(), 0.5);
    EXPECT_EQ(t.back(), 0.95);
    const auto r = coco_recall_thresholds();
    ASSERT_EQ(r.size(), 101u);
    EXPECT_EQ(r.front(), 0.0);
    EXPECT_EQ(r.back(), 1.0);
}

TEST(CocoMap, PerfectDetections) {
    const auto gt = small_gt();
    std::vector<Detection> d;
    for (const auto& a : gt.annotations) d.push_back({a.image_id, a.box, a.category_id, 1.0, std::nullopt});
    const auto rep = coco_map(d, gt);
    EXPECT_EQ(rep.map, 1.0);
    for (double m : rep.map_per_threshold) EXPECT_EQ(m, 1.0);
}

TEST(CocoMap, NoDetections) { EXPECT_EQ(coco_map({}, small_gt()).map, 0.0); }

TEST(CocoMap, ConstructedCaseMatchesOracle) {
    const auto gt = small_gt();
    const std::vector<Detection> d{
        {1, {11, 10, 20, 21}, 1, 0.9, std::nullopt},  // good match
        {1, {50, 55, 30, 30}, 2, 0.8, std::nullopt},  // iou ~0.71
        {2, {5, 5, 40, 40}, 2, 0.7, std::nullopt},    // wrong class
        {2, {8, 8, 40, 40}, 1, 0.6, std::nullopt},    // iou ~0.75
        {3, {60, 10, 20, 25}, 2, 0.95, std::nullopt}, // exact
        {3, {70, 70, 10, 10}, 1, 0.85, std::nullopt}, // false positive
    };
    const auto rep = coco_map(d, gt);
    EXPECT_NEAR(rep.map, oracle::coco_map(d, gt), 1e-9);
    EXPECT_GT(rep.map, 0.0);
    EXPECT_LT(rep.map, 1.0);
}

TEST(CocoMap, RandomMicroDatasetsMatchOracle) {
    std::mt19937_64 rng(2024);
    for (int t = 0; t < 100; ++t) {
        const auto mc = oracle::random_micro(rng);
        EXPECT_NEAR(coco_map(mc.dets, mc.gt).map, oracle::coco_map(mc.dets, mc.gt), 1e-9) << "case " << t;
    }
}

TEST(CocoMap, MaxDetsCapsPerImage) {
    const auto gt = small_gt();
    std::vector<Detection> d;
    for (int k = 0; k < 5; ++k) d.push_back({1, {70, 0, 5, 5}, 1, 0.9 - 0.01 * k, std::nullopt});
    d.push_back({1, {10, 10, 20, 20}, 1, 0.1, std::nullopt});
    EvalSettings s;
    s.max_dets = 3;
    EXPECT_NEAR(coco_map(d, gt, s).map, oracle::coco_map(d, gt, 3), 1e-12);
    s.max_dets = 100;
    EXPECT_GT(coco_map(d, gt, s).map, coco_map(d, gt, EvalSettings{coco_iou_thresholds(), 3}).map);
}

TEST(CocoMap, InputOrderInvariant) {
    std::mt19937_64 rng(9);
    for (int t = 0; t < 50; ++t) {
        auto mc = oracle::random_micro(rng);
        for (auto& d : mc.dets) d.score = std::uniform_real_distribution<double>(0.0, 1.0)(rng);  // no ties
        const double a = coco_map(mc.dets, mc.gt).map;
        std::shuffle(mc.dets.begin(), mc.dets.end(), rng);
        EXPECT_EQ(coco_map(mc.dets, mc.gt).map, a);
    }
}

TEST(CocoMap, ZeroScoreFalsePositiveNeverRaisesAp) {
    std::mt19937_64 rng(10);
    for (int t = 0; t < 100; ++t) {
        auto mc = oracle::random_micro(rng);
        for (auto& d : mc.dets) d.score = 0.01 + 0.99 * d.score;
        const auto before = coco_map(mc.dets, mc.gt);
        mc.dets.push_back({mc.gt.images[0].id, {300, 300, 5, 5}, mc.gt.categories[0].id, 0.0, std::nullopt});
        const auto after = coco_map(mc.dets, mc.gt);
        for (std::size_t k = 0; k < before.map_per_threshold.size(); ++k)
            EXPECT_LE(after.map_per_threshold[k], before.map_per_threshold[k] + 1e-15);
    }
}

TEST(CocoMap, ApBounded) {
    std::mt19937_64 rng(12);
    for (int t = 0; t < 100; ++t) {
        const auto mc = oracle::random_micro(rng);
        const auto rep = coco_map(mc.dets, mc.gt);
        for (const auto& [c, ap] : rep.per_class_ap) {
            EXPECT_GE(ap, 0.0);
            EXPECT_LE(ap, 1.0);
        }
        for (double m : rep.map_per_threshold) {
            EXPECT_GE(m, 0.0);
            EXPECT_LE(m, 1.0);
        }
    }
}

TEST(CocoMap, ClassesWithoutGtExcluded) {
    auto gt = small_gt();
    gt.categories.push_back({3, "c"});
    std::vector<Detection> d;
    for (const auto& a : gt.annotations) d.push_back({a.image_id, a.box, a.category_id, 1.0, std::nullopt});
    d.push_back({1, {0, 0, 5, 5}, 3, 0.5, std::nullopt});
    d.push_back({1, {0, 0, 5, 5}, 9, 0.5, std::nullopt});
    const auto rep = coco_map(d, gt);
    EXPECT_EQ(rep.map, 1.0);
    EXPECT_EQ(rep.per_class_ap.count(3), 0u);
}

TEST(CocoMap, Errors) {
    const auto gt = small_gt();
    const std::vector<Detection> d{{7, {0, 0, 5, 5}, 1, 0.5, std::nullopt}};
    EXPECT_EQ(code_of([&] { coco_map(d, gt); }), Errc::UnknownImageId);
    DatasetSplit empty = gt;
    empty.annotations.clear();
    EXPECT_EQ(code_of([&] { coco_map({}, empty); }), Errc::EmptyGroundTruth);
}

TEST(ChallengeScore, PublishedRows) {
    const auto& rows = oracle::leaderboard();
    EXPECT_NEAR(challenge_score(cells_of(rows[0].cells)), 217.21, 0.005);
    EXPECT_NEAR(challenge_score(cells_of(rows[1].cells)), 192.79, 0.005);
    for (const auto& row : rows) {
        const auto card = make_scorecard(cells_of(row.cells));
        const long long got = std::llround(card.score_rounded * 100);
        EXPECT_EQ(got, oracle::score_hundredths(row.cells)) << row.team;
        EXPECT_LE(std::llabs(got - std::llround(row.score * 100)), 1) << row.team;
    }
}

TEST(ChallengeScore, ZeroCells) { EXPECT_EQ(challenge_score(ScoreCells{}), 0.0); }

TEST(ChallengeScore, LinearCoefficients) {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0.0, 90.0);
    ScoreCells base{};
    for (auto& r : base)
        for (auto& c : r) c = u(rng);
    const double s0 = challenge_score(base);
    const double coef[3] = {2.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0};
    for (std::size_t d = 0; d < 3; ++d) {
        for (std::size_t k = 0; k < 3; ++k) {
            auto p = base;
            p[d][k] += 1.5;
            EXPECT_NEAR(challenge_score(p) - s0, 1.5 * coef[k], 1e-12);
        }
    }
}

TEST(ChallengeScore, CellRangeChecked) {
    ScoreCells c{};
    c[1][2] = 100.5;
    EXPECT_EQ(code_of([&] { make_scorecard(c); }), Errc::InvalidArgument);
}

TEST(RoundHalfEven, Ties) {
    EXPECT_EQ(round_half_even(0.125, 2), 0.12);
    EXPECT_EQ(round_half_even(0.375, 2), 0.38);
    EXPECT_EQ(round_half_even(2.5, 0), 2.0);
    EXPECT_EQ(round_half_even(3.5, 0), 4.0);
}

TEST(Fbeta, Examples) {
    EXPECT_EQ(fbeta(1, 0, 0, 0.5), 1.0);
    EXPECT_EQ(fbeta(1, 0, 0, 2.0), 1.0);
    EXPECT_EQ(fbeta(0, 3, 2, 1.0), 0.0);
    EXPECT_NEAR(fbeta(2, 1, 1, 1.0), 2.0 / 3.0, 1e-15);
    for (std::size_t tp = 0; tp < 5; ++tp)
        for (std::size_t fp = 0; fp < 5; ++fp)
            for (std::size_t fn = 0; fn < 5; ++fn)
                EXPECT_NEAR(fbeta(tp, fp, fn, 0.5), oracle::fbeta(double(tp), double(fp), double(fn), 0.5), 1e-15);
}

TEST(Report, JsonHasMapAndClasses) {
    const auto gt = small_gt();
    const auto j = report_to_json(coco_map({}, gt));
    EXPECT_EQ(j.at("map"), 0.0);
    EXPECT_TRUE(j.contains("per_class_ap"));
}
