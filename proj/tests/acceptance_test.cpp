// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
// failure.

#include "cdfsod/evalmod.hpp"
#include "cdfsod/losses.hpp"
#include "cdfsod/matchdiff.hpp"
#include "cdfsod/pipeline.hpp"
#include "cdfsod/postproc.hpp"
#include "cdfsod/pseudo.hpp"
#include "oracles.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <random>
#include <sstream>
#include <string>

using namespace cdfsod;

namespace {

struct Outcome {
    bool ok = true;
    std::string detail;

    void fail(const std::string& why) {
        if (ok) detail = why;
        ok = false;
    }
};

int failures = 0;

template <typename F>
void criterion(const char* name, double budget_s, F&& body) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
        body(o);
    } catch (const std::exception& e) {
        o.fail(std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (o.ok && secs > budget_s) {
        std::ostringstream s;
        s << "runtime " << secs << " s over budget " << budget_s << " s";
        o.fail(s.str());
    }
    if (!o.ok) ++failures;
    std::printf("%s  %-28s %.3fs  %s\n", o.ok ? "PASS" : "FAIL", name, secs, o.detail.c_str());
}

std::string fmt(const char* f, double a, double b = 0.0) {
    char buf[160];
    std::snprintf(buf, sizeof buf, f, a, b);
    return buf;
}

Embedding random_embedding(std::mt19937_64& rng, std::size_t dim, double scale = 1.0) {
    std::normal_distribution<double> g(0.0, scale);
    std::vector<double> v(dim);
    for (double& x : v) x = g(rng);
    return Embedding(v);
}

double rel_err(const std::vector<double>& a, const std::vector<double>& b) {
    double diff = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        diff += (a[i] - b[i]) * (a[i] - b[i]);
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), 1e-12});
}

double synthetic_map(std::size_t per_class, double spread, std::uint64_t seed) {
    SyntheticTaskOptions opts;
    opts.per_class = per_class;
    opts.spread = spread;
    opts.seed = seed;
    const auto task = make_synthetic_task(opts);
    const std::vector<EmbeddingStore> scales{task.clusters.support};
    PipelineConfig cfg;  // diffusion on, min score, NMS chain
    const auto per_cls = gather_support_instances(task.support, scales, nullptr, nullptr, cfg.proto.temperature_fuse);
    const auto protos = build_prototypes(per_cls, {}, cfg.proto);
    const auto dets = match_detections(cfg, protos, proposals_from_results(task.proposals), task.clusters.queries, nullptr);
    return coco_map(dets, task.query_gt).map;
}

}  // namespace

int main() {
    criterion("challenge_score_table", 1.0, [](Outcome& o) {
        int rows = 0;
        for (const auto& row : oracle::leaderboard()) {
            ScoreCells cells{};
            for (std::size_t i = 0; i < 9; ++i) cells[i / 3][i % 3] = row.cells[i];
            const auto card = make_scorecard(cells);
            const long long got = std::llround(card.score_rounded * 100);
            const long long published = std::llround(row.score * 100);
            if (got != oracle::score_hundredths(row.cells)) o.fail(std::string(row.team) + ": rounding disagrees with oracle");
            if (std::llabs(got - published) > 1)
                o.fail(std::string(row.team) + fmt(": %.2f vs published %.2f", card.score_rounded, row.score));
            ++rows;
        }
        if (rows != 19) o.fail("expected 19 rows");
        if (o.ok) o.detail = "19/19 rows within 0.01";
    });

    criterion("map_oracle_equivalence", 30.0, [](Outcome& o) {
        std::mt19937_64 rng(20260601);
        double worst = 0.0;
        for (int t = 0; t < 200; ++t) {
            const auto mc = oracle::random_micro(rng);
            const double d = std::abs(coco_map(mc.dets, mc.gt).map - oracle::coco_map(mc.dets, mc.gt));
            worst = std::max(worst, d);
            if (d > 1e-9) o.fail(fmt("case %.0f differs by %.3g", t, d));
        }
        if (o.ok) o.detail = fmt("200 cases, max |diff| %.3g", worst);
    });

    criterion("nms_softnms_oracle", 10.0, [](Outcome& o) {
        std::mt19937_64 rng(777);
        std::uniform_real_distribution<double> u(0.0, 1.0);
        double worst = 0.0;
        for (int t = 0; t < 500; ++t) {
            const std::size_t n = rng() % 26;
            std::vector<Detection> d;
            for (std::size_t i = 0; i < n; ++i)
                d.push_back({1 + static_cast<ImageId>(rng() % 2), oracle::random_box(rng, 60.0, 5.0, 35.0),
                             1 + static_cast<CategoryId>(rng() % 3), u(rng), std::nullopt});
            const double thr = 0.3 + 0.4 * u(rng);
            if (nms(d, thr) != oracle::nms(d, thr)) o.fail(fmt("nms mismatch on case %.0f", t));
            const double sigma = 0.1 + u(rng);
            const auto got = soft_nms(d, sigma, 0.001);
            const auto want = oracle::soft_nms(d, sigma, 0.001);
            if (got.size() != want.size()) {
                o.fail(fmt("soft-nms size mismatch on case %.0f", t));
                continue;
            }
            for (std::size_t i = 0; i < got.size(); ++i) {
                if (!(got[i].box == want[i].box)) o.fail(fmt("soft-nms order mismatch on case %.0f", t));
                worst = std::max(worst, std::abs(got[i].score - want[i].score));
            }
        }
        if (worst > 1e-9) o.fail(fmt("soft-nms score diff %.3g", worst));
        if (o.ok) o.detail = fmt("500 cases, nms exact, soft-nms max diff %.3g", worst);
    });

    criterion("diffusion_fixed_point", 5.0, [](Outcome& o) {
        const std::vector<Detection> pair{{1, {0, 0, 10, 10}, 1, 1.0, std::nullopt}, {1, {0, 0, 10, 10}, 1, 0.0, std::nullopt}};
        const auto two = diffuse(pair, DiffusionConfig{});
        if (std::abs(two[0].score - 0.7692) > 1e-4 || std::abs(two[1].score - 0.2308) > 1e-4)
            o.fail(fmt("two-node case gave (%.5f, %.5f)", two[0].score, two[1].score));
        std::mt19937_64 rng(4242);
        std::uniform_real_distribution<double> u(0.0, 1.0);
        double worst = 0.0;
        for (int t = 0; t < 500; ++t) {
            const std::size_t n = 1 + rng() % 15;
            std::vector<Detection> d;
            for (std::size_t i = 0; i < n; ++i)
                d.push_back({1, oracle::random_box(rng, 60.0, 5.0, 40.0), 1, u(rng), std::nullopt});
            const auto fp = oracle::diffusion_fixed_point(d, 0.3, 0.0);
            const auto out = diffuse(d, DiffusionConfig{});
            for (std::size_t i = 0; i < n; ++i) worst = std::max(worst, std::abs(out[i].score - fp[i]));
        }
        if (worst > 1e-4) o.fail(fmt("max deviation %.3g", worst));
        if (o.ok) o.detail = fmt("two-node (%.4f, %.4f); 500 graphs max dev ", two[0].score, two[1].score) + fmt("%.3g", worst);
    });

    criterion("infonce_gradients", 10.0, [](Outcome& o) {
        std::mt19937_64 rng(99);
        double worst = 0.0;
        for (double tau : {2.0, 0.1}) {
            for (int t = 0; t < 20; ++t) {
                DomainBank bank;
                for (std::size_t i = 0; i < DomainBank::size_for_classes(3); ++i) bank.domains.push_back(random_embedding(rng, 8));
                const auto res = loss_domain(bank, tau);
                std::vector<double> a, n;
                for (std::size_t i = 0; i < bank.domains.size(); ++i)
                    for (std::size_t c = 0; c < 8; ++c) {
                        a.push_back(res.grad_domains[i][c]);
                        n.push_back(oracle::central_diff([&] { return loss_domain(bank, tau).value; }, bank.domains[i][c], 1e-5));
                    }
                worst = std::max(worst, rel_err(a, n));
            }
            for (int t = 0; t < 20; ++t) {
                std::vector<Embedding> protos;
                for (int i = 0; i < 3; ++i) protos.push_back(l2_normalize(random_embedding(rng, 8)));
                DomainBank bank;
                for (std::size_t i = 0; i < DomainBank::size_for_classes(3); ++i)
                    bank.domains.push_back(random_embedding(rng, 8, 0.3));
                const std::size_t k = rng() % bank.domains.size(), m = rng() % bank.domains.size();
                const auto res = loss_proto(protos, bank, k, m, tau);
                auto f = [&] { return loss_proto(protos, bank, k, m, tau).value; };
                std::vector<double> a, n;
                for (std::size_t i = 0; i < protos.size(); ++i)
                    for (std::size_t c = 0; c < 8; ++c) {
                        a.push_back(res.grad_prototypes[i][c]);
                        n.push_back(oracle::central_diff(f, protos[i][c], 1e-5));
                    }
                for (std::size_t i = 0; i < bank.domains.size(); ++i)
                    for (std::size_t c = 0; c < 8; ++c) {
                        a.push_back(res.grad_domains[i][c]);
                        n.push_back(oracle::central_diff(f, bank.domains[i][c], 1e-5));
                    }
                worst = std::max(worst, rel_err(a, n));
            }
        }
        if (worst >= 1e-5) o.fail(fmt("max relative error %.3g", worst));
        if (o.ok) o.detail = fmt("80 checks, max relative error %.3g", worst);
    });

    criterion("synthetic_end_to_end", 30.0, [](Outcome& o) {
        const double spreads[5] = {0.0, 0.5, 1.0, 2.0, 4.0};
        int degraded = 0;
        for (std::uint64_t seed = 0; seed < 5; ++seed) {
            double prev = 2.0;
            for (double s : spreads) {
                const double m = synthetic_map(10, s, seed);
                if (s == 0.0 && m != 1.0) o.fail(fmt("seed %.0f spread 0 mAP %.6f", double(seed), m));
                if (m > prev) o.fail(fmt("seed %.0f: mAP rose at spread %.2f", double(seed), s));
                prev = m;
            }
            if (prev < 1.0) ++degraded;
        }
        if (degraded == 0) o.fail("largest spread never dropped mAP below 1");
        if (o.ok) o.detail = "mAP 1.0 at spread 0, non-increasing over 5 spreads for 5 seeds";
    });

    criterion("pseudo_label_invariants", 30.0, [](Outcome& o) {
        std::mt19937_64 rng(31337);
        for (int t = 0; t < 200; ++t) {
            const auto mc = oracle::random_micro(rng);
            PseudoLabelPolicy policy;
            policy.dedup = static_cast<DedupRule>(t % 4);
            policy.merge_mode = t % 2 ? MergeMode::Append : MergeMode::ClassAgnosticNms;
            const auto out = merge_with_gt(mc.dets, mc.gt.annotations, policy);
            for (const auto& g : mc.gt.annotations)
                if (std::find(out.begin(), out.end(), g) == out.end()) o.fail(fmt("GT dropped in case %.0f", t));

            const auto taus = optimize_thresholds(mc.dets, mc.gt, 0.5);
            for (const auto& [cat, tau] : taus) {
                const double best = fbeta_at(mc.dets, mc.gt, cat, tau, 0.5);
                std::vector<double> cuts{0.0, 1.0, kSelectNothingTau};
                for (const auto& d : mc.dets) {
                    cuts.push_back(d.score);
                    cuts.push_back(std::nextafter(d.score, -std::numeric_limits<double>::infinity()));
                }
                for (double c : cuts)
                    if (fbeta_at(mc.dets, mc.gt, cat, c, 0.5) > best + 1e-12) o.fail(fmt("tau not sweep-optimal in case %.0f", t));
            }
        }

        const std::vector<Annotation> gt{{1, {0, 0, 100, 100}, 1, 1, true, std::nullopt}};
        auto merged = [&](double h, CategoryId cat, DedupRule rule) {
            PseudoLabelPolicy p;
            p.dedup = rule;
            p.merge_mode = MergeMode::Append;
            const std::vector<Detection> d{{1, {0, 0, 100, h}, cat, 0.9, std::nullopt}};
            return merge_with_gt(d, gt, p).size();
        };
        if (merged(79, 1, DedupRule::SameClassGt) != 2) o.fail("same-class rule dropped IoU 0.79");
        if (merged(81, 1, DedupRule::SameClassGt) != 1) o.fail("same-class rule kept IoU 0.81");
        if (merged(69, 2, DedupRule::AnySupport) != 2) o.fail("support rule dropped IoU 0.69");
        if (merged(71, 2, DedupRule::AnySupport) != 1) o.fail("support rule kept IoU 0.71");
        if (o.ok) o.detail = "GT inclusion 200/200, sweep-optimal taus, 0.79/0.81 and 0.69/0.71 boundaries";
    });

    std::printf("%d criteria failed\n", failures);
    return failures == 0 ? 0 : 1;
}
