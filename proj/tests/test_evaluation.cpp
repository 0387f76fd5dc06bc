#include "voldet/evaluation.hpp"

#include "voldet/rng.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

using namespace voldet;

namespace {

ScanPrediction pred_at(const Box3D& where, double score, double d = 5.0) {
    return ScanPrediction{Box3D{where.z, where.y, where.x, d}, score};
}

} // namespace

TEST_CASE("match_hits: center hits, strict boundary, duplicates") {
    std::vector<Box3D> gts{Box3D{20, 20, 20, 10}};

    SUBCASE("prediction at the exact center is TP regardless of its diameter") {
        std::vector<ScanPrediction> preds{ScanPrediction{Box3D{20, 20, 20, 0.1}, 0.9}};
        HitResult r = match_hits(preds, gts);
        CHECK(r.pred_flags[0] == PredFlag::TruePositive);
        CHECK(r.gt_hit_by[0] == 0);
    }
    SUBCASE("distance exactly equal to the radius is a miss") {
        std::vector<ScanPrediction> preds{ScanPrediction{Box3D{25, 20, 20, 5}, 0.9}};
        HitResult r = match_hits(preds, gts);
        CHECK(r.pred_flags[0] == PredFlag::FalsePositive);
        CHECK(r.gt_hit_by[0] == -1);
    }
    SUBCASE("second hit on the same GT is ignored, not an FP") {
        std::vector<ScanPrediction> preds{ScanPrediction{Box3D{20, 20, 20, 5}, 0.9},
                                          ScanPrediction{Box3D{21, 20, 20, 5}, 0.8}};
        HitResult r = match_hits(preds, gts);
        CHECK(r.pred_flags[0] == PredFlag::TruePositive);
        CHECK(r.pred_flags[1] == PredFlag::IgnoredDuplicate);
    }
    SUBCASE("unsorted predictions are rejected") {
        std::vector<ScanPrediction> preds{ScanPrediction{Box3D{20, 20, 20, 5}, 0.5},
                                          ScanPrediction{Box3D{20, 20, 20, 5}, 0.9}};
        CHECK_THROWS_AS(match_hits(preds, gts), std::invalid_argument);
    }
}

TEST_CASE("match_hits agrees with a brute-force pairwise oracle") {
    Rng rng(101);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<Box3D> gts;
        for (int g = 0; g < 5; ++g)
            gts.push_back(Box3D{rng.uniform(0, 60), rng.uniform(0, 60), rng.uniform(0, 60),
                                rng.uniform(4, 14)});
        std::vector<ScanPrediction> preds;
        for (int i = 0; i < 20; ++i)
            preds.push_back(ScanPrediction{Box3D{rng.uniform(0, 60), rng.uniform(0, 60),
                                                 rng.uniform(0, 60), rng.uniform(2, 10)},
                                           rng.uniform(0, 1)});
        std::stable_sort(preds.begin(), preds.end(),
                         [](const ScanPrediction& a, const ScanPrediction& b) {
                             return a.score > b.score;
                         });
        HitResult got = match_hits(preds, gts);

        // oracle: greedy re-derivation from the pairwise distance matrix
        std::vector<int> gt_taken(gts.size(), 0);
        std::int64_t tp = 0, fp = 0, ign = 0;
        for (const ScanPrediction& p : preds) {
            std::int64_t chosen = -1;
            double best = std::numeric_limits<double>::infinity();
            bool any_inside = false;
            for (std::size_t g = 0; g < gts.size(); ++g) {
                const double dz = p.box.z - gts[g].z, dy = p.box.y - gts[g].y,
                             dx = p.box.x - gts[g].x;
                const double dist = std::sqrt(dz * dz + dy * dy + dx * dx);
                if (dist < gts[g].d / 2.0) {
                    any_inside = true;
                    if (!gt_taken[g] && dist < best) {
                        best = dist;
                        chosen = static_cast<std::int64_t>(g);
                    }
                }
            }
            if (chosen >= 0) {
                gt_taken[static_cast<std::size_t>(chosen)] = 1;
                ++tp;
            } else if (any_inside) {
                ++ign;
            } else {
                ++fp;
            }
        }
        std::int64_t got_tp = 0, got_fp = 0, got_ign = 0;
        for (PredFlag f : got.pred_flags) {
            got_tp += (f == PredFlag::TruePositive);
            got_fp += (f == PredFlag::FalsePositive);
            got_ign += (f == PredFlag::IgnoredDuplicate);
        }
        CHECK(got_tp == tp);
        CHECK(got_fp == fp);
        CHECK(got_ign == ign);
    }
}

namespace {

// the hand-enumerated 4-scan fixture: gt scores {.95,.85,.70,miss},
// fp scores {.90,.75,.65}; see the sweep table in the assertions
void build_fixture(PredMap& preds, GtMap& gts, std::vector<std::string>& ids) {
    ids = {"s1", "s2", "s3", "s4"};
    const Box3D g11{10, 10, 10, 10}, g12{40, 40, 40, 10};
    const Box3D g21{20, 20, 20, 10};
    const Box3D g31{30, 30, 30, 10};
    gts["s1"] = {g11, g12};
    gts["s2"] = {g21};
    gts["s3"] = {g31};
    // s4 has no ground truth (negative scan)
    preds["s1"] = {pred_at(g11, 0.95), ScanPrediction{Box3D{60, 60, 60, 5}, 0.90},
                   pred_at(g12, 0.85), pred_at(g11, 0.80)};
    preds["s2"] = {ScanPrediction{Box3D{60, 10, 10, 5}, 0.75}, pred_at(g21, 0.70)};
    preds["s4"] = {ScanPrediction{Box3D{5, 5, 5, 5}, 0.65}};
}

} // namespace

TEST_CASE("froc on the hand-enumerated 4-scan fixture") {
    PredMap preds;
    GtMap gts;
    std::vector<std::string> ids;
    build_fixture(preds, gts, ids);

    EvalResult r = froc(preds, gts, ids);
    // hand/table enumeration: sens@0.125 = 1/4; @0.25 = 2/4; @0.5 = 3/4;
    // @1,2,4,8 = 3/4 (the miss is never recovered)
    REQUIRE(r.sensitivity_at.size() == 7);
    CHECK(r.sensitivity_at[0].first == doctest::Approx(0.125));
    CHECK(r.sensitivity_at[6].first == doctest::Approx(8.0));
    CHECK(r.sensitivity_at[0].second == doctest::Approx(0.25));
    CHECK(r.sensitivity_at[1].second == doctest::Approx(0.5));
    CHECK(r.sensitivity_at[2].second == doctest::Approx(0.75));
    for (int i = 3; i < 7; ++i) CHECK(r.sensitivity_at[static_cast<std::size_t>(i)].second == doctest::Approx(0.75));
    CHECK(r.froc == doctest::Approx((0.25 + 0.5 + 0.75 * 5) / 7.0).epsilon(1e-12));
}

TEST_CASE("froc grid is exactly the seven official rates") {
    CHECK(kFrocFpRates == std::array<double, 7>{0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0});
}

TEST_CASE("froc of a perfect detector is 1, of an empty detector is 0") {
    GtMap gts;
    gts["a"] = {Box3D{10, 10, 10, 8}};
    gts["b"] = {Box3D{20, 20, 20, 8}};
    std::vector<std::string> ids{"a", "b"};

    PredMap perfect;
    perfect["a"] = {pred_at(gts["a"][0], 0.99)};
    perfect["b"] = {pred_at(gts["b"][0], 0.98)};
    CHECK(froc(perfect, gts, ids).froc == doctest::Approx(1.0));

    PredMap empty;
    CHECK(froc(empty, gts, ids).froc == doctest::Approx(0.0));

    GtMap no_gts;
    CHECK_THROWS_AS(froc(perfect, no_gts, ids), std::invalid_argument);
}

TEST_CASE("froc is monotone under adding a TP and non-increasing under adding an FP") {
    PredMap preds;
    GtMap gts;
    std::vector<std::string> ids;
    build_fixture(preds, gts, ids);
    const double base = froc(preds, gts, ids).froc;

    PredMap with_tp = preds;
    with_tp["s3"].push_back(pred_at(gts["s3"][0], 0.6)); // recover the miss
    CHECK(froc(with_tp, gts, ids).froc >= base - 1e-12);

    PredMap with_fp = preds;
    with_fp["s3"].push_back(ScanPrediction{Box3D{5, 50, 5, 4}, 0.99});
    CHECK(froc(with_fp, gts, ids).froc <= base + 1e-12);
}

TEST_CASE("froc is invariant under positive monotone score transforms") {
    PredMap preds;
    GtMap gts;
    std::vector<std::string> ids;
    build_fixture(preds, gts, ids);
    const double base = froc(preds, gts, ids).froc;

    PredMap transformed;
    for (const auto& [id, rows] : preds) {
        for (const ScanPrediction& p : rows) {
            ScanPrediction q = p;
            q.score = std::exp(3.0 * p.score) / 100.0; // strictly increasing
            transformed[id].push_back(q);
        }
    }
    CHECK(froc(transformed, gts, ids).froc == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("tnp fixture: mixed 6-scan counting oracle and threshold helper") {
    GtMap gts;
    gts["p1"] = {Box3D{10, 10, 10, 10}};
    gts["p2"] = {Box3D{20, 20, 20, 10}};
    gts["p3"] = {Box3D{30, 30, 30, 10}};
    std::vector<std::string> ids{"p1", "p2", "p3", "n1", "n2", "n3"};

    PredMap preds;
    preds["p1"] = {pred_at(gts["p1"][0], 0.9)};
    preds["p2"] = {pred_at(gts["p2"][0], 0.8)};
    preds["p3"] = {pred_at(gts["p3"][0], 0.7)};
    // n1: clean; n2: confident FP; n3: FP below the operating threshold
    preds["n2"] = {ScanPrediction{Box3D{5, 5, 5, 4}, 0.75}};
    preds["n3"] = {ScanPrediction{Box3D{5, 5, 5, 4}, 0.65}};

    const double tau = threshold_for_sensitivity(preds, gts, 0.95);
    CHECK(tau == doctest::Approx(0.7)); // lowest counted detection score reaching 0.95

    const double tnp = tnp_score(preds, gts, ids, tau);
    CHECK(tnp == doctest::Approx(2.0 / 3.0)); // n1 and n3 are clean at tau

    SUBCASE("no predictions anywhere gives TNP = 1") {
        PredMap none;
        CHECK(tnp_score(none, gts, ids, 0.5) == doctest::Approx(1.0));
    }
    SUBCASE("every negative scan with a confident FP gives TNP = 0") {
        PredMap bad = preds;
        bad["n1"] = {ScanPrediction{Box3D{4, 4, 4, 4}, 0.99}};
        bad["n3"] = {ScanPrediction{Box3D{4, 4, 4, 4}, 0.99}};
        CHECK(tnp_score(bad, gts, ids, tau) == doctest::Approx(0.0));
    }
    SUBCASE("no negative scans is an error") {
        CHECK_THROWS_AS(tnp_score(preds, gts, {"p1", "p2", "p3"}, 0.5), std::invalid_argument);
    }
    SUBCASE("unattainable sensitivity is an error") {
        PredMap sparse;
        sparse["p1"] = {pred_at(gts["p1"][0], 0.9)}; // 1/3 detected < 0.95
        CHECK_THROWS_AS(threshold_for_sensitivity(sparse, gts, 0.95), std::invalid_argument);
    }
}

TEST_CASE("sensitivity by diameter bucket") {
    GtMap gts;
    gts["a"] = {Box3D{10, 10, 10, 6}, Box3D{30, 30, 30, 6}};   // small, missed
    gts["b"] = {Box3D{10, 10, 10, 40}, Box3D{60, 60, 60, 40}}; // large, hit
    std::vector<std::string> ids{"a", "b"};
    PredMap preds;
    preds["b"] = {pred_at(gts["b"][0], 0.9, 40), pred_at(gts["b"][1], 0.8, 40)};

    auto buckets = sensitivity_by_bucket(preds, gts, ids); // edges {10, 30}, fp rate 4
    REQUIRE(buckets.size() == 3);
    REQUIRE(buckets[0].sensitivity.has_value()); // d <= 10 bucket
    CHECK(*buckets[0].sensitivity == doctest::Approx(0.0));
    CHECK(!buckets[1].sensitivity.has_value()); // 10-30 bucket empty -> absent
    REQUIRE(buckets[2].sensitivity.has_value());
    CHECK(*buckets[2].sensitivity == doctest::Approx(1.0));

    SUBCASE("all GTs in one bucket equal the overall sensitivity at the rate") {
        GtMap one;
        one["a"] = {Box3D{10, 10, 10, 20}, Box3D{40, 40, 40, 20}};
        PredMap p;
        p["a"] = {pred_at(one["a"][0], 0.9, 20)};
        auto b = sensitivity_by_bucket(p, one, {"a"});
        REQUIRE(b[1].sensitivity.has_value());
        CHECK(*b[1].sensitivity == doctest::Approx(0.5));
    }
}

TEST_CASE("eval report format") {
    PredMap preds;
    GtMap gts;
    std::vector<std::string> ids;
    build_fixture(preds, gts, ids);
    EvalResult r = froc(preds, gts, ids);
    r.tnp = 0.5;
    const std::string path =
        (std::filesystem::temp_directory_path() / "voldet_eval_report.csv").string();
    write_eval_report(path, r, sensitivity_by_bucket(preds, gts, ids));
    std::ifstream is(path);
    std::string line;
    std::getline(is, line);
    CHECK(line == "fp_rate,0.125000,0.250000");
    bool froc_row = false, tnp_row = false;
    while (std::getline(is, line)) {
        if (line.rfind("froc,", 0) == 0) froc_row = true;
        if (line.rfind("tnp,0.500000", 0) == 0) tnp_row = true;
    }
    CHECK(froc_row);
    CHECK(tnp_row);
    std::filesystem::remove(path);
}
