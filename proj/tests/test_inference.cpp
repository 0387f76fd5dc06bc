#include "voldet/inference.hpp"

#include "voldet/oracles.hpp"

#include <doctest.h>

#include <cmath>

using namespace voldet;

namespace {

Proposal make_proposal(double z, double y, double x, double d, double score) {
    Proposal p;
    p.box = Box3D{z, y, x, d};
    p.rpn_score = score;
    p.fused_score = score;
    return p;
}

} // namespace

TEST_CASE("tile_volume single tile when volume equals tile") {
    TileSpec spec = tile_volume({32, 32, 32}, {32, 32, 32}, 8);
    REQUIRE(spec.origins.size() == 1);
    CHECK(spec.origins[0] == std::array<std::int64_t, 3>{0, 0, 0});
}

TEST_CASE("tile_volume clamps the last origin to the volume edge") {
    TileSpec spec = tile_volume({100, 64, 64}, {64, 64, 64}, 16);
    std::vector<std::int64_t> z_origins;
    for (const auto& o : spec.origins)
        if (o[1] == 0 && o[2] == 0) z_origins.push_back(o[0]);
    CHECK(z_origins == std::vector<std::int64_t>{0, 36});
}

TEST_CASE("tile_volume single padded tile when tile exceeds volume") {
    TileSpec spec = tile_volume({20, 20, 20}, {32, 32, 32}, 8);
    REQUIRE(spec.origins.size() == 1);
    CHECK(spec.origins[0] == std::array<std::int64_t, 3>{0, 0, 0});
}

TEST_CASE("tile_volume covers every voxel (coverage-count oracle)") {
    Rng rng(91);
    for (int trial = 0; trial < 30; ++trial) {
        const std::array<std::int64_t, 3> dims{rng.uniform_int(33, 97), rng.uniform_int(33, 97),
                                               rng.uniform_int(33, 97)};
        TileSpec spec = tile_volume(dims, {32, 32, 32}, 8);
        // coverage per axis is separable: count per-axis coverage
        for (int a = 0; a < 3; ++a) {
            std::vector<int> covered(static_cast<std::size_t>(dims[static_cast<std::size_t>(a)]), 0);
            for (const auto& o : spec.origins)
                for (std::int64_t i = o[static_cast<std::size_t>(a)];
                     i < o[static_cast<std::size_t>(a)] + 32; ++i)
                    if (i >= 0 && i < dims[static_cast<std::size_t>(a)])
                        covered[static_cast<std::size_t>(i)] = 1;
            for (int c : covered) CHECK(c == 1);
        }
    }
}

TEST_CASE("merge_tiles translates single-tile proposals verbatim") {
    TileSpec spec = tile_volume({32, 32, 32}, {32, 32, 32}, 8);
    std::vector<std::vector<Proposal>> per_tile(1);
    per_tile[0].push_back(make_proposal(4, 5, 6, 8, 0.9));
    auto merged = merge_tiles(per_tile, spec);
    REQUIRE(merged.size() == 1);
    CHECK(merged[0].box.z == doctest::Approx(4.0));
}

TEST_CASE("merge_tiles keeps one copy of an overlap-zone detection") {
    // two tiles along z: [0,32) and [16,48); lesion at z=22 is detected by both
    TileSpec spec = tile_volume({48, 32, 32}, {32, 32, 32}, 16);
    REQUIRE(spec.origins.size() == 2);
    std::vector<std::vector<Proposal>> per_tile(2);
    per_tile[0].push_back(make_proposal(22, 16, 16, 6, 0.8)); // local z = 22
    per_tile[1].push_back(make_proposal(6, 16, 16, 6, 0.8));  // local z = 6 -> global 22
    auto merged = merge_tiles(per_tile, spec);
    REQUIRE(merged.size() == 1);
    CHECK(merged[0].box.z == doctest::Approx(22.0));
    // global center 22 is nearer tile 1's center (32) than tile 0's (16)?
    // |22-16| = 6 < |22-32| = 10: tile 0 owns it
    CHECK(merged[0].rpn_score == doctest::Approx(0.8));
}

TEST_CASE("nms basics: disjoint kept, duplicate suppressed by score") {
    NmsConfig cfg;
    std::vector<Proposal> props{make_proposal(10, 10, 10, 4, 0.8),
                                make_proposal(30, 30, 30, 4, 0.7),
                                make_proposal(10, 10, 10, 4, 0.9)};
    auto kept = nms_3d(props, cfg);
    REQUIRE(kept.size() == 2);
    CHECK(kept[0].fused_score == doctest::Approx(0.9)); // the duplicate with higher score
    CHECK(kept[1].fused_score == doctest::Approx(0.7));
}

TEST_CASE("nms keeps scores unmodified and output is a subset") {
    Rng rng(92);
    NmsConfig cfg;
    std::vector<Proposal> props;
    for (int i = 0; i < 30; ++i)
        props.push_back(make_proposal(rng.uniform(0, 40), rng.uniform(0, 40), rng.uniform(0, 40),
                                      rng.uniform(3, 10), rng.uniform(0, 1)));
    auto kept = nms_3d(props, cfg);
    CHECK(kept.size() <= props.size());
    for (const Proposal& k : kept) {
        bool found = false;
        for (const Proposal& p : props)
            if (p.box.z == k.box.z && p.fused_score == k.fused_score) found = true;
        CHECK(found);
    }
}

TEST_CASE("nms matches the brute-force suppression oracle on 1000 random instances") {
    Rng rng(93);
    NmsConfig cfg;
    cfg.iou_thresh = 0.1;
    for (int trial = 0; trial < 1000; ++trial) {
        const int n = static_cast<int>(rng.uniform_int(1, 10));
        std::vector<Proposal> props;
        std::vector<oracle::ScoredBox> boxes;
        for (int i = 0; i < n; ++i) {
            Proposal p = make_proposal(rng.uniform(0, 20), rng.uniform(0, 20), rng.uniform(0, 20),
                                       rng.uniform(2, 8), rng.uniform(0, 1));
            props.push_back(p);
            boxes.push_back({p.box, p.fused_score});
        }
        auto kept = nms_3d(props, cfg);
        auto want = oracle::brute_force_nms_keep(boxes, cfg.iou_thresh);
        REQUIRE(kept.size() == want.size());
        // same set: compare by score multiset order after sorting both
        std::vector<double> ks, ws;
        for (const Proposal& k : kept) ks.push_back(k.fused_score);
        for (int i : want) ws.push_back(props[static_cast<std::size_t>(i)].fused_score);
        std::sort(ks.begin(), ks.end());
        std::sort(ws.begin(), ws.end());
        for (std::size_t i = 0; i < ks.size(); ++i) CHECK(ks[i] == doctest::Approx(ws[i]));
    }
}

TEST_CASE("ensemble_merge identical sets are idempotent in both modes") {
    std::vector<Proposal> set;
    set.push_back(make_proposal(10, 10, 10, 6, 0.9));
    set.push_back(make_proposal(30, 30, 30, 8, 0.7));
    for (EnsembleMode mode : {EnsembleMode::Union, EnsembleMode::Intersection}) {
        auto merged = ensemble_merge(set, set, mode);
        REQUIRE(merged.size() == 2);
        CHECK(merged[0].fused_score == doctest::Approx(0.9)); // average of equals
        CHECK(merged[0].box.z == doctest::Approx(10.0));
    }
}

TEST_CASE("ensemble_merge disjoint sets: intersection empty, union keeps all") {
    std::vector<Proposal> a{make_proposal(10, 10, 10, 6, 0.9)};
    std::vector<Proposal> b{make_proposal(30, 30, 30, 6, 0.8)};
    CHECK(ensemble_merge(a, b, EnsembleMode::Intersection).empty());
    CHECK(ensemble_merge(a, b, EnsembleMode::Union).size() == 2);
}

TEST_CASE("ensemble_merge pairing oracle: one extra proposal in A") {
    // B's proposals all match an A proposal; A has one extra
    std::vector<Proposal> a, b;
    a.push_back(make_proposal(10, 10, 10, 6, 0.9));
    a.push_back(make_proposal(30, 30, 30, 8, 0.8));
    a.push_back(make_proposal(50, 50, 50, 6, 0.7)); // extra
    b.push_back(make_proposal(10.5, 10, 10, 6, 0.85));
    b.push_back(make_proposal(30, 30.5, 30, 8, 0.75));
    auto uni = ensemble_merge(a, b, EnsembleMode::Union);
    auto inter = ensemble_merge(a, b, EnsembleMode::Intersection);
    CHECK(uni.size() == 3);
    CHECK(inter.size() == 2);
    // matched pair averages the coordinates
    bool found = false;
    for (const Proposal& p : inter)
        if (std::abs(p.box.z - 10.25) < 1e-9 && std::abs(p.fused_score - 0.875) < 1e-9)
            found = true;
    CHECK(found);
}

TEST_CASE("ensemble_merge requires mutual containment") {
    // a's center inside b's sphere but not vice versa -> no match
    std::vector<Proposal> a{make_proposal(10, 10, 10, 2, 0.9)};
    std::vector<Proposal> b{make_proposal(12, 10, 10, 10, 0.8)};
    // dist = 2: inside b (r=5) but outside a (r=1)
    CHECK(ensemble_merge(a, b, EnsembleMode::Intersection).empty());
}
