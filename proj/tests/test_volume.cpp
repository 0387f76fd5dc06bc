#include "voldet/volume.hpp"

#include "voldet/rng.hpp"

#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

using namespace voldet;

namespace {

Volume counting_volume(std::int64_t n) {
    Volume v(n, n, n);
    for (std::int64_t i = 0; i < v.voxels(); ++i)
        v.data[static_cast<std::size_t>(i)] = static_cast<float>(i);
    return v;
}

} // namespace

TEST_CASE("resample identity spacing is bit-identical") {
    Rng rng(42);
    Volume v(5, 6, 7, {1.5, 1.5, 1.5});
    for (auto& x : v.data) x = static_cast<float>(rng.uniform(-1.0, 1.0));
    Volume r = resample_trilinear(v, {1.5, 1.5, 1.5});
    REQUIRE(r.dims == v.dims);
    CHECK(r.data == v.data);
}

TEST_CASE("resample constant volume stays constant") {
    Volume v(8, 8, 8, {2.0, 2.0, 2.0}, 3.25f);
    Volume r = resample_trilinear(v, {1.0, 1.0, 1.0});
    CHECK(r.dims == std::array<std::int64_t, 3>{16, 16, 16});
    for (float x : r.data) CHECK(x == doctest::Approx(3.25f).epsilon(1e-6));
}

TEST_CASE("resample linear ramp matches direct-evaluation oracle at interior points") {
    // f(z,y,x) = x on a 4^3 grid at 2mm, resampled to 1mm
    Volume v(4, 4, 4, {2.0, 2.0, 2.0});
    for (std::int64_t z = 0; z < 4; ++z)
        for (std::int64_t y = 0; y < 4; ++y)
            for (std::int64_t x = 0; x < 4; ++x) v.at(z, y, x) = static_cast<float>(x);

    Volume r = resample_trilinear(v, {1.0, 1.0, 1.0});
    REQUIRE(r.dims == std::array<std::int64_t, 3>{8, 8, 8});

    // Oracle: output voxel j samples the physical point (j+0.5)*1mm, which is
    // source coordinate u = (j+0.5)/2 - 0.5; on a linear ramp the value is u.
    int interior_checked = 0;
    for (std::int64_t j = 0; j < 8; ++j) {
        const double u = (static_cast<double>(j) + 0.5) / 2.0 - 0.5;
        if (u < 0.0 || u > 3.0) continue; // boundary-clamped samples excluded
        for (std::int64_t z = 2; z < 6; ++z)
            for (std::int64_t y = 2; y < 6; ++y)
                CHECK(r.at(z, y, j) == doctest::Approx(u).epsilon(1e-5));
        ++interior_checked;
    }
    CHECK(interior_checked >= 6);
}

TEST_CASE("resample output range stays within input range") {
    Rng rng(7);
    Volume v(6, 5, 9, {1.0, 2.0, 0.7});
    float lo = 1e9f, hi = -1e9f;
    for (auto& x : v.data) {
        x = static_cast<float>(rng.uniform(-5.0, 5.0));
        lo = std::min(lo, x);
        hi = std::max(hi, x);
    }
    Volume r = resample_trilinear(v, {1.3, 1.3, 1.3});
    for (float x : r.data) {
        CHECK(x >= lo - 1e-4f);
        CHECK(x <= hi + 1e-4f);
    }
}

TEST_CASE("resample rejects non-positive target spacing") {
    Volume v(4, 4, 4);
    CHECK_THROWS_AS(resample_trilinear(v, {0.0, 1.0, 1.0}), std::invalid_argument);
    CHECK_THROWS_AS(resample_trilinear(v, {1.0, -2.0, 1.0}), std::invalid_argument);
}

TEST_CASE("crop_pad full-extent identity") {
    Volume v = counting_volume(5);
    Volume c = crop_pad(v, {0, 0, 0}, {5, 5, 5}, -1.0f);
    CHECK(c.data == v.data);
}

TEST_CASE("crop_pad fully outside bounds gives all-fill") {
    Volume v = counting_volume(4);
    Volume c = crop_pad(v, {10, 10, 10}, {3, 3, 3}, 9.5f);
    for (float x : c.data) CHECK(x == 9.5f);
}

TEST_CASE("crop_pad straddling a boundary matches index arithmetic") {
    Volume v = counting_volume(6);
    const std::array<std::int64_t, 3> origin{-2, 3, 4};
    const std::array<std::int64_t, 3> size{5, 5, 5};
    Volume c = crop_pad(v, origin, size, -7.0f);
    for (std::int64_t z = 0; z < 5; ++z)
        for (std::int64_t y = 0; y < 5; ++y)
            for (std::int64_t x = 0; x < 5; ++x) {
                const std::int64_t sz = z + origin[0], sy = y + origin[1], sx = x + origin[2];
                const bool inside = sz >= 0 && sz < 6 && sy >= 0 && sy < 6 && sx >= 0 && sx < 6;
                const float expect =
                    inside ? static_cast<float>((sz * 6 + sy) * 6 + sx) : -7.0f;
                CHECK(c.at(z, y, x) == expect);
            }
}

TEST_CASE("crop_pad round trip restores interior values") {
    Volume v = counting_volume(6);
    Volume c = crop_pad(v, {2, 2, 2}, {8, 8, 8}, 0.0f);
    Volume back = crop_pad(c, {-2, -2, -2}, {6, 6, 6}, 0.0f);
    for (std::int64_t z = 2; z < 6; ++z)
        for (std::int64_t y = 2; y < 6; ++y)
            for (std::int64_t x = 2; x < 6; ++x) CHECK(back.at(z, y, x) == v.at(z, y, x));
}

TEST_CASE("normalize_intensity endpoints, midpoint and clamping") {
    Volume v(1, 1, 4);
    v.data = {-1000.0f, 400.0f, -300.0f, -1200.0f};
    Volume n = normalize_intensity(v, -1000.0f, 400.0f);
    CHECK(n.data[0] == doctest::Approx(0.0));
    CHECK(n.data[1] == doctest::Approx(1.0));
    CHECK(n.data[2] == doctest::Approx(0.5));
    CHECK(n.data[3] == doctest::Approx(0.0)); // clamped below lo
    CHECK_THROWS_AS(normalize_intensity(v, 5.0f, 5.0f), std::invalid_argument);
}

TEST_CASE("VOL1 round trip") {
    Rng rng(3);
    Volume v(3, 4, 5, {1.0, 0.75, 0.5});
    for (auto& x : v.data) x = static_cast<float>(rng.uniform(-100.0, 100.0));
    const std::string path =
        (std::filesystem::temp_directory_path() / "voldet_test_roundtrip.vol").string();
    write_vol1(path, v);
    Volume r = read_vol1(path);
    CHECK(r.dims == v.dims);
    CHECK(r.data == v.data);
    CHECK(r.spacing[1] == doctest::Approx(0.75));
    std::filesystem::remove(path);
}
