#include "voldet/phantom.hpp"

#include "voldet/errors.hpp"
#include "voldet/io.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

using namespace voldet;

TEST_CASE("degenerate phantom spec gives constant background and no annotations") {
    PhantomSpec spec;
    spec.seed = 11;
    spec.dims = {24, 24, 24};
    spec.n_lesions = 0;
    spec.n_vessels = 0;
    spec.noise_sigma = 0.0;
    PhantomResult r = generate_phantom(spec);
    CHECK(r.annotations.empty());
    for (float v : r.volume.data) CHECK(v == doctest::Approx(kPhantomBackground));
}

TEST_CASE("same spec twice is bit-identical") {
    PhantomSpec spec;
    spec.seed = 99;
    spec.dims = {32, 32, 32};
    spec.n_lesions = 2;
    spec.d_min = 4;
    spec.d_max = 8;
    spec.n_vessels = 2;
    spec.noise_sigma = 0.05;
    PhantomResult a = generate_phantom(spec);
    PhantomResult b = generate_phantom(spec);
    CHECK(a.volume.data == b.volume.data);
    REQUIRE(a.annotations.size() == b.annotations.size());
    for (std::size_t i = 0; i < a.annotations.size(); ++i) {
        CHECK(a.annotations[i].box.z == b.annotations[i].box.z);
        CHECK(a.annotations[i].box.d == b.annotations[i].box.d);
    }
}

TEST_CASE("five lesions are non-overlapping, inside bounds, and annotated") {
    PhantomSpec spec;
    spec.seed = 5;
    spec.dims = {64, 64, 64};
    spec.n_lesions = 5;
    spec.d_min = 4;
    spec.d_max = 10;
    spec.n_vessels = 0;
    spec.noise_sigma = 0.0;
    PhantomResult r = generate_phantom(spec);
    REQUIRE(r.annotations.size() == 5);
    for (std::size_t i = 0; i < 5; ++i) {
        const Box3D& a = r.annotations[i].box;
        CHECK(a.z >= spec.d_max);
        CHECK(a.z <= 64 - spec.d_max);
        CHECK(a.d >= spec.d_min);
        CHECK(a.d <= spec.d_max);
        for (std::size_t j = i + 1; j < 5; ++j) {
            const Box3D& b = r.annotations[j].box;
            const double dist = std::sqrt((a.z - b.z) * (a.z - b.z) + (a.y - b.y) * (a.y - b.y) +
                                          (a.x - b.x) * (a.x - b.x));
            CHECK(dist > (a.d + b.d) / 2.0);
        }
    }
}

TEST_CASE("lesion sphere mean exceeds background by more than half the contrast") {
    PhantomSpec spec;
    spec.seed = 17;
    spec.dims = {48, 48, 48};
    spec.n_lesions = 2;
    spec.d_min = 6;
    spec.d_max = 10;
    spec.n_vessels = 2;
    spec.noise_sigma = 0.0;
    spec.lesion_contrast = 0.4;
    PhantomResult r = generate_phantom(spec);
    for (const Annotation& a : r.annotations) {
        double sum = 0.0;
        std::int64_t count = 0;
        for (std::int64_t z = 0; z < 48; ++z)
            for (std::int64_t y = 0; y < 48; ++y)
                for (std::int64_t x = 0; x < 48; ++x) {
                    const double dz = (z + 0.5) - a.box.z, dy = (y + 0.5) - a.box.y,
                                 dx = (x + 0.5) - a.box.x;
                    if (std::sqrt(dz * dz + dy * dy + dx * dx) < a.box.d / 2.0) {
                        sum += r.volume.at(z, y, x);
                        ++count;
                    }
                }
        REQUIRE(count > 0);
        CHECK(sum / static_cast<double>(count) - kPhantomBackground > spec.lesion_contrast / 2.0);
    }
}

TEST_CASE("infeasible packing raises GenerationError") {
    PhantomSpec spec;
    spec.seed = 1;
    spec.dims = {24, 24, 24};
    spec.n_lesions = 200; // cannot pack 200 non-overlapping d>=6 spheres in 24^3
    spec.d_min = 6;
    spec.d_max = 8;
    CHECK_THROWS_AS(generate_phantom(spec), GenerationError);
}

TEST_CASE("generate_dataset writes files, csv, manifest; reruns are byte-identical") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "voldet_test_dataset";
    fs::remove_all(dir);

    DatasetSpec spec;
    spec.base_seed = 1234;
    spec.n_train = 2;
    spec.n_test = 1;
    spec.tpl.dims = {32, 32, 32};
    spec.tpl.d_min = 4;
    spec.tpl.d_max = 8;
    spec.tpl.n_vessels = 1;
    spec.lesions_min = 1;
    spec.lesions_max = 2;

    DatasetManifest m = generate_dataset(spec, dir.string());
    REQUIRE(m.entries.size() == 3);
    CHECK(m.entries[0].split == "train");
    CHECK(m.entries[2].split == "test");
    for (const auto& e : m.entries) CHECK(fs::exists(e.volume_path));

    auto slurp = [](const fs::path& p) {
        std::ifstream is(p, std::ios::binary);
        return std::string(std::istreambuf_iterator<char>(is), {});
    };
    const std::string csv1 = slurp(dir / "annotations.csv");
    const std::string vol1 = slurp(m.entries[0].volume_path);
    const std::string vol2 = slurp(m.entries[1].volume_path);
    CHECK(vol1 != vol2); // seed offset forces distinct volumes

    // regenerate: byte-identical outputs
    const fs::path dir2 = fs::temp_directory_path() / "voldet_test_dataset2";
    fs::remove_all(dir2);
    generate_dataset(spec, dir2.string());
    CHECK(slurp(dir2 / "annotations.csv") == csv1);
    CHECK(slurp(dir2 / "train_0000.vol") == vol1);

    // manifest round trip
    DatasetManifest loaded = read_manifest((dir / "manifest.txt").string());
    REQUIRE(loaded.entries.size() == 3);
    CHECK(loaded.entries[0].scan_id == "train_0000");
    CHECK(fs::exists(loaded.annotations_path));
    CHECK(fs::exists(loaded.entries[0].volume_path));

    fs::remove_all(dir);
    fs::remove_all(dir2);
}

TEST_CASE("empty dataset still writes a valid header-only csv") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "voldet_test_dataset_empty";
    fs::remove_all(dir);
    DatasetSpec spec;
    spec.n_train = 0;
    spec.n_test = 0;
    DatasetManifest m = generate_dataset(spec, dir.string());
    CHECK(m.entries.empty());
    AnnotationMap ann = parse_annotations(m.annotations_path);
    CHECK(ann.empty());
    fs::remove_all(dir);
}
