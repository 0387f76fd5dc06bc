#include "voldet/io.hpp"

#include "voldet/config.hpp"
#include "voldet/errors.hpp"
#include "voldet/rng.hpp"

#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

using namespace voldet;

namespace {

std::filesystem::path temp_file(const std::string& name) {
    return std::filesystem::temp_directory_path() / name;
}

} // namespace

TEST_CASE("parse_annotations: header-only, one row, malformed rows") {
    const auto path = temp_file("voldet_ann_test.csv");

    SUBCASE("header-only gives empty map") {
        std::ofstream(path.string()) << "scan_id,z,y,x,d\n";
        CHECK(parse_annotations(path.string()).empty());
    }
    SUBCASE("one row parses into one GT") {
        std::ofstream(path.string()) << "scan_id,z,y,x,d\nscan_a,10.5,20.25,30.0,6.5\n";
        AnnotationMap m = parse_annotations(path.string());
        REQUIRE(m.size() == 1);
        REQUIRE(m["scan_a"].size() == 1);
        CHECK(m["scan_a"][0].z == doctest::Approx(10.5));
        CHECK(m["scan_a"][0].d == doctest::Approx(6.5));
    }
    SUBCASE("missing header is rejected") {
        std::ofstream(path.string()) << "id,a,b,c,d\nx,1,2,3,4\n";
        CHECK_THROWS_AS(parse_annotations(path.string()), ParseError);
    }
    SUBCASE("non-numeric field names the line") {
        std::ofstream(path.string()) << "scan_id,z,y,x,d\nok,1,2,3,4\nbad,1,2,oops,4\n";
        CHECK_THROWS_WITH_AS(parse_annotations(path.string()), doctest::Contains(":3:"),
                             ParseError);
    }
    SUBCASE("wrong field count names the line") {
        std::ofstream(path.string()) << "scan_id,z,y,x,d\nbad,1,2\n";
        CHECK_THROWS_WITH_AS(parse_annotations(path.string()), doctest::Contains(":2:"),
                             ParseError);
    }
    std::filesystem::remove(path);
}

TEST_CASE("annotation write/parse round trip is lossless at 6 decimals") {
    Rng rng(111);
    std::vector<Annotation> anns;
    for (int i = 0; i < 50; ++i) {
        Annotation a;
        a.scan_id = "scan_" + std::to_string(i % 5);
        a.box = Box3D{rng.uniform(0, 100), rng.uniform(0, 100), rng.uniform(0, 100),
                      rng.uniform(1, 30)};
        anns.push_back(a);
    }
    const auto path = temp_file("voldet_ann_roundtrip.csv");
    write_annotations_csv(path.string(), anns);
    AnnotationMap parsed = parse_annotations(path.string());
    std::size_t total = 0;
    for (const auto& [id, boxes] : parsed) total += boxes.size();
    REQUIRE(total == anns.size());
    for (const Annotation& a : anns) {
        bool found = false;
        for (const Box3D& b : parsed[a.scan_id])
            if (std::abs(b.z - a.box.z) < 1e-6 && std::abs(b.d - a.box.d) < 1e-6) found = true;
        CHECK(found);
    }
    std::filesystem::remove(path);
}

TEST_CASE("prediction csv round trip including absent fpr scores") {
    std::vector<PredictionRow> rows;
    PredictionRow r1;
    r1.scan_id = "a";
    r1.box = Box3D{1, 2, 3, 4};
    r1.rpn_score = 0.9;
    r1.fpr_score = 0.7;
    r1.fused_score = 0.8;
    PredictionRow r2;
    r2.scan_id = "a";
    r2.box = Box3D{5, 6, 7, 8};
    r2.rpn_score = 0.5;
    r2.fpr_score = -1.0; // absent
    r2.fused_score = 0.5;
    rows = {r1, r2};

    const auto path = temp_file("voldet_pred_roundtrip.csv");
    write_predictions_csv(path.string(), rows);
    auto parsed = parse_predictions(path.string());
    REQUIRE(parsed.size() == 2);
    CHECK(parsed[0].fpr_score == doctest::Approx(0.7));
    CHECK(parsed[1].fpr_score < 0.0);
    CHECK(parsed[1].fused_score == doctest::Approx(0.5));

    // absent column is literally empty in the file
    std::ifstream is(path.string());
    std::string line;
    std::getline(is, line);
    std::getline(is, line);
    std::getline(is, line);
    CHECK(line.find(",,") != std::string::npos);
    std::filesystem::remove(path);
}

TEST_CASE("config defaults carry the documented values") {
    RunConfig cfg = RunConfig::defaults();
    CHECK(cfg.get_double("loss.alpha") == doctest::Approx(0.8));
    CHECK(cfg.get_double("loss.gamma") == doctest::Approx(5.0));
    CHECK(cfg.get_double("match.iou_pos") == doctest::Approx(0.5));
    CHECK(cfg.get_double("match.iou_neg") == doctest::Approx(0.02));
    CHECK(cfg.get_double("infer.score_thresh") == doctest::Approx(0.269));
    CHECK(cfg.get_int("model.growth") == 16);
    CHECK(cfg.get_int("fprn.crop_side") == 5);
    CHECK(cfg.get_str("model.anchors") == "anchor1");
}

TEST_CASE("config rejects unknown keys and bad values") {
    RunConfig cfg = RunConfig::defaults();
    CHECK_THROWS_AS(cfg.set("nonsense.key", "1"), ParseError);
    cfg.set("train.epochs", "not_a_number");
    CHECK_THROWS_AS(cfg.get_int("train.epochs"), ParseError);

    const auto path = temp_file("voldet_cfg_bad.cfg");
    std::ofstream(path.string()) << "unknown_key = 3\n";
    CHECK_THROWS_WITH_AS(RunConfig::load(path.string(), false), doctest::Contains("unknown key"),
                         ParseError);
    std::filesystem::remove(path);
}

TEST_CASE("config file parsing with comments and env overrides") {
    const auto path = temp_file("voldet_cfg_ok.cfg");
    std::ofstream(path.string()) << "# comment line\ntrain.epochs = 3   # trailing comment\n"
                                 << "model.anchors = anchor2\n\n";
    RunConfig cfg = RunConfig::load(path.string(), false);
    CHECK(cfg.get_int("train.epochs") == 3);
    CHECK(cfg.get_str("model.anchors") == "anchor2");

    CHECK(RunConfig::env_name("train.lr") == "VOLDET_TRAIN_LR");
    setenv("VOLDET_TRAIN_EPOCHS", "7", 1);
    RunConfig cfg2 = RunConfig::load(path.string(), true);
    CHECK(cfg2.get_int("train.epochs") == 7);
    unsetenv("VOLDET_TRAIN_EPOCHS");
    std::filesystem::remove(path);
}

TEST_CASE("config hash is stable and order-independent") {
    RunConfig a = RunConfig::defaults();
    RunConfig b = RunConfig::defaults();
    CHECK(a.hash() == b.hash());
    b.set("train.epochs", "99");
    CHECK(a.hash() != b.hash());
}

TEST_CASE("manifest parse errors carry line numbers") {
    const auto path = temp_file("voldet_manifest_bad.txt");
    std::ofstream(path.string()) << "annotations = x.csv\nscan = a,b\n";
    CHECK_THROWS_WITH_AS(read_manifest(path.string()), doctest::Contains(":2:"), ParseError);
    std::ofstream(path.string()) << "annotations = x.csv\nscan = a,p.vol,train\nscan = a,q.vol,test\n";
    CHECK_THROWS_WITH_AS(read_manifest(path.string()), doctest::Contains("duplicate"), ParseError);
    std::filesystem::remove(path);
}
