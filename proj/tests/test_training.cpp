#include "voldet/training.hpp"

#include "voldet/errors.hpp"
#include "voldet/evaluation.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

using namespace voldet;

namespace {

ModelConfig tiny_model_config(bool magnify = false) {
    ModelConfig cfg;
    cfg.backbone.growth = 4;
    cfg.backbone.preblock_channels = 4;
    cfg.backbone.dense_layers = {1, 1, 1};
    cfg.backbone.trans_channels = 8;
    cfg.backbone.pyramid_channels = 32;
    cfg.fprn.magnify = magnify;
    return cfg;
}

TrainSettings tiny_train_settings() {
    TrainSettings s;
    s.seed = 7;
    s.crop = 16;
    s.batch = 2;
    s.crops_per_scan = 2;
    s.lr = 0.01;
    s.warmup_epochs = 1;
    s.epochs = 1;
    s.infer.tile = {32, 32, 32};
    s.infer.margin = 8;
    return s;
}

PhantomSpec toy_phantom_spec(std::uint64_t seed) {
    PhantomSpec spec;
    spec.seed = seed;
    spec.dims = {32, 32, 32};
    spec.n_lesions = 2;
    spec.d_min = 4;
    spec.d_max = 8;
    spec.n_vessels = 1;
    spec.noise_sigma = 0.03;
    return spec;
}

CropBatch batch_from_phantom(const PhantomSpec& spec, std::int64_t crop, Rng& rng) {
    PhantomResult ph = generate_phantom(spec);
    std::vector<Box3D> gts;
    for (const Annotation& a : ph.annotations) gts.push_back(a.box);
    CropSample a = sample_crop(ph.volume, gts, crop, nullptr, 0.0, rng);
    CropSample b = sample_crop(ph.volume, gts, crop, nullptr, 0.0, rng);
    CropBatch batch;
    batch.input = Tensor<float>({2, 1, crop, crop, crop});
    std::copy(a.crop.data.begin(), a.crop.data.end(), batch.input.data());
    std::copy(b.crop.data.begin(), b.crop.data.end(), batch.input.data() + crop * crop * crop);
    batch.gts = {a.boxes, b.boxes};
    return batch;
}

double param_momentum_norm(const std::vector<Param<float>*>& params) {
    double acc = 0.0;
    for (const Param<float>* p : params)
        for (std::int64_t i = 0; i < p->numel(); ++i)
            acc += static_cast<double>(p->momentum[i]) * static_cast<double>(p->momentum[i]);
    return std::sqrt(acc);
}

std::string slurp(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(is), {});
}

} // namespace

TEST_CASE("sample_crop uniform fallback with no pool and no GT") {
    Rng rng(121);
    Volume vol(48, 48, 48, {1, 1, 1}, 0.1f);
    CropSample s = sample_crop(vol, {}, 16, nullptr, 0.5, rng);
    CHECK(s.kind == CropKind::Uniform);
    CHECK(s.boxes.empty());
    CHECK(s.crop.dims == std::array<std::int64_t, 3>{16, 16, 16});
}

TEST_CASE("GT-centered draws keep the GT within the jitter window") {
    Rng rng(122);
    Volume vol(64, 64, 64, {1, 1, 1}, 0.1f);
    std::vector<Box3D> gts{Box3D{32, 30, 34, 6}};
    int centered = 0;
    for (int i = 0; i < 200; ++i) {
        CropSample s = sample_crop(vol, gts, 32, nullptr, 0.0, rng);
        if (s.kind != CropKind::GtCentered) continue;
        ++centered;
        REQUIRE(s.boxes.size() == 1);
        // GT center within crop/4 jitter (+rounding) of the crop center
        for (double c : {s.boxes[0].z, s.boxes[0].y, s.boxes[0].x}) {
            CHECK(c >= 16.0 - 9.0);
            CHECK(c <= 16.0 + 9.0);
        }
    }
    CHECK(centered > 50); // ~half of the draws
}

TEST_CASE("hard-region focus fraction matches focus_prob within 2 percent") {
    Rng rng(123);
    Volume vol(48, 48, 48, {1, 1, 1}, 0.1f);
    std::vector<Box3D> gts{Box3D{24, 24, 24, 6}};
    std::vector<HardRegion> pool{{Box3D{10, 10, 10, 4}, 0.9}, {Box3D{38, 38, 38, 4}, 0.8}};
    const int draws = 10000;
    int hard = 0;
    for (int i = 0; i < draws; ++i) {
        CropSample s = sample_crop(vol, gts, 16, &pool, 0.5, rng);
        hard += (s.kind == CropKind::HardRegion);
    }
    const double fraction = static_cast<double>(hard) / draws;
    CHECK(fraction >= 0.48);
    CHECK(fraction <= 0.52);
}

TEST_CASE("collect_hard_regions basics and the generator-metadata oracle") {
    PhantomSpec spec = toy_phantom_spec(900);
    spec.n_vessels = 3;
    PhantomResult ph = generate_phantom(spec);
    std::vector<Box3D> gts;
    for (const Annotation& a : ph.annotations) gts.push_back(a.box);

    SUBCASE("a perfect detector pools nothing") {
        std::vector<Proposal> proposals;
        for (const Box3D& g : gts) {
            Proposal p;
            p.box = g;
            p.fused_score = 0.99;
            proposals.push_back(p);
        }
        CHECK(collect_hard_regions(proposals, gts, 0.5).empty());
    }
    SUBCASE("a detector that flags every vessel pools exactly the vessel count") {
        std::vector<Proposal> proposals;
        for (const Box3D& v : ph.vessel_seeds) {
            Proposal p;
            p.box = v;
            p.fused_score = 0.9;
            proposals.push_back(p);
        }
        auto regions = collect_hard_regions(proposals, gts, 0.5);
        CHECK(regions.size() == ph.vessel_seeds.size());
    }
    SUBCASE("sub-threshold proposals are not pooled") {
        std::vector<Proposal> proposals;
        Proposal p;
        p.box = Box3D{5, 5, 5, 4};
        p.fused_score = 0.3;
        proposals.push_back(p);
        CHECK(collect_hard_regions(proposals, gts, 0.5).empty());
    }
}

TEST_CASE("joint step on a crop without GT or proposals: fpr part 0, step applies") {
    DetectorModel<float> model(tiny_model_config());
    model.init(42);
    TrainSettings cfg = tiny_train_settings();
    cfg.fprn_train_score_thresh = 2.0; // no raw proposal clears this

    CropBatch batch;
    batch.input = Tensor<float>({1, 1, 16, 16, 16});
    batch.input.fill(0.2f);
    batch.gts = {{}};

    NamedTensors before = model.snapshot();
    LossBreakdown lb = train_step_joint(model, batch, cfg, 0, 100, true, 0.01);
    CHECK(lb.fpr == 0.0);
    CHECK(std::isfinite(lb.total));

    NamedTensors after = model.snapshot();
    bool changed = false;
    for (std::size_t i = 0; i < before.size(); ++i)
        for (std::int64_t j = 0; j < before[i].second.numel(); ++j)
            if (before[i].second[j] != after[i].second[j]) changed = true;
    CHECK(changed);
}

TEST_CASE("loss breakdown components sum to the total") {
    DetectorModel<float> model(tiny_model_config());
    model.init(43);
    TrainSettings cfg = tiny_train_settings();
    Rng rng(130);
    CropBatch batch = batch_from_phantom(toy_phantom_spec(300), 16, rng);
    LossBreakdown lb = train_step_joint(model, batch, cfg, 0, 100, true, 0.01);
    CHECK(lb.total ==
          doctest::Approx(lb.cls_neg + lb.cls_pos + lb.reg + lb.fpr).epsilon(1e-9));
}

TEST_CASE("gradient flow: one joint step moves every parameter group") {
    DetectorModel<float> model(tiny_model_config());
    model.init(44);
    TrainSettings cfg = tiny_train_settings();
    Rng rng(131);
    // keep sampling until every pyramid level holds at least one positive-capable GT
    CropBatch batch = batch_from_phantom(toy_phantom_spec(301), 16, rng);
    bool has_gt = false;
    for (const auto& g : batch.gts) has_gt |= !g.empty();
    REQUIRE(has_gt);

    train_step_joint(model, batch, cfg, 0, 100, true, 0.01);

    // momentum buffers equal the first step's gradients
    std::vector<Param<float>*> backbone;
    model.backbone().visit_params(
        "b", [&backbone](const std::string&, Param<float>& p) { backbone.push_back(&p); });
    CHECK(param_momentum_norm(backbone) > 0.0);
    for (std::size_t l = 0; l < model.level_count(); ++l) {
        std::vector<Param<float>*> head;
        model.head(l).visit_params(
            "h", [&head](const std::string&, Param<float>& p) { head.push_back(&p); });
        CHECK(param_momentum_norm(head) > 0.0);
    }
    std::vector<Param<float>*> fprn;
    model.fprn().visit_params(
        "f", [&fprn](const std::string&, Param<float>& p) { fprn.push_back(&p); });
    CHECK(param_momentum_norm(fprn) > 0.0);
}

TEST_CASE("alternating training freezes the idle branch bitwise") {
    DetectorModel<float> model(tiny_model_config());
    model.init(45);
    TrainSettings cfg = tiny_train_settings();
    Rng rng(132);
    CropBatch batch = batch_from_phantom(toy_phantom_spec(302), 16, rng);

    auto snapshot_group = [&model](bool fprn_group) {
        NamedTensors out;
        auto fn = [&out](const std::string& name, Param<float>& p) {
            out.emplace_back(name, p.value.cast<float>());
        };
        if (fprn_group) model.fprn().visit_params("fprn", fn);
        else {
            model.backbone().visit_params("backbone", fn);
            for (std::size_t l = 0; l < model.level_count(); ++l) model.head(l).visit_params("h", fn);
        }
        return out;
    };

    // even iteration: FPRN untouched
    NamedTensors fprn_before = snapshot_group(true);
    train_step_alternating(model, batch, cfg, 0, 100, 0.01);
    NamedTensors fprn_after = snapshot_group(true);
    for (std::size_t i = 0; i < fprn_before.size(); ++i)
        for (std::int64_t j = 0; j < fprn_before[i].second.numel(); ++j)
            CHECK(fprn_before[i].second[j] == fprn_after[i].second[j]);

    // odd iteration: backbone and RPN heads untouched
    NamedTensors rpn_before = snapshot_group(false);
    train_step_alternating(model, batch, cfg, 1, 100, 0.01);
    NamedTensors rpn_after = snapshot_group(false);
    for (std::size_t i = 0; i < rpn_before.size(); ++i)
        for (std::int64_t j = 0; j < rpn_before[i].second.numel(); ++j)
            CHECK(rpn_before[i].second[j] == rpn_after[i].second[j]);
}

namespace {

struct ToyDataset {
    std::filesystem::path dir;
    DatasetManifest manifest;
    AnnotationMap annotations;
};

ToyDataset make_toy_dataset(const std::string& name, int n_train, int n_test,
                            std::uint64_t seed) {
    ToyDataset ds;
    ds.dir = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(ds.dir);
    DatasetSpec spec;
    spec.base_seed = seed;
    spec.n_train = n_train;
    spec.n_test = n_test;
    spec.tpl = toy_phantom_spec(0);
    spec.lesions_min = 1;
    spec.lesions_max = 2;
    ds.manifest = generate_dataset(spec, ds.dir.string());
    ds.annotations = parse_annotations(ds.manifest.annotations_path);
    return ds;
}

} // namespace

TEST_CASE("run_training with zero epochs leaves the checkpoint at initialization") {
    ToyDataset ds = make_toy_dataset("voldet_train_zero", 2, 0, 500);
    DetectorModel<float> model(tiny_model_config());
    model.init(46);
    NamedTensors init = model.snapshot();

    TrainSettings cfg = tiny_train_settings();
    cfg.warmup_epochs = 0;
    cfg.epochs = 0;
    const auto out = ds.dir / "run";
    RunSummary summary = run_training(model, ds.manifest, ds.annotations, cfg, out.string());
    CHECK(summary.iterations == 0);

    DetectorModel<float> restored(tiny_model_config());
    restored.init(999);
    restored.load(summary.checkpoint_path);
    NamedTensors loaded = restored.snapshot();
    REQUIRE(loaded.size() == init.size());
    for (std::size_t i = 0; i < init.size(); ++i)
        for (std::int64_t j = 0; j < init[i].second.numel(); ++j)
            CHECK(loaded[i].second[j] == init[i].second[j]);
    std::filesystem::remove_all(ds.dir);
}

TEST_CASE("run_training log row count equals the iteration count") {
    ToyDataset ds = make_toy_dataset("voldet_train_log", 3, 0, 510);
    DetectorModel<float> model(tiny_model_config());
    model.init(47);
    TrainSettings cfg = tiny_train_settings();
    cfg.warmup_epochs = 1;
    cfg.epochs = 1;
    const auto out = ds.dir / "run";
    RunSummary summary = run_training(model, ds.manifest, ds.annotations, cfg, out.string());

    std::ifstream log(summary.log_path);
    std::string line;
    std::getline(log, line); // header
    std::int64_t rows = 0;
    while (std::getline(log, line))
        if (!line.empty()) ++rows;
    CHECK(rows == summary.iterations);
    // 3 scans x 2 crops / batch 2 = 3 iters per epoch, 2 epochs
    CHECK(summary.iterations == 6);
    std::filesystem::remove_all(ds.dir);
}

TEST_CASE("seeded training is bit-reproducible within one build") {
    ToyDataset ds = make_toy_dataset("voldet_train_repro", 2, 0, 520);
    TrainSettings cfg = tiny_train_settings();
    cfg.warmup_epochs = 1;
    cfg.epochs = 1;

    auto run_once = [&](const std::string& sub) {
        DetectorModel<float> model(tiny_model_config());
        model.init(48);
        const auto out = ds.dir / sub;
        RunSummary s = run_training(model, ds.manifest, ds.annotations, cfg, out.string());
        return std::pair<std::string, std::string>(slurp(s.log_path), slurp(s.checkpoint_path));
    };
    auto [log1, ckpt1] = run_once("r1");
    auto [log2, ckpt2] = run_once("r2");
    CHECK(log1 == log2);
    CHECK(ckpt1 == ckpt2);
    CHECK(!log1.empty());
    std::filesystem::remove_all(ds.dir);
}

TEST_CASE("200 joint steps on a 10-phantom toy set more than halve the loss (5-run median)") {
    std::vector<double> ratios;
    for (std::uint64_t run = 0; run < 5; ++run) {
        DetectorModel<float> model(tiny_model_config());
        model.init(1000 + run);
        TrainSettings cfg = tiny_train_settings();
        Rng rng(2000 + run);

        std::vector<PhantomResult> phantoms;
        std::vector<std::vector<Box3D>> gts;
        for (int i = 0; i < 10; ++i) {
            phantoms.push_back(generate_phantom(toy_phantom_spec(3000 + 10 * run + i)));
            std::vector<Box3D> g;
            for (const Annotation& a : phantoms.back().annotations) g.push_back(a.box);
            gts.push_back(g);
        }

        double initial = 0.0, final_loss = 0.0;
        for (int iter = 0; iter < 200; ++iter) {
            const std::size_t s = static_cast<std::size_t>(rng.uniform_index(10));
            CropSample cs = sample_crop(phantoms[s].volume, gts[s], 16, nullptr, 0.0, rng);
            CropBatch batch;
            batch.input = Tensor<float>({1, 1, 16, 16, 16});
            std::copy(cs.crop.data.begin(), cs.crop.data.end(), batch.input.data());
            batch.gts = {cs.boxes};
            LossBreakdown lb = train_step_joint(model, batch, cfg, iter, 200, true, 0.01);
            if (iter == 0) initial = lb.total;
            final_loss = lb.total;
        }
        ratios.push_back(final_loss / initial);
    }
    std::sort(ratios.begin(), ratios.end());
    CHECK(ratios[2] < 0.5); // median of 5
}

TEST_CASE("one-round ABS keeps the phantom-set FROC within 0.05 of the pre-ABS run") {
    ToyDataset ds = make_toy_dataset("voldet_train_abs", 6, 4, 530);

    auto eval_froc = [&](DetectorModel<float>& model, const TrainSettings& cfg) {
        PredMap preds;
        GtMap gtmap;
        std::vector<std::string> ids;
        for (const DatasetEntry& e : ds.manifest.entries) {
            if (e.split != "test") continue;
            ids.push_back(e.scan_id);
            Volume vol = read_vol1(e.volume_path);
            for (const Proposal& p : infer_scan(model, vol, cfg.infer))
                preds[e.scan_id].push_back({p.box, p.fused_score});
            const auto it = ds.annotations.find(e.scan_id);
            if (it != ds.annotations.end()) gtmap[e.scan_id] = it->second;
        }
        return froc(preds, gtmap, ids).froc;
    };

    TrainSettings base = tiny_train_settings();
    base.warmup_epochs = 2;
    base.epochs = 2;
    base.infer.with_fprn = true;

    DetectorModel<float> plain(tiny_model_config());
    plain.init(49);
    run_training(plain, ds.manifest, ds.annotations, base, (ds.dir / "plain").string());
    const double froc_plain = eval_froc(plain, base);

    TrainSettings with_abs = base;
    with_abs.abs_enabled = true;
    with_abs.abs_epochs = 1;
    DetectorModel<float> boosted(tiny_model_config());
    boosted.init(49);
    run_training(boosted, ds.manifest, ds.annotations, with_abs, (ds.dir / "abs").string());
    const double froc_abs = eval_froc(boosted, with_abs);

    CHECK(froc_abs >= froc_plain - 0.05);
    std::filesystem::remove_all(ds.dir);
}
