#include "voldet/training.hpp"

#include "voldet/errors.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

namespace voldet {

namespace {

constexpr std::uint64_t kSamplerSeedSalt = 0x6a09e667f3bcc908ULL;

double center_distance(const Box3D& a, const Box3D& b) {
    const double dz = a.z - b.z, dy = a.y - b.y, dx = a.x - b.x;
    return std::sqrt(dz * dz + dy * dy + dx * dx);
}

bool hits_any_gt(const Box3D& box, const std::vector<Box3D>& gts) {
    for (const Box3D& g : gts)
        if (center_distance(box, g) < g.d / 2.0) return true;
    return false;
}

/// The pyramid level whose anchor diameters sit closest to d in log space.
int reference_level_for_diameter(const AnchorConfig& cfg, double d) {
    int best_stride = cfg.strides.front();
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t l = 0; l < cfg.strides.size(); ++l) {
        double log_gm = 0.0;
        for (double a : cfg.diameters[l]) log_gm += std::log(a);
        log_gm /= static_cast<double>(cfg.diameters[l].size());
        const double dist = std::abs(std::log(std::max(d, 1e-6)) - log_gm);
        if (dist < best) {
            best = dist;
            best_stride = cfg.strides[l];
        }
    }
    return best_stride;
}

struct FprnSample {
    Proposal proposal;
    int label = 0;
    std::int64_t batch_index = 0;
};

/// Raw-proposal + injected-GT sampling for the FPR branch, capped with at
/// most 3:1 negatives per positive (a small negative floor keeps lesion-free
/// crops contributing).
std::vector<FprnSample> sample_fprn_proposals(
    const std::vector<std::vector<std::vector<Proposal>>>& per_level_per_item,
    const std::vector<std::vector<Box3D>>& gts, const AnchorConfig& anchor_cfg,
    const TrainSettings& cfg) {
    std::vector<FprnSample> samples;
    const std::size_t B = gts.size();
    for (std::size_t b = 0; b < B; ++b) {
        std::vector<FprnSample> pos, neg;
        for (const Box3D& g : gts[b]) {
            Proposal inj;
            inj.box = g;
            inj.rpn_score = 1.0;
            inj.level = reference_level_for_diameter(anchor_cfg, g.d);
            pos.push_back({inj, 1, static_cast<std::int64_t>(b)});
        }
        for (const auto& level_props : per_level_per_item)
            for (const Proposal& p : level_props[b]) {
                const bool hit = hits_any_gt(p.box, gts[b]);
                (hit ? pos : neg).push_back({p, hit ? 1 : 0, static_cast<std::int64_t>(b)});
            }
        std::stable_sort(neg.begin(), neg.end(), [](const FprnSample& l, const FprnSample& r) {
            return l.proposal.rpn_score > r.proposal.rpn_score; // hard negatives first
        });
        const std::int64_t n_pos =
            std::min<std::int64_t>(static_cast<std::int64_t>(pos.size()), cfg.fprn_cap);
        const std::int64_t n_neg = std::min<std::int64_t>(
            {static_cast<std::int64_t>(neg.size()), std::max<std::int64_t>(3 * n_pos, 4),
             cfg.fprn_cap - n_pos});
        for (std::int64_t i = 0; i < n_pos; ++i) samples.push_back(pos[static_cast<std::size_t>(i)]);
        for (std::int64_t i = 0; i < n_neg; ++i) samples.push_back(neg[static_cast<std::size_t>(i)]);
    }
    return samples;
}

struct RpnPass {
    FeaturePyramid<float> pyramid;
    std::vector<Tensor<float>> raw;        // per-level head outputs
    std::vector<AnchorLabels> level_labels; // batch-major concatenation per level
    RpnLoss loss;
    std::vector<std::vector<std::vector<Proposal>>> proposals; // [level][item]
};

/// Shared forward + RPN loss for the step functions. Anchors are assigned
/// over the concatenated multi-level set per batch item, then sliced back to
/// levels for the per-level loss composition.
RpnPass rpn_forward(DetectorModel<float>& model, const CropBatch& batch, const TrainSettings& cfg,
                    std::int64_t iter, std::int64_t total_iters, bool train, bool want_proposals) {
    RpnPass pass;
    pass.pyramid = model.backbone().forward(batch.input, train);
    const std::array<std::int64_t, 3> dims{batch.input.dim(2), batch.input.dim(3),
                                           batch.input.dim(4)};
    const std::size_t levels = model.level_count();
    const std::size_t B = batch.gts.size();

    std::vector<std::vector<Box3D>> level_anchors(levels);
    std::vector<Box3D> all_anchors;
    std::vector<std::size_t> level_offsets(levels + 1, 0);
    for (std::size_t l = 0; l < levels; ++l) {
        level_anchors[l] = model.level_anchors(l, dims);
        level_offsets[l + 1] = level_offsets[l] + level_anchors[l].size();
        all_anchors.insert(all_anchors.end(), level_anchors[l].begin(), level_anchors[l].end());
    }

    pass.level_labels.assign(levels, AnchorLabels{});
    for (std::size_t b = 0; b < B; ++b) {
        AnchorLabels global = assign_anchors(all_anchors, batch.gts[b], cfg.match);
        for (std::size_t l = 0; l < levels; ++l) {
            AnchorLabels& dst = pass.level_labels[l];
            for (std::size_t i = level_offsets[l]; i < level_offsets[l + 1]; ++i) {
                dst.label.push_back(global.label[i]);
                dst.matched_gt.push_back(global.matched_gt[i]);
                dst.target.push_back(global.target[i]);
            }
        }
    }

    std::vector<RpnLevelData> level_data(levels);
    for (std::size_t l = 0; l < levels; ++l) {
        pass.raw.push_back(model.head(l).forward(pass.pyramid.maps[l], train));
        head_to_arrays(pass.raw[l], model.head(l).templates(), level_data[l].probs,
                       level_data[l].regs);
        level_data[l].labels = &pass.level_labels[l];
    }

    FocusShiftState state;
    state.iter = iter;
    state.total_iters = std::max<std::int64_t>(1, total_iters);
    state.t0 = cfg.t0;
    state.t1 = cfg.t1;
    state.tn_threshold = cfg.tn_threshold;
    pass.loss = rpn_loss(level_data, cfg.focal, state, cfg.lambda_reg);

    if (want_proposals) {
        pass.proposals.resize(levels);
        for (std::size_t l = 0; l < levels; ++l)
            pass.proposals[l] =
                propose(pass.raw[l], model.head(l).templates(), level_anchors[l],
                        model.config().anchors.strides[l], cfg.fprn_train_score_thresh,
                        cfg.fprn_train_topk);
    }
    return pass;
}

/// Runs the FPR branch over sampled proposals, accumulating parameter
/// gradients and (optionally) feature gradients for the shared backbone.
double fprn_pass(DetectorModel<float>& model, RpnPass& pass, const CropBatch& batch,
                 const TrainSettings& cfg, bool train_mode,
                 FeaturePyramid<float>* grad_pyramid) {
    std::vector<FprnSample> samples =
        sample_fprn_proposals(pass.proposals, batch.gts, model.config().anchors, cfg);
    if (samples.empty()) return 0.0;

    const double inv_m = 1.0 / static_cast<double>(samples.size());
    std::vector<double> probs;
    std::vector<int> labels;
    probs.reserve(samples.size());
    FeaturePyramid<float> scratch;
    if (grad_pyramid == nullptr) {
        scratch.strides = pass.pyramid.strides;
        for (const auto& m : pass.pyramid.maps) scratch.maps.push_back(Tensor<float>::zeros_like(m));
        grad_pyramid = &scratch;
    }
    for (const FprnSample& s : samples) {
        const double logit =
            model.fprn().forward_logit(pass.pyramid, s.batch_index, s.proposal, train_mode);
        const double p = logistic(logit);
        probs.push_back(p);
        labels.push_back(s.label);
        model.fprn().backward((p - static_cast<double>(s.label)) * inv_m, *grad_pyramid,
                              s.batch_index);
    }
    return fprn_loss(probs, labels).loss;
}

LossBreakdown from_rpn(const RpnLoss& loss) {
    LossBreakdown out;
    out.cls_neg = loss.cls_neg;
    out.cls_pos = loss.cls_pos;
    out.reg = loss.reg;
    out.n_pos = loss.summary.n_pos;
    out.n_tn = loss.summary.n_tn;
    out.total = loss.total;
    return out;
}

std::vector<Param<float>*> rpn_params(DetectorModel<float>& model) {
    std::vector<Param<float>*> out;
    auto fn = [&out](const std::string&, Param<float>& p) { out.push_back(&p); };
    model.backbone().visit_params("backbone", fn);
    for (std::size_t l = 0; l < model.level_count(); ++l)
        model.head(l).visit_params("head", fn);
    return out;
}

std::vector<Param<float>*> fprn_params(DetectorModel<float>& model) {
    std::vector<Param<float>*> out;
    model.fprn().visit_params("fprn",
                              [&out](const std::string&, Param<float>& p) { out.push_back(&p); });
    return out;
}

} // namespace

CropSample sample_crop(const Volume& vol, const std::vector<Box3D>& gts, std::int64_t crop_size,
                       const std::vector<HardRegion>* hard_regions, double focus_prob, Rng& rng) {
    if (crop_size < 1) throw std::invalid_argument("sample_crop: crop size must be >= 1");
    CropSample out;

    const double quarter = static_cast<double>(crop_size) / 4.0;
    std::array<double, 3> center{};
    bool have_center = false;

    if (hard_regions != nullptr && !hard_regions->empty() && rng.uniform() < focus_prob) {
        const HardRegion& hr =
            (*hard_regions)[static_cast<std::size_t>(rng.uniform_index(hard_regions->size()))];
        center = {hr.box.z + rng.uniform(-quarter, quarter),
                  hr.box.y + rng.uniform(-quarter, quarter),
                  hr.box.x + rng.uniform(-quarter, quarter)};
        have_center = true;
        out.kind = CropKind::HardRegion;
    } else if (!gts.empty() && rng.uniform() < 0.5) {
        const Box3D& g = gts[static_cast<std::size_t>(rng.uniform_index(gts.size()))];
        center = {g.z + rng.uniform(-quarter, quarter), g.y + rng.uniform(-quarter, quarter),
                  g.x + rng.uniform(-quarter, quarter)};
        have_center = true;
        out.kind = CropKind::GtCentered;
    }

    std::array<std::int64_t, 3> origin{};
    for (int a = 0; a < 3; ++a) {
        const std::int64_t hi = std::max<std::int64_t>(0, vol.dims[static_cast<std::size_t>(a)] - crop_size);
        std::int64_t o;
        if (have_center) {
            o = std::llround(center[static_cast<std::size_t>(a)]) - crop_size / 2;
        } else {
            o = hi > 0 ? static_cast<std::int64_t>(rng.uniform_index(static_cast<std::uint64_t>(hi + 1))) : 0;
        }
        origin[static_cast<std::size_t>(a)] = std::clamp<std::int64_t>(o, 0, hi);
    }

    out.crop = crop_pad(vol, origin, {crop_size, crop_size, crop_size}, 0.0f);
    for (const Box3D& g : gts) {
        Box3D shifted{g.z - static_cast<double>(origin[0]), g.y - static_cast<double>(origin[1]),
                      g.x - static_cast<double>(origin[2]), g.d};
        const bool inside = shifted.z >= 0 && shifted.z < static_cast<double>(crop_size) &&
                            shifted.y >= 0 && shifted.y < static_cast<double>(crop_size) &&
                            shifted.x >= 0 && shifted.x < static_cast<double>(crop_size);
        if (inside) out.boxes.push_back(shifted);
    }
    return out;
}

std::vector<HardRegion> collect_hard_regions(const std::vector<Proposal>& proposals,
                                             const std::vector<Box3D>& gts, double score_thresh) {
    std::vector<HardRegion> out;
    for (const Proposal& p : proposals) {
        if (p.fused_score < score_thresh) continue;
        if (hits_any_gt(p.box, gts)) continue;
        out.push_back({p.box, p.fused_score});
    }
    return out;
}

HardRegionPool mine_hard_regions(DetectorModel<float>& model, const DatasetManifest& manifest,
                                 const AnnotationMap& annotations, const TrainSettings& cfg) {
    HardRegionPool pool;
    static const std::vector<Box3D> no_gts;
    for (const DatasetEntry& entry : manifest.entries) {
        if (entry.split != "train") continue;
        Volume vol = read_vol1(entry.volume_path);
        std::vector<Proposal> proposals = infer_scan(model, vol, cfg.infer);
        const auto it = annotations.find(entry.scan_id);
        const std::vector<Box3D>& gts = it == annotations.end() ? no_gts : it->second;
        std::vector<HardRegion> regions =
            collect_hard_regions(proposals, gts, cfg.abs_score_thresh);
        if (!regions.empty()) pool.by_scan[entry.scan_id] = std::move(regions);
    }
    return pool;
}

LossBreakdown train_step_joint(DetectorModel<float>& model, const CropBatch& batch,
                               const TrainSettings& cfg, std::int64_t iter,
                               std::int64_t total_iters, bool with_fprn, double lr) {
    RpnPass pass = rpn_forward(model, batch, cfg, iter, total_iters, true, with_fprn);
    LossBreakdown breakdown = from_rpn(pass.loss);

    FeaturePyramid<float> grad_pyr;
    grad_pyr.strides = pass.pyramid.strides;
    for (const auto& m : pass.pyramid.maps) grad_pyr.maps.push_back(Tensor<float>::zeros_like(m));

    for (std::size_t l = 0; l < model.level_count(); ++l) {
        Tensor<float> grad_raw = arrays_to_head_grad<float>(
            pass.raw[l].shape(), model.head(l).templates(), pass.loss.grad_logits[l],
            pass.loss.grad_regs[l]);
        grad_pyr.maps[l].add_(model.head(l).backward(grad_raw));
    }

    if (with_fprn) {
        breakdown.fpr = fprn_pass(model, pass, batch, cfg, true, &grad_pyr);
        breakdown.total += breakdown.fpr;
    }

    model.backbone().backward(grad_pyr);

    if (!std::isfinite(breakdown.total))
        throw DivergenceError("train_step_joint: non-finite loss at iteration " +
                              std::to_string(iter));
    std::vector<Param<float>*> params = rpn_params(model);
    if (with_fprn) {
        std::vector<Param<float>*> fp = fprn_params(model);
        params.insert(params.end(), fp.begin(), fp.end());
    }
    sgd_step(params, lr, cfg.momentum, cfg.weight_decay);
    return breakdown;
}

LossBreakdown train_step_alternating(DetectorModel<float>& model, const CropBatch& batch,
                                     const TrainSettings& cfg, std::int64_t iter,
                                     std::int64_t total_iters, double lr) {
    if (iter % 2 == 0) {
        // backbone + RPN update; the FPR branch is untouched
        return train_step_joint(model, batch, cfg, iter, total_iters, false, lr);
    }
    // FPR branch update with the backbone frozen (eval-mode forward, no
    // backbone gradients, no running-stat drift)
    RpnPass pass = rpn_forward(model, batch, cfg, iter, total_iters, false, true);
    LossBreakdown breakdown = from_rpn(pass.loss);
    breakdown.fpr = fprn_pass(model, pass, batch, cfg, true, nullptr);
    breakdown.total += breakdown.fpr;
    if (!std::isfinite(breakdown.total))
        throw DivergenceError("train_step_alternating: non-finite loss at iteration " +
                              std::to_string(iter));
    sgd_step(fprn_params(model), lr, cfg.momentum, cfg.weight_decay);
    return breakdown;
}

TrainSettings train_settings_from_config(const RunConfig& cfg) {
    TrainSettings s;
    s.seed = static_cast<std::uint64_t>(cfg.get_int("seed"));
    s.warmup_epochs = static_cast<int>(cfg.get_int("train.warmup_epochs"));
    s.epochs = static_cast<int>(cfg.get_int("train.epochs"));
    const std::string mode = cfg.get_str("train.mode");
    if (mode == "rpn_only") s.mode = TrainMode::RpnOnly;
    else if (mode == "joint") s.mode = TrainMode::Joint;
    else if (mode == "alternating") s.mode = TrainMode::Alternating;
    else throw ParseError("config: train.mode must be rpn_only|joint|alternating");
    s.batch = static_cast<int>(cfg.get_int("train.batch"));
    s.crops_per_scan = static_cast<int>(cfg.get_int("train.crops_per_scan"));
    s.crop = cfg.get_int("model.crop");
    s.lr = cfg.get_double("train.lr");
    s.lr_decay = cfg.get_double("train.lr_decay");
    s.milestones = cfg.get_int_list("train.milestones");
    s.momentum = cfg.get_double("train.momentum");
    s.weight_decay = cfg.get_double("train.weight_decay");
    s.focal.alpha = cfg.get_double("loss.alpha");
    s.focal.gamma = cfg.get_double("loss.gamma");
    s.t0 = cfg.get_double("loss.t0");
    s.t1 = cfg.get_double("loss.t1");
    s.tn_threshold = cfg.get_double("loss.tn_threshold");
    s.lambda_reg = cfg.get_double("loss.lambda_reg");
    s.match.iou_pos = cfg.get_double("match.iou_pos");
    s.match.iou_neg = cfg.get_double("match.iou_neg");
    s.match.validate();
    s.focus_prob = cfg.get_double("train.focus_prob");
    s.abs_enabled = cfg.get_bool("train.abs");
    s.abs_epochs = static_cast<int>(cfg.get_int("train.abs_epochs"));
    s.abs_score_thresh = cfg.get_double("train.abs_score_thresh");
    s.fprn_cap = static_cast<int>(cfg.get_int("fprn.cap"));
    s.fprn_train_score_thresh = cfg.get_double("fprn.train_score_thresh");
    s.fprn_train_topk = static_cast<int>(cfg.get_int("fprn.train_topk"));
    const std::int64_t tile = cfg.get_int("infer.tile");
    s.infer.tile = {tile, tile, tile};
    s.infer.margin = cfg.get_int("infer.margin");
    s.infer.nms.iou_thresh = cfg.get_double("infer.nms_iou");
    s.infer.nms.max_detections = static_cast<int>(cfg.get_int("infer.max_dets"));
    s.infer.with_fprn = cfg.get_bool("infer.fprn");
    if (s.epochs < 0 || s.warmup_epochs < 0 || s.batch < 1 || s.crops_per_scan < 1)
        throw ParseError("config: invalid training sizes");
    if (!(s.focus_prob >= 0.0 && s.focus_prob <= 1.0))
        throw ParseError("config: train.focus_prob must be in [0,1]");
    return s;
}

ModelConfig model_config_from_config(const RunConfig& cfg) {
    ModelConfig m;
    m.backbone.growth = static_cast<int>(cfg.get_int("model.growth"));
    m.backbone.preblock_channels = static_cast<int>(cfg.get_int("model.preblock_channels"));
    const auto layers = cfg.get_int_list("model.dense_layers");
    if (layers.size() != 3) throw ParseError("config: model.dense_layers needs 3 entries");
    m.backbone.dense_layers = {static_cast<int>(layers[0]), static_cast<int>(layers[1]),
                               static_cast<int>(layers[2])};
    m.backbone.trans_channels = static_cast<int>(cfg.get_int("model.trans_channels"));
    m.backbone.pyramid_channels = static_cast<int>(cfg.get_int("model.pyramid_channels"));
    const std::string anchors = cfg.get_str("model.anchors");
    if (anchors == "anchor1") m.anchors = AnchorConfig::anchor1();
    else if (anchors == "anchor2") m.anchors = AnchorConfig::anchor2();
    else throw ParseError("config: model.anchors must be anchor1|anchor2");
    m.fprn.crop_side = static_cast<int>(cfg.get_int("fprn.crop_side"));
    m.fprn.magnify = cfg.get_bool("fprn.magnify");
    m.fprn.roi_out = static_cast<int>(cfg.get_int("fprn.roi_out"));
    m.fprn.samples_per_bin_axis = static_cast<int>(cfg.get_int("fprn.samples_per_bin"));
    m.fprn.validate();
    m.score_thresh = cfg.get_double("infer.score_thresh");
    m.pre_nms_top_k = static_cast<int>(cfg.get_int("infer.pre_nms_topk"));
    return m;
}

RunSummary run_training(DetectorModel<float>& model, const DatasetManifest& manifest,
                        const AnnotationMap& annotations, const TrainSettings& cfg,
                        const std::string& out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    const fs::path dir(out_dir);

    struct TrainScan {
        std::string id;
        Volume volume;
        std::vector<Box3D> gts;
    };
    std::vector<TrainScan> scans;
    static const std::vector<Box3D> no_gts;
    for (const DatasetEntry& entry : manifest.entries) {
        if (entry.split != "train") continue;
        const auto it = annotations.find(entry.scan_id);
        scans.push_back({entry.scan_id, read_vol1(entry.volume_path),
                         it == annotations.end() ? no_gts : it->second});
    }
    if (scans.empty()) throw std::invalid_argument("run_training: manifest has no train scans");

    const std::int64_t crops_per_epoch =
        static_cast<std::int64_t>(scans.size()) * cfg.crops_per_scan;
    const std::int64_t iters_per_epoch = (crops_per_epoch + cfg.batch - 1) / cfg.batch;
    const int total_epochs = cfg.warmup_epochs + cfg.epochs + (cfg.abs_enabled ? cfg.abs_epochs : 0);
    const std::int64_t total_iters = std::max<std::int64_t>(1, total_epochs * iters_per_epoch);

    RunSummary summary;
    summary.checkpoint_path = (dir / "model_final.ckpt").string();
    summary.log_path = (dir / "train_log.csv").string();

    std::ofstream log(summary.log_path);
    if (!log) throw std::runtime_error("run_training: cannot open " + summary.log_path);
    log << "iter,loss_total,loss_neg,loss_pos,loss_reg,loss_fpr,n_pos,n_tn\n";

    model.save(summary.checkpoint_path); // epochs may be zero

    Rng rng(cfg.seed ^ kSamplerSeedSalt);
    HardRegionPool pool;
    std::int64_t iter = 0;
    int global_epoch = 0;

    auto epoch_lr = [&cfg](int epoch) {
        double lr = cfg.lr;
        for (std::int64_t m : cfg.milestones)
            if (epoch >= m) lr *= cfg.lr_decay;
        return lr;
    };

    auto run_stage = [&](int n_epochs, TrainMode mode, bool use_pool) {
        for (int e = 0; e < n_epochs; ++e, ++global_epoch) {
            const double lr = epoch_lr(global_epoch);
            std::vector<std::size_t> order(scans.size());
            for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
            rng.shuffle(order);

            std::vector<CropSample> crops;
            crops.reserve(static_cast<std::size_t>(crops_per_epoch));
            for (std::size_t s : order) {
                const std::vector<HardRegion>* regions = nullptr;
                if (use_pool) {
                    const auto it = pool.by_scan.find(scans[s].id);
                    if (it != pool.by_scan.end()) regions = &it->second;
                }
                for (int c = 0; c < cfg.crops_per_scan; ++c)
                    crops.push_back(sample_crop(scans[s].volume, scans[s].gts, cfg.crop, regions,
                                                cfg.focus_prob, rng));
            }

            for (std::size_t start = 0; start < crops.size(); start += static_cast<std::size_t>(cfg.batch)) {
                const std::size_t end = std::min(crops.size(), start + static_cast<std::size_t>(cfg.batch));
                const std::int64_t B = static_cast<std::int64_t>(end - start);
                CropBatch batch;
                batch.input = Tensor<float>({B, 1, cfg.crop, cfg.crop, cfg.crop});
                for (std::int64_t b = 0; b < B; ++b) {
                    const CropSample& cs = crops[start + static_cast<std::size_t>(b)];
                    std::copy(cs.crop.data.begin(), cs.crop.data.end(),
                              batch.input.data() + b * cfg.crop * cfg.crop * cfg.crop);
                    batch.gts.push_back(cs.boxes);
                }

                LossBreakdown lb;
                switch (mode) {
                    case TrainMode::RpnOnly:
                        lb = train_step_joint(model, batch, cfg, iter, total_iters, false, lr);
                        break;
                    case TrainMode::Joint:
                        lb = train_step_joint(model, batch, cfg, iter, total_iters, true, lr);
                        break;
                    case TrainMode::Alternating:
                        lb = train_step_alternating(model, batch, cfg, iter, total_iters, lr);
                        break;
                }
                log << iter << ',' << fmt6(lb.total) << ',' << fmt6(lb.cls_neg) << ','
                    << fmt6(lb.cls_pos) << ',' << fmt6(lb.reg) << ',' << fmt6(lb.fpr) << ','
                    << lb.n_pos << ',' << lb.n_tn << '\n';
                ++iter;
            }

            char name[64];
            std::snprintf(name, sizeof(name), "model_epoch_%03d.ckpt", global_epoch);
            model.save((dir / name).string());
            model.save(summary.checkpoint_path);
        }
    };

    run_stage(cfg.warmup_epochs, TrainMode::RpnOnly, false);
    run_stage(cfg.epochs, cfg.mode, false);
    if (cfg.abs_enabled) {
        pool = mine_hard_regions(model, manifest, annotations, cfg);
        summary.hard_regions_mined = pool.total();
        run_stage(cfg.abs_epochs, cfg.mode, true);
    }

    summary.iterations = iter;
    model.save(summary.checkpoint_path);
    return summary;
}

} // namespace voldet
