#pragma once

#include "voldet/config.hpp"
#include "voldet/inference.hpp"
#include "voldet/io.hpp"
#include "voldet/losses.hpp"
#include "voldet/model.hpp"
#include "voldet/phantom.hpp"

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace voldet {

enum class TrainMode { RpnOnly, Joint, Alternating };

struct TrainSettings {
    std::uint64_t seed = 1;
    int warmup_epochs = 6; // stage 1: RPN only
    int epochs = 10;       // stage 2: per mode
    TrainMode mode = TrainMode::Joint;
    int batch = 2;
    int crops_per_scan = 2;
    std::int64_t crop = 32;

    double lr = 0.02;
    double lr_decay = 0.1;
    std::vector<std::int64_t> milestones; // global epoch indices
    double momentum = 0.9;
    double weight_decay = 1e-4;

    FocalConfig focal;
    double t0 = 1.0;
    double t1 = 10.0;
    double tn_threshold = 0.5;
    double lambda_reg = 1.0;
    MatchConfig match;

    double focus_prob = 0.5;
    bool abs_enabled = false;
    int abs_epochs = 2;
    double abs_score_thresh = 0.5;

    int fprn_cap = 16;
    double fprn_train_score_thresh = 0.05;
    int fprn_train_topk = 32;

    InferConfig infer; // used by hard-region mining
};

TrainSettings train_settings_from_config(const RunConfig& cfg);
ModelConfig model_config_from_config(const RunConfig& cfg);

/// False-positive centers mined from whole training scans, keyed by scan id.
struct HardRegion {
    Box3D box;
    double score = 0.0;
};

struct HardRegionPool {
    std::map<std::string, std::vector<HardRegion>> by_scan;

    std::size_t total() const {
        std::size_t n = 0;
        for (const auto& [id, v] : by_scan) n += v.size();
        return n;
    }
    bool empty() const { return total() == 0; }
};

enum class CropKind { Uniform, GtCentered, HardRegion };

struct CropSample {
    Volume crop;
    std::vector<Box3D> boxes; // GT translated into crop coordinates
    CropKind kind = CropKind::Uniform;
};

/// Draws one training crop. With probability focus_prob (pool non-empty) the
/// crop centers on a hard region jittered by <= crop/4; with probability 0.5
/// otherwise it centers on a random GT (same jitter); else uniform. GT boxes
/// whose centers fall outside the crop are dropped.
CropSample sample_crop(const Volume& vol, const std::vector<Box3D>& gts, std::int64_t crop_size,
                       const std::vector<HardRegion>* hard_regions, double focus_prob, Rng& rng);

/// Pure core of Anchor Based Sampling: proposals at or above score_thresh
/// whose centers miss every GT sphere become hard regions.
std::vector<HardRegion> collect_hard_regions(const std::vector<Proposal>& proposals,
                                             const std::vector<Box3D>& gts, double score_thresh);

/// Runs tiled inference over every train-split scan and pools the false
/// positives.
HardRegionPool mine_hard_regions(DetectorModel<float>& model, const DatasetManifest& manifest,
                                 const AnnotationMap& annotations, const TrainSettings& cfg);

struct LossBreakdown {
    double total = 0.0;
    double cls_neg = 0.0;
    double cls_pos = 0.0;
    double reg = 0.0;
    double fpr = 0.0;
    std::int64_t n_pos = 0;
    std::int64_t n_tn = 0;
};

struct CropBatch {
    Tensor<float> input; // [B,1,c,c,c]
    std::vector<std::vector<Box3D>> gts;
};

/// One simultaneous two-branch update (with_fprn = false gives the RPN-only
/// warmup step). Applies one SGD step over all touched parameters.
LossBreakdown train_step_joint(DetectorModel<float>& model, const CropBatch& batch,
                               const TrainSettings& cfg, std::int64_t iter,
                               std::int64_t total_iters, bool with_fprn, double lr);

/// Alternating update: even iterations train backbone+RPN only; odd
/// iterations train the FPR branch (and magnify) with the backbone frozen in
/// eval mode.
LossBreakdown train_step_alternating(DetectorModel<float>& model, const CropBatch& batch,
                                     const TrainSettings& cfg, std::int64_t iter,
                                     std::int64_t total_iters, double lr);

struct RunSummary {
    std::string checkpoint_path;
    std::string log_path;
    std::int64_t iterations = 0;
    std::size_t hard_regions_mined = 0;
};

/// Full staged training: RPN warmup, then two-branch training per mode, then
/// an optional Anchor Based Sampling round (mine hard regions, keep
/// training with focused crops). Writes per-iteration log rows and per-epoch
/// checkpoints under out_dir; on divergence the last finished epoch's
/// checkpoint is retained.
RunSummary run_training(DetectorModel<float>& model, const DatasetManifest& manifest,
                        const AnnotationMap& annotations, const TrainSettings& cfg,
                        const std::string& out_dir);

} // namespace voldet
