#pragma once

#include "voldet/volume.hpp"

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace voldet {

/// One scored detection for evaluation (already in global scan coordinates).
struct ScanPrediction {
    Box3D box;
    double score = 0.0;
};

using PredMap = std::map<std::string, std::vector<ScanPrediction>>;
using GtMap = std::map<std::string, std::vector<Box3D>>;

/// The seven official FROC operating rates (false positives per scan).
inline constexpr std::array<double, 7> kFrocFpRates{0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0};

enum class PredFlag : int {
    FalsePositive = 0,
    TruePositive = 1,
    IgnoredDuplicate = 2, // hit on an already-hit GT: neither TP nor FP
};

/// Per-scan hit assignment under the center-in-sphere criterion (strict
/// inequality: a center exactly on the sphere is a miss). Predictions must be
/// sorted by score descending; each GT can be hit once, later hits are
/// ignored duplicates.
struct HitResult {
    std::vector<PredFlag> pred_flags;
    std::vector<std::int64_t> gt_hit_by; // index of the hitting prediction or -1
};

HitResult match_hits(const std::vector<ScanPrediction>& preds_sorted,
                     const std::vector<Box3D>& gts);

struct EvalResult {
    double froc = 0.0;
    std::vector<std::pair<double, double>> sensitivity_at;            // (fp rate, sensitivity)
    std::vector<std::array<double, 3>> operating_points;              // (threshold, sens, fps/scan)
    std::optional<double> tnp;
};

/// FROC over all scans in scan_ids (scans absent from the maps count as
/// empty). Sensitivity at each target rate is the best sensitivity achieved
/// with FPs/scan <= target (step-function reading). Throws when there are no
/// ground-truth lesions.
EvalResult froc(const PredMap& preds, const GtMap& gts, const std::vector<std::string>& scan_ids);

/// Lowest counted detection score such that overall sensitivity reaches the
/// target (the maximal-threshold operating point); throws when unattainable.
double threshold_for_sensitivity(const PredMap& preds, const GtMap& gts, double target);

/// Fraction of negative scans (no GT) with zero predictions at or above the
/// threshold. Throws when scan_ids contains no negative scan.
double tnp_score(const PredMap& preds, const GtMap& gts, const std::vector<std::string>& scan_ids,
                 double threshold);

struct BucketSensitivity {
    double lo = 0.0; // diameter range (lo, hi]
    double hi = 0.0;
    std::optional<double> sensitivity; // absent when the bucket has no GTs
    std::int64_t gt_count = 0;
};

/// Per-diameter-bucket recall at the operating threshold whose overall
/// FPs/scan <= fp_rate. Default buckets: <10, 10-30, >30 voxels.
std::vector<BucketSensitivity> sensitivity_by_bucket(
    const PredMap& preds, const GtMap& gts, const std::vector<std::string>& scan_ids,
    const std::vector<double>& bucket_edges = {10.0, 30.0}, double fp_rate = 4.0);

/// Eval report CSV: one row per FP rate, then froc, optional tnp, optional
/// bucket rows.
void write_eval_report(const std::string& path, const EvalResult& result,
                       const std::vector<BucketSensitivity>& buckets = {});

} // namespace voldet
