#include "voldet/evaluation.hpp"

#include "voldet/errors.hpp"
#include "voldet/io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <stdexcept>

namespace voldet {

namespace {

double center_distance(const Box3D& a, const Box3D& b) {
    const double dz = a.z - b.z, dy = a.y - b.y, dx = a.x - b.x;
    return std::sqrt(dz * dz + dy * dy + dx * dx);
}

// Detection scores per GT (-inf when missed) and FP scores, over all scans.
struct PooledScores {
    std::vector<double> gt_scores;
    std::vector<double> fp_scores;
    std::int64_t n_scans = 0;
};

PooledScores pool_scores(const PredMap& preds, const GtMap& gts,
                         const std::vector<std::string>& scan_ids) {
    PooledScores pooled;
    pooled.n_scans = static_cast<std::int64_t>(scan_ids.size());
    for (const std::string& id : scan_ids) {
        static const std::vector<ScanPrediction> no_preds;
        static const std::vector<Box3D> no_gts;
        const auto pit = preds.find(id);
        const auto git = gts.find(id);
        std::vector<ScanPrediction> sorted = (pit == preds.end()) ? no_preds : pit->second;
        std::stable_sort(sorted.begin(), sorted.end(),
                         [](const ScanPrediction& a, const ScanPrediction& b) {
                             return a.score > b.score;
                         });
        const std::vector<Box3D>& gt = (git == gts.end()) ? no_gts : git->second;
        HitResult hits = match_hits(sorted, gt);
        for (std::size_t g = 0; g < gt.size(); ++g) {
            const std::int64_t hit = hits.gt_hit_by[g];
            pooled.gt_scores.push_back(hit >= 0 ? sorted[static_cast<std::size_t>(hit)].score
                                                : -std::numeric_limits<double>::infinity());
        }
        for (std::size_t i = 0; i < sorted.size(); ++i)
            if (hits.pred_flags[i] == PredFlag::FalsePositive)
                pooled.fp_scores.push_back(sorted[i].score);
    }
    return pooled;
}

} // namespace

HitResult match_hits(const std::vector<ScanPrediction>& preds_sorted,
                     const std::vector<Box3D>& gts) {
    for (std::size_t i = 1; i < preds_sorted.size(); ++i)
        if (preds_sorted[i].score > preds_sorted[i - 1].score)
            throw std::invalid_argument("match_hits: predictions must be sorted by score desc");

    HitResult out;
    out.pred_flags.assign(preds_sorted.size(), PredFlag::FalsePositive);
    out.gt_hit_by.assign(gts.size(), -1);

    for (std::size_t i = 0; i < preds_sorted.size(); ++i) {
        // candidate GTs whose sphere contains the center; prefer an unhit
        // one, nearest first
        std::int64_t best_unhit = -1, best_hit = -1;
        double best_unhit_dist = std::numeric_limits<double>::infinity();
        double best_hit_dist = std::numeric_limits<double>::infinity();
        for (std::size_t g = 0; g < gts.size(); ++g) {
            const double dist = center_distance(preds_sorted[i].box, gts[g]);
            if (!(dist < gts[g].d / 2.0)) continue; // strict "inside"
            if (out.gt_hit_by[g] < 0) {
                if (dist < best_unhit_dist) {
                    best_unhit_dist = dist;
                    best_unhit = static_cast<std::int64_t>(g);
                }
            } else if (dist < best_hit_dist) {
                best_hit_dist = dist;
                best_hit = static_cast<std::int64_t>(g);
            }
        }
        if (best_unhit >= 0) {
            out.pred_flags[i] = PredFlag::TruePositive;
            out.gt_hit_by[static_cast<std::size_t>(best_unhit)] = static_cast<std::int64_t>(i);
        } else if (best_hit >= 0) {
            out.pred_flags[i] = PredFlag::IgnoredDuplicate;
        }
    }
    return out;
}

EvalResult froc(const PredMap& preds, const GtMap& gts, const std::vector<std::string>& scan_ids) {
    if (scan_ids.empty()) throw std::invalid_argument("froc: need at least one scan");
    PooledScores pooled = pool_scores(preds, gts, scan_ids);
    const std::int64_t n_gt = static_cast<std::int64_t>(pooled.gt_scores.size());
    if (n_gt == 0)
        throw std::invalid_argument("froc: zero ground-truth lesions, sensitivity undefined");

    // candidate thresholds: every distinct prediction score, descending
    std::vector<double> thresholds = pooled.gt_scores;
    thresholds.insert(thresholds.end(), pooled.fp_scores.begin(), pooled.fp_scores.end());
    std::sort(thresholds.begin(), thresholds.end(), std::greater<double>());
    thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
    while (!thresholds.empty() && std::isinf(thresholds.back())) thresholds.pop_back();

    EvalResult result;
    std::array<double, kFrocFpRates.size()> best{};
    for (double tau : thresholds) {
        std::int64_t tp = 0, fp = 0;
        for (double s : pooled.gt_scores) tp += (s >= tau);
        for (double s : pooled.fp_scores) fp += (s >= tau);
        const double sens = static_cast<double>(tp) / static_cast<double>(n_gt);
        const double fps_per_scan = static_cast<double>(fp) / static_cast<double>(pooled.n_scans);
        result.operating_points.push_back({tau, sens, fps_per_scan});
        for (std::size_t r = 0; r < kFrocFpRates.size(); ++r)
            if (fps_per_scan <= kFrocFpRates[r]) best[r] = std::max(best[r], sens);
    }

    double sum = 0.0;
    for (std::size_t r = 0; r < kFrocFpRates.size(); ++r) {
        result.sensitivity_at.emplace_back(kFrocFpRates[r], best[r]);
        sum += best[r];
    }
    result.froc = sum / static_cast<double>(kFrocFpRates.size());
    return result;
}

double threshold_for_sensitivity(const PredMap& preds, const GtMap& gts, double target) {
    if (!(target > 0.0 && target <= 1.0))
        throw std::invalid_argument("threshold_for_sensitivity: target must be in (0,1]");
    std::vector<std::string> scan_ids;
    for (const auto& [id, boxes] : gts) scan_ids.push_back(id);
    for (const auto& [id, rows] : preds)
        if (gts.find(id) == gts.end()) scan_ids.push_back(id);
    PooledScores pooled = pool_scores(preds, gts, scan_ids);
    const std::int64_t n_gt = static_cast<std::int64_t>(pooled.gt_scores.size());
    if (n_gt == 0) throw std::invalid_argument("threshold_for_sensitivity: no ground truth");

    std::sort(pooled.gt_scores.begin(), pooled.gt_scores.end(), std::greater<double>());
    const std::int64_t k = static_cast<std::int64_t>(
        std::ceil(target * static_cast<double>(n_gt) - 1e-12));
    const double tau = pooled.gt_scores[static_cast<std::size_t>(k - 1)];
    if (std::isinf(tau))
        throw std::invalid_argument(
            "threshold_for_sensitivity: sensitivity target unattainable (too many missed lesions)");
    return tau;
}

double tnp_score(const PredMap& preds, const GtMap& gts, const std::vector<std::string>& scan_ids,
                 double threshold) {
    std::int64_t n_np = 0, n_tnp = 0;
    for (const std::string& id : scan_ids) {
        const auto git = gts.find(id);
        const bool negative = (git == gts.end()) || git->second.empty();
        if (!negative) continue;
        ++n_np;
        bool any = false;
        const auto pit = preds.find(id);
        if (pit != preds.end())
            for (const ScanPrediction& p : pit->second) any |= (p.score >= threshold);
        n_tnp += any ? 0 : 1;
    }
    if (n_np == 0) throw std::invalid_argument("tnp_score: no negative scans");
    return static_cast<double>(n_tnp) / static_cast<double>(n_np);
}

std::vector<BucketSensitivity> sensitivity_by_bucket(const PredMap& preds, const GtMap& gts,
                                                     const std::vector<std::string>& scan_ids,
                                                     const std::vector<double>& bucket_edges,
                                                     double fp_rate) {
    for (std::size_t i = 1; i < bucket_edges.size(); ++i)
        if (bucket_edges[i] <= bucket_edges[i - 1])
            throw std::invalid_argument("sensitivity_by_bucket: edges must increase");

    PooledScores pooled = pool_scores(preds, gts, scan_ids);
    if (pooled.gt_scores.empty())
        throw std::invalid_argument("sensitivity_by_bucket: no ground truth");

    // operating threshold: lowest tau with FPs/scan <= fp_rate
    std::vector<double> fp_sorted = pooled.fp_scores;
    std::sort(fp_sorted.begin(), fp_sorted.end(), std::greater<double>());
    const std::int64_t max_fp = static_cast<std::int64_t>(
        std::floor(fp_rate * static_cast<double>(pooled.n_scans) + 1e-12));
    double tau;
    if (static_cast<std::int64_t>(fp_sorted.size()) <= max_fp) {
        tau = -std::numeric_limits<double>::infinity(); // every prediction counted
    } else {
        // keeping all scores strictly above the (max_fp+1)-th FP keeps the
        // FP count at max_fp
        tau = std::nextafter(fp_sorted[static_cast<std::size_t>(max_fp)],
                             std::numeric_limits<double>::infinity());
    }

    // bucket partition of (0, inf): (0,e1], (e1,e2], ..., (ek, inf)
    std::vector<BucketSensitivity> buckets;
    double lo = 0.0;
    for (double e : bucket_edges) {
        buckets.push_back({lo, e, std::nullopt, 0});
        lo = e;
    }
    buckets.push_back({lo, std::numeric_limits<double>::infinity(), std::nullopt, 0});

    std::vector<std::int64_t> hit(buckets.size(), 0);
    std::size_t gi = 0;
    for (const std::string& id : scan_ids) {
        const auto git = gts.find(id);
        if (git == gts.end()) continue;
        for (const Box3D& g : git->second) {
            const double score = pooled.gt_scores[gi++];
            for (std::size_t bkt = 0; bkt < buckets.size(); ++bkt) {
                if (g.d > buckets[bkt].lo && g.d <= buckets[bkt].hi) {
                    buckets[bkt].gt_count += 1;
                    if (score >= tau) hit[bkt] += 1;
                    break;
                }
            }
        }
    }
    for (std::size_t bkt = 0; bkt < buckets.size(); ++bkt)
        if (buckets[bkt].gt_count > 0)
            buckets[bkt].sensitivity =
                static_cast<double>(hit[bkt]) / static_cast<double>(buckets[bkt].gt_count);
    return buckets;
}

void write_eval_report(const std::string& path, const EvalResult& result,
                       const std::vector<BucketSensitivity>& buckets) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("write_eval_report: cannot open " + path);
    for (const auto& [rate, sens] : result.sensitivity_at)
        os << "fp_rate," << fmt6(rate) << ',' << fmt6(sens) << '\n';
    os << "froc," << fmt6(result.froc) << '\n';
    if (result.tnp.has_value()) os << "tnp," << fmt6(*result.tnp) << '\n';
    for (const BucketSensitivity& b : buckets) {
        if (!b.sensitivity.has_value()) continue;
        os << "bucket,";
        if (std::isinf(b.hi)) os << ">" << fmt6(b.lo);
        else if (b.lo == 0.0) os << "<=" << fmt6(b.hi);
        else os << fmt6(b.lo) << "-" << fmt6(b.hi);
        os << ',' << fmt6(*b.sensitivity) << '\n';
    }
    if (!os) throw std::runtime_error("write_eval_report: write failed for " + path);
}

} // namespace voldet
