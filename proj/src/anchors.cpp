#include "voldet/anchors.hpp"

#include "voldet/errors.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace voldet {

void AnchorConfig::validate() const {
    if (strides.empty() || strides.size() != diameters.size())
        throw std::invalid_argument("AnchorConfig: strides and diameter lists must align");
    for (std::size_t i = 1; i < strides.size(); ++i)
        if (strides[i] <= strides[i - 1])
            throw std::invalid_argument("AnchorConfig: strides must be strictly increasing");
    for (const auto& ds : diameters) {
        if (ds.empty()) throw std::invalid_argument("AnchorConfig: empty diameter list");
        for (std::size_t i = 0; i < ds.size(); ++i) {
            if (!(ds[i] > 0.0)) throw std::invalid_argument("AnchorConfig: diameters must be positive");
            if (i > 0 && ds[i] < ds[i - 1])
                throw std::invalid_argument("AnchorConfig: diameters must be sorted");
        }
    }
}

std::size_t AnchorConfig::level_for_stride(int stride) const {
    for (std::size_t i = 0; i < strides.size(); ++i)
        if (strides[i] == stride) return i;
    throw std::invalid_argument("AnchorConfig: unknown stride " + std::to_string(stride));
}

void MatchConfig::validate() const {
    if (!(iou_neg >= 0.0 && iou_neg < iou_pos && iou_pos <= 1.0))
        throw std::invalid_argument("MatchConfig: need 0 <= iou_neg < iou_pos <= 1");
}

std::vector<Box3D> generate_anchors(std::array<std::int64_t, 3> level_dims, int stride,
                                    const std::vector<double>& diameters) {
    for (std::int64_t d : level_dims)
        if (d < 1) throw std::invalid_argument("generate_anchors: level dims must be >= 1");
    std::vector<Box3D> anchors;
    anchors.reserve(static_cast<std::size_t>(level_dims[0] * level_dims[1] * level_dims[2]) *
                    diameters.size());
    const double s = static_cast<double>(stride);
    for (std::int64_t z = 0; z < level_dims[0]; ++z)
        for (std::int64_t y = 0; y < level_dims[1]; ++y)
            for (std::int64_t x = 0; x < level_dims[2]; ++x)
                for (double d : diameters)
                    anchors.push_back(Box3D{(static_cast<double>(z) + 0.5) * s,
                                            (static_cast<double>(y) + 0.5) * s,
                                            (static_cast<double>(x) + 0.5) * s, d});
    return anchors;
}

double cube_iou(const Box3D& a, const Box3D& b) {
    const double ra = a.d * 0.5, rb = b.d * 0.5;
    const double iz = std::min(a.z + ra, b.z + rb) - std::max(a.z - ra, b.z - rb);
    if (iz <= 0.0) return 0.0;
    const double iy = std::min(a.y + ra, b.y + rb) - std::max(a.y - ra, b.y - rb);
    if (iy <= 0.0) return 0.0;
    const double ix = std::min(a.x + ra, b.x + rb) - std::max(a.x - ra, b.x - rb);
    if (ix <= 0.0) return 0.0;
    const double inter = iz * iy * ix;
    const double uni = a.d * a.d * a.d + b.d * b.d * b.d - inter;
    return inter / uni;
}

AnchorLabels assign_anchors(const std::vector<Box3D>& anchors, const std::vector<Box3D>& gts,
                            const MatchConfig& cfg) {
    cfg.validate();
    const std::size_t n = anchors.size();
    AnchorLabels out;
    out.label.assign(n, AnchorLabel::Negative);
    out.matched_gt.assign(n, -1);
    out.target.assign(n, {0.0, 0.0, 0.0, 0.0});
    if (gts.empty()) return out;

    std::vector<double> best_gt_iou(gts.size(), 0.0);
    std::vector<std::int64_t> best_gt_anchor(gts.size(), -1);

    for (std::size_t i = 0; i < n; ++i) {
        double best = 0.0;
        std::int32_t best_g = -1;
        for (std::size_t g = 0; g < gts.size(); ++g) {
            const double iou = cube_iou(anchors[i], gts[g]);
            if (iou > best) {
                best = iou;
                best_g = static_cast<std::int32_t>(g);
            }
            if (iou > best_gt_iou[g]) { // strict: ties keep the lowest anchor index
                best_gt_iou[g] = iou;
                best_gt_anchor[g] = static_cast<std::int64_t>(i);
            }
        }
        if (best >= cfg.iou_pos) {
            out.label[i] = AnchorLabel::Positive;
            out.matched_gt[i] = best_g;
        } else if (best > cfg.iou_neg) {
            out.label[i] = AnchorLabel::Ignore;
        }
    }

    // Forced best-anchor match per GT so no reachable GT lacks a positive.
    for (std::size_t g = 0; g < gts.size(); ++g) {
        if (best_gt_anchor[g] < 0 || best_gt_iou[g] <= 0.0) continue;
        const std::size_t i = static_cast<std::size_t>(best_gt_anchor[g]);
        out.label[i] = AnchorLabel::Positive;
        out.matched_gt[i] = static_cast<std::int32_t>(g);
    }

    for (std::size_t i = 0; i < n; ++i)
        if (out.label[i] == AnchorLabel::Positive)
            out.target[i] = encode_targets(anchors[i], gts[static_cast<std::size_t>(out.matched_gt[i])]);
    return out;
}

std::array<double, 4> encode_targets(const Box3D& anchor, const Box3D& gt) {
    if (!(anchor.d > 0.0)) throw std::invalid_argument("encode_targets: anchor diameter must be > 0");
    return {(gt.z - anchor.z) / anchor.d, (gt.y - anchor.y) / anchor.d,
            (gt.x - anchor.x) / anchor.d, std::log(gt.d / anchor.d)};
}

Box3D decode_box(const Box3D& anchor, const std::array<double, 4>& t) {
    return Box3D{anchor.z + t[0] * anchor.d, anchor.y + t[1] * anchor.d,
                 anchor.x + t[2] * anchor.d, anchor.d * std::exp(t[3])};
}

} // namespace voldet
