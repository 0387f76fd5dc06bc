#pragma once

#include "voldet/volume.hpp"

#include <array>
#include <cstdint>
#include <vector>

namespace voldet {

/// Per-pyramid-level anchor template set. Defaults follow the "anchor1"
/// distribution: {4,6} at stride 4, {8,12} at stride 8, {16,24} at stride 16.
/// "anchor2" = {5,10} / {15,20} / {25,35}.
struct AnchorConfig {
    std::vector<int> strides{4, 8, 16};
    std::vector<std::vector<double>> diameters{{4.0, 6.0}, {8.0, 12.0}, {16.0, 24.0}};

    static AnchorConfig anchor1() { return AnchorConfig{}; }
    static AnchorConfig anchor2() {
        AnchorConfig c;
        c.diameters = {{5.0, 10.0}, {15.0, 20.0}, {25.0, 35.0}};
        return c;
    }

    void validate() const;
    std::size_t level_for_stride(int stride) const;
};

/// IoU thresholds for the positive / negative / ignored split.
struct MatchConfig {
    double iou_pos = 0.5;
    double iou_neg = 0.02;

    void validate() const;
};

enum class AnchorLabel : std::int8_t { Negative = 0, Ignore = 1, Positive = 2 };

/// Per-anchor assignment result. Positives carry their matched ground-truth
/// index and the regression target 4-vector.
struct AnchorLabels {
    std::vector<AnchorLabel> label;
    std::vector<std::int32_t> matched_gt; // -1 when not positive
    std::vector<std::array<double, 4>> target;

    std::int64_t count(AnchorLabel l) const {
        std::int64_t n = 0;
        for (AnchorLabel v : label)
            if (v == l) ++n;
        return n;
    }
};

/// One anchor per (cell, diameter), centers at (i + 0.5) * stride per axis.
/// Ordering: cell-major (z, y, x row-major), diameter minor — the same order
/// the RPN head output channels decode to.
std::vector<Box3D> generate_anchors(std::array<std::int64_t, 3> level_dims, int stride,
                                    const std::vector<double>& diameters);

/// Intersection-over-union of two axis-aligned cubes of side d.
double cube_iou(const Box3D& a, const Box3D& b);

/// IoU >= iou_pos -> positive (matched to the argmax-IoU GT, ties to the
/// lowest GT index); IoU <= iou_neg against every GT -> negative; otherwise
/// ignored. Additionally each GT with any positive-IoU anchor forces its
/// single best-IoU anchor positive (ties to the lowest anchor index; a later
/// GT wins if two GTs share a best anchor).
AnchorLabels assign_anchors(const std::vector<Box3D>& anchors, const std::vector<Box3D>& gts,
                            const MatchConfig& cfg);

/// Faster R-CNN style parameterization with log-diameter:
/// t = ((g.z-a.z)/a.d, (g.y-a.y)/a.d, (g.x-a.x)/a.d, log(g.d/a.d)).
std::array<double, 4> encode_targets(const Box3D& anchor, const Box3D& gt);

/// Exact inverse of encode_targets.
Box3D decode_box(const Box3D& anchor, const std::array<double, 4>& t);

} // namespace voldet
