#pragma once

#include "voldet/model.hpp"
#include "voldet/volume.hpp"

#include <array>
#include <string>
#include <vector>

namespace voldet {

/// Sliding-window tiling of a volume. Origins sit on a (tile - margin) grid
/// with the last tile clamped so it ends at the volume edge; coverage is
/// total.
struct TileSpec {
    std::array<std::int64_t, 3> tile{};
    std::int64_t margin = 0;
    std::vector<std::array<std::int64_t, 3>> origins;
};

TileSpec tile_volume(const std::array<std::int64_t, 3>& dims,
                     const std::array<std::int64_t, 3>& tile, std::int64_t margin);

/// Translates per-tile proposals to global coordinates and deduplicates the
/// overlap zones: a proposal survives only if its own tile is the nearest
/// tile center to the proposal center (ties to the lowest tile index).
std::vector<Proposal> merge_tiles(const std::vector<std::vector<Proposal>>& per_tile,
                                  const TileSpec& spec);

struct NmsConfig {
    double iou_thresh = 0.1;
    int max_detections = 100;

    void validate() const;
};

/// Greedy descending-score suppression. A candidate is dropped when its cube
/// IoU with any kept proposal exceeds iou_thresh or its center lies inside a
/// kept proposal's sphere. Scores are never modified; ties keep the earlier
/// index.
std::vector<Proposal> nms_3d(const std::vector<Proposal>& proposals, const NmsConfig& cfg);

enum class EnsembleMode { Union, Intersection };

/// Two-model merging: proposals pair when each center lies inside the
/// other's sphere (greedy by score, nearest first). Matched pairs average
/// box coordinates, diameter and scores; unmatched survive only in Union
/// mode.
std::vector<Proposal> ensemble_merge(const std::vector<Proposal>& set_a,
                                     const std::vector<Proposal>& set_b, EnsembleMode mode);

struct InferConfig {
    std::array<std::int64_t, 3> tile{32, 32, 32};
    std::int64_t margin = 8;
    NmsConfig nms;
    bool with_fprn = true;
    float pad_value = 0.0f;
};

/// Whole-scan inference: tile, run the detector per tile, merge, suppress.
/// Output is sorted by fused score descending.
std::vector<Proposal> infer_scan(DetectorModel<float>& model, const Volume& vol,
                                 const InferConfig& cfg);

/// Sorts by fused score descending with deterministic tie-breaking.
void sort_by_score(std::vector<Proposal>& proposals);

} // namespace voldet
