#include "voldet/inference.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace voldet {

void NmsConfig::validate() const {
    if (!(iou_thresh >= 0.0 && iou_thresh <= 1.0))
        throw std::invalid_argument("NmsConfig: iou_thresh must be in [0,1]");
    if (max_detections < 1) throw std::invalid_argument("NmsConfig: max_detections must be >= 1");
}

TileSpec tile_volume(const std::array<std::int64_t, 3>& dims,
                     const std::array<std::int64_t, 3>& tile, std::int64_t margin) {
    for (int a = 0; a < 3; ++a) {
        if (tile[static_cast<std::size_t>(a)] < 1)
            throw std::invalid_argument("tile_volume: tile must be >= 1");
    }
    if (margin < 0) throw std::invalid_argument("tile_volume: margin must be >= 0");

    TileSpec spec;
    spec.tile = tile;
    spec.margin = margin;

    std::array<std::vector<std::int64_t>, 3> axis_origins;
    for (int a = 0; a < 3; ++a) {
        const std::int64_t n = dims[static_cast<std::size_t>(a)];
        const std::int64_t t = tile[static_cast<std::size_t>(a)];
        const std::int64_t stride = std::max<std::int64_t>(1, t - margin);
        std::int64_t pos = 0;
        while (true) {
            if (pos + t >= n) {
                const std::int64_t last = std::max<std::int64_t>(0, n - t);
                if (axis_origins[static_cast<std::size_t>(a)].empty() ||
                    axis_origins[static_cast<std::size_t>(a)].back() != last)
                    axis_origins[static_cast<std::size_t>(a)].push_back(last);
                break;
            }
            axis_origins[static_cast<std::size_t>(a)].push_back(pos);
            pos += stride;
        }
    }
    for (std::int64_t oz : axis_origins[0])
        for (std::int64_t oy : axis_origins[1])
            for (std::int64_t ox : axis_origins[2]) spec.origins.push_back({oz, oy, ox});
    return spec;
}

std::vector<Proposal> merge_tiles(const std::vector<std::vector<Proposal>>& per_tile,
                                  const TileSpec& spec) {
    if (per_tile.size() != spec.origins.size())
        throw std::invalid_argument("merge_tiles: one proposal list per tile required");

    std::vector<std::array<double, 3>> centers(spec.origins.size());
    for (std::size_t t = 0; t < spec.origins.size(); ++t)
        for (int a = 0; a < 3; ++a)
            centers[t][static_cast<std::size_t>(a)] =
                static_cast<double>(spec.origins[t][static_cast<std::size_t>(a)]) +
                static_cast<double>(spec.tile[static_cast<std::size_t>(a)]) / 2.0;

    auto owner_of = [&centers](const std::array<double, 3>& p) {
        std::size_t best = 0;
        double best_d2 = std::numeric_limits<double>::infinity();
        for (std::size_t t = 0; t < centers.size(); ++t) {
            const double dz = p[0] - centers[t][0];
            const double dy = p[1] - centers[t][1];
            const double dx = p[2] - centers[t][2];
            const double d2 = dz * dz + dy * dy + dx * dx;
            if (d2 < best_d2) { // strict: ties keep the lowest tile index
                best_d2 = d2;
                best = t;
            }
        }
        return best;
    };

    std::vector<Proposal> out;
    for (std::size_t t = 0; t < per_tile.size(); ++t) {
        for (const Proposal& local : per_tile[t]) {
            Proposal p = local;
            p.box.z += static_cast<double>(spec.origins[t][0]);
            p.box.y += static_cast<double>(spec.origins[t][1]);
            p.box.x += static_cast<double>(spec.origins[t][2]);
            if (owner_of({p.box.z, p.box.y, p.box.x}) == t) out.push_back(p);
        }
    }
    return out;
}

void sort_by_score(std::vector<Proposal>& proposals) {
    std::stable_sort(proposals.begin(), proposals.end(), [](const Proposal& a, const Proposal& b) {
        return a.fused_score > b.fused_score;
    });
}

std::vector<Proposal> nms_3d(const std::vector<Proposal>& proposals, const NmsConfig& cfg) {
    cfg.validate();
    std::vector<std::size_t> order(proposals.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&proposals](std::size_t a, std::size_t b) {
        return proposals[a].fused_score > proposals[b].fused_score;
    });

    std::vector<Proposal> kept;
    for (std::size_t idx : order) {
        const Proposal& cand = proposals[idx];
        bool suppressed = false;
        for (const Proposal& k : kept) {
            if (cube_iou(k.box, cand.box) > cfg.iou_thresh) {
                suppressed = true;
                break;
            }
            const double dz = k.box.z - cand.box.z;
            const double dy = k.box.y - cand.box.y;
            const double dx = k.box.x - cand.box.x;
            if (std::sqrt(dz * dz + dy * dy + dx * dx) < k.box.d / 2.0) {
                suppressed = true;
                break;
            }
        }
        if (!suppressed) {
            kept.push_back(cand);
            if (static_cast<int>(kept.size()) >= cfg.max_detections) break;
        }
    }
    return kept;
}

namespace {

bool mutual_center_in_sphere(const Proposal& a, const Proposal& b) {
    const double dz = a.box.z - b.box.z;
    const double dy = a.box.y - b.box.y;
    const double dx = a.box.x - b.box.x;
    const double dist = std::sqrt(dz * dz + dy * dy + dx * dx);
    return dist < a.box.d / 2.0 && dist < b.box.d / 2.0;
}

} // namespace

std::vector<Proposal> ensemble_merge(const std::vector<Proposal>& set_a,
                                     const std::vector<Proposal>& set_b, EnsembleMode mode) {
    std::vector<std::size_t> order_a(set_a.size());
    for (std::size_t i = 0; i < order_a.size(); ++i) order_a[i] = i;
    std::stable_sort(order_a.begin(), order_a.end(), [&set_a](std::size_t l, std::size_t r) {
        return set_a[l].fused_score > set_a[r].fused_score;
    });

    std::vector<bool> b_used(set_b.size(), false);
    std::vector<bool> a_matched(set_a.size(), false);
    std::vector<Proposal> out;

    for (std::size_t ia : order_a) {
        const Proposal& a = set_a[ia];
        double best_dist = std::numeric_limits<double>::infinity();
        std::size_t best_b = set_b.size();
        for (std::size_t ib = 0; ib < set_b.size(); ++ib) {
            if (b_used[ib] || !mutual_center_in_sphere(a, set_b[ib])) continue;
            const double dz = a.box.z - set_b[ib].box.z;
            const double dy = a.box.y - set_b[ib].box.y;
            const double dx = a.box.x - set_b[ib].box.x;
            const double dist = std::sqrt(dz * dz + dy * dy + dx * dx);
            if (dist < best_dist) {
                best_dist = dist;
                best_b = ib;
            }
        }
        if (best_b < set_b.size()) {
            b_used[best_b] = true;
            a_matched[ia] = true;
            const Proposal& b = set_b[best_b];
            Proposal merged = a;
            merged.box.z = (a.box.z + b.box.z) / 2.0;
            merged.box.y = (a.box.y + b.box.y) / 2.0;
            merged.box.x = (a.box.x + b.box.x) / 2.0;
            merged.box.d = (a.box.d + b.box.d) / 2.0;
            merged.rpn_score = (a.rpn_score + b.rpn_score) / 2.0;
            merged.fpr_score = (a.has_fpr() && b.has_fpr()) ? (a.fpr_score + b.fpr_score) / 2.0 : -1.0;
            merged.fused_score = (a.fused_score + b.fused_score) / 2.0;
            out.push_back(merged);
        }
    }
    if (mode == EnsembleMode::Union) {
        for (std::size_t ia = 0; ia < set_a.size(); ++ia)
            if (!a_matched[ia]) out.push_back(set_a[ia]);
        for (std::size_t ib = 0; ib < set_b.size(); ++ib)
            if (!b_used[ib]) out.push_back(set_b[ib]);
    }
    sort_by_score(out);
    return out;
}

std::vector<Proposal> infer_scan(DetectorModel<float>& model, const Volume& vol,
                                 const InferConfig& cfg) {
    cfg.nms.validate();
    TileSpec spec = tile_volume(vol.dims, cfg.tile, cfg.margin);
    std::vector<std::vector<Proposal>> per_tile;
    per_tile.reserve(spec.origins.size());
    for (const auto& origin : spec.origins) {
        Volume crop = crop_pad(vol, origin, cfg.tile, cfg.pad_value);
        Tensor<float> input({1, 1, cfg.tile[0], cfg.tile[1], cfg.tile[2]});
        std::copy(crop.data.begin(), crop.data.end(), input.data());
        auto proposals = model.full_forward(input, cfg.with_fprn);
        per_tile.push_back(std::move(proposals[0]));
    }
    std::vector<Proposal> merged = merge_tiles(per_tile, spec);
    std::vector<Proposal> kept = nms_3d(merged, cfg.nms);
    sort_by_score(kept);
    return kept;
}

} // namespace voldet
