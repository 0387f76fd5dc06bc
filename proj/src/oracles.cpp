#include "voldet/oracles.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace voldet {
namespace oracle {

double fd_max_ratio(Tensor<double>& theta, const Tensor<double>& analytic,
                    const std::function<double()>& eval, double rtol, double atol) {
    theta.require_same_shape(analytic, "fd_max_ratio");
    double worst = 0.0;
    for (std::int64_t i = 0; i < theta.numel(); ++i) {
        const double save = theta[i];
        const double a = analytic[i];
        // Base step 1e-4 * scale; shrink when the stencil straddles a ReLU
        // kink (the FD estimate converges to the true derivative once the
        // step clears the kink, while a wrong analytic gradient fails at
        // every step size).
        double best_ratio = std::numeric_limits<double>::infinity();
        for (double step_scale : {1e-4, 1e-5, 1e-6}) {
            const double h = step_scale * std::max(1.0, std::abs(save));
            theta[i] = save + h;
            const double fp = eval();
            theta[i] = save - h;
            const double fm = eval();
            theta[i] = save;
            const double fd = (fp - fm) / (2.0 * h);
            const double ratio =
                std::abs(a - fd) / (rtol * std::max(std::abs(a), std::abs(fd)) + atol);
            best_ratio = std::min(best_ratio, ratio);
            if (best_ratio <= 1.0) break;
        }
        worst = std::max(worst, best_ratio);
    }
    return worst;
}

double voxelized_cube_iou(const Box3D& a, const Box3D& b) {
    auto edges = [](const Box3D& box, int axis) {
        const double c = axis == 0 ? box.z : axis == 1 ? box.y : box.x;
        const double lo = c - box.d / 2.0, hi = c + box.d / 2.0;
        const auto li = std::llround(lo), hi_i = std::llround(hi);
        if (std::abs(lo - static_cast<double>(li)) > 1e-9 ||
            std::abs(hi - static_cast<double>(hi_i)) > 1e-9)
            throw std::invalid_argument("voxelized_cube_iou: box edges must be integers");
        return std::pair<std::int64_t, std::int64_t>(li, hi_i);
    };
    std::int64_t inter = 1, va = 1, vb = 1;
    for (int axis = 0; axis < 3; ++axis) {
        const auto [alo, ahi] = edges(a, axis);
        const auto [blo, bhi] = edges(b, axis);
        va *= ahi - alo;
        vb *= bhi - blo;
        inter *= std::max<std::int64_t>(0, std::min(ahi, bhi) - std::max(alo, blo));
    }
    if (inter == 0) return 0.0;
    return static_cast<double>(inter) / static_cast<double>(va + vb - inter);
}

AnchorLabels exhaustive_assign(const std::vector<Box3D>& anchors, const std::vector<Box3D>& gts,
                               const MatchConfig& cfg) {
    AnchorLabels out;
    const std::size_t n = anchors.size();
    out.label.assign(n, AnchorLabel::Negative);
    out.matched_gt.assign(n, -1);
    out.target.assign(n, {0.0, 0.0, 0.0, 0.0});
    if (gts.empty()) return out;

    // full IoU matrix, then re-derive every rule from it
    std::vector<std::vector<double>> iou(n, std::vector<double>(gts.size(), 0.0));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t g = 0; g < gts.size(); ++g) iou[i][g] = cube_iou(anchors[i], gts[g]);

    for (std::size_t i = 0; i < n; ++i) {
        double best = 0.0;
        std::int32_t arg = -1;
        for (std::size_t g = 0; g < gts.size(); ++g)
            if (iou[i][g] > best) {
                best = iou[i][g];
                arg = static_cast<std::int32_t>(g);
            }
        if (best >= cfg.iou_pos) {
            out.label[i] = AnchorLabel::Positive;
            out.matched_gt[i] = arg;
        } else if (best > cfg.iou_neg) {
            out.label[i] = AnchorLabel::Ignore;
        }
    }
    for (std::size_t g = 0; g < gts.size(); ++g) {
        double best = 0.0;
        std::int64_t arg = -1;
        for (std::size_t i = 0; i < n; ++i)
            if (iou[i][g] > best) {
                best = iou[i][g];
                arg = static_cast<std::int64_t>(i);
            }
        if (arg >= 0) {
            out.label[static_cast<std::size_t>(arg)] = AnchorLabel::Positive;
            out.matched_gt[static_cast<std::size_t>(arg)] = static_cast<std::int32_t>(g);
        }
    }
    for (std::size_t i = 0; i < n; ++i)
        if (out.label[i] == AnchorLabel::Positive)
            out.target[i] = encode_targets(anchors[i], gts[static_cast<std::size_t>(out.matched_gt[i])]);
    return out;
}

namespace {

// center-inside-sphere or cube IoU above threshold, the NMS suppression test
bool suppresses(const ScoredBox& keeper, const ScoredBox& cand, double iou_thresh) {
    if (cube_iou(keeper.box, cand.box) > iou_thresh) return true;
    const double dz = keeper.box.z - cand.box.z;
    const double dy = keeper.box.y - cand.box.y;
    const double dx = keeper.box.x - cand.box.x;
    return std::sqrt(dz * dz + dy * dy + dx * dx) < keeper.box.d / 2.0;
}

// "stronger" = higher score, ties broken toward the earlier index
bool stronger(const std::vector<ScoredBox>& p, int a, int b) {
    return p[static_cast<std::size_t>(a)].score > p[static_cast<std::size_t>(b)].score ||
           (p[static_cast<std::size_t>(a)].score == p[static_cast<std::size_t>(b)].score && a < b);
}

} // namespace

std::vector<int> brute_force_nms_keep(const std::vector<ScoredBox>& proposals, double iou_thresh) {
    const int n = static_cast<int>(proposals.size());
    std::vector<int> kept_state(static_cast<std::size_t>(n), -1); // -1 unknown, 0 dropped, 1 kept

    // kept(i) = no stronger kept j suppresses i; resolves by recursion
    std::function<bool(int)> kept = [&](int i) -> bool {
        int& st = kept_state[static_cast<std::size_t>(i)];
        if (st >= 0) return st == 1;
        for (int j = 0; j < n; ++j) {
            if (j == i || !stronger(proposals, j, i)) continue;
            if (kept(j) && suppresses(proposals[static_cast<std::size_t>(j)],
                                      proposals[static_cast<std::size_t>(i)], iou_thresh)) {
                st = 0;
                return false;
            }
        }
        st = 1;
        return true;
    };

    std::vector<int> keep;
    for (int i = 0; i < n; ++i)
        if (kept(i)) keep.push_back(i);
    return keep;
}

Tensor<double> dense_roi_align(const Tensor<double>& feature, const std::array<double, 3>& center,
                               double side, int out_size, int samples_per_axis) {
    if (feature.rank() != 5 || feature.dim(0) != 1)
        throw std::invalid_argument("dense_roi_align: feature must be [1,C,Z,Y,X]");
    const std::int64_t C = feature.dim(1);
    const std::int64_t Z = feature.dim(2), Y = feature.dim(3), X = feature.dim(4);
    Tensor<double> out({1, C, out_size, out_size, out_size});

    auto sample = [&](std::int64_t c, double pz, double py, double px) {
        auto tap = [](double coord, std::int64_t n, std::int64_t& i0, std::int64_t& i1, double& w) {
            const double u = coord - 0.5;
            double fl = std::floor(u);
            i0 = static_cast<std::int64_t>(fl);
            w = u - fl;
            i1 = i0 + 1;
            if (i0 < 0) { i0 = 0; i1 = 0; w = 0.0; }
            if (i1 > n - 1) { i1 = n - 1; if (i0 > n - 1) i0 = n - 1; if (i0 == i1) w = 0.0; }
        };
        std::int64_t z0, z1, y0, y1, x0, x1;
        double wz, wy, wx;
        tap(pz, Z, z0, z1, wz);
        tap(py, Y, y0, y1, wy);
        tap(px, X, x0, x1, wx);
        auto v = [&](std::int64_t z, std::int64_t y, std::int64_t x) {
            return feature[((c * Z + z) * Y + y) * X + x];
        };
        const double c00 = v(z0, y0, x0) * (1 - wx) + v(z0, y0, x1) * wx;
        const double c01 = v(z0, y1, x0) * (1 - wx) + v(z0, y1, x1) * wx;
        const double c10 = v(z1, y0, x0) * (1 - wx) + v(z1, y0, x1) * wx;
        const double c11 = v(z1, y1, x0) * (1 - wx) + v(z1, y1, x1) * wx;
        return (c00 * (1 - wy) + c01 * wy) * (1 - wz) + (c10 * (1 - wy) + c11 * wy) * wz;
    };

    const double bin = side / static_cast<double>(out_size);
    const std::array<double, 3> origin{center[0] - side / 2.0, center[1] - side / 2.0,
                                       center[2] - side / 2.0};
    for (std::int64_t c = 0; c < C; ++c)
        for (int bz = 0; bz < out_size; ++bz)
            for (int by = 0; by < out_size; ++by)
                for (int bx = 0; bx < out_size; ++bx) {
                    double acc = 0.0;
                    for (int sz = 0; sz < samples_per_axis; ++sz)
                        for (int sy = 0; sy < samples_per_axis; ++sy)
                            for (int sx = 0; sx < samples_per_axis; ++sx) {
                                const double pz = origin[0] + (bz + (sz + 0.5) / samples_per_axis) * bin;
                                const double py = origin[1] + (by + (sy + 0.5) / samples_per_axis) * bin;
                                const double px = origin[2] + (bx + (sx + 0.5) / samples_per_axis) * bin;
                                acc += sample(c, pz, py, px);
                            }
                    out[((c * out_size + bz) * out_size + by) * out_size + bx] =
                        acc / (static_cast<double>(samples_per_axis) * samples_per_axis * samples_per_axis);
                }
    return out;
}

double direct_focal_vanilla(const std::vector<double>& probs, const std::vector<int>& labels,
                            double alpha, double gamma) {
    std::int64_t n_pos = 0;
    for (int l : labels) n_pos += (l != 0);
    double sum = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        const double pt = labels[i] != 0 ? probs[i] : 1.0 - probs[i];
        const double at = labels[i] != 0 ? alpha : 1.0 - alpha;
        sum += -at * std::pow(1.0 - pt, gamma) * std::log(pt);
    }
    return sum / static_cast<double>(n_pos);
}

double direct_focal_adaptive(const std::vector<double>& probs,
                             const std::vector<AnchorLabel>& labels, double alpha, double gamma,
                             double t_factor, double tn_threshold) {
    std::int64_t n_pos = 0, n_tn = 0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        if (labels[i] == AnchorLabel::Positive) ++n_pos;
        else if (labels[i] == AnchorLabel::Negative && probs[i] < tn_threshold) ++n_tn;
    }
    const double ntn = static_cast<double>(std::max<std::int64_t>(2, n_tn));
    double neg = 0.0, pos = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        if (labels[i] == AnchorLabel::Negative) {
            const double pt = 1.0 - probs[i];
            neg += -(1.0 - alpha) * std::pow(1.0 - pt, gamma) * std::log(pt);
        } else if (labels[i] == AnchorLabel::Positive) {
            pos += -std::log(probs[i]);
        }
    }
    double loss = t_factor * std::log(ntn) / ntn * neg;
    if (n_pos > 0) loss += pos / static_cast<double>(n_pos);
    return loss;
}

double direct_smooth_l1(const std::array<double, 4>& pred, const std::array<double, 4>& target,
                        double beta) {
    double loss = 0.0;
    for (int i = 0; i < 4; ++i) {
        const double x = std::abs(pred[static_cast<std::size_t>(i)] - target[static_cast<std::size_t>(i)]);
        loss += x < beta ? 0.5 * x * x / beta : x - 0.5 * beta;
    }
    return loss;
}

} // namespace oracle
} // namespace voldet
