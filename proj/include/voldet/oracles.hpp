#pragma once

#include "voldet/anchors.hpp"
#include "voldet/tensor.hpp"

#include <functional>
#include <vector>

namespace voldet {

// Independent reference implementations. Everything here recomputes results
// from first principles (dense sampling, exhaustive enumeration, direct
// summation) and must stay decoupled from the implementation paths it
// verifies.
namespace oracle {

/// Central finite differences against an analytic gradient. For each element
/// of theta the step is 1e-4 * max(1, |theta|). Returns the largest violation
/// ratio |analytic - fd| / (rtol * max(|analytic|, |fd|) + atol); values <= 1
/// pass.
double fd_max_ratio(Tensor<double>& theta, const Tensor<double>& analytic,
                    const std::function<double()>& eval, double rtol, double atol);

/// IoU of two integer-aligned cubes by counting unit voxels. Requires integer
/// box edges (integer-or-half-integer center with matching-parity diameter).
double voxelized_cube_iou(const Box3D& a, const Box3D& b);

/// Exhaustive reimplementation of the anchor assignment semantics.
AnchorLabels exhaustive_assign(const std::vector<Box3D>& anchors, const std::vector<Box3D>& gts,
                               const MatchConfig& cfg);

/// Suppression decided by a memoized fixpoint over "kept by any stronger
/// kept proposal", rather than the sequential greedy sweep.
struct ScoredBox {
    Box3D box;
    double score = 0.0;
};
std::vector<int> brute_force_nms_keep(const std::vector<ScoredBox>& proposals, double iou_thresh);

/// Dense RoI Align reference: averages samples_per_axis^3 trilinear samples
/// per output bin (callers use 10 for the acceptance tolerance).
Tensor<double> dense_roi_align(const Tensor<double>& feature, const std::array<double, 3>& center,
                               double side, int out_size, int samples_per_axis);

/// Direct elementwise evaluation of the vanilla focal sum (Eq. 1-2 shape).
double direct_focal_vanilla(const std::vector<double>& probs, const std::vector<int>& labels,
                            double alpha, double gamma);

/// Direct evaluation of the adaptive focal loss (Eq. 3 shape) including the
/// N_TN >= 2 clamp and the dropped positive term on positive-free batches.
double direct_focal_adaptive(const std::vector<double>& probs,
                             const std::vector<AnchorLabel>& labels, double alpha, double gamma,
                             double t_factor, double tn_threshold);

/// Direct Smooth L1 formula.
double direct_smooth_l1(const std::array<double, 4>& pred, const std::array<double, 4>& target,
                        double beta);

} // namespace oracle
} // namespace voldet
