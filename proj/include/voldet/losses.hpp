#pragma once

#include "voldet/anchors.hpp"

#include <array>
#include <cstdint>
#include <vector>

namespace voldet {

/// Focal loss hyperparameters (alpha balances positive/negative terms,
/// gamma controls the loss decay rate).
struct FocalConfig {
    double alpha = 0.8;
    double gamma = 5.0;

    void validate() const;
};

/// Schedule state for the adaptive focal loss: the linear factor
/// T(iter) = t0 + (t1 - t0) * iter / total_iters, and the probability below
/// which a negative counts as a true negative.
struct FocusShiftState {
    std::int64_t iter = 0;
    std::int64_t total_iters = 1;
    double t0 = 1.0;
    double t1 = 10.0;
    double tn_threshold = 0.5;

    void validate() const;
    double t_factor() const {
        return t0 + (t1 - t0) * static_cast<double>(iter) / static_cast<double>(total_iters);
    }
};

/// Label counts for one loss batch. n_tn is the raw true-negative count; the
/// loss clamps it to >= 2 internally so log(N_TN) stays positive.
struct BatchLabelSummary {
    std::int64_t n_pos = 0;
    std::int64_t n_neg = 0;
    std::int64_t n_tn = 0;
    std::int64_t n_all = 0;
};

struct ScalarLoss {
    double loss = 0.0;
    std::vector<double> grad_logits; // d loss / d logit, chain-ruled through sigmoid
};

/// Vanilla focal loss, normalized by the positive count:
/// L = (1/N_pos) * sum_i -alpha_t (1-p_t)^gamma log(p_t).
/// Throws DegenerateBatchError when the batch has no positives.
ScalarLoss focal_vanilla(const std::vector<double>& probs, const std::vector<int>& labels,
                         const FocalConfig& cfg);

struct AdaptiveLoss {
    double loss = 0.0;
    double loss_neg = 0.0; // weighted negative focal term
    double loss_pos = 0.0; // mean cross-entropy over positives
    std::vector<double> grad_logits;
    BatchLabelSummary summary;
};

/// Adaptive focal loss with focus shift:
/// L = T log(N_TN)/N_TN * sum_neg L_F(p_t) + (1/N_pos) * sum_pos L_CE(p).
/// Ignored anchors contribute nothing; the positive term is dropped when the
/// batch has no positives, so the loss stays finite on degenerate batches.
AdaptiveLoss focal_adaptive(const std::vector<double>& probs,
                            const std::vector<AnchorLabel>& labels, const FocalConfig& cfg,
                            const FocusShiftState& state);

struct SmoothL1 {
    double loss = 0.0;
    std::array<double, 4> grad{};
};

/// Per-component Huber: 0.5 x^2/beta for |x| < beta else |x| - beta/2,
/// summed over the 4 box components.
SmoothL1 smooth_l1(const std::array<double, 4>& pred, const std::array<double, 4>& target,
                   double beta = 1.0);

/// One pyramid level's flattened RPN outputs and labels.
struct RpnLevelData {
    std::vector<double> probs;
    std::vector<std::array<double, 4>> regs;
    const AnchorLabels* labels = nullptr;
};

struct RpnLoss {
    double total = 0.0;
    double cls_neg = 0.0;
    double cls_pos = 0.0;
    double reg = 0.0;
    BatchLabelSummary summary;
    std::vector<std::vector<double>> grad_logits;                  // per level
    std::vector<std::vector<std::array<double, 4>>> grad_regs;     // per level
};

/// Sum over pyramid levels of focal_adaptive plus lambda_reg times the
/// positive-averaged Smooth L1 regression loss.
RpnLoss rpn_loss(const std::vector<RpnLevelData>& levels, const FocalConfig& cfg,
                 const FocusShiftState& state, double lambda_reg = 1.0);

/// Mean binary cross-entropy over sampled proposals; empty input gives a
/// zero loss with no gradient.
ScalarLoss fprn_loss(const std::vector<double>& probs, const std::vector<int>& labels);

} // namespace voldet
