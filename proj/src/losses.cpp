#include "voldet/losses.hpp"

#include "voldet/errors.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace voldet {

namespace {

constexpr double kProbFloor = 1e-12; // keeps log() finite on saturated inputs

double clamp_prob(double p) { return std::clamp(p, kProbFloor, 1.0 - kProbFloor); }

// Focal term and its logit gradient for one sample.
// Positive: L = -alpha (1-p)^g log p
// Negative: L = -(1-alpha) p^g log(1-p)
void focal_term(double p, bool positive, double alpha, double gamma, double& loss,
                double& dloss_dlogit) {
    p = clamp_prob(p);
    if (positive) {
        const double q = 1.0 - p;
        const double qg = std::pow(q, gamma);
        loss = -alpha * qg * std::log(p);
        dloss_dlogit = alpha * gamma * p * qg * std::log(p) - alpha * qg * q;
    } else {
        const double pg = std::pow(p, gamma);
        loss = -(1.0 - alpha) * pg * std::log(1.0 - p);
        dloss_dlogit = (1.0 - alpha) * (pg * p - gamma * pg * (1.0 - p) * std::log(1.0 - p));
    }
}

} // namespace

void FocalConfig::validate() const {
    if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("FocalConfig: alpha must be in (0,1)");
    if (!(gamma >= 0.0)) throw std::invalid_argument("FocalConfig: gamma must be >= 0");
}

void FocusShiftState::validate() const {
    if (total_iters < 1) throw std::invalid_argument("FocusShiftState: total_iters must be >= 1");
    if (!(t0 > 0.0 && t1 >= t0)) throw std::invalid_argument("FocusShiftState: need t1 >= t0 > 0");
    if (!(tn_threshold > 0.0 && tn_threshold < 1.0))
        throw std::invalid_argument("FocusShiftState: tn_threshold must be in (0,1)");
}

ScalarLoss focal_vanilla(const std::vector<double>& probs, const std::vector<int>& labels,
                         const FocalConfig& cfg) {
    cfg.validate();
    if (probs.size() != labels.size())
        throw std::invalid_argument("focal_vanilla: probs/labels size mismatch");
    std::int64_t n_pos = 0;
    for (int l : labels) n_pos += (l != 0);
    if (n_pos == 0)
        throw DegenerateBatchError("focal_vanilla: batch has no positives (1/N_pos undefined)");

    ScalarLoss out;
    out.grad_logits.assign(probs.size(), 0.0);
    double sum = 0.0;
    const double inv = 1.0 / static_cast<double>(n_pos);
    for (std::size_t i = 0; i < probs.size(); ++i) {
        double l, g;
        focal_term(probs[i], labels[i] != 0, cfg.alpha, cfg.gamma, l, g);
        sum += l;
        out.grad_logits[i] = g * inv;
    }
    out.loss = sum * inv;
    return out;
}

AdaptiveLoss focal_adaptive(const std::vector<double>& probs,
                            const std::vector<AnchorLabel>& labels, const FocalConfig& cfg,
                            const FocusShiftState& state) {
    cfg.validate();
    state.validate();
    if (probs.size() != labels.size())
        throw std::invalid_argument("focal_adaptive: probs/labels size mismatch");

    AdaptiveLoss out;
    out.grad_logits.assign(probs.size(), 0.0);
    out.summary.n_all = static_cast<std::int64_t>(probs.size());
    for (std::size_t i = 0; i < probs.size(); ++i) {
        if (labels[i] == AnchorLabel::Positive) ++out.summary.n_pos;
        else if (labels[i] == AnchorLabel::Negative) {
            ++out.summary.n_neg;
            if (probs[i] < state.tn_threshold) ++out.summary.n_tn;
        }
    }

    // N_TN clamped to >= 2 so log(N_TN) stays positive.
    const double n_tn = static_cast<double>(std::max<std::int64_t>(2, out.summary.n_tn));
    const double w_neg = state.t_factor() * std::log(n_tn) / n_tn;
    const double inv_pos =
        out.summary.n_pos > 0 ? 1.0 / static_cast<double>(out.summary.n_pos) : 0.0;

    double neg_sum = 0.0, pos_sum = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        if (labels[i] == AnchorLabel::Negative) {
            double l, g;
            focal_term(probs[i], false, cfg.alpha, cfg.gamma, l, g);
            neg_sum += l;
            out.grad_logits[i] = w_neg * g;
        } else if (labels[i] == AnchorLabel::Positive) {
            const double p = clamp_prob(probs[i]);
            pos_sum += -std::log(p);
            out.grad_logits[i] = (p - 1.0) * inv_pos;
        }
    }
    out.loss_neg = w_neg * neg_sum;
    out.loss_pos = pos_sum * inv_pos;
    out.loss = out.loss_neg + out.loss_pos;
    return out;
}

SmoothL1 smooth_l1(const std::array<double, 4>& pred, const std::array<double, 4>& target,
                   double beta) {
    if (!(beta > 0.0)) throw std::invalid_argument("smooth_l1: beta must be > 0");
    SmoothL1 out;
    for (int i = 0; i < 4; ++i) {
        const double x = pred[static_cast<std::size_t>(i)] - target[static_cast<std::size_t>(i)];
        if (!std::isfinite(x)) throw std::invalid_argument("smooth_l1: non-finite input");
        if (std::abs(x) < beta) {
            out.loss += 0.5 * x * x / beta;
            out.grad[static_cast<std::size_t>(i)] = x / beta;
        } else {
            out.loss += std::abs(x) - 0.5 * beta;
            out.grad[static_cast<std::size_t>(i)] = (x > 0.0) ? 1.0 : -1.0;
        }
    }
    return out;
}

RpnLoss rpn_loss(const std::vector<RpnLevelData>& levels, const FocalConfig& cfg,
                 const FocusShiftState& state, double lambda_reg) {
    RpnLoss out;
    for (const RpnLevelData& lvl : levels) {
        if (lvl.labels == nullptr) throw std::invalid_argument("rpn_loss: missing labels");
        if (lvl.probs.size() != lvl.labels->label.size() || lvl.regs.size() != lvl.probs.size())
            throw ShapeError("rpn_loss: per-level output/label size mismatch");

        AdaptiveLoss cls = focal_adaptive(lvl.probs, lvl.labels->label, cfg, state);
        out.cls_neg += cls.loss_neg;
        out.cls_pos += cls.loss_pos;
        out.summary.n_pos += cls.summary.n_pos;
        out.summary.n_neg += cls.summary.n_neg;
        out.summary.n_tn += cls.summary.n_tn;
        out.summary.n_all += cls.summary.n_all;

        std::vector<std::array<double, 4>> reg_grad(lvl.regs.size(), {0.0, 0.0, 0.0, 0.0});
        double reg_sum = 0.0;
        if (cls.summary.n_pos > 0) {
            const double scale = lambda_reg / static_cast<double>(cls.summary.n_pos);
            for (std::size_t i = 0; i < lvl.regs.size(); ++i) {
                if (lvl.labels->label[i] != AnchorLabel::Positive) continue;
                SmoothL1 s = smooth_l1(lvl.regs[i], lvl.labels->target[i]);
                reg_sum += s.loss;
                for (int c = 0; c < 4; ++c)
                    reg_grad[i][static_cast<std::size_t>(c)] = s.grad[static_cast<std::size_t>(c)] * scale;
            }
            reg_sum *= scale;
        }
        out.reg += reg_sum;
        out.grad_logits.push_back(std::move(cls.grad_logits));
        out.grad_regs.push_back(std::move(reg_grad));
    }
    out.total = out.cls_neg + out.cls_pos + out.reg;
    return out;
}

ScalarLoss fprn_loss(const std::vector<double>& probs, const std::vector<int>& labels) {
    if (probs.size() != labels.size())
        throw std::invalid_argument("fprn_loss: probs/labels size mismatch");
    ScalarLoss out;
    out.grad_logits.assign(probs.size(), 0.0);
    if (probs.empty()) return out;
    const double inv = 1.0 / static_cast<double>(probs.size());
    for (std::size_t i = 0; i < probs.size(); ++i) {
        const double p = std::clamp(probs[i], kProbFloor, 1.0 - kProbFloor);
        const double y = labels[i] != 0 ? 1.0 : 0.0;
        out.loss += -(y * std::log(p) + (1.0 - y) * std::log(1.0 - p)) * inv;
        out.grad_logits[i] = (p - y) * inv;
    }
    return out;
}

} // namespace voldet
