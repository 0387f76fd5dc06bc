#pragma once

#include "voldet/nn.hpp"
#include "voldet/volume.hpp"

#include <array>
#include <cmath>
#include <optional>
#include <vector>

namespace voldet {

/// A detection candidate flowing through NMS, fusion and evaluation. Box is
/// in voxel units; level is the reference pyramid stride it was proposed at.
struct Proposal {
    Box3D box;
    double rpn_score = 0.0;
    double fpr_score = -1.0; // < 0 means "not scored by the FPR branch"
    double fused_score = 0.0;
    int level = 0;

    bool has_fpr() const { return fpr_score >= 0.0; }
};

/// Average of the two branch confidences.
inline double fuse_scores(double rpn_score, double fpr_score) {
    return 0.5 * (rpn_score + fpr_score);
}

inline double logistic(double z) { return 1.0 / (1.0 + std::exp(-z)); }

/// Per-stride feature maps sharing one batch size and channel width.
template <typename T>
struct FeaturePyramid {
    std::vector<int> strides;
    std::vector<Tensor<T>> maps; // each [B][C][Z][Y][X]

    std::size_t level_count() const { return maps.size(); }
};

/// One pyramid level's crop geometry in feature-cell coordinates.
struct RoiLevelGeometry {
    std::array<double, 3> center{}; // box center / stride
    double side = 0.0;              // d_ref, equal across levels by construction
};

struct RoiGeometry {
    std::vector<RoiLevelGeometry> levels;
};

/// Diameter Alignment: the proposal's feature-unit diameter at its reference
/// level (d / level stride) is broadcast to every level, so all levels crop
/// the same feature-cell extent; centers scale as 1/stride.
inline RoiGeometry diameter_align(const Proposal& p, const std::vector<int>& strides) {
    bool found = false;
    for (int s : strides) found |= (s == p.level);
    if (!found) throw ShapeError("diameter_align: proposal level " + std::to_string(p.level) +
                                 " not in pyramid strides");
    const double d_ref = p.box.d / static_cast<double>(p.level);
    RoiGeometry geom;
    geom.levels.reserve(strides.size());
    for (int s : strides) {
        RoiLevelGeometry g;
        const double inv = 1.0 / static_cast<double>(s);
        g.center = {p.box.z * inv, p.box.y * inv, p.box.x * inv};
        g.side = d_ref;
        geom.levels.push_back(g);
    }
    return geom;
}

/// Fixed-size integer crop around the RoI with margins, zero-padded outside
/// the map. The fractional RoI is re-expressed relative to the crop origin.
template <typename T>
struct FeatureCrop {
    Tensor<T> data;                       // [1][C][S][S][S]
    std::array<std::int64_t, 3> origin{}; // crop origin in feature cells
    std::array<double, 3> roi_center{};   // RoI center in crop coordinates
    double roi_side = 0.0;
};

template <typename T>
FeatureCrop<T> crop_with_margin(const Tensor<T>& level_map, std::int64_t batch_index,
                                const RoiLevelGeometry& geom, int fixed_side) {
    if (level_map.rank() != 5) throw ShapeError("crop_with_margin: feature map must be 5-D");
    if (fixed_side < 1 || fixed_side % 2 == 0)
        throw ShapeError("crop_with_margin: fixed_side must be odd and >= 1");
    const std::int64_t C = level_map.dim(1);
    const std::int64_t Z = level_map.dim(2), Y = level_map.dim(3), X = level_map.dim(4);
    const std::int64_t half = (fixed_side - 1) / 2;

    FeatureCrop<T> crop;
    crop.data = Tensor<T>({1, C, fixed_side, fixed_side, fixed_side});
    for (int a = 0; a < 3; ++a)
        crop.origin[static_cast<std::size_t>(a)] =
            std::llround(geom.center[static_cast<std::size_t>(a)]) - half;
    crop.roi_center = {geom.center[0] - static_cast<double>(crop.origin[0]),
                       geom.center[1] - static_cast<double>(crop.origin[1]),
                       geom.center[2] - static_cast<double>(crop.origin[2])};
    crop.roi_side = geom.side;

    for (std::int64_t c = 0; c < C; ++c) {
        const T* src = level_map.data() + ((batch_index * C + c) * Z * Y * X);
        T* dst = crop.data.data() + c * fixed_side * fixed_side * fixed_side;
        for (std::int64_t z = 0; z < fixed_side; ++z) {
            const std::int64_t sz = z + crop.origin[0];
            for (std::int64_t y = 0; y < fixed_side; ++y) {
                const std::int64_t sy = y + crop.origin[1];
                for (std::int64_t x = 0; x < fixed_side; ++x) {
                    const std::int64_t sx = x + crop.origin[2];
                    const bool inside =
                        sz >= 0 && sz < Z && sy >= 0 && sy < Y && sx >= 0 && sx < X;
                    dst[(z * fixed_side + y) * fixed_side + x] =
                        inside ? src[(sz * Y + sy) * X + sx] : T(0);
                }
            }
        }
    }
    return crop;
}

/// Scatters a crop gradient back into the level-map gradient accumulator
/// (out-of-map cells contributed zero-padding and get nothing back).
template <typename T>
void crop_with_margin_backward(const FeatureCrop<T>& crop, const Tensor<T>& grad_crop,
                               Tensor<T>& grad_map, std::int64_t batch_index) {
    grad_crop.require_same_shape(crop.data, "crop_with_margin_backward");
    const std::int64_t C = grad_map.dim(1);
    const std::int64_t Z = grad_map.dim(2), Y = grad_map.dim(3), X = grad_map.dim(4);
    const std::int64_t S = crop.data.dim(2);
    for (std::int64_t c = 0; c < C; ++c) {
        const T* src = grad_crop.data() + c * S * S * S;
        T* dst = grad_map.data() + ((batch_index * C + c) * Z * Y * X);
        for (std::int64_t z = 0; z < S; ++z) {
            const std::int64_t sz = z + crop.origin[0];
            if (sz < 0 || sz >= Z) continue;
            for (std::int64_t y = 0; y < S; ++y) {
                const std::int64_t sy = y + crop.origin[1];
                if (sy < 0 || sy >= Y) continue;
                for (std::int64_t x = 0; x < S; ++x) {
                    const std::int64_t sx = x + crop.origin[2];
                    if (sx < 0 || sx >= X) continue;
                    dst[(sz * Y + sy) * X + sx] += src[(z * S + y) * S + x];
                }
            }
        }
    }
}

/// RoI box for one batch item, in the feature coordinates of the tensor it is
/// applied to.
struct RoiBox {
    std::array<double, 3> center{};
    double side = 0.0;
};

/// 3D RoI Align: each output bin averages trilinear samples at regularly
/// spaced points inside its sub-box. Trilinear interpolation reads the 8
/// surrounding cell centers, clamped at the borders.
template <typename T>
class RoiAlign3d {
public:
    explicit RoiAlign3d(int out_size = 2, int samples_per_axis = 2)
        : out_size_(out_size), samples_(samples_per_axis) {
        if (out_size_ < 1 || samples_ < 1)
            throw ShapeError("roi_align_3d: out_size and samples_per_bin must be >= 1");
    }

    Tensor<T> forward(const Tensor<T>& feature, const std::vector<RoiBox>& rois) {
        if (feature.rank() != 5) throw ShapeError("roi_align_3d: feature must be 5-D");
        if (static_cast<std::int64_t>(rois.size()) != feature.dim(0))
            throw ShapeError("roi_align_3d: one RoI per batch item required");
        in_shape_ = feature.shape();
        taps_.clear();

        const std::int64_t B = feature.dim(0), C = feature.dim(1);
        const std::int64_t Z = feature.dim(2), Y = feature.dim(3), X = feature.dim(4);
        Tensor<T> out({B, C, out_size_, out_size_, out_size_});
        const std::int64_t bins = static_cast<std::int64_t>(out_size_) * out_size_ * out_size_;
        taps_.resize(static_cast<std::size_t>(B * bins));

        const double inv_n = 1.0 / static_cast<double>(samples_ * samples_ * samples_);
        for (std::int64_t b = 0; b < B; ++b) {
            const RoiBox& roi = rois[static_cast<std::size_t>(b)];
            if (!(roi.side > 0.0)) throw ShapeError("roi_align_3d: roi side must be > 0");
            const double bin = roi.side / static_cast<double>(out_size_);
            const std::array<double, 3> origin{roi.center[0] - roi.side / 2.0,
                                               roi.center[1] - roi.side / 2.0,
                                               roi.center[2] - roi.side / 2.0};
            for (int bz = 0; bz < out_size_; ++bz)
                for (int by = 0; by < out_size_; ++by)
                    for (int bx = 0; bx < out_size_; ++bx) {
                        auto& cell_taps =
                            taps_[static_cast<std::size_t>(b * bins + (bz * out_size_ + by) * out_size_ + bx)];
                        cell_taps.clear();
                        for (int sz = 0; sz < samples_; ++sz)
                            for (int sy = 0; sy < samples_; ++sy)
                                for (int sx = 0; sx < samples_; ++sx) {
                                    const double pz = origin[0] + (bz + (sz + 0.5) / samples_) * bin;
                                    const double py = origin[1] + (by + (sy + 0.5) / samples_) * bin;
                                    const double px = origin[2] + (bx + (sx + 0.5) / samples_) * bin;
                                    add_trilinear_taps(cell_taps, pz, py, px, Z, Y, X, inv_n);
                                }
                    }
        }

        for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t c = 0; c < C; ++c) {
                const T* src = feature.data() + ((b * C + c) * Z * Y * X);
                T* dst = out.data() + ((b * C + c) * bins);
                for (std::int64_t i = 0; i < bins; ++i) {
                    double acc = 0.0;
                    for (const Tap& t : taps_[static_cast<std::size_t>(b * bins + i)])
                        acc += t.weight * static_cast<double>(src[t.offset]);
                    dst[i] = static_cast<T>(acc);
                }
            }
        return out;
    }

    Tensor<T> backward(const Tensor<T>& grad_out) {
        const std::int64_t B = in_shape_[0], C = in_shape_[1];
        const std::int64_t S = in_shape_[2] * in_shape_[3] * in_shape_[4];
        const std::int64_t bins = static_cast<std::int64_t>(out_size_) * out_size_ * out_size_;
        if (grad_out.rank() != 5 || grad_out.dim(0) != B || grad_out.dim(1) != C ||
            grad_out.dim(2) != out_size_)
            throw ShapeError("roi_align_3d backward: grad_out shape mismatch");
        Tensor<T> grad_in(in_shape_);
        for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t c = 0; c < C; ++c) {
                const T* g = grad_out.data() + ((b * C + c) * bins);
                T* dst = grad_in.data() + ((b * C + c) * S);
                for (std::int64_t i = 0; i < bins; ++i)
                    for (const Tap& t : taps_[static_cast<std::size_t>(b * bins + i)])
                        dst[t.offset] += static_cast<T>(t.weight * static_cast<double>(g[i]));
            }
        return grad_in;
    }

    int out_size() const { return out_size_; }

private:
    struct Tap {
        std::int64_t offset;
        double weight;
    };

    static void axis_tap(double coord, std::int64_t n, std::int64_t& i0, std::int64_t& i1,
                         double& w1) {
        const double u = coord - 0.5; // cell centers live at half-integers
        const double fl = std::floor(u);
        i0 = static_cast<std::int64_t>(fl);
        w1 = u - fl;
        i1 = i0 + 1;
        if (i0 < 0) { i0 = 0; i1 = 0; w1 = 0.0; }
        if (i1 > n - 1) {
            i1 = n - 1;
            if (i0 > n - 1) i0 = n - 1;
            if (i0 == i1) w1 = 0.0;
        }
    }

    void add_trilinear_taps(std::vector<Tap>& taps, double pz, double py, double px,
                            std::int64_t Z, std::int64_t Y, std::int64_t X, double scale) {
        std::int64_t z0, z1, y0, y1, x0, x1;
        double wz, wy, wx;
        axis_tap(pz, Z, z0, z1, wz);
        axis_tap(py, Y, y0, y1, wy);
        axis_tap(px, X, x0, x1, wx);
        const double w[2][3] = {{1.0 - wz, 1.0 - wy, 1.0 - wx}, {wz, wy, wx}};
        const std::int64_t idx[2][3] = {{z0, y0, x0}, {z1, y1, x1}};
        for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 2; ++b)
                for (int c = 0; c < 2; ++c) {
                    const double weight = w[a][0] * w[b][1] * w[c][2] * scale;
                    if (weight == 0.0) continue;
                    taps.push_back(Tap{(idx[a][0] * Y + idx[b][1]) * X + idx[c][2], weight});
                }
    }

    int out_size_;
    int samples_;
    std::vector<std::int64_t> in_shape_;
    std::vector<std::vector<Tap>> taps_;
};

/// Channel-preserving bottleneck: BN-ReLU-Conv1^3 (C -> hidden) then
/// BN-ReLU-Conv3^3 (hidden -> C).
template <typename T>
class Bottleneck {
public:
    Bottleneck() = default;

    explicit Bottleneck(std::int64_t channels, std::int64_t hidden = 0)
        : bn1_(channels), bn2_(hidden > 0 ? hidden : 2 * channels) {
        const std::int64_t h = hidden > 0 ? hidden : 2 * channels;
        KernelConfig c1;
        c1.kernel = {1, 1, 1};
        c1.pad = {0, 0, 0};
        conv1_ = Conv3d<T>(channels, h, c1, false);
        KernelConfig c3;
        conv2_ = Conv3d<T>(h, channels, c3, false);
    }

    void init_he(Rng& rng) {
        conv1_.init_he(rng);
        conv2_.init_he(rng);
    }

    Tensor<T> forward(const Tensor<T>& x, bool train) {
        return conv2_.forward(relu2_.forward(bn2_.forward(
            conv1_.forward(relu1_.forward(bn1_.forward(x, train))), train)));
    }

    Tensor<T> backward(const Tensor<T>& grad_out) {
        return bn1_.backward(relu1_.backward(
            conv1_.backward(bn2_.backward(relu2_.backward(conv2_.backward(grad_out))))));
    }

    void visit_params(const std::string& prefix, const ParamVisitor<T>& fn) {
        bn1_.visit_params(prefix + ".bn1", fn);
        conv1_.visit_params(prefix + ".conv1", fn);
        bn2_.visit_params(prefix + ".bn2", fn);
        conv2_.visit_params(prefix + ".conv2", fn);
    }
    void visit_state(const std::string& prefix, const StateVisitor<T>& fn) {
        bn1_.visit_state(prefix + ".bn1", fn);
        bn2_.visit_state(prefix + ".bn2", fn);
    }

private:
    BatchNorm3d<T> bn1_;
    ReLU<T> relu1_;
    Conv3d<T> conv1_;
    BatchNorm3d<T> bn2_;
    ReLU<T> relu2_;
    Conv3d<T> conv2_;
};

/// Local Magnification: two stacked (deconv x2 -> bottleneck x2) stages,
/// 4x spatial magnification. Deconvs are bias-free; weights are shared across
/// pyramid levels by construction (one instance serves all levels).
template <typename T>
class MagnifyStack {
public:
    MagnifyStack() = default;

    explicit MagnifyStack(std::int64_t channels, std::int64_t hidden = 0)
        : up1_(channels, channels, false), b1a_(channels, hidden), b1b_(channels, hidden),
          up2_(channels, channels, false), b2a_(channels, hidden), b2b_(channels, hidden) {}

    void init_he(Rng& rng) {
        up1_.init_he(rng);
        b1a_.init_he(rng);
        b1b_.init_he(rng);
        up2_.init_he(rng);
        b2a_.init_he(rng);
        b2b_.init_he(rng);
    }

    Tensor<T> forward(const Tensor<T>& crop, bool train) {
        Tensor<T> h = b1b_.forward(b1a_.forward(up1_.forward(crop), train), train);
        return b2b_.forward(b2a_.forward(up2_.forward(h), train), train);
    }

    Tensor<T> backward(const Tensor<T>& grad_out) {
        Tensor<T> g = up2_.backward(b2a_.backward(b2b_.backward(grad_out)));
        return up1_.backward(b1a_.backward(b1b_.backward(g)));
    }

    static constexpr int magnification() { return 4; }

    void visit_params(const std::string& prefix, const ParamVisitor<T>& fn) {
        up1_.visit_params(prefix + ".up1", fn);
        b1a_.visit_params(prefix + ".block1a", fn);
        b1b_.visit_params(prefix + ".block1b", fn);
        up2_.visit_params(prefix + ".up2", fn);
        b2a_.visit_params(prefix + ".block2a", fn);
        b2b_.visit_params(prefix + ".block2b", fn);
    }
    void visit_state(const std::string& prefix, const StateVisitor<T>& fn) {
        b1a_.visit_state(prefix + ".block1a", fn);
        b1b_.visit_state(prefix + ".block1b", fn);
        b2a_.visit_state(prefix + ".block2a", fn);
        b2b_.visit_state(prefix + ".block2b", fn);
    }

private:
    Deconv3dX2<T> up1_;
    Bottleneck<T> b1a_, b1b_;
    Deconv3dX2<T> up2_;
    Bottleneck<T> b2a_, b2b_;
};

/// Aggregated classifier: per-level aligned crops concatenate to one vector
/// (levels x channels x bins, 768 with the paper widths), then
/// 768 -> 256 -> ReLU -> 256 -> 1 -> sigmoid.
template <typename T>
class ClassifierHead {
public:
    ClassifierHead() = default;

    ClassifierHead(std::int64_t levels, std::int64_t channels, int out_size)
        : in_features_(levels * channels * out_size * out_size * out_size),
          fc1_(in_features_, 256), fc2_(256, 1) {}

    void init_he(Rng& rng) {
        fc1_.init_he(rng);
        fc2_.init_he(rng);
    }

    /// aligned: per-level tensors [1][C][r][r][r], concatenated level-major.
    /// Returns the pre-sigmoid logit.
    double forward_logit(const std::vector<Tensor<T>>& aligned) {
        std::int64_t total = 0;
        for (const Tensor<T>& t : aligned) total += t.numel();
        if (total != in_features_)
            throw ShapeError("classifier head: aggregated feature length " + std::to_string(total) +
                             " != expected " + std::to_string(in_features_));
        Tensor<T> flat({1, in_features_});
        std::int64_t off = 0;
        for (const Tensor<T>& t : aligned) {
            std::copy(t.data(), t.data() + t.numel(), flat.data() + off);
            off += t.numel();
        }
        Tensor<T> h = relu_.forward(fc1_.forward(flat));
        Tensor<T> logit = fc2_.forward(h);
        return static_cast<double>(logit[0]);
    }

    /// Backward from d loss / d logit; returns per-level gradients matching
    /// the forward inputs.
    std::vector<Tensor<T>> backward(double dlogit,
                                    const std::vector<std::vector<std::int64_t>>& level_shapes) {
        Tensor<T> g({1, 1});
        g[0] = static_cast<T>(dlogit);
        Tensor<T> gflat = fc1_.backward(relu_.backward(fc2_.backward(g)));
        std::vector<Tensor<T>> grads;
        std::int64_t off = 0;
        for (const auto& shape : level_shapes) {
            Tensor<T> lg(shape);
            std::copy(gflat.data() + off, gflat.data() + off + lg.numel(), lg.data());
            off += lg.numel();
            grads.push_back(std::move(lg));
        }
        return grads;
    }

    std::int64_t in_features() const { return in_features_; }

    void visit_params(const std::string& prefix, const ParamVisitor<T>& fn) {
        fc1_.visit_params(prefix + ".fc1", fn);
        fc2_.visit_params(prefix + ".fc2", fn);
    }

private:
    std::int64_t in_features_ = 0;
    Linear<T> fc1_;
    ReLU<T> relu_;
    Linear<T> fc2_;
};

} // namespace voldet
