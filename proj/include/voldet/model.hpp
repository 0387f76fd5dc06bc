#pragma once

#include "voldet/anchors.hpp"
#include "voldet/checkpoint.hpp"
#include "voldet/roi.hpp"

#include <algorithm>
#include <array>
#include <map>
#include <string>
#include <vector>

namespace voldet {

/// BN-ReLU-Conv unit (the "conv" of the layer table). Bias-free: the
/// preceding normalization supplies the shift.
template <typename T>
class BrcUnit {
public:
    BrcUnit() = default;

    BrcUnit(std::int64_t in_ch, std::int64_t out_ch, int kernel, double bn_eps = 1e-5,
            double bn_momentum = 0.1)
        : bn_(in_ch, bn_eps, bn_momentum) {
        KernelConfig cfg;
        cfg.kernel = {kernel, kernel, kernel};
        const int pad = (kernel - 1) / 2;
        cfg.pad = {pad, pad, pad};
        conv_ = Conv3d<T>(in_ch, out_ch, cfg, false);
    }

    void init_he(Rng& rng) { conv_.init_he(rng); }

    Tensor<T> forward(const Tensor<T>& x, bool train) {
        return conv_.forward(relu_.forward(bn_.forward(x, train)));
    }
    Tensor<T> backward(const Tensor<T>& grad_out) {
        return bn_.backward(relu_.backward(conv_.backward(grad_out)));
    }

    void visit_params(const std::string& prefix, const ParamVisitor<T>& fn) {
        bn_.visit_params(prefix + ".bn", fn);
        conv_.visit_params(prefix + ".conv", fn);
    }
    void visit_state(const std::string& prefix, const StateVisitor<T>& fn) {
        bn_.visit_state(prefix + ".bn", fn);
    }

private:
    BatchNorm3d<T> bn_;
    ReLU<T> relu_;
    Conv3d<T> conv_;
};

/// DenseNet layer: 1^3 bottleneck to 4*growth, then 3^3 to growth channels.
template <typename T>
class DenseLayer {
public:
    DenseLayer() = default;

    DenseLayer(std::int64_t in_ch, int growth, double bn_eps, double bn_momentum)
        : brc1_(in_ch, 4 * growth, 1, bn_eps, bn_momentum),
          brc2_(4 * growth, growth, 3, bn_eps, bn_momentum) {}

    void init_he(Rng& rng) {
        brc1_.init_he(rng);
        brc2_.init_he(rng);
    }

    Tensor<T> forward(const Tensor<T>& x, bool train) {
        return brc2_.forward(brc1_.forward(x, train), train);
    }
    Tensor<T> backward(const Tensor<T>& grad_out) {
        return brc1_.backward(brc2_.backward(grad_out));
    }

    void visit_params(const std::string& prefix, const ParamVisitor<T>& fn) {
        brc1_.visit_params(prefix + ".brc1", fn);
        brc2_.visit_params(prefix + ".brc2", fn);
    }
    void visit_state(const std::string& prefix, const StateVisitor<T>& fn) {
        brc1_.visit_state(prefix + ".brc1", fn);
        brc2_.visit_state(prefix + ".brc2", fn);
    }

private:
    BrcUnit<T> brc1_;
    BrcUnit<T> brc2_;
};

/// DenseNet block: every layer's growth channels concatenate onto its input.
template <typename T>
class DenseBlock {
public:
    DenseBlock() = default;

    DenseBlock(std::int64_t in_ch, int layers, int growth, double bn_eps, double bn_momentum)
        : in_ch_(in_ch), growth_(growth) {
        for (int i = 0; i < layers; ++i)
            layers_.emplace_back(in_ch + i * growth, growth, bn_eps, bn_momentum);
    }

    std::int64_t out_channels() const {
        return in_ch_ + static_cast<std::int64_t>(layers_.size()) * growth_;
    }

    void init_he(Rng& rng) {
        for (auto& l : layers_) l.init_he(rng);
    }

    Tensor<T> forward(const Tensor<T>& x, bool train) {
        Tensor<T> cur = x;
        for (auto& l : layers_) {
            Tensor<T> fresh = l.forward(cur, train);
            cur = concat_channels<T>({&cur, &fresh});
        }
        return cur;
    }

    Tensor<T> backward(const Tensor<T>& grad_out) {
        Tensor<T> g = grad_out;
        for (std::size_t i = layers_.size(); i-- > 0;) {
            const std::int64_t prev_ch = in_ch_ + static_cast<std::int64_t>(i) * growth_;
            auto parts = concat_channels_backward(g, {prev_ch, growth_});
            Tensor<T> gin = layers_[i].backward(parts[1]);
            parts[0].add_(gin);
            g = std::move(parts[0]);
        }
        return g;
    }

    void visit_params(const std::string& prefix, const ParamVisitor<T>& fn) {
        for (std::size_t i = 0; i < layers_.size(); ++i)
            layers_[i].visit_params(prefix + ".layer" + std::to_string(i), fn);
    }
    void visit_state(const std::string& prefix, const StateVisitor<T>& fn) {
        for (std::size_t i = 0; i < layers_.size(); ++i)
            layers_[i].visit_state(prefix + ".layer" + std::to_string(i), fn);
    }

private:
    std::int64_t in_ch_ = 0;
    int growth_ = 0;
    std::vector<DenseLayer<T>> layers_;
};

struct BackboneConfig {
    int growth = 16;
    int preblock_channels = 16;
    std::array<int, 3> dense_layers{1, 1, 1};
    int trans_channels = 32;
    int pyramid_channels = 32;
    double bn_eps = 1e-5;
    double bn_momentum = 0.1;

    void validate() const {
        if (growth < 1 || preblock_channels < 1 || trans_channels < 1 || pyramid_channels < 1)
            throw std::invalid_argument("BackboneConfig: channel counts must be >= 1");
        for (int l : dense_layers)
            if (l < 1) throw std::invalid_argument("BackboneConfig: dense layer counts must be >= 1");
    }
};

/// U-Net backbone with DenseNet blocks. Encode: PreBlock (two 3^3 convs +
/// 2^3 max pool) then three (DenseBlock, 1^3 conv + 2^3 avg pool) stages down
/// to stride 16. Decode: transposed-conv upsampling, concatenation with the
/// matching encode map, 1^3 compression to the pyramid width. Returned maps
/// have strides exactly 4, 8, 16.
template <typename T>
class Backbone {
public:
    explicit Backbone(const BackboneConfig& cfg) : cfg_(cfg) {
        cfg.validate();
        const int c0 = cfg.preblock_channels;
        const int t = cfg.trans_channels;
        const int P = cfg.pyramid_channels;

        KernelConfig in_cfg;
        conv_in_ = Conv3d<T>(1, c0, in_cfg, true);
        pre_brc_ = BrcUnit<T>(c0, c0, 3, cfg.bn_eps, cfg.bn_momentum);
        pre_pool_ = Pool3d<T>(PoolMode::Max);

        enc1_ = DenseBlock<T>(c0, cfg.dense_layers[0], cfg.growth, cfg.bn_eps, cfg.bn_momentum);
        trans1_ = BrcUnit<T>(enc1_.out_channels(), t, 1, cfg.bn_eps, cfg.bn_momentum);
        enc2_ = DenseBlock<T>(t, cfg.dense_layers[1], cfg.growth, cfg.bn_eps, cfg.bn_momentum);
        trans2_ = BrcUnit<T>(enc2_.out_channels(), t, 1, cfg.bn_eps, cfg.bn_momentum);
        enc3_ = DenseBlock<T>(t, cfg.dense_layers[2], cfg.growth, cfg.bn_eps, cfg.bn_momentum);
        trans3_ = BrcUnit<T>(enc3_.out_channels(), t, 1, cfg.bn_eps, cfg.bn_momentum);

        lateral16_ = BrcUnit<T>(t, P, 1, cfg.bn_eps, cfg.bn_momentum);

        up8_ = Deconv3dX2<T>(t, P, true);
        fuse8_ = BrcUnit<T>(P + enc3_.out_channels(), P, 1, cfg.bn_eps, cfg.bn_momentum);
        dec8_ = DenseBlock<T>(P, cfg.dense_layers[2], cfg.growth, cfg.bn_eps, cfg.bn_momentum);
        comp8_ = BrcUnit<T>(dec8_.out_channels(), P, 1, cfg.bn_eps, cfg.bn_momentum);

        up4_ = Deconv3dX2<T>(P, P, true);
        fuse4_ = BrcUnit<T>(P + enc2_.out_channels(), P, 1, cfg.bn_eps, cfg.bn_momentum);
        dec4_ = DenseBlock<T>(P, cfg.dense_layers[1], cfg.growth, cfg.bn_eps, cfg.bn_momentum);
        comp4_ = BrcUnit<T>(dec4_.out_channels(), P, 1, cfg.bn_eps, cfg.bn_momentum);
    }

    void init_he(Rng& rng) {
        conv_in_.init_he(rng);
        pre_brc_.init_he(rng);
        enc1_.init_he(rng);
        trans1_.init_he(rng);
        enc2_.init_he(rng);
        trans2_.init_he(rng);
        enc3_.init_he(rng);
        trans3_.init_he(rng);
        lateral16_.init_he(rng);
        up8_.init_he(rng);
        fuse8_.init_he(rng);
        dec8_.init_he(rng);
        comp8_.init_he(rng);
        up4_.init_he(rng);
        fuse4_.init_he(rng);
        dec4_.init_he(rng);
        comp4_.init_he(rng);
    }

    FeaturePyramid<T> forward(const Tensor<T>& input, bool train) {
        if (input.rank() != 5 || input.dim(1) != 1)
            throw ShapeError("backbone: input must be [B,1,Z,Y,X]");
        for (int a = 2; a < 5; ++a)
            if (input.dim(static_cast<std::size_t>(a)) % 16 != 0)
                throw ShapeError("backbone: input spatial dims must be divisible by 16");

        Tensor<T> x = pre_pool_.forward(pre_brc_.forward(conv_in_.forward(input), train));
        enc1_out_ = enc1_.forward(x, train);
        Tensor<T> s4 = trans1_pool_.forward(trans1_.forward(enc1_out_, train));
        enc2_out_ = enc2_.forward(s4, train);
        Tensor<T> s8 = trans2_pool_.forward(trans2_.forward(enc2_out_, train));
        enc3_out_ = enc3_.forward(s8, train);
        d16_ = trans3_pool_.forward(trans3_.forward(enc3_out_, train));

        Tensor<T> p16 = lateral16_.forward(d16_, train);

        Tensor<T> u8 = up8_.forward(d16_);
        Tensor<T> f8 = fuse8_.forward(concat_channels<T>({&u8, &enc3_out_}), train);
        Tensor<T> p8 = comp8_.forward(dec8_.forward(f8, train), train);

        Tensor<T> u4 = up4_.forward(p8);
        Tensor<T> f4 = fuse4_.forward(concat_channels<T>({&u4, &enc2_out_}), train);
        Tensor<T> p4 = comp4_.forward(dec4_.forward(f4, train), train);

        FeaturePyramid<T> pyr;
        pyr.strides = {4, 8, 16};
        pyr.maps.push_back(std::move(p4));
        pyr.maps.push_back(std::move(p8));
        pyr.maps.push_back(std::move(p16));
        return pyr;
    }

    /// Backpropagates pyramid gradients through the decode and encode paths,
    /// accumulating parameter gradients. The input gradient is discarded.
    void backward(const FeaturePyramid<T>& grad_pyr) {
        const int P = cfg_.pyramid_channels;

        Tensor<T> g_f4 = dec4_.backward(comp4_.backward(grad_pyr.maps[0]));
        auto parts4 = concat_channels_backward(fuse4_.backward(g_f4), {P, enc2_.out_channels()});
        Tensor<T> g_p8 = up4_.backward(parts4[0]);
        g_p8.add_(grad_pyr.maps[1]);

        Tensor<T> g_f8 = dec8_.backward(comp8_.backward(g_p8));
        auto parts8 = concat_channels_backward(fuse8_.backward(g_f8), {P, enc3_.out_channels()});
        Tensor<T> g_d16 = up8_.backward(parts8[0]);
        g_d16.add_(lateral16_.backward(grad_pyr.maps[2]));

        Tensor<T> g_enc3 = trans3_.backward(trans3_pool_.backward(g_d16));
        g_enc3.add_(parts8[1]);
        Tensor<T> g_s8 = enc3_.backward(g_enc3);

        Tensor<T> g_enc2 = trans2_.backward(trans2_pool_.backward(g_s8));
        g_enc2.add_(parts4[1]);
        Tensor<T> g_s4 = enc2_.backward(g_enc2);

        Tensor<T> g_enc1 = trans1_.backward(trans1_pool_.backward(g_s4));
        Tensor<T> g_pre = pre_pool_.backward(enc1_.backward(g_enc1));
        conv_in_.backward(pre_brc_.backward(g_pre));
    }

    void visit_params(const std::string& prefix, const ParamVisitor<T>& fn) {
        conv_in_.visit_params(prefix + ".conv_in", fn);
        pre_brc_.visit_params(prefix + ".pre", fn);
        enc1_.visit_params(prefix + ".enc1", fn);
        trans1_.visit_params(prefix + ".trans1", fn);
        enc2_.visit_params(prefix + ".enc2", fn);
        trans2_.visit_params(prefix + ".trans2", fn);
        enc3_.visit_params(prefix + ".enc3", fn);
        trans3_.visit_params(prefix + ".trans3", fn);
        lateral16_.visit_params(prefix + ".lateral16", fn);
        up8_.visit_params(prefix + ".up8", fn);
        fuse8_.visit_params(prefix + ".fuse8", fn);
        dec8_.visit_params(prefix + ".dec8", fn);
        comp8_.visit_params(prefix + ".comp8", fn);
        up4_.visit_params(prefix + ".up4", fn);
        fuse4_.visit_params(prefix + ".fuse4", fn);
        dec4_.visit_params(prefix + ".dec4", fn);
        comp4_.visit_params(prefix + ".comp4", fn);
    }

    void visit_state(const std::string& prefix, const StateVisitor<T>& fn) {
        pre_brc_.visit_state(prefix + ".pre", fn);
        enc1_.visit_state(prefix + ".enc1", fn);
        trans1_.visit_state(prefix + ".trans1", fn);
        enc2_.visit_state(prefix + ".enc2", fn);
        trans2_.visit_state(prefix + ".trans2", fn);
        enc3_.visit_state(prefix + ".enc3", fn);
        trans3_.visit_state(prefix + ".trans3", fn);
        lateral16_.visit_state(prefix + ".lateral16", fn);
        fuse8_.visit_state(prefix + ".fuse8", fn);
        dec8_.visit_state(prefix + ".dec8", fn);
        comp8_.visit_state(prefix + ".comp8", fn);
        fuse4_.visit_state(prefix + ".fuse4", fn);
        dec4_.visit_state(prefix + ".dec4", fn);
        comp4_.visit_state(prefix + ".comp4", fn);
    }

    const BackboneConfig& config() const { return cfg_; }

private:
    BackboneConfig cfg_;
    Conv3d<T> conv_in_;
    BrcUnit<T> pre_brc_;
    Pool3d<T> pre_pool_{PoolMode::Max};
    DenseBlock<T> enc1_, enc2_, enc3_;
    BrcUnit<T> trans1_, trans2_, trans3_;
    Pool3d<T> trans1_pool_{PoolMode::Avg}, trans2_pool_{PoolMode::Avg},
        trans3_pool_{PoolMode::Avg};
    BrcUnit<T> lateral16_;
    Deconv3dX2<T> up8_, up4_;
    BrcUnit<T> fuse8_, fuse4_;
    DenseBlock<T> dec8_, dec4_;
    BrcUnit<T> comp8_, comp4_;

    // encode-side tensors reused by the decode skips
    Tensor<T> enc1_out_, enc2_out_, enc3_out_, d16_;
};

/// Per-level detection head: Bottleneck x2 then a 1^3 conv emitting
/// templates * (1 logit + 4 regression) channels. Heads are structurally
/// identical across levels but never share parameters.
template <typename T>
class RpnHead {
public:
    RpnHead() = default;

    RpnHead(std::int64_t channels, int templates)
        : templates_(templates), block1_(channels), block2_(channels) {
        KernelConfig cfg;
        cfg.kernel = {1, 1, 1};
        cfg.pad = {0, 0, 0};
        out_conv_ = Conv3d<T>(channels, static_cast<std::int64_t>(templates) * 5, cfg, true);
    }

    void init_he(Rng& rng) {
        block1_.init_he(rng);
        block2_.init_he(rng);
        out_conv_.init_he(rng);
        // bias the objectness logits negative so fresh models stay quiet
        for (int a = 0; a < templates_; ++a) out_conv_.bias.value[a * 5] = T(-2);
    }

    Tensor<T> forward(const Tensor<T>& level_map, bool train) {
        return out_conv_.forward(block2_.forward(block1_.forward(level_map, train), train));
    }
    Tensor<T> backward(const Tensor<T>& grad_out) {
        return block1_.backward(block2_.backward(out_conv_.backward(grad_out)));
    }

    int templates() const { return templates_; }

    void visit_params(const std::string& prefix, const ParamVisitor<T>& fn) {
        block1_.visit_params(prefix + ".block1", fn);
        block2_.visit_params(prefix + ".block2", fn);
        out_conv_.visit_params(prefix + ".out", fn);
    }
    void visit_state(const std::string& prefix, const StateVisitor<T>& fn) {
        block1_.visit_state(prefix + ".block1", fn);
        block2_.visit_state(prefix + ".block2", fn);
    }

private:
    int templates_ = 0;
    Bottleneck<T> block1_, block2_;
    Conv3d<T> out_conv_;
};

/// Flattens head outputs for one level into per-anchor arrays in
/// generate_anchors order (batch-major, then cell-major, diameter minor).
/// probs are sigmoids of the logits.
template <typename T>
void head_to_arrays(const Tensor<T>& raw, int templates, std::vector<double>& probs,
                    std::vector<std::array<double, 4>>& regs) {
    const std::int64_t B = raw.dim(0);
    const std::int64_t Z = raw.dim(2), Y = raw.dim(3), X = raw.dim(4);
    const std::int64_t cells = Z * Y * X;
    const std::int64_t n = B * cells * templates;
    probs.resize(static_cast<std::size_t>(n));
    regs.resize(static_cast<std::size_t>(n));
    const std::int64_t C = static_cast<std::int64_t>(templates) * 5;
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t cell = 0; cell < cells; ++cell)
            for (int a = 0; a < templates; ++a) {
                const std::int64_t idx = (b * cells + cell) * templates + a;
                const T* base = raw.data() + (b * C + a * 5) * cells + cell;
                probs[static_cast<std::size_t>(idx)] = logistic(static_cast<double>(base[0]));
                for (int f = 0; f < 4; ++f)
                    regs[static_cast<std::size_t>(idx)][static_cast<std::size_t>(f)] =
                        static_cast<double>(base[(f + 1) * cells]);
            }
}

/// Packs per-anchor gradient arrays back into the head-output tensor layout.
template <typename T>
Tensor<T> arrays_to_head_grad(const std::vector<std::int64_t>& raw_shape, int templates,
                              const std::vector<double>& grad_logits,
                              const std::vector<std::array<double, 4>>& grad_regs) {
    Tensor<T> grad(raw_shape);
    const std::int64_t B = raw_shape[0];
    const std::int64_t cells = raw_shape[2] * raw_shape[3] * raw_shape[4];
    const std::int64_t C = static_cast<std::int64_t>(templates) * 5;
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t cell = 0; cell < cells; ++cell)
            for (int a = 0; a < templates; ++a) {
                const std::int64_t idx = (b * cells + cell) * templates + a;
                T* base = grad.data() + (b * C + a * 5) * cells + cell;
                base[0] = static_cast<T>(grad_logits[static_cast<std::size_t>(idx)]);
                for (int f = 0; f < 4; ++f)
                    base[(f + 1) * cells] =
                        static_cast<T>(grad_regs[static_cast<std::size_t>(idx)][static_cast<std::size_t>(f)]);
            }
    return grad;
}

/// Decodes thresholded, score-capped proposals from one level's raw head
/// output. Returns one list per batch item; ties in score keep the lower
/// anchor index.
template <typename T>
std::vector<std::vector<Proposal>> propose(const Tensor<T>& raw, int templates,
                                           const std::vector<Box3D>& anchors, int stride,
                                           double score_thresh, int pre_nms_top_k) {
    const std::int64_t B = raw.dim(0);
    const std::int64_t cells = raw.dim(2) * raw.dim(3) * raw.dim(4);
    if (static_cast<std::int64_t>(anchors.size()) != cells * templates)
        throw ShapeError("propose: anchor list does not match head output cells");
    const std::int64_t C = static_cast<std::int64_t>(templates) * 5;

    std::vector<std::vector<Proposal>> out(static_cast<std::size_t>(B));
    for (std::int64_t b = 0; b < B; ++b) {
        std::vector<std::pair<double, std::int64_t>> scored; // (score, anchor idx)
        for (std::int64_t cell = 0; cell < cells; ++cell)
            for (int a = 0; a < templates; ++a) {
                const double logit =
                    static_cast<double>(raw.data()[(b * C + a * 5) * cells + cell]);
                const double score = logistic(logit);
                if (score >= score_thresh) scored.emplace_back(score, cell * templates + a);
            }
        std::stable_sort(scored.begin(), scored.end(), [](const auto& l, const auto& r) {
            if (l.first != r.first) return l.first > r.first;
            return l.second < r.second;
        });
        if (pre_nms_top_k > 0 && static_cast<std::int64_t>(scored.size()) > pre_nms_top_k)
            scored.resize(static_cast<std::size_t>(pre_nms_top_k));

        for (const auto& [score, idx] : scored) {
            const std::int64_t cell = idx / templates;
            const int a = static_cast<int>(idx % templates);
            const T* base = raw.data() + (b * C + a * 5) * cells + cell;
            const std::array<double, 4> t{
                static_cast<double>(base[1 * cells]), static_cast<double>(base[2 * cells]),
                static_cast<double>(base[3 * cells]), static_cast<double>(base[4 * cells])};
            Proposal p;
            p.box = decode_box(anchors[static_cast<std::size_t>(idx)], t);
            p.rpn_score = score;
            p.fused_score = score;
            p.level = stride;
            out[static_cast<std::size_t>(b)].push_back(p);
        }
    }
    return out;
}

struct FprnConfig {
    int crop_side = 5;
    bool magnify = true;
    int roi_out = 2;
    int samples_per_bin_axis = 2;

    void validate() const {
        if (crop_side < 1 || crop_side % 2 == 0)
            throw std::invalid_argument("FprnConfig: crop_side must be odd");
        if (roi_out < 1 || samples_per_bin_axis < 1)
            throw std::invalid_argument("FprnConfig: roi_out and samples must be >= 1");
    }
};

/// The aggregated classifier branch: Diameter Alignment -> fixed margin
/// crops -> optional Local Magnification -> RoI Align -> shared classifier.
/// Level crops are batched through the shared weights, so one instance
/// serves all pyramid levels.
template <typename T>
class FprnHead {
public:
    FprnHead() = default;

    FprnHead(const FprnConfig& cfg, int levels, std::int64_t channels)
        : cfg_(cfg), levels_(levels), channels_(channels), magnify_(channels),
          head_(levels, channels, cfg.roi_out), align_(cfg.roi_out, cfg.samples_per_bin_axis) {
        cfg.validate();
    }

    void init_he(Rng& rng) {
        magnify_.init_he(rng);
        head_.init_he(rng);
    }

    double forward_logit(const FeaturePyramid<T>& pyramid, std::int64_t batch_index,
                         const Proposal& proposal, bool train) {
        const RoiGeometry geom = diameter_align(proposal, pyramid.strides);
        crops_.clear();
        for (std::size_t l = 0; l < pyramid.level_count(); ++l)
            crops_.push_back(
                crop_with_margin(pyramid.maps[l], batch_index, geom.levels[l], cfg_.crop_side));

        // stack levels into a batch so the shared weights see them jointly
        const int S = cfg_.crop_side;
        Tensor<T> batched({levels_, channels_, S, S, S});
        for (int l = 0; l < levels_; ++l)
            std::copy(crops_[static_cast<std::size_t>(l)].data.data(),
                      crops_[static_cast<std::size_t>(l)].data.data() +
                          crops_[static_cast<std::size_t>(l)].data.numel(),
                      batched.data() + l * crops_[0].data.numel());

        std::vector<RoiBox> rois(static_cast<std::size_t>(levels_));
        double scale = 1.0;
        Tensor<T> features;
        if (cfg_.magnify) {
            features = magnify_.forward(batched, train);
            scale = static_cast<double>(MagnifyStack<T>::magnification());
        } else {
            features = batched;
        }
        for (int l = 0; l < levels_; ++l) {
            const FeatureCrop<T>& c = crops_[static_cast<std::size_t>(l)];
            rois[static_cast<std::size_t>(l)] = RoiBox{
                {c.roi_center[0] * scale, c.roi_center[1] * scale, c.roi_center[2] * scale},
                c.roi_side * scale};
        }
        aligned_shape_ = {levels_, channels_, cfg_.roi_out, cfg_.roi_out, cfg_.roi_out};
        Tensor<T> aligned = align_.forward(features, rois);
        return head_.forward_logit({aligned});
    }

    /// Backward from d loss / d logit of the last forward_logit call.
    /// Accumulates parameter gradients and scatters feature gradients into
    /// grad_pyramid.
    void backward(double dlogit, FeaturePyramid<T>& grad_pyramid, std::int64_t batch_index) {
        std::vector<Tensor<T>> head_grads = head_.backward(dlogit, {aligned_shape_});
        Tensor<T> g_features = align_.backward(head_grads[0]);
        Tensor<T> g_batched = cfg_.magnify ? magnify_.backward(g_features) : std::move(g_features);

        const std::int64_t per_level = crops_[0].data.numel();
        for (int l = 0; l < levels_; ++l) {
            Tensor<T> g_crop(crops_[0].data.shape());
            std::copy(g_batched.data() + l * per_level, g_batched.data() + (l + 1) * per_level,
                      g_crop.data());
            crop_with_margin_backward(crops_[static_cast<std::size_t>(l)], g_crop,
                                      grad_pyramid.maps[static_cast<std::size_t>(l)], batch_index);
        }
    }

    const FprnConfig& config() const { return cfg_; }
    void set_magnify(bool on) { cfg_.magnify = on; }

    void visit_params(const std::string& prefix, const ParamVisitor<T>& fn) {
        magnify_.visit_params(prefix + ".magnify", fn);
        head_.visit_params(prefix + ".classifier", fn);
    }
    void visit_state(const std::string& prefix, const StateVisitor<T>& fn) {
        magnify_.visit_state(prefix + ".magnify", fn);
    }

private:
    FprnConfig cfg_;
    int levels_ = 0;
    std::int64_t channels_ = 0;
    MagnifyStack<T> magnify_;
    ClassifierHead<T> head_;
    RoiAlign3d<T> align_;

    std::vector<FeatureCrop<T>> crops_;
    std::vector<std::int64_t> aligned_shape_;
};

struct ModelConfig {
    BackboneConfig backbone;
    AnchorConfig anchors;
    FprnConfig fprn;
    double score_thresh = 0.269; // sigmoid(-1)
    int pre_nms_top_k = 128;
};

/// The full two-branch detector.
template <typename T>
class DetectorModel {
public:
    explicit DetectorModel(const ModelConfig& cfg)
        : cfg_(cfg), backbone_(cfg.backbone),
          fprn_(cfg.fprn, static_cast<int>(cfg.anchors.strides.size()),
                cfg.backbone.pyramid_channels) {
        cfg_.anchors.validate();
        for (std::size_t l = 0; l < cfg_.anchors.strides.size(); ++l)
            heads_.emplace_back(cfg_.backbone.pyramid_channels,
                                static_cast<int>(cfg_.anchors.diameters[l].size()));
    }

    void init(std::uint64_t seed) {
        Rng rng(seed);
        backbone_.init_he(rng);
        for (auto& h : heads_) h.init_he(rng);
        fprn_.init_he(rng);
    }

    Backbone<T>& backbone() { return backbone_; }
    RpnHead<T>& head(std::size_t level) { return heads_[level]; }
    std::size_t level_count() const { return heads_.size(); }
    FprnHead<T>& fprn() { return fprn_; }
    const ModelConfig& config() const { return cfg_; }
    ModelConfig& mutable_config() { return cfg_; }

    /// Anchors for one level of a given input size, in generate_anchors order.
    std::vector<Box3D> level_anchors(std::size_t level,
                                     const std::array<std::int64_t, 3>& input_dims) const {
        const int s = cfg_.anchors.strides[level];
        return generate_anchors({input_dims[0] / s, input_dims[1] / s, input_dims[2] / s}, s,
                                cfg_.anchors.diameters[level]);
    }

    /// Full detection pass in eval mode. Returns raw (pre-NMS) proposals per
    /// batch item; fpr/fused scores populated when with_fprn.
    std::vector<std::vector<Proposal>> full_forward(const Tensor<T>& input, bool with_fprn) {
        FeaturePyramid<T> pyr = backbone_.forward(input, false);
        const std::array<std::int64_t, 3> dims{input.dim(2), input.dim(3), input.dim(4)};
        std::vector<std::vector<Proposal>> merged(static_cast<std::size_t>(input.dim(0)));
        for (std::size_t l = 0; l < heads_.size(); ++l) {
            Tensor<T> raw = heads_[l].forward(pyr.maps[l], false);
            auto per_item = propose(raw, heads_[l].templates(), level_anchors(l, dims),
                                    cfg_.anchors.strides[l], cfg_.score_thresh, cfg_.pre_nms_top_k);
            for (std::size_t b = 0; b < per_item.size(); ++b)
                merged[b].insert(merged[b].end(), per_item[b].begin(), per_item[b].end());
        }
        if (with_fprn) {
            for (std::size_t b = 0; b < merged.size(); ++b)
                for (Proposal& p : merged[b]) {
                    p.fpr_score = logistic(
                        fprn_.forward_logit(pyr, static_cast<std::int64_t>(b), p, false));
                    p.fused_score = fuse_scores(p.rpn_score, p.fpr_score);
                }
        }
        return merged;
    }

    void visit_params(const ParamVisitor<T>& fn) {
        backbone_.visit_params("backbone", fn);
        for (std::size_t l = 0; l < heads_.size(); ++l)
            heads_[l].visit_params("head" + std::to_string(cfg_.anchors.strides[l]), fn);
        fprn_.visit_params("fprn", fn);
    }
    void visit_state(const StateVisitor<T>& fn) {
        backbone_.visit_state("backbone", fn);
        for (std::size_t l = 0; l < heads_.size(); ++l)
            heads_[l].visit_state("head" + std::to_string(cfg_.anchors.strides[l]), fn);
        fprn_.visit_state("fprn", fn);
    }

    std::vector<Param<T>*> params() {
        std::vector<Param<T>*> out;
        visit_params([&out](const std::string&, Param<T>& p) { out.push_back(&p); });
        return out;
    }

    /// All learnable values plus normalization running stats, in registration
    /// order, as 32-bit tensors.
    NamedTensors snapshot() {
        NamedTensors tensors;
        visit_params([&tensors](const std::string& name, Param<T>& p) {
            tensors.emplace_back(name, p.value.template cast<float>());
        });
        visit_state([&tensors](const std::string& name, Tensor<T>& t) {
            tensors.emplace_back(name, t.template cast<float>());
        });
        return tensors;
    }

    void restore(const NamedTensors& tensors) {
        std::map<std::string, const Tensor<float>*> by_name;
        for (const auto& [name, t] : tensors) by_name[name] = &t;
        std::size_t used = 0;
        auto load = [&by_name, &used](const std::string& name, Tensor<T>& dst) {
            auto it = by_name.find(name);
            if (it == by_name.end())
                throw std::runtime_error("checkpoint restore: missing tensor '" + name + "'");
            if (it->second->shape() != dst.shape())
                throw ShapeError("checkpoint restore: shape mismatch for '" + name + "': file " +
                                 it->second->shape_str() + " vs model " + dst.shape_str());
            for (std::int64_t i = 0; i < dst.numel(); ++i)
                dst[i] = static_cast<T>((*it->second)[i]);
            ++used;
        };
        visit_params([&load](const std::string& name, Param<T>& p) { load(name, p.value); });
        visit_state([&load](const std::string& name, Tensor<T>& t) { load(name, t); });
        if (used != tensors.size())
            throw std::runtime_error("checkpoint restore: file carries " +
                                     std::to_string(tensors.size()) + " tensors, model consumed " +
                                     std::to_string(used));
    }

    void save(const std::string& path) { write_ckpt1(path, snapshot()); }
    void load(const std::string& path) { restore(read_ckpt1(path)); }

private:
    ModelConfig cfg_;
    Backbone<T> backbone_;
    std::vector<RpnHead<T>> heads_;
    FprnHead<T> fprn_;
};

} // namespace voldet
