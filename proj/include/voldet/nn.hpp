#pragma once

#include "voldet/parallel.hpp"
#include "voldet/tensor.hpp"

#include <algorithm>
#include <array>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

namespace voldet {

/// Learnable tensor with its gradient and momentum buffer (always one shape).
template <typename T>
struct Param {
    Tensor<T> value;
    Tensor<T> grad;
    Tensor<T> momentum;

    Param() = default;
    explicit Param(std::vector<std::int64_t> shape)
        : value(shape), grad(shape), momentum(std::move(shape)) {}

    std::int64_t numel() const { return value.numel(); }
};

template <typename T>
using ParamVisitor = std::function<void(const std::string&, Param<T>&)>;
template <typename T>
using StateVisitor = std::function<void(const std::string&, Tensor<T>&)>;

/// Layer hyperparameters: per-axis kernel/stride/padding plus normalization
/// constants.
struct KernelConfig {
    std::array<int, 3> kernel{3, 3, 3};
    std::array<int, 3> stride{1, 1, 1};
    std::array<int, 3> pad{1, 1, 1};
    double eps = 1e-5;
    double momentum = 0.1;

    void validate() const {
        for (int k : kernel)
            if (k < 1) throw ShapeError("KernelConfig: kernel size must be >= 1");
        for (int s : stride)
            if (s < 1) throw ShapeError("KernelConfig: stride must be >= 1");
        for (int p : pad)
            if (p < 0) throw ShapeError("KernelConfig: padding must be >= 0");
        if (!(eps > 0.0)) throw ShapeError("KernelConfig: eps must be > 0");
    }
};

namespace detail {

inline std::int64_t conv_out_dim(std::int64_t in, int k, int s, int p, const char* axis) {
    const std::int64_t out = (in + 2 * p - k) / s + 1;
    if (in + 2 * p < k || out < 1)
        throw ShapeError(std::string("conv3d: output dim < 1 along axis ") + axis);
    return out;
}

} // namespace detail

// ---------------------------------------------------------------------------
// conv3d: direct cross-correlation with exact analytic backward
// ---------------------------------------------------------------------------

template <typename T>
class Conv3d {
public:
    Conv3d() = default;

    Conv3d(std::int64_t in_ch, std::int64_t out_ch, KernelConfig cfg, bool with_bias = true)
        : cfg_(cfg), in_ch_(in_ch), out_ch_(out_ch), has_bias_(with_bias) {
        cfg_.validate();
        weight = Param<T>({out_ch, in_ch, cfg.kernel[0], cfg.kernel[1], cfg.kernel[2]});
        if (has_bias_) bias = Param<T>({out_ch});
    }

    void init_he(Rng& rng) {
        const double fan_in = static_cast<double>(in_ch_ * cfg_.kernel[0] * cfg_.kernel[1] * cfg_.kernel[2]);
        weight.value.fill_gaussian(rng, std::sqrt(2.0 / fan_in));
        if (has_bias_) bias.value.zero();
    }

    Tensor<T> forward(const Tensor<T>& input) {
        check_input(input);
        cached_input_ = input;
        const std::int64_t B = input.dim(0);
        const std::int64_t Zi = input.dim(2), Yi = input.dim(3), Xi = input.dim(4);
        const std::int64_t Zo = detail::conv_out_dim(Zi, cfg_.kernel[0], cfg_.stride[0], cfg_.pad[0], "z");
        const std::int64_t Yo = detail::conv_out_dim(Yi, cfg_.kernel[1], cfg_.stride[1], cfg_.pad[1], "y");
        const std::int64_t Xo = detail::conv_out_dim(Xi, cfg_.kernel[2], cfg_.stride[2], cfg_.pad[2], "x");

        Tensor<T> out({B, out_ch_, Zo, Yo, Xo});
        const bool unit_stride = cfg_.stride[0] == 1 && cfg_.stride[1] == 1 && cfg_.stride[2] == 1;

        parallel_for(B * out_ch_, [&](std::int64_t job) {
            const std::int64_t b = job / out_ch_;
            const std::int64_t co = job % out_ch_;
            T* outp = out.data() + ((b * out_ch_ + co) * Zo * Yo * Xo);
            const T bv = has_bias_ ? bias.value[co] : T(0);
            for (std::int64_t i = 0; i < Zo * Yo * Xo; ++i) outp[i] = bv;

            for (std::int64_t ci = 0; ci < in_ch_; ++ci) {
                const T* inp = input.data() + ((b * in_ch_ + ci) * Zi * Yi * Xi);
                const T* wp = weight.value.data() +
                              ((co * in_ch_ + ci) * cfg_.kernel[0] * cfg_.kernel[1] * cfg_.kernel[2]);
                for (int kz = 0; kz < cfg_.kernel[0]; ++kz)
                    for (int ky = 0; ky < cfg_.kernel[1]; ++ky)
                        for (int kx = 0; kx < cfg_.kernel[2]; ++kx) {
                            const T w = wp[(kz * cfg_.kernel[1] + ky) * cfg_.kernel[2] + kx];
                            if (w == T(0)) continue;
                            if (unit_stride) {
                                // out[zo][yo][xo] += w * in[zo-p+kz][yo-p+ky][xo-p+kx]
                                const std::int64_t z0 = std::max<std::int64_t>(0, cfg_.pad[0] - kz);
                                const std::int64_t z1 = std::min<std::int64_t>(Zo, Zi + cfg_.pad[0] - kz);
                                const std::int64_t y0 = std::max<std::int64_t>(0, cfg_.pad[1] - ky);
                                const std::int64_t y1 = std::min<std::int64_t>(Yo, Yi + cfg_.pad[1] - ky);
                                const std::int64_t x0 = std::max<std::int64_t>(0, cfg_.pad[2] - kx);
                                const std::int64_t x1 = std::min<std::int64_t>(Xo, Xi + cfg_.pad[2] - kx);
                                for (std::int64_t zo = z0; zo < z1; ++zo) {
                                    const std::int64_t zi = zo - cfg_.pad[0] + kz;
                                    for (std::int64_t yo = y0; yo < y1; ++yo) {
                                        const std::int64_t yi = yo - cfg_.pad[1] + ky;
                                        T* orow = outp + (zo * Yo + yo) * Xo;
                                        const T* irow = inp + (zi * Yi + yi) * Xi - cfg_.pad[2] + kx;
                                        for (std::int64_t xo = x0; xo < x1; ++xo)
                                            orow[xo] += w * irow[xo];
                                    }
                                }
                            } else {
                                for (std::int64_t zo = 0; zo < Zo; ++zo) {
                                    const std::int64_t zi = zo * cfg_.stride[0] - cfg_.pad[0] + kz;
                                    if (zi < 0 || zi >= Zi) continue;
                                    for (std::int64_t yo = 0; yo < Yo; ++yo) {
                                        const std::int64_t yi = yo * cfg_.stride[1] - cfg_.pad[1] + ky;
                                        if (yi < 0 || yi >= Yi) continue;
                                        T* orow = outp + (zo * Yo + yo) * Xo;
                                        const T* irow = inp + (zi * Yi + yi) * Xi;
                                        for (std::int64_t xo = 0; xo < Xo; ++xo) {
                                            const std::int64_t xi = xo * cfg_.stride[2] - cfg_.pad[2] + kx;
                                            if (xi < 0 || xi >= Xi) continue;
                                            orow[xo] += w * irow[xi];
                                        }
                                    }
                                }
                            }
                        }
            }
        });
        cached_out_dims_ = {Zo, Yo, Xo};
        return out;
    }

    /// Accumulates weight/bias gradients and returns grad wrt input.
    Tensor<T> backward(const Tensor<T>& grad_out) {
        const Tensor<T>& input = cached_input_;
        const std::int64_t B = input.dim(0);
        const std::int64_t Zi = input.dim(2), Yi = input.dim(3), Xi = input.dim(4);
        const std::int64_t Zo = cached_out_dims_[0], Yo = cached_out_dims_[1], Xo = cached_out_dims_[2];
        if (grad_out.rank() != 5 || grad_out.dim(0) != B || grad_out.dim(1) != out_ch_ ||
            grad_out.dim(2) != Zo || grad_out.dim(3) != Yo || grad_out.dim(4) != Xo)
            throw ShapeError("conv3d backward: grad_out shape mismatch " + grad_out.shape_str());

        Tensor<T> grad_in({B, in_ch_, Zi, Yi, Xi});

        // grad_input: scatter per (b, ci); fixed loop order keeps accumulation
        // deterministic for any thread count.
        parallel_for(B * in_ch_, [&](std::int64_t job) {
            const std::int64_t b = job / in_ch_;
            const std::int64_t ci = job % in_ch_;
            T* gip = grad_in.data() + ((b * in_ch_ + ci) * Zi * Yi * Xi);
            for (std::int64_t co = 0; co < out_ch_; ++co) {
                const T* gop = grad_out.data() + ((b * out_ch_ + co) * Zo * Yo * Xo);
                const T* wp = weight.value.data() +
                              ((co * in_ch_ + ci) * cfg_.kernel[0] * cfg_.kernel[1] * cfg_.kernel[2]);
                for (int kz = 0; kz < cfg_.kernel[0]; ++kz)
                    for (int ky = 0; ky < cfg_.kernel[1]; ++ky)
                        for (int kx = 0; kx < cfg_.kernel[2]; ++kx) {
                            const T w = wp[(kz * cfg_.kernel[1] + ky) * cfg_.kernel[2] + kx];
                            if (w == T(0)) continue;
                            for (std::int64_t zo = 0; zo < Zo; ++zo) {
                                const std::int64_t zi = zo * cfg_.stride[0] - cfg_.pad[0] + kz;
                                if (zi < 0 || zi >= Zi) continue;
                                for (std::int64_t yo = 0; yo < Yo; ++yo) {
                                    const std::int64_t yi = yo * cfg_.stride[1] - cfg_.pad[1] + ky;
                                    if (yi < 0 || yi >= Yi) continue;
                                    const T* grow = gop + (zo * Yo + yo) * Xo;
                                    T* irow = gip + (zi * Yi + yi) * Xi;
                                    for (std::int64_t xo = 0; xo < Xo; ++xo) {
                                        const std::int64_t xi = xo * cfg_.stride[2] - cfg_.pad[2] + kx;
                                        if (xi < 0 || xi >= Xi) continue;
                                        irow[xi] += w * grow[xo];
                                    }
                                }
                            }
                        }
            }
        });

        // grad_weight: each co owns a disjoint slice of the gradient.
        parallel_for(out_ch_, [&](std::int64_t co) {
            for (std::int64_t ci = 0; ci < in_ch_; ++ci) {
                T* gwp = weight.grad.data() +
                         ((co * in_ch_ + ci) * cfg_.kernel[0] * cfg_.kernel[1] * cfg_.kernel[2]);
                for (int kz = 0; kz < cfg_.kernel[0]; ++kz)
                    for (int ky = 0; ky < cfg_.kernel[1]; ++ky)
                        for (int kx = 0; kx < cfg_.kernel[2]; ++kx) {
                            double acc = 0.0;
                            for (std::int64_t b = 0; b < B; ++b) {
                                const T* gop = grad_out.data() + ((b * out_ch_ + co) * Zo * Yo * Xo);
                                const T* inp = input.data() + ((b * in_ch_ + ci) * Zi * Yi * Xi);
                                for (std::int64_t zo = 0; zo < Zo; ++zo) {
                                    const std::int64_t zi = zo * cfg_.stride[0] - cfg_.pad[0] + kz;
                                    if (zi < 0 || zi >= Zi) continue;
                                    for (std::int64_t yo = 0; yo < Yo; ++yo) {
                                        const std::int64_t yi = yo * cfg_.stride[1] - cfg_.pad[1] + ky;
                                        if (yi < 0 || yi >= Yi) continue;
                                        const T* grow = gop + (zo * Yo + yo) * Xo;
                                        const T* irow = inp + (zi * Yi + yi) * Xi;
                                        if (cfg_.stride[2] == 1) {
                                            const std::int64_t x0 = std::max<std::int64_t>(0, cfg_.pad[2] - kx);
                                            const std::int64_t x1 = std::min<std::int64_t>(Xo, Xi + cfg_.pad[2] - kx);
                                            const T* ir = irow - cfg_.pad[2] + kx;
                                            double s = 0.0;
                                            for (std::int64_t xo = x0; xo < x1; ++xo)
                                                s += static_cast<double>(grow[xo]) * static_cast<double>(ir[xo]);
                                            acc += s;
                                        } else {
                                            for (std::int64_t xo = 0; xo < Xo; ++xo) {
                                                const std::int64_t xi = xo * cfg_.stride[2] - cfg_.pad[2] + kx;
                                                if (xi < 0 || xi >= Xi) continue;
                                                acc += static_cast<double>(grow[xo]) * static_cast<double>(irow[xi]);
                                            }
                                        }
                                    }
                                }
                            }
                            gwp[(kz * cfg_.kernel[1] + ky) * cfg_.kernel[2] + kx] += static_cast<T>(acc);
                        }
            }
            if (has_bias_) {
                double acc = 0.0;
                for (std::int64_t b = 0; b < B; ++b) {
                    const T* gop = grad_out.data() + ((b * out_ch_ + co) * Zo * Yo * Xo);
                    for (std::int64_t i = 0; i < Zo * Yo * Xo; ++i) acc += static_cast<double>(gop[i]);
                }
                bias.grad[co] += static_cast<T>(acc);
            }
        });

        return grad_in;
    }

    void visit_params(const std::string& prefix, const ParamVisitor<T>& fn) {
        fn(prefix + ".weight", weight);
        if (has_bias_) fn(prefix + ".bias", bias);
    }

    std::int64_t in_channels() const { return in_ch_; }
    std::int64_t out_channels() const { return out_ch_; }
    const KernelConfig& config() const { return cfg_; }
    bool has_bias() const { return has_bias_; }

    Param<T> weight;
    Param<T> bias;

private:
    void check_input(const Tensor<T>& input) const {
        if (input.rank() != 5) throw ShapeError("conv3d: input must be 5-D, got " + input.shape_str());
        if (input.dim(1) != in_ch_)
            throw ShapeError("conv3d: channel axis mismatch: input has " +
                             std::to_string(input.dim(1)) + ", layer expects " +
                             std::to_string(in_ch_));
    }

    KernelConfig cfg_;
    std::int64_t in_ch_ = 0;
    std::int64_t out_ch_ = 0;
    bool has_bias_ = true;
    Tensor<T> cached_input_;
    std::array<std::int64_t, 3> cached_out_dims_{};
};

// ---------------------------------------------------------------------------
// deconv3d_x2: kernel 2, stride 2, no padding; exact doubling of spatial dims
// ---------------------------------------------------------------------------

template <typename T>
class Deconv3dX2 {
public:
    Deconv3dX2() = default;

    Deconv3dX2(std::int64_t in_ch, std::int64_t out_ch, bool with_bias = true)
        : in_ch_(in_ch), out_ch_(out_ch), has_bias_(with_bias) {
        weight = Param<T>({in_ch, out_ch, 2, 2, 2});
        if (has_bias_) bias = Param<T>({out_ch});
    }

    void init_he(Rng& rng) {
        weight.value.fill_gaussian(rng, std::sqrt(2.0 / static_cast<double>(in_ch_)));
        if (has_bias_) bias.value.zero();
    }

    Tensor<T> forward(const Tensor<T>& input) {
        if (input.rank() != 5) throw ShapeError("deconv3d_x2: input must be 5-D");
        if (input.dim(1) != in_ch_)
            throw ShapeError("deconv3d_x2: channel axis mismatch: input has " +
                             std::to_string(input.dim(1)) + ", layer expects " +
                             std::to_string(in_ch_));
        cached_input_ = input;
        const std::int64_t B = input.dim(0);
        const std::int64_t Zi = input.dim(2), Yi = input.dim(3), Xi = input.dim(4);
        Tensor<T> out({B, out_ch_, 2 * Zi, 2 * Yi, 2 * Xi});

        // kernel 2 / stride 2 means every output voxel has exactly one source
        parallel_for(B * out_ch_, [&](std::int64_t job) {
            const std::int64_t b = job / out_ch_;
            const std::int64_t co = job % out_ch_;
            T* outp = out.data() + ((b * out_ch_ + co) * 8 * Zi * Yi * Xi);
            const T bv = has_bias_ ? bias.value[co] : T(0);
            for (std::int64_t zo = 0; zo < 2 * Zi; ++zo) {
                const std::int64_t zi = zo >> 1;
                const int dz = static_cast<int>(zo & 1);
                for (std::int64_t yo = 0; yo < 2 * Yi; ++yo) {
                    const std::int64_t yi = yo >> 1;
                    const int dy = static_cast<int>(yo & 1);
                    T* orow = outp + (zo * 2 * Yi + yo) * 2 * Xi;
                    for (std::int64_t xo = 0; xo < 2 * Xi; ++xo) {
                        const std::int64_t xi = xo >> 1;
                        const int dx = static_cast<int>(xo & 1);
                        T acc = bv;
                        for (std::int64_t ci = 0; ci < in_ch_; ++ci) {
                            const T v = cached_input_.data()[((b * in_ch_ + ci) * Zi + zi) * Yi * Xi + yi * Xi + xi];
                            const T w = weight.value.data()[(((ci * out_ch_ + co) * 2 + dz) * 2 + dy) * 2 + dx];
                            acc += v * w;
                        }
                        orow[xo] = acc;
                    }
                }
            }
        });
        return out;
    }

    Tensor<T> backward(const Tensor<T>& grad_out) {
        const Tensor<T>& input = cached_input_;
        const std::int64_t B = input.dim(0);
        const std::int64_t Zi = input.dim(2), Yi = input.dim(3), Xi = input.dim(4);
        if (grad_out.rank() != 5 || grad_out.dim(0) != B || grad_out.dim(1) != out_ch_ ||
            grad_out.dim(2) != 2 * Zi || grad_out.dim(3) != 2 * Yi || grad_out.dim(4) != 2 * Xi)
            throw ShapeError("deconv3d_x2 backward: grad_out shape mismatch " + grad_out.shape_str());

        Tensor<T> grad_in({B, in_ch_, Zi, Yi, Xi});
        parallel_for(B * in_ch_, [&](std::int64_t job) {
            const std::int64_t b = job / in_ch_;
            const std::int64_t ci = job % in_ch_;
            T* gip = grad_in.data() + ((b * in_ch_ + ci) * Zi * Yi * Xi);
            for (std::int64_t z = 0; z < Zi; ++z)
                for (std::int64_t y = 0; y < Yi; ++y)
                    for (std::int64_t x = 0; x < Xi; ++x) {
                        double acc = 0.0;
                        for (std::int64_t co = 0; co < out_ch_; ++co) {
                            const T* gop = grad_out.data() + ((b * out_ch_ + co) * 8 * Zi * Yi * Xi);
                            for (int dz = 0; dz < 2; ++dz)
                                for (int dy = 0; dy < 2; ++dy)
                                    for (int dx = 0; dx < 2; ++dx) {
                                        const T g = gop[((2 * z + dz) * 2 * Yi + 2 * y + dy) * 2 * Xi + 2 * x + dx];
                                        const T w = weight.value.data()[(((ci * out_ch_ + co) * 2 + dz) * 2 + dy) * 2 + dx];
                                        acc += static_cast<double>(g) * static_cast<double>(w);
                                    }
                        }
                        gip[(z * Yi + y) * Xi + x] = static_cast<T>(acc);
                    }
        });

        parallel_for(in_ch_, [&](std::int64_t ci) {
            for (std::int64_t co = 0; co < out_ch_; ++co)
                for (int dz = 0; dz < 2; ++dz)
                    for (int dy = 0; dy < 2; ++dy)
                        for (int dx = 0; dx < 2; ++dx) {
                            double acc = 0.0;
                            for (std::int64_t b = 0; b < B; ++b) {
                                const T* inp = input.data() + ((b * in_ch_ + ci) * Zi * Yi * Xi);
                                const T* gop = grad_out.data() + ((b * out_ch_ + co) * 8 * Zi * Yi * Xi);
                                for (std::int64_t z = 0; z < Zi; ++z)
                                    for (std::int64_t y = 0; y < Yi; ++y)
                                        for (std::int64_t x = 0; x < Xi; ++x)
                                            acc += static_cast<double>(inp[(z * Yi + y) * Xi + x]) *
                                                   static_cast<double>(gop[((2 * z + dz) * 2 * Yi + 2 * y + dy) * 2 * Xi + 2 * x + dx]);
                            }
                            weight.grad.data()[(((ci * out_ch_ + co) * 2 + dz) * 2 + dy) * 2 + dx] += static_cast<T>(acc);
                        }
        });

        if (has_bias_) {
            for (std::int64_t co = 0; co < out_ch_; ++co) {
                double acc = 0.0;
                for (std::int64_t b = 0; b < B; ++b) {
                    const T* gop = grad_out.data() + ((b * out_ch_ + co) * 8 * Zi * Yi * Xi);
                    for (std::int64_t i = 0; i < 8 * Zi * Yi * Xi; ++i) acc += static_cast<double>(gop[i]);
                }
                bias.grad[co] += static_cast<T>(acc);
            }
        }
        return grad_in;
    }

    void visit_params(const std::string& prefix, const ParamVisitor<T>& fn) {
        fn(prefix + ".weight", weight);
        if (has_bias_) fn(prefix + ".bias", bias);
    }

    std::int64_t in_channels() const { return in_ch_; }
    std::int64_t out_channels() const { return out_ch_; }

    Param<T> weight;
    Param<T> bias;

private:
    std::int64_t in_ch_ = 0;
    std::int64_t out_ch_ = 0;
    bool has_bias_ = true;
    Tensor<T> cached_input_;
};

// ---------------------------------------------------------------------------
// pool3d: 2x2x2 window, stride 2
// ---------------------------------------------------------------------------

enum class PoolMode { Max, Avg };

template <typename T>
class Pool3d {
public:
    explicit Pool3d(PoolMode mode = PoolMode::Max) : mode_(mode) {}

    Tensor<T> forward(const Tensor<T>& input) {
        if (input.rank() != 5) throw ShapeError("pool3d: input must be 5-D");
        for (int a = 2; a < 5; ++a)
            if (input.dim(static_cast<std::size_t>(a)) % 2 != 0)
                throw ShapeError(std::string("pool3d: odd spatial dim along axis ") +
                                 "zyx"[a - 2] + ": " + std::to_string(input.dim(static_cast<std::size_t>(a))));
        in_shape_ = input.shape();
        const std::int64_t B = input.dim(0), C = input.dim(1);
        const std::int64_t Zi = input.dim(2), Yi = input.dim(3), Xi = input.dim(4);
        const std::int64_t Zo = Zi / 2, Yo = Yi / 2, Xo = Xi / 2;
        Tensor<T> out({B, C, Zo, Yo, Xo});
        if (mode_ == PoolMode::Max) argmax_.assign(static_cast<std::size_t>(out.numel()), 0);

        parallel_for(B * C, [&](std::int64_t job) {
            const T* inp = input.data() + job * Zi * Yi * Xi;
            T* outp = out.data() + job * Zo * Yo * Xo;
            for (std::int64_t z = 0; z < Zo; ++z)
                for (std::int64_t y = 0; y < Yo; ++y)
                    for (std::int64_t x = 0; x < Xo; ++x) {
                        if (mode_ == PoolMode::Max) {
                            T best = -std::numeric_limits<T>::infinity();
                            std::int64_t best_off = 0;
                            for (int dz = 0; dz < 2; ++dz)
                                for (int dy = 0; dy < 2; ++dy)
                                    for (int dx = 0; dx < 2; ++dx) {
                                        const std::int64_t off =
                                            ((2 * z + dz) * Yi + 2 * y + dy) * Xi + 2 * x + dx;
                                        // first-in-scan-order argmax on ties
                                        if (inp[off] > best) { best = inp[off]; best_off = off; }
                                    }
                            outp[(z * Yo + y) * Xo + x] = best;
                            argmax_[static_cast<std::size_t>(job * Zo * Yo * Xo + (z * Yo + y) * Xo + x)] = best_off;
                        } else {
                            T acc = T(0);
                            for (int dz = 0; dz < 2; ++dz)
                                for (int dy = 0; dy < 2; ++dy)
                                    for (int dx = 0; dx < 2; ++dx)
                                        acc += inp[((2 * z + dz) * Yi + 2 * y + dy) * Xi + 2 * x + dx];
                            outp[(z * Yo + y) * Xo + x] = acc / T(8);
                        }
                    }
        });
        return out;
    }

    Tensor<T> backward(const Tensor<T>& grad_out) {
        const std::int64_t B = in_shape_[0], C = in_shape_[1];
        const std::int64_t Zi = in_shape_[2], Yi = in_shape_[3], Xi = in_shape_[4];
        const std::int64_t Zo = Zi / 2, Yo = Yi / 2, Xo = Xi / 2;
        if (grad_out.rank() != 5 || grad_out.dim(0) != B || grad_out.dim(1) != C ||
            grad_out.dim(2) != Zo || grad_out.dim(3) != Yo || grad_out.dim(4) != Xo)
            throw ShapeError("pool3d backward: grad_out shape mismatch");
        Tensor<T> grad_in(in_shape_);
        parallel_for(B * C, [&](std::int64_t job) {
            const T* gop = grad_out.data() + job * Zo * Yo * Xo;
            T* gip = grad_in.data() + job * Zi * Yi * Xi;
            for (std::int64_t i = 0; i < Zo * Yo * Xo; ++i) {
                if (mode_ == PoolMode::Max) {
                    gip[argmax_[static_cast<std::size_t>(job * Zo * Yo * Xo + i)]] += gop[i];
                } else {
                    const std::int64_t z = i / (Yo * Xo), r = i % (Yo * Xo);
                    const std::int64_t y = r / Xo, x = r % Xo;
                    const T g = gop[i] / T(8);
                    for (int dz = 0; dz < 2; ++dz)
                        for (int dy = 0; dy < 2; ++dy)
                            for (int dx = 0; dx < 2; ++dx)
                                gip[((2 * z + dz) * Yi + 2 * y + dy) * Xi + 2 * x + dx] += g;
                }
            }
        });
        return grad_in;
    }

    PoolMode mode() const { return mode_; }

private:
    PoolMode mode_;
    std::vector<std::int64_t> in_shape_;
    std::vector<std::int64_t> argmax_;
};

// ---------------------------------------------------------------------------
// batchnorm3d
// ---------------------------------------------------------------------------

template <typename T>
class BatchNorm3d {
public:
    BatchNorm3d() = default;

    explicit BatchNorm3d(std::int64_t channels, double eps = 1e-5, double momentum = 0.1)
        : channels_(channels), eps_(eps), momentum_(momentum) {
        gamma = Param<T>({channels});
        beta = Param<T>({channels});
        gamma.value.fill(T(1));
        running_mean = Tensor<T>({channels});
        running_var = Tensor<T>({channels});
        running_var.fill(T(1));
    }

    Tensor<T> forward(const Tensor<T>& input, bool train) {
        if (input.rank() != 5) throw ShapeError("batchnorm3d: input must be 5-D");
        if (input.dim(1) != channels_)
            throw ShapeError("batchnorm3d: channel axis mismatch: input has " +
                             std::to_string(input.dim(1)) + ", layer expects " +
                             std::to_string(channels_));
        train_ = train;
        const std::int64_t B = input.dim(0), C = channels_;
        const std::int64_t S = input.dim(2) * input.dim(3) * input.dim(4);
        const std::int64_t N = B * S;

        Tensor<T> out(input.shape());
        xhat_ = Tensor<T>(input.shape());
        inv_std_.assign(static_cast<std::size_t>(C), 0.0);

        parallel_for(C, [&](std::int64_t c) {
            double mean, var;
            if (train) {
                double sum = 0.0, sq = 0.0;
                for (std::int64_t b = 0; b < B; ++b) {
                    const T* p = input.data() + (b * C + c) * S;
                    for (std::int64_t i = 0; i < S; ++i) {
                        const double v = static_cast<double>(p[i]);
                        sum += v;
                        sq += v * v;
                    }
                }
                mean = sum / static_cast<double>(N);
                var = std::max(0.0, sq / static_cast<double>(N) - mean * mean);
                running_mean[c] = static_cast<T>((1.0 - momentum_) * static_cast<double>(running_mean[c]) +
                                                 momentum_ * mean);
                running_var[c] = static_cast<T>((1.0 - momentum_) * static_cast<double>(running_var[c]) +
                                                momentum_ * var);
            } else {
                mean = static_cast<double>(running_mean[c]);
                var = static_cast<double>(running_var[c]);
            }
            const double istd = 1.0 / std::sqrt(var + eps_);
            inv_std_[static_cast<std::size_t>(c)] = istd;
            const T g = gamma.value[c], bt = beta.value[c];
            for (std::int64_t b = 0; b < B; ++b) {
                const T* p = input.data() + (b * C + c) * S;
                T* xh = xhat_.data() + (b * C + c) * S;
                T* o = out.data() + (b * C + c) * S;
                for (std::int64_t i = 0; i < S; ++i) {
                    const T v = static_cast<T>((static_cast<double>(p[i]) - mean) * istd);
                    xh[i] = v;
                    o[i] = g * v + bt;
                }
            }
        });
        return out;
    }

    Tensor<T> backward(const Tensor<T>& grad_out) {
        grad_out.require_same_shape(xhat_, "batchnorm3d backward");
        const std::int64_t B = grad_out.dim(0), C = channels_;
        const std::int64_t S = grad_out.dim(2) * grad_out.dim(3) * grad_out.dim(4);
        const std::int64_t N = B * S;
        Tensor<T> grad_in(grad_out.shape());

        parallel_for(C, [&](std::int64_t c) {
            double sum_dy = 0.0, sum_dy_xhat = 0.0;
            for (std::int64_t b = 0; b < B; ++b) {
                const T* dy = grad_out.data() + (b * C + c) * S;
                const T* xh = xhat_.data() + (b * C + c) * S;
                for (std::int64_t i = 0; i < S; ++i) {
                    sum_dy += static_cast<double>(dy[i]);
                    sum_dy_xhat += static_cast<double>(dy[i]) * static_cast<double>(xh[i]);
                }
            }
            gamma.grad[c] += static_cast<T>(sum_dy_xhat);
            beta.grad[c] += static_cast<T>(sum_dy);

            const double g = static_cast<double>(gamma.value[c]);
            const double istd = inv_std_[static_cast<std::size_t>(c)];
            if (train_) {
                const double mean_dy = sum_dy / static_cast<double>(N);
                const double mean_dy_xhat = sum_dy_xhat / static_cast<double>(N);
                for (std::int64_t b = 0; b < B; ++b) {
                    const T* dy = grad_out.data() + (b * C + c) * S;
                    const T* xh = xhat_.data() + (b * C + c) * S;
                    T* dx = grad_in.data() + (b * C + c) * S;
                    for (std::int64_t i = 0; i < S; ++i)
                        dx[i] = static_cast<T>(g * istd *
                                               (static_cast<double>(dy[i]) - mean_dy -
                                                static_cast<double>(xh[i]) * mean_dy_xhat));
                }
            } else {
                for (std::int64_t b = 0; b < B; ++b) {
                    const T* dy = grad_out.data() + (b * C + c) * S;
                    T* dx = grad_in.data() + (b * C + c) * S;
                    for (std::int64_t i = 0; i < S; ++i)
                        dx[i] = static_cast<T>(g * istd * static_cast<double>(dy[i]));
                }
            }
        });
        return grad_in;
    }

    void visit_params(const std::string& prefix, const ParamVisitor<T>& fn) {
        fn(prefix + ".gamma", gamma);
        fn(prefix + ".beta", beta);
    }
    void visit_state(const std::string& prefix, const StateVisitor<T>& fn) {
        fn(prefix + ".running_mean", running_mean);
        fn(prefix + ".running_var", running_var);
    }

    std::int64_t channels() const { return channels_; }

    Param<T> gamma;
    Param<T> beta;
    Tensor<T> running_mean;
    Tensor<T> running_var;

private:
    std::int64_t channels_ = 0;
    double eps_ = 1e-5;
    double momentum_ = 0.1;
    bool train_ = true;
    Tensor<T> xhat_;
    std::vector<double> inv_std_;
};

// ---------------------------------------------------------------------------
// relu
// ---------------------------------------------------------------------------

template <typename T>
class ReLU {
public:
    Tensor<T> forward(const Tensor<T>& input) {
        mask_.assign(static_cast<std::size_t>(input.numel()), 0);
        Tensor<T> out(input.shape());
        for (std::int64_t i = 0; i < input.numel(); ++i) {
            if (input[i] > T(0)) {
                out[i] = input[i];
                mask_[static_cast<std::size_t>(i)] = 1;
            }
        }
        return out;
    }

    Tensor<T> backward(const Tensor<T>& grad_out) {
        if (grad_out.numel() != static_cast<std::int64_t>(mask_.size()))
            throw ShapeError("relu backward: grad_out shape mismatch");
        Tensor<T> grad_in(grad_out.shape());
        for (std::int64_t i = 0; i < grad_out.numel(); ++i)
            grad_in[i] = mask_[static_cast<std::size_t>(i)] ? grad_out[i] : T(0);
        return grad_in;
    }

private:
    std::vector<unsigned char> mask_;
};

// ---------------------------------------------------------------------------
// linear
// ---------------------------------------------------------------------------

template <typename T>
class Linear {
public:
    Linear() = default;

    Linear(std::int64_t in_features, std::int64_t out_features)
        : in_(in_features), out_(out_features) {
        weight = Param<T>({out_features, in_features});
        bias = Param<T>({out_features});
    }

    void init_he(Rng& rng) {
        weight.value.fill_gaussian(rng, std::sqrt(2.0 / static_cast<double>(in_)));
        bias.value.zero();
    }

    Tensor<T> forward(const Tensor<T>& input) {
        if (input.rank() != 2) throw ShapeError("linear: input must be 2-D [batch, features]");
        if (input.dim(1) != in_)
            throw ShapeError("linear: feature axis mismatch: input has " +
                             std::to_string(input.dim(1)) + ", layer expects " + std::to_string(in_));
        cached_input_ = input;
        const std::int64_t B = input.dim(0);
        Tensor<T> out({B, out_});
        for (std::int64_t b = 0; b < B; ++b) {
            const T* x = input.data() + b * in_;
            T* o = out.data() + b * out_;
            for (std::int64_t j = 0; j < out_; ++j) {
                const T* w = weight.value.data() + j * in_;
                double acc = static_cast<double>(bias.value[j]);
                for (std::int64_t i = 0; i < in_; ++i)
                    acc += static_cast<double>(w[i]) * static_cast<double>(x[i]);
                o[j] = static_cast<T>(acc);
            }
        }
        return out;
    }

    Tensor<T> backward(const Tensor<T>& grad_out) {
        const std::int64_t B = cached_input_.dim(0);
        if (grad_out.rank() != 2 || grad_out.dim(0) != B || grad_out.dim(1) != out_)
            throw ShapeError("linear backward: grad_out shape mismatch");
        Tensor<T> grad_in({B, in_});
        for (std::int64_t b = 0; b < B; ++b) {
            const T* g = grad_out.data() + b * out_;
            const T* x = cached_input_.data() + b * in_;
            T* gi = grad_in.data() + b * in_;
            for (std::int64_t j = 0; j < out_; ++j) {
                const T gj = g[j];
                const T* w = weight.value.data() + j * in_;
                T* gw = weight.grad.data() + j * in_;
                for (std::int64_t i = 0; i < in_; ++i) {
                    gi[i] += gj * w[i];
                    gw[i] += gj * x[i];
                }
                bias.grad[j] += gj;
            }
        }
        return grad_in;
    }

    void visit_params(const std::string& prefix, const ParamVisitor<T>& fn) {
        fn(prefix + ".weight", weight);
        fn(prefix + ".bias", bias);
    }

    std::int64_t in_features() const { return in_; }
    std::int64_t out_features() const { return out_; }

    Param<T> weight;
    Param<T> bias;

private:
    std::int64_t in_ = 0;
    std::int64_t out_ = 0;
    Tensor<T> cached_input_;
};

// ---------------------------------------------------------------------------
// channel concatenation
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> concat_channels(const std::vector<const Tensor<T>*>& inputs) {
    if (inputs.empty()) throw ShapeError("concat_channels: no inputs");
    const Tensor<T>& first = *inputs[0];
    if (first.rank() != 5) throw ShapeError("concat_channels: inputs must be 5-D");
    std::int64_t total_c = 0;
    for (const Tensor<T>* t : inputs) {
        if (t->rank() != 5) throw ShapeError("concat_channels: inputs must be 5-D");
        for (std::size_t a : {std::size_t(0), std::size_t(2), std::size_t(3), std::size_t(4)})
            if (t->dim(a) != first.dim(a))
                throw ShapeError("concat_channels: dim mismatch along axis " + std::to_string(a));
        total_c += t->dim(1);
    }
    const std::int64_t B = first.dim(0);
    const std::int64_t S = first.dim(2) * first.dim(3) * first.dim(4);
    Tensor<T> out({B, total_c, first.dim(2), first.dim(3), first.dim(4)});
    for (std::int64_t b = 0; b < B; ++b) {
        std::int64_t co = 0;
        for (const Tensor<T>* t : inputs) {
            const std::int64_t C = t->dim(1);
            std::copy(t->data() + b * C * S, t->data() + (b + 1) * C * S,
                      out.data() + (b * total_c + co) * S);
            co += C;
        }
    }
    return out;
}

/// Splits the gradient of a channel concatenation back into per-input grads.
template <typename T>
std::vector<Tensor<T>> concat_channels_backward(const Tensor<T>& grad_out,
                                                const std::vector<std::int64_t>& channels) {
    const std::int64_t B = grad_out.dim(0);
    const std::int64_t S = grad_out.dim(2) * grad_out.dim(3) * grad_out.dim(4);
    std::int64_t total = 0;
    for (std::int64_t c : channels) total += c;
    if (grad_out.dim(1) != total)
        throw ShapeError("concat_channels_backward: channel count mismatch");
    std::vector<Tensor<T>> grads;
    grads.reserve(channels.size());
    std::int64_t co = 0;
    for (std::int64_t c : channels) {
        Tensor<T> g({B, c, grad_out.dim(2), grad_out.dim(3), grad_out.dim(4)});
        for (std::int64_t b = 0; b < B; ++b)
            std::copy(grad_out.data() + (b * total + co) * S,
                      grad_out.data() + (b * total + co + c) * S, g.data() + b * c * S);
        grads.push_back(std::move(g));
        co += c;
    }
    return grads;
}

// ---------------------------------------------------------------------------
// SGD with momentum and weight decay
// ---------------------------------------------------------------------------

template <typename T>
void sgd_step(const std::vector<Param<T>*>& params, double lr, double momentum,
              double weight_decay) {
    if (!(lr > 0.0)) throw std::invalid_argument("sgd_step: lr must be > 0");
    if (momentum < 0.0 || momentum >= 1.0)
        throw std::invalid_argument("sgd_step: momentum must be in [0, 1)");
    for (Param<T>* p : params) {
        if (!p->grad.all_finite())
            throw DivergenceError("sgd_step: non-finite gradient encountered");
        for (std::int64_t i = 0; i < p->numel(); ++i) {
            const double v = momentum * static_cast<double>(p->momentum[i]) +
                             static_cast<double>(p->grad[i]) +
                             weight_decay * static_cast<double>(p->value[i]);
            p->momentum[i] = static_cast<T>(v);
            p->value[i] = static_cast<T>(static_cast<double>(p->value[i]) - lr * v);
        }
        p->grad.zero();
    }
}

template <typename T>
void zero_grads(const std::vector<Param<T>*>& params) {
    for (Param<T>* p : params) p->grad.zero();
}

} // namespace voldet
