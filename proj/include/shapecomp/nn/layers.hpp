#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "shapecomp/nn/tensor.hpp"
#include "shapecomp/random.hpp"

// Layers with hand-written backward passes. Each layer caches what its
// backward needs from the most recent forward call, so one forward must be
// followed by at most one backward before the next forward.
namespace shapecomp::nn {

template <typename T>
using MatrixRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<MatrixRM<T>>;
template <typename T>
using CMapM = Eigen::Map<const MatrixRM<T>>;

enum class ParamKind : std::uint8_t { weight = 0, bias = 1, buffer = 2 };

template <typename T>
struct Param {
    std::string name;
    ParamKind kind = ParamKind::weight;
    Tensor<T> value;
    Tensor<T> grad;  ///< empty for buffers

    bool trainable() const { return kind != ParamKind::buffer; }
};

template <typename T>
using ParamList = std::vector<Param<T>*>;

/// Forward-pass context: training flag and the stream used for dropout masks.
struct Context {
    bool train = false;
    Rng* rng = nullptr;
};

template <typename T>
Param<T> make_param(std::string name, ParamKind kind, std::vector<int> shape, T fill = T(0)) {
    Param<T> p;
    p.name = std::move(name);
    p.kind = kind;
    p.value = Tensor<T>(shape, fill);
    if (kind != ParamKind::buffer) p.grad = Tensor<T>(shape);
    return p;
}

/// He-normal initialisation with the given fan-in.
template <typename T>
void he_init(Tensor<T>& w, double fan_in, Rng& rng) {
    const double sd = std::sqrt(2.0 / fan_in);
    for (std::size_t i = 0; i < w.numel(); ++i) w[i] = T(sd * rng.normal());
}

/// Geometry of a strided cubic convolution window.
struct ConvGeom {
    int k = 3, stride = 1, pad_before = 1, pad_after = 1;

    int out_size(int in) const {
        const int span = in + pad_before + pad_after - k;
        if (span < 0) throw InvalidArgument("convolution window larger than padded input " + std::to_string(in));
        return span / stride + 1;
    }
};

/// Output positions o in [0, out) whose input index o*stride - pad + kk lies in [0, in).
inline std::pair<int, int> valid_range(int in, int out, int stride, int pad, int kk) {
    // o >= ceil((pad - kk) / stride) and o <= floor((in - 1 + pad - kk) / stride)
    auto floor_div = [](int a, int b) { return a >= 0 ? a / b : -((-a + b - 1) / b); };
    const int lo = std::max(0, -floor_div(kk - pad, stride));
    const int hi = std::min(out, floor_div(in - 1 + pad - kk, stride) + 1);
    return {lo, std::max(lo, hi)};
}

/// Unfolds one (C, D, H, W) volume into a (C*k^3, Do*Ho*Wo) matrix.
template <typename T>
void im2col(const T* in, int C, int D, int H, int W, const ConvGeom& g, int Do, int Ho, int Wo, T* col) {
    const int k = g.k, s = g.stride, pb = g.pad_before;
    const std::size_t P = std::size_t(Do) * Ho * Wo;
    for (int c = 0; c < C; ++c)
        for (int kz = 0; kz < k; ++kz)
            for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx) {
                    T* row = col + (((std::size_t(c) * k + kz) * k + ky) * k + kx) * P;
                    const auto [xlo, xhi] = valid_range(W, Wo, s, pb, kx);
                    for (int oz = 0; oz < Do; ++oz) {
                        const int iz = oz * s - pb + kz;
                        for (int oy = 0; oy < Ho; ++oy) {
                            const int iy = oy * s - pb + ky;
                            T* dst = row + (std::size_t(oz) * Ho + oy) * Wo;
                            if (iz < 0 || iz >= D || iy < 0 || iy >= H) {
                                std::fill_n(dst, Wo, T(0));
                                continue;
                            }
                            const T* src = in + ((std::size_t(c) * D + iz) * H + iy) * W + (kx - pb);
                            std::fill_n(dst, xlo, T(0));
                            if (s == 1) {
                                std::copy(src + xlo, src + xhi, dst + xlo);
                            } else {
                                for (int ox = xlo; ox < xhi; ++ox) dst[ox] = src[ox * s];
                            }
                            std::fill(dst + xhi, dst + Wo, T(0));
                        }
                    }
                }
}

/// Adjoint of im2col: scatter-adds a column matrix onto `out` (not cleared).
template <typename T>
void col2im(const T* col, int C, int D, int H, int W, const ConvGeom& g, int Do, int Ho, int Wo, T* out) {
    const int k = g.k, s = g.stride, pb = g.pad_before;
    const std::size_t P = std::size_t(Do) * Ho * Wo;
    for (int c = 0; c < C; ++c)
        for (int kz = 0; kz < k; ++kz)
            for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx) {
                    const T* row = col + (((std::size_t(c) * k + kz) * k + ky) * k + kx) * P;
                    const auto [xlo, xhi] = valid_range(W, Wo, s, pb, kx);
                    const auto [zlo, zhi] = valid_range(D, Do, s, pb, kz);
                    const auto [ylo, yhi] = valid_range(H, Ho, s, pb, ky);
                    for (int oz = zlo; oz < zhi; ++oz) {
                        const int iz = oz * s - pb + kz;
                        for (int oy = ylo; oy < yhi; ++oy) {
                            const int iy = oy * s - pb + ky;
                            const T* src = row + (std::size_t(oz) * Ho + oy) * Wo;
                            T* dst = out + ((std::size_t(c) * D + iz) * H + iy) * W + (kx - pb);
                            if (s == 1) {
                                for (int ox = xlo; ox < xhi; ++ox) dst[ox] += src[ox];
                            } else {
                                for (int ox = xlo; ox < xhi; ++ox) dst[ox * s] += src[ox];
                            }
                        }
                    }
                }
}

template <typename T>
class Conv3d {
public:
    Conv3d() = default;
    Conv3d(std::string name, int cin, int cout, ConvGeom geom, bool bias, Rng& rng)
        : cin_(cin), cout_(cout), g_(geom), has_bias_(bias) {
        const int k = g_.k;
        weight_ = make_param<T>(name + ".weight", ParamKind::weight, {cout, cin, k, k, k});
        he_init(weight_.value, double(cin) * k * k * k, rng);
        if (has_bias_) bias_ = make_param<T>(name + ".bias", ParamKind::bias, {cout});
    }

    int out_channels() const { return cout_; }
    Param<T>& weight() { return weight_; }
    Param<T>& bias() { return bias_; }

    void collect(ParamList<T>& out) {
        out.push_back(&weight_);
        if (has_bias_) out.push_back(&bias_);
    }

    Tensor<T> forward(const Tensor<T>& x) {
        if (x.ndim() != 5 || x.dim(1) != cin_) throw InvalidArgument(weight_.name + ": expected " + std::to_string(cin_) + " input channels");
        x_shape_ = x.shape();
        const int n = x.dim(0), D = x.dim(2), H = x.dim(3), W = x.dim(4);
        const int Do = g_.out_size(D), Ho = g_.out_size(H), Wo = g_.out_size(W);
        Tensor<T> y({n, cout_, Do, Ho, Wo});
        const std::size_t P = std::size_t(Do) * Ho * Wo;
        const int K = cin_ * g_.k * g_.k * g_.k;
        CMapM<T> w(weight_.value.data(), cout_, K);
        // The unfolded input (or the input itself for 1x1x1 kernels) is kept for backward.
        if (pointwise()) {
            cols_ = x.values();
        } else {
            cols_.resize(std::size_t(n) * K * P);
        }
        for (int i = 0; i < n; ++i) {
            const T* xi = x.data() + i * x.stride0();
            MapM<T> yi(y.data() + i * y.stride0(), cout_, Eigen::Index(P));
            T* col = cols_.data() + std::size_t(i) * K * P;
            if (!pointwise()) im2col(xi, cin_, D, H, W, g_, Do, Ho, Wo, col);
            yi.noalias() = w * CMapM<T>(col, K, Eigen::Index(P));
            if (has_bias_)
                for (int c = 0; c < cout_; ++c) yi.row(c).array() += bias_.value[std::size_t(c)];
        }
        return y;
    }

    Tensor<T> backward(const Tensor<T>& dy) {
        Tensor<T> dx(x_shape_);
        const int n = dx.dim(0), D = dx.dim(2), H = dx.dim(3), W = dx.dim(4);
        const int Do = dy.dim(2), Ho = dy.dim(3), Wo = dy.dim(4);
        const std::size_t P = std::size_t(Do) * Ho * Wo;
        const int K = cin_ * g_.k * g_.k * g_.k;
        CMapM<T> w(weight_.value.data(), cout_, K);
        MapM<T> dw(weight_.grad.data(), cout_, K);
        for (int i = 0; i < n; ++i) {
            const T* col = cols_.data() + std::size_t(i) * K * P;
            CMapM<T> dyi(dy.data() + i * dy.stride0(), cout_, Eigen::Index(P));
            if (has_bias_)
                for (int c = 0; c < cout_; ++c) bias_.grad[std::size_t(c)] += dyi.row(c).sum();
            dw.noalias() += dyi * CMapM<T>(col, K, Eigen::Index(P)).transpose();
            if (pointwise()) {
                MapM<T>(dx.data() + i * dx.stride0(), cin_, Eigen::Index(P)).noalias() = w.transpose() * dyi;
            } else {
                dcol_.resize(std::size_t(K) * P);
                MapM<T>(dcol_.data(), K, Eigen::Index(P)).noalias() = w.transpose() * dyi;
                col2im(dcol_.data(), cin_, D, H, W, g_, Do, Ho, Wo, dx.data() + i * dx.stride0());
            }
        }
        return dx;
    }

private:
    bool pointwise() const { return g_.k == 1 && g_.stride == 1 && g_.pad_before == 0 && g_.pad_after == 0; }

    int cin_ = 0, cout_ = 0;
    ConvGeom g_;
    bool has_bias_ = false;
    Param<T> weight_, bias_;
    std::vector<int> x_shape_;
    // Scratch reused across calls; large fresh allocations are dominated by page faults.
    AlignedVector<T> cols_, dcol_;
};

/// Transposed convolution: the adjoint of Conv3d with the same geometry.
/// Weight layout (cin, cout, k, k, k).
template <typename T>
class ConvTranspose3d {
public:
    ConvTranspose3d() = default;
    ConvTranspose3d(std::string name, int cin, int cout, ConvGeom geom, bool bias, Rng& rng)
        : cin_(cin), cout_(cout), g_(geom), has_bias_(bias) {
        const int k = g_.k;
        weight_ = make_param<T>(name + ".weight", ParamKind::weight, {cin, cout, k, k, k});
        he_init(weight_.value, double(cin) * k * k * k / (double(g_.stride) * g_.stride * g_.stride), rng);
        if (has_bias_) bias_ = make_param<T>(name + ".bias", ParamKind::bias, {cout});
    }

    void collect(ParamList<T>& out) {
        out.push_back(&weight_);
        if (has_bias_) out.push_back(&bias_);
    }

    /// Output edge for an input edge: the conv geometry maps it back to `in`.
    int out_size(int in) const { return (in - 1) * g_.stride + g_.k - g_.pad_before - g_.pad_after; }

    Tensor<T> forward(const Tensor<T>& x) {
        if (x.ndim() != 5 || x.dim(1) != cin_) throw InvalidArgument(weight_.name + ": bad input channels");
        x_ = x;
        const int n = x.dim(0), Di = x.dim(2), Hi = x.dim(3), Wi = x.dim(4);
        const int D = out_size(Di), H = out_size(Hi), W = out_size(Wi);
        Tensor<T> y({n, cout_, D, H, W});
        const std::size_t P = x.spatial();
        const int K = cout_ * g_.k * g_.k * g_.k;
        CMapM<T> w(weight_.value.data(), cin_, K);
        col_.resize(std::size_t(K) * P);
        for (int i = 0; i < n; ++i) {
            MapM<T>(col_.data(), K, Eigen::Index(P)).noalias() =
                w.transpose() * CMapM<T>(x.data() + i * x.stride0(), cin_, Eigen::Index(P));
            T* yi = y.data() + i * y.stride0();
            col2im(col_.data(), cout_, D, H, W, g_, Di, Hi, Wi, yi);
            if (has_bias_)
                for (int c = 0; c < cout_; ++c) {
                    T* ch = yi + std::size_t(c) * y.spatial();
                    for (std::size_t v = 0; v < y.spatial(); ++v) ch[v] += bias_.value[std::size_t(c)];
                }
        }
        return y;
    }

    Tensor<T> backward(const Tensor<T>& dy) {
        const Tensor<T>& x = x_;
        const int n = x.dim(0), Di = x.dim(2), Hi = x.dim(3), Wi = x.dim(4);
        const int D = dy.dim(2), H = dy.dim(3), W = dy.dim(4);
        const std::size_t P = x.spatial();
        const int K = cout_ * g_.k * g_.k * g_.k;
        CMapM<T> w(weight_.value.data(), cin_, K);
        MapM<T> dw(weight_.grad.data(), cin_, K);
        Tensor<T> dx(x.shape());
        col_.resize(std::size_t(K) * P);
        for (int i = 0; i < n; ++i) {
            const T* dyi = dy.data() + i * dy.stride0();
            if (has_bias_)
                for (int c = 0; c < cout_; ++c) {
                    const T* ch = dyi + std::size_t(c) * dy.spatial();
                    T s = 0;
                    for (std::size_t v = 0; v < dy.spatial(); ++v) s += ch[v];
                    bias_.grad[std::size_t(c)] += s;
                }
            im2col(dyi, cout_, D, H, W, g_, Di, Hi, Wi, col_.data());
            CMapM<T> dc(col_.data(), K, Eigen::Index(P));
            dw.noalias() += CMapM<T>(x.data() + i * x.stride0(), cin_, Eigen::Index(P)) * dc.transpose();
            MapM<T>(dx.data() + i * dx.stride0(), cin_, Eigen::Index(P)).noalias() = w * dc;
        }
        x_ = Tensor<T>();
        return dx;
    }

private:
    int cin_ = 0, cout_ = 0;
    ConvGeom g_;
    bool has_bias_ = false;
    Param<T> weight_, bias_;
    Tensor<T> x_;
    AlignedVector<T> col_;
};

/// Per-channel batch normalisation over batch and space. Training uses batch
/// statistics and updates the running estimates; evaluation uses the running ones.
template <typename T>
class BatchNorm3d {
public:
    BatchNorm3d() = default;
    BatchNorm3d(std::string name, int channels, double momentum = 0.1, double eps = 1e-5)
        : c_(channels), momentum_(momentum), eps_(eps) {
        gamma_ = make_param<T>(name + ".gamma", ParamKind::weight, {channels}, T(1));
        beta_ = make_param<T>(name + ".beta", ParamKind::bias, {channels});
        running_mean_ = make_param<T>(name + ".running_mean", ParamKind::buffer, {channels});
        running_var_ = make_param<T>(name + ".running_var", ParamKind::buffer, {channels}, T(1));
    }

    void collect(ParamList<T>& out) {
        out.push_back(&gamma_);
        out.push_back(&beta_);
        out.push_back(&running_mean_);
        out.push_back(&running_var_);
    }

    Tensor<T> forward(const Tensor<T>& x, const Context& ctx) {
        const int n = x.dim(0);
        const std::size_t S = x.spatial();
        const double m = double(n) * double(S);
        train_ = ctx.train;
        mean_.assign(std::size_t(c_), 0.0);
        inv_std_.assign(std::size_t(c_), 0.0);
        for (int c = 0; c < c_; ++c) {
            double mean, var;
            if (train_) {
                double s = 0.0;
                for (int i = 0; i < n; ++i) {
                    const T* p = x.data() + i * x.stride0() + std::size_t(c) * S;
                    for (std::size_t v = 0; v < S; ++v) s += double(p[v]);
                }
                mean = s / m;
                double ss = 0.0;
                for (int i = 0; i < n; ++i) {
                    const T* p = x.data() + i * x.stride0() + std::size_t(c) * S;
                    for (std::size_t v = 0; v < S; ++v) ss += (double(p[v]) - mean) * (double(p[v]) - mean);
                }
                var = ss / m;
                const double unbiased = m > 1 ? ss / (m - 1) : var;
                running_mean_.value[std::size_t(c)] =
                    T((1 - momentum_) * double(running_mean_.value[std::size_t(c)]) + momentum_ * mean);
                running_var_.value[std::size_t(c)] =
                    T((1 - momentum_) * double(running_var_.value[std::size_t(c)]) + momentum_ * unbiased);
            } else {
                mean = double(running_mean_.value[std::size_t(c)]);
                var = double(running_var_.value[std::size_t(c)]);
            }
            mean_[std::size_t(c)] = mean;
            inv_std_[std::size_t(c)] = 1.0 / std::sqrt(var + eps_);
        }
        xhat_ = Tensor<T>(x.shape());
        Tensor<T> y(x.shape());
        for (int i = 0; i < n; ++i)
            for (int c = 0; c < c_; ++c) {
                const std::size_t off = i * x.stride0() + std::size_t(c) * S;
                const T mu = T(mean_[std::size_t(c)]), is = T(inv_std_[std::size_t(c)]);
                const T g = gamma_.value[std::size_t(c)], b = beta_.value[std::size_t(c)];
                for (std::size_t v = 0; v < S; ++v) {
                    const T h = (x[off + v] - mu) * is;
                    xhat_[off + v] = h;
                    y[off + v] = g * h + b;
                }
            }
        return y;
    }

    Tensor<T> backward(const Tensor<T>& dy) {
        const int n = dy.dim(0);
        const std::size_t S = dy.spatial();
        const double m = double(n) * double(S);
        Tensor<T> dx(dy.shape());
        for (int c = 0; c < c_; ++c) {
            double sum_dy = 0.0, sum_dy_xhat = 0.0;
            for (int i = 0; i < n; ++i) {
                const std::size_t off = i * dy.stride0() + std::size_t(c) * S;
                for (std::size_t v = 0; v < S; ++v) {
                    sum_dy += double(dy[off + v]);
                    sum_dy_xhat += double(dy[off + v]) * double(xhat_[off + v]);
                }
            }
            gamma_.grad[std::size_t(c)] += T(sum_dy_xhat);
            beta_.grad[std::size_t(c)] += T(sum_dy);
            const double g = double(gamma_.value[std::size_t(c)]), is = inv_std_[std::size_t(c)];
            for (int i = 0; i < n; ++i) {
                const std::size_t off = i * dy.stride0() + std::size_t(c) * S;
                for (std::size_t v = 0; v < S; ++v) {
                    if (train_) {
                        dx[off + v] = T(g * is / m * (m * double(dy[off + v]) - sum_dy - double(xhat_[off + v]) * sum_dy_xhat));
                    } else {
                        dx[off + v] = T(g * is * double(dy[off + v]));
                    }
                }
            }
        }
        xhat_ = Tensor<T>();
        return dx;
    }

private:
    int c_ = 0;
    double momentum_ = 0.1, eps_ = 1e-5;
    Param<T> gamma_, beta_, running_mean_, running_var_;
    bool train_ = false;
    std::vector<double> mean_, inv_std_;
    Tensor<T> xhat_;
};

template <typename T>
class Elu {
public:
    Tensor<T> forward(const Tensor<T>& x) {
        y_ = Tensor<T>(x.shape());
        for (std::size_t i = 0; i < x.numel(); ++i) y_[i] = x[i] > T(0) ? x[i] : std::expm1(x[i]);
        return y_;
    }
    Tensor<T> backward(const Tensor<T>& dy) {
        Tensor<T> dx(dy.shape());
        for (std::size_t i = 0; i < dy.numel(); ++i) dx[i] = y_[i] > T(0) ? dy[i] : dy[i] * (y_[i] + T(1));
        y_ = Tensor<T>();
        return dx;
    }

private:
    Tensor<T> y_;
};

/// Inverted dropout; identity outside training.
template <typename T>
class Dropout {
public:
    explicit Dropout(double p = 0.5) : p_(p) {}

    Tensor<T> forward(const Tensor<T>& x, const Context& ctx) {
        active_ = ctx.train && p_ > 0.0;
        if (!active_) return x;
        if (ctx.rng == nullptr) throw InvalidArgument("dropout in training mode needs a random stream");
        const T scale = T(1.0 / (1.0 - p_));
        mask_.assign(x.numel(), T(0));
        Tensor<T> y(x.shape());
        for (std::size_t i = 0; i < x.numel(); ++i) {
            if (!ctx.rng->bernoulli(p_)) mask_[i] = scale;
            y[i] = x[i] * mask_[i];
        }
        return y;
    }
    Tensor<T> backward(const Tensor<T>& dy) {
        if (!active_) return dy;
        Tensor<T> dx(dy.shape());
        for (std::size_t i = 0; i < dy.numel(); ++i) dx[i] = dy[i] * mask_[i];
        return dx;
    }

private:
    double p_ = 0.5;
    bool active_ = false;
    std::vector<T> mask_;
};

/// Fully connected layer on (N, in) inputs.
template <typename T>
class Linear {
public:
    Linear() = default;
    Linear(std::string name, int in, int out, Rng& rng, double init_scale = 1.0) : in_(in), out_(out) {
        weight_ = make_param<T>(name + ".weight", ParamKind::weight, {out, in});
        he_init(weight_.value, double(in) / (init_scale * init_scale), rng);
        bias_ = make_param<T>(name + ".bias", ParamKind::bias, {out});
    }

    void collect(ParamList<T>& out) {
        out.push_back(&weight_);
        out.push_back(&bias_);
    }

    Tensor<T> forward(const Tensor<T>& x) {
        x_ = x;
        const int n = x.dim(0);
        Tensor<T> y({n, out_});
        MapM<T>(y.data(), n, out_).noalias() =
            CMapM<T>(x.data(), n, in_) * CMapM<T>(weight_.value.data(), out_, in_).transpose();
        for (int i = 0; i < n; ++i)
            for (int o = 0; o < out_; ++o) y[std::size_t(i) * out_ + o] += bias_.value[std::size_t(o)];
        return y;
    }

    Tensor<T> backward(const Tensor<T>& dy) {
        const int n = dy.dim(0);
        CMapM<T> d(dy.data(), n, out_);
        MapM<T>(weight_.grad.data(), out_, in_).noalias() += d.transpose() * CMapM<T>(x_.data(), n, in_);
        for (int i = 0; i < n; ++i)
            for (int o = 0; o < out_; ++o) bias_.grad[std::size_t(o)] += dy[std::size_t(i) * out_ + o];
        Tensor<T> dx({n, in_});
        MapM<T>(dx.data(), n, in_).noalias() = d * CMapM<T>(weight_.value.data(), out_, in_);
        return dx;
    }

private:
    int in_ = 0, out_ = 0;
    Param<T> weight_, bias_;
    Tensor<T> x_;
};

/// (N, C, D, H, W) -> (N, C) mean over space.
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
    const int n = x.dim(0), c = x.dim(1);
    const std::size_t S = x.spatial();
    Tensor<T> y({n, c});
    for (int i = 0; i < n; ++i)
        for (int ch = 0; ch < c; ++ch) {
            const T* p = x.data() + i * x.stride0() + std::size_t(ch) * S;
            double s = 0.0;
            for (std::size_t v = 0; v < S; ++v) s += double(p[v]);
            y[std::size_t(i) * c + ch] = T(s / double(S));
        }
    return y;
}

template <typename T>
Tensor<T> global_avg_pool_backward(const Tensor<T>& dy, const std::vector<int>& in_shape) {
    Tensor<T> dx(in_shape);
    const int n = dx.dim(0), c = dx.dim(1);
    const std::size_t S = dx.spatial();
    for (int i = 0; i < n; ++i)
        for (int ch = 0; ch < c; ++ch) {
            const T g = T(double(dy[std::size_t(i) * c + ch]) / double(S));
            std::fill_n(dx.data() + i * dx.stride0() + std::size_t(ch) * S, S, g);
        }
    return dx;
}

/// Broadcasts (N, L) codes over space: (N, L, D, H, W).
template <typename T>
Tensor<T> tile_latent(const Tensor<T>& z, int D, int H, int W) {
    const int n = z.dim(0), l = z.dim(1);
    Tensor<T> out({n, l, D, H, W});
    const std::size_t S = out.spatial();
    for (int i = 0; i < n; ++i)
        for (int k = 0; k < l; ++k)
            std::fill_n(out.data() + i * out.stride0() + std::size_t(k) * S, S, z[std::size_t(i) * l + k]);
    return out;
}

template <typename T>
Tensor<T> tile_latent_backward(const Tensor<T>& d) {
    const int n = d.dim(0), l = d.dim(1);
    const std::size_t S = d.spatial();
    Tensor<T> dz({n, l});
    for (int i = 0; i < n; ++i)
        for (int k = 0; k < l; ++k) {
            const T* p = d.data() + i * d.stride0() + std::size_t(k) * S;
            double s = 0.0;
            for (std::size_t v = 0; v < S; ++v) s += double(p[v]);
            dz[std::size_t(i) * l + k] = T(s);
        }
    return dz;
}

template <typename T>
T sigmoid(T v) {
    return v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
}

}  // namespace shapecomp::nn
