#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "shapecomp/errors.hpp"

namespace shapecomp::nn {

/// Storage aligned to Eigen's packet size. Vectorised kernels peel by pointer
/// alignment, so unaligned buffers would make results depend on heap layout.
template <typename T>
using AlignedVector = std::vector<T, Eigen::aligned_allocator<T>>;

/// Dense row-major array. Volumes use (N, C, D, H, W) with W (x) fastest,
/// matching the VoxelGrid storage order.
template <typename T>
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape, T fill = T(0)) : shape_(std::move(shape)) {
        for (int d : shape_)
            if (d < 0) throw InvalidArgument("negative tensor dimension");
        data_.assign(numel_of(shape_), fill);
    }

    static std::size_t numel_of(const std::vector<int>& shape) {
        return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                               [](std::size_t a, int d) { return a * std::size_t(d); });
    }

    const std::vector<int>& shape() const { return shape_; }
    int dim(std::size_t i) const { return shape_.at(i); }
    std::size_t ndim() const { return shape_.size(); }
    std::size_t numel() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    AlignedVector<T>& values() { return data_; }
    const AlignedVector<T>& values() const { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    /// Elements per leading index (e.g. C*D*H*W for a volume batch).
    std::size_t stride0() const { return shape_.empty() || shape_[0] == 0 ? 0 : numel() / std::size_t(shape_[0]); }
    /// Spatial voxels per channel for a 5-d tensor.
    std::size_t spatial() const { return std::size_t(shape_.at(2)) * shape_.at(3) * shape_.at(4); }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
    void zero() { fill(T(0)); }

    void reshape(std::vector<int> shape) {
        if (numel_of(shape) != numel()) throw InvalidArgument("reshape changes the element count");
        shape_ = std::move(shape);
    }

    Tensor& operator+=(const Tensor& o) {
        require_same_shape(o, "+=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
        return *this;
    }

    void require_same_shape(const Tensor& o, const char* what) const {
        if (shape_ != o.shape_) throw InvalidArgument(std::string("tensor shape mismatch in ") + what);
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out(shape_);
        for (std::size_t i = 0; i < data_.size(); ++i) out[i] = U(data_[i]);
        return out;
    }

    friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

private:
    std::vector<int> shape_;
    AlignedVector<T> data_;
};

/// Concatenates two (N, C, D, H, W) tensors along channels.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.ndim() != 5 || b.ndim() != 5 || a.dim(0) != b.dim(0) || a.spatial() != b.spatial())
        throw InvalidArgument("concat_channels needs matching batch and spatial sizes");
    const int n = a.dim(0), ca = a.dim(1), cb = b.dim(1);
    Tensor<T> out({n, ca + cb, a.dim(2), a.dim(3), a.dim(4)});
    const std::size_t sa = a.stride0(), sb = b.stride0();
    for (int i = 0; i < n; ++i) {
        std::copy_n(a.data() + i * sa, sa, out.data() + i * (sa + sb));
        std::copy_n(b.data() + i * sb, sb, out.data() + i * (sa + sb) + sa);
    }
    return out;
}

/// Inverse of concat_channels for gradients: first `ca` channels and the rest.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& t, int ca) {
    const int n = t.dim(0), cb = t.dim(1) - ca;
    Tensor<T> a({n, ca, t.dim(2), t.dim(3), t.dim(4)}), b({n, cb, t.dim(2), t.dim(3), t.dim(4)});
    const std::size_t sa = a.stride0(), sb = b.stride0();
    for (int i = 0; i < n; ++i) {
        std::copy_n(t.data() + i * (sa + sb), sa, a.data() + i * sa);
        std::copy_n(t.data() + i * (sa + sb) + sa, sb, b.data() + i * sb);
    }
    return {std::move(a), std::move(b)};
}

/// Repeats each batch entry `times` times: (N, ...) -> (N*times, ...), entry-major.
template <typename T>
Tensor<T> repeat_batch(const Tensor<T>& t, const std::vector<int>& times) {
    if (int(times.size()) != t.dim(0)) throw InvalidArgument("repeat_batch: one count per batch entry");
    std::vector<int> shape = t.shape();
    shape[0] = std::accumulate(times.begin(), times.end(), 0);
    Tensor<T> out(shape);
    const std::size_t s = t.stride0();
    std::size_t o = 0;
    for (int i = 0; i < t.dim(0); ++i)
        for (int r = 0; r < times[std::size_t(i)]; ++r, ++o) std::copy_n(t.data() + i * s, s, out.data() + o * s);
    return out;
}

/// Gradient of repeat_batch: sums the repeated entries back.
template <typename T>
Tensor<T> sum_repeats(const Tensor<T>& g, const std::vector<int>& times) {
    std::vector<int> shape = g.shape();
    shape[0] = int(times.size());
    Tensor<T> out(shape);
    const std::size_t s = g.stride0();
    std::size_t o = 0;
    for (std::size_t i = 0; i < times.size(); ++i)
        for (int r = 0; r < times[i]; ++r, ++o)
            for (std::size_t k = 0; k < s; ++k) out[i * s + k] += g[o * s + k];
    return out;
}

}  // namespace shapecomp::nn
