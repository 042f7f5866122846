#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "maskdime/error.hpp"

namespace maskdime {

using Shape = std::vector<int>;

inline std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

inline std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (int e : shape) {
        if (e <= 0) throw ShapeError("non-positive extent in shape " + to_string(shape));
        n *= static_cast<std::size_t>(e);
    }
    return n;
}

/// Dense row-major float array. Plain value type: copies are deep and a const
/// Tensor can be shared read-only between threads.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, float fill = 0.0f)
        : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

    Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != shape_numel(shape_))
            throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " +
                             to_string(shape_));
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0f); }
    static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0f); }
    static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape_, 0.0f); }
    static Tensor scalar(float v) { return Tensor(Shape{1}, v); }

    const Shape& shape() const noexcept { return shape_; }
    int rank() const noexcept { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_.at(static_cast<std::size_t>(i < 0 ? rank() + i : i)); }
    std::size_t numel() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    float* data() noexcept { return data_.data(); }
    const float* data() const noexcept { return data_.data(); }
    std::span<float> span() noexcept { return data_; }
    std::span<const float> span() const noexcept { return data_; }
    std::vector<float>& vec() noexcept { return data_; }
    const std::vector<float>& vec() const noexcept { return data_; }

    float& operator[](std::size_t i) noexcept { return data_[i]; }
    float operator[](std::size_t i) const noexcept { return data_[i]; }

    float item() const {
        if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape_));
        return data_[0];
    }

    Tensor reshaped(Shape shape) const {
        if (shape_numel(shape) != numel())
            throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
        return Tensor(std::move(shape), data_);
    }

    bool all_finite() const noexcept {
        return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
    }

    /// Bitwise equality of shape and payload (distinguishes -0.0 and NaN payloads).
    bool bit_equal(const Tensor& other) const noexcept {
        return shape_ == other.shape_ &&
               std::equal(data_.begin(), data_.end(), other.data_.begin(), other.data_.end(),
                          [](float a, float b) {
                              return std::bit_cast<std::uint32_t>(a) == std::bit_cast<std::uint32_t>(b);
                          });
    }

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    Shape shape_;
    std::vector<float> data_;
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(what) + ": " + to_string(a.shape()) + " vs " + to_string(b.shape()));
}

inline void require_finite(const Tensor& t, const char* what) {
    if (!t.all_finite()) throw NumericError(std::string(what) + " produced a non-finite value");
}

// Small elementwise helpers for plain (non-differentiated) tensor arithmetic.

template <class F>
Tensor map(const Tensor& a, F f) {
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = f(a[i]);
    return out;
}

template <class F>
Tensor zip(const Tensor& a, const Tensor& b, F f) {
    require_same_shape(a, b, "zip");
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = f(a[i], b[i]);
    return out;
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return zip(a, b, std::plus<>{}); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return zip(a, b, std::minus<>{}); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return zip(a, b, std::multiplies<>{}); }
inline Tensor operator*(float s, const Tensor& a) {
    return map(a, [s](float v) { return s * v; });
}

inline double sum(const Tensor& a) {
    double s = 0.0;
    for (float v : a.vec()) s += v;
    return s;
}

inline double mean(const Tensor& a) { return a.numel() ? sum(a) / static_cast<double>(a.numel()) : 0.0; }

inline double l1_distance(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "l1_distance");
    double s = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) s += std::fabs(static_cast<double>(a[i]) - b[i]);
    return s;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "max_abs_diff");
    double m = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(static_cast<double>(a[i]) - b[i]));
    return m;
}

/// Picks `a` where mask is nonzero and `b` elsewhere. Used for the binary
/// mask blends so that unselected pixels are copied, never recomputed.
inline Tensor select(const Tensor& mask, const Tensor& a, const Tensor& b) {
    require_same_shape(mask, a, "select");
    require_same_shape(a, b, "select");
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = mask[i] != 0.0f ? a[i] : b[i];
    return out;
}

}  // namespace maskdime
