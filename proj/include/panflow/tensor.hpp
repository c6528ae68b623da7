#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "panflow/errors.hpp"

namespace panflow {

using Shape = std::vector<std::size_t>;

/// Allocator that default-initializes, so resize() on arithmetic types skips zero-filling.
template <class T>
struct DefaultInitAllocator : std::allocator<T> {
    template <class U>
    struct rebind {
        using other = DefaultInitAllocator<U>;
    };
    DefaultInitAllocator() = default;
    template <class U>
    DefaultInitAllocator(const DefaultInitAllocator<U>&) noexcept {}

    template <class U>
    void construct(U* p) noexcept(std::is_nothrow_default_constructible_v<U>) {
        ::new (static_cast<void*>(p)) U;
    }
    template <class U, class... Args>
    void construct(U* p, Args&&... args) {
        ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }
};

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

/// Dense row-major array of order <= 4. Activations use N x C x H x W.
template <class T>
class Tensor {
public:
    using value_type = T;
    using Storage = std::vector<T, DefaultInitAllocator<T>>;

    Tensor() : shape_{}, data_(1, T{0}) {}

    explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)) {
        check_order();
        data_.assign(shape_numel(shape_), fill);
    }

    Tensor(Shape shape, const std::vector<T>& data)
        : shape_(std::move(shape)), data_(data.begin(), data.end()) {
        check_order();
        check_length();
    }

    Tensor(Shape shape, Storage data) : shape_(std::move(shape)), data_(std::move(data)) {
        check_order();
        check_length();
    }

    /// Tensor whose contents are unspecified; callers must overwrite every element.
    static Tensor uninitialized(Shape shape) {
        Storage data;
        data.resize(shape_numel(shape));
        return Tensor(std::move(shape), std::move(data));
    }

    static Tensor scalar(T value) { return Tensor(Shape{}, Storage{value}); }
    static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

    const Shape& shape() const noexcept { return shape_; }

    std::size_t dim() const noexcept { return shape_.size(); }
    std::size_t size(std::size_t axis) const { return shape_.at(axis); }
    std::size_t numel() const noexcept { return data_.size(); }

    T* data() noexcept { return data_.data(); }
    const T* data() const noexcept { return data_.data(); }
    std::span<T> values() noexcept { return data_; }
    std::span<const T> values() const noexcept { return data_; }
    Storage& storage() noexcept { return data_; }
    const Storage& storage() const noexcept { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    /// Element of a 4-D tensor.
    T& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) {
        return data_[((n * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
    }
    const T& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
        return data_[((n * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
    }

    T item() const {
        if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
        return data_[0];
    }

    void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

    Tensor reshaped(Shape shape) const {
        if (shape_numel(shape) != data_.size()) {
            throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
        }
        return Tensor(std::move(shape), data_);
    }

    template <class U>
    Tensor<U> cast() const {
        typename Tensor<U>::Storage out(data_.size());
        std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
        return Tensor<U>(shape_, std::move(out));
    }

    bool all_finite() const {
        // Max-reduce the magnitude bits; NaN and Inf have an all-ones exponent.
        using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
        constexpr Bits magnitude = std::numeric_limits<Bits>::max() >> 1;
        constexpr Bits inf_bits = std::bit_cast<Bits>(std::numeric_limits<T>::infinity());
        Bits largest = 0;
        for (T v : data_) largest = std::max(largest, static_cast<Bits>(std::bit_cast<Bits>(v) & magnitude));
        return largest < inf_bits;
    }

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    void check_length() const {
        if (shape_numel(shape_) != data_.size()) {
            throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                             " does not match shape " + shape_str(shape_));
        }
    }

    void check_order() const {
        if (shape_.size() > 4) throw ShapeError("tensor order above 4: " + shape_str(shape_));
    }

    Shape shape_;
    Storage data_;
};

template <class T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("max_abs_diff shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    T m{0};
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

template <class T>
void require_finite(const Tensor<T>& t, const char* op) {
    if (!t.all_finite()) {
        throw NumericError(std::string("non-finite value produced by ") + op + " (shape " +
                           shape_str(t.shape()) + ")");
    }
}

} // namespace panflow
