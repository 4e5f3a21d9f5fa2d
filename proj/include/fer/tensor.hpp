#pragma once

#include <algorithm>
#include <cstddef>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace fer {

using Shape = std::vector<std::size_t>;

/// Raised whenever operand shapes do not satisfy an operation's contract.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

inline std::size_t shape_size(const Shape& shape)
{
    std::size_t n = 1;
    for (std::size_t d : shape) {
        n *= d;
    }
    return n;
}

inline std::string shape_to_string(const Shape& shape)
{
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i != 0) {
            out += "x";
        }
        out += std::to_string(shape[i]);
    }
    return out + "]";
}

/// Dense row-major tensor with an optional gradient buffer of the same shape.
template <typename T>
class BasicTensor {
public:
    using value_type = T;

    BasicTensor() = default;

    explicit BasicTensor(Shape shape, T fill = T{0})
        : shape_(std::move(shape)), data_(checked_size(shape_), fill)
    {
    }

    BasicTensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data))
    {
        if (checked_size(shape_) != data_.size()) {
            throw ShapeError("tensor shape " + shape_to_string(shape_) + " does not match " +
                             std::to_string(data_.size()) + " values");
        }
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<T> data() noexcept { return data_; }
    std::span<const T> data() const noexcept { return data_; }
    T* raw() noexcept { return data_.data(); }
    const T* raw() const noexcept { return data_.data(); }

    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    bool has_grad() const noexcept { return !grad_.empty(); }

    /// Allocates a zeroed gradient buffer if none exists yet.
    std::span<T> ensure_grad()
    {
        if (grad_.size() != data_.size()) {
            grad_.assign(data_.size(), T{0});
        }
        return grad_;
    }

    std::span<T> grad() noexcept { return grad_; }
    std::span<const T> grad() const noexcept { return grad_; }

    void zero_grad() { std::fill(grad_.begin(), grad_.end(), T{0}); }
    void drop_grad() { grad_.clear(); grad_.shrink_to_fit(); }

    void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

    /// Same values under a new shape with equal element count.
    BasicTensor reshaped(Shape shape) const
    {
        if (shape_size(shape) != data_.size()) {
            throw ShapeError("cannot reshape " + shape_to_string(shape_) + " to " + shape_to_string(shape));
        }
        return BasicTensor(std::move(shape), data_);
    }

    void reshape(Shape shape)
    {
        if (shape_size(shape) != data_.size()) {
            throw ShapeError("cannot reshape " + shape_to_string(shape_) + " to " + shape_to_string(shape));
        }
        shape_ = std::move(shape);
    }

    template <typename U>
    BasicTensor<U> cast() const
    {
        std::vector<U> out(data_.size());
        std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
        return BasicTensor<U>(shape_, std::move(out));
    }

    friend bool operator==(const BasicTensor& a, const BasicTensor& b)
    {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    static std::size_t checked_size(const Shape& shape)
    {
        for (std::size_t d : shape) {
            if (d == 0) {
                throw ShapeError("tensor dimensions must be positive, got " + shape_to_string(shape));
            }
        }
        return shape_size(shape);
    }

    Shape shape_;
    std::vector<T> data_;
    std::vector<T> grad_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

/// Named parameter store; std::map keeps iteration lexicographic.
template <typename T>
using LayerParams = std::map<std::string, BasicTensor<T>>;

}  // namespace fer
