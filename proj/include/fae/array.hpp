#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace fae {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

// Dense row-major array of 64-bit floats. Rank 0 holds a single scalar.
class Array {
public:
    Array() : shape_{}, data_(1, 0.0) {}

    explicit Array(Shape shape)
        : shape_(std::move(shape)), data_(shape_numel(shape_), 0.0) {}

    Array(Shape shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != shape_numel(shape_)) {
            throw std::invalid_argument("Array: " + std::to_string(data_.size()) +
                                        " values do not fill shape " + shape_str(shape_));
        }
    }

    static Array scalar(double v) { return Array(Shape{}, std::vector<double>{v}); }

    static Array vector(std::vector<double> v) {
        Shape s{v.size()};
        return Array(std::move(s), std::move(v));
    }

    static Array matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
        return Array(Shape{rows, cols}, std::move(v));
    }

    static Array zeros(Shape shape) { return Array(std::move(shape)); }

    static Array full(Shape shape, double v) {
        Array a(std::move(shape));
        a.fill(v);
        return a;
    }

    const Shape& shape() const { return shape_; }
    std::size_t size() const { return data_.size(); }
    std::size_t rank() const { return shape_.size(); }
    bool is_scalar() const { return shape_.empty(); }
    bool is_vector() const { return shape_.size() == 1; }
    bool is_matrix() const { return shape_.size() == 2; }

    std::size_t rows() const { require_rank(2); return shape_[0]; }
    std::size_t cols() const { require_rank(2); return shape_[1]; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::span<double> view() { return data_; }
    std::span<const double> view() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double& at(std::size_t r, std::size_t c) { require_rank(2); return data_[r * shape_[1] + c]; }
    double at(std::size_t r, std::size_t c) const { require_rank(2); return data_[r * shape_[1] + c]; }

    // Scalar extraction; any single-element array qualifies.
    double item() const {
        if (data_.size() != 1) {
            throw std::invalid_argument("Array::item on shape " + shape_str(shape_));
        }
        return data_[0];
    }

    void fill(double v) { for (double& x : data_) x = v; }

    bool all_finite() const {
        for (double x : data_) {
            if (!std::isfinite(x)) return false;
        }
        return true;
    }

    auto begin() { return data_.begin(); }
    auto end() { return data_.end(); }
    auto begin() const { return data_.begin(); }
    auto end() const { return data_.end(); }

    friend bool operator==(const Array& a, const Array& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    void require_rank(std::size_t r) const {
        if (shape_.size() != r) {
            throw std::invalid_argument("Array: expected rank " + std::to_string(r) +
                                        ", got shape " + shape_str(shape_));
        }
    }

    Shape shape_;
    std::vector<double> data_;
};

inline bool same_shape(const Array& a, const Array& b) { return a.shape() == b.shape(); }

inline void check_finite(const Array& a, const char* what) {
    if (!a.all_finite()) {
        throw std::runtime_error(std::string("non-finite value in ") + what);
    }
}

}  // namespace fae
