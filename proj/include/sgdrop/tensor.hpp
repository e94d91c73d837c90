#pragma once

#include <cstddef>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace sgdrop {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t e : s) n *= e;
    return s.empty() ? 0 : n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ']';
    return os.str();
}

inline bool same_shape(const Shape& a, const Shape& b) { return a == b; }

/// Dense row-major n-d array. Copies are shallow: they share the underlying
/// buffer (cheap handle semantics, like the big frameworks). Use deep_copy()
/// when an independent buffer is required. Multi-index (i0,...,ik) maps to
/// the flat offset ((i0*d1 + i1)*d2 + i2)*... deterministically.
template <typename T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)) {
        check_shape(shape_);
        buf_ = std::make_shared<std::vector<T>>(shape_numel(shape_), fill);
    }

    static Tensor from(Shape shape, std::vector<T> values) {
        check_shape(shape);
        if (shape_numel(shape) != values.size())
            throw std::invalid_argument("Tensor::from: shape " + shape_str(shape) +
                                        " does not match " + std::to_string(values.size()) +
                                        " values");
        Tensor t;
        t.shape_ = std::move(shape);
        t.buf_ = std::make_shared<std::vector<T>>(std::move(values));
        return t;
    }

    bool empty() const { return !buf_; }
    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t extent(std::size_t i) const { return shape_.at(i); }
    std::size_t numel() const { return buf_ ? buf_->size() : 0; }

    T* data() { return buf_->data(); }
    const T* data() const { return buf_->data(); }

    T& operator[](std::size_t i) { return (*buf_)[i]; }
    const T& operator[](std::size_t i) const { return (*buf_)[i]; }

    T& at4(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
        return (*buf_)[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }
    const T& at4(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
        return (*buf_)[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }
    T& at2(std::size_t i, std::size_t j) { return (*buf_)[i * shape_[1] + j]; }
    const T& at2(std::size_t i, std::size_t j) const { return (*buf_)[i * shape_[1] + j]; }

    void fill(T v) { std::fill(buf_->begin(), buf_->end(), v); }

    Tensor deep_copy() const {
        Tensor t;
        t.shape_ = shape_;
        t.buf_ = buf_ ? std::make_shared<std::vector<T>>(*buf_) : nullptr;
        t.requires_grad = requires_grad;
        return t;
    }

    /// Same buffer, new shape (element count must match).
    Tensor reshaped(Shape s) const {
        check_shape(s);
        if (shape_numel(s) != numel())
            throw std::invalid_argument("reshape: cannot view " + shape_str(shape_) + " as " +
                                        shape_str(s));
        Tensor t = *this;
        t.shape_ = std::move(s);
        return t;
    }

    /// Same buffer, gradient tracking disabled.
    Tensor detached() const {
        Tensor t = *this;
        t.requires_grad = false;
        return t;
    }

    bool shares_buffer(const Tensor& other) const { return buf_ == other.buf_; }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> v(numel());
        for (std::size_t i = 0; i < numel(); ++i) v[i] = static_cast<U>((*buf_)[i]);
        auto r = Tensor<U>::from(shape_, std::move(v));
        r.requires_grad = requires_grad;
        return r;
    }

    bool requires_grad = false;

private:
    static void check_shape(const Shape& s) {
        if (s.empty()) throw std::invalid_argument("Tensor: rank-0 shapes are not supported");
        for (std::size_t e : s)
            if (e == 0) throw std::invalid_argument("Tensor: zero extent in shape " + shape_str(s));
    }

    Shape shape_;
    std::shared_ptr<std::vector<T>> buf_;
};

template <typename T>
Tensor<T> zeros_like(const Tensor<T>& t) {
    return Tensor<T>(t.shape());
}

/// Same values, excluded from gradient tracking (shares the buffer).
template <typename T>
Tensor<T> detach(const Tensor<T>& t) {
    return t.detached();
}

template <typename T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
    if (!same_shape(a.shape(), b.shape())) return false;
    for (std::size_t i = 0; i < a.numel(); ++i)
        if (a[i] != b[i]) return false;
    return true;
}

} // namespace sgdrop
