#pragma once

// Dense row-major tensor. Values are immutable once an operation has produced
// them; any op that would emit NaN/Inf throws instead of propagating.

#include <bit>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <vector>

#include "otter/common.hpp"

namespace otter {

namespace detail {

// lets vectors skip value-initialization where every element is written
template <class T>
struct NoInitAlloc : std::allocator<T> {
    template <class U>
    struct rebind {
        using other = NoInitAlloc<U>;
    };
    template <class U>
    void construct(U*) noexcept {}
    template <class U, class... Args>
    void construct(U* p, Args&&... args) {
        ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }
};

}  // namespace detail

struct Uninit {};

template <class Real>
class TensorT {
public:
    using Storage = std::vector<Real, detail::NoInitAlloc<Real>>;

    TensorT() = default;

    explicit TensorT(std::vector<int> shape) : shape_(std::move(shape)) {
        data_.resize(checked_size(shape_));
        std::fill(data_.begin(), data_.end(), Real(0));
    }

    // storage left uninitialized; the caller writes every element
    TensorT(std::vector<int> shape, Uninit) : shape_(std::move(shape)) {
        data_.resize(checked_size(shape_));
    }

    TensorT(std::vector<int> shape, const std::vector<Real>& data) : shape_(std::move(shape)) {
        check(data.size() == checked_size(shape_), "Tensor",
              "data length does not match shape");
        data_.assign(data.begin(), data.end());
    }

    static TensorT scalar(Real v) {
        return TensorT({1}, {v});
    }

    static TensorT zeros(std::vector<int> shape) {
        return TensorT(std::move(shape));
    }

    static TensorT full(std::vector<int> shape, Real v) {
        TensorT t(std::move(shape));
        for (auto& x : t.data_) {
            x = v;
        }
        return t;
    }

    static TensorT identity(int n) {
        TensorT t({n, n});
        for (int i = 0; i < n; ++i) {
            t.data_[static_cast<size_t>(i) * n + i] = Real(1);
        }
        return t;
    }

    const std::vector<int>& shape() const { return shape_; }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int rank() const { return static_cast<int>(shape_.size()); }
    size_t size() const { return data_.size(); }

    Real* data() { return data_.data(); }
    const Real* data() const { return data_.data(); }
    Storage& vec() { return data_; }
    const Storage& vec() const { return data_; }

    Real& at(size_t i) { return data_[i]; }
    Real at(size_t i) const { return data_[i]; }

    // 2-D accessors (rows x cols), used heavily by token matrices
    Real& at2(int r, int c) { return data_[static_cast<size_t>(r) * shape_[1] + c]; }
    Real at2(int r, int c) const { return data_[static_cast<size_t>(r) * shape_[1] + c]; }

    bool same_shape(const TensorT& o) const { return shape_ == o.shape_; }

    std::string shape_str() const {
        std::ostringstream os;
        os << "[";
        for (size_t i = 0; i < shape_.size(); ++i) {
            os << (i ? "x" : "") << shape_[i];
        }
        os << "]";
        return os.str();
    }

    // NaN/Inf carry an all-ones exponent field; an integer max over the
    // masked exponent bits vectorizes and catches both.
    void check_finite(const char* where) const {
        bool bad = false;
        if constexpr (sizeof(Real) == sizeof(float)) {
            uint32_t m = 0;
            for (size_t i = 0; i < data_.size(); ++i) {
                const uint32_t e = std::bit_cast<uint32_t>(data_[i]) & 0x7f800000u;
                m = e > m ? e : m;
            }
            bad = m == 0x7f800000u;
        } else {
            uint64_t m = 0;
            for (size_t i = 0; i < data_.size(); ++i) {
                const uint64_t e = std::bit_cast<uint64_t>(data_[i]) & 0x7ff0000000000000ull;
                m = e > m ? e : m;
            }
            bad = m == 0x7ff0000000000000ull;
        }
        if (bad) {
            for (size_t i = 0; i < data_.size(); ++i) {
                if (!std::isfinite(static_cast<double>(data_[i]))) {
                    fail(where, "non-finite value at flat index " + std::to_string(i) +
                                    " of tensor " + shape_str());
                }
            }
        }
    }

private:
    static size_t checked_size(const std::vector<int>& shape) {
        check(!shape.empty(), "Tensor", "empty shape");
        size_t n = 1;
        for (int e : shape) {
            check(e > 0, "Tensor", "non-positive extent");
            n *= static_cast<size_t>(e);
        }
        return n;
    }

    std::vector<int> shape_;
    Storage data_;
};

using Tensor = TensorT<float>;

}  // namespace otter
