#pragma once

#include <cstddef>
#include <initializer_list>
#include <memory>
#include <utility>
#include <vector>

namespace fedbe {

// Allocator with two jobs. It hands out 64-byte-aligned storage: vector
// kernels split work by pointer alignment, so buffers must land on the same
// alignment every time or repeated runs drift in the low bits. And it
// default-initializes on resize, so buffers that are fully overwritten (GEMM
// outputs, normalized activations) skip the zero fill. Tensor(shape) still
// zeroes; Tensor::uninit(shape) does not.
template <typename T>
struct default_init_allocator {
    using value_type = T;
    static constexpr std::align_val_t alignment{64};

    default_init_allocator() = default;
    template <typename U>
    default_init_allocator(const default_init_allocator<U>&) noexcept {}

    T* allocate(std::size_t n) {
        return static_cast<T*>(::operator new(n * sizeof(T), alignment));
    }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }

    template <typename U, typename... Args>
    void construct(U* p, Args&&... args) {
        if constexpr (sizeof...(Args) == 0) {
            ::new (static_cast<void*>(p)) U;
        } else {
            ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
        }
    }

    template <typename U>
    struct rebind {
        using other = default_init_allocator<U>;
    };
    bool operator==(const default_init_allocator&) const { return true; }
    bool operator!=(const default_init_allocator&) const { return false; }
};

// Dense row-major array of 64-bit reals. The only numeric substrate in the
// library; shapes are dynamic and small, so a flat vector is enough.
struct Tensor {
    using Buffer = std::vector<double, default_init_allocator<double>>;

    std::vector<std::size_t> shape;
    Buffer data;

    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> s);
    Tensor(std::initializer_list<std::size_t> s) : Tensor(std::vector<std::size_t>(s)) {}

    static Tensor zeros(std::vector<std::size_t> s) { return Tensor(std::move(s)); }
    static Tensor uninit(std::vector<std::size_t> s);
    static Tensor uninit(std::initializer_list<std::size_t> s) {
        return uninit(std::vector<std::size_t>(s));
    }

    std::size_t size() const { return data.size(); }
    std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
    std::size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

    double& at(std::size_t i, std::size_t j) { return data[i * cols() + j]; }
    double at(std::size_t i, std::size_t j) const { return data[i * cols() + j]; }

    void fill(double v) { data.assign(data.size(), v); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    // Throws if any entry is NaN or infinite. `what` names the tensor in the
    // error message.
    void check_finite(const char* what) const;

    // Frobenius norm squared.
    double sq_norm() const;

    Tensor& operator+=(const Tensor& o);
    Tensor& operator-=(const Tensor& o);
    Tensor& operator*=(double s);
};

std::size_t shape_product(const std::vector<std::size_t>& shape);

} // namespace fedbe
