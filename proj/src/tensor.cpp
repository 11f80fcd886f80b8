#include "fedbe/tensor.hpp"

#include <cassert>
#include <cmath>
#include <string>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "fedbe/errors.hpp"

namespace fedbe {

#if defined(__GLIBC__)
namespace {
// Activation buffers are large and short-lived; without this, glibc serves
// them via mmap/munmap and the kernel re-zeroes the pages on every batch.
struct MallocTuning {
    MallocTuning() {
        mallopt(M_MMAP_THRESHOLD, 256 * 1024 * 1024);
        mallopt(M_TRIM_THRESHOLD, 256 * 1024 * 1024);
    }
};
const MallocTuning malloc_tuning;
} // namespace
#endif

std::size_t shape_product(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

Tensor::Tensor(std::vector<std::size_t> s) : shape(std::move(s)) {
    data.assign(shape_product(shape), 0.0);
}

Tensor Tensor::uninit(std::vector<std::size_t> s) {
    Tensor t;
    t.shape = std::move(s);
    t.data.resize(shape_product(t.shape));
    return t;
}

void Tensor::check_finite(const char* what) const {
    for (double v : data) {
        if (!std::isfinite(v)) {
            throw RunError(std::string("non-finite value in ") + what);
        }
    }
}

double Tensor::sq_norm() const {
    double s = 0.0;
    for (double v : data) s += v * v;
    return s;
}

Tensor& Tensor::operator+=(const Tensor& o) {
    assert(same_shape(o));
    for (std::size_t i = 0; i < data.size(); ++i) data[i] += o.data[i];
    return *this;
}

Tensor& Tensor::operator-=(const Tensor& o) {
    assert(same_shape(o));
    for (std::size_t i = 0; i < data.size(); ++i) data[i] -= o.data[i];
    return *this;
}

Tensor& Tensor::operator*=(double s) {
    for (double& v : data) v *= s;
    return *this;
}

} // namespace fedbe
