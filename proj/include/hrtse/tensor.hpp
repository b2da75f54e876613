#pragma once

#include <cstdint>
#include <cstdlib>
#include <new>
#include <string>
#include <vector>

#include "hrtse/common.hpp"

namespace hrtse {

// 64-byte aligned storage. Keeping every buffer at the same alignment makes
// Eigen's vectorized traversals split identically on every run, so repeated
// forward passes are bit-for-bit reproducible.
template <class T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::size_t kAlign = 64;

    AlignedAllocator() = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U>&) {}

    T* allocate(std::size_t n) {
        std::size_t bytes = (n * sizeof(T) + kAlign - 1) / kAlign * kAlign;
        void* p = std::aligned_alloc(kAlign, bytes);
        if (!p) throw std::bad_alloc();
        return static_cast<T*>(p);
    }
    void deallocate(T* p, std::size_t) noexcept { std::free(p); }

    template <class U>
    bool operator==(const AlignedAllocator<U>&) const { return true; }
    template <class U>
    bool operator!=(const AlignedAllocator<U>&) const { return false; }
};

using FloatVec = std::vector<float, AlignedAllocator<float>>;

// Dense row-major float tensor. Shapes are small vectors of ints; all the
// heavy lifting happens through Eigen maps over `data`.
struct Tensor {
    std::vector<int> shape;
    FloatVec data;

    Tensor() = default;

    static Tensor zeros(std::vector<int> shape);
    static Tensor full(std::vector<int> shape, float v);
    static Tensor from(std::vector<int> shape, std::vector<float> values);
    static Tensor scalar(float v) { return from({1}, {v}); }

    int64_t numel() const;
    int ndim() const { return int(shape.size()); }
    int dim(int i) const { return shape[size_t(i)]; }

    float& at(int i) { return data[size_t(i)]; }
    float at(int i) const { return data[size_t(i)]; }
    float& at(int i, int j) { return data[size_t(i) * dim(1) + j]; }
    float at(int i, int j) const { return data[size_t(i) * dim(1) + j]; }
    float& at(int i, int j, int k) {
        return data[(size_t(i) * dim(1) + j) * dim(2) + k];
    }
    float at(int i, int j, int k) const {
        return data[(size_t(i) * dim(1) + j) * dim(2) + k];
    }
    float& at(int i, int j, int k, int l) {
        return data[((size_t(i) * dim(1) + j) * dim(2) + k) * dim(3) + l];
    }
    float at(int i, int j, int k, int l) const {
        return data[((size_t(i) * dim(1) + j) * dim(2) + k) * dim(3) + l];
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
    std::string shape_str() const;
};

// Throws ShapeError with both shapes in the message when they differ.
void check_same_shape(const Tensor& a, const Tensor& b, const char* where);

}  // namespace hrtse
