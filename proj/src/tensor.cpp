#include "hrtse/tensor.hpp"

namespace hrtse {

Tensor Tensor::zeros(std::vector<int> shape) {
    Tensor t;
    t.shape = std::move(shape);
    t.data.assign(size_t(t.numel()), 0.0f);
    return t;
}

Tensor Tensor::full(std::vector<int> shape, float v) {
    Tensor t;
    t.shape = std::move(shape);
    t.data.assign(size_t(t.numel()), v);
    return t;
}

Tensor Tensor::from(std::vector<int> shape, std::vector<float> values) {
    Tensor t;
    t.shape = std::move(shape);
    if (int64_t(values.size()) != t.numel())
        throw ShapeError("Tensor::from: value count does not match shape " +
                         t.shape_str());
    t.data.assign(values.begin(), values.end());
    return t;
}

int64_t Tensor::numel() const {
    int64_t n = 1;
    for (int d : shape) {
        if (d < 0) throw ShapeError("negative dimension in " + shape_str());
        n *= d;
    }
    return n;
}

std::string Tensor::shape_str() const {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ", ";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* where) {
    if (!a.same_shape(b))
        throw ShapeError(std::string(where) + ": shape mismatch " +
                         a.shape_str() + " vs " + b.shape_str());
}

}  // namespace hrtse
