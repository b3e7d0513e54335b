#pragma once

#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

namespace oscqat {

// Dense row-major tensor of doubles. Shape {} denotes a scalar with one
// element.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> s);
    static Tensor zeros(std::vector<std::size_t> s);
    static Tensor full(std::vector<std::size_t> s, double v);
    static Tensor scalar(double v);
    static Tensor from(std::vector<std::size_t> s, std::vector<double> values);

    std::size_t size() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }

    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }

    // Index into a rank-4 NCHW tensor.
    double& at4(std::size_t n, std::size_t c, std::size_t h, std::size_t w);
    double at4(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const;

    bool same_shape(const Tensor& other) const { return shape == other.shape; }
    bool all_finite() const;
};

std::size_t shape_numel(const std::vector<std::size_t>& shape);
std::string shape_str(const std::vector<std::size_t>& shape);

// Throws std::invalid_argument naming both shapes on mismatch.
void check_same_shape(const Tensor& a, const Tensor& b, const char* op);

}  // namespace oscqat
