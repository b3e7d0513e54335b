#include "oscqat/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace oscqat {

std::size_t shape_numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

std::string shape_str(const std::vector<std::size_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

Tensor::Tensor(std::vector<std::size_t> s) : shape(std::move(s)), data(shape_numel(shape), 0.0) {}

Tensor Tensor::zeros(std::vector<std::size_t> s) { return Tensor(std::move(s)); }

Tensor Tensor::full(std::vector<std::size_t> s, double v) {
    Tensor t(std::move(s));
    for (double& x : t.data) x = v;
    return t;
}

Tensor Tensor::scalar(double v) {
    Tensor t;
    t.shape = {};
    t.data = {v};
    return t;
}

Tensor Tensor::from(std::vector<std::size_t> s, std::vector<double> values) {
    if (shape_numel(s) != values.size())
        throw std::invalid_argument("Tensor::from: shape " + shape_str(s) + " does not match " +
                                    std::to_string(values.size()) + " values");
    Tensor t;
    t.shape = std::move(s);
    t.data = std::move(values);
    return t;
}

double& Tensor::at4(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data[((n * shape[1] + c) * shape[2] + h) * shape[3] + w];
}

double Tensor::at4(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data[((n * shape[1] + c) * shape[2] + h) * shape[3] + w];
}

bool Tensor::all_finite() const {
    for (double x : data)
        if (!std::isfinite(x)) return false;
    return true;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape != b.shape)
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape) +
                                    " vs " + shape_str(b.shape));
}

}  // namespace oscqat
