#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mugv/errors.hpp"

namespace mugv {

using real = double;

// Dense row-major tensor of doubles. All numeric state in the project
// (clips, latents, weights, gradients) lives in these.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int64_t> shape);
    Tensor(std::vector<int64_t> shape, std::vector<real> values);

    static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }
    static Tensor full(std::vector<int64_t> shape, real value);
    static Tensor scalar(real value) { return Tensor({1}, {value}); }

    const std::vector<int64_t>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int64_t dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    real* data() { return data_.data(); }
    const real* data() const { return data_.data(); }
    real& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    real operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    std::vector<real>& values() { return data_; }
    const std::vector<real>& values() const { return data_; }

    // Same data, new shape; element count must match.
    Tensor reshaped(std::vector<int64_t> shape) const;

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
    bool all_finite() const;

    static int64_t shape_numel(const std::vector<int64_t>& shape);
    static std::string shape_str(const std::vector<int64_t>& shape);
    std::string shape_str() const { return shape_str(shape_); }

private:
    std::vector<int64_t> shape_;
    std::vector<real> data_;
};

real max_abs_diff(const Tensor& a, const Tensor& b);
bool bit_equal(const Tensor& a, const Tensor& b);

void require_same_shape(const Tensor& a, const Tensor& b, const char* what);

}  // namespace mugv
