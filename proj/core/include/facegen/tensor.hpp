#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "facegen/rng.hpp"

namespace facegen {

// Dense N-dimensional array of 64-bit floats, row-major.
//
// Everything numeric in the project lives in one of these: images, layer
// activations, parameters, gradients, Gaussian statistics, weight vectors.
// Double precision throughout; finite-difference gradient checking is not
// meaningful below it, and at these sizes speed is a non-issue.
//
// Contracts shared by all operations on tensors:
//   * output shape is a pure function of input shapes,
//   * shape mismatch always throws std::invalid_argument, never broadcasts,
//   * reductions and accumulations run sequentially in row-major (flat
//     index ascending) order, so results are bit-reproducible.
class Tensor {
public:
    Tensor() = default;  // empty placeholder; real tensors come from factories

    static Tensor zeros(const std::vector<std::size_t>& shape);
    static Tensor full(const std::vector<std::size_t>& shape, double value);
    static Tensor from_data(const std::vector<std::size_t>& shape, std::vector<double> data);

    // Elements drawn from N(mean, stddev^2); see Rng for the exact generator.
    // Identical seed gives a bit-identical tensor.
    static Tensor randn(const std::vector<std::size_t>& shape, double mean, double stddev,
                        std::uint64_t seed);
    static Tensor randn(const std::vector<std::size_t>& shape, double mean, double stddev, Rng& rng);

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double& at(std::size_t i0) { return data_[i0]; }
    double& at(std::size_t i0, std::size_t i1) { return data_[i0 * shape_[1] + i1]; }
    double& at(std::size_t i0, std::size_t i1, std::size_t i2) {
        return data_[(i0 * shape_[1] + i1) * shape_[2] + i2];
    }
    double at(std::size_t i0) const { return data_[i0]; }
    double at(std::size_t i0, std::size_t i1) const { return data_[i0 * shape_[1] + i1]; }
    double at(std::size_t i0, std::size_t i1, std::size_t i2) const {
        return data_[(i0 * shape_[1] + i1) * shape_[2] + i2];
    }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    // Same data, new shape; element count must match.
    Tensor reshaped(const std::vector<std::size_t>& new_shape) const;

private:
    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

// Single-pass fused quantities over two same-shaped tensors:
//   sum        = sum_i (a_i + b_i)
//   diff_l2_sq = sum_i (a_i - b_i)^2      (the squared Euclidean norm used
//                                          by the inversion data term)
//   dot        = sum_i a_i * b_i
// Accumulated sequentially in row-major order.
struct AxpyNorms {
    double sum = 0.0;
    double diff_l2_sq = 0.0;
    double dot = 0.0;
};
AxpyNorms axpy_norms(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise
Tensor scale(const Tensor& a, double s);

void add_in_place(Tensor& dst, const Tensor& src);
// dst += alpha * src
void axpy_in_place(Tensor& dst, double alpha, const Tensor& src);

// [m,k] x [k,n] -> [m,n]; c[i,j] accumulates over k ascending.
Tensor matmul(const Tensor& a, const Tensor& b);

double sum(const Tensor& a);
double max_value(const Tensor& a);
std::size_t argmax(const Tensor& a);  // first maximum wins on ties

// Drops the leading dimension: slice(t, i) has shape t.shape()[1:].
Tensor slice(const Tensor& t, std::size_t leading_index);

bool all_finite(const Tensor& t);
// Throws numeric_error naming `what` if any element is NaN or infinite.
void require_finite(const Tensor& t, const std::string& what);

// Tensor blob: magic "CGT1", u32 rank, u32 extents, then raw f64 data,
// everything little-endian. Embedded in checkpoint and stats files.
void append_tensor_blob(std::string& out, const Tensor& t);
Tensor read_tensor_blob(const std::string& in, std::size_t& pos);

}  // namespace facegen
