#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "fastgc/errors.hpp"

namespace fastgc {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);

/// Dense tensor of 64-bit floats, row-major, order 1-5. Immutable once
/// constructed; copies share storage. Kernels build a fresh buffer and wrap it.
class Tensor {
public:
    Tensor() = default;

    /// Zero-filled tensor of the given shape.
    explicit Tensor(Shape shape);

    /// Wrap an existing buffer. product(shape) must equal data.size().
    Tensor(Shape shape, std::vector<double> data);

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
    static Tensor full(Shape shape, double value);
    static Tensor scalar(double value) { return Tensor({1}, {value}); }
    /// Identity matrix [n, n].
    static Tensor eye(std::size_t n);

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_ ? data_->size() : 0; }
    std::size_t extent(std::size_t dim) const { return shape_.at(dim); }
    bool empty() const { return !data_; }

    const double* data() const { return data_->data(); }
    const std::vector<double>& vec() const { return *data_; }

    double operator[](std::size_t i) const { return (*data_)[i]; }
    double at2(std::size_t i, std::size_t j) const { return (*data_)[i * shape_[1] + j]; }
    double at3(std::size_t i, std::size_t j, std::size_t k) const {
        return (*data_)[(i * shape_[1] + j) * shape_[2] + k];
    }

    /// Same storage under a new shape (product must match).
    Tensor reshaped(Shape shape) const;

private:
    Shape shape_;
    std::shared_ptr<const std::vector<double>> data_;
};

// ---- kernels -------------------------------------------------------------

/// Batched matrix multiply: [t,m,k] x [t,k,n] -> [t,m,n].
Tensor bmm(const Tensor& a, const Tensor& b);

/// Plain matrix multiply: [m,k] x [k,n] -> [m,n].
Tensor matmul(const Tensor& a, const Tensor& b);

/// Batched outer product: [t,m] x [t,n] -> [t,m,n].
Tensor outer_batch(const Tensor& u, const Tensor& v);

/// Patch extraction for convolution lowering.
/// x: [t, c_in, s_h, s_w] -> [t, p, kh*kw*c_in] where
/// p = ((s_h + 2*pad - kh)/stride + 1) * ((s_w + 2*pad - kw)/stride + 1).
/// Each row holds one receptive field, channel-major then row-major within the
/// patch, matching the row-major flattening of a [c_out, c_in, kh, kw] kernel.
Tensor im2col(const Tensor& x, std::size_t kh, std::size_t kw, std::size_t stride,
              std::size_t pad = 0);

/// Adjoint of im2col: scatter-add patch rows back into [t, c_in, s_h, s_w].
Tensor col2im(const Tensor& cols, const Shape& x_shape, std::size_t kh, std::size_t kw,
              std::size_t stride, std::size_t pad = 0);

/// Volumetric analogue: x [t, c_in, s_d, s_h, s_w] -> [t, p, kd*kh*kw*c_in].
Tensor im2col3d(const Tensor& x, std::size_t kd, std::size_t kh, std::size_t kw,
                std::size_t stride);
Tensor col2im3d(const Tensor& cols, const Shape& x_shape, std::size_t kd, std::size_t kh,
                std::size_t kw, std::size_t stride);

/// Per-row squared L2 norm: [t, d] -> [t]. Higher-rank input is treated as
/// [t, rest] with all trailing dims flattened.
Tensor sq_norm_rows(const Tensor& x);

/// Squared L2 norm of the whole tensor.
double sq_norm_all(const Tensor& x);

Tensor transpose2d(const Tensor& a);                       // [m,n] -> [n,m]
Tensor transpose_last2(const Tensor& a);                   // [b,m,n] -> [b,n,m]
Tensor transpose12(const Tensor& a);                       // [a,b,c,d] -> [a,c,b,d]

Tensor add(const Tensor& a, const Tensor& b);              // same shape
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scalar_mul(const Tensor& a, double s);
/// a + s * b, same shape.
Tensor axpy(const Tensor& a, const Tensor& b, double s);

Tensor add_rowwise(const Tensor& x, const Tensor& b);      // [r,m] + [m]
Tensor mul_rowwise(const Tensor& x, const Tensor& g);      // [r,m] * [m]
Tensor add_channel_bias(const Tensor& x, const Tensor& b); // [t,c,s] + [c]

double sum_all(const Tensor& x);
/// Column sums of [r, m] -> [m].
Tensor sum_rows(const Tensor& x);

}  // namespace fastgc
