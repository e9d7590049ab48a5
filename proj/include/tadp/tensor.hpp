#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tadp/error.hpp"

namespace tadp::nn {

// Dense row-major float tensor, rank <= 4. Value semantics; desk-scale sizes.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape);
    Tensor(std::vector<int> shape, std::vector<float> data);

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
    static Tensor full(std::vector<int> shape, float v);

    int ndim() const { return static_cast<int>(shape_.size()); }
    const std::vector<int>& shape() const { return shape_; }
    int dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
    std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }
    std::vector<float>& vec() { return data_; }
    const std::vector<float>& vec() const { return data_; }

    float& operator[](std::int64_t i) { return data_[static_cast<size_t>(i)]; }
    float operator[](std::int64_t i) const { return data_[static_cast<size_t>(i)]; }

    float& at(int i0) { return data_[idx1(i0)]; }
    float at(int i0) const { return data_[idx1(i0)]; }
    float& at(int i0, int i1) { return data_[idx2(i0, i1)]; }
    float at(int i0, int i1) const { return data_[idx2(i0, i1)]; }
    float& at(int i0, int i1, int i2) { return data_[idx3(i0, i1, i2)]; }
    float at(int i0, int i1, int i2) const { return data_[idx3(i0, i1, i2)]; }
    float& at(int i0, int i1, int i2, int i3) { return data_[idx4(i0, i1, i2, i3)]; }
    float at(int i0, int i1, int i2, int i3) const { return data_[idx4(i0, i1, i2, i3)]; }

    Tensor reshaped(std::vector<int> shape) const;
    std::string shape_str() const;

private:
    size_t idx1(int i0) const { return static_cast<size_t>(i0); }
    size_t idx2(int i0, int i1) const {
        return static_cast<size_t>(i0) * shape_[1] + i1;
    }
    size_t idx3(int i0, int i1, int i2) const {
        return (static_cast<size_t>(i0) * shape_[1] + i1) * shape_[2] + i2;
    }
    size_t idx4(int i0, int i1, int i2, int i3) const {
        return ((static_cast<size_t>(i0) * shape_[1] + i1) * shape_[2] + i2) * shape_[3] + i3;
    }

    std::vector<int> shape_;
    std::vector<float> data_;
};

bool same_shape(const Tensor& a, const Tensor& b);
std::string shape_to_string(const std::vector<int>& s);

// CHW bilinear resize, align_corners=false. Interpolation weights always sum
// to 1 per output pixel, so per-pixel sums across channels are preserved.
Tensor resize_bilinear(const Tensor& chw, int out_h, int out_w);

// Accumulates d(out)/d(in) * grad_out into grad_in (same shapes as the forward).
void resize_bilinear_backward(const Tensor& grad_out, Tensor& grad_in);

// Nearest-neighbour CHW resize (index masks, labels).
Tensor resize_nearest(const Tensor& chw, int out_h, int out_w);

// C = A[m,k] * B[k,n]
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose2d(const Tensor& a);

// out[O,OH,OW] = conv(x[C,H,W], w[O,C,kh,kw]) + b[O], zero padding.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);
void conv2d_backward(const Tensor& x, const Tensor& w, const Tensor& grad_out, int stride,
                     int pad, Tensor* grad_x, Tensor* grad_w, Tensor* grad_b);

}  // namespace tadp::nn
