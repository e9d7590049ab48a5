#include "tadp/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace tadp::nn {

namespace {
std::int64_t shape_numel(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) {
        if (d < 0) throw ValidationError("negative tensor dimension");
        n *= d;
    }
    return n;
}
}  // namespace

Tensor::Tensor(std::vector<int> shape)
    : shape_(std::move(shape)), data_(static_cast<size_t>(shape_numel(shape_)), 0.0f) {
    if (shape_.size() > 4) throw ValidationError("tensor rank > 4 unsupported");
}

Tensor::Tensor(std::vector<int> shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_.size() > 4) throw ValidationError("tensor rank > 4 unsupported");
    if (shape_numel(shape_) != static_cast<std::int64_t>(data_.size()))
        throw ValidationError("tensor data size does not match shape " + shape_to_string(shape_));
}

Tensor Tensor::full(std::vector<int> shape, float v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
}

Tensor Tensor::reshaped(std::vector<int> shape) const {
    if (shape_numel(shape) != numel())
        throw ValidationError("reshape " + shape_str() + " -> " + shape_to_string(shape) + " changes element count");
    return Tensor(std::move(shape), data_);
}

std::string Tensor::shape_str() const { return shape_to_string(shape_); }

bool same_shape(const Tensor& a, const Tensor& b) { return a.shape() == b.shape(); }

std::string shape_to_string(const std::vector<int>& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

namespace {
struct Lerp {
    int lo, hi;
    float w_hi;  // weight of hi sample; lo gets 1-w
};

Lerp lerp_coord(int out_i, int out_n, int in_n) {
    if (in_n == 1) return {0, 0, 0.0f};
    float scale = static_cast<float>(in_n) / static_cast<float>(out_n);
    float src = (static_cast<float>(out_i) + 0.5f) * scale - 0.5f;
    if (src < 0.0f) src = 0.0f;
    float max_src = static_cast<float>(in_n - 1);
    if (src > max_src) src = max_src;
    int lo = static_cast<int>(src);
    int hi = std::min(lo + 1, in_n - 1);
    return {lo, hi, src - static_cast<float>(lo)};
}
}  // namespace

Tensor resize_bilinear(const Tensor& chw, int out_h, int out_w) {
    if (chw.ndim() != 3) throw ValidationError("resize_bilinear expects CHW, got " + chw.shape_str());
    int c = chw.dim(0), h = chw.dim(1), w = chw.dim(2);
    if (h == out_h && w == out_w) return chw;
    Tensor out({c, out_h, out_w});
    std::vector<Lerp> ys(static_cast<size_t>(out_h)), xs(static_cast<size_t>(out_w));
    for (int y = 0; y < out_h; ++y) ys[static_cast<size_t>(y)] = lerp_coord(y, out_h, h);
    for (int x = 0; x < out_w; ++x) xs[static_cast<size_t>(x)] = lerp_coord(x, out_w, w);
    for (int ci = 0; ci < c; ++ci) {
        const float* src = chw.data() + static_cast<size_t>(ci) * h * w;
        float* dst = out.data() + static_cast<size_t>(ci) * out_h * out_w;
        for (int y = 0; y < out_h; ++y) {
            const Lerp& ly = ys[static_cast<size_t>(y)];
            for (int x = 0; x < out_w; ++x) {
                const Lerp& lx = xs[static_cast<size_t>(x)];
                float v00 = src[ly.lo * w + lx.lo];
                float v01 = src[ly.lo * w + lx.hi];
                float v10 = src[ly.hi * w + lx.lo];
                float v11 = src[ly.hi * w + lx.hi];
                float top = v00 + (v01 - v00) * lx.w_hi;
                float bot = v10 + (v11 - v10) * lx.w_hi;
                dst[y * out_w + x] = top + (bot - top) * ly.w_hi;
            }
        }
    }
    return out;
}

void resize_bilinear_backward(const Tensor& grad_out, Tensor& grad_in) {
    int c = grad_in.dim(0), h = grad_in.dim(1), w = grad_in.dim(2);
    int out_h = grad_out.dim(1), out_w = grad_out.dim(2);
    if (h == out_h && w == out_w) {
        for (std::int64_t i = 0; i < grad_in.numel(); ++i) grad_in[i] += grad_out[i];
        return;
    }
    std::vector<Lerp> ys(static_cast<size_t>(out_h)), xs(static_cast<size_t>(out_w));
    for (int y = 0; y < out_h; ++y) ys[static_cast<size_t>(y)] = lerp_coord(y, out_h, h);
    for (int x = 0; x < out_w; ++x) xs[static_cast<size_t>(x)] = lerp_coord(x, out_w, w);
    for (int ci = 0; ci < c; ++ci) {
        float* dst = grad_in.data() + static_cast<size_t>(ci) * h * w;
        const float* g = grad_out.data() + static_cast<size_t>(ci) * out_h * out_w;
        for (int y = 0; y < out_h; ++y) {
            const Lerp& ly = ys[static_cast<size_t>(y)];
            for (int x = 0; x < out_w; ++x) {
                const Lerp& lx = xs[static_cast<size_t>(x)];
                float gv = g[y * out_w + x];
                dst[ly.lo * w + lx.lo] += gv * (1.0f - ly.w_hi) * (1.0f - lx.w_hi);
                dst[ly.lo * w + lx.hi] += gv * (1.0f - ly.w_hi) * lx.w_hi;
                dst[ly.hi * w + lx.lo] += gv * ly.w_hi * (1.0f - lx.w_hi);
                dst[ly.hi * w + lx.hi] += gv * ly.w_hi * lx.w_hi;
            }
        }
    }
}

Tensor resize_nearest(const Tensor& chw, int out_h, int out_w) {
    if (chw.ndim() != 3) throw ValidationError("resize_nearest expects CHW, got " + chw.shape_str());
    int c = chw.dim(0), h = chw.dim(1), w = chw.dim(2);
    if (h == out_h && w == out_w) return chw;
    Tensor out({c, out_h, out_w});
    for (int ci = 0; ci < c; ++ci)
        for (int y = 0; y < out_h; ++y) {
            int sy = std::min(static_cast<int>((static_cast<float>(y) + 0.5f) * h / out_h), h - 1);
            for (int x = 0; x < out_w; ++x) {
                int sx = std::min(static_cast<int>((static_cast<float>(x) + 0.5f) * w / out_w), w - 1);
                out.at(ci, y, x) = chw.at(ci, sy, sx);
            }
        }
    return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
        throw ValidationError("matmul shape mismatch " + a.shape_str() + " x " + b.shape_str());
    int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out({m, n});
    for (int i = 0; i < m; ++i) {
        const float* arow = a.data() + static_cast<size_t>(i) * k;
        float* orow = out.data() + static_cast<size_t>(i) * n;
        for (int kk = 0; kk < k; ++kk) {
            float av = arow[kk];
            if (av == 0.0f) continue;
            const float* brow = b.data() + static_cast<size_t>(kk) * n;
            for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    return out;
}

Tensor transpose2d(const Tensor& a) {
    if (a.ndim() != 2) throw ValidationError("transpose2d expects rank 2");
    int m = a.dim(0), n = a.dim(1);
    Tensor out({n, m});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.at(j, i) = a.at(i, j);
    return out;
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
    if (x.ndim() != 3 || w.ndim() != 4) throw ValidationError("conv2d expects x CHW, w OCKK");
    int c = x.dim(0), h = x.dim(1), ww = x.dim(2);
    int o = w.dim(0), kc = w.dim(1), kh = w.dim(2), kw = w.dim(3);
    if (kc != c) throw ValidationError("conv2d channel mismatch");
    int oh = (h + 2 * pad - kh) / stride + 1;
    int ow = (ww + 2 * pad - kw) / stride + 1;
    Tensor out({o, oh, ow});
    for (int oc = 0; oc < o; ++oc) {
        float bias = b.empty() ? 0.0f : b[oc];
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
                float acc = bias;
                int iy0 = oy * stride - pad;
                int ix0 = ox * stride - pad;
                for (int ic = 0; ic < c; ++ic)
                    for (int ky = 0; ky < kh; ++ky) {
                        int iy = iy0 + ky;
                        if (iy < 0 || iy >= h) continue;
                        const float* xrow = x.data() + (static_cast<size_t>(ic) * h + iy) * ww;
                        const float* wrow = w.data() + ((static_cast<size_t>(oc) * c + ic) * kh + ky) * kw;
                        for (int kx = 0; kx < kw; ++kx) {
                            int ix = ix0 + kx;
                            if (ix < 0 || ix >= ww) continue;
                            acc += xrow[ix] * wrow[kx];
                        }
                    }
                out.at(oc, oy, ox) = acc;
            }
    }
    return out;
}

void conv2d_backward(const Tensor& x, const Tensor& w, const Tensor& grad_out, int stride,
                     int pad, Tensor* grad_x, Tensor* grad_w, Tensor* grad_b) {
    int c = x.dim(0), h = x.dim(1), ww = x.dim(2);
    int o = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    int oh = grad_out.dim(1), ow = grad_out.dim(2);
    for (int oc = 0; oc < o; ++oc)
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
                float g = grad_out.at(oc, oy, ox);
                if (g == 0.0f) continue;
                if (grad_b) (*grad_b)[oc] += g;
                int iy0 = oy * stride - pad;
                int ix0 = ox * stride - pad;
                for (int ic = 0; ic < c; ++ic)
                    for (int ky = 0; ky < kh; ++ky) {
                        int iy = iy0 + ky;
                        if (iy < 0 || iy >= h) continue;
                        for (int kx = 0; kx < kw; ++kx) {
                            int ix = ix0 + kx;
                            if (ix < 0 || ix >= ww) continue;
                            if (grad_w) grad_w->at(oc, ic, ky, kx) += g * x.at(ic, iy, ix);
                            if (grad_x) grad_x->at(ic, iy, ix) += g * w.at(oc, ic, ky, kx);
                        }
                    }
            }
}

}  // namespace tadp::nn
