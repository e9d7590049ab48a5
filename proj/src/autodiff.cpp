#include "tadp/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace tadp::nn {

Var constant(Tensor v) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    return n;
}

Var param(Tensor v, std::string name) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    n->requires_grad = true;
    n->name = std::move(name);
    return n;
}

void accum_grad(Node* n, const Tensor& g) {
    if (!n->has_grad) {
        n->grad = Tensor::zeros(n->value.shape());
        n->has_grad = true;
    }
    float* dst = n->grad.data();
    const float* src = g.data();
    std::int64_t cnt = g.numel();
    for (std::int64_t i = 0; i < cnt; ++i) dst[i] += src[i];
}

namespace {

bool any_requires_grad(const std::vector<Var>& xs) {
    for (const auto& x : xs)
        if (x->requires_grad) return true;
    return false;
}

Var make_op(Tensor value, std::vector<Var> parents, std::function<void()> backprop) {
    if (!any_requires_grad(parents)) return constant(std::move(value));
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backprop = std::move(backprop);
    return n;
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
    if (!same_shape(a->value, b->value))
        throw ValidationError(std::string(op) + ": shape mismatch " + a->value.shape_str() + " vs " +
                              b->value.shape_str());
}

}  // namespace

void backward(const Var& root) {
    // iterative post-order topo sort over the grad-requiring subgraph
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(root.get(), 0);
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node* p = node->parents[idx].get();
            ++idx;
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    accum_grad(root.get(), Tensor::full(root->value.shape(), 1.0f));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backprop && n->has_grad) n->backprop();
    }
}

Var vadd(const Var& a, const Var& b) {
    check_same_shape(a, b, "vadd");
    Tensor out = a->value;
    const float* bp = b->value.data();
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += bp[i];
    Node* ap = a.get();
    Node* bn = b.get();
    auto res = make_op(std::move(out), {a, b}, nullptr);
    if (res->requires_grad) {
        Node* rp = res.get();
        res->backprop = [ap, bn, rp] {
            if (ap->requires_grad) accum_grad(ap, rp->grad);
            if (bn->requires_grad) accum_grad(bn, rp->grad);
        };
    }
    return res;
}

Var vsub(const Var& a, const Var& b) {
    check_same_shape(a, b, "vsub");
    Tensor out = a->value;
    const float* bp = b->value.data();
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] -= bp[i];
    Node* ap = a.get();
    Node* bn = b.get();
    auto res = make_op(std::move(out), {a, b}, nullptr);
    if (res->requires_grad) {
        Node* rp = res.get();
        res->backprop = [ap, bn, rp] {
            if (ap->requires_grad) accum_grad(ap, rp->grad);
            if (bn->requires_grad) {
                Tensor neg = rp->grad;
                for (std::int64_t i = 0; i < neg.numel(); ++i) neg[i] = -neg[i];
                accum_grad(bn, neg);
            }
        };
    }
    return res;
}

Var vmul(const Var& a, const Var& b) {
    check_same_shape(a, b, "vmul");
    Tensor out = a->value;
    const float* bp = b->value.data();
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= bp[i];
    Node* ap = a.get();
    Node* bn = b.get();
    Tensor av = a->value, bv = b->value;
    auto res = make_op(std::move(out), {a, b}, nullptr);
    if (res->requires_grad) {
        Node* rp = res.get();
        res->backprop = [ap, bn, rp, av, bv] {
            if (ap->requires_grad) {
                Tensor g = rp->grad;
                for (std::int64_t i = 0; i < g.numel(); ++i) g[i] *= bv[i];
                accum_grad(ap, g);
            }
            if (bn->requires_grad) {
                Tensor g = rp->grad;
                for (std::int64_t i = 0; i < g.numel(); ++i) g[i] *= av[i];
                accum_grad(bn, g);
            }
        };
    }
    return res;
}

Var vscale(const Var& a, float s) {
    Tensor out = a->value;
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= s;
    Node* ap = a.get();
    auto res = make_op(std::move(out), {a}, nullptr);
    if (res->requires_grad) {
        Node* rp = res.get();
        res->backprop = [ap, rp, s] {
            Tensor g = rp->grad;
            for (std::int64_t i = 0; i < g.numel(); ++i) g[i] *= s;
            accum_grad(ap, g);
        };
    }
    return res;
}

Var vshift(const Var& a, float s) {
    Tensor out = a->value;
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += s;
    Node* ap = a.get();
    auto res = make_op(std::move(out), {a}, nullptr);
    if (res->requires_grad) {
        Node* rp = res.get();
        res->backprop = [ap, rp] { accum_grad(ap, rp->grad); };
    }
    return res;
}

Var vlog(const Var& a) {
    Tensor out = a->value;
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::log(out[i]);
    Node* ap = a.get();
    Tensor av = a->value;
    auto res = make_op(std::move(out), {a}, nullptr);
    if (res->requires_grad) {
        Node* rp = res.get();
        res->backprop = [ap, rp, av] {
            Tensor g = rp->grad;
            for (std::int64_t i = 0; i < g.numel(); ++i) g[i] /= av[i];
            accum_grad(ap, g);
        };
    }
    return res;
}

Var vrelu(const Var& a) {
    Tensor out = a->value;
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::max(0.0f, out[i]);
    Node* ap = a.get();
    Tensor av = a->value;
    auto res = make_op(std::move(out), {a}, nullptr);
    if (res->requires_grad) {
        Node* rp = res.get();
        res->backprop = [ap, rp, av] {
            Tensor g = rp->grad;
            for (std::int64_t i = 0; i < g.numel(); ++i)
                if (av[i] <= 0.0f) g[i] = 0.0f;
            accum_grad(ap, g);
        };
    }
    return res;
}

Var vsilu(const Var& a) {
    Tensor out = a->value;
    for (std::int64_t i = 0; i < out.numel(); ++i) {
        float x = out[i];
        out[i] = x / (1.0f + std::exp(-x));
    }
    Node* ap = a.get();
    Tensor av = a->value;
    auto res = make_op(std::move(out), {a}, nullptr);
    if (res->requires_grad) {
        Node* rp = res.get();
        res->backprop = [ap, rp, av] {
            Tensor g = rp->grad;
            for (std::int64_t i = 0; i < g.numel(); ++i) {
                float x = av[i];
                float s = 1.0f / (1.0f + std::exp(-x));
                g[i] *= s * (1.0f + x * (1.0f - s));
            }
            accum_grad(ap, g);
        };
    }
    return res;
}

Var vsigmoid(const Var& a) {
    Tensor out = a->value;
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = 1.0f / (1.0f + std::exp(-out[i]));
    Node* ap = a.get();
    Tensor ov = out;
    auto res = make_op(std::move(out), {a}, nullptr);
    if (res->requires_grad) {
        Node* rp = res.get();
        res->backprop = [ap, rp, ov] {
            Tensor g = rp->grad;
            for (std::int64_t i = 0; i < g.numel(); ++i) g[i] *= ov[i] * (1.0f - ov[i]);
            accum_grad(ap, g);
        };
    }
    return res;
}

Var vmatmul(const Var& a, const Var& b) {
    Tensor out = matmul(a->value, b->value);
    Node* ap = a.get();
    Node* bn = b.get();
    Tensor av = a->value, bv = b->value;
    auto res = make_op(std::move(out), {a, b}, nullptr);
    if (res->requires_grad) {
        Node* rp = res.get();
        res->backprop = [ap, bn, rp, av, bv] {
            if (ap->requires_grad) accum_grad(ap, matmul(rp->grad, transpose2d(bv)));
            if (bn->requires_grad) accum_grad(bn, matmul(transpose2d(av), rp->grad));
        };
    }
    return res;
}

Var vtranspose(const Var& a) {
    Tensor out = transpose2d(a->value);
    Node* ap = a.get();
    auto res = make_op(std::move(out), {a}, nullptr);
    if (res->requires_grad) {
        Node* rp = res.get();
        res->backprop = [ap, rp] { accum_grad(ap, transpose2d(rp->grad)); };
    }
    return res;
}

Var vadd_rowvec(const Var& x, const Var& rowv) {
    int n = x->value.dim(0), m = x->value.dim(1);
    if (rowv->value.numel() != m) throw ValidationError("vadd_rowvec: width mismatch");
    Tensor out = x->value;
    const float* v = rowv->value.data();
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) out.at(i, j) += v[j];
    Node* xp = x.get();
    Node* vp = rowv.get();
    auto res = make_op(std::move(out), {x, rowv}, nullptr);
    if (res->requires_grad) {
        Node* rp = res.get();
        res->backprop = [xp, vp, rp, n, m] {
            if (xp->requires_grad) accum_grad(xp, rp->grad);
            if (vp->requires_grad) {
                Tensor g({m});
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < m; ++j) g[j] += rp->grad.at(i, j);
                accum_grad(vp, g.reshaped(std::vector<int>(vp->value.shape())));
            }
        };
    }
    return res;
}

Var vadd_chan_bias(const Var& x, const Var& bias) {
    int c = x->value.dim(0), h = x->value.dim(1), w = x->value.dim(2);
    if (bias->value.numel() != c) throw ValidationError("vadd_chan_bias: channel mismatch");
    Tensor out = x->value;
    for (int ci = 0; ci < c; ++ci) {
        float bv = bias->value[ci];
        float* p = out.data() + static_cast<size_t>(ci) * h * w;
        for (int i = 0; i < h * w; ++i) p[i] += bv;
    }
    Node* xp = x.get();
    Node* bp = bias.get();
    auto res = make_op(std::move(out), {x, bias}, nullptr);
    if (res->requires_grad) {
        Node* rp = res.get();
        res->backprop = [xp, bp, rp, c, h, w] {
            if (xp->requires_grad) accum_grad(xp, rp->grad);
            if (bp->requires_grad) {
                Tensor g({c});
                for (int ci = 0; ci < c; ++ci) {
                    const float* p = rp->grad.data() + static_cast<size_t>(ci) * h * w;
                    float acc = 0.0f;
                    for (int i = 0; i < h * w; ++i) acc += p[i];
                    g[ci] = acc;
                }
                accum_grad(bp, g.reshaped(std::vector<int>(bp->value.shape())));
            }
        };
    }
    return res;
}

Var vconv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
    Tensor out = conv2d(x->value, w->value, b ? b->value : Tensor(), stride, pad);
    Node* xp = x.get();
    Node* wp = w.get();
    Node* bp = b ? b.get() : nullptr;
    Tensor xv = x->value, wv = w->value;
    std::vector<Var> parents{x, w};
    if (b) parents.push_back(b);
    auto res = make_op(std::move(out), std::move(parents), nullptr);
    if (res->requires_grad) {
        Node* rp = res.get();
        res->backprop = [xp, wp, bp, rp, xv, wv, stride, pad] {
            Tensor gx, gw, gb;
            Tensor* pgx = nullptr;
            Tensor* pgw = nullptr;
            Tensor* pgb = nullptr;
            if (xp->requires_grad) {
                gx = Tensor::zeros(xv.shape());
                pgx = &gx;
            }
            if (wp->requires_grad) {
                gw = Tensor::zeros(wv.shape());
                pgw = &gw;
            }
            if (bp && bp->requires_grad) {
                gb = Tensor::zeros({wv.dim(0)});
                pgb = &gb;
            }
            conv2d_backward(xv, wv, rp->grad, stride, pad, pgx, pgw, pgb);
            if (pgx) accum_grad(xp, gx);
            if (pgw) accum_grad(wp, gw);
            if (pgb) accum_grad(bp, gb.reshaped(std::vector<int>(bp->value.shape())));
        };
    }
    return res;
}

Var vreshape(const Var& x, std::vector<int> shape) {
    Tensor out = x->value.reshaped(shape);
    Node* xp = x.get();
    std::vector<int> in_shape = x->value.shape();
    auto res = make_op(std::move(out), {x}, nullptr);
    if (res->requires_grad) {
        Node* rp = res.get();
        res->backprop = [xp, rp, in_shape] { accum_grad(xp, rp->grad.reshaped(in_shape)); };
    }
    return res;
}

Var vslice_cols(const Var& x, int c0, int c1) {
    int n = x->value.dim(0), m = x->value.dim(1);
    if (c0 < 0 || c1 > m || c0 >= c1) throw ValidationError("vslice_cols: bad range");
    Tensor out({n, c1 - c0});
    for (int i = 0; i < n; ++i)
        for (int j = c0; j < c1; ++j) out.at(i, j - c0) = x->value.at(i, j);
    Node* xp = x.get();
    auto res = make_op(std::move(out), {x}, nullptr);
    if (res->requires_grad) {
        Node* rp = res.get();
        res->backprop = [xp, rp, n, m, c0, c1] {
            Tensor g({n, m});
            for (int i = 0; i < n; ++i)
                for (int j = c0; j < c1; ++j) g.at(i, j) = rp->grad.at(i, j - c0);
            accum_grad(xp, g);
        };
    }
    return res;
}

Var vconcat_channels(const std::vector<Var>& xs) {
    if (xs.empty()) throw ValidationError("vconcat_channels: empty input");
    int h = xs[0]->value.dim(1), w = xs[0]->value.dim(2);
    int c = 0;
    for (const auto& x : xs) {
        if (x->value.ndim() != 3 || x->value.dim(1) != h || x->value.dim(2) != w)
            throw ValidationError("vconcat_channels: spatial mismatch");
        c += x->value.dim(0);
    }
    Tensor out({c, h, w});
    size_t off = 0;
    for (const auto& x : xs) {
        std::copy(x->value.data(), x->value.data() + x->value.numel(), out.data() + off);
        off += static_cast<size_t>(x->value.numel());
    }
    std::vector<Node*> raw;
    for (const auto& x : xs) raw.push_back(x.get());
    auto res = make_op(std::move(out), xs, nullptr);
    if (res->requires_grad) {
        Node* rp = res.get();
        res->backprop = [raw, rp] {
            size_t off2 = 0;
            for (Node* x : raw) {
                std::int64_t cnt = x->value.numel();
                if (x->requires_grad) {
                    Tensor g(x->value.shape());
                    std::copy(rp->grad.data() + off2, rp->grad.data() + off2 + cnt, g.data());
                    accum_grad(x, g);
                }
                off2 += static_cast<size_t>(cnt);
            }
        };
    }
    return res;
}

Var vconcat_rows(const std::vector<Var>& xs) {
    if (xs.empty()) throw ValidationError("vconcat_rows: empty input");
    int m = xs[0]->value.dim(1);
    int n = 0;
    for (const auto& x : xs) {
        if (x->value.ndim() != 2 || x->value.dim(1) != m) throw ValidationError("vconcat_rows: width mismatch");
        n += x->value.dim(0);
    }
    Tensor out({n, m});
    size_t off = 0;
    for (const auto& x : xs) {
        std::copy(x->value.data(), x->value.data() + x->value.numel(), out.data() + off);
        off += static_cast<size_t>(x->value.numel());
    }
    std::vector<Node*> raw;
    for (const auto& x : xs) raw.push_back(x.get());
    auto res = make_op(std::move(out), xs, nullptr);
    if (res->requires_grad) {
        Node* rp = res.get();
        res->backprop = [raw, rp] {
            size_t off2 = 0;
            for (Node* x : raw) {
                std::int64_t cnt = x->value.numel();
                if (x->requires_grad) {
                    Tensor g(x->value.shape());
                    std::copy(rp->grad.data() + off2, rp->grad.data() + off2 + cnt, g.data());
                    accum_grad(x, g);
                }
                off2 += static_cast<size_t>(cnt);
            }
        };
    }
    return res;
}

Var vupsample_bilinear(const Var& x, int oh, int ow) {
    Tensor out = resize_bilinear(x->value, oh, ow);
    Node* xp = x.get();
    std::vector<int> in_shape = x->value.shape();
    auto res = make_op(std::move(out), {x}, nullptr);
    if (res->requires_grad) {
        Node* rp = res.get();
        res->backprop = [xp, rp, in_shape] {
            Tensor g = Tensor::zeros(in_shape);
            resize_bilinear_backward(rp->grad, g);
            accum_grad(xp, g);
        };
    }
    return res;
}

Var vpixel_shuffle(const Var& x, int r) {
    int c = x->value.dim(0), h = x->value.dim(1), w = x->value.dim(2);
    if (c % (r * r) != 0) throw ValidationError("vpixel_shuffle: channels not divisible by r^2");
    int oc = c / (r * r);
    Tensor out({oc, h * r, w * r});
    for (int co = 0; co < oc; ++co)
        for (int dy = 0; dy < r; ++dy)
            for (int dx = 0; dx < r; ++dx) {
                int ci = (co * r + dy) * r + dx;
                for (int y = 0; y < h; ++y)
                    for (int xx = 0; xx < w; ++xx) out.at(co, y * r + dy, xx * r + dx) = x->value.at(ci, y, xx);
            }
    Node* xp = x.get();
    auto res = make_op(std::move(out), {x}, nullptr);
    if (res->requires_grad) {
        Node* rp = res.get();
        res->backprop = [xp, rp, oc, h, w, r] {
            Tensor g({oc * r * r, h, w});
            for (int co = 0; co < oc; ++co)
                for (int dy = 0; dy < r; ++dy)
                    for (int dx = 0; dx < r; ++dx) {
                        int ci = (co * r + dy) * r + dx;
                        for (int y = 0; y < h; ++y)
                            for (int xx = 0; xx < w; ++xx) g.at(ci, y, xx) = rp->grad.at(co, y * r + dy, xx * r + dx);
                    }
            accum_grad(xp, g);
        };
    }
    return res;
}

Var vsoftmax_rows(const Var& x) {
    int n = x->value.dim(0), m = x->value.dim(1);
    Tensor out({n, m});
    for (int i = 0; i < n; ++i) {
        const float* row = x->value.data() + static_cast<size_t>(i) * m;
        float* orow = out.data() + static_cast<size_t>(i) * m;
        float mx = row[0];
        for (int j = 1; j < m; ++j) mx = std::max(mx, row[j]);
        float z = 0.0f;
        for (int j = 0; j < m; ++j) {
            orow[j] = std::exp(row[j] - mx);
            z += orow[j];
        }
        for (int j = 0; j < m; ++j) orow[j] /= z;
    }
    Node* xp = x.get();
    Tensor ov = out;
    auto res = make_op(std::move(out), {x}, nullptr);
    if (res->requires_grad) {
        Node* rp = res.get();
        res->backprop = [xp, rp, ov, n, m] {
            Tensor g({n, m});
            for (int i = 0; i < n; ++i) {
                const float* s = ov.data() + static_cast<size_t>(i) * m;
                const float* go = rp->grad.data() + static_cast<size_t>(i) * m;
                float dot = 0.0f;
                for (int j = 0; j < m; ++j) dot += go[j] * s[j];
                float* gr = g.data() + static_cast<size_t>(i) * m;
                for (int j = 0; j < m; ++j) gr[j] = s[j] * (go[j] - dot);
            }
            accum_grad(xp, g);
        };
    }
    return res;
}

Var vmean(const Var& x) {
    float acc = 0.0f;
    for (std::int64_t i = 0; i < x->value.numel(); ++i) acc += x->value[i];
    float inv_n = 1.0f / static_cast<float>(x->value.numel());
    Tensor out({1});
    out[0] = acc * inv_n;
    Node* xp = x.get();
    std::vector<int> in_shape = x->value.shape();
    auto res = make_op(std::move(out), {x}, nullptr);
    if (res->requires_grad) {
        Node* rp = res.get();
        res->backprop = [xp, rp, in_shape, inv_n] {
            accum_grad(xp, Tensor::full(in_shape, rp->grad[0] * inv_n));
        };
    }
    return res;
}

Var vsum(const Var& x) {
    float acc = 0.0f;
    for (std::int64_t i = 0; i < x->value.numel(); ++i) acc += x->value[i];
    Tensor out({1});
    out[0] = acc;
    Node* xp = x.get();
    std::vector<int> in_shape = x->value.shape();
    auto res = make_op(std::move(out), {x}, nullptr);
    if (res->requires_grad) {
        Node* rp = res.get();
        res->backprop = [xp, rp, in_shape] { accum_grad(xp, Tensor::full(in_shape, rp->grad[0])); };
    }
    return res;
}

Var vrows_embed(const Tensor& base, const std::vector<std::pair<int, Var>>& rows) {
    int n = base.dim(0), d = base.dim(1);
    Tensor out = base;
    for (const auto& [idx, v] : rows) {
        if (idx < 0 || idx >= n) throw ValidationError("vrows_embed: row index out of range");
        if (v->value.numel() != d) throw ValidationError("vrows_embed: row width mismatch");
        for (int j = 0; j < d; ++j) out.at(idx, j) = v->value[j];
    }
    std::vector<Var> parents;
    for (const auto& [idx, v] : rows) parents.push_back(v);
    std::vector<std::pair<int, Node*>> raw;
    for (const auto& [idx, v] : rows) raw.emplace_back(idx, v.get());
    auto res = make_op(std::move(out), std::move(parents), nullptr);
    if (res->requires_grad) {
        Node* rp = res.get();
        res->backprop = [raw, rp, d] {
            for (const auto& [idx, v] : raw) {
                if (!v->requires_grad) continue;
                Tensor g(v->value.shape());
                for (int j = 0; j < d; ++j) g[j] = rp->grad.at(idx, j);
                accum_grad(v, g);
            }
        };
    }
    return res;
}

Var vcross_entropy(const Var& logits, const std::vector<std::int32_t>& labels, int ignore_index) {
    int k = logits->value.dim(0);
    int m = logits->value.dim(1);
    if (static_cast<int>(labels.size()) != m) throw ValidationError("vcross_entropy: label count mismatch");
    int n_valid = 0;
    double acc = 0.0;
    Tensor softmax({k, m});
    for (int j = 0; j < m; ++j) {
        float mx = logits->value.at(0, j);
        for (int i = 1; i < k; ++i) mx = std::max(mx, logits->value.at(i, j));
        float z = 0.0f;
        for (int i = 0; i < k; ++i) {
            float e = std::exp(logits->value.at(i, j) - mx);
            softmax.at(i, j) = e;
            z += e;
        }
        for (int i = 0; i < k; ++i) softmax.at(i, j) /= z;
        std::int32_t y = labels[j];
        if (y == ignore_index) continue;
        if (y < 0 || y >= k) throw ValidationError("vcross_entropy: label out of range");
        ++n_valid;
        acc += -std::log(std::max(softmax.at(y, j), 1e-30f));
    }
    if (n_valid == 0) throw ValidationError("vcross_entropy: every pixel is ignored");
    Tensor out({1});
    out[0] = static_cast<float>(acc / n_valid);
    Node* lp = logits.get();
    auto res = make_op(std::move(out), {logits}, nullptr);
    if (res->requires_grad) {
        Node* rp = res.get();
        Tensor sm = softmax;
        std::vector<std::int32_t> lab = labels;
        res->backprop = [lp, rp, sm, lab, k, m, n_valid, ignore_index] {
            float g0 = rp->grad[0] / static_cast<float>(n_valid);
            Tensor g({k, m});
            for (int j = 0; j < m; ++j) {
                std::int32_t y = lab[j];
                if (y == ignore_index) continue;
                for (int i = 0; i < k; ++i) g.at(i, j) = g0 * (sm.at(i, j) - (i == y ? 1.0f : 0.0f));
            }
            accum_grad(lp, g);
        };
    }
    return res;
}

Var vsi_log_loss(const Var& pred, const Tensor& gt, const std::vector<std::uint8_t>& valid, float lambda) {
    std::int64_t n = pred->value.numel();
    if (gt.numel() != n || static_cast<std::int64_t>(valid.size()) != n)
        throw ValidationError("vsi_log_loss: shape mismatch");
    std::int64_t n_valid = 0;
    double sum_d = 0.0, sum_d2 = 0.0;
    std::vector<float> d(static_cast<size_t>(n), 0.0f);
    for (std::int64_t i = 0; i < n; ++i) {
        if (!valid[static_cast<size_t>(i)]) continue;
        float p = pred->value[i];
        float g = gt[i];
        if (!(p > 0.0f) || !(g > 0.0f)) throw ValidationError("vsi_log_loss: non-positive depth");
        float di = std::log(p) - std::log(g);
        d[static_cast<size_t>(i)] = di;
        sum_d += di;
        sum_d2 += static_cast<double>(di) * di;
        ++n_valid;
    }
    if (n_valid == 0) throw ValidationError("vsi_log_loss: zero valid pixels");
    double mean_d = sum_d / n_valid;
    double loss = sum_d2 / n_valid - lambda * mean_d * mean_d;
    Tensor out({1});
    out[0] = static_cast<float>(loss);
    Node* pp = pred.get();
    Tensor pv = pred->value;
    auto res = make_op(std::move(out), {pred}, nullptr);
    if (res->requires_grad) {
        Node* rp = res.get();
        std::vector<std::uint8_t> vmask = valid;
        res->backprop = [pp, rp, pv, d, vmask, lambda, n_valid, mean_d] {
            float g0 = rp->grad[0];
            Tensor g(pv.shape());
            float inv_n = 1.0f / static_cast<float>(n_valid);
            for (std::int64_t i = 0; i < pv.numel(); ++i) {
                if (!vmask[static_cast<size_t>(i)]) continue;
                float dd = d[static_cast<size_t>(i)];
                float dl_dd = 2.0f * inv_n * (dd - lambda * static_cast<float>(mean_d));
                g[i] = g0 * dl_dd / pv[i];
            }
            accum_grad(pp, g);
        };
    }
    return res;
}

Var vsmooth_l1(const Var& pred, const Tensor& target) {
    std::int64_t n = pred->value.numel();
    if (target.numel() != n) throw ValidationError("vsmooth_l1: shape mismatch");
    double acc = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        float diff = pred->value[i] - target[i];
        float a = std::abs(diff);
        acc += a < 1.0f ? 0.5f * diff * diff : a - 0.5f;
    }
    Tensor out({1});
    out[0] = static_cast<float>(acc / static_cast<double>(n));
    Node* pp = pred.get();
    Tensor pv = pred->value, tv = target;
    auto res = make_op(std::move(out), {pred}, nullptr);
    if (res->requires_grad) {
        Node* rp = res.get();
        res->backprop = [pp, rp, pv, tv, n] {
            float g0 = rp->grad[0] / static_cast<float>(n);
            Tensor g(pv.shape());
            for (std::int64_t i = 0; i < n; ++i) {
                float diff = pv[i] - tv[i];
                g[i] = g0 * std::clamp(diff, -1.0f, 1.0f);
            }
            accum_grad(pp, g);
        };
    }
    return res;
}

Var vbce_logits(const Var& logits, const Tensor& targets) {
    std::int64_t n = logits->value.numel();
    if (targets.numel() != n) throw ValidationError("vbce_logits: shape mismatch");
    double acc = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        float z = logits->value[i];
        float t = targets[i];
        acc += std::max(z, 0.0f) - z * t + std::log1p(std::exp(-std::abs(z)));
    }
    Tensor out({1});
    out[0] = static_cast<float>(acc / static_cast<double>(n));
    Node* lp = logits.get();
    Tensor lv = logits->value, tv = targets;
    auto res = make_op(std::move(out), {logits}, nullptr);
    if (res->requires_grad) {
        Node* rp = res.get();
        res->backprop = [lp, rp, lv, tv, n] {
            float g0 = rp->grad[0] / static_cast<float>(n);
            Tensor g(lv.shape());
            for (std::int64_t i = 0; i < n; ++i) {
                float s = 1.0f / (1.0f + std::exp(-lv[i]));
                g[i] = g0 * (s - tv[i]);
            }
            accum_grad(lp, g);
        };
    }
    return res;
}

}  // namespace tadp::nn
