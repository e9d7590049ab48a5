#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "tadp/tensor.hpp"

namespace tadp::nn {

// Reverse-mode tape. Nodes hold their parents, so releasing the loss frees the
// graph; parameters are long-lived nodes with no parents. Ops collapse to
// constants when no input requires grad, which keeps pure inference tape-free.
struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool has_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void()> backprop;
    std::string name;
};

using Var = std::shared_ptr<Node>;

Var constant(Tensor v);
Var param(Tensor v, std::string name = "");

void accum_grad(Node* n, const Tensor& g);
void backward(const Var& root);

Var vadd(const Var& a, const Var& b);
Var vsub(const Var& a, const Var& b);
Var vmul(const Var& a, const Var& b);
Var vscale(const Var& a, float s);
Var vshift(const Var& a, float s);
Var vlog(const Var& a);
Var vrelu(const Var& a);
Var vsilu(const Var& a);
Var vsigmoid(const Var& a);
Var vmatmul(const Var& a, const Var& b);
Var vtranspose(const Var& a);
Var vadd_rowvec(const Var& x, const Var& rowv);     // [N,M] + [M]
Var vadd_chan_bias(const Var& x, const Var& bias);  // [C,H,W] + [C]
Var vconv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);
Var vreshape(const Var& x, std::vector<int> shape);
Var vslice_cols(const Var& x, int c0, int c1);
Var vconcat_channels(const std::vector<Var>& xs);
Var vconcat_rows(const std::vector<Var>& xs);
Var vupsample_bilinear(const Var& x, int oh, int ow);
Var vpixel_shuffle(const Var& x, int r);
Var vsoftmax_rows(const Var& x);
Var vmean(const Var& x);
Var vsum(const Var& x);

// N x D matrix that is mostly constant with a few rows supplied by variables
// (the learned-token path of personalization training).
Var vrows_embed(const Tensor& base, const std::vector<std::pair<int, Var>>& rows);

// logits [K, M], labels length M. Mean NLL over labels != ignore_index.
Var vcross_entropy(const Var& logits, const std::vector<std::int32_t>& labels, int ignore_index);

// Scale-invariant log loss over valid pixels. pred must be positive.
Var vsi_log_loss(const Var& pred, const Tensor& gt, const std::vector<std::uint8_t>& valid, float lambda);

Var vsmooth_l1(const Var& pred, const Tensor& target);
Var vbce_logits(const Var& logits, const Tensor& targets);

}  // namespace tadp::nn
