#include "tadp/heads.hpp"

#include <algorithm>
#include <cmath>

#include "tadp/error.hpp"
#include "tadp/rng.hpp"

namespace tadp::heads {

using nn::Tensor;
using nn::Var;

namespace {

void check_pyramid(const bb::VLayout& layout, const std::map<int, Var>& pyramid) {
    for (const auto& [div, chans] : layout.per_divisor_channels) {
        auto it = pyramid.find(div);
        if (it == pyramid.end())
            throw Error("head layout mismatch: missing scale divisor " + std::to_string(div));
        int got = it->second->value.dim(0);
        if (got != chans)
            throw Error("head layout mismatch at scale divisor " + std::to_string(div) + ": got " +
                        std::to_string(got) + " channels, expected " + std::to_string(chans));
    }
    if (pyramid.size() != layout.per_divisor_channels.size())
        throw Error("head layout mismatch: pyramid has " + std::to_string(pyramid.size()) +
                    " scales, layout declares " +
                    std::to_string(layout.per_divisor_channels.size()));
}

void seed_param(std::map<std::string, Var>& params, const std::string& name,
                std::vector<int> shape, float std_dev, std::uint64_t seed) {
    Rng rng(fnv1a64(name) ^ (seed * 0x9e3779b97f4a7c15ULL + 0x7a11c0deULL));
    Tensor t(std::move(shape));
    if (std_dev > 0.0f)
        for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.normal_f() * std_dev;
    params[name] = nn::param(std::move(t), name);
}

void seed_conv(std::map<std::string, Var>& params, const std::string& base, int o, int c, int k,
               std::uint64_t seed) {
    seed_param(params, base + ".w", {o, c, k, k}, 1.0f / std::sqrt(static_cast<float>(c * k * k)),
               seed);
    seed_param(params, base + ".b", {o}, 0.0f, seed);
}

}  // namespace

float box_iou(const DetBox& a, const DetBox& b) {
    float ix0 = std::max(a.x0, b.x0), iy0 = std::max(a.y0, b.y0);
    float ix1 = std::min(a.x1, b.x1), iy1 = std::min(a.y1, b.y1);
    float iw = std::max(0.0f, ix1 - ix0), ih = std::max(0.0f, iy1 - iy0);
    float inter = iw * ih;
    float area_a = std::max(0.0f, a.x1 - a.x0) * std::max(0.0f, a.y1 - a.y0);
    float area_b = std::max(0.0f, b.x1 - b.x0) * std::max(0.0f, b.y1 - b.y0);
    float uni = area_a + area_b - inter;
    return uni <= 0.0f ? 0.0f : inter / uni;
}

DenseHead::DenseHead(const bb::VLayout& layout, int out_channels, int width, int shuffle,
                     std::uint64_t seed, std::string prefix)
    : layout_(layout), out_channels_(out_channels), width_(width), prefix_(std::move(prefix)) {
    if (layout_.per_divisor_channels.empty()) throw ValidationError("head needs a nonempty layout");
    if (out_channels_ < 1) throw ValidationError("head output channels must be positive");
    if (width_ < 1) throw ValidationError("head width must be positive");
    int fine = layout_.common_divisor;
    shuffle_ = 1;
    while (shuffle_ * 2 <= shuffle && fine % (shuffle_ * 2) == 0) shuffle_ *= 2;

    for (const auto& [div, chans] : layout_.per_divisor_channels) {
        seed_conv(params_, prefix_ + ".lat" + std::to_string(div), width_, chans, 1, seed);
        seed_conv(params_, prefix_ + ".smooth" + std::to_string(div), width_, width_, 3, seed);
    }
    seed_conv(params_, prefix_ + ".fuse", width_, width_, 3, seed);
    seed_conv(params_, prefix_ + ".cls", out_channels_ * shuffle_ * shuffle_, width_, 1, seed);
}

Var DenseHead::p(const std::string& name, bool train) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw Error("missing head parameter " + name);
    return train ? it->second : nn::constant(it->second->value);
}

Var DenseHead::forward(const std::map<int, Var>& pyramid, bool train) const {
    check_pyramid(layout_, pyramid);
    Var merged;
    // top-down: coarsest first so every scale feeds the fine-grid map
    for (auto it = layout_.per_divisor_channels.rbegin(); it != layout_.per_divisor_channels.rend();
         ++it) {
        int div = it->first;
        std::string d = std::to_string(div);
        const Var& level = pyramid.at(div);
        Var t = nn::vconv2d(level, p(prefix_ + ".lat" + d + ".w", train),
                            p(prefix_ + ".lat" + d + ".b", train), 1, 0);
        if (merged)
            t = nn::vadd(t, nn::vupsample_bilinear(merged, level->value.dim(1), level->value.dim(2)));
        t = nn::vrelu(nn::vconv2d(t, p(prefix_ + ".smooth" + d + ".w", train),
                                  p(prefix_ + ".smooth" + d + ".b", train), 1, 1));
        merged = t;
    }
    merged = nn::vrelu(nn::vconv2d(merged, p(prefix_ + ".fuse.w", train),
                                   p(prefix_ + ".fuse.b", train), 1, 1));
    Var out = nn::vconv2d(merged, p(prefix_ + ".cls.w", train), p(prefix_ + ".cls.b", train), 1, 0);
    if (shuffle_ > 1) out = nn::vpixel_shuffle(out, shuffle_);
    int full_h = merged->value.dim(1) * layout_.common_divisor;
    int full_w = merged->value.dim(2) * layout_.common_divisor;
    if (out->value.dim(1) != full_h || out->value.dim(2) != full_w)
        out = nn::vupsample_bilinear(out, full_h, full_w);
    return out;
}

SegHead::SegHead(const bb::VLayout& layout, int num_classes, int width, int shuffle,
                 std::uint64_t seed)
    : core_(layout, num_classes, width, shuffle, seed, "seg"), num_classes_(num_classes) {
    if (num_classes < 2) throw ValidationError("segmentation needs at least two classes");
}

Var SegHead::forward(const std::map<int, Var>& pyramid, bool train) const {
    return core_.forward(pyramid, train);
}

Prediction SegHead::predict(const bb::FeatureBundle& bundle) const {
    std::map<int, Var> pyramid;
    for (const auto& [div, t] : bundle.pyramid) pyramid[div] = nn::constant(t);
    Prediction pred;
    pred.task = Task::Segmentation;
    pred.dense = forward(pyramid, false)->value;
    return pred;
}

DepthHead::DepthHead(const bb::VLayout& layout, float min_depth, float max_depth, int width,
                     int shuffle, std::uint64_t seed)
    : core_(layout, 1, width, shuffle, seed, "depth"), min_depth_(min_depth), max_depth_(max_depth) {
    if (min_depth <= 0.0f || max_depth <= min_depth)
        throw ValidationError("depth range must satisfy 0 < min < max");
}

Var DepthHead::forward(const std::map<int, Var>& pyramid, bool train) const {
    Var logits = core_.forward(pyramid, train);
    Var depth = nn::vshift(nn::vscale(nn::vsigmoid(logits), max_depth_ - min_depth_), min_depth_);
    return nn::vreshape(depth, {logits->value.dim(1), logits->value.dim(2)});
}

Prediction DepthHead::predict(const bb::FeatureBundle& bundle) const {
    std::map<int, Var> pyramid;
    for (const auto& [div, t] : bundle.pyramid) pyramid[div] = nn::constant(t);
    Prediction pred;
    pred.task = Task::Depth;
    pred.dense = forward(pyramid, false)->value;
    return pred;
}

Var seg_loss(const Var& scores, const Tensor& gt_mask, int ignore_index) {
    if (scores->value.ndim() != 3) throw ValidationError("segmentation scores must be classes x H x W");
    if (gt_mask.ndim() != 2 || gt_mask.dim(0) != scores->value.dim(1) ||
        gt_mask.dim(1) != scores->value.dim(2))
        throw ValidationError("mask shape " + gt_mask.shape_str() + " does not match scores " +
                              scores->value.shape_str());
    int k = scores->value.dim(0);
    std::vector<std::int32_t> labels(static_cast<size_t>(gt_mask.numel()));
    for (std::int64_t i = 0; i < gt_mask.numel(); ++i) {
        long v = std::lround(gt_mask[i]);
        if (v != ignore_index && (v < 0 || v >= k))
            throw ValidationError("segmentation label " + std::to_string(v) + " outside 0.." +
                                  std::to_string(k - 1));
        labels[static_cast<size_t>(i)] = static_cast<std::int32_t>(v);
    }
    Var flat = nn::vreshape(scores, {k, scores->value.dim(1) * scores->value.dim(2)});
    return nn::vcross_entropy(flat, labels, ignore_index);
}

Var depth_loss(const Var& pred, const Tensor& gt, float lambda) {
    if (pred->value.numel() != gt.numel())
        throw ValidationError("depth prediction and ground truth sizes differ");
    std::vector<std::uint8_t> valid(static_cast<size_t>(gt.numel()));
    for (std::int64_t i = 0; i < gt.numel(); ++i)
        valid[static_cast<size_t>(i)] = gt[i] > 0.0f && std::isfinite(gt[i]) ? 1 : 0;
    return nn::vsi_log_loss(pred, gt, valid, lambda);
}

// ---- detection ----

AnchorDetectionHead::AnchorDetectionHead(const bb::VLayout& layout, DetectionConfig cfg,
                                         std::uint64_t seed)
    : layout_(layout), cfg_(std::move(cfg)) {
    if (layout_.per_divisor_channels.empty()) throw ValidationError("head needs a nonempty layout");
    if (cfg_.num_classes < 1) throw ValidationError("detection needs at least one class");
    if (cfg_.width < 1) throw ValidationError("detection width must be positive");
    for (float s : cfg_.anchor_sizes)
        if (s <= 0.0f) throw ValidationError("anchor sizes must be positive");
    int a = static_cast<int>(cfg_.anchor_sizes.size());
    if (a == 0) return;  // degenerate config: no parameters, no proposals
    int c_fine = layout_.per_divisor_channels.front().second;
    seed_conv(params_, "det.trunk", cfg_.width, c_fine, 3, seed);
    seed_conv(params_, "det.obj", a, cfg_.width, 1, seed);
    seed_conv(params_, "det.box", 4 * a, cfg_.width, 1, seed);
    seed_conv(params_, "det.cls", a * cfg_.num_classes, cfg_.width, 1, seed);
}

Var AnchorDetectionHead::p(const std::string& name, bool train) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw Error("missing head parameter " + name);
    return train ? it->second : nn::constant(it->second->value);
}

AnchorDetectionHead::RawMaps AnchorDetectionHead::raw_maps(const std::map<int, Var>& pyramid,
                                                           bool train) const {
    check_pyramid(layout_, pyramid);
    const Var& fine = pyramid.at(layout_.common_divisor);
    Var t = nn::vrelu(nn::vconv2d(fine, p("det.trunk.w", train), p("det.trunk.b", train), 1, 1));
    RawMaps m;
    m.obj = nn::vconv2d(t, p("det.obj.w", train), p("det.obj.b", train), 1, 0);
    m.box = nn::vconv2d(t, p("det.box.w", train), p("det.box.b", train), 1, 0);
    m.cls = nn::vconv2d(t, p("det.cls.w", train), p("det.cls.b", train), 1, 0);
    m.h = fine->value.dim(1);
    m.w = fine->value.dim(2);
    return m;
}

AnchorDetectionHead::Assignment AnchorDetectionHead::assign(const std::vector<DetBox>& gt, int h,
                                                            int w) const {
    int a_count = static_cast<int>(cfg_.anchor_sizes.size());
    float d = static_cast<float>(layout_.common_divisor);
    Assignment out;
    out.cls_label.assign(static_cast<size_t>(a_count * h * w), -1);
    out.box_target = Tensor::zeros({4 * a_count, h, w});
    out.box_mask = Tensor::zeros({4 * a_count, h, w});
    out.obj_target = Tensor::zeros({a_count, h, w});

    auto anchor_box = [&](int a, int y, int x) {
        float cx = (x + 0.5f) * d, cy = (y + 0.5f) * d;
        float s = cfg_.anchor_sizes[static_cast<size_t>(a)];
        return DetBox{cx - s / 2, cy - s / 2, cx + s / 2, cy + s / 2, 0, 1.0f};
    };
    auto mark_positive = [&](int a, int y, int x, const DetBox& g) {
        float cx = (x + 0.5f) * d, cy = (y + 0.5f) * d;
        float s = cfg_.anchor_sizes[static_cast<size_t>(a)];
        float gcx = (g.x0 + g.x1) / 2, gcy = (g.y0 + g.y1) / 2;
        float gw = std::max(1e-3f, g.x1 - g.x0), gh = std::max(1e-3f, g.y1 - g.y0);
        out.box_target.at(4 * a + 0, y, x) = (gcx - cx) / d;
        out.box_target.at(4 * a + 1, y, x) = (gcy - cy) / d;
        out.box_target.at(4 * a + 2, y, x) = std::log(gw / s);
        out.box_target.at(4 * a + 3, y, x) = std::log(gh / s);
        for (int i = 0; i < 4; ++i) out.box_mask.at(4 * a + i, y, x) = 1.0f;
        out.obj_target.at(a, y, x) = 1.0f;
        if (out.cls_label[static_cast<size_t>((a * h + y) * w + x)] < 0) ++out.positives;
        out.cls_label[static_cast<size_t>((a * h + y) * w + x)] = g.cls;
    };

    for (const auto& g : gt) {
        if (g.cls < 0 || g.cls >= cfg_.num_classes)
            throw ValidationError("detection target class " + std::to_string(g.cls) +
                                  " outside 0.." + std::to_string(cfg_.num_classes - 1));
        int best_a = 0, best_y = 0, best_x = 0;
        float best_iou = -1.0f;
        for (int a = 0; a < a_count; ++a)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    float iou = box_iou(anchor_box(a, y, x), g);
                    if (iou > best_iou) {
                        best_iou = iou;
                        best_a = a;
                        best_y = y;
                        best_x = x;
                    }
                    if (iou > cfg_.positive_iou) mark_positive(a, y, x, g);
                }
        mark_positive(best_a, best_y, best_x, g);  // every target owns its best anchor
    }
    return out;
}

Var AnchorDetectionHead::loss(const std::map<int, Var>& pyramid, const std::vector<DetBox>& gt) {
    int a_count = static_cast<int>(cfg_.anchor_sizes.size());
    if (a_count == 0) {
        check_pyramid(layout_, pyramid);
        return nn::constant(Tensor::zeros({1}));
    }
    RawMaps m = raw_maps(pyramid, true);
    Assignment asn = assign(gt, m.h, m.w);

    Var total = nn::vbce_logits(m.obj, asn.obj_target);
    {
        Var masked = nn::vmul(m.box, nn::constant(asn.box_mask));
        Var l1 = nn::vsmooth_l1(masked, asn.box_target);
        float numel = static_cast<float>(asn.box_target.numel());
        total = nn::vadd(total, nn::vscale(l1, numel / std::max(1, 4 * asn.positives)));
    }
    if (asn.positives > 0) {
        int hw = m.h * m.w;
        Var flat = nn::vtranspose(nn::vreshape(m.cls, {a_count * cfg_.num_classes, hw}));
        Var cls_total;
        int counted = 0;
        for (int a = 0; a < a_count; ++a) {
            std::vector<std::int32_t> labels(
                asn.cls_label.begin() + static_cast<std::ptrdiff_t>(a) * hw,
                asn.cls_label.begin() + static_cast<std::ptrdiff_t>(a + 1) * hw);
            int n_a = 0;
            for (auto v : labels)
                if (v >= 0) ++n_a;
            if (n_a == 0) continue;
            Var slice = nn::vtranspose(
                nn::vslice_cols(flat, a * cfg_.num_classes, (a + 1) * cfg_.num_classes));
            Var ce = nn::vscale(nn::vcross_entropy(slice, labels, -1), static_cast<float>(n_a));
            cls_total = cls_total ? nn::vadd(cls_total, ce) : ce;
            counted += n_a;
        }
        if (cls_total) total = nn::vadd(total, nn::vscale(cls_total, 1.0f / counted));
    }
    return total;
}

Prediction AnchorDetectionHead::forward(const bb::FeatureBundle& bundle) {
    std::map<int, Var> pyramid;
    for (const auto& [div, t] : bundle.pyramid) pyramid[div] = nn::constant(t);
    check_pyramid(layout_, pyramid);

    Prediction pred;
    pred.task = Task::Detection;
    int a_count = static_cast<int>(cfg_.anchor_sizes.size());
    if (a_count == 0) return pred;  // no anchors, no proposals

    RawMaps m = raw_maps(pyramid, false);
    const Tensor& obj = m.obj->value;
    const Tensor& box = m.box->value;
    const Tensor& cls = m.cls->value;
    float d = static_cast<float>(layout_.common_divisor);
    float img_w = m.w * d, img_h = m.h * d;

    std::vector<DetBox> raw;
    for (int a = 0; a < a_count; ++a)
        for (int y = 0; y < m.h; ++y)
            for (int x = 0; x < m.w; ++x) {
                float score_obj = 1.0f / (1.0f + std::exp(-obj.at(a, y, x)));
                if (score_obj <= cfg_.score_threshold) continue;
                int best_c = 0;
                float mx = cls.at(a * cfg_.num_classes, y, x);
                for (int c = 1; c < cfg_.num_classes; ++c)
                    if (cls.at(a * cfg_.num_classes + c, y, x) > mx) {
                        mx = cls.at(a * cfg_.num_classes + c, y, x);
                        best_c = c;
                    }
                float z = 0.0f;
                for (int c = 0; c < cfg_.num_classes; ++c)
                    z += std::exp(cls.at(a * cfg_.num_classes + c, y, x) - mx);
                float p_cls = 1.0f / z;

                float dx = box.at(4 * a + 0, y, x), dy = box.at(4 * a + 1, y, x);
                float dw = std::clamp(box.at(4 * a + 2, y, x), -4.0f, 4.0f);
                float dh = std::clamp(box.at(4 * a + 3, y, x), -4.0f, 4.0f);
                float s = cfg_.anchor_sizes[static_cast<size_t>(a)];
                float cx = (x + 0.5f) * d + dx * d, cy = (y + 0.5f) * d + dy * d;
                float bw = s * std::exp(dw), bh = s * std::exp(dh);
                DetBox b;
                b.x0 = std::clamp(cx - bw / 2, 0.0f, img_w);
                b.x1 = std::clamp(cx + bw / 2, 0.0f, img_w);
                b.y0 = std::clamp(cy - bh / 2, 0.0f, img_h);
                b.y1 = std::clamp(cy + bh / 2, 0.0f, img_h);
                b.cls = best_c;
                b.score = score_obj * p_cls;
                if (b.x1 > b.x0 && b.y1 > b.y0) raw.push_back(b);
            }

    std::sort(raw.begin(), raw.end(), [](const DetBox& a, const DetBox& b) { return a.score > b.score; });
    std::vector<bool> dead(raw.size(), false);
    for (size_t i = 0; i < raw.size(); ++i) {
        if (dead[i]) continue;
        pred.boxes.push_back(raw[i]);
        for (size_t j = i + 1; j < raw.size(); ++j)
            if (!dead[j] && raw[j].cls == raw[i].cls && box_iou(raw[i], raw[j]) > cfg_.nms_iou)
                dead[j] = true;
    }
    return pred;
}

std::unique_ptr<DetectionHead> make_detection_head(const bb::VLayout& layout,
                                                   const DetectionConfig& cfg, std::uint64_t seed) {
    return std::make_unique<AnchorDetectionHead>(layout, cfg, seed);
}

}  // namespace tadp::heads
