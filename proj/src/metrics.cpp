#include "tadp/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "tadp/error.hpp"

namespace tadp::metrics {

using heads::DetBox;
using nn::Tensor;

MiouAccumulator::MiouAccumulator(int num_classes, int ignore_index)
    : num_classes_(num_classes), ignore_index_(ignore_index) {
    if (num_classes < 2) throw ValidationError("miou needs at least two classes");
    tp_.assign(static_cast<size_t>(num_classes), 0);
    fp_.assign(static_cast<size_t>(num_classes), 0);
    fn_.assign(static_cast<size_t>(num_classes), 0);
}

void MiouAccumulator::add(const Tensor& pred_mask, const Tensor& gt_mask) {
    if (!nn::same_shape(pred_mask, gt_mask))
        throw ValidationError("prediction mask " + pred_mask.shape_str() +
                              " does not match ground truth " + gt_mask.shape_str());
    for (std::int64_t i = 0; i < gt_mask.numel(); ++i) {
        long g = std::lround(gt_mask[i]);
        if (g == ignore_index_) continue;
        long p = std::lround(pred_mask[i]);
        if (g < 0 || g >= num_classes_)
            throw ValidationError("ground-truth label " + std::to_string(g) + " outside 0.." +
                                  std::to_string(num_classes_ - 1));
        if (p < 0 || p >= num_classes_)
            throw ValidationError("predicted label " + std::to_string(p) + " outside 0.." +
                                  std::to_string(num_classes_ - 1));
        if (p == g) {
            ++tp_[static_cast<size_t>(g)];
        } else {
            ++fp_[static_cast<size_t>(p)];
            ++fn_[static_cast<size_t>(g)];
        }
    }
}

MiouResult MiouAccumulator::result() const {
    MiouResult r;
    r.per_class.assign(static_cast<size_t>(num_classes_), -1.0f);
    r.present.assign(static_cast<size_t>(num_classes_), false);
    double sum = 0.0;
    int n_present = 0;
    for (int c = 0; c < num_classes_; ++c) {
        size_t i = static_cast<size_t>(c);
        bool present = tp_[i] + fn_[i] > 0;
        r.present[i] = present;
        if (!present) continue;
        long long denom = tp_[i] + fp_[i] + fn_[i];
        double iou = denom == 0 ? 0.0 : static_cast<double>(tp_[i]) / denom;
        r.per_class[i] = static_cast<float>(iou);
        sum += iou;
        ++n_present;
    }
    if (n_present == 0) throw ValidationError("no classes present in the ground truth");
    r.miou = static_cast<float>(sum / n_present);
    return r;
}

MiouResult miou(const std::vector<Tensor>& preds, const std::vector<Tensor>& gts, int num_classes,
                int ignore_index) {
    if (preds.size() != gts.size())
        throw ValidationError("prediction and ground-truth counts differ");
    if (preds.empty()) throw ValidationError("miou needs at least one mask pair");
    MiouAccumulator acc(num_classes, ignore_index);
    for (size_t i = 0; i < preds.size(); ++i) acc.add(preds[i], gts[i]);
    return acc.result();
}

DepthMetrics depth_metrics(const Tensor& pred, const Tensor& gt, const Tensor& valid_mask) {
    if (!nn::same_shape(pred, gt) || !nn::same_shape(pred, valid_mask))
        throw ValidationError("depth metric inputs must share one shape");
    double se = 0.0, rel = 0.0, l10 = 0.0;
    long long n = 0, d1 = 0, d2 = 0, d3 = 0;
    for (std::int64_t i = 0; i < pred.numel(); ++i) {
        if (valid_mask[i] == 0.0f) continue;
        double p = pred[i], g = gt[i];
        if (g <= 0.0 || p <= 0.0)
            throw ValidationError("depth values must be positive on valid pixels");
        double diff = p - g;
        se += diff * diff;
        rel += std::fabs(diff) / g;
        l10 += std::fabs(std::log10(p) - std::log10(g));
        double ratio = std::max(p / g, g / p);
        if (ratio < 1.25) ++d1;
        if (ratio < 1.25 * 1.25) ++d2;
        if (ratio < 1.25 * 1.25 * 1.25) ++d3;
        ++n;
    }
    if (n == 0) throw ValidationError("no valid pixels for depth metrics");
    DepthMetrics m;
    m.rmse = static_cast<float>(std::sqrt(se / n));
    m.rel = static_cast<float>(rel / n);
    m.log10 = static_cast<float>(l10 / n);
    m.delta1 = static_cast<float>(static_cast<double>(d1) / n);
    m.delta2 = static_cast<float>(static_cast<double>(d2) / n);
    m.delta3 = static_cast<float>(static_cast<double>(d3) / n);
    return m;
}

std::vector<float> coco_iou_thresholds() {
    std::vector<float> t;
    for (int i = 0; i < 10; ++i) t.push_back(0.50f + 0.05f * i);
    return t;
}

namespace {

// average precision with all-point interpolation for one class at one threshold
double ap_single(const std::vector<std::vector<DetBox>>& preds,
                 const std::vector<std::vector<DetBox>>& gts, int cls, float thresh) {
    struct Scored {
        float score;
        size_t image;
        size_t index;
    };
    std::vector<Scored> order;
    long long n_gt = 0;
    for (size_t im = 0; im < preds.size(); ++im) {
        for (size_t j = 0; j < preds[im].size(); ++j)
            if (preds[im][j].cls == cls) order.push_back({preds[im][j].score, im, j});
        for (const auto& g : gts[im])
            if (g.cls == cls) ++n_gt;
    }
    if (n_gt == 0) return -1.0;
    std::sort(order.begin(), order.end(),
              [](const Scored& a, const Scored& b) { return a.score > b.score; });

    std::vector<std::vector<bool>> taken(gts.size());
    for (size_t im = 0; im < gts.size(); ++im) taken[im].assign(gts[im].size(), false);

    std::vector<int> hits;
    hits.reserve(order.size());
    for (const auto& s : order) {
        const DetBox& p = preds[s.image][s.index];
        float best_iou = 0.0f;
        int best = -1;
        for (size_t g = 0; g < gts[s.image].size(); ++g) {
            if (taken[s.image][g] || gts[s.image][g].cls != cls) continue;
            float iou = heads::box_iou(p, gts[s.image][g]);
            if (iou > best_iou) {
                best_iou = iou;
                best = static_cast<int>(g);
            }
        }
        if (best >= 0 && best_iou >= thresh) {
            taken[s.image][static_cast<size_t>(best)] = true;
            hits.push_back(1);
        } else {
            hits.push_back(0);
        }
    }

    // precision envelope integrated over every achieved recall level
    double ap = 0.0;
    long long tp = 0;
    std::vector<double> precision(hits.size()), recall(hits.size());
    for (size_t i = 0; i < hits.size(); ++i) {
        tp += hits[i];
        precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
        recall[i] = static_cast<double>(tp) / static_cast<double>(n_gt);
    }
    for (size_t i = hits.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
    double prev_recall = 0.0;
    for (size_t i = 0; i < hits.size(); ++i) {
        if (recall[i] > prev_recall) {
            ap += (recall[i] - prev_recall) * precision[i];
            prev_recall = recall[i];
        }
    }
    return ap;
}

}  // namespace

ApResult detection_ap(const std::vector<std::vector<DetBox>>& preds,
                      const std::vector<std::vector<DetBox>>& gts,
                      const std::vector<float>& iou_thresholds) {
    if (preds.size() != gts.size())
        throw ValidationError("prediction and ground-truth image counts differ");
    std::vector<float> thresholds = iou_thresholds.empty() ? coco_iou_thresholds() : iou_thresholds;
    for (float t : thresholds)
        if (t <= 0.0f || t > 1.0f) throw ValidationError("IoU thresholds must lie in (0, 1]");

    int max_cls = -1;
    for (const auto& im : preds)
        for (const auto& b : im) max_cls = std::max(max_cls, b.cls);
    for (const auto& im : gts)
        for (const auto& b : im) max_cls = std::max(max_cls, b.cls);

    ApResult r;
    if (max_cls < 0) return r;  // nothing predicted, nothing annotated
    r.per_class_ap.assign(static_cast<size_t>(max_cls + 1), -1.0f);

    double sum_ap = 0.0, sum_ap50 = 0.0;
    int counted = 0;
    for (int c = 0; c <= max_cls; ++c) {
        double acc = 0.0;
        double at50 = -1.0;
        bool has_gt = false;
        for (float t : thresholds) {
            double ap = ap_single(preds, gts, c, t);
            if (ap < 0.0) break;  // no gt for this class
            has_gt = true;
            acc += ap;
            if (std::fabs(t - 0.5f) < 1e-6f) at50 = ap;
        }
        if (!has_gt) continue;
        double mean_ap = acc / thresholds.size();
        r.per_class_ap[static_cast<size_t>(c)] = static_cast<float>(mean_ap);
        sum_ap += mean_ap;
        if (at50 >= 0.0) sum_ap50 += at50;
        ++counted;
    }
    if (counted > 0) {
        r.ap = static_cast<float>(sum_ap / counted);
        r.ap50 = static_cast<float>(sum_ap50 / counted);
    }
    return r;
}

std::optional<double> pearson_r(const std::vector<float>& x, const std::vector<float>& y) {
    if (x.size() != y.size()) throw ValidationError("correlation inputs must have equal length");
    size_t n = x.size();
    if (n < 2) return std::nullopt;
    double mx = 0.0, my = 0.0;
    for (size_t i = 0; i < n; ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (size_t i = 0; i < n; ++i) {
        double dx = x[i] - mx, dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx <= 0.0 || syy <= 0.0) return std::nullopt;
    return sxy / std::sqrt(sxx * syy);
}

}  // namespace tadp::metrics
