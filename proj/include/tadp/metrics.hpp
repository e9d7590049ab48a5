#pragma once

#include <optional>
#include <vector>

#include "tadp/heads.hpp"
#include "tadp/tensor.hpp"

namespace tadp::metrics {

struct MiouResult {
    float miou = 0.0f;
    std::vector<float> per_class;  // IoU per class; -1 for classes absent from gt
    std::vector<bool> present;     // class has at least one gt pixel
};

// intersection-over-union counts accumulated across a dataset
class MiouAccumulator {
public:
    MiouAccumulator(int num_classes, int ignore_index = 255);
    void add(const nn::Tensor& pred_mask, const nn::Tensor& gt_mask);  // H x W each
    MiouResult result() const;

private:
    int num_classes_ = 0;
    int ignore_index_ = 255;
    std::vector<long long> tp_, fp_, fn_;
};

MiouResult miou(const std::vector<nn::Tensor>& preds, const std::vector<nn::Tensor>& gts,
                int num_classes, int ignore_index = 255);

struct DepthMetrics {
    float rmse = 0, delta1 = 0, delta2 = 0, delta3 = 0, rel = 0, log10 = 0;
};

// valid = nonzero mask entries; gt must be positive where valid
DepthMetrics depth_metrics(const nn::Tensor& pred, const nn::Tensor& gt,
                           const nn::Tensor& valid_mask);

struct ApResult {
    float ap = 0;    // mean over classes and IoU thresholds
    float ap50 = 0;  // mean over classes at IoU 0.50
    std::vector<float> per_class_ap;  // -1 for classes without ground truth
};

std::vector<float> coco_iou_thresholds();  // 0.50 : 0.95 step 0.05

// greedy score-ordered matching per class and threshold, all-point interpolation
ApResult detection_ap(const std::vector<std::vector<heads::DetBox>>& preds,
                      const std::vector<std::vector<heads::DetBox>>& gts,
                      const std::vector<float>& iou_thresholds = {});

// empty when undefined (fewer than two points or zero variance)
std::optional<double> pearson_r(const std::vector<float>& x, const std::vector<float>& y);

}  // namespace tadp::metrics
