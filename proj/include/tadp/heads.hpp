#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "tadp/autodiff.hpp"
#include "tadp/backbone.hpp"

namespace tadp::heads {

enum class Task { Segmentation, Depth, Detection };

struct DetBox {
    float x0 = 0, y0 = 0, x1 = 0, y1 = 0;
    int cls = 0;
    float score = 1.0f;
};

float box_iou(const DetBox& a, const DetBox& b);

struct Prediction {
    Task task = Task::Segmentation;
    nn::Tensor dense;            // seg: classes x H x W scores; depth: H x W meters
    std::vector<DetBox> boxes;   // detection
};

// Pyramid decoder shared by the dense heads: per-scale lateral 1x1 convs,
// top-down merge, 3x3 smoothing, then a fused fine-grid map that is shuffled
// and resized up to image resolution.
class DenseHead {
public:
    DenseHead() = default;
    DenseHead(const bb::VLayout& layout, int out_channels, int width, int shuffle,
              std::uint64_t seed, std::string prefix);

    // pyramid keys/channels must match the bound layout; returns
    // out_channels x H x W at full image resolution
    nn::Var forward(const std::map<int, nn::Var>& pyramid, bool train) const;

    std::map<std::string, nn::Var>& params() { return params_; }
    const std::map<std::string, nn::Var>& params() const { return params_; }
    const bb::VLayout& layout() const { return layout_; }
    int out_channels() const { return out_channels_; }

private:
    nn::Var p(const std::string& name, bool train) const;

    bb::VLayout layout_;
    int out_channels_ = 0;
    int width_ = 0;
    int shuffle_ = 1;  // learned upsample factor (pixel shuffle), rest bilinear
    std::string prefix_;
    std::map<std::string, nn::Var> params_;
};

class SegHead {
public:
    SegHead(const bb::VLayout& layout, int num_classes, int width = 256, int shuffle = 4,
            std::uint64_t seed = 1);
    nn::Var forward(const std::map<int, nn::Var>& pyramid, bool train) const;
    Prediction predict(const bb::FeatureBundle& bundle) const;
    std::map<std::string, nn::Var>& params() { return core_.params(); }
    const std::map<std::string, nn::Var>& params() const { return core_.params(); }
    int num_classes() const { return num_classes_; }

private:
    DenseHead core_;
    int num_classes_ = 0;
};

class DepthHead {
public:
    DepthHead(const bb::VLayout& layout, float min_depth = 0.001f, float max_depth = 10.0f,
              int width = 256, int shuffle = 4, std::uint64_t seed = 1);
    // strictly positive depth map, H x W, in meters
    nn::Var forward(const std::map<int, nn::Var>& pyramid, bool train) const;
    Prediction predict(const bb::FeatureBundle& bundle) const;
    std::map<std::string, nn::Var>& params() { return core_.params(); }
    const std::map<std::string, nn::Var>& params() const { return core_.params(); }
    float min_depth() const { return min_depth_; }
    float max_depth() const { return max_depth_; }

private:
    DenseHead core_;
    float min_depth_ = 0.001f;
    float max_depth_ = 10.0f;
};

// mean cross-entropy over non-ignored pixels; scores are classes x H x W
nn::Var seg_loss(const nn::Var& scores, const nn::Tensor& gt_mask, int ignore_index = 255);

// scale-invariant log loss over valid (positive) ground-truth pixels
nn::Var depth_loss(const nn::Var& pred, const nn::Tensor& gt, float lambda = 0.5f);

struct DetectionConfig {
    int num_classes = 1;                              // foreground classes
    std::vector<float> anchor_sizes = {8.f, 16.f, 32.f};  // square anchors, px
    int width = 64;
    float score_threshold = 0.5f;
    float nms_iou = 0.5f;
    float positive_iou = 0.5f;
};

// The detection head is a pluggable standard component behind this interface;
// the bundled adapter below is a compact anchor head over the finest V scale.
class DetectionHead {
public:
    virtual ~DetectionHead() = default;
    virtual Prediction forward(const bb::FeatureBundle& bundle) = 0;
    virtual nn::Var loss(const std::map<int, nn::Var>& pyramid, const std::vector<DetBox>& gt) = 0;
    virtual std::map<std::string, nn::Var>& params() = 0;
};

class AnchorDetectionHead : public DetectionHead {
public:
    AnchorDetectionHead(const bb::VLayout& layout, DetectionConfig cfg, std::uint64_t seed = 1);
    Prediction forward(const bb::FeatureBundle& bundle) override;
    nn::Var loss(const std::map<int, nn::Var>& pyramid, const std::vector<DetBox>& gt) override;
    std::map<std::string, nn::Var>& params() override { return params_; }
    const DetectionConfig& config() const { return cfg_; }

private:
    struct Assignment {
        std::vector<std::int32_t> cls_label;  // per (anchor, cell); -1 = background
        nn::Tensor box_target;                // 4A x h x w encoded deltas
        nn::Tensor box_mask;                  // 1 on positive anchor cells
        nn::Tensor obj_target;                // A x h x w, 1 for positives
        int positives = 0;
    };
    Assignment assign(const std::vector<DetBox>& gt, int h, int w) const;
    struct RawMaps {
        nn::Var obj, box, cls;
        int h = 0, w = 0;
    };
    RawMaps raw_maps(const std::map<int, nn::Var>& pyramid, bool train) const;
    nn::Var p(const std::string& name, bool train) const;

    bb::VLayout layout_;
    DetectionConfig cfg_;
    std::map<std::string, nn::Var> params_;
};

std::unique_ptr<DetectionHead> make_detection_head(const bb::VLayout& layout,
                                                   const DetectionConfig& cfg,
                                                   std::uint64_t seed = 1);

}  // namespace tadp::heads
