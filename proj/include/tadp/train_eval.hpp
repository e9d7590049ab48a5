#pragma once

#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "tadp/backbone.hpp"
#include "tadp/captions.hpp"
#include "tadp/config.hpp"
#include "tadp/dataset.hpp"
#include "tadp/heads.hpp"
#include "tadp/metrics.hpp"
#include "tadp/optim.hpp"
#include "tadp/text_encoder.hpp"

namespace tadp::tr {

// One training recipe: optimizer hyperparameters plus either an iteration
// budget or an epoch budget. drop_path is carried from the recipe tables for
// the record; the compact heads here have no stochastic-depth layers, and
// evaluation is deterministic regardless.
struct Schedule {
    std::string name;
    float lr = 1e-4f;
    int batch_size = 1;
    float weight_decay = 0.01f;
    float beta1 = 0.9f, beta2 = 0.999f;
    int warmup_iters = 0;
    float warmup_ratio = 1e-6f;
    float backbone_lr_scale = 0.01f;  // 0.1 matches the coarser published variant
    int grad_accumulation = 1;
    bool epoch_based = false;
    int amount = 1000;  // optimizer steps, or epochs when epoch_based
    float drop_path = 0.0f;

    void validate() const;
};

std::vector<std::string> schedule_names();
Schedule named_schedule(const std::string& name);
Schedule schedule_from_config(const cfg::ScheduleSpec& spec);

// Two groups: "head" at the base rate, "backbone" at base * backbone_lr_scale.
// A parameter appearing in both inputs is an error.
nn::AdamW build_optimizer(bb::Backbone& backbone, const std::vector<nn::Var>& head_params,
                          const Schedule& s);

struct MetricReport {
    std::string task;
    std::map<std::string, double> metrics;    // task metric keys, exact spelling
    std::map<std::string, double> per_class;  // keyed by class name
    std::string config_hash;
    std::uint64_t seed = 0;
    std::string git_rev;

    std::string to_json() const;
    static MetricReport from_json_text(const std::string& text);
};

// short commit hash read from the enclosing .git, or "unknown"
std::string current_git_rev(const std::string& start_dir = ".");

bb::Backbone load_backbone_spec(const std::string& spec);

struct TrainResult {
    std::string run_dir;
    float first_loss = 0.0f;
    float final_loss = 0.0f;
    int steps = 0;
    MetricReport eval;
};

// Runs the configured experiment end to end and writes
// {output}/{name}/{config.resolved, metrics.jsonl, report.json,
// checkpoints/step_N/}. Reruns with the same config reproduce the same files.
TrainResult train(const cfg::ExperimentConfig& config);

// Evaluates the configured model (head.checkpoint for trained weights)
// without touching disk.
MetricReport evaluate(const cfg::ExperimentConfig& config);

// Opens the caption cache the config points at (captions.cache_dir must be
// set) and reads any records already on disk.
cap::CaptionCache open_caption_cache(const cfg::ExperimentConfig& config);

// Single-scale predictions on a segmentation experiment, one row per image.
struct PredBatch {
    std::vector<std::string> ids;
    std::vector<nn::Tensor> preds;  // H x W predicted class indices
    std::vector<nn::Tensor> gts;    // matching ground-truth masks
    std::vector<double> miou;       // per-image mIoU over present classes
};
PredBatch predict_segmentation(const cfg::ExperimentConfig& config);

// ---- conditioning-vs-outcome analyses ----

struct RecallRow {
    std::string image_id;
    double recall = 1.0;
    double miou = 0.0;
    std::vector<std::string> missing;  // present classes the caption never names
};

struct RecallAnalysis {
    std::vector<RecallRow> rows;
    std::optional<double> correlation;  // recall vs per-image miou
};

// A class counts as recalled when some caption word matches its name at
// cosine >= threshold in the word-embedding space.
RecallAnalysis caption_recall_analysis(const std::map<std::string, std::string>& captions,
                                       const std::map<std::string, std::vector<int>>& present,
                                       const std::vector<std::string>& class_names,
                                       const text::TextEncoder& enc,
                                       const std::map<std::string, double>& per_image_miou,
                                       float cosine_threshold = 0.9f);

struct SizeRow {
    std::string image_id;
    int cls = 0;
    double rel_size = 0.0;  // class pixels / non-ignored pixels in the image
    double iou = 0.0;       // per-image per-class IoU
};

struct SizeAnalysis {
    std::vector<SizeRow> rows;
    std::optional<double> correlation;  // empty when undefined, e.g. constant inputs
};

SizeAnalysis object_size_analysis(const std::vector<std::string>& ids,
                                  const std::vector<nn::Tensor>& preds,
                                  const std::vector<nn::Tensor>& gts, int num_classes,
                                  int ignore_index = 255);

// Row g holds the mean softmax score vector over gt-class-g pixels, so every
// populated row sums to 1. "oracle" conditions on each image's present
// classes, "all_names" on the full class list.
struct ConfusionPair {
    nn::Tensor oracle;     // K x K
    nn::Tensor all_names;  // K x K
    nn::Tensor gt_pixels;  // K, pixel counts behind each row
};

ConfusionPair pixel_confusion(const bb::Backbone& backbone, const heads::SegHead& head,
                              const data::DatasetAdapter& dataset, const text::TextEncoder& enc,
                              int pad_tokens);

// Same probe assembled from a config (backbone, head checkpoint, dataset).
ConfusionPair pixel_confusion(const cfg::ExperimentConfig& config);

struct AttentionPanel {
    std::string token;
    int variant = 0;  // 0 = untouched image, i >= 1 = after pasting patch i-1
    nn::Tensor map;   // out_resolution x out_resolution
};

// Re-runs attention aggregation after pasting each patch (chw, top, left)
// into the image; a patch exceeding the image bounds is an error.
std::vector<AttentionPanel> copy_paste_probe(
    const nn::Tensor& image, const std::vector<std::string>& tokens,
    const std::vector<std::tuple<nn::Tensor, int, int>>& patches, const bb::Backbone& backbone,
    const text::TextEncoder& enc, int out_resolution = 0);

}  // namespace tadp::tr
