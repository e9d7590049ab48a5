#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace tadp::cfg {

struct DatasetSpec {
    std::string name;
    std::string root;
    std::string split = "train";
};

struct BuilderSpec {
    std::string strategy = "caption";
    int min_tokens = 40;
    int pad_tokens = 24;
    double precision = 1.0;  // oracle_noised only
    double recall = 1.0;
};

struct ModifierSpec {
    std::string kind = "null";
    std::string domain;
    std::string token_file;
    std::string backbone_checkpoint;
};

struct ScheduleOverrides {
    std::optional<double> lr, weight_decay, warmup_ratio, backbone_lr_scale, drop_path;
    std::optional<int> batch_size, warmup_iters, grad_accumulation, amount;
};

struct ScheduleSpec {
    std::string name = "ade_fast_4k";
    ScheduleOverrides overrides;
};

struct EvalSpec {
    std::vector<double> scales = {1.0};
    bool flip = false;
    int every = 0;  // 0 = final evaluation only
};

struct HeadSpec {
    int width = 64;
    int shuffle = 2;
    double min_depth = 0.001;
    double max_depth = 10.0;
    std::string checkpoint;
};

struct CaptionSpec {
    std::string cache_dir;
};

// One experiment, fully described. Parsing is strict: unknown keys anywhere
// are rejected, and ${VAR} in string values is replaced from the environment
// before field extraction.
struct ExperimentConfig {
    std::string name = "run";
    std::string task = "segmentation";
    DatasetSpec dataset;
    BuilderSpec builder;
    ModifierSpec modifier;
    ScheduleSpec schedule;
    std::string backbone = "stub:1";
    std::uint64_t seed = 0;
    std::string output = "runs";
    CaptionSpec captions;
    EvalSpec eval;
    HeadSpec head;
    int log_every = 1;
    int checkpoint_every = 0;  // 0 = final checkpoint only

    static ExperimentConfig from_json_text(const std::string& text);
    static ExperimentConfig load(const std::string& path);
    std::string to_json() const;  // canonical: all fields, sorted keys
    std::string hash() const;     // 16 hex digits over the canonical form
    void validate() const;
};

// ${VAR} -> environment value; an unset variable or a leftover "${" is an
// error, so resolving twice is a no-op.
std::string interpolate_env(const std::string& s);

}  // namespace tadp::cfg
