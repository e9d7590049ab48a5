#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "tadp/autodiff.hpp"
#include "tadp/prompting.hpp"
#include "tadp/tensor.hpp"

namespace tadp::bb {

struct FeatureScaleSpec {
    int scale_id = 0;
    int channels = 0;
    int spatial_divisor = 8;  // relative to the input image
};

struct AttentionSiteSpec {
    int layer_id = 0;
    int heads = 1;
    int spatial_divisor = 8;
};

struct BackboneConfig {
    int latent_channels = 4;
    int latent_downsample = 8;
    std::vector<FeatureScaleSpec> feature_scales;
    std::vector<AttentionSiteSpec> attention_sites;
    int max_text_tokens = 77;
    int embed_dim = 768;

    int base_channels = 16;  // denoiser stem width; doubles per level
    int head_dim = 8;
    int total_timesteps = 1000;
    float latent_scale = 0.18215f;
    float reconstruction_tol = 0.15f;  // mean abs error bound for decode(encode(x))

    void validate() const;
    std::string to_json() const;
    static BackboneConfig from_json(const std::string& s);
    // compact config exercised throughout the test suite
    static BackboneConfig small_test();
};

struct ScaledLatent {
    nn::Tensor values;  // latent_channels x H/d x W/d, already scaled
    float scale_factor = 0.18215f;
    int timestep = 0;
};

// What one denoiser pass exposes, Var-typed so a task loss can reach both the
// denoiser weights and the conditioning.
struct FeatureBundleV {
    int tokens = 0;
    std::map<std::pair<int, int>, nn::Var> attention;  // (layer_id, divisor) -> heads x N x h x w
    std::map<int, nn::Var> features;                   // scale_id -> C x h x w
    std::map<int, nn::Var> pyramid;                    // divisor -> concatenated slice at that scale
    nn::Var concatenated;                              // everything resized to the finest grid
    nn::Var noise_pred;                                // latent-shaped output of the pass
};

struct FeatureBundle {
    int tokens = 0;
    std::map<std::pair<int, int>, nn::Tensor> attention;
    std::map<int, nn::Tensor> features;
    std::map<int, nn::Tensor> pyramid;
    nn::Tensor concatenated;

    static FeatureBundle values_of(const FeatureBundleV& v);
};

// Channel bookkeeping derived from (config, token count); heads bind to this.
struct VLayout {
    int tokens = 0;
    int common_divisor = 0;
    int total_channels = 0;
    std::vector<std::pair<int, int>> per_divisor_channels;  // divisor -> channels, ascending
};
VLayout derive_layout(const BackboneConfig& cfg, int tokens);

struct NoiseSchedule {
    int total_steps = 1000;
    std::vector<float> alphas_cumprod;

    static NoiseSchedule scaled_linear(int steps = 1000, float beta_start = 0.00085f,
                                       float beta_end = 0.012f);
    nn::Tensor add_noise(const nn::Tensor& z0, const nn::Tensor& eps, int t) const;
};

class Backbone {
public:
    static Backbone stub(BackboneConfig cfg, std::uint64_t seed);
    static Backbone from_checkpoint(const std::string& path);
    void save_checkpoint(const std::string& path) const;

    const BackboneConfig& config() const { return cfg_; }
    bool is_stub() const { return is_stub_; }
    const NoiseSchedule& schedule() const { return schedule_; }

    // Analytic mode-collapsed encoder: per-block channel means mapped to
    // [-1, 1], then multiplied by the latent scale.
    ScaledLatent encode_and_scale(const nn::Tensor& image_chw) const;
    nn::Tensor unscale(const ScaledLatent& latent) const;
    nn::Tensor decode(const nn::Tensor& raw_latent, int out_h, int out_w) const;

    // One denoiser pass at the latent's timestep with capture at every
    // configured site. train_denoiser opens the tape through the weights;
    // the conditioning Var decides whether gradients reach the text side.
    FeatureBundleV extract_features_v(const ScaledLatent& latent, const nn::Var& conditioning,
                                      bool train_denoiser) const;
    FeatureBundle extract_features(const ScaledLatent& latent,
                                   const prompt::ConditioningMatrix& conditioning) const;

    // Noise prediction alone (personalization training, image variation).
    nn::Var predict_noise(const nn::Var& z_t, int timestep, const nn::Var& conditioning,
                          bool train_denoiser) const;

    // Noise image -> denoise under the prompt -> decode. Refuses stubs.
    nn::Tensor image_variation(const nn::Tensor& image_chw, const prompt::ConditioningMatrix& prompt,
                               float strength, std::uint64_t seed, int sample_steps = 10) const;

    std::map<std::string, nn::Var>& params() { return params_; }
    const std::map<std::string, nn::Var>& params() const { return params_; }

private:
    Backbone() = default;
    void init_params(std::uint64_t seed);
    void build_plan();
    nn::Var run_denoiser(const nn::Var& latent, int timestep, const nn::Var& cond, bool train,
                         FeatureBundleV* captures) const;
    nn::Var p(const std::string& name, bool train) const;

    struct Level {
        int divisor = 0;       // image-relative
        int channels = 0;
        int stride_in = 1;     // from the previous level
        std::vector<AttentionSiteSpec> sites;
        std::vector<FeatureScaleSpec> taps;
    };

    BackboneConfig cfg_;
    bool is_stub_ = true;
    NoiseSchedule schedule_;
    std::vector<Level> levels_;
    std::map<std::string, nn::Var> params_;
    int time_dim_ = 16;
};

nn::Tensor aggregate_attention(const FeatureBundle& bundle, int out_resolution);

nn::Tensor sinusoidal_time_embedding(int t, int dim);

}  // namespace tadp::bb
