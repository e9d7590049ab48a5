#include "tadp/backbone.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>

#include "tadp/error.hpp"
#include "tadp/rng.hpp"
#include "tadp/safetensors.hpp"

namespace tadp::bb {

using nn::Tensor;
using nn::Var;
using nlohmann::json;

namespace {
bool power_of_two(int x) { return x > 0 && (x & (x - 1)) == 0; }
}  // namespace

void BackboneConfig::validate() const {
    if (latent_channels < 1) throw ValidationError("latent_channels must be >= 1");
    if (!power_of_two(latent_downsample)) throw ValidationError("latent_downsample must be a power of two");
    if (feature_scales.empty() || attention_sites.empty())
        throw ValidationError("feature_scales and attention_sites must be nonempty");
    std::vector<int> scale_ids, layer_ids;
    for (const auto& f : feature_scales) {
        if (!power_of_two(f.spatial_divisor)) throw ValidationError("feature divisor must be a power of two");
        if (f.spatial_divisor < latent_downsample)
            throw ValidationError("feature divisor finer than the latent grid");
        if (f.channels < 1) throw ValidationError("feature channel count must be positive");
        scale_ids.push_back(f.scale_id);
    }
    for (const auto& a : attention_sites) {
        if (!power_of_two(a.spatial_divisor)) throw ValidationError("attention divisor must be a power of two");
        if (a.spatial_divisor < latent_downsample)
            throw ValidationError("attention divisor finer than the latent grid");
        if (a.heads < 1) throw ValidationError("attention head count must be positive");
        layer_ids.push_back(a.layer_id);
    }
    std::sort(scale_ids.begin(), scale_ids.end());
    if (std::adjacent_find(scale_ids.begin(), scale_ids.end()) != scale_ids.end())
        throw ValidationError("duplicate feature scale_id");
    std::sort(layer_ids.begin(), layer_ids.end());
    if (std::adjacent_find(layer_ids.begin(), layer_ids.end()) != layer_ids.end())
        throw ValidationError("duplicate attention layer_id");
    if (max_text_tokens < 3) throw ValidationError("max_text_tokens must be >= 3");
    if (embed_dim < 1) throw ValidationError("embed_dim must be >= 1");
    if (base_channels < 4) throw ValidationError("base_channels must be >= 4");
    if (head_dim < 1) throw ValidationError("head_dim must be >= 1");
    if (total_timesteps < 1) throw ValidationError("total_timesteps must be >= 1");
    if (latent_scale <= 0.0f) throw ValidationError("latent_scale must be positive");
}

std::string BackboneConfig::to_json() const {
    json j;
    j["latent_channels"] = latent_channels;
    j["latent_downsample"] = latent_downsample;
    j["max_text_tokens"] = max_text_tokens;
    j["embed_dim"] = embed_dim;
    j["base_channels"] = base_channels;
    j["head_dim"] = head_dim;
    j["total_timesteps"] = total_timesteps;
    j["latent_scale"] = latent_scale;
    j["reconstruction_tol"] = reconstruction_tol;
    j["feature_scales"] = json::array();
    for (const auto& f : feature_scales)
        j["feature_scales"].push_back({{"scale_id", f.scale_id}, {"channels", f.channels},
                                       {"spatial_divisor", f.spatial_divisor}});
    j["attention_sites"] = json::array();
    for (const auto& a : attention_sites)
        j["attention_sites"].push_back({{"layer_id", a.layer_id}, {"heads", a.heads},
                                        {"spatial_divisor", a.spatial_divisor}});
    return j.dump();
}

BackboneConfig BackboneConfig::from_json(const std::string& s) {
    json j;
    try {
        j = json::parse(s);
    } catch (const json::exception& e) {
        throw ValidationError(std::string("bad backbone config json: ") + e.what());
    }
    BackboneConfig c;
    c.latent_channels = j.value("latent_channels", c.latent_channels);
    c.latent_downsample = j.value("latent_downsample", c.latent_downsample);
    c.max_text_tokens = j.value("max_text_tokens", c.max_text_tokens);
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.base_channels = j.value("base_channels", c.base_channels);
    c.head_dim = j.value("head_dim", c.head_dim);
    c.total_timesteps = j.value("total_timesteps", c.total_timesteps);
    c.latent_scale = j.value("latent_scale", c.latent_scale);
    c.reconstruction_tol = j.value("reconstruction_tol", c.reconstruction_tol);
    for (const auto& f : j.value("feature_scales", json::array()))
        c.feature_scales.push_back({f.at("scale_id").get<int>(), f.at("channels").get<int>(),
                                    f.at("spatial_divisor").get<int>()});
    for (const auto& a : j.value("attention_sites", json::array()))
        c.attention_sites.push_back({a.at("layer_id").get<int>(), a.at("heads").get<int>(),
                                     a.at("spatial_divisor").get<int>()});
    c.validate();
    return c;
}

BackboneConfig BackboneConfig::small_test() {
    BackboneConfig c;
    c.latent_channels = 4;
    c.latent_downsample = 4;
    c.feature_scales = {{0, 8, 4}, {1, 12, 8}};
    c.attention_sites = {{0, 2, 4}};
    c.max_text_tokens = 77;
    c.embed_dim = 32;
    c.base_channels = 12;
    c.head_dim = 4;
    c.validate();
    return c;
}

VLayout derive_layout(const BackboneConfig& cfg, int tokens) {
    if (tokens < 1) throw ValidationError("layout needs at least one token");
    VLayout l;
    l.tokens = tokens;
    std::map<int, int> per;
    int common = 1 << 30;
    for (const auto& a : cfg.attention_sites) {
        per[a.spatial_divisor] += tokens;
        common = std::min(common, a.spatial_divisor);
    }
    for (const auto& f : cfg.feature_scales) {
        per[f.spatial_divisor] += f.channels;
        common = std::min(common, f.spatial_divisor);
    }
    l.common_divisor = common;
    for (const auto& [d, c] : per) {
        l.per_divisor_channels.emplace_back(d, c);
        l.total_channels += c;
    }
    return l;
}

NoiseSchedule NoiseSchedule::scaled_linear(int steps, float beta_start, float beta_end) {
    NoiseSchedule s;
    s.total_steps = steps;
    s.alphas_cumprod.resize(static_cast<size_t>(steps));
    double acp = 1.0;
    double r0 = std::sqrt(static_cast<double>(beta_start));
    double r1 = std::sqrt(static_cast<double>(beta_end));
    for (int t = 0; t < steps; ++t) {
        double frac = steps == 1 ? 0.0 : static_cast<double>(t) / (steps - 1);
        double root = r0 + frac * (r1 - r0);
        double beta = root * root;
        acp *= 1.0 - beta;
        s.alphas_cumprod[static_cast<size_t>(t)] = static_cast<float>(acp);
    }
    return s;
}

Tensor NoiseSchedule::add_noise(const Tensor& z0, const Tensor& eps, int t) const {
    if (!nn::same_shape(z0, eps)) throw ValidationError("noise shape must match the latent");
    if (t < 0 || t >= total_steps) throw ValidationError("timestep out of range");
    float acp = alphas_cumprod[static_cast<size_t>(t)];
    float sa = std::sqrt(acp);
    float sb = std::sqrt(1.0f - acp);
    Tensor out = z0;
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = sa * z0[i] + sb * eps[i];
    return out;
}

Tensor sinusoidal_time_embedding(int t, int dim) {
    if (dim < 2 || dim % 2 != 0) throw ValidationError("time embedding dim must be even and >= 2");
    int half = dim / 2;
    Tensor e({dim});
    for (int i = 0; i < half; ++i) {
        double freq = half == 1 ? 1.0 : std::exp(-std::log(10000.0) * i / (half - 1));
        e[i] = static_cast<float>(std::sin(t * freq));
        e[half + i] = static_cast<float>(std::cos(t * freq));
    }
    return e;
}

// ---- Backbone ----

Backbone Backbone::stub(BackboneConfig cfg, std::uint64_t seed) {
    cfg.validate();
    Backbone b;
    b.cfg_ = std::move(cfg);
    b.is_stub_ = true;
    b.schedule_ = NoiseSchedule::scaled_linear(b.cfg_.total_timesteps);
    b.build_plan();
    b.init_params(seed);
    return b;
}

void Backbone::build_plan() {
    std::vector<int> divisors{cfg_.latent_downsample};
    for (const auto& f : cfg_.feature_scales) divisors.push_back(f.spatial_divisor);
    for (const auto& a : cfg_.attention_sites) divisors.push_back(a.spatial_divisor);
    std::sort(divisors.begin(), divisors.end());
    divisors.erase(std::unique(divisors.begin(), divisors.end()), divisors.end());

    levels_.clear();
    for (size_t i = 0; i < divisors.size(); ++i) {
        Level lvl;
        lvl.divisor = divisors[i];
        lvl.channels = cfg_.base_channels << static_cast<int>(i);
        lvl.stride_in = i == 0 ? 1 : divisors[i] / divisors[i - 1];
        for (const auto& a : cfg_.attention_sites)
            if (a.spatial_divisor == lvl.divisor) lvl.sites.push_back(a);
        for (const auto& f : cfg_.feature_scales)
            if (f.spatial_divisor == lvl.divisor) lvl.taps.push_back(f);
        std::sort(lvl.sites.begin(), lvl.sites.end(),
                  [](const auto& x, const auto& y) { return x.layer_id < y.layer_id; });
        std::sort(lvl.taps.begin(), lvl.taps.end(),
                  [](const auto& x, const auto& y) { return x.scale_id < y.scale_id; });
        levels_.push_back(std::move(lvl));
    }
}

void Backbone::init_params(std::uint64_t seed) {
    params_.clear();
    auto add = [&](const std::string& name, std::vector<int> shape, float std_dev) {
        Rng rng(fnv1a64(name) ^ (seed * 0x9e3779b97f4a7c15ULL + 0x51ed270bULL));
        Tensor t(std::move(shape));
        if (std_dev > 0.0f)
            for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.normal_f() * std_dev;
        params_[name] = nn::param(std::move(t), name);
    };
    auto add_conv = [&](const std::string& base, int o, int c, int k) {
        add(base + ".w", {o, c, k, k}, 1.0f / std::sqrt(static_cast<float>(c * k * k)));
        add(base + ".b", {o}, 0.0f);
    };

    add_conv("stem", levels_[0].channels, cfg_.latent_channels, 3);
    for (size_t i = 0; i < levels_.size(); ++i) {
        const Level& lvl = levels_[i];
        std::string li = std::to_string(i);
        add("time.lin" + li + ".w", {lvl.channels, time_dim_},
            1.0f / std::sqrt(static_cast<float>(time_dim_)));
        add("time.lin" + li + ".b", {lvl.channels}, 0.0f);
        if (i > 0) add_conv("lvl" + li + ".down", lvl.channels, levels_[i - 1].channels, 3);
        add_conv("lvl" + li + ".res.c1", lvl.channels, lvl.channels, 3);
        add_conv("lvl" + li + ".res.c2", lvl.channels, lvl.channels, 3);
        for (const auto& site : lvl.sites) {
            std::string base = "attn" + std::to_string(site.layer_id);
            int inner = site.heads * cfg_.head_dim;
            add_conv(base + ".wq", inner, lvl.channels, 1);
            add(base + ".wk", {cfg_.embed_dim, inner}, 1.0f / std::sqrt(static_cast<float>(cfg_.embed_dim)));
            add(base + ".wv", {cfg_.embed_dim, inner}, 1.0f / std::sqrt(static_cast<float>(cfg_.embed_dim)));
            add_conv(base + ".wo", lvl.channels, inner, 1);
        }
        for (const auto& tap : lvl.taps)
            add_conv("tap" + std::to_string(tap.scale_id), tap.channels, lvl.channels, 1);
        if (i > 0) add_conv("up" + li, levels_[i - 1].channels, lvl.channels, 3);
    }
    add_conv("out", cfg_.latent_channels, levels_[0].channels, 3);
}

Var Backbone::p(const std::string& name, bool train) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw Error("missing backbone parameter " + name);
    return train ? it->second : nn::constant(it->second->value);
}

ScaledLatent Backbone::encode_and_scale(const Tensor& image_chw) const {
    if (image_chw.ndim() != 3 || image_chw.dim(0) != 3)
        throw ValidationError("encoder expects a 3 x H x W image, got " + image_chw.shape_str());
    int h = image_chw.dim(1), w = image_chw.dim(2);
    int d = cfg_.latent_downsample;
    if (h % d != 0 || w % d != 0)
        throw ValidationError("image " + std::to_string(h) + "x" + std::to_string(w) +
                              " not divisible by latent downsample " + std::to_string(d));
    for (std::int64_t i = 0; i < image_chw.numel(); ++i)
        if (image_chw[i] < -0.01f || image_chw[i] > 1.01f)
            throw ValidationError("encoder expects pixel values in [0, 1]");

    int lh = h / d, lw = w / d;
    ScaledLatent out;
    out.scale_factor = cfg_.latent_scale;
    out.timestep = 0;
    out.values = Tensor({cfg_.latent_channels, lh, lw});
    float inv_block = 1.0f / static_cast<float>(d * d);
    for (int lc = 0; lc < cfg_.latent_channels; ++lc) {
        int src = lc % 3;
        for (int y = 0; y < lh; ++y)
            for (int x = 0; x < lw; ++x) {
                float acc = 0.0f;
                for (int dy = 0; dy < d; ++dy)
                    for (int dx = 0; dx < d; ++dx) acc += image_chw.at(src, y * d + dy, x * d + dx);
                float mean = acc * inv_block;
                out.values.at(lc, y, x) = (mean * 2.0f - 1.0f) * cfg_.latent_scale;
            }
    }
    return out;
}

Tensor Backbone::unscale(const ScaledLatent& latent) const {
    if (latent.scale_factor <= 0.0f) throw ValidationError("latent scale factor must be positive");
    Tensor out = latent.values;
    float inv = 1.0f / latent.scale_factor;
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= inv;
    return out;
}

Tensor Backbone::decode(const Tensor& raw_latent, int out_h, int out_w) const {
    if (raw_latent.ndim() != 3) throw ValidationError("decoder expects a CHW latent");
    Tensor rgb({3, raw_latent.dim(1), raw_latent.dim(2)});
    for (int c = 0; c < 3; ++c) {
        int src = std::min(c, raw_latent.dim(0) - 1);
        for (int y = 0; y < raw_latent.dim(1); ++y)
            for (int x = 0; x < raw_latent.dim(2); ++x)
                rgb.at(c, y, x) = (raw_latent.at(src, y, x) + 1.0f) * 0.5f;
    }
    Tensor img = nn::resize_bilinear(rgb, out_h, out_w);
    for (std::int64_t i = 0; i < img.numel(); ++i) img[i] = std::clamp(img[i], 0.0f, 1.0f);
    return img;
}

Var Backbone::run_denoiser(const Var& latent, int timestep, const Var& cond, bool train,
                           FeatureBundleV* cap) const {
    int n_tokens = cond->value.dim(0);
    if (n_tokens > cfg_.max_text_tokens)
        throw Error("token overflow: conditioning has " + std::to_string(n_tokens) + " rows, max is " +
                    std::to_string(cfg_.max_text_tokens));
    if (cond->value.dim(1) != cfg_.embed_dim)
        throw ValidationError("conditioning width " + std::to_string(cond->value.dim(1)) +
                              " does not match embed dim " + std::to_string(cfg_.embed_dim));

    Var t_emb = nn::constant(sinusoidal_time_embedding(timestep, time_dim_).reshaped({time_dim_, 1}));
    auto time_bias = [&](size_t lvl) {
        Var w = p("time.lin" + std::to_string(lvl) + ".w", train);
        Var b = p("time.lin" + std::to_string(lvl) + ".b", train);
        return nn::vadd(nn::vreshape(nn::vmatmul(w, t_emb), {levels_[lvl].channels}), b);
    };

    struct AvgCapture {
        int divisor;
        int layer_id;
        Var avg;  // N x h x w, heads averaged
    };
    std::vector<AvgCapture> avg_caps;
    struct FeatCapture {
        int divisor;
        int scale_id;
        Var feat;
    };
    std::vector<FeatCapture> feat_caps;

    Var x = nn::vconv2d(latent, p("stem.w", train), p("stem.b", train), 1, 1);
    std::vector<Var> skips;
    for (size_t i = 0; i < levels_.size(); ++i) {
        const Level& lvl = levels_[i];
        std::string li = std::to_string(i);
        if (i > 0)
            x = nn::vconv2d(x, p("lvl" + li + ".down.w", train), p("lvl" + li + ".down.b", train),
                            lvl.stride_in, 1);
        x = nn::vadd_chan_bias(x, time_bias(i));
        x = nn::vsilu(x);
        {
            Var h = nn::vconv2d(x, p("lvl" + li + ".res.c1.w", train), p("lvl" + li + ".res.c1.b", train), 1, 1);
            h = nn::vsilu(h);
            h = nn::vconv2d(h, p("lvl" + li + ".res.c2.w", train), p("lvl" + li + ".res.c2.b", train), 1, 1);
            x = nn::vadd(x, h);
        }
        int sh = x->value.dim(1), sw = x->value.dim(2);
        int hw = sh * sw;
        for (const auto& site : lvl.sites) {
            std::string base = "attn" + std::to_string(site.layer_id);
            int dh = cfg_.head_dim;
            int inner = site.heads * dh;
            Var q = nn::vconv2d(x, p(base + ".wq.w", train), p(base + ".wq.b", train), 1, 0);
            Var qf = nn::vtranspose(nn::vreshape(q, {inner, hw}));      // hw x inner
            Var k = nn::vmatmul(cond, p(base + ".wk", train));          // N x inner
            Var v = nn::vmatmul(cond, p(base + ".wv", train));          // N x inner
            float scale = 1.0f / std::sqrt(static_cast<float>(dh));
            std::vector<Var> probs_per_head;
            std::vector<Var> out_heads;
            for (int hd = 0; hd < site.heads; ++hd) {
                Var qh = nn::vslice_cols(qf, hd * dh, (hd + 1) * dh);
                Var kh = nn::vslice_cols(k, hd * dh, (hd + 1) * dh);
                Var vh = nn::vslice_cols(v, hd * dh, (hd + 1) * dh);
                Var scores = nn::vscale(nn::vmatmul(qh, nn::vtranspose(kh)), scale);  // hw x N
                Var probs = nn::vsoftmax_rows(scores);
                probs_per_head.push_back(nn::vtranspose(probs));  // N x hw
                out_heads.push_back(nn::vtranspose(nn::vmatmul(probs, vh)));  // dh x hw
            }
            Var merged = nn::vreshape(nn::vconcat_rows(out_heads), {inner, sh, sw});
            Var out = nn::vconv2d(merged, p(base + ".wo.w", train), p(base + ".wo.b", train), 1, 0);
            x = nn::vadd(x, out);
            if (cap) {
                Var stacked = nn::vreshape(nn::vconcat_rows(probs_per_head),
                                           {site.heads, n_tokens, sh, sw});
                cap->attention[{site.layer_id, site.spatial_divisor}] = stacked;
                Var avg = probs_per_head[0];
                for (size_t hh = 1; hh < probs_per_head.size(); ++hh)
                    avg = nn::vadd(avg, probs_per_head[hh]);
                avg = nn::vreshape(nn::vscale(avg, 1.0f / static_cast<float>(site.heads)),
                                   {n_tokens, sh, sw});
                avg_caps.push_back({site.spatial_divisor, site.layer_id, avg});
            }
        }
        if (cap)
            for (const auto& tap : lvl.taps) {
                std::string base = "tap" + std::to_string(tap.scale_id);
                Var f = nn::vconv2d(x, p(base + ".w", train), p(base + ".b", train), 1, 0);
                cap->features[tap.scale_id] = f;
                feat_caps.push_back({tap.spatial_divisor, tap.scale_id, f});
            }
        skips.push_back(x);
    }

    for (size_t i = levels_.size(); i-- > 1;) {
        std::string li = std::to_string(i);
        const Var& skip = skips[i - 1];
        x = nn::vupsample_bilinear(x, skip->value.dim(1), skip->value.dim(2));
        x = nn::vconv2d(x, p("up" + li + ".w", train), p("up" + li + ".b", train), 1, 1);
        x = nn::vadd(x, skip);
        x = nn::vsilu(x);
    }
    Var eps = nn::vconv2d(x, p("out.w", train), p("out.b", train), 1, 1);

    if (cap) {
        cap->tokens = n_tokens;
        cap->noise_pred = eps;
        std::sort(avg_caps.begin(), avg_caps.end(),
                  [](const auto& a, const auto& b) { return a.layer_id < b.layer_id; });
        std::sort(feat_caps.begin(), feat_caps.end(),
                  [](const auto& a, const auto& b) { return a.scale_id < b.scale_id; });
        // per-divisor slices: attention first (layer order), then features
        std::map<int, std::vector<Var>> groups;
        for (const auto& a : avg_caps) groups[a.divisor].push_back(a.avg);
        for (const auto& f : feat_caps) groups[f.divisor].push_back(f.feat);
        int finest = groups.begin()->first;
        for (auto& [div, items] : groups)
            cap->pyramid[div] = items.size() == 1 ? items[0] : nn::vconcat_channels(items);
        int fh = cap->pyramid.at(finest)->value.dim(1);
        int fw = cap->pyramid.at(finest)->value.dim(2);
        std::vector<Var> flat;
        for (const auto& a : avg_caps)
            flat.push_back(a.avg->value.dim(1) == fh ? a.avg : nn::vupsample_bilinear(a.avg, fh, fw));
        for (const auto& f : feat_caps)
            flat.push_back(f.feat->value.dim(1) == fh ? f.feat : nn::vupsample_bilinear(f.feat, fh, fw));
        cap->concatenated = flat.size() == 1 ? flat[0] : nn::vconcat_channels(flat);
    }
    return eps;
}

FeatureBundleV Backbone::extract_features_v(const ScaledLatent& latent, const Var& conditioning,
                                            bool train_denoiser) const {
    FeatureBundleV cap;
    run_denoiser(nn::constant(latent.values), 0, conditioning, train_denoiser, &cap);
    for (const auto& site : cfg_.attention_sites)
        if (!cap.attention.count({site.layer_id, site.spatial_divisor}))
            throw Error("attention site " + std::to_string(site.layer_id) + " produced no capture");
    for (const auto& f : cfg_.feature_scales)
        if (!cap.features.count(f.scale_id))
            throw Error("feature scale " + std::to_string(f.scale_id) + " produced no capture");
    return cap;
}

FeatureBundle FeatureBundle::values_of(const FeatureBundleV& v) {
    FeatureBundle b;
    b.tokens = v.tokens;
    for (const auto& [k, var] : v.attention) b.attention[k] = var->value;
    for (const auto& [k, var] : v.features) b.features[k] = var->value;
    for (const auto& [k, var] : v.pyramid) b.pyramid[k] = var->value;
    b.concatenated = v.concatenated->value;
    return b;
}

FeatureBundle Backbone::extract_features(const ScaledLatent& latent,
                                         const prompt::ConditioningMatrix& conditioning) const {
    conditioning.validate(cfg_.embed_dim);
    FeatureBundleV v = extract_features_v(latent, nn::constant(conditioning.embeddings), false);
    return FeatureBundle::values_of(v);
}

Var Backbone::predict_noise(const Var& z_t, int timestep, const Var& conditioning,
                            bool train_denoiser) const {
    return run_denoiser(z_t, timestep, conditioning, train_denoiser, nullptr);
}

Tensor Backbone::image_variation(const Tensor& image_chw, const prompt::ConditioningMatrix& prompt,
                                 float strength, std::uint64_t seed, int sample_steps) const {
    if (is_stub_)
        throw Error("image variation needs a checkpoint-loaded backbone; the stub cannot generate imagery");
    if (strength <= 0.0f || strength > 1.0f) throw ValidationError("strength must lie in (0, 1]");
    prompt.validate(cfg_.embed_dim);

    ScaledLatent z0 = encode_and_scale(image_chw);
    int T = schedule_.total_steps;
    int t_start = std::min(T - 1, std::max(0, static_cast<int>(std::ceil(strength * T)) - 1));

    Rng rng(seed);
    Tensor eps(z0.values.shape());
    for (std::int64_t i = 0; i < eps.numel(); ++i) eps[i] = rng.normal_f();
    Tensor z = schedule_.add_noise(z0.values, eps, t_start);

    int n = std::min(sample_steps, t_start + 1);
    std::vector<int> ts(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i)
        ts[static_cast<size_t>(i)] =
            n == 1 ? t_start
                   : static_cast<int>(std::lround(t_start * (1.0 - static_cast<double>(i) / (n - 1))));

    Var cond = nn::constant(prompt.embeddings);
    for (int i = 0; i < n; ++i) {
        int t = ts[static_cast<size_t>(i)];
        Tensor pred = predict_noise(nn::constant(z), t, cond, false)->value;
        float acp_t = schedule_.alphas_cumprod[static_cast<size_t>(t)];
        float acp_prev =
            i + 1 < n ? schedule_.alphas_cumprod[static_cast<size_t>(ts[static_cast<size_t>(i + 1)])] : 1.0f;
        float sa = std::sqrt(acp_t), sb = std::sqrt(1.0f - acp_t);
        float pa = std::sqrt(acp_prev), pb = std::sqrt(1.0f - acp_prev);
        for (std::int64_t j = 0; j < z.numel(); ++j) {
            float z0_pred = (z[j] - sb * pred[j]) / sa;
            z[j] = pa * z0_pred + pb * pred[j];
        }
    }
    ScaledLatent out;
    out.values = z;
    out.scale_factor = cfg_.latent_scale;
    return decode(unscale(out), image_chw.dim(1), image_chw.dim(2));
}

void Backbone::save_checkpoint(const std::string& path) const {
    std::map<std::string, Tensor> ts;
    for (const auto& [name, var] : params_) ts[name] = var->value;
    io::save_tensors(path, ts,
                     {{"format", "tadp-backbone-v1"}, {"config", cfg_.to_json()},
                      {"kind", is_stub_ ? "stub" : "real"}});
}

Backbone Backbone::from_checkpoint(const std::string& path) {
    auto loaded = io::load_tensors(path);
    auto it = loaded.metadata.find("config");
    if (it == loaded.metadata.end()) throw Error("checkpoint " + path + " has no backbone config");
    Backbone b;
    b.cfg_ = BackboneConfig::from_json(it->second);
    b.is_stub_ = false;
    b.schedule_ = NoiseSchedule::scaled_linear(b.cfg_.total_timesteps);
    b.build_plan();
    b.init_params(0);  // builds the parameter directory with the right shapes
    for (auto& [name, var] : b.params_) {
        auto lt = loaded.tensors.find(name);
        if (lt == loaded.tensors.end()) throw Error("checkpoint " + path + " missing parameter " + name);
        if (!nn::same_shape(lt->second, var->value))
            throw Error("checkpoint parameter " + name + " has shape " + lt->second.shape_str() +
                        ", expected " + var->value.shape_str());
        var->value = lt->second;
    }
    return b;
}

Tensor aggregate_attention(const FeatureBundle& bundle, int out_resolution) {
    if (bundle.attention.empty()) throw ValidationError("bundle has no attention sites");
    if (out_resolution < 1) throw ValidationError("output resolution must be positive");
    int n = bundle.tokens;
    Tensor acc = Tensor::zeros({n, out_resolution, out_resolution});
    for (const auto& kv : bundle.attention) {
        const Tensor& site = kv.second;
        int heads = site.dim(0), h = site.dim(2), w = site.dim(3);
        Tensor avg = Tensor::zeros({n, h, w});
        float inv = 1.0f / static_cast<float>(heads);
        for (int hd = 0; hd < heads; ++hd)
            for (int tok = 0; tok < n; ++tok)
                for (int y = 0; y < h; ++y)
                    for (int x = 0; x < w; ++x) avg.at(tok, y, x) += site.at(hd, tok, y, x) * inv;
        Tensor up = nn::resize_bilinear(avg, out_resolution, out_resolution);
        for (std::int64_t i = 0; i < acc.numel(); ++i) acc[i] += up[i];
    }
    float inv_sites = 1.0f / static_cast<float>(bundle.attention.size());
    for (std::int64_t i = 0; i < acc.numel(); ++i) acc[i] *= inv_sites;
    return acc;
}

}  // namespace tadp::bb
