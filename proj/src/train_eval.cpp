#include "tadp/train_eval.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "tadp/captions.hpp"
#include "tadp/domain.hpp"
#include "tadp/error.hpp"
#include "tadp/rng.hpp"
#include "tadp/safetensors.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace tadp::tr {

void Schedule::validate() const {
    if (lr <= 0.0f) throw ValidationError("schedule lr must be > 0");
    if (batch_size < 1) throw ValidationError("schedule batch_size must be >= 1");
    if (grad_accumulation < 1) throw ValidationError("schedule grad_accumulation must be >= 1");
    if (amount < 1) throw ValidationError("schedule amount must be >= 1");
    if (warmup_iters < 0) throw ValidationError("schedule warmup_iters must be >= 0");
    if (warmup_ratio <= 0.0f || warmup_ratio > 1.0f)
        throw ValidationError("schedule warmup_ratio must be in (0, 1]");
    if (backbone_lr_scale <= 0.0f) throw ValidationError("schedule backbone_lr_scale must be > 0");
    if (weight_decay < 0.0f) throw ValidationError("schedule weight_decay must be >= 0");
    if (beta1 < 0.0f || beta1 >= 1.0f || beta2 < 0.0f || beta2 >= 1.0f)
        throw ValidationError("schedule betas must be in [0, 1)");
    if (drop_path < 0.0f || drop_path >= 1.0f)
        throw ValidationError("schedule drop_path must be in [0, 1)");
}

std::vector<std::string> schedule_names() {
    return {"ade_full_80k", "ade_fast_8k", "ade_fast_4k", "cityscapes_40k",
            "nyu_25ep",     "nyu_1ep",     "pascal_15ep", "voc_cross_100ep"};
}

Schedule named_schedule(const std::string& name) {
    Schedule s;
    s.name = name;
    if (name == "ade_full_80k") {
        s.lr = 8e-5f;
        s.batch_size = 2;
        s.weight_decay = 0.005f;
        s.warmup_iters = 1500;
        s.amount = 80000;
    } else if (name == "ade_fast_8k") {
        s.lr = 1.6e-4f;
        s.batch_size = 2;
        s.weight_decay = 0.005f;
        s.warmup_iters = 150;
        s.amount = 8000;
    } else if (name == "ade_fast_4k") {
        s.lr = 1.6e-4f;
        s.batch_size = 2;
        s.weight_decay = 0.005f;
        s.warmup_iters = 75;
        s.amount = 4000;
    } else if (name == "cityscapes_40k") {
        s.lr = 8e-5f;
        s.batch_size = 2;
        s.weight_decay = 0.005f;
        s.warmup_iters = 1500;
        s.amount = 40000;
    } else if (name == "nyu_25ep" || name == "nyu_1ep") {
        s.lr = 5e-4f;
        s.batch_size = 3;
        s.weight_decay = 0.1f;
        s.epoch_based = true;
        s.amount = (name == "nyu_25ep") ? 25 : 1;
        s.drop_path = 0.1f;
    } else if (name == "pascal_15ep") {
        s.lr = 1e-5f;
        s.batch_size = 2;
        s.grad_accumulation = 4;
        s.weight_decay = 0.01f;
        s.epoch_based = true;
        s.amount = 15;
    } else if (name == "voc_cross_100ep") {
        s.lr = 1e-5f;
        s.batch_size = 2;
        s.weight_decay = 0.01f;
        s.epoch_based = true;
        s.amount = 100;
    } else {
        std::string known;
        for (const auto& n : schedule_names()) known += (known.empty() ? "" : ", ") + n;
        throw ValidationError("unknown schedule '" + name + "' (known: " + known + ")");
    }
    s.validate();
    return s;
}

Schedule schedule_from_config(const cfg::ScheduleSpec& spec) {
    Schedule s = named_schedule(spec.name);
    const auto& o = spec.overrides;
    if (o.lr) s.lr = static_cast<float>(*o.lr);
    if (o.weight_decay) s.weight_decay = static_cast<float>(*o.weight_decay);
    if (o.warmup_ratio) s.warmup_ratio = static_cast<float>(*o.warmup_ratio);
    if (o.backbone_lr_scale) s.backbone_lr_scale = static_cast<float>(*o.backbone_lr_scale);
    if (o.drop_path) s.drop_path = static_cast<float>(*o.drop_path);
    if (o.batch_size) s.batch_size = *o.batch_size;
    if (o.warmup_iters) s.warmup_iters = *o.warmup_iters;
    if (o.grad_accumulation) s.grad_accumulation = *o.grad_accumulation;
    if (o.amount) s.amount = *o.amount;
    s.validate();
    return s;
}

nn::AdamW build_optimizer(bb::Backbone& backbone, const std::vector<nn::Var>& head_params,
                          const Schedule& s) {
    s.validate();
    std::vector<nn::Var> bb_params;
    std::set<nn::Node*> seen;
    for (auto& [name, v] : backbone.params()) {
        bb_params.push_back(v);
        seen.insert(v.get());
    }
    std::set<nn::Node*> head_seen;
    for (const auto& v : head_params) {
        if (seen.count(v.get()))
            throw Error("a parameter appears in both the backbone and head groups");
        if (!head_seen.insert(v.get()).second)
            throw Error("duplicate parameter in the head group");
    }
    nn::ParamGroup head_group{"head", head_params, 1.0f, -1.0f};
    nn::ParamGroup bb_group{"backbone", bb_params, s.backbone_lr_scale, -1.0f};
    nn::AdamWOptions opts;
    opts.lr = s.lr;
    opts.beta1 = s.beta1;
    opts.beta2 = s.beta2;
    opts.weight_decay = s.weight_decay;
    return nn::AdamW({head_group, bb_group}, opts);
}

std::string MetricReport::to_json() const {
    json j;
    j["task"] = task;
    j["metrics"] = metrics;
    j["per_class"] = per_class;
    j["config_hash"] = config_hash;
    j["seed"] = seed;
    j["git_rev"] = git_rev;
    return j.dump(2) + "\n";
}

MetricReport MetricReport::from_json_text(const std::string& text) {
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded()) throw ValidationError("metric report is not valid JSON");
    MetricReport r;
    r.task = j.at("task").get<std::string>();
    r.metrics = j.at("metrics").get<std::map<std::string, double>>();
    r.per_class = j.at("per_class").get<std::map<std::string, double>>();
    r.config_hash = j.at("config_hash").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.git_rev = j.at("git_rev").get<std::string>();
    return r;
}

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

std::string read_text(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) return "";
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

}  // namespace

std::string current_git_rev(const std::string& start_dir) {
    std::error_code ec;
    fs::path p = fs::absolute(start_dir, ec);
    if (ec) return "unknown";
    while (true) {
        fs::path git = p / ".git";
        fs::path git_dir;
        if (fs::is_directory(git, ec)) {
            git_dir = git;
        } else if (fs::is_regular_file(git, ec)) {
            const std::string line = trim(read_text(git));
            if (line.rfind("gitdir:", 0) == 0) git_dir = p / trim(line.substr(7));
        }
        if (!git_dir.empty()) {
            std::string head = trim(read_text(git_dir / "HEAD"));
            if (head.rfind("ref:", 0) == 0) head = trim(read_text(git_dir / trim(head.substr(4))));
            if (head.size() >= 12) return head.substr(0, 12);
            return "unknown";
        }
        if (!p.has_parent_path() || p.parent_path() == p) return "unknown";
        p = p.parent_path();
    }
}

bb::Backbone load_backbone_spec(const std::string& spec) {
    if (spec.rfind("stub:", 0) == 0) {
        const std::string rest = spec.substr(5);
        if (rest.empty() || rest.find_first_not_of("0123456789") != std::string::npos)
            throw ValidationError("stub backbone spec needs a numeric seed, got '" + spec + "'");
        return bb::Backbone::stub(bb::BackboneConfig::small_test(), std::stoull(rest));
    }
    if (spec.rfind("real:", 0) == 0) {
        if (spec.size() == 5) throw ValidationError("real backbone spec needs a checkpoint path");
        return bb::Backbone::from_checkpoint(spec.substr(5));
    }
    throw ValidationError("backbone must be 'stub:<seed>' or 'real:<path>', got '" + spec + "'");
}

// ---------------------------------------------------------------------------
// conditioning plan: how each sample's conditioning matrix gets built
// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> builtin_templates() {
    return {"a photo of a {}", "an image of a {}", "a bright photo of a {}", "a close-up of a {}"};
}

struct CondPlan {
    prompt::Strategy strategy = prompt::Strategy::Caption;
    int pad_tokens = 24;
    domain::DomainModifier modifier;
    const text::TextEncoder* enc = nullptr;
    std::vector<std::string> class_names;
    int ignore_index = 255;
    double precision = 1.0, recall = 1.0;
    std::uint64_t seed = 0;
    std::optional<prompt::ConditioningMatrix> constant;
    cap::CaptionCache* cache = nullptr;
    prompt::PosTagger tagger;

    int tokens() const { return constant ? constant->rows() : pad_tokens; }

    prompt::ConditioningMatrix for_sample(const data::Sample& s) const {
        if (constant) return *constant;
        std::string text;
        switch (strategy) {
            case prompt::Strategy::Caption:
            case prompt::Strategy::NounsOnly: {
                if (!cache)
                    throw ValidationError("builder '" + prompt::strategy_name(strategy) +
                                          "' needs captions.cache_dir in the config");
                auto rec = cache->get(s.image_id);
                if (!rec)
                    throw ValidationError("no cached caption for image '" + s.image_id +
                                          "'; run the caption command over this dataset first");
                text = rec->cleaned ? *rec->cleaned : rec->caption;
                if (strategy == prompt::Strategy::NounsOnly) text = prompt::nouns_only(text, tagger);
                break;
            }
            case prompt::Strategy::Oracle:
            case prompt::Strategy::OracleNoised: {
                std::vector<int> present;
                if (!s.boxes.empty()) {
                    std::set<int> uniq;
                    for (const auto& b : s.boxes) uniq.insert(b.cls);
                    present.assign(uniq.begin(), uniq.end());
                } else if (s.seg_mask.numel() > 0) {
                    present = prompt::present_classes(s.seg_mask,
                                                     static_cast<int>(class_names.size()),
                                                     ignore_index);
                } else {
                    throw ValidationError("oracle conditioning needs labels, and image '" +
                                          s.image_id + "' has none");
                }
                if (strategy == prompt::Strategy::OracleNoised) {
                    prompt::OracleCaptionSpec spec;
                    spec.present_classes = present;
                    spec.target_precision = precision;
                    spec.target_recall = recall;
                    spec.rng_seed = seed ^ fnv1a64(s.image_id);
                    prompt::ClassVocabulary universe;
                    universe.names = class_names;
                    universe.templates = builtin_templates();
                    present = prompt::perturb_oracle(spec, universe);
                }
                text = prompt::join_class_names(class_names, present);
                break;
            }
            default:
                throw Error("matrix strategy fell through to the per-sample path");
        }
        text = domain::apply_modifier(text, modifier).caption;
        return prompt::build_from_caption(text, *enc, pad_tokens);
    }
};

CondPlan make_cond_plan(const cfg::ExperimentConfig& c, const data::DatasetAdapter& ds,
                        text::TextEncoder& enc, cap::CaptionCache* cache,
                        domain::DomainModifier modifier) {
    CondPlan plan;
    plan.strategy = prompt::strategy_from_name(c.builder.strategy);
    plan.pad_tokens = c.builder.pad_tokens;
    plan.modifier = std::move(modifier);
    plan.enc = &enc;
    plan.class_names = ds.class_names();
    plan.ignore_index = ds.ignore_index();
    plan.precision = c.builder.precision;
    plan.recall = c.builder.recall;
    plan.seed = c.seed;
    plan.cache = cache;

    const bool matrix = plan.strategy == prompt::Strategy::AvgEOS ||
                        plan.strategy == prompt::Strategy::SingleEOS ||
                        plan.strategy == prompt::Strategy::ClassEmbs ||
                        plan.strategy == prompt::Strategy::ClassNames;
    if (matrix) {
        if (plan.modifier.kind != domain::ModifierKind::Null)
            throw ValidationError("modifier '" + domain::kind_name(plan.modifier.kind) +
                                  "' needs a caption-style builder, not '" + c.builder.strategy +
                                  "'");
        if (plan.class_names.empty())
            throw ValidationError("builder '" + c.builder.strategy +
                                  "' needs dataset class names, and this dataset has none");
        prompt::ClassVocabulary vocab;
        vocab.names = plan.class_names;
        vocab.templates = builtin_templates();
        vocab.validate();
        switch (plan.strategy) {
            case prompt::Strategy::AvgEOS:
                plan.constant = prompt::build_avg_eos(vocab, enc);
                break;
            case prompt::Strategy::SingleEOS:
                plan.constant = prompt::build_single_eos(vocab, vocab.templates.front(), enc);
                break;
            case prompt::Strategy::ClassEmbs:
                plan.constant = prompt::build_class_embs(vocab, enc);
                break;
            default:
                plan.constant = prompt::build_class_names(vocab, enc);
                break;
        }
    } else if (plan.pad_tokens < 1) {
        throw ValidationError("caption-style builders need builder.pad_tokens >= 1 so every "
                              "image conditions on the same token count");
    }
    return plan;
}

domain::DomainModifier modifier_from_config(const cfg::ModifierSpec& m, text::TextEncoder& enc) {
    const domain::ModifierKind kind = domain::kind_from_name(m.kind);
    switch (kind) {
        case domain::ModifierKind::Null:
            return domain::null_modifier();
        case domain::ModifierKind::Simple:
            return domain::simple_modifier(m.domain);
        case domain::ModifierKind::NearbyDomain:
            return domain::nearby_modifier(m.domain);
        case domain::ModifierKind::UnrelatedDomain:
            return domain::unrelated_modifier(m.domain);
        case domain::ModifierKind::TextualInversion: {
            if (m.token_file.empty())
                throw ValidationError("textual_inversion modifier needs modifier.token_file");
            domain::LearnedToken tok = domain::LearnedToken::load(m.token_file);
            enc.register_token(tok.token, tok.embedding);
            return domain::textual_inversion_modifier(m.domain, tok);
        }
        case domain::ModifierKind::DreamBooth: {
            if (m.token_file.empty() || m.backbone_checkpoint.empty())
                throw ValidationError(
                    "dreambooth modifier needs modifier.token_file and modifier.backbone_checkpoint");
            domain::LearnedToken tok = domain::LearnedToken::load(m.token_file);
            enc.register_token(tok.token, tok.embedding);
            return domain::dreambooth_modifier(m.domain, tok, m.backbone_checkpoint);
        }
    }
    throw Error("unhandled modifier kind");
}

// ---------------------------------------------------------------------------
// shared forward helpers
// ---------------------------------------------------------------------------

nn::Tensor hflip_chw(const nn::Tensor& t) {
    nn::Tensor out = t;
    const int C = t.dim(0), H = t.dim(1), W = t.dim(2);
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) out.at(c, y, x) = t.at(c, y, W - 1 - x);
    return out;
}

nn::Tensor softmax_channels(const nn::Tensor& scores) {
    const int K = scores.dim(0), H = scores.dim(1), W = scores.dim(2);
    nn::Tensor out = nn::Tensor::zeros({K, H, W});
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double mx = -1e300;
            for (int k = 0; k < K; ++k) mx = std::max(mx, (double)scores.at(k, y, x));
            double z = 0;
            for (int k = 0; k < K; ++k) z += std::exp((double)scores.at(k, y, x) - mx);
            for (int k = 0; k < K; ++k)
                out.at(k, y, x) = static_cast<float>(std::exp((double)scores.at(k, y, x) - mx) / z);
        }
    return out;
}

nn::Tensor argmax_channels(const nn::Tensor& scores) {
    const int K = scores.dim(0), H = scores.dim(1), W = scores.dim(2);
    nn::Tensor out = nn::Tensor::zeros({H, W});
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            int best = 0;
            float bv = scores.at(0, y, x);
            for (int k = 1; k < K; ++k)
                if (scores.at(k, y, x) > bv) {
                    bv = scores.at(k, y, x);
                    best = k;
                }
            out.at(y, x) = static_cast<float>(best);
        }
    return out;
}

int size_multiple(const bb::BackboneConfig& c) {
    int m = c.latent_downsample;
    for (const auto& s : c.feature_scales) m = std::lcm(m, s.spatial_divisor);
    for (const auto& s : c.attention_sites) m = std::lcm(m, s.spatial_divisor);
    return m;
}

int round_to_multiple(double v, int m) {
    const long long k = std::llround(v / m);
    return static_cast<int>(std::max(1ll, k)) * m;
}

struct EvalModel {
    bb::Backbone* backbone = nullptr;
    heads::SegHead* seg = nullptr;
    heads::DepthHead* depth = nullptr;
    heads::DetectionHead* det = nullptr;
};

nn::Tensor seg_scores_for(const EvalModel& m, const nn::Tensor& image,
                          const prompt::ConditioningMatrix& cond) {
    bb::ScaledLatent z = m.backbone->encode_and_scale(image);
    bb::FeatureBundle bundle = m.backbone->extract_features(z, cond);
    return m.seg->predict(bundle).dense;
}

MetricReport eval_impl(const EvalModel& m, const data::DatasetAdapter& ds, const CondPlan& plan,
                       const std::vector<double>& scales, bool flip) {
    MetricReport report;
    report.task = data::task_name(ds.task());
    if (ds.size() == 0) throw ValidationError("cannot evaluate an empty dataset");

    if (ds.task() == heads::Task::Segmentation) {
        const int K = ds.num_classes();
        metrics::MiouAccumulator acc_ss(K, ds.ignore_index());
        metrics::MiouAccumulator acc_ms(K, ds.ignore_index());
        metrics::MiouAccumulator acc_pc(K, ds.ignore_index());
        const int mult = size_multiple(m.backbone->config());
        for (const auto& id : ds.ids()) {
            data::Sample s = ds.load(id);
            const prompt::ConditioningMatrix cond = plan.for_sample(s);
            const int H = s.image.dim(1), W = s.image.dim(2);

            nn::Tensor scores = seg_scores_for(m, s.image, cond);
            nn::Tensor pred_ss = argmax_channels(scores);
            acc_ss.add(pred_ss, s.seg_mask);
            acc_pc.add(pred_ss, s.seg_mask);

            nn::Tensor prob_sum = nn::Tensor::zeros({K, H, W});
            for (double sc : scales) {
                const int Hs = round_to_multiple(H * sc, mult);
                const int Ws = round_to_multiple(W * sc, mult);
                nn::Tensor img =
                    (Hs == H && Ws == W) ? s.image : nn::resize_bilinear(s.image, Hs, Ws);
                for (int f = 0; f < (flip ? 2 : 1); ++f) {
                    nn::Tensor in = f ? hflip_chw(img) : img;
                    nn::Tensor sc_scores = seg_scores_for(m, in, cond);
                    if (f) sc_scores = hflip_chw(sc_scores);
                    nn::Tensor probs = softmax_channels(sc_scores);
                    if (Hs != H || Ws != W) probs = nn::resize_bilinear(probs, H, W);
                    for (std::int64_t i = 0; i < prob_sum.numel(); ++i) prob_sum[i] += probs[i];
                }
            }
            acc_ms.add(argmax_channels(prob_sum), s.seg_mask);
        }
        const metrics::MiouResult ss = acc_ss.result();
        const metrics::MiouResult ms = acc_ms.result();
        report.metrics["mIoU_ss"] = ss.miou;
        report.metrics["mIoU_ms"] = ms.miou;
        for (int c = 0; c < K; ++c)
            if (ss.present[c]) report.per_class[ds.class_names()[c]] = ss.per_class[c];
        return report;
    }

    if (ds.task() == heads::Task::Depth) {
        std::vector<float> pred_px, gt_px;
        for (const auto& id : ds.ids()) {
            data::Sample s = ds.load(id);
            const prompt::ConditioningMatrix cond = plan.for_sample(s);
            bb::ScaledLatent z = m.backbone->encode_and_scale(s.image);
            bb::FeatureBundle bundle = m.backbone->extract_features(z, cond);
            nn::Tensor pred = m.depth->predict(bundle).dense;
            for (std::int64_t i = 0; i < s.depth.numel(); ++i)
                if (s.depth[i] > 0.0f) {
                    pred_px.push_back(pred[i]);
                    gt_px.push_back(s.depth[i]);
                }
        }
        if (pred_px.empty()) throw ValidationError("depth evaluation found no valid pixels");
        const int n = static_cast<int>(pred_px.size());
        nn::Tensor P = nn::Tensor::zeros({1, n}), G = nn::Tensor::zeros({1, n});
        nn::Tensor V = nn::Tensor::full({1, n}, 1.0f);
        std::copy(pred_px.begin(), pred_px.end(), P.data());
        std::copy(gt_px.begin(), gt_px.end(), G.data());
        const metrics::DepthMetrics d = metrics::depth_metrics(P, G, V);
        report.metrics["RMSE"] = d.rmse;
        report.metrics["δ1"] = d.delta1;
        report.metrics["δ2"] = d.delta2;
        report.metrics["δ3"] = d.delta3;
        report.metrics["REL"] = d.rel;
        report.metrics["log10"] = d.log10;
        return report;
    }

    std::vector<std::vector<heads::DetBox>> preds, gts;
    for (const auto& id : ds.ids()) {
        data::Sample s = ds.load(id);
        const prompt::ConditioningMatrix cond = plan.for_sample(s);
        bb::ScaledLatent z = m.backbone->encode_and_scale(s.image);
        bb::FeatureBundle bundle = m.backbone->extract_features(z, cond);
        preds.push_back(m.det->forward(bundle).boxes);
        gts.push_back(s.boxes);
    }
    const metrics::ApResult ap = metrics::detection_ap(preds, gts);
    report.metrics["AP"] = ap.ap;
    report.metrics["AP50"] = ap.ap50;
    for (size_t c = 0; c < ap.per_class_ap.size(); ++c)
        if (ap.per_class_ap[c] >= 0.0f) report.per_class[ds.class_names()[c]] = ap.per_class_ap[c];
    return report;
}

// every piece needed to run or score one configured experiment
struct Workbench {
    std::optional<bb::Backbone> backbone;
    std::unique_ptr<data::DatasetAdapter> dataset;
    std::unique_ptr<text::TextEncoder> enc;
    std::unique_ptr<cap::CaptionCache> cache;
    CondPlan plan;
    bb::VLayout layout;
    std::unique_ptr<heads::SegHead> seg;
    std::unique_ptr<heads::DepthHead> depth;
    std::unique_ptr<heads::AnchorDetectionHead> det;
    Schedule schedule;

    EvalModel model() { return {&*backbone, seg.get(), depth.get(), det.get()}; }
    std::vector<nn::Var> head_params() {
        std::map<std::string, nn::Var>* p = nullptr;
        if (seg) p = &seg->params();
        if (depth) p = &depth->params();
        if (det) p = &det->params();
        std::vector<nn::Var> out;
        for (auto& [k, v] : *p) out.push_back(v);
        return out;
    }
};

Workbench assemble(const cfg::ExperimentConfig& c) {
    c.validate();
    Workbench w;
    w.schedule = schedule_from_config(c.schedule);

    w.dataset = data::open_dataset(c.dataset.root);
    if (data::task_from_name(c.task) != w.dataset->task())
        throw ValidationError("config task '" + c.task + "' does not match the dataset task '" +
                              data::task_name(w.dataset->task()) + "'");

    if (c.modifier.kind == "dreambooth" && !c.modifier.backbone_checkpoint.empty())
        w.backbone = bb::Backbone::from_checkpoint(c.modifier.backbone_checkpoint);
    else
        w.backbone = load_backbone_spec(c.backbone);
    const bb::BackboneConfig& bcfg = w.backbone->config();

    w.enc = std::make_unique<text::TextEncoder>(bcfg.embed_dim, bcfg.max_text_tokens);
    domain::DomainModifier modifier = modifier_from_config(c.modifier, *w.enc);

    if (!c.captions.cache_dir.empty())
        w.cache = std::make_unique<cap::CaptionCache>(open_caption_cache(c));
    w.plan = make_cond_plan(c, *w.dataset, *w.enc, w.cache.get(), std::move(modifier));

    w.layout = bb::derive_layout(bcfg, w.plan.tokens());
    const std::uint64_t head_seed = Rng(c.seed).fork(0x6ead).next_u64();
    switch (w.dataset->task()) {
        case heads::Task::Segmentation:
            w.seg = std::make_unique<heads::SegHead>(w.layout, w.dataset->num_classes(),
                                                     c.head.width, c.head.shuffle, head_seed);
            break;
        case heads::Task::Depth:
            w.depth = std::make_unique<heads::DepthHead>(
                w.layout, static_cast<float>(c.head.min_depth),
                static_cast<float>(c.head.max_depth), c.head.width, c.head.shuffle, head_seed);
            break;
        case heads::Task::Detection: {
            heads::DetectionConfig dc;
            dc.num_classes = w.dataset->num_classes();
            dc.width = c.head.width;
            w.det = std::make_unique<heads::AnchorDetectionHead>(w.layout, dc, head_seed);
            break;
        }
    }

    if (!c.head.checkpoint.empty()) {
        io::LoadedTensors loaded = io::load_tensors(c.head.checkpoint);
        std::map<std::string, nn::Var>* params = nullptr;
        if (w.seg) params = &w.seg->params();
        if (w.depth) params = &w.depth->params();
        if (w.det) params = &w.det->params();
        for (auto& [name, var] : *params) {
            auto it = loaded.tensors.find(name);
            if (it == loaded.tensors.end())
                throw ValidationError("head checkpoint " + c.head.checkpoint +
                                      " is missing parameter '" + name + "'");
            if (it->second.numel() != var->value.numel())
                throw ValidationError("head checkpoint parameter '" + name + "' has wrong size");
            var->value = it->second;
        }
        for (const auto& [name, t] : loaded.tensors)
            if (!params->count(name))
                throw ValidationError("head checkpoint has unexpected parameter '" + name + "'");
    }
    return w;
}

void save_head_params(const std::string& path, const std::map<std::string, nn::Var>& params) {
    std::map<std::string, nn::Tensor> out;
    for (const auto& [k, v] : params) out[k] = v->value;
    io::save_tensors(path, out);
}

std::string json_number(double v) {
    json j = v;
    return j.dump();
}

}  // namespace

TrainResult train(const cfg::ExperimentConfig& c) {
    Workbench w = assemble(c);
    const Schedule& s = w.schedule;
    const int n = w.dataset->size();
    const int micro = s.batch_size * s.grad_accumulation;
    const int steps_per_epoch = std::max(1, (n + micro - 1) / micro);
    const int total_steps = s.epoch_based ? s.amount * steps_per_epoch : s.amount;

    const fs::path run_dir = fs::path(c.output) / c.name;
    fs::create_directories(run_dir);
    {
        std::ofstream out(run_dir / "config.resolved", std::ios::binary);
        out << c.to_json();
    }

    // everything is loaded once; the synthetic sets are small by design
    std::vector<data::Sample> samples;
    std::vector<bb::ScaledLatent> latents;
    std::vector<nn::Tensor> conds;
    for (const auto& id : w.dataset->ids()) {
        samples.push_back(w.dataset->load(id));
        latents.push_back(w.backbone->encode_and_scale(samples.back().image));
        conds.push_back(w.plan.for_sample(samples.back()).embeddings);
    }

    std::vector<nn::Var> head_params = w.head_params();
    nn::AdamW opt = build_optimizer(*w.backbone, head_params, s);
    nn::LrSchedule lrs{s.warmup_iters, s.warmup_ratio, total_steps, 1.0f};

    Rng order_rng = Rng(c.seed).fork(0x05de5);
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    int cursor = n;  // forces a shuffle before the first step

    std::ofstream log(run_dir / "metrics.jsonl", std::ios::binary);
    if (!log) throw Error("cannot write " + (run_dir / "metrics.jsonl").string());

    TrainResult result;
    result.run_dir = run_dir.string();
    result.steps = total_steps;

    EvalModel em = w.model();
    for (int step = 0; step < total_steps; ++step) {
        opt.zero_grad();
        double batch_loss = 0.0;
        for (int k = 0; k < micro; ++k) {
            if (cursor >= n) {
                for (int i = n - 1; i > 0; --i)
                    std::swap(order[i], order[static_cast<int>(order_rng.uniform_int(0, i))]);
                cursor = 0;
            }
            const int idx = order[cursor++];
            nn::Var cond = nn::constant(conds[idx]);
            bb::FeatureBundleV bundle = w.backbone->extract_features_v(latents[idx], cond, true);
            nn::Var loss;
            if (w.seg)
                loss = heads::seg_loss(w.seg->forward(bundle.pyramid, true), samples[idx].seg_mask,
                                       w.dataset->ignore_index());
            else if (w.depth)
                loss = heads::depth_loss(w.depth->forward(bundle.pyramid, true), samples[idx].depth);
            else
                loss = w.det->loss(bundle.pyramid, samples[idx].boxes);
            batch_loss += static_cast<double>(loss->value[0]) / micro;
            nn::backward(nn::vscale(loss, 1.0f / static_cast<float>(micro)));
        }
        const float mult = lrs.multiplier(step);
        opt.step(mult);

        if (step == 0) result.first_loss = static_cast<float>(batch_loss);
        if (step == total_steps - 1) result.final_loss = static_cast<float>(batch_loss);

        if (step % c.log_every == 0 || step == total_steps - 1)
            log << "{\"step\": " << (step + 1) << ", \"loss\": " << json_number(batch_loss)
                << ", \"lr_mult\": " << json_number(mult) << "}\n";

        const bool last = step == total_steps - 1;
        if (c.eval.every > 0 && ((step + 1) % c.eval.every == 0) && !last) {
            MetricReport r = eval_impl(em, *w.dataset, w.plan, c.eval.scales, c.eval.flip);
            json jm = r.metrics;
            log << "{\"step\": " << (step + 1) << ", \"eval\": " << jm.dump() << "}\n";
        }
        if (c.checkpoint_every > 0 && ((step + 1) % c.checkpoint_every == 0) && !last) {
            const fs::path ck = run_dir / "checkpoints" / ("step_" + std::to_string(step + 1));
            fs::create_directories(ck);
            w.backbone->save_checkpoint((ck / "backbone.safetensors").string());
            std::map<std::string, nn::Var>* p = nullptr;
            if (w.seg) p = &w.seg->params();
            if (w.depth) p = &w.depth->params();
            if (w.det) p = &w.det->params();
            save_head_params((ck / "head.safetensors").string(), *p);
        }
    }

    MetricReport final_eval = eval_impl(em, *w.dataset, w.plan, c.eval.scales, c.eval.flip);
    final_eval.config_hash = c.hash();
    final_eval.seed = c.seed;
    final_eval.git_rev = current_git_rev(".");
    {
        json jm = final_eval.metrics;
        log << "{\"step\": " << total_steps << ", \"eval\": " << jm.dump() << "}\n";
    }
    log.close();

    const fs::path ck = run_dir / "checkpoints" / ("step_" + std::to_string(total_steps));
    fs::create_directories(ck);
    w.backbone->save_checkpoint((ck / "backbone.safetensors").string());
    {
        std::map<std::string, nn::Var>* p = nullptr;
        if (w.seg) p = &w.seg->params();
        if (w.depth) p = &w.depth->params();
        if (w.det) p = &w.det->params();
        save_head_params((ck / "head.safetensors").string(), *p);
    }
    {
        std::ofstream rep(run_dir / "report.json", std::ios::binary);
        rep << final_eval.to_json();
    }
    result.eval = final_eval;
    return result;
}

MetricReport evaluate(const cfg::ExperimentConfig& c) {
    Workbench w = assemble(c);
    MetricReport r = eval_impl(w.model(), *w.dataset, w.plan, c.eval.scales, c.eval.flip);
    r.config_hash = c.hash();
    r.seed = c.seed;
    r.git_rev = current_git_rev(".");
    return r;
}

cap::CaptionCache open_caption_cache(const cfg::ExperimentConfig& c) {
    if (c.captions.cache_dir.empty())
        throw ValidationError("captions.cache_dir must be set to work with caption caches");
    const std::string dataset_name =
        c.dataset.name.empty() ? fs::path(c.dataset.root).filename().string() : c.dataset.name;
    cap::CaptionCache cache(c.captions.cache_dir, dataset_name, "caption", c.builder.min_tokens);
    if (fs::exists(cache.path())) cache.load();
    return cache;
}

PredBatch predict_segmentation(const cfg::ExperimentConfig& c) {
    Workbench w = assemble(c);
    if (!w.seg)
        throw ValidationError("per-image predictions need a segmentation experiment, got task '" +
                              c.task + "'");
    EvalModel m = w.model();
    const int K = w.dataset->num_classes();
    PredBatch out;
    for (const auto& id : w.dataset->ids()) {
        data::Sample s = w.dataset->load(id);
        const prompt::ConditioningMatrix cond = w.plan.for_sample(s);
        nn::Tensor pred = argmax_channels(seg_scores_for(m, s.image, cond));
        metrics::MiouAccumulator acc(K, w.dataset->ignore_index());
        acc.add(pred, s.seg_mask);
        out.ids.push_back(id);
        out.preds.push_back(std::move(pred));
        out.gts.push_back(s.seg_mask);
        out.miou.push_back(acc.result().miou);
    }
    return out;
}

ConfusionPair pixel_confusion(const cfg::ExperimentConfig& c) {
    Workbench w = assemble(c);
    if (!w.seg)
        throw ValidationError("pixel confusion needs a segmentation experiment, got task '" +
                              c.task + "'");
    return pixel_confusion(*w.backbone, *w.seg, *w.dataset, *w.enc, c.builder.pad_tokens);
}

// ---------------------------------------------------------------------------
// analyses
// ---------------------------------------------------------------------------

namespace {

std::vector<float> unit_vector(const nn::Tensor& t) {
    std::vector<float> v(t.data(), t.data() + t.numel());
    double norm = 0;
    for (float x : v) norm += (double)x * x;
    norm = std::sqrt(norm);
    if (norm > 0)
        for (float& x : v) x = static_cast<float>(x / norm);
    return v;
}

double cosine(const std::vector<float>& a, const std::vector<float>& b) {
    double d = 0;
    for (size_t i = 0; i < a.size(); ++i) d += (double)a[i] * b[i];
    return d;
}

}  // namespace

RecallAnalysis caption_recall_analysis(const std::map<std::string, std::string>& captions,
                                       const std::map<std::string, std::vector<int>>& present,
                                       const std::vector<std::string>& class_names,
                                       const text::TextEncoder& enc,
                                       const std::map<std::string, double>& per_image_miou,
                                       float cosine_threshold) {
    RecallAnalysis out;
    std::map<std::string, std::vector<float>> word_cache;
    auto vec_of = [&](const std::string& w) -> const std::vector<float>& {
        auto it = word_cache.find(w);
        if (it == word_cache.end())
            it = word_cache.emplace(w, unit_vector(enc.word_vector(w))).first;
        return it->second;
    };

    std::vector<float> recalls, mious;
    for (const auto& [id, caption] : captions) {
        auto pit = present.find(id);
        if (pit == present.end())
            throw ValidationError("no present-class list for image '" + id + "'");
        RecallRow row;
        row.image_id = id;
        const std::vector<std::string> words = enc.tokenize(caption);
        int hit = 0;
        for (int cls : pit->second) {
            if (cls < 0 || cls >= static_cast<int>(class_names.size()))
                throw ValidationError("present class index out of range for image '" + id + "'");
            const std::vector<std::string> name_words = enc.tokenize(class_names[cls]);
            bool all = !name_words.empty();
            for (const auto& nw : name_words) {
                bool matched = false;
                for (const auto& w : words)
                    if (cosine(vec_of(nw), vec_of(w)) >= cosine_threshold) {
                        matched = true;
                        break;
                    }
                if (!matched) all = false;
            }
            if (all)
                ++hit;
            else
                row.missing.push_back(class_names[cls]);
        }
        row.recall = pit->second.empty() ? 1.0 : static_cast<double>(hit) / pit->second.size();
        auto mit = per_image_miou.find(id);
        row.miou = (mit == per_image_miou.end()) ? std::nan("") : mit->second;
        if (mit != per_image_miou.end()) {
            recalls.push_back(static_cast<float>(row.recall));
            mious.push_back(static_cast<float>(row.miou));
        }
        out.rows.push_back(std::move(row));
    }
    out.correlation = metrics::pearson_r(recalls, mious);
    return out;
}

SizeAnalysis object_size_analysis(const std::vector<std::string>& ids,
                                  const std::vector<nn::Tensor>& preds,
                                  const std::vector<nn::Tensor>& gts, int num_classes,
                                  int ignore_index) {
    if (ids.size() != preds.size() || ids.size() != gts.size())
        throw ValidationError("object_size_analysis needs one prediction and one mask per id");
    SizeAnalysis out;
    std::vector<float> sizes, ious;
    for (size_t i = 0; i < ids.size(); ++i) {
        const nn::Tensor& p = preds[i];
        const nn::Tensor& g = gts[i];
        if (p.numel() != g.numel())
            throw ValidationError("prediction and mask shapes differ for image '" + ids[i] + "'");
        std::vector<long long> gt_c(num_classes, 0), pred_c(num_classes, 0), inter(num_classes, 0);
        long long valid = 0;
        for (std::int64_t px = 0; px < g.numel(); ++px) {
            const int gv = static_cast<int>(g[px]);
            if (gv == ignore_index) continue;
            ++valid;
            const int pv = static_cast<int>(p[px]);
            if (gv >= 0 && gv < num_classes) ++gt_c[gv];
            if (pv >= 0 && pv < num_classes) ++pred_c[pv];
            if (pv == gv) ++inter[gv];
        }
        for (int cls = 0; cls < num_classes; ++cls) {
            if (gt_c[cls] == 0) continue;
            SizeRow row;
            row.image_id = ids[i];
            row.cls = cls;
            row.rel_size = valid > 0 ? static_cast<double>(gt_c[cls]) / valid : 0.0;
            const long long uni = gt_c[cls] + pred_c[cls] - inter[cls];
            row.iou = uni > 0 ? static_cast<double>(inter[cls]) / uni : 0.0;
            sizes.push_back(static_cast<float>(row.rel_size));
            ious.push_back(static_cast<float>(row.iou));
            out.rows.push_back(std::move(row));
        }
    }
    out.correlation = metrics::pearson_r(sizes, ious);
    return out;
}

ConfusionPair pixel_confusion(const bb::Backbone& backbone, const heads::SegHead& head,
                              const data::DatasetAdapter& dataset, const text::TextEncoder& enc,
                              int pad_tokens) {
    if (dataset.task() != heads::Task::Segmentation)
        throw ValidationError("pixel confusion needs a segmentation dataset");
    const int K = dataset.num_classes();
    if (head.num_classes() != K)
        throw ValidationError("head classes do not match the dataset class count");
    if (pad_tokens < 1) throw ValidationError("pad_tokens must be >= 1");

    std::vector<int> all_idx(K);
    std::iota(all_idx.begin(), all_idx.end(), 0);
    const std::string all_text = prompt::join_class_names(dataset.class_names(), all_idx);

    std::vector<std::vector<double>> acc_o(K, std::vector<double>(K, 0.0));
    std::vector<std::vector<double>> acc_a(K, std::vector<double>(K, 0.0));
    std::vector<long long> count(K, 0);

    for (const auto& id : dataset.ids()) {
        data::Sample s = dataset.load(id);
        const std::string oracle_text =
            prompt::build_oracle(s.seg_mask, dataset.class_names(), dataset.ignore_index());
        bb::ScaledLatent z = backbone.encode_and_scale(s.image);
        for (int variant = 0; variant < 2; ++variant) {
            const prompt::ConditioningMatrix cond = prompt::build_from_caption(
                variant == 0 ? oracle_text : all_text, enc, pad_tokens);
            bb::FeatureBundle bundle = backbone.extract_features(z, cond);
            nn::Tensor probs = softmax_channels(head.predict(bundle).dense);
            auto& acc = variant == 0 ? acc_o : acc_a;
            const int H = probs.dim(1), W = probs.dim(2);
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) {
                    const int g = static_cast<int>(s.seg_mask.at(y, x));
                    if (g == dataset.ignore_index() || g < 0 || g >= K) continue;
                    for (int k = 0; k < K; ++k) acc[g][k] += probs.at(k, y, x);
                    if (variant == 0) ++count[g];
                }
        }
    }

    ConfusionPair out;
    out.oracle = nn::Tensor::zeros({K, K});
    out.all_names = nn::Tensor::zeros({K, K});
    out.gt_pixels = nn::Tensor::zeros({K});
    for (int g = 0; g < K; ++g) {
        out.gt_pixels.at(g) = static_cast<float>(count[g]);
        if (count[g] == 0) continue;
        for (int k = 0; k < K; ++k) {
            out.oracle.at(g, k) = static_cast<float>(acc_o[g][k] / count[g]);
            out.all_names.at(g, k) = static_cast<float>(acc_a[g][k] / count[g]);
        }
    }
    return out;
}

std::vector<AttentionPanel> copy_paste_probe(
    const nn::Tensor& image, const std::vector<std::string>& tokens,
    const std::vector<std::tuple<nn::Tensor, int, int>>& patches, const bb::Backbone& backbone,
    const text::TextEncoder& enc, int out_resolution) {
    if (tokens.empty()) throw ValidationError("the probe needs at least one token");
    const int H = image.dim(1), W = image.dim(2);
    if (out_resolution < 1) out_resolution = H / backbone.config().latent_downsample;

    std::string caption;
    for (const auto& t : tokens) caption += (caption.empty() ? "" : " ") + t;
    const prompt::ConditioningMatrix cond = prompt::build_from_caption(caption, enc, 0);

    std::vector<int> rows;
    for (const auto& t : tokens) {
        int found = -1;
        for (size_t i = 0; i < cond.token_texts.size(); ++i)
            if (cond.token_texts[i] == t) {
                found = static_cast<int>(i);
                break;
            }
        if (found < 0)
            throw ValidationError("token '" + t + "' did not survive encoding; use plain words");
        rows.push_back(found);
    }

    std::vector<nn::Tensor> variants;
    variants.push_back(image);
    for (size_t p = 0; p < patches.size(); ++p) {
        const auto& [patch, top, left] = patches[p];
        if (patch.ndim() != 3 || patch.dim(0) != image.dim(0))
            throw ValidationError("patch " + std::to_string(p) +
                                  " must have the image's channel count");
        const int ph = patch.dim(1), pw = patch.dim(2);
        if (top < 0 || left < 0 || top + ph > H || left + pw > W)
            throw ValidationError("patch " + std::to_string(p) + " exceeds the image bounds");
        nn::Tensor v = image;
        for (int ch = 0; ch < patch.dim(0); ++ch)
            for (int y = 0; y < ph; ++y)
                for (int x = 0; x < pw; ++x) v.at(ch, top + y, left + x) = patch.at(ch, y, x);
        variants.push_back(std::move(v));
    }

    std::vector<nn::Tensor> aggs;
    for (const auto& v : variants) {
        bb::ScaledLatent z = backbone.encode_and_scale(v);
        bb::FeatureBundle bundle = backbone.extract_features(z, cond);
        aggs.push_back(bb::aggregate_attention(bundle, out_resolution));
    }

    std::vector<AttentionPanel> panels;
    for (size_t t = 0; t < tokens.size(); ++t)
        for (size_t v = 0; v < variants.size(); ++v) {
            AttentionPanel p;
            p.token = tokens[t];
            p.variant = static_cast<int>(v);
            p.map = nn::Tensor::zeros({out_resolution, out_resolution});
            for (int y = 0; y < out_resolution; ++y)
                for (int x = 0; x < out_resolution; ++x)
                    p.map.at(y, x) = aggs[v].at(rows[t], y, x);
            panels.push_back(std::move(p));
        }
    return panels;
}

}  // namespace tadp::tr
