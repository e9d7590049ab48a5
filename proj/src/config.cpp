#include "tadp/config.hpp"

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include <json.hpp>

#include "tadp/dataset.hpp"
#include "tadp/domain.hpp"
#include "tadp/error.hpp"
#include "tadp/prompting.hpp"
#include "tadp/rng.hpp"

using nlohmann::json;

namespace tadp::cfg {

std::string interpolate_env(const std::string& s) {
    std::string out;
    size_t i = 0;
    while (i < s.size()) {
        if (s[i] == '$' && i + 1 < s.size() && s[i + 1] == '{') {
            const size_t end = s.find('}', i + 2);
            if (end == std::string::npos)
                throw ValidationError("unterminated ${ in config value '" + s + "'");
            const std::string var = s.substr(i + 2, end - i - 2);
            if (var.empty() || var.find('$') != std::string::npos)
                throw ValidationError("malformed environment reference in config value '" + s + "'");
            const char* v = std::getenv(var.c_str());
            if (!v)
                throw ValidationError("environment variable '" + var +
                                      "' referenced by config is not set");
            out += v;
            i = end + 1;
        } else {
            out += s[i++];
        }
    }
    if (out.find("${") != std::string::npos)
        throw ValidationError("config value still contains ${ after substitution: '" + out + "'");
    return out;
}

namespace {

void interpolate_tree(json& j) {
    if (j.is_string()) {
        j = interpolate_env(j.get<std::string>());
    } else if (j.is_object() || j.is_array()) {
        for (auto& e : j) interpolate_tree(e);
    }
}

void expect_keys(const json& j, const std::string& where, const std::set<std::string>& allowed) {
    if (!j.is_object()) throw ValidationError("config section '" + where + "' must be an object");
    for (const auto& [k, v] : j.items())
        if (!allowed.count(k))
            throw ValidationError("unknown config key '" + (where.empty() ? k : where + "." + k) + "'");
}

template <typename T>
void take(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json_text(const std::string& text) {
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded()) throw ValidationError("config is not valid JSON");
    interpolate_tree(j);
    expect_keys(j, "", {"name", "task", "dataset", "builder", "modifier", "schedule", "backbone",
                        "seed", "output", "captions", "eval", "head", "log_every",
                        "checkpoint_every"});

    ExperimentConfig c;
    take(j, "name", c.name);
    take(j, "task", c.task);
    take(j, "backbone", c.backbone);
    take(j, "seed", c.seed);
    take(j, "output", c.output);
    take(j, "log_every", c.log_every);
    take(j, "checkpoint_every", c.checkpoint_every);

    if (j.contains("dataset")) {
        const json& d = j.at("dataset");
        expect_keys(d, "dataset", {"name", "root", "split"});
        take(d, "name", c.dataset.name);
        take(d, "root", c.dataset.root);
        take(d, "split", c.dataset.split);
    }
    if (j.contains("builder")) {
        const json& b = j.at("builder");
        expect_keys(b, "builder", {"strategy", "min_tokens", "pad_tokens", "precision", "recall"});
        take(b, "strategy", c.builder.strategy);
        take(b, "min_tokens", c.builder.min_tokens);
        take(b, "pad_tokens", c.builder.pad_tokens);
        take(b, "precision", c.builder.precision);
        take(b, "recall", c.builder.recall);
    }
    if (j.contains("modifier")) {
        const json& m = j.at("modifier");
        expect_keys(m, "modifier", {"kind", "domain", "token_file", "backbone_checkpoint"});
        take(m, "kind", c.modifier.kind);
        take(m, "domain", c.modifier.domain);
        take(m, "token_file", c.modifier.token_file);
        take(m, "backbone_checkpoint", c.modifier.backbone_checkpoint);
    }
    if (j.contains("schedule")) {
        const json& s = j.at("schedule");
        expect_keys(s, "schedule", {"name", "overrides"});
        take(s, "name", c.schedule.name);
        if (s.contains("overrides")) {
            const json& o = s.at("overrides");
            expect_keys(o, "schedule.overrides",
                        {"lr", "batch_size", "weight_decay", "warmup_iters", "warmup_ratio",
                         "backbone_lr_scale", "grad_accumulation", "amount", "drop_path"});
            auto opt_d = [&](const char* k, std::optional<double>& out) {
                if (o.contains(k)) out = o.at(k).get<double>();
            };
            auto opt_i = [&](const char* k, std::optional<int>& out) {
                if (o.contains(k)) out = o.at(k).get<int>();
            };
            opt_d("lr", c.schedule.overrides.lr);
            opt_d("weight_decay", c.schedule.overrides.weight_decay);
            opt_d("warmup_ratio", c.schedule.overrides.warmup_ratio);
            opt_d("backbone_lr_scale", c.schedule.overrides.backbone_lr_scale);
            opt_d("drop_path", c.schedule.overrides.drop_path);
            opt_i("batch_size", c.schedule.overrides.batch_size);
            opt_i("warmup_iters", c.schedule.overrides.warmup_iters);
            opt_i("grad_accumulation", c.schedule.overrides.grad_accumulation);
            opt_i("amount", c.schedule.overrides.amount);
        }
    }
    if (j.contains("captions")) {
        const json& cc = j.at("captions");
        expect_keys(cc, "captions", {"cache_dir"});
        take(cc, "cache_dir", c.captions.cache_dir);
    }
    if (j.contains("eval")) {
        const json& e = j.at("eval");
        expect_keys(e, "eval", {"scales", "flip", "every"});
        take(e, "scales", c.eval.scales);
        take(e, "flip", c.eval.flip);
        take(e, "every", c.eval.every);
    }
    if (j.contains("head")) {
        const json& h = j.at("head");
        expect_keys(h, "head", {"width", "shuffle", "min_depth", "max_depth", "checkpoint"});
        take(h, "width", c.head.width);
        take(h, "shuffle", c.head.shuffle);
        take(h, "min_depth", c.head.min_depth);
        take(h, "max_depth", c.head.max_depth);
        take(h, "checkpoint", c.head.checkpoint);
    }
    c.validate();
    return c;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot read config file " + path);
    std::ostringstream os;
    os << in.rdbuf();
    return from_json_text(os.str());
}

std::string ExperimentConfig::to_json() const {
    json j;
    j["name"] = name;
    j["task"] = task;
    j["dataset"] = {{"name", dataset.name}, {"root", dataset.root}, {"split", dataset.split}};
    j["builder"] = {{"strategy", builder.strategy},
                    {"min_tokens", builder.min_tokens},
                    {"pad_tokens", builder.pad_tokens},
                    {"precision", builder.precision},
                    {"recall", builder.recall}};
    j["modifier"] = {{"kind", modifier.kind},
                     {"domain", modifier.domain},
                     {"token_file", modifier.token_file},
                     {"backbone_checkpoint", modifier.backbone_checkpoint}};
    json ov = json::object();
    auto put_d = [&](const char* k, const std::optional<double>& v) {
        if (v) ov[k] = *v;
    };
    auto put_i = [&](const char* k, const std::optional<int>& v) {
        if (v) ov[k] = *v;
    };
    put_d("lr", schedule.overrides.lr);
    put_d("weight_decay", schedule.overrides.weight_decay);
    put_d("warmup_ratio", schedule.overrides.warmup_ratio);
    put_d("backbone_lr_scale", schedule.overrides.backbone_lr_scale);
    put_d("drop_path", schedule.overrides.drop_path);
    put_i("batch_size", schedule.overrides.batch_size);
    put_i("warmup_iters", schedule.overrides.warmup_iters);
    put_i("grad_accumulation", schedule.overrides.grad_accumulation);
    put_i("amount", schedule.overrides.amount);
    j["schedule"] = {{"name", schedule.name}, {"overrides", ov}};
    j["backbone"] = backbone;
    j["seed"] = seed;
    j["output"] = output;
    j["captions"] = {{"cache_dir", captions.cache_dir}};
    j["eval"] = {{"scales", eval.scales}, {"flip", eval.flip}, {"every", eval.every}};
    j["head"] = {{"width", head.width},
                 {"shuffle", head.shuffle},
                 {"min_depth", head.min_depth},
                 {"max_depth", head.max_depth},
                 {"checkpoint", head.checkpoint}};
    j["log_every"] = log_every;
    j["checkpoint_every"] = checkpoint_every;
    return j.dump(2) + "\n";
}

std::string ExperimentConfig::hash() const {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << fnv1a64(to_json());
    return os.str();
}

void ExperimentConfig::validate() const {
    if (name.empty()) throw ValidationError("config name must not be empty");
    data::task_from_name(task);
    prompt::strategy_from_name(builder.strategy);
    domain::kind_from_name(modifier.kind);
    if (builder.min_tokens < 1) throw ValidationError("builder.min_tokens must be >= 1");
    if (builder.pad_tokens < 0) throw ValidationError("builder.pad_tokens must be >= 0");
    if (builder.precision <= 0.0 || builder.precision > 1.0)
        throw ValidationError("builder.precision must be in (0, 1]");
    if (builder.recall <= 0.0 || builder.recall > 1.0)
        throw ValidationError("builder.recall must be in (0, 1]");
    if (backbone.rfind("stub:", 0) == 0) {
        const std::string rest = backbone.substr(5);
        if (rest.empty() || rest.find_first_not_of("0123456789") != std::string::npos)
            throw ValidationError("stub backbone spec needs a numeric seed, got '" + backbone + "'");
    } else if (backbone.rfind("real:", 0) == 0) {
        if (backbone.size() == 5)
            throw ValidationError("real backbone spec needs a checkpoint path");
    } else {
        throw ValidationError("backbone must be 'stub:<seed>' or 'real:<path>', got '" + backbone +
                              "'");
    }
    if (eval.scales.empty()) throw ValidationError("eval.scales must not be empty");
    for (double s : eval.scales)
        if (s <= 0.0 || s > 4.0) throw ValidationError("eval scale out of range (0, 4]");
    if (eval.every < 0) throw ValidationError("eval.every must be >= 0");
    if (head.width < 1 || head.shuffle < 1) throw ValidationError("head width/shuffle must be >= 1");
    if (head.min_depth <= 0.0 || head.max_depth <= head.min_depth)
        throw ValidationError("head depth range must satisfy 0 < min < max");
    if (log_every < 1) throw ValidationError("log_every must be >= 1");
    if (checkpoint_every < 0) throw ValidationError("checkpoint_every must be >= 0");
    const auto& o = schedule.overrides;
    if (o.lr && *o.lr <= 0.0) throw ValidationError("schedule.overrides.lr must be > 0");
    if (o.batch_size && *o.batch_size < 1)
        throw ValidationError("schedule.overrides.batch_size must be >= 1");
    if (o.grad_accumulation && *o.grad_accumulation < 1)
        throw ValidationError("schedule.overrides.grad_accumulation must be >= 1");
    if (o.amount && *o.amount < 1) throw ValidationError("schedule.overrides.amount must be >= 1");
    if (o.warmup_iters && *o.warmup_iters < 0)
        throw ValidationError("schedule.overrides.warmup_iters must be >= 0");
    if (o.backbone_lr_scale && *o.backbone_lr_scale <= 0.0)
        throw ValidationError("schedule.overrides.backbone_lr_scale must be > 0");
}

}  // namespace tadp::cfg
