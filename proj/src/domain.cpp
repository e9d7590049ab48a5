#include "tadp/domain.hpp"

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "tadp/error.hpp"
#include "tadp/image_io.hpp"
#include "tadp/optim.hpp"
#include "tadp/rng.hpp"

namespace tadp::domain {

using nn::Tensor;
using nn::Var;
namespace fs = std::filesystem;

namespace {

bool style_domain(const std::string& d) { return d == "watercolor" || d == "comic"; }
bool night_domain(const std::string& d) { return d == "night"; }

void require_known_domain(const std::string& d) {
    if (!style_domain(d) && !night_domain(d)) {
        throw ValidationError("no built-in templates for domain '" + d +
                              "'; fill in style_text and style_word explicitly");
    }
}

std::string replace_all(std::string text, const std::string& from, const std::string& to) {
    size_t pos = 0;
    while ((pos = text.find(from, pos)) != std::string::npos) {
        text.replace(pos, from.size(), to);
        pos += to.size();
    }
    return text;
}

std::string instantiate(const std::string& tmpl, const std::string& style_word,
                        const std::string& caption) {
    return replace_all(replace_all(tmpl, "{STYLE}", style_word), "{CAPTION}", caption);
}

void write_u32(std::ofstream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::ifstream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
           static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
}

std::vector<Tensor> encode_image_set(const bb::Backbone& backbone,
                                     const std::vector<std::string>& paths) {
    std::vector<Tensor> latents;
    latents.reserve(paths.size());
    for (const auto& path : paths) {
        latents.push_back(backbone.encode_and_scale(img::load_image_chw(path)).values);
    }
    return latents;
}

Tensor normal_like(const Tensor& t, Rng& rng) {
    Tensor out(t.shape());
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = rng.normal_f();
    return out;
}

struct TrainSetup {
    text::AffineEncoding prompt;
    std::vector<Tensor> latents;
    Tensor init_embedding;  // [1, D]
};

TrainSetup prepare_training(const PersonalizationConfig& cfg, const bb::Backbone& backbone,
                            const text::TextEncoder& encoder, const std::string& prompt_text,
                            const std::string& token, const std::string& init_word) {
    cfg.validate();
    if (backbone.is_stub()) {
        throw ValidationError("personalization needs pretrained weights; load a checkpoint first");
    }
    if (cfg.image_set.empty()) throw ValidationError("personalization needs a non-empty image set");
    if (prompt_text.find(token) == std::string::npos) {
        throw ValidationError("prompt \"" + prompt_text + "\" does not mention the token " + token);
    }
    if (token.size() < 3 || token.front() != '<' || token.back() != '>') {
        throw ValidationError("learned tokens must look like <name>, got " + token);
    }
    TrainSetup setup;
    setup.prompt = encoder.encode_affine(prompt_text, token);
    setup.latents = encode_image_set(backbone, cfg.image_set);
    setup.init_embedding = encoder.word_vector(init_word).reshaped({1, encoder.embed_dim()});
    return setup;
}

void run_training_loop(const PersonalizationConfig& cfg, const bb::Backbone& backbone,
                       const TrainSetup& setup, const Var& embedding, nn::AdamW& opt,
                       bool train_backbone) {
    Rng rng(cfg.seed);
    const int total_steps = backbone.schedule().total_steps;
    const int micro = cfg.batch_size * cfg.grad_accumulation;
    for (int step = 0; step < cfg.steps; ++step) {
        opt.zero_grad();
        for (int sample = 0; sample < micro; ++sample) {
            const Tensor& z0 =
                setup.latents[static_cast<size_t>(rng.uniform_int(0, static_cast<std::int64_t>(setup.latents.size()) - 1))];
            int t = static_cast<int>(rng.uniform_int(0, total_steps - 1));
            Tensor eps = normal_like(z0, rng);
            Var loss = denoise_match_loss(backbone, setup.prompt, embedding, z0, t, eps, train_backbone);
            nn::backward(nn::vscale(loss, 1.0f / static_cast<float>(micro)));
        }
        opt.step();
    }
}

}  // namespace

std::string kind_name(ModifierKind k) {
    switch (k) {
        case ModifierKind::Null: return "null";
        case ModifierKind::Simple: return "simple";
        case ModifierKind::TextualInversion: return "textual_inversion";
        case ModifierKind::DreamBooth: return "dreambooth";
        case ModifierKind::NearbyDomain: return "nearby_domain";
        case ModifierKind::UnrelatedDomain: return "unrelated_domain";
    }
    throw ValidationError("unknown modifier kind");
}

ModifierKind kind_from_name(const std::string& name) {
    for (ModifierKind k : {ModifierKind::Null, ModifierKind::Simple, ModifierKind::TextualInversion,
                           ModifierKind::DreamBooth, ModifierKind::NearbyDomain,
                           ModifierKind::UnrelatedDomain}) {
        if (kind_name(k) == name) return k;
    }
    throw ValidationError("unknown modifier kind '" + name + "'");
}

void LearnedToken::save(const std::string& path) const {
    if (token.empty() || embedding.numel() == 0) throw ValidationError("cannot save an empty token");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path);
    write_u32(out, static_cast<std::uint32_t>(embedding.numel()));
    write_u32(out, static_cast<std::uint32_t>(token.size()));
    out.write(token.data(), static_cast<std::streamsize>(token.size()));
    for (std::int64_t i = 0; i < embedding.numel(); ++i) {
        float v = embedding[i];
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        write_u32(out, bits);
    }
    if (!out) throw Error("short write to " + path);
}

LearnedToken LearnedToken::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot read token file " + path);
    std::uint32_t dim = read_u32(in);
    std::uint32_t token_len = read_u32(in);
    if (!in || dim == 0 || dim > (1u << 20) || token_len == 0 || token_len > 256) {
        throw ValidationError("malformed token file " + path);
    }
    LearnedToken tok;
    tok.token.resize(token_len);
    in.read(tok.token.data(), token_len);
    tok.embedding = Tensor({static_cast<int>(dim)});
    for (std::uint32_t i = 0; i < dim; ++i) {
        std::uint32_t bits = read_u32(in);
        std::memcpy(&tok.embedding[i], &bits, 4);
    }
    if (!in) throw ValidationError("truncated token file " + path);
    return tok;
}

std::string token_path(const std::string& dir, const std::string& domain) {
    return dir + "/" + domain + "_ti.token";
}

void DomainModifier::validate() const {
    auto require = [&](bool ok, const std::string& what) {
        if (!ok) throw ValidationError(kind_name(kind) + " modifier " + what);
    };
    if (kind == ModifierKind::Null) {
        require(style_text.empty() && style_word.empty(), "must not carry style text");
        require(!learned_token.has_value(), "must not carry a learned token");
        require(backbone_override.empty(), "must not override the backbone");
        return;
    }
    require(!style_text.empty(), "needs a style_text template");
    require(style_text.find("{CAPTION}") != std::string::npos, "template needs a {CAPTION} slot");
    const bool wants_style = style_text.find("{STYLE}") != std::string::npos;
    switch (kind) {
        case ModifierKind::Simple:
        case ModifierKind::NearbyDomain:
        case ModifierKind::UnrelatedDomain:
            require(!wants_style || !style_word.empty(), "template has {STYLE} but no style word");
            require(!learned_token.has_value(), "must not carry a learned token");
            require(backbone_override.empty(), "must not override the backbone");
            break;
        case ModifierKind::TextualInversion:
            if (!learned_token.has_value()) {
                throw ValidationError(
                    "textual_inversion modifier has no learned token; run train_textual_inversion "
                    "first");
            }
            require(backbone_override.empty(), "must not override the backbone");
            break;
        case ModifierKind::DreamBooth:
            if (!learned_token.has_value()) {
                throw ValidationError(
                    "dreambooth modifier has no learned token; run train_dreambooth first");
            }
            require(!backbone_override.empty(), "needs the tuned backbone checkpoint");
            break;
        default: break;
    }
}

ModifiedCaption apply_modifier(const std::string& plain_caption, const DomainModifier& modifier) {
    if (plain_caption.empty()) throw ValidationError("empty caption");
    modifier.validate();
    switch (modifier.kind) {
        case ModifierKind::Null: return {plain_caption, ""};
        case ModifierKind::Simple:
        case ModifierKind::NearbyDomain:
        case ModifierKind::UnrelatedDomain:
            return {instantiate(modifier.style_text, modifier.style_word, plain_caption), ""};
        case ModifierKind::TextualInversion:
            return {instantiate(modifier.style_text, modifier.learned_token->token, plain_caption),
                    ""};
        case ModifierKind::DreamBooth:
            return {instantiate(modifier.style_text, modifier.learned_token->token, plain_caption),
                    modifier.backbone_override};
    }
    throw ValidationError("unknown modifier kind");
}

std::string default_style_template(const std::string& domain) {
    require_known_domain(domain);
    if (style_domain(domain)) return "a {STYLE} style painting of {CAPTION}";
    return "a dark night photo of {CAPTION}";
}

std::string personalized_style_template(const std::string& domain) {
    require_known_domain(domain);
    if (style_domain(domain)) return "a {STYLE} style painting of {CAPTION}";
    return "a {STYLE} photo of {CAPTION}";
}

std::string nearby_style_word(const std::string& domain) {
    require_known_domain(domain);
    return style_domain(domain) ? "constructivism" : "foggy";
}

std::string nearby_style_template(const std::string& domain) {
    require_known_domain(domain);
    return style_domain(domain) ? "a {STYLE} painting of {CAPTION}" : "a {STYLE} photo of {CAPTION}";
}

std::string unrelated_style_word(const std::string& domain) {
    require_known_domain(domain);
    return style_domain(domain) ? "dashcam" : "watercolor";
}

std::string unrelated_style_template(const std::string& domain) {
    require_known_domain(domain);
    return style_domain(domain) ? "a {STYLE} photo of {CAPTION}" : "a {STYLE} painting of {CAPTION}";
}

DomainModifier null_modifier() { return {}; }

DomainModifier simple_modifier(const std::string& domain) {
    DomainModifier m;
    m.kind = ModifierKind::Simple;
    m.domain = domain;
    m.style_text = default_style_template(domain);
    if (m.style_text.find("{STYLE}") != std::string::npos) m.style_word = domain;
    return m;
}

DomainModifier nearby_modifier(const std::string& domain) {
    DomainModifier m;
    m.kind = ModifierKind::NearbyDomain;
    m.domain = domain;
    m.style_text = nearby_style_template(domain);
    m.style_word = nearby_style_word(domain);
    return m;
}

DomainModifier unrelated_modifier(const std::string& domain) {
    DomainModifier m;
    m.kind = ModifierKind::UnrelatedDomain;
    m.domain = domain;
    m.style_text = unrelated_style_template(domain);
    m.style_word = unrelated_style_word(domain);
    return m;
}

DomainModifier textual_inversion_modifier(const std::string& domain, LearnedToken token) {
    DomainModifier m;
    m.kind = ModifierKind::TextualInversion;
    m.domain = domain;
    m.style_text = personalized_style_template(domain);
    m.learned_token = std::move(token);
    return m;
}

DomainModifier dreambooth_modifier(const std::string& domain, LearnedToken token,
                                   std::string checkpoint_path) {
    DomainModifier m;
    m.kind = ModifierKind::DreamBooth;
    m.domain = domain;
    m.style_text = personalized_style_template(domain);
    m.learned_token = std::move(token);
    m.backbone_override = std::move(checkpoint_path);
    return m;
}

void PersonalizationConfig::validate() const {
    if (steps < 0) throw ValidationError("steps must be non-negative");
    if (learning_rate < 0.0f) throw ValidationError("learning rate must be non-negative");
    if (batch_size < 1) throw ValidationError("batch size must be positive");
    if (grad_accumulation < 1) throw ValidationError("gradient accumulation must be positive");
}

PersonalizationConfig PersonalizationConfig::ti_defaults() {
    PersonalizationConfig cfg;
    cfg.steps = 3000;
    cfg.learning_rate = 5e-4f;
    cfg.batch_size = 1;
    cfg.grad_accumulation = 4;
    return cfg;
}

PersonalizationConfig PersonalizationConfig::ti_short() {
    PersonalizationConfig cfg = ti_defaults();
    cfg.steps = 1000;
    return cfg;
}

PersonalizationConfig PersonalizationConfig::db_defaults() {
    PersonalizationConfig cfg;
    cfg.steps = 1000;
    cfg.learning_rate = 5e-6f;
    cfg.batch_size = 1;
    cfg.grad_accumulation = 1;
    return cfg;
}

PersonalizationConfig PersonalizationConfig::db_gentle() {
    PersonalizationConfig cfg = db_defaults();
    cfg.steps = 500;
    cfg.learning_rate = 2e-6f;
    return cfg;
}

Var denoise_match_loss(const bb::Backbone& backbone, const text::AffineEncoding& prompt,
                       const Var& token_embedding, const Tensor& z0, int timestep,
                       const Tensor& noise, bool train_backbone) {
    if (noise.shape() != z0.shape()) throw ValidationError("noise must match the latent shape");
    if (timestep < 0 || timestep >= backbone.schedule().total_steps) {
        throw ValidationError("timestep out of range");
    }
    const int n = prompt.base.dim(0);
    const int d = prompt.base.dim(1);
    if (token_embedding->value.numel() != d) {
        throw ValidationError("token embedding width does not match the prompt encoding");
    }
    Tensor zt = backbone.schedule().add_noise(z0, noise, timestep);
    Tensor coeff({n, 1});
    for (int i = 0; i < n; ++i) coeff.at(i, 0) = prompt.coeff[static_cast<size_t>(i)];
    Var e_row = nn::vreshape(token_embedding, {1, d});
    Var cond = nn::vadd(nn::constant(prompt.base), nn::vmatmul(nn::constant(coeff), e_row));
    Var pred = backbone.predict_noise(nn::constant(zt), timestep, cond, train_backbone);
    Var diff = nn::vsub(pred, nn::constant(noise));
    return nn::vmean(nn::vmul(diff, diff));
}

float personalization_loss(const bb::Backbone& backbone, const text::TextEncoder& encoder,
                           const PersonalizationConfig& cfg, const std::string& prompt_text,
                           const LearnedToken& token) {
    TrainSetup setup = prepare_training(cfg, backbone, encoder, prompt_text, token.token, "painting");
    Var e = nn::constant(token.embedding.reshaped({1, encoder.embed_dim()}));
    Rng rng(cfg.seed ^ 0x0ddc0ffeeULL);
    double total = 0.0;
    const int total_steps = backbone.schedule().total_steps;
    for (const Tensor& z0 : setup.latents) {
        int t = static_cast<int>(rng.uniform_int(0, total_steps - 1));
        Tensor eps = normal_like(z0, rng);
        Var loss = denoise_match_loss(backbone, setup.prompt, e, z0, t, eps, false);
        total += loss->value[0];
    }
    return static_cast<float>(total / static_cast<double>(setup.latents.size()));
}

LearnedToken train_textual_inversion(const PersonalizationConfig& cfg, const bb::Backbone& backbone,
                                     const text::TextEncoder& encoder, const std::string& prompt_text,
                                     const std::string& token, const std::string& init_word) {
    TrainSetup setup = prepare_training(cfg, backbone, encoder, prompt_text, token, init_word);
    Var e = nn::param(setup.init_embedding, "token_embedding");
    nn::AdamW opt({{"token", {e}, 1.0f, -1.0f}},
                  {cfg.learning_rate, 0.9f, 0.999f, 1e-8f, 0.0f});
    run_training_loop(cfg, backbone, setup, e, opt, false);
    return {token, e->value.reshaped({encoder.embed_dim()})};
}

DreamBoothResult train_dreambooth(const PersonalizationConfig& cfg, bb::Backbone& backbone,
                                  const text::TextEncoder& encoder, const std::string& prompt_text,
                                  const std::string& output_dir, const std::string& token,
                                  const std::string& init_word) {
    TrainSetup setup = prepare_training(cfg, backbone, encoder, prompt_text, token, init_word);
    Var e = nn::param(setup.init_embedding, "token_embedding");
    std::vector<Var> weights;
    for (auto& [name, var] : backbone.params()) weights.push_back(var);
    nn::AdamW opt({{"token", {e}, 1.0f, -1.0f}, {"denoiser", weights, 1.0f, -1.0f}},
                  {cfg.learning_rate, 0.9f, 0.999f, 1e-8f, 0.0f});
    run_training_loop(cfg, backbone, setup, e, opt, true);

    fs::create_directories(output_dir);
    std::int64_t weight_count = e->value.numel();
    for (const auto& [name, var] : backbone.params()) weight_count += var->value.numel();
    const std::uintmax_t needed = static_cast<std::uintmax_t>(weight_count) * 4 + (1u << 20);
    std::error_code ec;
    auto space = fs::space(output_dir, ec);
    if (!ec && space.available < needed) {
        throw Error("not enough disk space in " + output_dir + ": need " + std::to_string(needed) +
                    " bytes, have " + std::to_string(space.available));
    }
    const std::string ckpt = output_dir + "/dreambooth.safetensors";
    backbone.save_checkpoint(ckpt);
    return {{token, e->value.reshaped({encoder.embed_dim()})}, ckpt};
}

}  // namespace tadp::domain
