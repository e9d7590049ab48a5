#pragma once

#include <optional>
#include <string>
#include <vector>

#include "tadp/backbone.hpp"
#include "tadp/tensor.hpp"
#include "tadp/text_encoder.hpp"

namespace tadp::domain {

enum class ModifierKind { Null, Simple, TextualInversion, DreamBooth, NearbyDomain, UnrelatedDomain };

std::string kind_name(ModifierKind k);
ModifierKind kind_from_name(const std::string& name);

struct LearnedToken {
    std::string token;     // "<*>", "<SKS>", ...
    nn::Tensor embedding;  // [D]

    void save(const std::string& path) const;  // binary little-endian, dim header
    static LearnedToken load(const std::string& path);
};

// {dir}/{domain}_ti.token
std::string token_path(const std::string& dir, const std::string& domain);

// How captions (and optionally the backbone) shift toward a target domain.
// style_text is a template over {CAPTION} and, when a style word applies,
// {STYLE}; apply_modifier instantiates it.
struct DomainModifier {
    ModifierKind kind = ModifierKind::Null;
    std::string domain;             // e.g. "watercolor", "comic", "night"
    std::string style_text;         // template; empty for Null
    std::string style_word;         // fills {STYLE} for Simple/Nearby/Unrelated
    std::optional<LearnedToken> learned_token;
    std::string backbone_override;  // checkpoint path, DreamBooth only
    std::string image_set_path;     // unlabeled target-domain images, personalization input

    void validate() const;
};

struct ModifiedCaption {
    std::string caption;
    std::string backbone_checkpoint;  // empty -> default backbone
};

ModifiedCaption apply_modifier(const std::string& plain_caption, const DomainModifier& modifier);

// hand-written templates and control words per target domain
std::string default_style_template(const std::string& domain);
std::string personalized_style_template(const std::string& domain);
std::string nearby_style_word(const std::string& domain);
std::string nearby_style_template(const std::string& domain);
std::string unrelated_style_word(const std::string& domain);
std::string unrelated_style_template(const std::string& domain);

DomainModifier null_modifier();
DomainModifier simple_modifier(const std::string& domain);
DomainModifier nearby_modifier(const std::string& domain);
DomainModifier unrelated_modifier(const std::string& domain);
DomainModifier textual_inversion_modifier(const std::string& domain, LearnedToken token);
DomainModifier dreambooth_modifier(const std::string& domain, LearnedToken token,
                                   std::string checkpoint_path);

struct PersonalizationConfig {
    std::vector<std::string> image_set;  // target-domain image paths
    int steps = 0;
    float learning_rate = 0.0f;
    int batch_size = 1;
    int grad_accumulation = 1;
    std::uint64_t seed = 0;

    void validate() const;
    static PersonalizationConfig ti_defaults();  // 3000 steps @ 5e-4, batch 1, accum 4
    static PersonalizationConfig ti_short();     // 1000-step variant
    static PersonalizationConfig db_defaults();  // 1000 steps @ 5e-6
    static PersonalizationConfig db_gentle();    // 500 steps @ 2e-6
};

// Squared-error noise-matching loss for one (latent, timestep, noise) triple
// under a prompt whose learned-token row is the given embedding. The flag
// decides whether gradients also reach the denoiser weights.
nn::Var denoise_match_loss(const bb::Backbone& backbone, const text::AffineEncoding& prompt,
                           const nn::Var& token_embedding, const nn::Tensor& z0, int timestep,
                           const nn::Tensor& noise, bool train_backbone);

// Average noise-matching loss over the config's image set with a deterministic
// (timestep, noise) draw per image; used to track personalization progress.
float personalization_loss(const bb::Backbone& backbone, const text::TextEncoder& encoder,
                           const PersonalizationConfig& cfg, const std::string& prompt_text,
                           const LearnedToken& token);

// Optimizes only the new token embedding; every backbone weight stays frozen.
LearnedToken train_textual_inversion(const PersonalizationConfig& cfg, const bb::Backbone& backbone,
                                     const text::TextEncoder& encoder, const std::string& prompt_text,
                                     const std::string& token = "<*>",
                                     const std::string& init_word = "painting");

struct DreamBoothResult {
    LearnedToken token;
    std::string checkpoint_path;
};

// Same objective but the denoiser weights update alongside the token; the
// tuned backbone is checkpointed into output_dir.
DreamBoothResult train_dreambooth(const PersonalizationConfig& cfg, bb::Backbone& backbone,
                                  const text::TextEncoder& encoder, const std::string& prompt_text,
                                  const std::string& output_dir, const std::string& token = "<SKS>",
                                  const std::string& init_word = "painting");

}  // namespace tadp::domain
