#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "tadp/backbone.hpp"
#include "tadp/domain.hpp"
#include "tadp/error.hpp"
#include "tadp/image_io.hpp"
#include "tadp/rng.hpp"

using namespace tadp;
using namespace tadp::domain;
using nn::Tensor;
using nn::Var;
namespace fs = std::filesystem;

namespace {

std::string fresh_dir(const std::string& name) {
    fs::path dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir.string();
}

Tensor ramp_image(int h, int w, float phase) {
    Tensor t({3, h, w});
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                float v = 0.5f + 0.4f * std::sin(phase + 0.3f * static_cast<float>(c) +
                                                 0.21f * static_cast<float>(x) +
                                                 0.13f * static_cast<float>(y));
                t.at(c, y, x) = v;
            }
        }
    }
    return t;
}

std::vector<std::string> write_image_set(const std::string& dir, int count) {
    std::vector<std::string> paths;
    for (int i = 0; i < count; ++i) {
        std::string path = dir + "/img_" + std::to_string(i) + ".png";
        img::save_image_chw(path, ramp_image(32, 32, 0.7f * static_cast<float>(i)));
        paths.push_back(path);
    }
    return paths;
}

bb::Backbone real_backbone(const std::string& dir, std::uint64_t seed) {
    bb::Backbone stub = bb::Backbone::stub(bb::BackboneConfig::small_test(), seed);
    std::string path = dir + "/pretrained.safetensors";
    stub.save_checkpoint(path);
    return bb::Backbone::from_checkpoint(path);
}

std::map<std::string, std::vector<float>> snapshot_params(const bb::Backbone& backbone) {
    std::map<std::string, std::vector<float>> snap;
    for (const auto& [name, var] : backbone.params()) snap[name] = var->value.vec();
    return snap;
}

bool bitwise_equal(const std::vector<float>& a, const std::vector<float>& b) {
    return a.size() == b.size() &&
           std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

int count_changed(const bb::Backbone& backbone,
                  const std::map<std::string, std::vector<float>>& snap) {
    int changed = 0;
    for (const auto& [name, var] : backbone.params()) {
        if (!bitwise_equal(var->value.vec(), snap.at(name))) ++changed;
    }
    return changed;
}

}  // namespace

TEST_CASE("modifier kind names round trip") {
    for (ModifierKind k : {ModifierKind::Null, ModifierKind::Simple, ModifierKind::TextualInversion,
                           ModifierKind::DreamBooth, ModifierKind::NearbyDomain,
                           ModifierKind::UnrelatedDomain}) {
        CHECK(kind_from_name(kind_name(k)) == k);
    }
    CHECK_THROWS_AS(kind_from_name("styleless"), ValidationError);
}

TEST_CASE("caption modifiers produce the published strings") {
    const std::string plain = "a dog and a bird";

    ModifiedCaption null_out = apply_modifier(plain, null_modifier());
    CHECK(null_out.caption == plain);
    CHECK(null_out.backbone_checkpoint.empty());

    CHECK(apply_modifier(plain, simple_modifier("watercolor")).caption ==
          "a watercolor style painting of a dog and a bird");
    CHECK(apply_modifier(plain, simple_modifier("comic")).caption ==
          "a comic style painting of a dog and a bird");
    CHECK(apply_modifier(plain, simple_modifier("night")).caption ==
          "a dark night photo of a dog and a bird");

    CHECK(apply_modifier(plain, nearby_modifier("watercolor")).caption ==
          "a constructivism painting of a dog and a bird");
    CHECK(apply_modifier(plain, unrelated_modifier("watercolor")).caption ==
          "a dashcam photo of a dog and a bird");

    const std::string street = "a car on the street";
    CHECK(apply_modifier(street, nearby_modifier("night")).caption ==
          "a foggy photo of a car on the street");
    CHECK(apply_modifier(street, unrelated_modifier("night")).caption ==
          "a watercolor painting of a car on the street");

    LearnedToken tok{"<*>", Tensor::full({8}, 0.5f)};
    ModifiedCaption ti_out = apply_modifier(plain, textual_inversion_modifier("watercolor", tok));
    CHECK(ti_out.caption == "a <*> style painting of a dog and a bird");
    CHECK(ti_out.backbone_checkpoint.empty());

    LearnedToken sks{"<SKS>", Tensor::full({8}, 0.5f)};
    DomainModifier db = dreambooth_modifier("watercolor", sks, "runs/db/dreambooth.safetensors");
    ModifiedCaption db_out = apply_modifier(plain, db);
    CHECK(db_out.caption == "a <SKS> style painting of a dog and a bird");
    CHECK(db_out.backbone_checkpoint == "runs/db/dreambooth.safetensors");

    // the same modifier must yield the same string at train and test time
    CHECK(apply_modifier(plain, db).caption == db_out.caption);
    CHECK_THROWS_AS(simple_modifier("vaporwave"), ValidationError);
    CHECK_THROWS_AS(apply_modifier("", null_modifier()), ValidationError);
}

TEST_CASE("modifier invariants are enforced") {
    DomainModifier noisy_null = null_modifier();
    noisy_null.style_text = "a {STYLE} painting of {CAPTION}";
    CHECK_THROWS_AS(noisy_null.validate(), ValidationError);

    DomainModifier bare_ti;
    bare_ti.kind = ModifierKind::TextualInversion;
    bare_ti.domain = "watercolor";
    bare_ti.style_text = personalized_style_template("watercolor");
    CHECK_THROWS_WITH_AS(bare_ti.validate(), doctest::Contains("train_textual_inversion"),
                         ValidationError);

    DomainModifier bare_db;
    bare_db.kind = ModifierKind::DreamBooth;
    bare_db.domain = "watercolor";
    bare_db.style_text = personalized_style_template("watercolor");
    CHECK_THROWS_WITH_AS(bare_db.validate(), doctest::Contains("train_dreambooth"), ValidationError);

    bare_db.learned_token = LearnedToken{"<SKS>", Tensor::full({4}, 0.1f)};
    CHECK_THROWS_WITH_AS(bare_db.validate(), doctest::Contains("checkpoint"), ValidationError);

    DomainModifier no_caption_slot = simple_modifier("watercolor");
    no_caption_slot.style_text = "a watercolor style painting";
    CHECK_THROWS_WITH_AS(no_caption_slot.validate(), doctest::Contains("{CAPTION}"),
                         ValidationError);

    DomainModifier wordless = simple_modifier("watercolor");
    wordless.style_word.clear();
    CHECK_THROWS_AS(wordless.validate(), ValidationError);

    // TI keeps the default backbone; an override on it is rejected
    DomainModifier ti = textual_inversion_modifier("comic", {"<*>", Tensor::full({4}, 0.1f)});
    ti.backbone_override = "somewhere.safetensors";
    CHECK_THROWS_AS(ti.validate(), ValidationError);
}

TEST_CASE("learned token files round trip bitwise") {
    std::string dir = fresh_dir("tadp_token_io");
    CHECK(token_path("runs", "watercolor") == "runs/watercolor_ti.token");

    LearnedToken tok;
    tok.token = "<*>";
    tok.embedding = Tensor({6});
    Rng rng(11);
    for (int i = 0; i < 6; ++i) tok.embedding[i] = rng.normal_f();

    std::string path = token_path(dir, "watercolor");
    tok.save(path);
    LearnedToken back = LearnedToken::load(path);
    CHECK(back.token == "<*>");
    REQUIRE(back.embedding.numel() == 6);
    CHECK(bitwise_equal(back.embedding.vec(), tok.embedding.vec()));

    // little-endian dim header leads the file
    std::ifstream raw(path, std::ios::binary);
    unsigned char head[4];
    raw.read(reinterpret_cast<char*>(head), 4);
    CHECK(head[0] == 6);
    CHECK(head[1] == 0);
    CHECK(head[2] == 0);
    CHECK(head[3] == 0);

    CHECK_THROWS_AS(LearnedToken::load(dir + "/absent.token"), ValidationError);
    std::ofstream(dir + "/short.token", std::ios::binary) << "xx";
    CHECK_THROWS_AS(LearnedToken::load(dir + "/short.token"), ValidationError);
}

TEST_CASE("image files round trip through tensors") {
    std::string dir = fresh_dir("tadp_image_io");
    Tensor original = ramp_image(24, 40, 0.3f);
    img::save_image_chw(dir + "/ramp.png", original);
    Tensor loaded = img::load_image_chw(dir + "/ramp.png");
    REQUIRE(loaded.shape() == std::vector<int>{3, 24, 40});
    float worst = 0.0f;
    for (std::int64_t i = 0; i < loaded.numel(); ++i) {
        worst = std::max(worst, std::abs(loaded[i] - original[i]));
    }
    CHECK(worst <= 0.5f / 255.0f + 1e-6f);
    CHECK_THROWS_AS(img::load_image_chw(dir + "/absent.png"), ValidationError);
}

TEST_CASE("personalization rejects stubs and malformed setups") {
    std::string dir = fresh_dir("tadp_personalize_guard");
    auto paths = write_image_set(dir, 1);
    text::TextEncoder enc(32, 77);

    PersonalizationConfig cfg;
    cfg.image_set = paths;
    cfg.steps = 1;
    cfg.learning_rate = 1e-3f;

    bb::Backbone stub = bb::Backbone::stub(bb::BackboneConfig::small_test(), 5);
    CHECK_THROWS_WITH_AS(
        train_textual_inversion(cfg, stub, enc, "a <*> style painting of a dog"),
        doctest::Contains("pretrained"), ValidationError);

    bb::Backbone real = real_backbone(dir, 5);
    PersonalizationConfig empty_set = cfg;
    empty_set.image_set.clear();
    CHECK_THROWS_AS(train_textual_inversion(empty_set, real, enc, "a <*> style painting of a dog"),
                    ValidationError);
    CHECK_THROWS_AS(train_textual_inversion(cfg, real, enc, "a painting of a dog"),
                    ValidationError);  // prompt never mentions the token
    CHECK_THROWS_AS(train_textual_inversion(cfg, real, enc, "a star style painting of star", "star"),
                    ValidationError);  // token must look like <name>
    PersonalizationConfig negative = cfg;
    negative.steps = -1;
    CHECK_THROWS_AS(train_textual_inversion(negative, real, enc, "a <*> style painting of a dog"),
                    ValidationError);

    CHECK(PersonalizationConfig::ti_defaults().steps == 3000);
    CHECK(PersonalizationConfig::ti_defaults().learning_rate == doctest::Approx(5e-4f));
    CHECK(PersonalizationConfig::ti_defaults().grad_accumulation == 4);
    CHECK(PersonalizationConfig::ti_short().steps == 1000);
    CHECK(PersonalizationConfig::db_defaults().steps == 1000);
    CHECK(PersonalizationConfig::db_defaults().learning_rate == doctest::Approx(5e-6f));
    CHECK(PersonalizationConfig::db_gentle().learning_rate == doctest::Approx(2e-6f));
    CHECK(PersonalizationConfig::db_gentle().steps == 500);
}

TEST_CASE("zero-step textual inversion returns its initialization") {
    std::string dir = fresh_dir("tadp_ti_zero");
    auto paths = write_image_set(dir, 2);
    text::TextEncoder enc(32, 77);
    bb::Backbone backbone = real_backbone(dir, 9);

    PersonalizationConfig cfg;
    cfg.image_set = paths;
    cfg.steps = 0;
    cfg.learning_rate = 5e-4f;

    LearnedToken tok = train_textual_inversion(cfg, backbone, enc, "a <*> style painting of a dog");
    CHECK(tok.token == "<*>");
    CHECK(bitwise_equal(tok.embedding.vec(), enc.word_vector("painting").vec()));

    LearnedToken night = train_textual_inversion(cfg, backbone, enc, "a <*> photo of a street", "<*>",
                                                 "night");
    CHECK(bitwise_equal(night.embedding.vec(), enc.word_vector("night").vec()));
}

TEST_CASE("token gradient matches finite differences") {
    std::string dir = fresh_dir("tadp_ti_fd");
    bb::Backbone backbone = real_backbone(dir, 21);
    text::TextEncoder enc(32, 77);

    Tensor z0 = backbone.encode_and_scale(ramp_image(32, 32, 0.45f)).values;
    auto prompt = enc.encode_affine("a <*> style painting of a dog", "<*>");
    Rng rng(7);
    Tensor eps(z0.shape());
    for (std::int64_t i = 0; i < eps.numel(); ++i) eps[i] = rng.normal_f();
    const int t = 400;

    Tensor e0 = enc.word_vector("painting").reshaped({1, 32});
    Var e = nn::param(e0, "probe");
    Var loss = denoise_match_loss(backbone, prompt, e, z0, t, eps, false);
    nn::backward(loss);
    REQUIRE(e->has_grad);

    auto loss_at = [&](const Tensor& emb) {
        Var frozen = nn::constant(emb);
        return denoise_match_loss(backbone, prompt, frozen, z0, t, eps, false)->value[0];
    };

    // probe the strongest coordinates; weak ones drown in float rounding
    std::vector<int> order(32);
    for (int i = 0; i < 32; ++i) order[static_cast<size_t>(i)] = i;
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        return std::abs(e->grad[a]) > std::abs(e->grad[b]);
    });
    const float h = 0.05f;
    for (int k = 0; k < 4; ++k) {
        int i = order[static_cast<size_t>(k)];
        Tensor hi = e0, lo = e0;
        hi[i] += h;
        lo[i] -= h;
        double fd = (static_cast<double>(loss_at(hi)) - static_cast<double>(loss_at(lo))) / (2.0 * h);
        double an = e->grad[i];
        double rel = std::abs(fd - an) / std::max(std::abs(an), 1e-3);
        INFO("coord ", i, " analytic ", an, " fd ", fd);
        CHECK(rel < 1e-3);
    }
}

TEST_CASE("textual inversion trains the token and only the token") {
    std::string dir = fresh_dir("tadp_ti_train");
    auto paths = write_image_set(dir, 2);
    text::TextEncoder enc(32, 77);
    bb::Backbone backbone = real_backbone(dir, 13);
    auto before = snapshot_params(backbone);

    PersonalizationConfig cfg;
    cfg.image_set = paths;
    cfg.steps = 40;
    cfg.learning_rate = 5e-3f;
    cfg.batch_size = 1;
    cfg.grad_accumulation = 2;
    cfg.seed = 3;

    const std::string prompt = "a <*> style painting of a dog";
    LearnedToken init{"<*>", enc.word_vector("painting")};
    float loss_init = personalization_loss(backbone, enc, cfg, prompt, init);

    LearnedToken trained = train_textual_inversion(cfg, backbone, enc, prompt);
    CHECK_FALSE(bitwise_equal(trained.embedding.vec(), init.embedding.vec()));
    CHECK(count_changed(backbone, before) == 0);  // every non-token weight froze

    float loss_trained = personalization_loss(backbone, enc, cfg, prompt, trained);
    CHECK(loss_trained < loss_init);

    LearnedToken again = train_textual_inversion(cfg, backbone, enc, prompt);
    CHECK(bitwise_equal(again.embedding.vec(), trained.embedding.vec()));
}

TEST_CASE("dreambooth tunes the denoiser and checkpoints the result") {
    std::string dir = fresh_dir("tadp_db_train");
    auto paths = write_image_set(dir, 2);
    text::TextEncoder enc(32, 77);
    const std::string prompt = "a <SKS> style painting of a dog";

    PersonalizationConfig cfg;
    cfg.image_set = paths;
    cfg.seed = 17;

    {
        // zero steps: the checkpoint is the source weights
        bb::Backbone backbone = real_backbone(dir, 31);
        auto source = snapshot_params(backbone);
        cfg.steps = 0;
        cfg.learning_rate = 2e-4f;
        DreamBoothResult zero = train_dreambooth(cfg, backbone, enc, prompt, dir + "/db_zero");
        CHECK(zero.token.token == "<SKS>");
        CHECK(fs::exists(zero.checkpoint_path));
        bb::Backbone restored = bb::Backbone::from_checkpoint(zero.checkpoint_path);
        CHECK_FALSE(restored.is_stub());
        CHECK(count_changed(restored, source) == 0);
    }
    {
        // one step at lr zero is a null update
        bb::Backbone backbone = real_backbone(dir, 31);
        auto source = snapshot_params(backbone);
        cfg.steps = 1;
        cfg.learning_rate = 0.0f;
        DreamBoothResult result = train_dreambooth(cfg, backbone, enc, prompt, dir + "/db_lr0");
        CHECK(count_changed(backbone, source) == 0);
        CHECK(bitwise_equal(result.token.embedding.vec(), enc.word_vector("painting").vec()));
    }
    {
        bb::Backbone backbone = real_backbone(dir, 31);
        auto source = snapshot_params(backbone);
        cfg.steps = 50;
        cfg.learning_rate = 2e-4f;
        LearnedToken init{"<SKS>", enc.word_vector("painting")};
        float loss_before = personalization_loss(backbone, enc, cfg, prompt, init);

        DreamBoothResult result = train_dreambooth(cfg, backbone, enc, prompt, dir + "/db_full");
        CHECK(count_changed(backbone, source) > 0);

        float loss_after = personalization_loss(backbone, enc, cfg, prompt, result.token);
        CHECK(loss_after < loss_before);

        bb::Backbone restored = bb::Backbone::from_checkpoint(result.checkpoint_path);
        int mismatched = 0;
        for (const auto& [name, var] : backbone.params()) {
            if (!bitwise_equal(var->value.vec(), restored.params().at(name)->value.vec())) {
                ++mismatched;
            }
        }
        CHECK(mismatched == 0);
    }
}
