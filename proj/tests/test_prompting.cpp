#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "tadp/error.hpp"
#include "tadp/prompting.hpp"
#include "tadp/rng.hpp"

using namespace tadp;
using namespace tadp::nn;
using namespace tadp::prompt;

namespace {
ClassVocabulary tiny_vocab() {
    ClassVocabulary v;
    v.names = {"background", "dog", "bird", "dining table"};
    v.templates = {"a photo of a {}.", "a painting of the {}.", "art of a {}."};
    return v;
}

const char* kDataDir = TADP_SOURCE_DIR "/data";
}  // namespace

TEST_CASE("vocabulary validation") {
    ClassVocabulary v = tiny_vocab();
    v.validate();
    v.names.push_back("dog");
    CHECK_THROWS_AS(v.validate(), ValidationError);

    ClassVocabulary w = tiny_vocab();
    w.templates.push_back("no placeholder here");
    CHECK_THROWS_AS(w.validate(), ValidationError);
    ClassVocabulary u = tiny_vocab();
    u.templates.push_back("two {} holes {}");
    CHECK_THROWS_AS(u.validate(), ValidationError);
}

TEST_CASE("shipped template and class files") {
    auto vocab = ClassVocabulary::load(std::string(kDataDir) + "/pascal_voc_classes.txt",
                                       std::string(kDataDir) + "/clip_templates.txt");
    CHECK(vocab.names.size() == 21);
    CHECK(vocab.templates.size() == 80);
    CHECK(vocab.names.front() == "background");
    CHECK(vocab.names.back() == "television");
    CHECK(std::count(vocab.names.begin(), vocab.names.end(), "dining table") == 1);
}

TEST_CASE("avg-eos shape, strategy, and template permutation invariance") {
    text::TextEncoder enc(64, 77);
    ClassVocabulary v = tiny_vocab();
    auto cm = build_avg_eos(v, enc);
    CHECK(cm.rows() == 4);
    CHECK(cm.embeddings.dim(1) == 64);
    CHECK(cm.strategy == Strategy::AvgEOS);
    cm.validate(64);

    ClassVocabulary perm = v;
    std::swap(perm.templates[0], perm.templates[2]);
    auto cm2 = build_avg_eos(perm, enc);
    for (std::int64_t i = 0; i < cm.embeddings.numel(); ++i)
        CHECK(std::abs(cm.embeddings[i] - cm2.embeddings[i]) < 1e-6f);
}

TEST_CASE("single template equals degenerate average and the summary itself") {
    text::TextEncoder enc(32, 77);
    ClassVocabulary v = tiny_vocab();
    auto single = build_single_eos(v, "a photo of a {}", enc);
    CHECK(single.strategy == Strategy::SingleEOS);
    Tensor expect = enc.sentence_summary("a photo of a dog");
    for (int d = 0; d < 32; ++d) CHECK(single.embeddings.at(1, d) == doctest::Approx(expect[d]));

    ClassVocabulary one = v;
    one.templates = {"a photo of a {}"};
    auto avg = build_avg_eos(one, enc);
    for (std::int64_t i = 0; i < avg.embeddings.numel(); ++i)
        CHECK(avg.embeddings[i] == doctest::Approx(single.embeddings[i]));
}

TEST_CASE("class embeddings expand multi-word names") {
    text::TextEncoder enc(32, 77);
    ClassVocabulary v = tiny_vocab();
    auto cm = build_class_embs(v, enc);
    CHECK(cm.strategy == Strategy::ClassEmbs);
    // background dog bird + (dining, table) = 5 rows
    CHECK(cm.rows() == 5);
    CHECK(cm.token_texts == std::vector<std::string>{"background", "dog", "bird", "dining", "table"});

    // the dog row equals the word position from encoding "dog" alone
    Tensor alone = enc.encode("dog");
    for (int d = 0; d < 32; ++d) CHECK(cm.embeddings.at(1, d) == alone.at(1, d));
}

TEST_CASE("class names joins with leading spaces and encodes once") {
    text::TextEncoder enc(32, 77);
    ClassVocabulary v = tiny_vocab();
    auto cm = build_class_names(v, enc);
    CHECK(cm.strategy == Strategy::ClassNames);
    REQUIRE(cm.source_text.has_value());
    CHECK(*cm.source_text == " background dog bird dining table");
    CHECK(cm.rows() == enc.sequence_length(*cm.source_text));

    ClassVocabulary two;
    two.names = {"dog", "bird"};
    auto cm2 = build_class_names(two, enc);
    CHECK(*cm2.source_text == " dog bird");

    text::TextEncoder small(16, 4);
    CHECK_THROWS_AS(build_class_names(v, small), ValidationError);
}

TEST_CASE("caption conditioning keeps natural length and truncates overflow") {
    text::TextEncoder enc(32, 10);
    auto cm = build_from_caption("a bird and a dog", enc);
    CHECK(cm.rows() == 7);
    CHECK(cm.strategy == Strategy::Caption);
    CHECK(*cm.source_text == "a bird and a dog");
    CHECK(cm.token_texts.size() == 7);

    auto cm_long = build_from_caption("one two three four five six seven eight nine ten eleven", enc);
    CHECK(cm_long.rows() == 10);

    CHECK_THROWS_AS(build_from_caption("", enc), ValidationError);

    auto padded = build_from_caption("a dog", enc, 10);
    CHECK(padded.rows() == 10);
}

TEST_CASE("noun filtering") {
    PosTagger tagger;
    bool empty = false;
    CHECK(nouns_only("a bird and a dog", tagger, &empty) == "bird dog");
    CHECK_FALSE(empty);
    CHECK(nouns_only("running quickly", tagger, &empty) == "");
    CHECK(empty);
    // noun-only input is a fixed point
    std::string nouns = "bird dog painting";
    CHECK(nouns_only(nouns, tagger) == nouns);
    CHECK(nouns_only("a watercolor painting of a dog and a bird", tagger) == "watercolor painting dog bird");
}

TEST_CASE("present classes and oracle string") {
    std::vector<std::string> names = {"background", "airplane", "bird", "dog", "person"};
    Tensor mask({2, 3});
    mask.at(0, 0) = 3; mask.at(0, 1) = 2; mask.at(0, 2) = 255;
    mask.at(1, 0) = 4; mask.at(1, 1) = 3; mask.at(1, 2) = 2;

    auto present = present_classes(mask, 5, 255);
    CHECK(present == std::vector<int>{2, 3, 4});

    bool empty = false;
    CHECK(build_oracle(mask, names, 255, &empty) == " bird dog person");
    CHECK_FALSE(empty);

    Tensor single = Tensor::full({2, 2}, 3.0f);
    CHECK(build_oracle(single, names, 255) == " dog");

    Tensor ignored = Tensor::full({2, 2}, 255.0f);
    CHECK(build_oracle(ignored, names, 255, &empty) == "");
    CHECK(empty);

    Tensor bad = Tensor::full({1, 1}, 9.0f);
    CHECK_THROWS_WITH_AS(build_oracle(bad, names, 255), doctest::Contains("9"), Error);
}

TEST_CASE("oracle perturbation exact cases") {
    ClassVocabulary uni;
    for (int i = 0; i < 20; ++i) uni.names.push_back("class" + std::to_string(i));

    OracleCaptionSpec spec;
    spec.present_classes = {2, 5, 7, 11};
    spec.rng_seed = 9;

    SUBCASE("identity targets return the set exactly") {
        spec.target_precision = 1.0;
        spec.target_recall = 1.0;
        CHECK(perturb_oracle(spec, uni) == std::vector<int>{2, 5, 7, 11});
    }
    SUBCASE("recall 0.5 keeps two, no distractors") {
        spec.target_precision = 1.0;
        spec.target_recall = 0.5;
        auto out = perturb_oracle(spec, uni);
        CHECK(out.size() == 2);
        for (int c : out) CHECK(std::count(spec.present_classes.begin(), spec.present_classes.end(), c) == 1);
    }
    SUBCASE("precision 0.5 adds four distractors") {
        spec.target_precision = 0.5;
        spec.target_recall = 1.0;
        auto out = perturb_oracle(spec, uni);
        CHECK(out.size() == 8);
        int true_kept = 0;
        for (int c : out)
            if (std::count(spec.present_classes.begin(), spec.present_classes.end(), c)) ++true_kept;
        CHECK(true_kept == 4);
    }
    SUBCASE("seed changes membership, never sizes") {
        spec.target_precision = 0.75;
        spec.target_recall = 0.75;
        auto a = perturb_oracle(spec, uni);
        spec.rng_seed = 10;
        auto b = perturb_oracle(spec, uni);
        CHECK(a.size() == b.size());
        spec.rng_seed = 9;
        auto c = perturb_oracle(spec, uni);
        CHECK(a == c);
    }
    SUBCASE("infeasible distractor demand") {
        ClassVocabulary small;
        small.names = {"a", "b", "c", "d", "e"};
        spec.present_classes = {0, 1, 2, 3};
        spec.target_precision = 0.25;
        spec.target_recall = 1.0;  // needs 12 distractors, only 1 outside
        CHECK_THROWS_AS(perturb_oracle(spec, small), ValidationError);
    }
    SUBCASE("empty present set stays empty") {
        spec.present_classes = {};
        CHECK(perturb_oracle(spec, uni).empty());
    }
}

TEST_CASE("oracle perturbation hits dataset-level targets") {
    ClassVocabulary uni;
    for (int i = 0; i < 20; ++i) uni.names.push_back("c" + std::to_string(i));
    Rng rng(77);
    for (double p : {0.5, 0.75, 1.0})
        for (double r : {0.5, 0.75, 1.0}) {
            double sum_p = 0.0, sum_r = 0.0;
            const int n = 300;
            for (int img = 0; img < n; ++img) {
                int b = static_cast<int>(rng.uniform_int(4, 8));
                std::vector<int> pool(20);
                for (int i = 0; i < 20; ++i) pool[static_cast<size_t>(i)] = i;
                for (int i = 0; i < b; ++i)
                    std::swap(pool[static_cast<size_t>(i)],
                              pool[static_cast<size_t>(rng.uniform_int(i, 19))]);
                OracleCaptionSpec spec;
                spec.present_classes.assign(pool.begin(), pool.begin() + b);
                spec.target_precision = p;
                spec.target_recall = r;
                spec.rng_seed = rng.next_u64();
                auto out = perturb_oracle(spec, uni);
                int kept = 0;
                for (int c : out)
                    if (std::count(spec.present_classes.begin(), spec.present_classes.end(), c)) ++kept;
                sum_p += static_cast<double>(kept) / static_cast<double>(out.size());
                sum_r += static_cast<double>(kept) / b;
            }
            INFO("targets p=", p, " r=", r);
            CHECK(std::abs(sum_p / n - p) < 0.05);
            CHECK(std::abs(sum_r / n - r) < 0.05);
        }
}

TEST_CASE("property: builders satisfy conditioning invariants over random vocabularies") {
    text::TextEncoder enc(24, 77);
    Rng rng(31337);
    const char* words[] = {"dog", "cat", "bird", "car", "tree", "house", "boat", "lamp", "road", "cloud"};
    for (int trial = 0; trial < 40; ++trial) {
        ClassVocabulary v;
        int n = static_cast<int>(rng.uniform_int(1, 6));
        std::vector<int> picks(10);
        for (int i = 0; i < 10; ++i) picks[static_cast<size_t>(i)] = i;
        for (int i = 0; i < n; ++i) {
            int j = static_cast<int>(rng.uniform_int(i, 9));
            std::swap(picks[static_cast<size_t>(i)], picks[static_cast<size_t>(j)]);
            v.names.push_back(words[picks[static_cast<size_t>(i)]]);
        }
        v.templates = {"a photo of a {}.", "a drawing of the {}."};
        build_avg_eos(v, enc).validate(24);
        build_class_embs(v, enc).validate(24);
        auto cn = build_class_names(v, enc);
        cn.validate(24);
        CHECK(cn.rows() == n + 2);  // single-word names: BOS + n + EOS
    }
}
