#pragma once

#include <optional>
#include <set>
#include <string>
#include <vector>

#include "tadp/tensor.hpp"
#include "tadp/text_encoder.hpp"

namespace tadp::prompt {

enum class Strategy { AvgEOS, SingleEOS, ClassEmbs, ClassNames, Caption, NounsOnly, Oracle, OracleNoised };

std::string strategy_name(Strategy s);
Strategy strategy_from_name(const std::string& name);

struct ConditioningMatrix {
    nn::Tensor embeddings;  // N x D
    Strategy strategy = Strategy::Caption;
    std::optional<std::string> source_text;
    std::vector<std::string> token_texts;  // aligned with rows when string-based

    int rows() const { return embeddings.dim(0); }
    void validate(int expected_dim) const;
};

struct ClassVocabulary {
    std::vector<std::string> names;      // dataset index order
    std::vector<std::string> templates;  // each contains exactly one {}

    static ClassVocabulary load(const std::string& names_path, const std::string& templates_path);
    static std::vector<std::string> read_lines(const std::string& path);
    void validate() const;
    int size() const { return static_cast<int>(names.size()); }
};

std::string fill_template(const std::string& tmpl, const std::string& value);

ConditioningMatrix build_avg_eos(const ClassVocabulary& vocab, const text::TextEncoder& enc);
ConditioningMatrix build_single_eos(const ClassVocabulary& vocab, const std::string& tmpl,
                                    const text::TextEncoder& enc);
ConditioningMatrix build_class_embs(const ClassVocabulary& vocab, const text::TextEncoder& enc);
ConditioningMatrix build_class_names(const ClassVocabulary& vocab, const text::TextEncoder& enc);
// pad_to 0 keeps the caption's natural token length; overflow truncates with a
// stderr warning either way.
ConditioningMatrix build_from_caption(const std::string& caption, const text::TextEncoder& enc,
                                      int pad_to = 0);

// Keeps words an open-class heuristic calls nouns: function words, -ly
// adverbs, and verbal -ing/-ed forms are dropped; everything else stays.
class PosTagger {
public:
    PosTagger();
    bool is_noun(const std::string& word) const;

private:
    std::set<std::string> function_words_;
    std::set<std::string> noun_exceptions_;  // -ing/-ed words that are things
};

std::string nouns_only(const std::string& caption, const PosTagger& tagger, bool* empty_flag = nullptr);

// Distinct non-ignored classes in an index mask, dataset index order.
std::vector<int> present_classes(const nn::Tensor& mask, int num_classes, int ignore_index);

// " name1 name2 ..." for present classes; "" for an all-ignored mask.
std::string build_oracle(const nn::Tensor& mask, const std::vector<std::string>& class_names,
                         int ignore_index, bool* empty_flag = nullptr);

std::string join_class_names(const std::vector<std::string>& names, const std::vector<int>& indices);

struct OracleCaptionSpec {
    std::vector<int> present_classes;
    double target_precision = 1.0;
    double target_recall = 1.0;
    std::uint64_t rng_seed = 0;
};

// Keeps k = round(recall * |B|) true classes (at least 1) and adds
// d = round(k * (1-p)/p) distractors from outside B. Deterministic per seed;
// seed changes membership only, never the set sizes.
std::vector<int> perturb_oracle(const OracleCaptionSpec& spec, const ClassVocabulary& universe);

}  // namespace tadp::prompt
