#include "tadp/prompting.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <unordered_set>

#include "tadp/error.hpp"
#include "tadp/rng.hpp"

namespace tadp::prompt {

using nn::Tensor;

std::string strategy_name(Strategy s) {
    switch (s) {
        case Strategy::AvgEOS: return "avg_eos";
        case Strategy::SingleEOS: return "single_eos";
        case Strategy::ClassEmbs: return "class_embs";
        case Strategy::ClassNames: return "class_names";
        case Strategy::Caption: return "caption";
        case Strategy::NounsOnly: return "nouns_only";
        case Strategy::Oracle: return "oracle";
        case Strategy::OracleNoised: return "oracle_noised";
    }
    throw Error("unreachable strategy");
}

Strategy strategy_from_name(const std::string& name) {
    for (Strategy s : {Strategy::AvgEOS, Strategy::SingleEOS, Strategy::ClassEmbs, Strategy::ClassNames,
                       Strategy::Caption, Strategy::NounsOnly, Strategy::Oracle, Strategy::OracleNoised})
        if (strategy_name(s) == name) return s;
    throw ValidationError("unknown conditioning strategy '" + name + "'");
}

void ConditioningMatrix::validate(int expected_dim) const {
    if (embeddings.ndim() != 2 || embeddings.dim(0) < 1)
        throw ValidationError("conditioning matrix must be N x D with N >= 1");
    if (embeddings.dim(1) != expected_dim)
        throw ValidationError("conditioning width " + std::to_string(embeddings.dim(1)) +
                              " does not match embed dim " + std::to_string(expected_dim));
    if (!token_texts.empty() && static_cast<int>(token_texts.size()) != embeddings.dim(0))
        throw ValidationError("token_texts length does not match conditioning rows");
}

std::vector<std::string> ClassVocabulary::read_lines(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ValidationError("cannot open " + path);
    std::vector<std::string> out;
    std::string line;
    while (std::getline(f, line)) {
        while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.pop_back();
        if (!line.empty()) out.push_back(line);
    }
    return out;
}

ClassVocabulary ClassVocabulary::load(const std::string& names_path, const std::string& templates_path) {
    ClassVocabulary v;
    v.names = read_lines(names_path);
    v.templates = read_lines(templates_path);
    v.validate();
    return v;
}

void ClassVocabulary::validate() const {
    if (names.empty()) throw ValidationError("class vocabulary is empty");
    std::unordered_set<std::string> seen;
    for (const auto& n : names)
        if (!seen.insert(n).second) throw ValidationError("duplicate class name '" + n + "'");
    for (const auto& t : templates) {
        size_t first = t.find("{}");
        if (first == std::string::npos || t.find("{}", first + 1) != std::string::npos)
            throw ValidationError("template must contain exactly one {}: '" + t + "'");
    }
}

std::string fill_template(const std::string& tmpl, const std::string& value) {
    size_t pos = tmpl.find("{}");
    if (pos == std::string::npos) throw ValidationError("template without {} placeholder: '" + tmpl + "'");
    return tmpl.substr(0, pos) + value + tmpl.substr(pos + 2);
}

ConditioningMatrix build_avg_eos(const ClassVocabulary& vocab, const text::TextEncoder& enc) {
    vocab.validate();
    if (vocab.templates.empty()) throw ValidationError("avg-eos needs at least one template");
    int d = enc.embed_dim();
    ConditioningMatrix cm;
    cm.strategy = Strategy::AvgEOS;
    cm.embeddings = Tensor({vocab.size(), d});
    cm.token_texts = vocab.names;
    std::vector<double> acc(static_cast<size_t>(d));
    for (int c = 0; c < vocab.size(); ++c) {
        std::fill(acc.begin(), acc.end(), 0.0);
        for (const auto& tmpl : vocab.templates) {
            Tensor e = enc.sentence_summary(fill_template(tmpl, vocab.names[static_cast<size_t>(c)]));
            for (int i = 0; i < d; ++i) acc[static_cast<size_t>(i)] += e[i];
        }
        for (int i = 0; i < d; ++i)
            cm.embeddings.at(c, i) = static_cast<float>(acc[static_cast<size_t>(i)] / vocab.templates.size());
    }
    return cm;
}

ConditioningMatrix build_single_eos(const ClassVocabulary& vocab, const std::string& tmpl,
                                    const text::TextEncoder& enc) {
    ClassVocabulary one = vocab;
    one.templates = {tmpl};
    ConditioningMatrix cm = build_avg_eos(one, enc);
    cm.strategy = Strategy::SingleEOS;
    return cm;
}

ConditioningMatrix build_class_embs(const ClassVocabulary& vocab, const text::TextEncoder& enc) {
    vocab.validate();
    int d = enc.embed_dim();
    std::vector<Tensor> rows;
    std::vector<std::string> texts;
    for (const auto& name : vocab.names) {
        std::vector<std::string> words = enc.tokenize(name);
        if (words.empty()) throw ValidationError("class name '" + name + "' has no tokens");
        Tensor seq = enc.encode(name);  // BOS, words..., EOS
        for (size_t w = 0; w < words.size(); ++w) {
            Tensor row({d});
            for (int i = 0; i < d; ++i) row[i] = seq.at(static_cast<int>(w) + 1, i);
            rows.push_back(std::move(row));
            texts.push_back(words[w]);
        }
    }
    ConditioningMatrix cm;
    cm.strategy = Strategy::ClassEmbs;
    cm.embeddings = Tensor({static_cast<int>(rows.size()), d});
    for (size_t r = 0; r < rows.size(); ++r)
        for (int i = 0; i < d; ++i) cm.embeddings.at(static_cast<int>(r), i) = rows[r][i];
    cm.token_texts = std::move(texts);
    return cm;
}

ConditioningMatrix build_class_names(const ClassVocabulary& vocab, const text::TextEncoder& enc) {
    vocab.validate();
    std::string joined;
    for (const auto& name : vocab.names) joined += " " + name;
    int len = enc.sequence_length(joined);
    if (len > enc.max_tokens())
        throw ValidationError("joined class names need " + std::to_string(len) + " tokens, max is " +
                              std::to_string(enc.max_tokens()));
    ConditioningMatrix cm;
    cm.strategy = Strategy::ClassNames;
    cm.embeddings = enc.encode(joined, &cm.token_texts);
    cm.source_text = joined;
    return cm;
}

ConditioningMatrix build_from_caption(const std::string& caption, const text::TextEncoder& enc, int pad_to) {
    if (caption.empty()) throw ValidationError("caption is empty");
    ConditioningMatrix cm;
    cm.strategy = Strategy::Caption;
    int target = pad_to;
    if (enc.sequence_length(caption) > enc.max_tokens()) {
        std::cerr << "[tadp] warning: caption exceeds " << enc.max_tokens() << " tokens, truncating: \""
                  << caption.substr(0, 40) << "...\"\n";
        if (target == 0) target = enc.max_tokens();
    }
    if (target > enc.max_tokens()) throw ValidationError("pad_to exceeds text encoder context");
    bool truncated = false;
    cm.embeddings = enc.encode(caption, &cm.token_texts, target, &truncated);
    cm.source_text = caption;
    return cm;
}

PosTagger::PosTagger() {
    function_words_ = {
        "a",     "an",    "the",   "this",  "that",  "these", "those", "and",  "or",    "but",  "nor",
        "of",    "in",    "on",    "at",    "to",    "from",  "with",  "by",   "for",   "as",   "into",
        "onto",  "over",  "under", "above", "below", "near",  "about", "is",   "are",   "was",  "were",
        "be",    "been",  "being", "am",    "do",    "does",  "did",   "has",  "have",  "had",  "will",
        "would", "can",   "could", "shall", "should","may",   "might", "must", "it",    "its",  "he",
        "she",   "they",  "them",  "his",   "her",   "their", "there", "here", "where", "when", "while",
        "some",  "many",  "few",   "all",   "both",  "each",  "every", "no",   "not",   "very", "so",
        "such",  "than",  "then",  "also",  "too",   "up",    "down",  "out",  "off",   "next"};
    noun_exceptions_ = {"painting", "building", "ceiling",  "morning", "evening", "lightning",
                        "railing",  "awning",   "clothing", "bedding", "shelving", "bed",
                        "shed",     "sled"};
}

bool PosTagger::is_noun(const std::string& word) const {
    if (word.empty()) return false;
    if (function_words_.count(word)) return false;
    if (noun_exceptions_.count(word)) return true;
    auto ends_with = [&](const char* suf) {
        size_t n = std::strlen(suf);
        return word.size() > n + 1 && word.compare(word.size() - n, n, suf) == 0;
    };
    if (ends_with("ly")) return false;
    if (ends_with("ing")) return false;
    if (ends_with("ed")) return false;
    return true;
}

std::string nouns_only(const std::string& caption, const PosTagger& tagger, bool* empty_flag) {
    text::TextEncoder tok(8, 3);  // tokenizer only
    std::string out;
    for (const auto& w : tok.tokenize(caption)) {
        if (!tagger.is_noun(w)) continue;
        if (!out.empty()) out += " ";
        out += w;
    }
    if (empty_flag) *empty_flag = out.empty();
    return out;
}

std::vector<int> present_classes(const Tensor& mask, int num_classes, int ignore_index) {
    std::vector<char> seen(static_cast<size_t>(num_classes), 0);
    for (std::int64_t i = 0; i < mask.numel(); ++i) {
        int v = static_cast<int>(std::lround(mask[i]));
        if (v == ignore_index) continue;
        if (v < 0 || v >= num_classes)
            throw Error("mask contains unknown class index " + std::to_string(v));
        seen[static_cast<size_t>(v)] = 1;
    }
    std::vector<int> out;
    for (int c = 0; c < num_classes; ++c)
        if (seen[static_cast<size_t>(c)]) out.push_back(c);
    return out;
}

std::string join_class_names(const std::vector<std::string>& names, const std::vector<int>& indices) {
    std::string out;
    for (int idx : indices) {
        if (idx < 0 || idx >= static_cast<int>(names.size()))
            throw Error("class index " + std::to_string(idx) + " outside vocabulary");
        out += " " + names[static_cast<size_t>(idx)];
    }
    return out;
}

std::string build_oracle(const Tensor& mask, const std::vector<std::string>& class_names, int ignore_index,
                         bool* empty_flag) {
    std::vector<int> present = present_classes(mask, static_cast<int>(class_names.size()), ignore_index);
    if (empty_flag) *empty_flag = present.empty();
    return join_class_names(class_names, present);
}

namespace {
int round_half_up(double x) { return static_cast<int>(std::floor(x + 0.5)); }

// Fisher-Yates prefix: first k of a shuffled copy.
std::vector<int> sample_without_replacement(std::vector<int> pool, int k, Rng& rng) {
    int n = static_cast<int>(pool.size());
    for (int i = 0; i < k; ++i) {
        int j = static_cast<int>(rng.uniform_int(i, n - 1));
        std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
    }
    pool.resize(static_cast<size_t>(k));
    return pool;
}
}  // namespace

std::vector<int> perturb_oracle(const OracleCaptionSpec& spec, const ClassVocabulary& universe) {
    if (spec.target_precision <= 0.0 || spec.target_precision > 1.0 || spec.target_recall <= 0.0 ||
        spec.target_recall > 1.0)
        throw ValidationError("precision/recall targets must lie in (0, 1]");
    std::unordered_set<int> in_b(spec.present_classes.begin(), spec.present_classes.end());
    for (int c : spec.present_classes)
        if (c < 0 || c >= universe.size())
            throw ValidationError("present class " + std::to_string(c) + " outside universe");
    if (spec.present_classes.empty()) return {};

    int b = static_cast<int>(spec.present_classes.size());
    int k = std::max(1, round_half_up(spec.target_recall * b));
    int d = round_half_up(k * (1.0 - spec.target_precision) / spec.target_precision);

    std::vector<int> outside;
    for (int c = 0; c < universe.size(); ++c)
        if (!in_b.count(c)) outside.push_back(c);
    if (d > static_cast<int>(outside.size()))
        throw ValidationError("universe too small: need " + std::to_string(d) + " distractors, have " +
                              std::to_string(outside.size()));

    Rng rng(spec.rng_seed);
    std::vector<int> kept = sample_without_replacement(spec.present_classes, k, rng);
    std::vector<int> extra = sample_without_replacement(outside, d, rng);
    std::vector<int> out = kept;
    out.insert(out.end(), extra.begin(), extra.end());
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace tadp::prompt
