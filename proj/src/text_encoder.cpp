#include "tadp/text_encoder.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include "tadp/error.hpp"
#include "tadp/rng.hpp"

namespace tadp::text {

using nn::Tensor;

TextEncoder::TextEncoder(int embed_dim, int max_tokens, std::uint64_t seed)
    : embed_dim_(embed_dim), max_tokens_(max_tokens), seed_(seed) {
    if (embed_dim <= 0 || max_tokens < 3) throw ValidationError("text encoder needs dim > 0 and >= 3 token slots");
}

std::vector<std::string> TextEncoder::tokenize(const std::string& text) const {
    std::vector<std::string> out;
    size_t i = 0;
    while (i < text.size()) {
        while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
        size_t j = i;
        while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
        if (j > i) {
            std::string chunk = text.substr(i, j - i);
            if (chunk.front() == '<' && chunk.back() == '>') {
                out.push_back(chunk);
            } else {
                size_t b = 0, e = chunk.size();
                auto wordish = [](char c) {
                    return std::isalnum(static_cast<unsigned char>(c)) || c == '\'' || c == '-';
                };
                while (b < e && !wordish(chunk[b])) ++b;
                while (e > b && !wordish(chunk[e - 1])) --e;
                if (e > b) {
                    std::string w = chunk.substr(b, e - b);
                    std::transform(w.begin(), w.end(), w.begin(),
                                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
                    out.push_back(std::move(w));
                }
            }
        }
        i = j;
    }
    return out;
}

int TextEncoder::sequence_length(const std::string& text) const {
    return static_cast<int>(tokenize(text).size()) + 2;
}

Tensor TextEncoder::base_vector(const std::string& token) const {
    auto it = learned_.find(token);
    if (it != learned_.end()) return it->second;
    Rng rng(fnv1a64(token) ^ seed_);
    Tensor v({embed_dim_});
    double norm2 = 0.0;
    for (int i = 0; i < embed_dim_; ++i) {
        v[i] = rng.normal_f();
        norm2 += static_cast<double>(v[i]) * v[i];
    }
    float inv = static_cast<float>(1.0 / std::sqrt(std::max(norm2, 1e-30)));
    for (int i = 0; i < embed_dim_; ++i) v[i] *= inv;
    return v;
}

Tensor TextEncoder::word_vector(const std::string& word) const { return base_vector(word); }

Tensor TextEncoder::encode(const std::string& text, std::vector<std::string>* token_texts, int pad_to,
                           bool* truncated) const {
    std::vector<std::string> words = tokenize(text);
    if (truncated) *truncated = false;
    if (pad_to > 0 && static_cast<int>(words.size()) + 2 > pad_to) {
        words.resize(static_cast<size_t>(pad_to - 2));
        if (truncated) *truncated = true;
    }
    std::vector<std::string> seq;
    seq.reserve(words.size() + 2);
    seq.emplace_back(kBos);
    for (auto& w : words) seq.push_back(std::move(w));
    seq.emplace_back(kEos);
    int natural = static_cast<int>(seq.size());
    int n = pad_to > 0 ? pad_to : natural;
    while (static_cast<int>(seq.size()) < n) seq.emplace_back(kEos);

    Tensor out({n, embed_dim_});
    std::vector<double> prefix(static_cast<size_t>(embed_dim_), 0.0);
    for (int i = 0; i < n; ++i) {
        Tensor b = base_vector(seq[static_cast<size_t>(i)]);
        for (int d = 0; d < embed_dim_; ++d) {
            float ctx = i == 0 ? 0.0f : alpha_ * static_cast<float>(prefix[static_cast<size_t>(d)] / i);
            out.at(i, d) = b[d] + ctx;
        }
        for (int d = 0; d < embed_dim_; ++d) prefix[static_cast<size_t>(d)] += b[d];
    }
    if (token_texts) *token_texts = seq;
    return out;
}

Tensor TextEncoder::sentence_summary(const std::string& text) const {
    std::vector<std::string> words = tokenize(text);
    if (static_cast<int>(words.size()) + 2 > max_tokens_) words.resize(static_cast<size_t>(max_tokens_ - 2));
    std::vector<double> prefix(static_cast<size_t>(embed_dim_), 0.0);
    Tensor bos = base_vector(kBos);
    for (int d = 0; d < embed_dim_; ++d) prefix[static_cast<size_t>(d)] = bos[d];
    for (const auto& w : words) {
        Tensor b = base_vector(w);
        for (int d = 0; d < embed_dim_; ++d) prefix[static_cast<size_t>(d)] += b[d];
    }
    int plen = static_cast<int>(words.size()) + 1;
    Tensor eos = base_vector(kEos);
    Tensor out({embed_dim_});
    for (int d = 0; d < embed_dim_; ++d)
        out[d] = eos[d] + alpha_ * static_cast<float>(prefix[static_cast<size_t>(d)] / plen);
    return out;
}

AffineEncoding TextEncoder::encode_affine(const std::string& text, const std::string& learned_token,
                                          int pad_to) const {
    std::vector<std::string> words = tokenize(text);
    if (pad_to > 0 && static_cast<int>(words.size()) + 2 > pad_to) words.resize(static_cast<size_t>(pad_to - 2));
    std::vector<std::string> seq;
    seq.emplace_back(kBos);
    for (auto& w : words) seq.push_back(std::move(w));
    seq.emplace_back(kEos);
    int natural = static_cast<int>(seq.size());
    int n = pad_to > 0 ? pad_to : natural;
    while (static_cast<int>(seq.size()) < n) seq.emplace_back(kEos);

    AffineEncoding enc;
    enc.base = Tensor({n, embed_dim_});
    enc.coeff.assign(static_cast<size_t>(n), 0.0f);
    enc.token_texts = seq;
    std::vector<double> prefix(static_cast<size_t>(embed_dim_), 0.0);
    int prefix_hits = 0;
    for (int i = 0; i < n; ++i) {
        bool is_learned = seq[static_cast<size_t>(i)] == learned_token;
        if (enc.first_eos < 0 && seq[static_cast<size_t>(i)] == kEos) enc.first_eos = i;
        Tensor b = is_learned ? Tensor::zeros({embed_dim_}) : base_vector(seq[static_cast<size_t>(i)]);
        float own = is_learned ? 1.0f : 0.0f;
        float ctx_coeff = i == 0 ? 0.0f : alpha_ * static_cast<float>(prefix_hits) / static_cast<float>(i);
        enc.coeff[static_cast<size_t>(i)] = own + ctx_coeff;
        for (int d = 0; d < embed_dim_; ++d) {
            float ctx = i == 0 ? 0.0f : alpha_ * static_cast<float>(prefix[static_cast<size_t>(d)] / i);
            enc.base.at(i, d) = b[d] + ctx;
        }
        for (int d = 0; d < embed_dim_; ++d) prefix[static_cast<size_t>(d)] += b[d];
        if (is_learned) ++prefix_hits;
    }
    return enc;
}

void TextEncoder::register_token(const std::string& token, Tensor embedding) {
    if (embedding.numel() != embed_dim_) throw ValidationError("learned token embedding has wrong width");
    if (token.size() < 3 || token.front() != '<' || token.back() != '>')
        throw ValidationError("learned tokens must look like <name>");
    learned_[token] = embedding.reshaped({embed_dim_});
}

bool TextEncoder::has_token(const std::string& token) const { return learned_.count(token) > 0; }

const Tensor& TextEncoder::token_embedding(const std::string& token) const {
    auto it = learned_.find(token);
    if (it == learned_.end()) throw ValidationError("unknown learned token " + token);
    return it->second;
}

float cosine(const Tensor& a, const Tensor& b) {
    if (a.numel() != b.numel()) throw ValidationError("cosine: length mismatch");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        dot += static_cast<double>(a[i]) * b[i];
        na += static_cast<double>(a[i]) * a[i];
        nb += static_cast<double>(b[i]) * b[i];
    }
    if (na <= 0.0 || nb <= 0.0) return 0.0f;
    return static_cast<float>(dot / (std::sqrt(na) * std::sqrt(nb)));
}

}  // namespace tadp::text
