#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tadp/tensor.hpp"

namespace tadp::text {

// Sequence encoding split into a constant part plus, for one replaceable
// token, a per-row linear coefficient: row_i = base.row(i) + coeff[i] * e.
// This is what lets token-embedding training take exact gradients while the
// rest of the encoder stays frozen.
struct AffineEncoding {
    nn::Tensor base;           // N x D with the replaceable token's vector zeroed
    std::vector<float> coeff;  // length N
    std::vector<std::string> token_texts;
    int first_eos = -1;
};

// Deterministic stand-in for a contextual text encoder. Every word gets a
// unit-norm vector seeded from its hash, so equal words agree exactly and
// distinct words are near-orthogonal at D = 768. Context is mixed linearly:
// row_i = base_i + alpha * mean(base_0..base_{i-1}), with the sequence laid
// out as BOS, words..., EOS, then EOS-filled padding. The first-EOS row
// therefore summarizes the whole sentence.
class TextEncoder {
public:
    explicit TextEncoder(int embed_dim = 768, int max_tokens = 77, std::uint64_t seed = 0x7e57);

    int embed_dim() const { return embed_dim_; }
    int max_tokens() const { return max_tokens_; }

    // Lowercases and splits on whitespace, stripping outer punctuation.
    // Chunks shaped like <...> pass through intact (learned tokens).
    std::vector<std::string> tokenize(const std::string& text) const;

    // Sequence length after adding BOS/EOS, before padding.
    int sequence_length(const std::string& text) const;

    // Context-free unit vector for one word.
    nn::Tensor word_vector(const std::string& word) const;

    // Full contextual encoding. pad_to 0 keeps the natural length; otherwise
    // the sequence is EOS-padded (or reported as overflow via the flag).
    nn::Tensor encode(const std::string& text, std::vector<std::string>* token_texts = nullptr,
                      int pad_to = 0, bool* truncated = nullptr) const;

    // Contextual embedding at the first EOS position without materializing
    // the full matrix.
    nn::Tensor sentence_summary(const std::string& text) const;

    // Encoding as an affine function of one registered token's embedding.
    AffineEncoding encode_affine(const std::string& text, const std::string& learned_token,
                                 int pad_to = 0) const;

    void register_token(const std::string& token, nn::Tensor embedding);
    bool has_token(const std::string& token) const;
    const nn::Tensor& token_embedding(const std::string& token) const;

    static constexpr const char* kBos = "<|startoftext|>";
    static constexpr const char* kEos = "<|endoftext|>";

private:
    nn::Tensor base_vector(const std::string& token) const;

    int embed_dim_;
    int max_tokens_;
    std::uint64_t seed_;
    float alpha_ = 0.5f;
    std::map<std::string, nn::Tensor> learned_;
};

float cosine(const nn::Tensor& a, const nn::Tensor& b);

}  // namespace tadp::text
