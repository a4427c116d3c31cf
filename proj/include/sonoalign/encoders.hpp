#pragma once

// Desk-scale stand-ins for the vision and text backbones: a two-layer tanh
// perceptron over precomputed image features and a mean-of-token-embeddings
// text encoder, both projecting into the shared embedding space.

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "sonoalign/autodiff.hpp"
#include "sonoalign/rng.hpp"

namespace sonoalign::encoders {

struct ImageEncoderParams {
  ad::Tensor w1;  // D_in x H
  ad::Tensor b1;  // 1 x H
  ad::Tensor w2;  // H x D
  ad::Tensor b2;  // 1 x D

  static ImageEncoderParams init(std::size_t d_in, std::size_t hidden, std::size_t dim, Rng& rng);
  std::size_t input_dim() const { return w1.rows(); }
  std::size_t output_dim() const { return w2.cols(); }
};

// Rows of `features` (B x D_in) through tanh(x W1 + b1) W2 + b2. Output is
// not normalized.
ad::Tensor encode_images(const ad::Tensor& features, const ImageEncoderParams& params);
ad::Tensor encode_image(std::span<const double> features, const ImageEncoderParams& params);

// Splits on every non-alphanumeric run after lowercasing.
std::vector<std::string> split_words(std::string_view caption);

// Frozen token vocabulary. Id 0 is the out-of-vocabulary token; the rest are
// sorted lexicographically so the id assignment depends only on the token set.
class Vocabulary {
 public:
  static constexpr std::size_t kOovId = 0;
  static constexpr const char* kOovToken = "<oov>";

  Vocabulary();
  static Vocabulary build(std::span<const std::string> texts);
  static Vocabulary from_tokens(std::vector<std::string> tokens);

  std::size_t size() const noexcept { return tokens_.size(); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }
  std::size_t id(const std::string& token) const;
  std::vector<std::size_t> tokenize(std::string_view caption) const;

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct TextEncoderParams {
  ad::Tensor embedding;  // V x D_e
  ad::Tensor proj;       // D_e x D
  ad::Tensor bias;       // 1 x D

  static TextEncoderParams init(std::size_t vocab_size, std::size_t token_dim, std::size_t dim, Rng& rng);
  std::size_t output_dim() const { return proj.cols(); }
};

// One row per token list: mean token embedding (zeros for an empty list),
// then the affine projection.
ad::Tensor encode_texts(const std::vector<std::vector<std::size_t>>& token_ids, const TextEncoderParams& params);
ad::Tensor encode_text(std::string_view caption, const Vocabulary& vocab, const TextEncoderParams& params);

}  // namespace sonoalign::encoders
