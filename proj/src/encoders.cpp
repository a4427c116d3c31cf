#include "sonoalign/encoders.hpp"

#include <algorithm>
#include <cctype>
#include <set>

#include "sonoalign/errors.hpp"
#include "sonoalign/init.hpp"

namespace sonoalign::encoders {

ImageEncoderParams ImageEncoderParams::init(std::size_t d_in, std::size_t hidden, std::size_t dim, Rng& rng) {
  if (hidden < 1) throw ValidationError("image encoder hidden width must be at least 1");
  return {ad::Tensor::parameter(glorot_uniform(d_in, hidden, rng)), ad::Tensor::parameter(Matrix(1, hidden)),
          ad::Tensor::parameter(glorot_uniform(hidden, dim, rng)), ad::Tensor::parameter(Matrix(1, dim))};
}

ad::Tensor encode_images(const ad::Tensor& features, const ImageEncoderParams& params) {
  if (features.cols() != params.input_dim()) {
    throw DimensionError("image features have " + std::to_string(features.cols()) + " entries, encoder expects " +
                         std::to_string(params.input_dim()));
  }
  ad::Tensor hidden = ad::tanh_elem(ad::add_row(ad::matmul(features, params.w1), params.b1));
  return ad::add_row(ad::matmul(hidden, params.w2), params.b2);
}

ad::Tensor encode_image(std::span<const double> features, const ImageEncoderParams& params) {
  return encode_images(ad::Tensor::constant(Matrix::row_vector(features)), params);
}

std::vector<std::string> split_words(std::string_view caption) {
  std::vector<std::string> words;
  std::string current;
  for (char ch : caption) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c)) {
      current.push_back(static_cast<char>(std::tolower(c)));
    } else if (!current.empty()) {
      words.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) words.push_back(std::move(current));
  return words;
}

Vocabulary::Vocabulary() : tokens_{kOovToken}, index_{{kOovToken, kOovId}} {}

Vocabulary Vocabulary::build(std::span<const std::string> texts) {
  std::set<std::string> unique;
  for (const auto& t : texts) {
    for (auto& w : split_words(t)) unique.insert(std::move(w));
  }
  return from_tokens(std::vector<std::string>(unique.begin(), unique.end()));
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
  Vocabulary v;
  std::sort(tokens.begin(), tokens.end());
  tokens.erase(std::unique(tokens.begin(), tokens.end()), tokens.end());
  for (auto& t : tokens) {
    if (t == kOovToken) continue;
    v.index_.emplace(t, v.tokens_.size());
    v.tokens_.push_back(std::move(t));
  }
  return v;
}

std::size_t Vocabulary::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kOovId : it->second;
}

std::vector<std::size_t> Vocabulary::tokenize(std::string_view caption) const {
  std::vector<std::size_t> ids;
  for (const auto& w : split_words(caption)) ids.push_back(id(w));
  return ids;
}

TextEncoderParams TextEncoderParams::init(std::size_t vocab_size, std::size_t token_dim, std::size_t dim, Rng& rng) {
  return {ad::Tensor::parameter(glorot_uniform(vocab_size, token_dim, rng)),
          ad::Tensor::parameter(glorot_uniform(token_dim, dim, rng)), ad::Tensor::parameter(Matrix(1, dim))};
}

ad::Tensor encode_texts(const std::vector<std::vector<std::size_t>>& token_ids, const TextEncoderParams& params) {
  // Sorted bags make the mean independent of word order bit for bit.
  auto bags = token_ids;
  for (auto& b : bags) std::sort(b.begin(), b.end());
  ad::Tensor pooled = ad::bag_mean(params.embedding, bags);
  return ad::add_row(ad::matmul(pooled, params.proj), params.bias);
}

ad::Tensor encode_text(std::string_view caption, const Vocabulary& vocab, const TextEncoderParams& params) {
  return encode_texts({vocab.tokenize(caption)}, params);
}

}  // namespace sonoalign::encoders
