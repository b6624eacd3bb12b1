#pragma once

// Tiny image and text encoders.
//
// Image: standardize -> conv3x3(3->8, stride 1) -> relu -> conv3x3(8->16,
// stride 2) -> relu -> global average pool -> linear(16 -> d_img). The relu
// output of the second conv (n x 16 x 8 x 8) is exposed for saliency maps.
//
// Text: mean of the non-pad token embeddings -> linear -> relu -> linear.
// Mean pooling makes the text encoder insensitive to token order.

#include <cmath>
#include <concepts>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "cliplite/autodiff.hpp"
#include "cliplite/rng.hpp"
#include "cliplite/tensor.hpp"
#include "cliplite/vocab.hpp"

namespace cliplite {

inline constexpr std::size_t kImageSize = 16;
inline constexpr std::size_t kImageChannels = 3;
inline constexpr std::size_t kImageNumel = kImageChannels * kImageSize * kImageSize;
inline constexpr std::size_t kActivationChannels = 16;
inline constexpr std::size_t kActivationSize = 8;
/// Fixed per-channel standardization applied to [0,1] pixels.
inline constexpr double kPixelMean = 0.5;
inline constexpr double kPixelStd = 0.25;

// ---------------------------------------------------------------------------
// Initialization

enum class InitScheme { kaiming_uniform, xavier_uniform, normal, zeros };

inline InitScheme parse_init_scheme(std::string_view s) {
  if (s == "kaiming-uniform" || s == "kaiming_uniform") return InitScheme::kaiming_uniform;
  if (s == "xavier-uniform" || s == "xavier_uniform") return InitScheme::xavier_uniform;
  if (s == "normal") return InitScheme::normal;
  if (s == "zeros") return InitScheme::zeros;
  throw std::invalid_argument("unknown init scheme '" + std::string(s) + "'");
}

inline double kaiming_uniform_bound(std::size_t fan_in) {
  return std::sqrt(6.0 / static_cast<double>(fan_in));
}

inline double xavier_uniform_bound(std::size_t fan_in, std::size_t fan_out) {
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

inline constexpr double kEmbeddingInitStd = 0.02;

/// Fills a tensor from the substream `stream` of `seed`.
inline Tensor init_tensor(Shape shape, InitScheme scheme, std::size_t fan_in, std::size_t fan_out,
                          std::uint64_t seed, std::string_view stream) {
  Tensor t(std::move(shape));
  Rng rng(seed, stream);
  switch (scheme) {
    case InitScheme::kaiming_uniform: {
      const double b = kaiming_uniform_bound(fan_in);
      for (double& v : t.data) v = rng.uniform(-b, b);
      break;
    }
    case InitScheme::xavier_uniform: {
      const double b = xavier_uniform_bound(fan_in, fan_out);
      for (double& v : t.data) v = rng.uniform(-b, b);
      break;
    }
    case InitScheme::normal:
      for (double& v : t.data) v = rng.normal(0.0, kEmbeddingInitStd);
      break;
    case InitScheme::zeros:
      break;
  }
  return t;
}

namespace detail {

template <class P, class Base>
concept ParamsOf = std::same_as<std::remove_const_t<P>, Base>;

inline void require_finite(const Tensor& t, std::string_view name) {
  if (!t.all_finite()) throw NumericError(std::string(name) + ": non-finite parameter");
}

inline void require_shape(const Tensor& t, const Shape& s, std::string_view name) {
  if (t.shape != s || t.data.size() != numel(s)) {
    throw ShapeError(std::string(name) + ": expected " + shape_str(s) + ", got " +
                     shape_str(t.shape));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Image encoder

struct ImageEncoderParams {
  Tensor conv1_w, conv1_b, conv2_w, conv2_b, fc_w, fc_b;

  std::size_t rep_dim() const { return fc_b.size(); }

  std::vector<NamedParam> parameters(const std::string& prefix = "image") {
    return {{prefix + "/conv1_w", &conv1_w, true}, {prefix + "/conv1_b", &conv1_b, false},
            {prefix + "/conv2_w", &conv2_w, true}, {prefix + "/conv2_b", &conv2_b, false},
            {prefix + "/fc_w", &fc_w, true},       {prefix + "/fc_b", &fc_b, false}};
  }

  void validate() const {
    const std::size_t d = rep_dim();
    detail::require_shape(conv1_w, {8, kImageChannels, 3, 3}, "image/conv1_w");
    detail::require_shape(conv1_b, {8}, "image/conv1_b");
    detail::require_shape(conv2_w, {kActivationChannels, 8, 3, 3}, "image/conv2_w");
    detail::require_shape(conv2_b, {kActivationChannels}, "image/conv2_b");
    detail::require_shape(fc_w, {kActivationChannels, d}, "image/fc_w");
    detail::require_shape(fc_b, {d}, "image/fc_b");
    for (const Tensor* t : {&conv1_w, &conv1_b, &conv2_w, &conv2_b, &fc_w, &fc_b})
      detail::require_finite(*t, "image encoder");
  }
};

inline ImageEncoderParams init_image_encoder(std::uint64_t seed, std::size_t rep_dim = 32) {
  ImageEncoderParams p;
  p.conv1_w = init_tensor({8, 3, 3, 3}, InitScheme::kaiming_uniform, 27, 72, seed,
                          "init/image/conv1_w");
  p.conv1_b = Tensor({8});
  p.conv2_w = init_tensor({16, 8, 3, 3}, InitScheme::kaiming_uniform, 72, 144, seed,
                          "init/image/conv2_w");
  p.conv2_b = Tensor({16});
  p.fc_w = init_tensor({16, rep_dim}, InitScheme::xavier_uniform, 16, rep_dim, seed,
                       "init/image/fc_w");
  p.fc_b = Tensor({rep_dim});
  return p;
}

struct ImageEncoding {
  Var representation;  // [n x d_img]
  Var activations;     // [n x 16 x 8 x 8], relu output of the last conv
};

/// Standardizes [0,1] pixels with the fixed channel statistics.
inline Tensor standardize_images(const Tensor& images) {
  if (images.rank() != 4 || images.shape[1] != kImageChannels || images.shape[2] != kImageSize ||
      images.shape[3] != kImageSize) {
    throw ShapeError("encode_image: expected [n x 3 x 16 x 16], got " + shape_str(images.shape));
  }
  Tensor x = images;
  for (double& v : x.data) v = (v - kPixelMean) / kPixelStd;
  return x;
}

template <detail::ParamsOf<ImageEncoderParams> P>
ImageEncoding encode_image(Tape& tape, P& params, const Tensor& images) {
  Var x = tape.constant(standardize_images(images), "images");
  Var h = conv2d(x, tape.param(params.conv1_w, "image/conv1_w"), 1, 1);
  h = relu(channel_bias(h, tape.param(params.conv1_b, "image/conv1_b")));
  h = conv2d(h, tape.param(params.conv2_w, "image/conv2_w"), 2, 1);
  Var act = relu(channel_bias(h, tape.param(params.conv2_b, "image/conv2_b")));
  Var pooled = global_avg_pool(act);
  Var rep = linear(pooled, tape.param(params.fc_w, "image/fc_w"),
                   tape.param(params.fc_b, "image/fc_b"));
  return {rep, act};
}

// ---------------------------------------------------------------------------
// Text encoder

struct TextEncoderParams {
  Tensor embedding, fc1_w, fc1_b, fc2_w, fc2_b;
  int pad_id = Vocabulary::kPad;

  std::size_t vocab_size() const { return embedding.shape.at(0); }
  std::size_t rep_dim() const { return fc2_b.size(); }

  std::vector<NamedParam> parameters(const std::string& prefix = "text") {
    return {{prefix + "/embedding", &embedding, false},
            {prefix + "/fc1_w", &fc1_w, true},
            {prefix + "/fc1_b", &fc1_b, false},
            {prefix + "/fc2_w", &fc2_w, true},
            {prefix + "/fc2_b", &fc2_b, false}};
  }

  void validate() const {
    if (embedding.rank() != 2) throw ShapeError("text/embedding must be 2-D");
    const std::size_t d_emb = embedding.shape[1], hidden = fc1_b.size(), d = fc2_b.size();
    detail::require_shape(fc1_w, {d_emb, hidden}, "text/fc1_w");
    detail::require_shape(fc1_b, {hidden}, "text/fc1_b");
    detail::require_shape(fc2_w, {hidden, d}, "text/fc2_w");
    detail::require_shape(fc2_b, {d}, "text/fc2_b");
    for (const Tensor* t : {&embedding, &fc1_w, &fc1_b, &fc2_w, &fc2_b})
      detail::require_finite(*t, "text encoder");
  }
};

inline TextEncoderParams init_text_encoder(std::uint64_t seed, std::size_t vocab_size,
                                           std::size_t emb_dim = 32, std::size_t hidden = 32,
                                           std::size_t rep_dim = 32) {
  TextEncoderParams p;
  p.embedding = init_tensor({vocab_size, emb_dim}, InitScheme::normal, emb_dim, emb_dim, seed,
                            "init/text/embedding");
  p.fc1_w = init_tensor({emb_dim, hidden}, InitScheme::kaiming_uniform, emb_dim, hidden, seed,
                        "init/text/fc1_w");
  p.fc1_b = Tensor({hidden});
  p.fc2_w = init_tensor({hidden, rep_dim}, InitScheme::xavier_uniform, hidden, rep_dim, seed,
                        "init/text/fc2_w");
  p.fc2_b = Tensor({rep_dim});
  return p;
}

inline std::vector<std::vector<int>> token_ids(std::span<const TokenSequence> tokens,
                                               std::size_t vocab_size) {
  std::vector<std::vector<int>> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) {
    if (t.ids.empty() || t.ids.size() > kMaxCaptionLength) {
      throw std::invalid_argument("encode_text: sequence length " + std::to_string(t.ids.size()) +
                                  " outside [1, " + std::to_string(kMaxCaptionLength) + "]");
    }
    for (int id : t.ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= vocab_size) {
        throw UnknownTokenError("encode_text: token id " + std::to_string(id) +
                                " outside vocabulary");
      }
    }
    ids.push_back(t.ids);
  }
  return ids;
}

template <detail::ParamsOf<TextEncoderParams> P>
Var encode_text(Tape& tape, P& params, std::span<const TokenSequence> tokens) {
  if (tokens.empty()) throw std::invalid_argument("encode_text: empty batch");
  const auto ids = token_ids(tokens, params.vocab_size());
  Var pooled = embed_mean(tape.param(params.embedding, "text/embedding"), ids, params.pad_id);
  Var h = relu(linear(pooled, tape.param(params.fc1_w, "text/fc1_w"),
                      tape.param(params.fc1_b, "text/fc1_b")));
  return linear(h, tape.param(params.fc2_w, "text/fc2_w"), tape.param(params.fc2_b, "text/fc2_b"));
}

}  // namespace cliplite
