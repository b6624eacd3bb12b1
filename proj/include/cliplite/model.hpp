#pragma once

// The dual encoder: image and text encoders, one projection head each, and
// the InfoNCE logit scale (unused by the single-negative objectives).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cliplite/autodiff.hpp"
#include "cliplite/discriminator.hpp"
#include "cliplite/encoders.hpp"
#include "cliplite/vocab.hpp"

namespace cliplite {

inline constexpr double kInitTemperature = 0.07;
inline constexpr double kMaxLogitScale = 4.605170185988092;  // ln 100
inline constexpr double kMinLogitScale = -kMaxLogitScale;

struct ClipModel {
  ImageEncoderParams image;
  TextEncoderParams text;
  ProjectionParams image_proj;
  ProjectionParams text_proj;
  Tensor logit_scale = Tensor::scalar(std::log(1.0 / kInitTemperature));  // ln(1 / temperature)

  std::vector<NamedParam> parameters(bool with_logit_scale = true) {
    std::vector<NamedParam> out = image.parameters("image");
    for (auto& p : text.parameters("text")) out.push_back(p);
    for (auto& p : image_proj.parameters("image_proj")) out.push_back(p);
    for (auto& p : text_proj.parameters("text_proj")) out.push_back(p);
    if (with_logit_scale) out.push_back({"logit_scale", &logit_scale, false});
    return out;
  }

  void validate() const {
    image.validate();
    text.validate();
    image_proj.validate();
    text_proj.validate();
    if (image_proj.in_dim() != image.rep_dim() || text_proj.in_dim() != text.rep_dim()) {
      throw ShapeError("model: projection input width does not match encoder output");
    }
    if (image_proj.out_dim() != text_proj.out_dim()) {
      throw ShapeError("model: image and text projections disagree on shared width");
    }
  }

  void clamp_logit_scale() {
    logit_scale.data[0] = std::clamp(logit_scale.data[0], kMinLogitScale, kMaxLogitScale);
  }

  std::size_t shared_dim() const { return image_proj.out_dim(); }
};

inline ClipModel init_clip_model(std::uint64_t seed, std::size_t rep_dim = 32,
                                 std::size_t proj_dim = 32) {
  ClipModel m;
  m.image = init_image_encoder(seed, rep_dim);
  m.text = init_text_encoder(seed, Vocabulary::shapes().size(), 32, 32, rep_dim);
  m.image_proj = init_projection(seed, "init/image_proj", rep_dim, proj_dim);
  m.text_proj = init_projection(seed, "init/text_proj", rep_dim, proj_dim);
  return m;
}

template <detail::ParamsOf<ClipModel> M>
Var project_images(Tape& tape, M& m, const Tensor& images, ImageEncoding* encoding = nullptr) {
  ImageEncoding enc = encode_image(tape, m.image, images);
  if (encoding) *encoding = enc;
  return project(tape, m.image_proj, enc.representation, "image_proj");
}

template <detail::ParamsOf<ClipModel> M>
Var project_texts(Tape& tape, M& m, std::span<const TokenSequence> tokens) {
  return project(tape, m.text_proj, encode_text(tape, m.text, tokens), "text_proj");
}

inline constexpr std::size_t kInferenceChunk = 256;

/// Projected image embeddings [n x d_proj], computed in chunks without gradients.
inline Tensor embed_images(const ClipModel& m, const Tensor& images) {
  const std::size_t n = images.shape.at(0);
  const std::size_t d = m.shared_dim();
  Tensor out({n, d});
  for (std::size_t start = 0; start < n; start += kInferenceChunk) {
    const std::size_t len = std::min(kInferenceChunk, n - start);
    Tensor chunk({len, kImageChannels, kImageSize, kImageSize});
    std::copy_n(images.data.begin() + static_cast<std::ptrdiff_t>(start * kImageNumel),
                len * kImageNumel, chunk.data.begin());
    Tape tape(Tape::Mode::inference);
    const Var z = project_images(tape, m, chunk);
    std::copy(z.value().begin(), z.value().end(),
              out.data.begin() + static_cast<std::ptrdiff_t>(start * d));
  }
  return out;
}

/// Projected text embeddings [n x d_proj].
inline Tensor embed_texts(const ClipModel& m, std::span<const TokenSequence> tokens) {
  Tape tape(Tape::Mode::inference);
  return project_texts(tape, m, tokens).to_tensor();
}

/// Unprojected image encoder output [n x d_img], used by the linear probe.
inline Tensor image_representations(const ImageEncoderParams& p, const Tensor& images) {
  const std::size_t n = images.shape.at(0);
  const std::size_t d = p.rep_dim();
  Tensor out({n, d});
  for (std::size_t start = 0; start < n; start += kInferenceChunk) {
    const std::size_t len = std::min(kInferenceChunk, n - start);
    Tensor chunk({len, kImageChannels, kImageSize, kImageSize});
    std::copy_n(images.data.begin() + static_cast<std::ptrdiff_t>(start * kImageNumel),
                len * kImageNumel, chunk.data.begin());
    Tape tape(Tape::Mode::inference);
    const Var r = encode_image(tape, p, chunk).representation;
    std::copy(r.value().begin(), r.value().end(),
              out.data.begin() + static_cast<std::ptrdiff_t>(start * d));
  }
  return out;
}

}  // namespace cliplite
