#pragma once

// Retrieval, zero-shot prompting and linear probing on frozen models.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "cliplite/discriminator.hpp"
#include "cliplite/model.hpp"
#include "cliplite/synth_data.hpp"

namespace cliplite {

// ---------------------------------------------------------------------------
// Retrieval

enum class RetrievalDirection { text_to_image, image_to_text };

inline std::string_view direction_name(RetrievalDirection d) {
  return d == RetrievalDirection::text_to_image ? "text_to_image" : "image_to_text";
}

struct RetrievalReport {
  RetrievalDirection direction = RetrievalDirection::text_to_image;
  std::vector<std::size_t> ks;
  std::vector<double> recall;  // recall[i] is R@ks[i]
  std::size_t n_queries = 0;

  double at(std::size_t k) const {
    for (std::size_t i = 0; i < ks.size(); ++i)
      if (ks[i] == k) return recall[i];
    throw std::out_of_range("retrieval report has no R@" + std::to_string(k));
  }
};

/// 0-based rank of gallery entry `truth` in row `row` of a [q x g] score
/// matrix. Ties go to the lower gallery index.
inline std::size_t rank_of(const Tensor& scores, std::size_t row, std::size_t truth) {
  const std::size_t g = scores.shape[1];
  const double* s = scores.data.data() + row * g;
  std::size_t rank = 0;
  for (std::size_t j = 0; j < g; ++j) {
    if (s[j] > s[truth] || (s[j] == s[truth] && j < truth)) ++rank;
  }
  return rank;
}

/// Query i's true match is gallery entry i.
inline RetrievalReport recall_at_k(const Tensor& align, std::span<const std::size_t> ks,
                                   RetrievalDirection direction) {
  if (align.rank() != 2) throw ShapeError("recall_at_k: expected a 2-D alignment matrix");
  const std::size_t q = align.shape[0], g = align.shape[1];
  if (q == 0) throw std::invalid_argument("recall_at_k: no queries");
  if (q > g) throw ShapeError("recall_at_k: more queries than gallery entries");
  for (std::size_t k : ks) {
    if (k == 0 || k > g) {
      throw std::invalid_argument("recall_at_k: k=" + std::to_string(k) + " outside [1, " +
                                  std::to_string(g) + "]");
    }
  }
  RetrievalReport r{direction, {ks.begin(), ks.end()}, std::vector<double>(ks.size(), 0.0), q};
  for (std::size_t i = 0; i < q; ++i) {
    const std::size_t rank = rank_of(align, i, i);
    for (std::size_t j = 0; j < ks.size(); ++j)
      if (rank < ks[j]) r.recall[j] += 1.0;
  }
  for (double& v : r.recall) v /= static_cast<double>(q);
  return r;
}

inline Tensor transpose(const Tensor& m) {
  if (m.rank() != 2) throw ShapeError("transpose: expected 2-D input");
  const std::size_t r = m.shape[0], c = m.shape[1];
  Tensor t({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) t.data[j * r + i] = m.data[i * c + j];
  return t;
}

/// Held-out samples with one representative per attribute tuple
/// (texture class, color, shape, row, col), so every caption has exactly one
/// correct image in the gallery.
inline std::vector<std::size_t> unique_by_attributes(const ShapesCorpus& corpus,
                                                     std::span<const std::size_t> indices) {
  std::map<std::array<int, 5>, std::size_t> first;
  std::vector<std::size_t> out;
  for (std::size_t i : indices) {
    const auto& l = corpus.samples.at(i).labels;
    if (first.emplace(std::array<int, 5>{l.texture, l.color, l.shape, l.row, l.col}, i).second) {
      out.push_back(i);
    }
  }
  return out;
}

struct RetrievalEval {
  RetrievalReport text_to_image;
  RetrievalReport image_to_text;

  double mean_recall(std::size_t k) const { return 0.5 * (text_to_image.at(k) + image_to_text.at(k)); }
};

inline const std::array<std::size_t, 3> kDefaultKs{1, 5, 10};

/// Cosine-alignment retrieval in both directions over the deduplicated held-out set.
inline RetrievalEval evaluate_retrieval(const ClipModel& model, const ShapesCorpus& corpus,
                                        std::span<const std::size_t> held_out,
                                        std::span<const std::size_t> ks = kDefaultKs) {
  const auto items = unique_by_attributes(corpus, held_out);
  const Tensor img = embed_images(model, stack_images(corpus, items));
  const auto tokens = gather_tokens(corpus, items);
  const Tensor txt = embed_texts(model, tokens);
  const Tensor t2i = cosine_matrix(txt, img);
  return {recall_at_k(t2i, ks, RetrievalDirection::text_to_image),
          recall_at_k(transpose(t2i), ks, RetrievalDirection::image_to_text)};
}

// ---------------------------------------------------------------------------
// Zero-shot prompting

inline const std::array<std::string_view, 3> kPromptTemplates{
    "a photo of a {}", "a picture of a {}", "a {}"};

inline std::string fill_prompt(std::string_view tmpl, std::string_view class_name) {
  const auto pos = tmpl.find("{}");
  if (pos == std::string_view::npos || tmpl.find("{}", pos + 2) != std::string_view::npos) {
    throw std::invalid_argument("prompt template '" + std::string(tmpl) +
                                "' must contain exactly one {} slot");
  }
  std::string s(tmpl.substr(0, pos));
  s += class_name;
  s += tmpl.substr(pos + 2);
  return s;
}

inline std::vector<TokenSequence> class_prompts(std::string_view tmpl,
                                                std::span<const std::string> class_names,
                                                const Vocabulary& vocab = Vocabulary::shapes()) {
  if (class_names.empty()) throw std::invalid_argument("zero-shot: no class names");
  std::vector<TokenSequence> out;
  for (const auto& c : class_names) out.push_back(vocab.tokenize(fill_prompt(tmpl, c)));
  return out;
}

struct ZeroShotPrediction {
  std::size_t label = 0;
  std::vector<double> probabilities;
};

/// Softmax over the cosine alignments of each image with each class prompt.
inline std::vector<ZeroShotPrediction> zero_shot_classify(const Tensor& image_embeddings,
                                                          const Tensor& prompt_embeddings) {
  const Tensor align = cosine_matrix(image_embeddings, prompt_embeddings);
  const std::size_t n = align.shape[0], c = align.shape[1];
  std::vector<ZeroShotPrediction> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = align.data.data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    auto& p = out[i].probabilities;
    p.resize(c);
    for (std::size_t j = 0; j < c; ++j) z += (p[j] = std::exp(row[j] - mx));
    for (double& v : p) v /= z;
    out[i].label = static_cast<std::size_t>(std::max_element(row, row + c) - row);
  }
  return out;
}

inline std::vector<std::string> shape_class_names() {
  return {grammar::kShapes.begin(), grammar::kShapes.end()};
}

/// Fraction of `indices` whose shape is predicted correctly with `tmpl`.
inline double zero_shot_shape_accuracy(const ClipModel& model, const ShapesCorpus& corpus,
                                       std::span<const std::size_t> indices, std::string_view tmpl) {
  if (indices.empty()) throw std::invalid_argument("zero-shot: empty evaluation set");
  const auto names = shape_class_names();
  const Tensor prompts = embed_texts(model, class_prompts(tmpl, names));
  const Tensor images = embed_images(model, stack_images(corpus, {indices.begin(), indices.end()}));
  const auto pred = zero_shot_classify(images, prompts);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < indices.size(); ++i)
    if (static_cast<int>(pred[i].label) == corpus.samples[indices[i]].labels.shape) ++correct;
  return static_cast<double>(correct) / static_cast<double>(indices.size());
}

// ---------------------------------------------------------------------------
// Linear probe: multinomial logistic regression on frozen features.

struct ProbeConfig {
  double lr = 0.5;
  double l2 = 1e-4;
  std::size_t max_iters = 2000;
  double tol = 1e-7;  // stop when the loss improves by less than this
};

struct ProbeResult {
  double accuracy = 0.0;
  double train_accuracy = 0.0;
  std::size_t iterations = 0;
  std::size_t classes = 0;
};

/// Features are standardized with training-set statistics, then the softmax
/// classifier is fit by full-batch gradient descent.
inline ProbeResult linear_probe(const Tensor& train_x, std::span<const int> train_y,
                                const Tensor& test_x, std::span<const int> test_y,
                                const ProbeConfig& cfg = {}) {
  if (train_x.rank() != 2 || test_x.rank() != 2 || train_x.shape[1] != test_x.shape[1]) {
    throw ShapeError("linear_probe: feature matrices must be 2-D with equal width");
  }
  const std::size_t n = train_x.shape[0], d = train_x.shape[1], m = test_x.shape[0];
  if (train_y.size() != n || test_y.size() != m) throw ShapeError("linear_probe: label count mismatch");
  if (n == 0 || m == 0) throw std::invalid_argument("linear_probe: empty split");
  int max_label = 0;
  for (int y : train_y) {
    if (y < 0) throw std::invalid_argument("linear_probe: negative label");
    max_label = std::max(max_label, y);
  }
  const auto c = static_cast<std::size_t>(max_label) + 1;
  std::vector<bool> present(c, false);
  std::size_t distinct = 0;
  for (int y : train_y)
    if (!present[static_cast<std::size_t>(y)]) present[static_cast<std::size_t>(y)] = true, ++distinct;
  if (distinct < 2) throw std::invalid_argument("linear_probe: training labels hold a single class");

  std::vector<double> mu(d, 0.0), sd(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) mu[j] += train_x.data[i * d + j];
  for (double& v : mu) v /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      const double e = train_x.data[i * d + j] - mu[j];
      sd[j] += e * e;
    }
  for (double& v : sd) v = std::sqrt(v / static_cast<double>(n)) + 1e-8;
  auto standardize = [&](const Tensor& x) {
    Tensor s = x;
    const std::size_t rows = x.shape[0];
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < d; ++j) s.data[i * d + j] = (x.data[i * d + j] - mu[j]) / sd[j];
    return s;
  };
  const Tensor xs = standardize(train_x), ts = standardize(test_x);

  std::vector<double> W(d * c, 0.0), b(c, 0.0), gW(d * c), gb(c), logits(c);
  auto forward = [&](const Tensor& x, std::size_t i) {
    for (std::size_t k = 0; k < c; ++k) {
      double s = b[k];
      for (std::size_t j = 0; j < d; ++j) s += x.data[i * d + j] * W[j * c + k];
      logits[k] = s;
    }
  };
  double prev = std::numeric_limits<double>::infinity();
  ProbeResult result;
  result.classes = c;
  for (std::size_t it = 0; it < cfg.max_iters; ++it) {
    std::fill(gW.begin(), gW.end(), 0.0);
    std::fill(gb.begin(), gb.end(), 0.0);
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      forward(xs, i);
      const double mx = *std::max_element(logits.begin(), logits.end());
      double z = 0.0;
      for (double& v : logits) z += (v = std::exp(v - mx));
      const auto y = static_cast<std::size_t>(train_y[i]);
      loss -= std::log(logits[y] / z);
      for (std::size_t k = 0; k < c; ++k) {
        const double g = logits[k] / z - (k == y ? 1.0 : 0.0);
        gb[k] += g;
        for (std::size_t j = 0; j < d; ++j) gW[j * c + k] += g * xs.data[i * d + j];
      }
    }
    const double inv_n = 1.0 / static_cast<double>(n);
    loss *= inv_n;
    for (double w : W) loss += 0.5 * cfg.l2 * w * w;
    for (std::size_t q = 0; q < W.size(); ++q) W[q] -= cfg.lr * (gW[q] * inv_n + cfg.l2 * W[q]);
    for (std::size_t k = 0; k < c; ++k) b[k] -= cfg.lr * gb[k] * inv_n;
    result.iterations = it + 1;
    if (prev - loss < cfg.tol && prev - loss >= 0.0) break;
    prev = loss;
  }
  auto accuracy = [&](const Tensor& x, std::span<const int> y) {
    std::size_t correct = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
      forward(x, i);
      const auto pred = static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
      if (pred == y[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(y.size());
  };
  result.train_accuracy = accuracy(xs, train_y);
  result.accuracy = accuracy(ts, test_y);
  return result;
}

enum class ProbeTarget { shape, color, texture, cell };

inline int probe_label(const ShapeLabels& l, ProbeTarget t) {
  switch (t) {
    case ProbeTarget::shape: return l.shape;
    case ProbeTarget::color: return l.color;
    case ProbeTarget::texture: return l.texture;
    case ProbeTarget::cell: return l.row * 3 + l.col;
  }
  return 0;
}

/// Probe accuracy of frozen image-encoder representations on a train/test split.
inline ProbeResult probe_image_encoder(const ImageEncoderParams& encoder, const ShapesCorpus& corpus,
                                       const Split& split, ProbeTarget target,
                                       const ProbeConfig& cfg = {}) {
  auto labels = [&](const std::vector<std::size_t>& idx) {
    std::vector<int> y;
    for (std::size_t i : idx) y.push_back(probe_label(corpus.samples[i].labels, target));
    return y;
  };
  const Tensor xtr = image_representations(encoder, stack_images(corpus, split.train));
  const Tensor xte = image_representations(encoder, stack_images(corpus, split.test));
  const auto ytr = labels(split.train), yte = labels(split.test);
  return linear_probe(xtr, ytr, xte, yte, cfg);
}

}  // namespace cliplite
