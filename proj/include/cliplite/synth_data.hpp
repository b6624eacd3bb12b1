#pragma once

// Deterministic synthetic corpora.
//
// * Correlated Gaussian pairs with closed-form mutual information.
// * Captioned shapes: 16x16 RGB images of one textured shape in a 3x3 grid,
//   captioned "a {texture} {color} {shape} at {row} {col}".
// * Texture word pairs and templates for concept-subspace estimation.

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cliplite/binary_io.hpp"
#include "cliplite/encoders.hpp"
#include "cliplite/rng.hpp"
#include "cliplite/tensor.hpp"
#include "cliplite/vocab.hpp"

namespace cliplite {

// ---------------------------------------------------------------------------
// Gaussian pairs

struct GaussianPairSpec {
  std::size_t d = 1;
  double rho = 0.0;
  std::size_t n = 1000;
  std::uint64_t seed = 0;
};

struct GaussianPairs {
  Tensor y;  // [n x d]
  Tensor z;  // [n x d]
  double analytic_mi = 0.0;
};

/// I(y; z) in nats for d independent coordinates with correlation rho each.
inline double gaussian_mi(std::size_t d, double rho) {
  if (!(std::abs(rho) < 1.0)) throw std::invalid_argument("gaussian_mi: |rho| must be < 1");
  return std::max(0.0, -0.5 * static_cast<double>(d) * std::log(1.0 - rho * rho));
}

inline GaussianPairs gen_gaussian_pairs(const GaussianPairSpec& spec,
                                        std::string_view stream = "data/gaussian") {
  if (!(std::abs(spec.rho) < 1.0)) throw std::invalid_argument("gaussian pairs: |rho| must be < 1");
  if (spec.d == 0 || spec.n == 0) throw std::invalid_argument("gaussian pairs: d and n must be > 0");
  GaussianPairs out{Tensor({spec.n, spec.d}), Tensor({spec.n, spec.d}), gaussian_mi(spec.d, spec.rho)};
  Rng rng(spec.seed, stream);
  const double s = std::sqrt(1.0 - spec.rho * spec.rho);
  for (std::size_t i = 0; i < spec.n * spec.d; ++i) {
    const double y = rng.normal();
    const double e = rng.normal();
    out.y.data[i] = y;
    out.z.data[i] = spec.rho * y + s * e;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Captioned shapes

enum class ShapeKind { square = 0, disk = 1, cross = 2 };
enum class Texture { striped = 0, dotted = 1 };

inline constexpr std::size_t kGridCells = 3;
inline constexpr std::size_t kCellStride = 5;
/// Each grid cell owns a 6x6 pixel block starting at (5*row, 5*col); a 5x5
/// shape sits inside it at a jitter offset of 0 or 1 pixel per axis.
inline constexpr std::size_t kCellBlock = 6;
inline constexpr std::size_t kShapeExtent = 5;
inline constexpr double kBackground = 0.5;

struct ShapeLabels {
  int shape = 0;    // ShapeKind
  int color = 0;    // index into grammar::kColors; also the dominant RGB channel
  int texture = 0;  // Texture
  int texture_word = 0;  // 0 = primary word, 1 = synonym
  int row = 0;
  int col = 0;
  int jitter_row = 0;
  int jitter_col = 0;

  friend bool operator==(const ShapeLabels&, const ShapeLabels&) = default;
};

struct ShapeSample {
  std::vector<double> image;  // 3 x 16 x 16, values in [0, 1]
  std::string caption;
  TokenSequence tokens;
  ShapeLabels labels;
};

struct ShapesCorpusSpec {
  std::size_t n = 4096;
  std::uint64_t seed = 0;
  double synonym_rate = 0.5;  // probability of the texture synonym in a caption
  double noise = 0.03;        // uniform pixel noise amplitude
};

struct ShapesCorpus {
  std::vector<ShapeSample> samples;
  std::size_t size() const noexcept { return samples.size(); }
};

inline bool in_shape(ShapeKind s, std::size_t r, std::size_t c) {
  switch (s) {
    case ShapeKind::square: return true;
    case ShapeKind::disk: return !((r == 0 || r == 4) && (c == 0 || c == 4));
    case ShapeKind::cross: return r == 2 || c == 2;
  }
  return false;
}

/// Texture pattern in shape-local coordinates: stripes light even rows,
/// dots light a checkerboard.
inline bool texture_on(Texture t, std::size_t r, std::size_t c) {
  return t == Texture::striped ? r % 2 == 0 : (r + c) % 2 == 0;
}

/// 16x16 mask of the pixels covered by the shape.
inline std::vector<bool> shape_mask(const ShapeLabels& l) {
  std::vector<bool> mask(kImageSize * kImageSize, false);
  const std::size_t r0 = kCellStride * static_cast<std::size_t>(l.row) + static_cast<std::size_t>(l.jitter_row);
  const std::size_t c0 = kCellStride * static_cast<std::size_t>(l.col) + static_cast<std::size_t>(l.jitter_col);
  for (std::size_t r = 0; r < kShapeExtent; ++r)
    for (std::size_t c = 0; c < kShapeExtent; ++c)
      if (in_shape(static_cast<ShapeKind>(l.shape), r, c)) mask[(r0 + r) * kImageSize + c0 + c] = true;
  return mask;
}

/// 16x16 mask of the 6x6 pixel block owned by a grid cell.
inline std::vector<bool> cell_mask(int row, int col) {
  std::vector<bool> mask(kImageSize * kImageSize, false);
  const std::size_t r0 = kCellStride * static_cast<std::size_t>(row);
  const std::size_t c0 = kCellStride * static_cast<std::size_t>(col);
  for (std::size_t r = r0; r < r0 + kCellBlock; ++r)
    for (std::size_t c = c0; c < c0 + kCellBlock; ++c) mask[r * kImageSize + c] = true;
  return mask;
}

inline std::vector<double> render_shape(const ShapeLabels& l, Rng& noise_rng, double noise) {
  std::vector<double> img(kImageNumel, kBackground);
  const std::size_t plane = kImageSize * kImageSize;
  const std::size_t r0 = kCellStride * static_cast<std::size_t>(l.row) + static_cast<std::size_t>(l.jitter_row);
  const std::size_t c0 = kCellStride * static_cast<std::size_t>(l.col) + static_cast<std::size_t>(l.jitter_col);
  const auto shape = static_cast<ShapeKind>(l.shape);
  const auto texture = static_cast<Texture>(l.texture);
  for (std::size_t r = 0; r < kShapeExtent; ++r)
    for (std::size_t c = 0; c < kShapeExtent; ++c) {
      if (!in_shape(shape, r, c)) continue;
      const double level = texture_on(texture, r, c) ? 1.0 : 0.5;
      for (std::size_t ch = 0; ch < kImageChannels; ++ch) {
        const double base = static_cast<int>(ch) == l.color ? 0.9 : 0.1;
        img[ch * plane + (r0 + r) * kImageSize + c0 + c] = base * level;
      }
    }
  if (noise > 0.0) {
    for (double& v : img) v = std::clamp(v + noise_rng.uniform(-noise, noise), 0.0, 1.0);
  }
  return img;
}

inline std::string caption_for(const ShapeLabels& l) {
  std::string s = "a ";
  s += grammar::kTextureWords[static_cast<std::size_t>(l.texture)][static_cast<std::size_t>(l.texture_word)];
  s += ' ';
  s += grammar::kColors[static_cast<std::size_t>(l.color)];
  s += ' ';
  s += grammar::kShapes[static_cast<std::size_t>(l.shape)];
  s += " at ";
  s += grammar::kRows[static_cast<std::size_t>(l.row)];
  s += ' ';
  s += grammar::kCols[static_cast<std::size_t>(l.col)];
  return s;
}

/// Sample `index` of a corpus; depends only on (seed, index).
inline ShapeSample make_shape_sample(const ShapesCorpusSpec& spec, std::size_t index) {
  Rng rng = Rng(spec.seed, "data/shapes").substream(std::to_string(index));
  ShapeLabels l;
  l.shape = static_cast<int>(rng.below(3));
  l.color = static_cast<int>(rng.below(3));
  l.texture = static_cast<int>(rng.below(2));
  l.texture_word = rng.uniform() < spec.synonym_rate ? 1 : 0;
  l.row = static_cast<int>(rng.below(kGridCells));
  l.col = static_cast<int>(rng.below(kGridCells));
  l.jitter_row = static_cast<int>(rng.below(2));
  l.jitter_col = static_cast<int>(rng.below(2));
  Rng noise = rng.substream("noise");
  ShapeSample s;
  s.labels = l;
  s.image = render_shape(l, noise, spec.noise);
  s.caption = caption_for(l);
  s.tokens = Vocabulary::shapes().tokenize(s.caption);
  return s;
}

inline ShapesCorpus gen_captioned_shapes(const ShapesCorpusSpec& spec) {
  if (spec.n == 0) throw std::invalid_argument("captioned shapes: n must be > 0");
  ShapesCorpus corpus;
  corpus.samples.reserve(spec.n);
  for (std::size_t i = 0; i < spec.n; ++i) corpus.samples.push_back(make_shape_sample(spec, i));
  return corpus;
}

/// Stacks the images of the given samples into [n x 3 x 16 x 16].
inline Tensor stack_images(const ShapesCorpus& corpus, const std::vector<std::size_t>& indices) {
  Tensor t({indices.size(), kImageChannels, kImageSize, kImageSize});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto& img = corpus.samples.at(indices[i]).image;
    std::copy(img.begin(), img.end(), t.data.begin() + static_cast<std::ptrdiff_t>(i * kImageNumel));
  }
  return t;
}

inline std::vector<TokenSequence> gather_tokens(const ShapesCorpus& corpus,
                                                const std::vector<std::size_t>& indices) {
  std::vector<TokenSequence> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(corpus.samples.at(i).tokens);
  return out;
}

// ---------------------------------------------------------------------------
// Splits

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

/// Seeded shuffle, the last `test_fraction` of it held out.
inline Split train_test_split(std::size_t n, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw std::invalid_argument("split: test fraction must lie in (0, 1)");
  }
  Rng rng(seed, "data/split");
  const auto perm = rng.permutation(n);
  const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(n)));
  Split s;
  s.train.assign(perm.begin(), perm.end() - static_cast<std::ptrdiff_t>(n_test));
  s.test.assign(perm.end() - static_cast<std::ptrdiff_t>(n_test), perm.end());
  return s;
}

/// Weak distribution-shift proxy: every sample with the given (color, shape)
/// combination is held out; all others train.
inline Split unseen_combination_split(const ShapesCorpus& corpus, int color, int shape) {
  Split s;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto& l = corpus.samples[i].labels;
    (l.color == color && l.shape == shape ? s.test : s.train).push_back(i);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Attribute pairs for concept editing

inline constexpr std::string_view kSlot = "[word]";

struct AttributePairCorpus {
  std::vector<std::pair<std::string, std::string>> pairs;  // (side a word, side b word)
  std::vector<std::string> templates;                      // each holds one "[word]" slot
};

/// Texture pairs (striped-class word, dotted-class word) and sentence templates.
inline AttributePairCorpus texture_pair_corpus() {
  AttributePairCorpus c;
  c.pairs = {{"striped", "dotted"}, {"lined", "spotted"}};
  c.templates = {"a photo of a [word] shape",    "a picture of a [word] shape",
                 "a [word] shape",               "a [word] red square",
                 "a [word] green disk",          "a [word] blue cross",
                 "a [word] red cross at top left", "a [word] blue square at bottom right",
                 "a [word] green disk at middle center"};
  return c;
}

struct SentencePair {
  std::string a, b;
  TokenSequence tokens_a, tokens_b;
};

inline std::string fill_template(std::string_view tmpl, std::string_view word) {
  const auto pos = tmpl.find(kSlot);
  std::string out(tmpl.substr(0, pos));
  out += word;
  out += tmpl.substr(pos + kSlot.size());
  return out;
}

/// Cross product of pairs x templates, tokenized with `vocab`.
inline std::vector<SentencePair> contextualize(const AttributePairCorpus& corpus,
                                               const Vocabulary& vocab = Vocabulary::shapes()) {
  if (corpus.templates.empty()) throw std::invalid_argument("contextualize: no templates");
  if (corpus.pairs.empty()) throw std::invalid_argument("contextualize: no word pairs");
  for (const auto& t : corpus.templates) {
    const auto first = t.find(kSlot);
    if (first == std::string::npos || t.find(kSlot, first + 1) != std::string::npos) {
      throw std::invalid_argument("contextualize: template '" + t +
                                  "' must contain exactly one [word] slot");
    }
  }
  for (const auto& [a, b] : corpus.pairs) {
    for (const auto& w : {a, b}) {
      if (!vocab.contains(w)) throw UnknownTokenError("contextualize: word '" + w + "' outside vocabulary");
    }
  }
  std::vector<SentencePair> out;
  for (const auto& [a, b] : corpus.pairs)
    for (const auto& t : corpus.templates) {
      SentencePair p;
      p.a = fill_template(t, a);
      p.b = fill_template(t, b);
      p.tokens_a = vocab.tokenize(p.a);
      p.tokens_b = vocab.tokenize(p.b);
      out.push_back(std::move(p));
    }
  return out;
}

// ---------------------------------------------------------------------------
// Export: manifest.json + images.bin
//
// images.bin layout (little-endian): u64 n, then n * 3 * 16 * 16 float64
// pixel values, sample-major, channel-major within a sample, rows then columns.

inline void export_corpus(const ShapesCorpus& corpus, const ShapesCorpusSpec& spec,
                          const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::string payload;
  payload.reserve(8 + corpus.size() * kImageNumel * 8);
  io::put_u64(payload, corpus.size());
  for (const auto& s : corpus.samples)
    for (double v : s.image) io::put_f64(payload, v);
  io::write_file_atomic(dir / "images.bin", payload);

  nlohmann::ordered_json m;
  m["format_version"] = 1;
  m["kind"] = "captioned_shapes";
  m["n"] = corpus.size();
  m["seed"] = spec.seed;
  m["image_shape"] = {kImageChannels, kImageSize, kImageSize};
  m["payload"] = {{"file", "images.bin"},
                  {"dtype", "float64-le"},
                  {"layout", "u64 n, then n x 3 x 16 x 16 values"},
                  {"bytes", payload.size()}};
  auto& samples = m["samples"];
  samples = nlohmann::ordered_json::array();
  for (const auto& s : corpus.samples) {
    const auto& l = s.labels;
    samples.push_back({{"caption", s.caption},
                       {"shape", grammar::kShapes[static_cast<std::size_t>(l.shape)]},
                       {"color", grammar::kColors[static_cast<std::size_t>(l.color)]},
                       {"texture", l.texture == 0 ? "striped" : "dotted"},
                       {"row", l.row},
                       {"col", l.col}});
  }
  io::write_file_atomic(dir / "manifest.json", m.dump(2) + "\n");
}

/// Reads images.bin back into [n x 3 x 16 x 16].
inline Tensor load_image_payload(const std::filesystem::path& file) {
  const std::string bytes = io::read_file(file);
  const std::uint64_t n = io::get_u64(bytes, 0);
  const std::size_t expected = 8 + n * kImageNumel * 8;
  if (bytes.size() != expected) {
    throw IoError("image payload length " + std::to_string(bytes.size()) + " != expected " +
                  std::to_string(expected));
  }
  Tensor t({n, kImageChannels, kImageSize, kImageSize});
  for (std::size_t i = 0; i < t.size(); ++i) t.data[i] = io::get_f64(bytes, 8 + 8 * i);
  return t;
}

}  // namespace cliplite
