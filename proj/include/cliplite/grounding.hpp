#pragma once

// Grad-CAM saliency of the image-text alignment score.
//
// The score is the unnormalized dot product of the projected image and text
// embeddings. Its gradient with respect to the last conv activations
// [16 x 8 x 8] is averaged over space to weight each channel; the weighted
// channel sum is clipped at zero and upsampled to the 16x16 image.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cliplite/autodiff.hpp"
#include "cliplite/binary_io.hpp"
#include "cliplite/model.hpp"
#include "cliplite/synth_data.hpp"

namespace cliplite {

struct SaliencyMap {
  Tensor grid;       // [8 x 8], >= 0
  Tensor pre_relu;   // [8 x 8], weighted channel sum before clipping
  Tensor upsampled;  // [16 x 16]
  std::string phrase;
  std::size_t image_id = 0;
  bool zero_gradient = false;  // alignment gradient vanished everywhere
};

enum class Upsample { nearest, bilinear };

inline Tensor upsample(const Tensor& grid, Upsample mode = Upsample::nearest) {
  if (grid.rank() != 2) throw ShapeError("upsample: expected a 2-D grid");
  const std::size_t g = grid.shape[0], w = grid.shape[1];
  if (kImageSize % g != 0 || kImageSize % w != 0) throw ShapeError("upsample: grid does not tile the image");
  Tensor out({kImageSize, kImageSize});
  const std::size_t fy = kImageSize / g, fx = kImageSize / w;
  for (std::size_t r = 0; r < kImageSize; ++r)
    for (std::size_t c = 0; c < kImageSize; ++c) {
      if (mode == Upsample::nearest) {
        out.data[r * kImageSize + c] = grid.data[(r / fy) * w + c / fx];
        continue;
      }
      // align-corners=false sampling, clamped at the border
      const double y = std::clamp((static_cast<double>(r) + 0.5) / static_cast<double>(fy) - 0.5, 0.0,
                                  static_cast<double>(g - 1));
      const double x = std::clamp((static_cast<double>(c) + 0.5) / static_cast<double>(fx) - 0.5, 0.0,
                                  static_cast<double>(w - 1));
      const auto y0 = static_cast<std::size_t>(y), x0 = static_cast<std::size_t>(x);
      const std::size_t y1 = std::min(y0 + 1, g - 1), x1 = std::min(x0 + 1, w - 1);
      const double ty = y - static_cast<double>(y0), tx = x - static_cast<double>(x0);
      out.data[r * kImageSize + c] =
          (1 - ty) * ((1 - tx) * grid.data[y0 * w + x0] + tx * grid.data[y0 * w + x1]) +
          ty * ((1 - tx) * grid.data[y1 * w + x0] + tx * grid.data[y1 * w + x1]);
    }
  return out;
}

/// Channel weights from spatially averaged gradients, weighted sum of
/// activations, relu. `act` and `grad` are one sample's [C x H x W] blocks.
inline SaliencyMap cam_from_gradients(std::span<const double> act, std::span<const double> grad,
                                      std::size_t channels, std::size_t h, std::size_t w) {
  SaliencyMap m;
  m.grid = Tensor({h, w});
  m.pre_relu = Tensor({h, w});
  const std::size_t plane = h * w;
  bool any = false;
  for (double g : grad) any = any || g != 0.0;
  m.zero_gradient = !any;
  for (std::size_t ch = 0; ch < channels; ++ch) {
    double weight = 0.0;
    for (std::size_t i = 0; i < plane; ++i) weight += grad[ch * plane + i];
    weight /= static_cast<double>(plane);
    for (std::size_t i = 0; i < plane; ++i) m.pre_relu.data[i] += weight * act[ch * plane + i];
  }
  for (std::size_t i = 0; i < plane; ++i) m.grid.data[i] = std::max(0.0, m.pre_relu.data[i]);
  m.upsampled = upsample(m.grid);
  return m;
}

/// Saliency maps of each image in `images` [n x 3 x 16 x 16] for its own
/// phrase. Per-image scores are summed into one scalar; samples do not
/// interact, so each image's activation gradient is that of its own score.
inline std::vector<SaliencyMap> grad_cam_batch(const ClipModel& model, const Tensor& images,
                                               std::span<const TokenSequence> phrases,
                                               double text_scale = 1.0) {
  const std::size_t n = images.shape.at(0);
  if (phrases.size() != n) throw ShapeError("grad_cam: one phrase per image required");
  if (n == 0) throw std::invalid_argument("grad_cam: no images");
  Tape tape(Tape::Mode::frozen);
  ImageEncoding enc;
  Var z_img = project_images(tape, model, images, &enc);
  Var z_txt = project_texts(tape, model, phrases);
  if (text_scale != 1.0) z_txt = scale(z_txt, text_scale);
  Var score = sum(rowdot(z_img, z_txt));
  const Var capture[] = {enc.activations};
  const Tensor act = enc.activations.to_tensor();
  const Tensor grad = tape.backward(score, capture).front();
  const std::size_t block = kActivationChannels * kActivationSize * kActivationSize;
  const Vocabulary& vocab = Vocabulary::shapes();
  std::vector<SaliencyMap> maps;
  maps.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    maps.push_back(cam_from_gradients(std::span<const double>(act.data.data() + i * block, block),
                                      std::span<const double>(grad.data.data() + i * block, block),
                                      kActivationChannels, kActivationSize, kActivationSize));
    maps.back().phrase = vocab.detokenize(phrases[i]);
    maps.back().image_id = i;
  }
  return maps;
}

inline SaliencyMap grad_cam(const ClipModel& model, const Tensor& image, const TokenSequence& phrase) {
  Tensor batch = image;
  if (batch.rank() == 3) batch.shape.insert(batch.shape.begin(), 1);
  if (batch.shape.at(0) != 1) throw ShapeError("grad_cam: expected a single image");
  return grad_cam_batch(model, batch, std::span<const TokenSequence>(&phrase, 1)).front();
}

// ---------------------------------------------------------------------------
// Boxes

struct Box {
  std::size_t row0 = 0, col0 = 0, row1 = 0, col1 = 0;  // inclusive bounds

  std::size_t area() const { return (row1 - row0 + 1) * (col1 - col0 + 1); }
  bool contains(std::size_t r, std::size_t c) const {
    return r >= row0 && r <= row1 && c >= col0 && c <= col1;
  }
  friend bool operator==(const Box&, const Box&) = default;
};

/// Row-major argmax; ties go to the lowest index.
inline std::size_t argmax_index(const Tensor& m) {
  return static_cast<std::size_t>(std::max_element(m.data.begin(), m.data.end()) - m.data.begin());
}

inline double box_mass(const Tensor& m, const Box& b) {
  const std::size_t w = m.shape[1];
  double s = 0.0;
  for (std::size_t r = b.row0; r <= b.row1; ++r)
    for (std::size_t c = b.col0; c <= b.col1; ++c) s += m.data[r * w + c];
  return s;
}

/// Greedy shrink from the full frame. Each round tries dropping the top row,
/// bottom row, left column and right column; it takes the candidate keeping
/// the most mass (first in that order on ties) provided the box still holds
/// at least `mass_fraction` of the total and still contains the argmax.
/// Stops when no edge can be dropped.
inline Box box_from_saliency(const Tensor& map, double mass_fraction) {
  if (map.rank() != 2) throw ShapeError("box_from_saliency: expected a 2-D map");
  if (!(mass_fraction > 0.0 && mass_fraction <= 1.0)) {
    throw std::invalid_argument("box_from_saliency: mass_fraction must lie in (0, 1]");
  }
  const std::size_t h = map.shape[0], w = map.shape[1];
  double total = 0.0;
  for (double v : map.data) {
    if (v < 0.0) throw std::invalid_argument("box_from_saliency: negative saliency");
    total += v;
  }
  if (!(total > 0.0)) throw std::invalid_argument("box_from_saliency: all-zero saliency map");
  const std::size_t peak = argmax_index(map);
  const std::size_t pr = peak / w, pc = peak % w;
  const double need = mass_fraction * total * (1.0 - 1e-12);
  Box box{0, 0, h - 1, w - 1};
  for (;;) {
    Box best = box;
    double best_mass = -1.0;
    const Box candidates[4] = {{box.row0 + 1, box.col0, box.row1, box.col1},
                               {box.row0, box.col0, box.row1 - 1, box.col1},
                               {box.row0, box.col0 + 1, box.row1, box.col1},
                               {box.row0, box.col0, box.row1, box.col1 - 1}};
    const bool allowed[4] = {box.row0 < pr, box.row1 > pr, box.col0 < pc, box.col1 > pc};
    for (int i = 0; i < 4; ++i) {
      if (!allowed[i]) continue;
      const double m = box_mass(map, candidates[i]);
      if (m >= need && m > best_mass) {
        best = candidates[i];
        best_mass = m;
      }
    }
    if (best_mass < 0.0) return box;
    box = best;
  }
}

// ---------------------------------------------------------------------------
// Pointing game

struct PointingReport {
  double accuracy = 0.0;
  double chance = 0.0;  // cell block area / image area
  std::size_t n_images = 0;
  std::size_t zero_gradient_maps = 0;
  bool all_non_negative = true;
};

inline constexpr double kPointingChance =
    static_cast<double>(kCellBlock * kCellBlock) / static_cast<double>(kImageSize * kImageSize);

/// Upsampled-map argmax pixel of a raw 8x8 grid (nearest neighbour keeps the
/// grid argmax; its top-left pixel is reported).
inline std::pair<std::size_t, std::size_t> saliency_peak(const Tensor& grid) {
  const std::size_t idx = argmax_index(grid);
  const std::size_t f = kImageSize / grid.shape[1];
  return {(idx / grid.shape[1]) * f, (idx % grid.shape[1]) * f};
}

inline bool peak_in_cell(const Tensor& grid, int row, int col) {
  const auto [r, c] = saliency_peak(grid);
  const auto mask = cell_mask(row, col);
  return mask[r * kImageSize + c];
}

/// Each image is queried with its own caption; a hit is a saliency peak inside
/// the 6x6 block of the labeled cell.
inline PointingReport pointing_accuracy(const ClipModel& model, const ShapesCorpus& corpus,
                                        std::span<const std::size_t> indices) {
  if (indices.empty()) throw std::invalid_argument("pointing_accuracy: empty test set");
  PointingReport rep;
  rep.chance = kPointingChance;
  rep.n_images = indices.size();
  std::size_t hits = 0;
  for (std::size_t start = 0; start < indices.size(); start += kInferenceChunk) {
    const std::size_t len = std::min(kInferenceChunk, indices.size() - start);
    const std::vector<std::size_t> chunk(indices.begin() + static_cast<std::ptrdiff_t>(start),
                                         indices.begin() + static_cast<std::ptrdiff_t>(start + len));
    const auto phrases = gather_tokens(corpus, chunk);
    const auto maps = grad_cam_batch(model, stack_images(corpus, chunk), phrases);
    for (std::size_t i = 0; i < len; ++i) {
      const auto& l = corpus.samples[chunk[i]].labels;
      for (double v : maps[i].grid.data) rep.all_non_negative = rep.all_non_negative && v >= 0.0;
      if (maps[i].zero_gradient) ++rep.zero_gradient_maps;
      if (peak_in_cell(maps[i].grid, l.row, l.col)) ++hits;
    }
  }
  rep.accuracy = static_cast<double>(hits) / static_cast<double>(indices.size());
  return rep;
}

// ---------------------------------------------------------------------------
// Dumps

/// Plain PGM (P2), values scaled to 0..255 by the map maximum.
inline std::string to_pgm(const Tensor& map) {
  if (map.rank() != 2) throw ShapeError("to_pgm: expected a 2-D map");
  const std::size_t h = map.shape[0], w = map.shape[1];
  const double mx = *std::max_element(map.data.begin(), map.data.end());
  std::ostringstream os;
  os << "P2\n" << w << ' ' << h << "\n255\n";
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      const double v = mx > 0.0 ? map.data[r * w + c] / mx : 0.0;
      os << (c ? " " : "") << static_cast<int>(std::lround(255.0 * std::clamp(v, 0.0, 1.0)));
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace cliplite
