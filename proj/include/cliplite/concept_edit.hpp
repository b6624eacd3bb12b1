#pragma once

// Concept subspace estimation from paired sentences and hard removal.
//
// Each sentence pair differs only in the attribute word. Both members are
// shifted by the pair mean, the pooled shifted vectors are PCA'd, and the top
// principal directions span the concept. Removing a representation's
// projection onto that span leaves it orthogonal to the concept.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cliplite/discriminator.hpp"
#include "cliplite/model.hpp"
#include "cliplite/rng.hpp"
#include "cliplite/synth_data.hpp"

namespace cliplite {

struct RepresentationSets {
  Tensor a;  // [n x d], side a of each pair
  Tensor b;  // [n x d], side b
  std::size_t size() const { return a.rank() == 2 ? a.shape[0] : 0; }
};

/// Encodes and projects both sides of every sentence pair.
inline RepresentationSets embed_pairs(const ClipModel& model, std::span<const SentencePair> pairs,
                                      bool normalize = true) {
  if (pairs.empty()) throw std::invalid_argument("embed_pairs: no sentence pairs");
  std::vector<TokenSequence> ta, tb;
  for (const auto& p : pairs) {
    ta.push_back(p.tokens_a);
    tb.push_back(p.tokens_b);
  }
  RepresentationSets s{embed_texts(model, ta), embed_texts(model, tb)};
  if (normalize) {
    s.a = l2_normalize_rows(s.a);
    s.b = l2_normalize_rows(s.b);
  }
  return s;
}

struct SubspaceBasis {
  std::size_t dim = 0;
  std::vector<std::vector<double>> vectors;  // orthonormal, each of length dim
  std::vector<double> eigenvalues;
  std::vector<double> explained;  // eigenvalue / total variance

  std::size_t rank() const noexcept { return vectors.size(); }
};

struct PowerIterationConfig {
  double tol = 1e-10;
  std::size_t max_iters = 10000;
};

namespace detail {

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline void matvec(const std::vector<double>& m, std::size_t d, std::span<const double> v,
                   std::vector<double>& out) {
  out.assign(d, 0.0);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i] += m[i * d + j] * v[j];
}

/// Removes components along `basis` twice (classical Gram-Schmidt, repeated
/// for stability) and normalizes; returns the norm before normalizing.
inline double orthonormalize(std::vector<double>& v, const std::vector<std::vector<double>>& basis) {
  for (int pass = 0; pass < 2; ++pass)
    for (const auto& u : basis) {
      const double c = dot(v, u);
      for (std::size_t i = 0; i < v.size(); ++i) v[i] -= c * u[i];
    }
  const double n = std::sqrt(dot(v, v));
  if (n > 0.0)
    for (double& x : v) x /= n;
  return n;
}

}  // namespace detail

/// Top-k eigenpairs of a symmetric positive semi-definite matrix by power
/// iteration with deflation. Eigenvalues at or below `rank_floor` times the
/// trace count as zero.
inline SubspaceBasis top_eigenpairs(const std::vector<double>& matrix, std::size_t d, std::size_t k,
                                    const PowerIterationConfig& cfg = {}, double rank_floor = 1e-12) {
  if (matrix.size() != d * d) throw ShapeError("top_eigenpairs: matrix is not d x d");
  if (k > d) {
    throw std::invalid_argument("top_eigenpairs: k=" + std::to_string(k) + " exceeds dimension " +
                                std::to_string(d));
  }
  double trace = 0.0;
  for (std::size_t i = 0; i < d; ++i) trace += matrix[i * d + i];
  if (!(trace > 0.0)) throw std::invalid_argument("estimate_subspace: covariance has rank 0");
  SubspaceBasis basis;
  basis.dim = d;
  std::vector<double> deflated = matrix, next;
  Rng rng(0, "concept/power_iteration");
  for (std::size_t j = 0; j < k; ++j) {
    std::vector<double> v(d);
    for (double& x : v) x = rng.normal();
    detail::orthonormalize(v, basis.vectors);
    double lambda = 0.0;
    bool converged = false;
    for (std::size_t it = 0; it < cfg.max_iters; ++it) {
      detail::matvec(deflated, d, v, next);
      lambda = detail::dot(v, next);
      double residual = 0.0;
      for (std::size_t i = 0; i < d; ++i) residual += (next[i] - lambda * v[i]) * (next[i] - lambda * v[i]);
      residual = std::sqrt(residual);
      if (lambda <= rank_floor * trace) break;
      if (residual <= cfg.tol * trace) {
        converged = true;
        break;
      }
      v = next;
      detail::orthonormalize(v, basis.vectors);
    }
    if (lambda <= rank_floor * trace) {
      throw std::invalid_argument("estimate_subspace: k=" + std::to_string(k) +
                                  " exceeds numerical rank " + std::to_string(j) +
                                  (j == 0 ? " (rank 0)" : ""));
    }
    if (!converged) {
      throw NumericError("power iteration did not converge within " + std::to_string(cfg.max_iters) +
                         " iterations for eigenpair " + std::to_string(j));
    }
    // one Rayleigh refinement on the original matrix
    detail::matvec(matrix, d, v, next);
    lambda = detail::dot(v, next);
    for (std::size_t r = 0; r < d; ++r)
      for (std::size_t c = 0; c < d; ++c) deflated[r * d + c] -= lambda * v[r] * v[c];
    basis.vectors.push_back(v);
    basis.eigenvalues.push_back(lambda);
    basis.explained.push_back(lambda / trace);
  }
  return basis;
}

/// Pair-mean-shifted second-moment matrix of the pooled representations.
inline std::vector<double> shifted_covariance(const RepresentationSets& sets) {
  if (sets.a.rank() != 2 || sets.a.shape != sets.b.shape) {
    throw ShapeError("estimate_subspace: representation sets must be equal-shape 2-D tensors");
  }
  const std::size_t n = sets.a.shape[0], d = sets.a.shape[1];
  std::vector<double> cov(d * d, 0.0), x(d);
  for (std::size_t i = 0; i < n; ++i) {
    for (const Tensor* side : {&sets.a, &sets.b}) {
      for (std::size_t j = 0; j < d; ++j) {
        const double mean = 0.5 * (sets.a.data[i * d + j] + sets.b.data[i * d + j]);
        x[j] = side->data[i * d + j] - mean;
      }
      for (std::size_t r = 0; r < d; ++r)
        for (std::size_t c = 0; c < d; ++c) cov[r * d + c] += x[r] * x[c];
    }
  }
  for (double& v : cov) v /= static_cast<double>(2 * n);
  return cov;
}

inline SubspaceBasis estimate_subspace(const RepresentationSets& sets, std::size_t k = 1,
                                       const PowerIterationConfig& cfg = {}) {
  if (sets.size() < 2) throw std::invalid_argument("estimate_subspace: need at least 2 pairs");
  const std::size_t d = sets.a.shape[1];
  if (k > d) {
    throw std::invalid_argument("estimate_subspace: k=" + std::to_string(k) + " exceeds width " +
                                std::to_string(d));
  }
  return top_eigenpairs(shifted_covariance(sets), d, k, cfg);
}

/// h minus its projection onto span(V).
inline std::vector<double> remove_subspace(std::span<const double> h, const SubspaceBasis& V) {
  std::vector<double> out(h.begin(), h.end());
  if (V.rank() > 0 && h.size() != V.dim) {
    throw ShapeError("remove_subspace: representation width " + std::to_string(h.size()) +
                     " vs basis width " + std::to_string(V.dim));
  }
  for (const auto& v : V.vectors) {
    const double c = detail::dot(h, v);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= c * v[i];
  }
  return out;
}

/// Row-wise remove_subspace over a [n x d] tensor.
inline Tensor remove_subspace_rows(const Tensor& h, const SubspaceBasis& V) {
  if (h.rank() != 2) throw ShapeError("remove_subspace_rows: expected 2-D input");
  const std::size_t n = h.shape[0], d = h.shape[1];
  Tensor out = h;
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = remove_subspace(std::span<const double>(h.data.data() + i * d, d), V);
    std::copy(row.begin(), row.end(), out.data.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Equalization report

struct Prompt {
  std::string text;
  std::string side;  // "a", "b" or "neutral"
};

struct EqualizationRow {
  std::string prompt;
  std::string side;
  double before_a = 0.0, before_b = 0.0;
  double after_a = 0.0, after_b = 0.0;          // raw <h_edit, t> with h normalized before editing
  double renorm_after_a = 0.0, renorm_after_b = 0.0;

  double gap_before() const { return std::abs(before_a - before_b); }
  double gap_after() const { return std::abs(after_a - after_b); }
  double delta_a() const { return after_a - before_a; }
  double delta_b() const { return after_b - before_b; }
};

namespace detail {

/// Mean of the `top_n` largest values.
inline double top_mean(std::vector<double> v, std::size_t top_n) {
  std::partial_sort(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(top_n), v.end(),
                    std::greater<>());
  double s = 0.0;
  for (std::size_t i = 0; i < top_n; ++i) s += v[i];
  return s / static_cast<double>(top_n);
}

}  // namespace detail

/// For every prompt and image bucket (attribute 0 = bucket a, 1 = bucket b):
/// mean alignment of the top_n best-aligned images, before and after removing
/// span(V) from the L2-normalized image embeddings.
inline std::vector<EqualizationRow> equalization_report(const Tensor& image_embeddings,
                                                        std::span<const int> image_attribute,
                                                        const Tensor& prompt_embeddings,
                                                        std::span<const Prompt> prompts,
                                                        const SubspaceBasis& V, std::size_t top_n) {
  if (image_embeddings.rank() != 2 || image_embeddings.shape[0] != image_attribute.size()) {
    throw ShapeError("equalization_report: one attribute label per image required");
  }
  if (prompt_embeddings.rank() != 2 || prompt_embeddings.shape[0] != prompts.size()) {
    throw ShapeError("equalization_report: one embedding per prompt required");
  }
  std::size_t count[2] = {0, 0};
  for (int a : image_attribute) {
    if (a != 0 && a != 1) throw std::invalid_argument("equalization_report: attribute must be 0 or 1");
    ++count[a];
  }
  if (top_n == 0 || count[0] < top_n || count[1] < top_n) {
    throw std::invalid_argument("equalization_report: bucket smaller than top_n=" + std::to_string(top_n));
  }
  const Tensor h = l2_normalize_rows(image_embeddings);
  const Tensor edited = remove_subspace_rows(h, V);
  const Tensor t = l2_normalize_rows(prompt_embeddings);
  const std::size_t n = h.shape[0], d = h.shape[1];
  std::vector<EqualizationRow> rows;
  for (std::size_t p = 0; p < prompts.size(); ++p) {
    const std::span<const double> tp(t.data.data() + p * d, d);
    std::vector<double> before[2], after[2], renorm[2];
    for (std::size_t i = 0; i < n; ++i) {
      const int a = image_attribute[i];
      const std::span<const double> hi(h.data.data() + i * d, d);
      const std::span<const double> ei(edited.data.data() + i * d, d);
      before[a].push_back(detail::dot(hi, tp));
      const double raw = detail::dot(ei, tp);
      after[a].push_back(raw);
      const double norm = std::sqrt(detail::dot(ei, ei));
      renorm[a].push_back(norm > 0.0 ? raw / norm : 0.0);
    }
    EqualizationRow r;
    r.prompt = prompts[p].text;
    r.side = prompts[p].side;
    r.before_a = detail::top_mean(before[0], top_n);
    r.before_b = detail::top_mean(before[1], top_n);
    r.after_a = detail::top_mean(after[0], top_n);
    r.after_b = detail::top_mean(after[1], top_n);
    r.renorm_after_a = detail::top_mean(renorm[0], top_n);
    r.renorm_after_b = detail::top_mean(renorm[1], top_n);
    rows.push_back(r);
  }
  return rows;
}

/// Prompts for the texture attribute: each side's words in a few templates,
/// plus attribute-free prompts.
inline std::vector<Prompt> texture_prompts() {
  return {{"a photo of a striped shape", "a"}, {"a photo of a dotted shape", "b"},
          {"a lined red square", "a"},         {"a spotted red square", "b"},
          {"a striped blue disk", "a"},        {"a dotted blue disk", "b"},
          {"a red square", "neutral"},         {"a green disk", "neutral"},
          {"a blue cross", "neutral"}};
}

}  // namespace cliplite
