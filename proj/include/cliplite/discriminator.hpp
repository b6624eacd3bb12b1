#pragma once

// Mutual-information critic: one projection head per modality, scored by dot
// product in the shared space.
//
//   project(r) = W2 relu(W1 r + b1) + b2  +  Ws r + bs
//   T(y, z)    = <project_img(y), project_txt(z)>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cliplite/autodiff.hpp"
#include "cliplite/encoders.hpp"

namespace cliplite {

struct ProjectionParams {
  Tensor w1, b1, w2, b2;  // main path
  Tensor ws, bs;          // linear shortcut

  std::size_t in_dim() const { return w1.shape.at(0); }
  std::size_t out_dim() const { return b2.size(); }

  std::vector<NamedParam> parameters(const std::string& prefix) {
    return {{prefix + "/w1", &w1, true}, {prefix + "/b1", &b1, false},
            {prefix + "/w2", &w2, true}, {prefix + "/b2", &b2, false},
            {prefix + "/ws", &ws, true}, {prefix + "/bs", &bs, false}};
  }

  void validate() const {
    if (w1.rank() != 2) throw ShapeError("projection/w1 must be 2-D");
    const std::size_t d_in = w1.shape[0], d = w1.shape[1];
    detail::require_shape(b1, {d}, "projection/b1");
    detail::require_shape(w2, {d, d}, "projection/w2");
    detail::require_shape(b2, {d}, "projection/b2");
    detail::require_shape(ws, {d_in, d}, "projection/ws");
    detail::require_shape(bs, {d}, "projection/bs");
    for (const Tensor* t : {&w1, &b1, &w2, &b2, &ws, &bs}) detail::require_finite(*t, "projection");
  }
};

inline ProjectionParams init_projection(std::uint64_t seed, const std::string& stream,
                                        std::size_t in_dim, std::size_t out_dim = 32) {
  ProjectionParams p;
  p.w1 = init_tensor({in_dim, out_dim}, InitScheme::kaiming_uniform, in_dim, out_dim, seed,
                     stream + "/w1");
  p.b1 = Tensor({out_dim});
  p.w2 = init_tensor({out_dim, out_dim}, InitScheme::xavier_uniform, out_dim, out_dim, seed,
                     stream + "/w2");
  p.b2 = Tensor({out_dim});
  p.ws = init_tensor({in_dim, out_dim}, InitScheme::xavier_uniform, in_dim, out_dim, seed,
                     stream + "/ws");
  p.bs = Tensor({out_dim});
  return p;
}

template <detail::ParamsOf<ProjectionParams> P>
Var project(Tape& tape, P& p, const Var& rep, const std::string& label = "proj") {
  detail::require_rank(rep, 2, "project");
  if (rep.shape()[1] != p.in_dim()) {
    throw ShapeError("project: input width " + std::to_string(rep.shape()[1]) + " vs head " +
                     std::to_string(p.in_dim()));
  }
  Var hidden = relu(linear(rep, tape.param(p.w1, label + "/w1"), tape.param(p.b1, label + "/b1")));
  Var main = linear(hidden, tape.param(p.w2, label + "/w2"), tape.param(p.b2, label + "/b2"));
  Var shortcut = linear(rep, tape.param(p.ws, label + "/ws"), tape.param(p.bs, label + "/bs"));
  return main + shortcut;
}

enum class ScoreMode { paired, all_pairs };

/// paired: [n] scores T(y_i, z_i). all_pairs: [n x m] matrix T(y_i, z_j).
inline Var score_pairs(const Var& z_img, const Var& z_txt, ScoreMode mode) {
  detail::require_rank(z_img, 2, "score_pairs");
  detail::require_rank(z_txt, 2, "score_pairs");
  if (z_img.shape()[1] != z_txt.shape()[1]) {
    throw ShapeError("score_pairs: width mismatch " + shape_str(z_img.shape()) + " vs " +
                     shape_str(z_txt.shape()));
  }
  if (mode == ScoreMode::paired) {
    if (z_img.shape()[0] != z_txt.shape()[0]) {
      throw ShapeError("score_pairs: paired mode needs equal row counts");
    }
    return rowdot(z_img, z_txt);
  }
  return matmul_nt(z_img, z_txt);
}

/// Cosine of the angle between two vectors.
inline double cosine_align(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("cosine_align: dimension mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw std::invalid_argument("cosine_align: zero-norm vector");
  const double c = dot / (std::sqrt(na) * std::sqrt(nb));
  return std::clamp(c, -1.0, 1.0);
}

/// Rows of a [n x d] tensor scaled to unit L2 norm.
inline Tensor l2_normalize_rows(const Tensor& x) {
  if (x.rank() != 2) throw ShapeError("l2_normalize_rows: expected 2-D input");
  Tensor out = x;
  const std::size_t n = x.shape[0], d = x.shape[1];
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += x.data[i * d + j] * x.data[i * d + j];
    if (s == 0.0) throw std::invalid_argument("l2_normalize_rows: zero-norm row");
    const double inv = 1.0 / std::sqrt(s);
    for (std::size_t j = 0; j < d; ++j) out.data[i * d + j] *= inv;
  }
  return out;
}

/// Cosine alignment matrix between rows of a [q x d] and b [g x d].
inline Tensor cosine_matrix(const Tensor& a, const Tensor& b) {
  const Tensor an = l2_normalize_rows(a), bn = l2_normalize_rows(b);
  if (an.shape[1] != bn.shape[1]) throw ShapeError("cosine_matrix: width mismatch");
  const std::size_t q = an.shape[0], g = bn.shape[0], d = an.shape[1];
  Tensor out({q, g});
  for (std::size_t i = 0; i < q; ++i)
    for (std::size_t j = 0; j < g; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) s += an.data[i * d + k] * bn.data[j * d + k];
      out.data[i * g + j] = s;
    }
  return out;
}

}  // namespace cliplite
