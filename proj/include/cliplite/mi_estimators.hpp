#pragma once

// Differentiable lower bounds on mutual information.
//
//   jsd:     E_P[-softplus(-T)] - E_Q[softplus(T)]          (<= 0)
//   infonce: ln n + mean log-softmax of the positive entry,
//            averaged over the row and column directions     (<= ln n)
//   dv:      E_P[T] - log E_Q[e^T]                           (unbounded above)
//
// P is the joint (positive pairs), Q the product of marginals (negative pairs).

#include <cmath>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "cliplite/autodiff.hpp"

namespace cliplite {

enum class BoundKind { jsd, infonce, dv };

inline std::string_view bound_name(BoundKind k) {
  switch (k) {
    case BoundKind::jsd: return "jsd";
    case BoundKind::infonce: return "infonce";
    case BoundKind::dv: return "dv";
  }
  return "?";
}

inline BoundKind parse_bound_kind(std::string_view s) {
  if (s == "jsd") return BoundKind::jsd;
  if (s == "infonce") return BoundKind::infonce;
  if (s == "dv") return BoundKind::dv;
  throw std::invalid_argument("unknown estimator '" + std::string(s) + "'");
}

/// Scores of positive (joint) and negative (marginal-product) pairs.
struct ScoreSet {
  Var pos;  // [n]
  Var neg;  // [k]
};

struct BoundEstimate {
  BoundKind kind = BoundKind::jsd;
  double value = 0.0;
};

namespace detail {

inline void require_nonempty_scores(const ScoreSet& s, std::string_view op) {
  if (s.pos.size() == 0) throw std::invalid_argument(std::string(op) + ": no positive scores");
  if (s.neg.size() == 0) throw std::invalid_argument(std::string(op) + ": no negative scores");
}

}  // namespace detail

inline Var jsd_bound(const ScoreSet& s) {
  detail::require_nonempty_scores(s, "jsd_bound");
  return negate(mean(softplus(negate(s.pos)))) - mean(softplus(s.neg));
}

/// Symmetric InfoNCE over a square score matrix whose diagonal holds the
/// positive pairs. `inv_temperature` is a scalar multiplier on the scores.
inline Var infonce_bound(const Var& scores, const Var& inv_temperature) {
  detail::require_rank(scores, 2, "infonce_bound");
  const std::size_t n = scores.shape()[0];
  if (scores.shape()[1] != n) {
    throw ShapeError("infonce_bound: score matrix must be square, got " +
                     shape_str(scores.shape()));
  }
  if (inv_temperature.size() != 1) throw ShapeError("infonce_bound: temperature must be scalar");
  if (!(inv_temperature.item() > 0.0)) {
    throw std::invalid_argument("infonce_bound: temperature must be positive");
  }
  Var logits = scores * inv_temperature;
  Var diag = diagonal(logits);
  Var row_term = mean(diag - log_sum_exp(logits, {1}));
  Var col_term = mean(diag - log_sum_exp(logits, {0}));
  Var ln_n = scores.tape().scalar(std::log(static_cast<double>(n)));
  return ln_n + scale(row_term + col_term, 0.5);
}

inline Var infonce_bound(const Var& scores, double temperature) {
  if (!(temperature > 0.0)) throw std::invalid_argument("infonce_bound: temperature must be positive");
  return infonce_bound(scores, scores.tape().scalar(1.0 / temperature));
}

/// DV with the empirical log E_Q[e^T] computed as log_sum_exp(neg) - ln k.
inline Var dv_bound(const ScoreSet& s) {
  detail::require_nonempty_scores(s, "dv_bound");
  const double ln_k = std::log(static_cast<double>(s.neg.size()));
  return mean(s.pos) - log_sum_exp(s.neg) + s.pos.tape().scalar(ln_k);
}

// ---------------------------------------------------------------------------
// Value-only conveniences over plain score arrays.

inline BoundEstimate jsd_bound(std::span<const double> pos, std::span<const double> neg) {
  Tape tape(Tape::Mode::inference);
  ScoreSet s{tape.constant({pos.size()}, {pos.begin(), pos.end()}),
             tape.constant({neg.size()}, {neg.begin(), neg.end()})};
  return {BoundKind::jsd, jsd_bound(s).item()};
}

inline BoundEstimate dv_bound(std::span<const double> pos, std::span<const double> neg) {
  Tape tape(Tape::Mode::inference);
  ScoreSet s{tape.constant({pos.size()}, {pos.begin(), pos.end()}),
             tape.constant({neg.size()}, {neg.begin(), neg.end()})};
  return {BoundKind::dv, dv_bound(s).item()};
}

inline BoundEstimate infonce_bound(const Tensor& scores, double temperature = 1.0) {
  Tape tape(Tape::Mode::inference);
  return {BoundKind::infonce, infonce_bound(tape.constant(scores), temperature).item()};
}

// ---------------------------------------------------------------------------
// Turning a trained critic's held-out scores into an MI estimate.

/// Held-out critic output. jsd/dv read pos/neg; infonce reads the square blocks
/// (one per evaluation batch) and averages the per-block bound.
struct CriticScores {
  std::vector<double> pos;
  std::vector<double> neg;
  std::vector<Tensor> blocks;
  double temperature = 1.0;
};

struct MiEstimate {
  BoundKind kind = BoundKind::jsd;
  double value = 0.0;
  /// "nats" for dv/infonce; "jsd-scale" for jsd, which is only monotonically
  /// related to MI and is never reported in nats.
  std::string unit;
};

/// Shift that maps the JSD bound from [-2 ln 2, 0] onto [0, 2 ln 2].
inline constexpr double kJsdShift = 2.0 * std::numbers::ln2;

inline MiEstimate mi_from_trained_critic(BoundKind kind, const CriticScores& scores) {
  switch (kind) {
    case BoundKind::jsd:
    case BoundKind::dv: {
      if (scores.pos.empty() || scores.neg.empty() || !scores.blocks.empty()) {
        throw std::invalid_argument(std::string(bound_name(kind)) +
                                    " estimate needs pos/neg score sets, not score matrices");
      }
      if (kind == BoundKind::dv) return {kind, dv_bound(scores.pos, scores.neg).value, "nats"};
      return {kind, jsd_bound(scores.pos, scores.neg).value + kJsdShift, "jsd-scale"};
    }
    case BoundKind::infonce: {
      if (scores.blocks.empty() || !scores.pos.empty() || !scores.neg.empty()) {
        throw std::invalid_argument("infonce estimate needs square score blocks only");
      }
      double total = 0.0;
      for (const auto& b : scores.blocks) total += infonce_bound(b, scores.temperature).value;
      return {kind, total / static_cast<double>(scores.blocks.size()), "nats"};
    }
  }
  throw std::logic_error("mi_from_trained_critic: unknown kind");
}

}  // namespace cliplite
