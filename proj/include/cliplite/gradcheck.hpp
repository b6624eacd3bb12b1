#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cliplite/autodiff.hpp"

namespace cliplite {

/// Two evaluations of a supposedly deterministic forward pass disagreed.
class NonDeterministicError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GradCheckEntry {
  std::string name;
  std::size_t elements = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t worst_index = 0;
  bool pass = true;
};

struct GradCheckReport {
  std::string label;
  double epsilon = 0.0;
  double tolerance = 0.0;
  std::vector<GradCheckEntry> entries;

  bool pass() const {
    return std::all_of(entries.begin(), entries.end(), [](const auto& e) { return e.pass; });
  }
  double max_rel_error() const {
    double m = 0.0;
    for (const auto& e : entries) m = std::max(m, e.max_rel_error);
    return m;
  }
  std::vector<std::string> failing() const {
    std::vector<std::string> out;
    for (const auto& e : entries)
      if (!e.pass) out.push_back(e.name);
    return out;
  }
};

/// Builds the loss on the given tape; must bind every checked parameter via tape.param().
using ForwardFn = std::function<Var(Tape&)>;

/// Relative error used throughout: |a - b| / max(|a|, |b|, floor). The floor
/// keeps near-zero gradients from turning round-off into huge ratios.
inline double relative_error(double a, double b, double floor = 1e-4) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Compares reverse-mode gradients against central differences for every
/// element of every parameter. Parameter values and grad buffers are restored.
inline GradCheckReport check_gradients(const ForwardFn& forward, std::span<const NamedParam> params,
                                       double eps = 1e-5, double tol = 1e-4,
                                       std::string label = "gradcheck") {
  auto evaluate = [&]() {
    Tape tape(Tape::Mode::inference);
    return forward(tape).item();
  };

  const double first = evaluate();
  const double second = evaluate();
  if (std::bit_cast<std::uint64_t>(first) != std::bit_cast<std::uint64_t>(second)) {
    throw NonDeterministicError(label + ": forward evaluations differ (" + std::to_string(first) +
                                " vs " + std::to_string(second) + ")");
  }

  std::vector<std::vector<double>> saved_grads;
  saved_grads.reserve(params.size());
  for (const auto& p : params) {
    saved_grads.push_back(p.tensor->grad);
    p.tensor->zero_grad();
  }
  {
    Tape tape(Tape::Mode::train);
    Var loss = forward(tape);
    tape.backward(loss);
  }

  GradCheckReport report{std::move(label), eps, tol, {}};
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& t = *params[pi].tensor;
    const std::vector<double> analytic = t.grad;
    GradCheckEntry entry{params[pi].name, t.size(), 0.0, 0.0, 0, true};
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double orig = t.data[i];
      t.data[i] = orig + eps;
      const double up = evaluate();
      t.data[i] = orig - eps;
      const double down = evaluate();
      t.data[i] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      const double rel = relative_error(analytic[i], numeric);
      entry.max_abs_error = std::max(entry.max_abs_error, std::abs(analytic[i] - numeric));
      if (rel > entry.max_rel_error) {
        entry.max_rel_error = rel;
        entry.worst_index = i;
      }
    }
    entry.pass = entry.max_rel_error < tol;
    report.entries.push_back(std::move(entry));
    t.grad = std::move(saved_grads[pi]);
  }
  return report;
}

}  // namespace cliplite
