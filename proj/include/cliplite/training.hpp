#pragma once

// Contrastive pretraining of the dual encoder.
//
// jsd_single_neg and dv_single_neg score each image against its own caption
// and against exactly one other caption from the batch, chosen by rotating the
// shuffled batch by one. infonce_all_pairs scores every image against every
// caption in the batch (the CLIP baseline).

#include <chrono>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cliplite/autodiff.hpp"
#include "cliplite/mi_estimators.hpp"
#include "cliplite/model.hpp"
#include "cliplite/optim.hpp"
#include "cliplite/rng.hpp"
#include "cliplite/synth_data.hpp"

namespace cliplite {

enum class Objective { jsd_single_neg, infonce_all_pairs, dv_single_neg };

inline std::string_view objective_name(Objective o) {
  switch (o) {
    case Objective::jsd_single_neg: return "jsd_single_neg";
    case Objective::infonce_all_pairs: return "infonce_all_pairs";
    case Objective::dv_single_neg: return "dv_single_neg";
  }
  return "?";
}

inline Objective parse_objective(std::string_view s) {
  if (s == "jsd_single_neg" || s == "jsd") return Objective::jsd_single_neg;
  if (s == "infonce_all_pairs" || s == "infonce") return Objective::infonce_all_pairs;
  if (s == "dv_single_neg" || s == "dv") return Objective::dv_single_neg;
  throw std::invalid_argument("unknown objective '" + std::string(s) + "'");
}

/// Negative pairs scored per batch of n.
inline std::size_t negatives_per_batch(Objective o, std::size_t n) {
  return o == Objective::infonce_all_pairs ? n * n - n : n;
}

// ---------------------------------------------------------------------------
// Batches

struct PairBatch {
  Tensor images;                      // [n x 3 x 16 x 16]
  std::vector<TokenSequence> captions;
  std::vector<std::size_t> neg_index;  // caption neg_index[i] is image i's negative
  std::vector<std::size_t> source;     // corpus indices

  std::size_t size() const noexcept { return captions.size(); }
};

/// i -> i+1 mod n: a derangement for every n >= 2.
inline std::vector<std::size_t> rotation_derangement(std::size_t n) {
  if (n < 2) throw std::invalid_argument("derangement needs n >= 2");
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = (i + 1) % n;
  return idx;
}

inline bool is_derangement(std::span<const std::size_t> p) {
  std::vector<bool> seen(p.size(), false);
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] >= p.size() || p[i] == i || seen[p[i]]) return false;
    seen[p[i]] = true;
  }
  return true;
}

/// Index lists of one epoch: a seeded shuffle of `pool`, cut into full batches.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::span<const std::size_t> pool,
                                                           std::size_t batch_size,
                                                           std::uint64_t epoch_seed) {
  if (batch_size < 2) throw std::invalid_argument("batch_size must be >= 2");
  if (batch_size > pool.size()) {
    throw std::invalid_argument("batch_size " + std::to_string(batch_size) +
                                " exceeds corpus size " + std::to_string(pool.size()));
  }
  Rng rng(epoch_seed, "train/shuffle");
  const auto perm = rng.permutation(pool.size());
  std::vector<std::vector<std::size_t>> out(pool.size() / batch_size);
  for (std::size_t b = 0; b < out.size(); ++b) {
    out[b].reserve(batch_size);
    for (std::size_t i = 0; i < batch_size; ++i) out[b].push_back(pool[perm[b * batch_size + i]]);
  }
  return out;
}

inline PairBatch make_batch(const ShapesCorpus& corpus, std::vector<std::size_t> indices) {
  PairBatch b;
  b.images = stack_images(corpus, indices);
  b.captions = gather_tokens(corpus, indices);
  b.neg_index = rotation_derangement(indices.size());
  b.source = std::move(indices);
  return b;
}

inline std::vector<PairBatch> make_batches(const ShapesCorpus& corpus,
                                           std::span<const std::size_t> pool,
                                           std::size_t batch_size, std::uint64_t epoch_seed) {
  std::vector<PairBatch> out;
  for (auto& idx : epoch_batches(pool, batch_size, epoch_seed)) out.push_back(make_batch(corpus, idx));
  return out;
}

inline std::vector<std::size_t> all_indices(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

// ---------------------------------------------------------------------------
// Configuration

struct TrainConfig {
  Objective objective = Objective::jsd_single_neg;
  std::size_t batch_size = 64;
  std::size_t total_steps = 3000;
  std::uint64_t seed = 0;
  OptimizerConfig optimizer;
  LrSchedule schedule;
  std::size_t eval_every = 0;        // 0 disables the eval hook
  std::size_t checkpoint_every = 0;  // 0 disables periodic checkpoints
  std::size_t log_every = 1;
  bool log_wall_time = true;

  void validate() const {
    if (batch_size < 2) throw std::invalid_argument("train: batch_size must be >= 2");
    if (log_every < 1) throw std::invalid_argument("train: log_every must be >= 1");
    optimizer.validate();
    LrSchedule s = schedule;
    s.total_steps = total_steps;
    if (total_steps > 0) s.validate();
  }

  LrSchedule resolved_schedule() const {
    LrSchedule s = schedule;
    s.total_steps = total_steps;
    return s;
  }
};

/// Desk-scale recipes: SGD + momentum + LookAhead for the single-negative
/// objectives, AdamW for the InfoNCE baseline.
inline TrainConfig default_train_config(Objective objective) {
  TrainConfig c;
  c.objective = objective;
  if (objective == Objective::infonce_all_pairs) {
    c.optimizer.kind = OptimizerKind::adamw;
    c.optimizer.weight_decay = 0.1;
    c.schedule.base_lr = 2e-3;
  } else {
    c.optimizer.kind = OptimizerKind::sgd_momentum;
    c.optimizer.lookahead.enabled = true;
    c.schedule.base_lr = 0.05;
  }
  c.schedule.warmup_steps = 100;
  return c;
}

// ---------------------------------------------------------------------------
// One step

struct StepResult {
  double loss = 0.0;
  double bound = 0.0;
  std::size_t negatives = 0;
};

/// Loss of one batch recorded on `tape`; bound and negative count reported in `info`.
template <detail::ParamsOf<ClipModel> M>
Var contrastive_loss(Tape& tape, M& model, const PairBatch& batch, Objective objective,
                     StepResult* info = nullptr) {
  const std::size_t n = batch.size();
  if (n < 2) throw std::invalid_argument("contrastive_loss: batch needs n >= 2");
  if (batch.images.shape.at(0) != n || batch.neg_index.size() != n) {
    throw ShapeError("contrastive_loss: batch arrays disagree in length");
  }
  Var z_img = project_images(tape, model, batch.images);
  Var z_txt = project_texts(tape, model, std::span<const TokenSequence>(batch.captions));
  Var bound;
  std::size_t negatives = 0;
  if (objective == Objective::infonce_all_pairs) {
    Var scores = score_pairs(z_img, z_txt, ScoreMode::all_pairs);
    bound = infonce_bound(scores, exp(tape.param(model.logit_scale, "logit_scale")));
    negatives = scores.size() - n;
  } else {
    if (!is_derangement(batch.neg_index)) {
      throw std::invalid_argument("contrastive_loss: neg_index is not a derangement");
    }
    ScoreSet s{score_pairs(z_img, z_txt, ScoreMode::paired),
               score_pairs(z_img, gather_rows(z_txt, batch.neg_index), ScoreMode::paired)};
    negatives = s.neg.size();
    bound = objective == Objective::jsd_single_neg ? jsd_bound(s) : dv_bound(s);
  }
  if (negatives != negatives_per_batch(objective, n)) {
    throw std::logic_error("contrastive_loss: negative-pair count " + std::to_string(negatives) +
                           " does not match the objective");
  }
  if (info) {
    info->bound = bound.item();
    info->loss = -info->bound;
    info->negatives = negatives;
  }
  return negate(bound);
}

inline StepResult train_step(ClipModel& model, const PairBatch& batch, Objective objective,
                             OptimizerState& opt, double lr) {
  const bool with_scale = objective == Objective::infonce_all_pairs;
  auto params = model.parameters(with_scale);
  zero_grads(params);
  StepResult info;
  Tape tape(Tape::Mode::train);
  Var loss = contrastive_loss(tape, model, batch, objective, &info);
  tape.backward(loss);
  optimizer_step(opt, params, lr);
  if (with_scale) model.clamp_logit_scale();
  return info;
}

// ---------------------------------------------------------------------------
// Loop

struct MetricsRow {
  std::size_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double seconds = 0.0;
};

struct TrainState {
  ClipModel model;
  OptimizerState optimizer;
  std::size_t step = 0;  // steps completed
};

inline TrainState initial_train_state(const TrainConfig& config) {
  config.validate();
  return {init_clip_model(config.seed), OptimizerState(config.optimizer), 0};
}

struct TrainHooks {
  std::function<void(const MetricsRow&)> on_metrics;
  std::function<void(const TrainState&)> on_eval;
  std::function<void(TrainState&)> on_checkpoint;
};

/// Corpus indices of the batch used at `step`. Depends only on (seed, step),
/// so a resumed run replays the same stream.
inline std::vector<std::size_t> batch_for_step(std::span<const std::size_t> pool,
                                               const TrainConfig& config, std::size_t step) {
  const std::size_t per_epoch = pool.size() / config.batch_size;
  if (per_epoch == 0) {
    throw std::invalid_argument("batch_size " + std::to_string(config.batch_size) +
                                " exceeds corpus size " + std::to_string(pool.size()));
  }
  const std::size_t epoch = step / per_epoch;
  const std::uint64_t epoch_seed =
      derive_stream_key(config.seed, "train/epoch/" + std::to_string(epoch));
  return epoch_batches(pool, config.batch_size, epoch_seed)[step % per_epoch];
}

/// Runs steps state.step .. total_steps-1 over the corpus entries in `pool`.
inline std::vector<MetricsRow> train(const ShapesCorpus& corpus, std::span<const std::size_t> pool,
                                     const TrainConfig& config, TrainState& state,
                                     const TrainHooks& hooks = {}) {
  config.validate();
  if (state.step > config.total_steps) {
    throw std::invalid_argument("train: state step " + std::to_string(state.step) +
                                " beyond total_steps");
  }
  const LrSchedule schedule = config.resolved_schedule();
  std::vector<MetricsRow> metrics;
  const auto t0 = std::chrono::steady_clock::now();
  while (state.step < config.total_steps) {
    const std::size_t step = state.step;
    const PairBatch batch = make_batch(corpus, batch_for_step(pool, config, step));
    const double lr = lr_at(schedule, step);
    StepResult r;
    try {
      r = train_step(state.model, batch, config.objective, state.optimizer, lr);
    } catch (const NumericError& err) {
      throw NumericError("train: step " + std::to_string(step) + ": " + err.what());
    }
    ++state.step;
    if (step % config.log_every == 0 || state.step == config.total_steps) {
      MetricsRow row{step, r.loss, lr, 0.0};
      if (config.log_wall_time) {
        row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      }
      metrics.push_back(row);
      if (hooks.on_metrics) hooks.on_metrics(row);
    }
    if (hooks.on_eval && config.eval_every > 0 && state.step % config.eval_every == 0) {
      hooks.on_eval(state);
    }
    if (hooks.on_checkpoint && config.checkpoint_every > 0 &&
        state.step % config.checkpoint_every == 0) {
      hooks.on_checkpoint(state);
    }
  }
  return metrics;
}

}  // namespace cliplite
