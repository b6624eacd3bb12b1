// Acceptance run: one PASS/FAIL line per criterion with the measured values,
// pinned tolerances and runtimes. Exits 0 once every criterion has been
// evaluated; pass --strict to exit 1 when any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "cliplite/cli.hpp"
#include "cliplite/concept_edit.hpp"
#include "cliplite/config.hpp"
#include "cliplite/eval.hpp"
#include "cliplite/gradcheck_suite.hpp"
#include "cliplite/grounding.hpp"
#include "cliplite/mi_bench.hpp"
#include "cliplite/mi_estimators.hpp"
#include "cliplite/training.hpp"

using namespace cliplite;
namespace fs = std::filesystem;

namespace {

const std::vector<std::uint64_t> kSeeds{0, 1, 2};

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string num(double v, int precision = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", precision, v);
  return buf;
}

std::string list(const std::vector<double>& v, int precision = 3) {
  std::string s = "[";
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + num(v[i], precision);
  return s + "]";
}

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

// ---------------------------------------------------------------------------
// Shared shapes runs

struct ShapesRun {
  ExperimentConfig config;
  ShapesCorpus corpus;
  Split split;
  TrainState state;
  double retrieval_r1 = 0.0;
  double train_seconds = 0.0;
};

ExperimentConfig shapes_config(std::uint64_t seed, const std::string& objective, std::size_t batch) {
  ExperimentConfig c;
  c.seed = seed;
  c.train.objective = objective;
  c.train.batch_size = batch;
  validate(c);
  return c;
}

ShapesRun train_shapes(std::uint64_t seed, const std::string& objective, std::size_t batch) {
  ShapesRun r;
  r.config = shapes_config(seed, objective, batch);
  r.corpus = gen_captioned_shapes(corpus_spec(r.config));
  r.split = resolve_split(r.config, r.corpus);
  const TrainConfig tc = resolve_train_config(r.config);
  r.state = initial_train_state(tc);
  const auto t0 = std::chrono::steady_clock::now();
  train(r.corpus, r.split.train, tc, r.state);
  r.train_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  r.retrieval_r1 = evaluate_retrieval(r.state.model, r.corpus, r.split.test).mean_recall(1);
  std::cerr << "  trained " << objective << " b" << batch << " seed " << seed << ": R@1 " << num(r.retrieval_r1)
            << " (" << num(r.train_seconds, 3) << " s)\n";
  return r;
}

std::map<std::pair<std::string, std::size_t>, std::vector<ShapesRun>>& run_cache() {
  static std::map<std::pair<std::string, std::size_t>, std::vector<ShapesRun>> cache;
  return cache;
}

const std::vector<ShapesRun>& shapes_runs(const std::string& objective, std::size_t batch) {
  auto& slot = run_cache()[{objective, batch}];
  if (slot.empty())
    for (std::uint64_t s : kSeeds) slot.push_back(train_shapes(s, objective, batch));
  return slot;
}

// ---------------------------------------------------------------------------
// Criteria

Outcome gradient_correctness() {
  const auto rows = run_gradcheck_suite(1e-5, 1e-4);
  double worst = 0.0;
  std::set<std::string> checks;
  std::string failing;
  for (const auto& r : rows) {
    worst = std::max(worst, r.max_rel_error);
    checks.insert(r.check);
    if (!r.pass) failing += " " + r.check + "/" + r.param;
  }
  const bool pass = failing.empty() && worst < 1e-4;
  return {pass, "max rel err " + num(worst, 3) + " < 1e-4 over " + std::to_string(checks.size()) + " checks, " +
                    std::to_string(rows.size()) + " params" + (failing.empty() ? "" : "; failing:" + failing)};
}

Outcome estimator_identities() {
  Rng rng(0, "acceptance/identities");
  const double jsd0 = jsd_bound(std::vector<double>(16, 0.0), std::vector<double>(16, 0.0)).value;
  const double jsd0_err = std::abs(jsd0 + 2.0 * std::numbers::ln2);

  double jsd_max = -std::numeric_limits<double>::infinity();
  for (int t = 0; t < 100000; ++t) {
    const double scale = std::exp(rng.uniform(-5.0, 5.0));
    std::vector<double> pos(1 + rng.below(16)), neg(1 + rng.below(16));
    for (double& v : pos) v = scale * rng.normal();
    for (double& v : neg) v = scale * rng.normal();
    jsd_max = std::max(jsd_max, jsd_bound(pos, neg).value);
  }

  double nce_excess = -std::numeric_limits<double>::infinity();
  for (int t = 0; t < 10000; ++t) {
    const std::size_t n = 1 + rng.below(32);
    const double scale = std::exp(rng.uniform(-5.0, 5.0));
    Tensor m(Shape{n, n});
    for (double& v : m.data) v = scale * rng.normal();
    if (t % 4 == 0)
      for (std::size_t i = 0; i < n; ++i) m.data[i * n + i] += 50.0 * scale;  // near-perfect critics
    nce_excess = std::max(nce_excess, infonce_bound(m).value - std::log(static_cast<double>(n)));
  }

  double dv_err = 0.0;
  for (int t = 0; t < 1000; ++t) {
    const double c = rng.uniform(-50.0, 50.0);
    dv_err = std::max(dv_err, std::abs(dv_bound(std::vector<double>(1 + rng.below(20), c),
                                                std::vector<double>(1 + rng.below(20), c))
                                           .value));
  }
  const bool pass = jsd0_err <= 1e-12 && jsd_max <= 1e-9 && nce_excess <= 1e-9 && dv_err <= 1e-12;
  return {pass, "|jsd(0)+2ln2| " + num(jsd0_err, 2) + " <= 1e-12; max jsd " + num(jsd_max, 3) +
                    " <= 1e-9 (1e5 sets); max infonce-ln n " + num(nce_excess, 3) +
                    " <= 1e-9 (1e4 matrices); |dv(const)| " + num(dv_err, 2) + " <= 1e-12"};
}

Outcome mi_ground_truth() {
  MiBenchConfig cfg;
  double worst = 0.0;
  std::string cells;
  for (BoundKind k : {BoundKind::dv, BoundKind::infonce})
    for (double rho : {0.0, 0.5}) {
      std::vector<double> est;
      double truth = 0.0;
      for (std::uint64_t s : kSeeds) {
        const auto c = run_mi_cell(cfg, k, 64, rho, s);
        est.push_back(c.estimate);
        truth = c.truth;
        worst = std::max(worst, std::abs(c.estimate - c.truth));
      }
      cells += std::string(cells.empty() ? "" : "; ") + std::string(bound_name(k)) + " rho " + num(rho, 2) + " " +
               list(est) + " vs " + num(truth, 4);
    }
  return {worst <= 0.05, "max |est-truth| " + num(worst, 3) + " <= 0.05 nats; " + cells};
}

Outcome infonce_saturation() {
  MiBenchConfig cfg;
  cfg.d = 8;
  const double rho = 0.8, ceiling = std::log(8.0);
  std::vector<double> nce, dv;
  double truth = 0.0;
  for (std::uint64_t s : kSeeds) {
    const auto a = run_mi_cell(cfg, BoundKind::infonce, 8, rho, s);
    const auto b = run_mi_cell(cfg, BoundKind::dv, 64, rho, s);
    nce.push_back(a.estimate);
    dv.push_back(b.estimate);
    truth = a.truth;
  }
  bool pass = true;
  for (double v : nce) pass = pass && v <= ceiling + 1e-9;
  for (double v : dv) pass = pass && v > 2.3;
  return {pass, "truth " + num(truth) + "; infonce b8 " + list(nce) + " <= ln8 " + num(ceiling) + "; dv b64 " +
                    list(dv) + " > 2.3"};
}

Outcome single_negative_efficiency() {
  auto r1 = [](const std::string& obj, std::size_t b) {
    std::vector<double> v;
    for (const auto& r : shapes_runs(obj, b)) v.push_back(r.retrieval_r1);
    return v;
  };
  const auto j8 = r1("jsd_single_neg", 8), n8 = r1("infonce_all_pairs", 8);
  const auto j64 = r1("jsd_single_neg", 64), n64 = r1("infonce_all_pairs", 64);
  const double jsd_gap = mean(j64) - mean(j8), nce_gap = mean(n64) - mean(n8);
  const bool level = mean(j8) >= mean(n8);
  const bool gap = jsd_gap <= nce_gap;
  return {level && gap, std::string(level ? "" : "[red] ") + "mean R@1 b8 jsd " + num(mean(j8), 3) + " >= infonce " +
                            num(mean(n8), 3) + "; " + (gap ? "" : "[red] ") + "b64-b8 gap jsd " + num(jsd_gap, 3) +
                            " <= infonce " + num(nce_gap, 3) + " (b64: jsd " + num(mean(j64), 3) + ", infonce " +
                            num(mean(n64), 3) + "; per seed jsd b8 " + list(j8) + ", infonce b8 " + list(n8) + ")"};
}

Outcome frozen_feature_probe() {
  std::vector<double> trained, random, gaps;
  for (const auto& r : shapes_runs("jsd_single_neg", 64)) {
    const ProbeConfig pc = probe_config(r.config);
    trained.push_back(probe_image_encoder(r.state.model.image, r.corpus, r.split, ProbeTarget::shape, pc).accuracy);
    const ClipModel fresh = init_clip_model(r.config.seed);
    random.push_back(probe_image_encoder(fresh.image, r.corpus, r.split, ProbeTarget::shape, pc).accuracy);
    gaps.push_back(trained.back() - random.back());
  }
  bool pass = true;
  for (double g : gaps) pass = pass && g >= 0.15;
  return {pass, "shape probe trained " + list(trained) + " vs random-init " + list(random) + "; gaps " + list(gaps) +
                    " >= 0.15 every seed (mean gap " + num(mean(gaps), 3) + ")"};
}

Outcome zero_shot() {
  std::vector<double> photo, spread;
  for (const auto& r : shapes_runs("jsd_single_neg", 64)) {
    std::vector<double> acc;
    for (const auto& t : kPromptTemplates) acc.push_back(zero_shot_shape_accuracy(r.state.model, r.corpus, r.split.test, t));
    photo.push_back(acc[0]);
    spread.push_back(*std::max_element(acc.begin(), acc.end()) - *std::min_element(acc.begin(), acc.end()));
  }
  bool pass = true;
  for (std::size_t i = 0; i < photo.size(); ++i) pass = pass && photo[i] > 0.5 && spread[i] <= 0.10;
  return {pass, "'a photo of a {}' accuracy " + list(photo) + " > 0.5 (chance 0.333); template spread " +
                    list(spread) + " <= 0.10"};
}

Outcome concept_editing() {
  bool pass = true;
  double worst_residual = 0.0, worst_neutral = 0.0;
  std::size_t shrunk = 0, marked = 0;
  std::string not_shrunk;
  for (const auto& r : shapes_runs("jsd_single_neg", 64)) {
    const ClipModel& m = r.state.model;
    const auto pairs = contextualize(texture_pair_corpus());
    const SubspaceBasis V = estimate_subspace(embed_pairs(m, pairs), 1);
    const Tensor img = embed_images(m, stack_images(r.corpus, r.split.test));
    const Tensor edited = remove_subspace_rows(l2_normalize_rows(img), V);
    const std::size_t d = V.dim;
    for (std::size_t i = 0; i < edited.shape[0]; ++i)
      worst_residual = std::max(
          worst_residual, std::abs(detail::dot(std::span<const double>(edited.data.data() + i * d, d), V.vectors[0])));
    std::vector<int> attr;
    for (std::size_t i : r.split.test) attr.push_back(r.corpus.samples[i].labels.texture);
    const auto prompts = texture_prompts();
    std::vector<TokenSequence> toks;
    for (const auto& p : prompts) toks.push_back(Vocabulary::shapes().tokenize(p.text));
    const auto rows = equalization_report(img, attr, embed_texts(m, toks), prompts, V, r.config.edit.top_n);
    for (const auto& row : rows) {
      if (row.side == "neutral") {
        worst_neutral = std::max({worst_neutral, std::abs(row.delta_a()), std::abs(row.delta_b())});
        continue;
      }
      ++marked;
      if (row.gap_after() < row.gap_before()) {
        ++shrunk;
      } else {
        not_shrunk += " seed" + std::to_string(r.config.seed) + ":'" + row.prompt + "' " + num(row.gap_before(), 3) +
                      "->" + num(row.gap_after(), 3);
      }
    }
  }
  pass = worst_residual < 1e-9 && shrunk == marked && worst_neutral < 0.01;
  return {pass, "max residual projection " + num(worst_residual, 3) + " < 1e-9; gap shrinks on " +
                    std::to_string(shrunk) + "/" + std::to_string(marked) + " texture prompts" +
                    (not_shrunk.empty() ? "" : " (not:" + not_shrunk + ")") + "; max neutral move " +
                    num(worst_neutral, 3) + " < 0.01"};
}

Outcome grounding() {
  std::vector<double> acc;
  bool non_negative = true;
  std::size_t zero_maps = 0;
  for (const auto& r : shapes_runs("jsd_single_neg", 64)) {
    // 500 fresh images from an unseen generator seed
    ShapesCorpusSpec spec = corpus_spec(r.config);
    spec.n = 500;
    spec.seed = r.config.seed + 1000;
    const auto held = gen_captioned_shapes(spec);
    std::vector<std::size_t> idx(500);
    std::iota(idx.begin(), idx.end(), 0);
    const auto rep = pointing_accuracy(r.state.model, held, idx);
    acc.push_back(rep.accuracy);
    non_negative = non_negative && rep.all_non_negative;
    zero_maps += rep.zero_gradient_maps;
  }
  bool pass = non_negative;
  for (double a : acc) pass = pass && a > 2.0 * kPointingChance;
  return {pass, std::string("maps non-negative: ") + (non_negative ? "yes" : "no") + "; pointing " + list(acc) +
                    " > 2x chance " + num(2.0 * kPointingChance, 3) + " (500 held-out images per seed, " +
                    std::to_string(zero_maps) + " zero-gradient maps)"};
}

Outcome determinism_and_persistence() {
  const fs::path root = fs::temp_directory_path() / "cliplite_acceptance_determinism";
  fs::remove_all(root);
  auto cli = [](std::vector<std::string> args) {
    std::ostringstream out, err;
    args.insert(args.begin(), "cliplite");
    const int code = run(args, out, err);
    if (code != 0) throw std::runtime_error("cliplite " + args.at(1) + " failed: " + err.str());
  };
  const std::vector<std::string> common{"--seed",  "7", "--set", "data.n=512", "--set", "train.total_steps=60",
                                        "--set",   "train.batch_size=16", "--set", "train.warmup_steps=10",
                                        "--set",   "train.eval_every=20", "--set", "train.checkpoint_every=30"};
  auto args = [&](const std::string& out, std::vector<std::string> extra = {}) {
    std::vector<std::string> a{"train", "--out", (root / out).string()};
    a.insert(a.end(), common.begin(), common.end());
    a.insert(a.end(), extra.begin(), extra.end());
    return a;
  };
  cli(args("a"));
  cli(args("b"));
  cli(args("resumed", {"--set", "train.resume_from=\"" + (root / "a" / "checkpoints" / "step_30.ckpt").string() + "\""}));

  const bool metrics_same = io::read_file(root / "a" / "metrics.csv") == io::read_file(root / "b" / "metrics.csv");
  const bool eval_same = io::read_file(root / "a" / "eval.csv") == io::read_file(root / "b" / "eval.csv");
  const bool ckpt_same =
      io::read_file(root / "a" / "checkpoint.ckpt") == io::read_file(root / "b" / "checkpoint.ckpt");

  const auto full = read_csv_strict(root / "a" / "metrics.csv");
  const auto tail = read_csv_strict(root / "resumed" / "metrics.csv");
  bool tail_same = tail.rows.size() == 30 && full.rows.size() == 60;
  for (std::size_t i = 0; tail_same && i < tail.rows.size(); ++i) tail_same = tail.rows[i] == full.rows[30 + i];
  const bool resume_same =
      io::read_file(root / "a" / "checkpoint.ckpt") == io::read_file(root / "resumed" / "checkpoint.ckpt");
  fs::remove_all(root);
  const bool pass = metrics_same && eval_same && ckpt_same && tail_same && resume_same;
  auto yn = [](bool b) { return b ? "identical" : "DIFFERENT"; };
  return {pass, std::string("rerun metrics.csv ") + yn(metrics_same) + ", eval.csv " + yn(eval_same) +
                    ", checkpoint " + yn(ckpt_same) + "; resume at step 30/60: metrics tail " + yn(tail_same) +
                    ", final checkpoint bytes " + yn(resume_same)};
}

struct Criterion {
  int id;
  const char* name;
  double budget_seconds;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cliplite acceptance run"};
  bool strict = false;
  std::vector<int> only;
  std::string report_path;
  app.add_flag("--strict", strict, "Exit 1 when any criterion fails");
  app.add_option("--only", only, "Run only these criterion numbers")->delimiter(',');
  app.add_option("--report", report_path, "Also write the result lines to this file");
  CLI11_PARSE(app, argc, argv);

  const std::vector<Criterion> criteria{
      {1, "gradient correctness", 60, gradient_correctness},
      {2, "estimator identities", 30, estimator_identities},
      {3, "MI ground truth", 180, mi_ground_truth},
      {4, "InfoNCE saturation", 180, infonce_saturation},
      {5, "single-negative efficiency", 600, single_negative_efficiency},
      {6, "frozen-feature probe", 180, frozen_feature_probe},
      {7, "zero-shot prompting", 120, zero_shot},
      {8, "concept editing", 120, concept_editing},
      {9, "grounding", 180, grounding},
      {10, "determinism and persistence", 300, determinism_and_persistence},
  };

  std::string report;
  auto emit = [&](const std::string& line) {
    std::fputs(line.c_str(), stdout);
    std::fflush(stdout);
    report += line;
  };
  int failed = 0, ran = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    // criteria 6-9 reuse the criterion-5 jsd batch-64 models; their training time is charged to 5
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = secs < c.budget_seconds;
    const bool pass = o.pass && in_time;
    ++ran;
    if (!pass) ++failed;
    char head[96], tail[96];
    std::snprintf(head, sizeof head, "%s  %2d  %-28s ", pass ? "PASS" : "FAIL", c.id, c.name);
    std::snprintf(tail, sizeof tail, " (%.1f s, budget %.0f s%s)\n", secs, c.budget_seconds,
                  in_time ? "" : ", OVER BUDGET");
    emit(head + o.detail + tail);
  }
  emit(std::to_string(ran - failed) + "/" + std::to_string(ran) + " criteria passed\n");
  if (!report_path.empty()) io::write_file_atomic(report_path, report);
  return strict && failed > 0 ? 1 : 0;
}
