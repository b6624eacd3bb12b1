#pragma once

// Command dispatch for the cliplite executable.
//
//   cliplite <command> [--config file.json] [--seed N] [--out dir] [--force]
//                      [--set key=value ...] [--checkpoint file]
//
// Every command resolves the config, claims its output directory, writes
// config.json (the resolved snapshot) into it, prints the root seed with the
// substreams it draws from, then writes its CSV / PGM artifacts.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cliplite/checkpoint.hpp"
#include "cliplite/concept_edit.hpp"
#include "cliplite/config.hpp"
#include "cliplite/csv.hpp"
#include "cliplite/eval.hpp"
#include "cliplite/gradcheck_suite.hpp"
#include "cliplite/grounding.hpp"
#include "cliplite/mi_bench.hpp"
#include "cliplite/synth_data.hpp"
#include "cliplite/training.hpp"

namespace cliplite {

inline const std::vector<std::string> kCommands{"gen-data",  "train",        "eval-retrieval",
                                                "eval-zeroshot", "eval-probe", "mi-bench",
                                                "edit-concept", "ground",     "gradcheck"};

struct CliOptions {
  std::string command;
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool force = false;
  std::vector<std::string> overrides;
  std::string checkpoint;
};

/// Config file (or defaults), then --set overrides in order, then the
/// dedicated flags. Validated.
inline ExperimentConfig resolve_config(const CliOptions& o) {
  ExperimentConfig c = o.config_path.empty() ? ExperimentConfig{} : load_config(o.config_path);
  for (const auto& s : o.overrides) c = apply_override(c, s);
  if (o.seed) c.seed = *o.seed;
  if (!o.out.empty()) c.out_dir = o.out;
  if (!o.checkpoint.empty()) c.checkpoint = o.checkpoint;
  validate(c);
  return c;
}

/// Creates the output directory. An existing non-empty directory is a
/// collision unless `force` is set.
inline std::filesystem::path claim_out_dir(const ExperimentConfig& c, bool force) {
  const std::filesystem::path dir = c.out_dir.empty() ? default_out_dir(c) : std::filesystem::path(c.out_dir);
  if (std::filesystem::exists(dir) && !std::filesystem::is_empty(dir) && !force) {
    throw IoError("output directory '" + dir.string() + "' already exists (pass --force to overwrite)");
  }
  std::filesystem::create_directories(dir);
  return dir;
}

namespace detail {

struct RunContext {
  ExperimentConfig config;
  std::filesystem::path out;
  std::ostream& log;
};

inline void print_seed_info(std::ostream& log, std::uint64_t seed, const std::vector<std::string>& streams) {
  log << "root seed " << seed << " (substream key = splitmix64(splitmix64(seed) ^ fnv1a64(name)))\n";
  for (const auto& s : streams) {
    if (s.find(' ') != std::string::npos) {
      log << "  substream " << s << "\n";
    } else {
      log << "  substream " << s << " = " << hex64(derive_stream_key(seed, s)) << "\n";
    }
  }
}

inline std::vector<std::string> data_streams(const ExperimentConfig& c) {
  std::vector<std::string> s{"data/shapes"};
  if (c.data.split == "random") s.push_back("data/split");
  return s;
}

inline std::vector<std::string> command_streams(const std::string& cmd, const ExperimentConfig& c) {
  std::vector<std::string> s;
  if (cmd == "mi-bench") {
    for (const auto& e : c.mi_bench.estimators)
      for (std::size_t b : c.mi_bench.batch_sizes)
        for (double rho : c.mi_bench.rhos) s.push_back("mi/" + e + "/" + std::to_string(b) + "/" + std::to_string(rho));
    s.push_back("init/critic/y");
    s.push_back("init/critic/z");
    return s;
  }
  if (cmd == "gradcheck") return {"gradcheck/perturb"};
  s = data_streams(c);
  if (cmd == "train") {
    for (const char* name : {"init/image/conv1_w", "init/image/conv2_w", "init/image/fc_w", "init/text/embedding",
                             "init/text/fc1_w", "init/text/fc2_w", "init/image_proj", "init/text_proj"})
      s.push_back(name);
    s.push_back("train/epoch/<e> (one per epoch)");
  }
  if (cmd == "eval-probe" && c.eval.probe_random_baseline) s.push_back("init/image/* (random-init baseline)");
  if (cmd == "edit-concept") s.push_back("concept/power_iteration (under root 0)");
  return s;
}

struct Data {
  ShapesCorpus corpus;
  Split split;
};

inline Data load_data(const ExperimentConfig& c) {
  Data d{gen_captioned_shapes(corpus_spec(c)), {}};
  d.split = resolve_split(c, d.corpus);
  if (d.split.test.empty() || d.split.train.empty()) throw std::invalid_argument("split leaves an empty side");
  return d;
}

inline ClipModel load_model(const ExperimentConfig& c) {
  if (c.checkpoint.empty()) throw IoError("this command needs a checkpoint (--checkpoint or \"checkpoint\")");
  ClipModel m = init_clip_model(c.seed);
  load_checkpoint(c.checkpoint, m);
  return m;
}

inline std::string fmt(double v) { return format_double(v); }
inline std::string fmt(std::size_t v) { return std::to_string(v); }

// ---------------------------------------------------------------------------
// Commands

inline void cmd_gen_data(RunContext& ctx) {
  const auto spec = corpus_spec(ctx.config);
  const Data d = load_data(ctx.config);
  export_corpus(d.corpus, spec, ctx.out / "data");
  std::vector<char> held(d.corpus.size(), 0);
  for (std::size_t i : d.split.test) held[i] = 1;
  CsvWriter w({"index", "split", "caption", "shape", "color", "texture", "row", "col"});
  for (std::size_t i = 0; i < d.corpus.size(); ++i) {
    const auto& s = d.corpus.samples[i];
    const auto& l = s.labels;
    w.row({fmt(i), held[i] ? "test" : "train", s.caption, std::string(grammar::kShapes[l.shape]),
           std::string(grammar::kColors[l.color]), l.texture == 0 ? "striped" : "dotted", std::to_string(l.row),
           std::to_string(l.col)});
  }
  w.write(ctx.out / "corpus.csv");
  ctx.log << "wrote " << d.corpus.size() << " samples (" << d.split.test.size() << " held out)\n";
}

inline void write_retrieval(const RetrievalEval& r, const std::filesystem::path& path) {
  CsvWriter w({"direction", "k", "recall", "n_queries"});
  for (const RetrievalReport* rep : {&r.text_to_image, &r.image_to_text})
    for (std::size_t i = 0; i < rep->ks.size(); ++i)
      w.row({std::string(direction_name(rep->direction)), fmt(rep->ks[i]), fmt(rep->recall[i]), fmt(rep->n_queries)});
  w.write(path);
}

inline void cmd_train(RunContext& ctx) {
  const auto& c = ctx.config;
  const TrainConfig tc = resolve_train_config(c);
  const std::string hash = config_hash(c);
  const Data d = load_data(c);
  TrainState state = c.train.resume_from.empty() ? initial_train_state(tc)
                                                 : load_train_state(c.train.resume_from, tc, hash);
  if (state.step > 0) ctx.log << "resuming at step " << state.step << "\n";
  ctx.log << "objective " << objective_name(tc.objective) << ", batch " << tc.batch_size << ", "
          << tc.total_steps << " steps, " << optimizer_name(tc.optimizer.kind) << " lr " << tc.schedule.base_lr
          << "\n";
  CsvWriter metrics({"step", "loss", "lr", "seconds"});
  CsvWriter evals({"step", "direction", "k", "recall", "n_queries"});
  const std::vector<std::size_t> ks = c.eval.ks;
  TrainHooks hooks;
  hooks.on_metrics = [&](const MetricsRow& r) {
    metrics.row({fmt(r.step), fmt(r.loss), fmt(r.lr), fmt(r.seconds)});
  };
  hooks.on_eval = [&](const TrainState& s) {
    const auto r = evaluate_retrieval(s.model, d.corpus, d.split.test, ks);
    for (const RetrievalReport* rep : {&r.text_to_image, &r.image_to_text})
      for (std::size_t i = 0; i < rep->ks.size(); ++i)
        evals.row({fmt(s.step), std::string(direction_name(rep->direction)), fmt(rep->ks[i]), fmt(rep->recall[i]),
                   fmt(rep->n_queries)});
  };
  hooks.on_checkpoint = [&](TrainState& s) {
    save_train_state(ctx.out / "checkpoints" / ("step_" + std::to_string(s.step) + ".ckpt"), s, hash);
  };
  train(d.corpus, d.split.train, tc, state, hooks);
  metrics.write(ctx.out / "metrics.csv");
  if (tc.eval_every > 0) evals.write(ctx.out / "eval.csv");
  save_train_state(ctx.out / "checkpoint.ckpt", state, hash);
  ctx.log << "final checkpoint " << (ctx.out / "checkpoint.ckpt").string() << " (config hash " << hash << ")\n";
}

inline void cmd_eval_retrieval(RunContext& ctx) {
  const Data d = load_data(ctx.config);
  const ClipModel m = load_model(ctx.config);
  const auto r = evaluate_retrieval(m, d.corpus, d.split.test, ctx.config.eval.ks);
  write_retrieval(r, ctx.out / "retrieval.csv");
  ctx.log << "R@" << r.text_to_image.ks.front() << " text->image " << fmt(r.text_to_image.recall.front())
          << ", image->text " << fmt(r.image_to_text.recall.front()) << " over " << r.text_to_image.n_queries
          << " queries\n";
}

inline void cmd_eval_zeroshot(RunContext& ctx) {
  const Data d = load_data(ctx.config);
  const ClipModel m = load_model(ctx.config);
  CsvWriter w({"template", "accuracy", "n_images", "chance"});
  for (const auto& t : ctx.config.eval.templates) {
    const double acc = zero_shot_shape_accuracy(m, d.corpus, d.split.test, t);
    w.row({t, fmt(acc), fmt(d.split.test.size()), fmt(1.0 / static_cast<double>(grammar::kShapes.size()))});
    ctx.log << "'" << t << "' accuracy " << fmt(acc) << "\n";
  }
  w.write(ctx.out / "zeroshot.csv");
}

inline void cmd_eval_probe(RunContext& ctx) {
  const auto& c = ctx.config;
  const Data d = load_data(c);
  const ClipModel m = load_model(c);
  const ProbeTarget target = parse_probe_target(c.eval.probe_target);
  CsvWriter w({"encoder", "target", "accuracy", "train_accuracy", "iterations", "classes"});
  auto emit = [&](const char* name, const ImageEncoderParams& enc) {
    const ProbeResult r = probe_image_encoder(enc, d.corpus, d.split, target, probe_config(c));
    w.row({name, c.eval.probe_target, fmt(r.accuracy), fmt(r.train_accuracy), fmt(r.iterations), fmt(r.classes)});
    ctx.log << name << " encoder " << c.eval.probe_target << " probe accuracy " << fmt(r.accuracy) << "\n";
  };
  emit("trained", m.image);
  if (c.eval.probe_random_baseline) emit("random_init", init_clip_model(c.seed).image);
  w.write(ctx.out / "probe.csv");
}

inline void cmd_mi_bench(RunContext& ctx) {
  const MiBenchReport r = mi_benchmark(mi_bench_config(ctx.config));
  CsvWriter cells({"estimator", "batch_size", "rho", "seed", "estimate", "truth", "unit", "final_train_bound"});
  for (const auto& x : r.cells)
    cells.row({std::string(bound_name(x.estimator)), fmt(x.batch_size), fmt(x.rho), std::to_string(x.seed),
               fmt(x.estimate), fmt(x.truth), x.unit, fmt(x.final_train_bound)});
  cells.write(ctx.out / "mi_bench.csv");
  CsvWriter sum({"estimator", "batch_size", "rho", "mean", "std", "truth", "bias", "unit"});
  for (const auto& s : r.summary) {
    sum.row({std::string(bound_name(s.estimator)), fmt(s.batch_size), fmt(s.rho), fmt(s.mean), fmt(s.std),
             fmt(s.truth), fmt(s.bias), s.unit});
    ctx.log << bound_name(s.estimator) << " b" << s.batch_size << " rho " << s.rho << ": " << fmt(s.mean) << " "
            << s.unit << " (truth " << fmt(s.truth) << ")\n";
  }
  sum.write(ctx.out / "mi_bench_summary.csv");
}

inline void cmd_edit_concept(RunContext& ctx) {
  const auto& c = ctx.config;
  const Data d = load_data(c);
  const ClipModel m = load_model(c);
  const auto pairs = contextualize(texture_pair_corpus(), Vocabulary::shapes());
  const SubspaceBasis V = estimate_subspace(embed_pairs(m, pairs), c.edit.k);
  CsvWriter basis({"component", "eigenvalue", "explained"});
  for (std::size_t j = 0; j < V.rank(); ++j) basis.row({fmt(j), fmt(V.eigenvalues[j]), fmt(V.explained[j])});
  basis.write(ctx.out / "subspace.csv");

  const Tensor img = embed_images(m, stack_images(d.corpus, d.split.test));
  std::vector<int> attr;
  for (std::size_t i : d.split.test) attr.push_back(d.corpus.samples[i].labels.texture);
  const auto prompts = texture_prompts();
  std::vector<TokenSequence> toks;
  for (const auto& p : prompts) toks.push_back(Vocabulary::shapes().tokenize(p.text));
  const auto rows = equalization_report(img, attr, embed_texts(m, toks), prompts, V, c.edit.top_n);
  CsvWriter w({"prompt", "side", "before_a", "before_b", "after_a", "after_b", "renorm_after_a", "renorm_after_b",
               "gap_before", "gap_after"});
  for (const auto& r : rows) {
    w.row({r.prompt, r.side, fmt(r.before_a), fmt(r.before_b), fmt(r.after_a), fmt(r.after_b), fmt(r.renorm_after_a),
           fmt(r.renorm_after_b), fmt(r.gap_before()), fmt(r.gap_after())});
  }
  w.write(ctx.out / "edit.csv");

  const Tensor edited = remove_subspace_rows(l2_normalize_rows(img), V);
  double residual = 0.0;
  const std::size_t dim = V.dim;
  for (std::size_t i = 0; i < edited.shape[0]; ++i)
    for (const auto& v : V.vectors)
      residual = std::max(residual, std::abs(dot(std::span<const double>(edited.data.data() + i * dim, dim), v)));
  CsvWriter summary({"metric", "value"});
  summary.row({"explained_variance", fmt(V.explained.front())});
  summary.row({"max_residual_projection", fmt(residual)});
  summary.row({"n_images", fmt(d.split.test.size())});
  summary.write(ctx.out / "edit_summary.csv");
  ctx.log << "explained variance " << fmt(V.explained.front()) << ", max residual projection " << fmt(residual)
          << "\n";
}

inline void cmd_ground(RunContext& ctx) {
  const auto& c = ctx.config;
  const Data d = load_data(c);
  const ClipModel m = load_model(c);
  const std::size_t n = std::min(c.ground.n_images, d.split.test.size());
  const std::vector<std::size_t> idx(d.split.test.begin(), d.split.test.begin() + static_cast<std::ptrdiff_t>(n));
  const PointingReport rep = pointing_accuracy(m, d.corpus, idx);
  CsvWriter w({"metric", "value"});
  w.row({"pointing_accuracy", fmt(rep.accuracy)});
  w.row({"chance", fmt(rep.chance)});
  w.row({"n_images", fmt(rep.n_images)});
  w.row({"zero_gradient_maps", fmt(rep.zero_gradient_maps)});
  w.row({"all_non_negative", rep.all_non_negative ? "true" : "false"});
  w.write(ctx.out / "pointing.csv");

  const std::size_t dump = std::min(c.ground.dump, n);
  const Upsample mode = parse_upsample(c.ground.upsample);
  CsvWriter boxes({"image", "phrase", "grid_row0", "grid_col0", "grid_row1", "grid_col1", "mass_fraction"});
  for (std::size_t i = 0; i < dump; ++i) {
    const auto& s = d.corpus.samples[idx[i]];
    Tensor image({kImageChannels, kImageSize, kImageSize});
    image.data = s.image;
    const SaliencyMap map = grad_cam(m, image, s.tokens);
    const Tensor up = upsample(map.grid, mode);
    const std::string stem = "saliency_" + std::to_string(idx[i]);
    io::write_file_atomic(ctx.out / (stem + ".pgm"), to_pgm(up));
    CsvWriter grid({"row", "col", "value"});
    for (std::size_t r = 0; r < map.grid.shape[0]; ++r)
      for (std::size_t col = 0; col < map.grid.shape[1]; ++col)
        grid.row({fmt(r), fmt(col), fmt(map.grid.data[r * map.grid.shape[1] + col])});
    grid.write(ctx.out / (stem + ".csv"));
    if (map.zero_gradient) {
      boxes.row({fmt(idx[i]), s.caption, "-1", "-1", "-1", "-1", "0"});
      continue;
    }
    const Box b = box_from_saliency(map.grid, c.ground.mass_fraction);
    double total = 0.0;
    for (double v : map.grid.data) total += v;
    boxes.row({fmt(idx[i]), s.caption, fmt(b.row0), fmt(b.col0), fmt(b.row1), fmt(b.col1),
               fmt(box_mass(map.grid, b) / total)});
  }
  boxes.write(ctx.out / "boxes.csv");
  ctx.log << "pointing accuracy " << fmt(rep.accuracy) << " (chance " << fmt(rep.chance) << ") over " << n
          << " images\n";
}

/// Returns false when any check fails.
inline bool cmd_gradcheck(RunContext& ctx) {
  const auto rows = run_gradcheck_suite(ctx.config.gradcheck.epsilon, ctx.config.gradcheck.tolerance);
  CsvWriter w({"check", "param", "elements", "max_rel_error", "max_abs_error", "pass"});
  bool ok = true;
  for (const auto& r : rows) {
    w.row({r.check, r.param, fmt(r.elements), fmt(r.max_rel_error), fmt(r.max_abs_error), r.pass ? "true" : "false"});
    char line[160];
    std::snprintf(line, sizeof line, "%-28s %-20s %6zu  %.3e  %s\n", r.check.c_str(), r.param.c_str(), r.elements,
                  r.max_rel_error, r.pass ? "ok" : "FAIL");
    ctx.log << line;
    ok = ok && r.pass;
  }
  w.write(ctx.out / "gradcheck.csv");
  ctx.log << (ok ? "all gradient checks passed" : "gradient check FAILED") << "\n";
  return ok;
}

}  // namespace detail

/// Runs one already-parsed command. Returns the process exit code; failures
/// are reported as a single "error: ..." line on `err`.
inline int run(const CliOptions& o, std::ostream& out, std::ostream& err) {
  try {
    const ExperimentConfig c = resolve_config(o);
    const std::filesystem::path dir = claim_out_dir(c, o.force);
    io::write_file_atomic(dir / "config.json", config_to_string(c));
    out << o.command << ": output " << dir.string() << " (config hash " << config_hash(c) << ")\n";
    detail::print_seed_info(out, c.seed, detail::command_streams(o.command, c));
    detail::RunContext ctx{c, dir, out};
    static const std::map<std::string, std::function<void(detail::RunContext&)>> table{
        {"gen-data", detail::cmd_gen_data},         {"train", detail::cmd_train},
        {"eval-retrieval", detail::cmd_eval_retrieval}, {"eval-zeroshot", detail::cmd_eval_zeroshot},
        {"eval-probe", detail::cmd_eval_probe},     {"mi-bench", detail::cmd_mi_bench},
        {"edit-concept", detail::cmd_edit_concept}, {"ground", detail::cmd_ground}};
    if (o.command == "gradcheck") return detail::cmd_gradcheck(ctx) ? 0 : 1;
    const auto it = table.find(o.command);
    if (it == table.end()) throw std::invalid_argument("unknown command '" + o.command + "'");
    it->second(ctx);
    return 0;
  } catch (const std::exception& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    err << "error: " << msg << "\n";
    return 1;
  }
}

/// Parses argv (argv[0] is the program name) and runs the command.
inline int run(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Desk-scale contrastive image-text pretraining experiments", "cliplite"};
  CliOptions o;
  app.add_option("command", o.command, "Command to run")
      ->required()
      ->check(CLI::IsMember(kCommands));
  app.add_option("--config", o.config_path, "JSON experiment config");
  app.add_option("--seed", o.seed, "Root seed (overrides the config)");
  app.add_option("--out", o.out, "Output directory (default runs/<config hash>-<seed>)");
  app.add_flag("--force", o.force, "Allow writing into an existing output directory");
  app.add_option("--set", o.overrides, "Config override key=value (repeatable)")->allow_extra_args(false);
  app.add_option("--checkpoint", o.checkpoint, "Model checkpoint for eval, edit and ground commands");
  std::vector<std::string> args(argv.rbegin(), argv.rend() - (argv.empty() ? 0 : 1));
  try {
    app.parse(args);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  return run(o, out, err);
}

}  // namespace cliplite
