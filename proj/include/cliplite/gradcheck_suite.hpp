#pragma once

// The gradient-check battery behind the `gradcheck` command: every primitive
// op on small random inputs, then encoder + projection + bound compositions.
// Each op output is reduced to a scalar through a fixed random weighting so
// no gradient component cancels by symmetry.

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "cliplite/autodiff.hpp"
#include "cliplite/gradcheck.hpp"
#include "cliplite/mi_bench.hpp"
#include "cliplite/mi_estimators.hpp"
#include "cliplite/model.hpp"
#include "cliplite/rng.hpp"
#include "cliplite/synth_data.hpp"
#include "cliplite/training.hpp"

namespace cliplite {

struct GradCheckCase {
  std::string name;
  std::function<GradCheckReport(double eps, double tol)> run;
};

namespace detail {

inline Tensor random_tensor(Shape shape, std::uint64_t seed, const std::string& stream, double lo = -1.0,
                            double hi = 1.0) {
  Tensor t(std::move(shape));
  Rng rng(seed, stream);
  for (double& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

/// sum(out * W) for a fixed random W shaped like `out`.
inline Var weighted_sum(const Var& out, const std::string& name) {
  Tape& tape = out.tape();
  return sum(out * tape.constant(random_tensor(out.shape(), 7, "gradcheck/weights/" + name), "w"));
}

/// Owns the input tensors of one op case.
struct TensorCase {
  std::vector<std::unique_ptr<Tensor>> tensors;
  std::vector<NamedParam> params;

  Tensor& add(const std::string& name, Tensor t) {
    tensors.push_back(std::make_unique<Tensor>(std::move(t)));
    params.push_back({name, tensors.back().get(), true});
    return *tensors.back();
  }
};

using OpFn = std::function<Var(Tape&, std::vector<Var>&)>;

inline GradCheckCase op_case(std::string name, std::vector<std::pair<Shape, std::pair<double, double>>> inputs,
                             OpFn fn) {
  return {name, [=](double eps, double tol) {
            auto tc = std::make_shared<TensorCase>();
            for (std::size_t i = 0; i < inputs.size(); ++i) {
              tc->add("in" + std::to_string(i),
                      random_tensor(inputs[i].first, 11, "gradcheck/" + name + "/" + std::to_string(i),
                                    inputs[i].second.first, inputs[i].second.second));
            }
            auto forward = [tc, fn, name](Tape& tape) {
              std::vector<Var> vars;
              for (auto& p : tc->params) vars.push_back(tape.param(*p.tensor, p.name));
              return weighted_sum(fn(tape, vars), name);
            };
            return check_gradients(forward, tc->params, eps, tol, name);
          }};
}

inline std::pair<double, double> range(double lo, double hi) { return {lo, hi}; }

}  // namespace detail

inline std::vector<GradCheckCase> primitive_gradcheck_cases() {
  using detail::op_case;
  using detail::range;
  const auto sym = range(-1.0, 1.0);
  const auto pos = range(0.5, 2.0);
  std::vector<GradCheckCase> c;
  c.push_back(op_case("add", {{{3, 4}, sym}, {{3, 4}, sym}}, [](Tape&, auto& v) { return v[0] + v[1]; }));
  c.push_back(op_case("add_broadcast_scalar", {{{3, 4}, sym}, {{}, sym}},
                      [](Tape&, auto& v) { return v[0] + v[1]; }));
  c.push_back(op_case("sub", {{{3, 4}, sym}, {{3, 4}, sym}}, [](Tape&, auto& v) { return v[0] - v[1]; }));
  c.push_back(op_case("mul", {{{3, 4}, sym}, {{3, 4}, sym}}, [](Tape&, auto& v) { return v[0] * v[1]; }));
  c.push_back(op_case("mul_broadcast_scalar", {{{3, 4}, sym}, {{}, sym}},
                      [](Tape&, auto& v) { return v[0] * v[1]; }));
  c.push_back(op_case("scale", {{{5}, sym}}, [](Tape&, auto& v) { return scale(v[0], -1.7); }));
  c.push_back(op_case("negate", {{{5}, sym}}, [](Tape&, auto& v) { return negate(v[0]); }));
  c.push_back(op_case("relu", {{{4, 5}, sym}}, [](Tape&, auto& v) { return relu(v[0]); }));
  c.push_back(op_case("softplus", {{{4, 5}, range(-4.0, 4.0)}}, [](Tape&, auto& v) { return softplus(v[0]); }));
  c.push_back(op_case("exp", {{{4, 5}, sym}}, [](Tape&, auto& v) { return exp(v[0]); }));
  c.push_back(op_case("log", {{{4, 5}, pos}}, [](Tape&, auto& v) { return log(v[0]); }));
  c.push_back(op_case("linear", {{{3, 4}, sym}, {{4, 5}, sym}, {{5}, sym}},
                      [](Tape&, auto& v) { return linear(v[0], v[1], v[2]); }));
  c.push_back(op_case("matmul", {{{3, 4}, sym}, {{4, 2}, sym}}, [](Tape&, auto& v) { return matmul(v[0], v[1]); }));
  c.push_back(
      op_case("matmul_nt", {{{3, 4}, sym}, {{5, 4}, sym}}, [](Tape&, auto& v) { return matmul_nt(v[0], v[1]); }));
  c.push_back(op_case("conv2d_stride1_pad1", {{{2, 3, 5, 5}, sym}, {{4, 3, 3, 3}, sym}},
                      [](Tape&, auto& v) { return conv2d(v[0], v[1], 1, 1); }));
  c.push_back(op_case("conv2d_stride2_pad1", {{{2, 2, 6, 6}, sym}, {{3, 2, 3, 3}, sym}},
                      [](Tape&, auto& v) { return conv2d(v[0], v[1], 2, 1); }));
  c.push_back(op_case("conv2d_stride1_pad0", {{{1, 2, 4, 4}, sym}, {{2, 2, 3, 3}, sym}},
                      [](Tape&, auto& v) { return conv2d(v[0], v[1], 1, 0); }));
  c.push_back(op_case("channel_bias", {{{2, 3, 2, 2}, sym}, {{3}, sym}},
                      [](Tape&, auto& v) { return channel_bias(v[0], v[1]); }));
  c.push_back(op_case("sum_all", {{{3, 4}, sym}}, [](Tape&, auto& v) { return sum(v[0]); }));
  c.push_back(op_case("sum_axis1", {{{3, 4}, sym}}, [](Tape&, auto& v) { return sum(v[0], {1}); }));
  c.push_back(op_case("mean_axis0", {{{3, 4}, sym}}, [](Tape&, auto& v) { return mean(v[0], {0}); }));
  c.push_back(op_case("global_avg_pool", {{{2, 3, 4, 4}, sym}}, [](Tape&, auto& v) { return global_avg_pool(v[0]); }));
  c.push_back(op_case("log_sum_exp_all", {{{3, 4}, range(-3.0, 3.0)}}, [](Tape&, auto& v) { return log_sum_exp(v[0]); }));
  c.push_back(op_case("log_sum_exp_axis0", {{{3, 4}, range(-3.0, 3.0)}},
                      [](Tape&, auto& v) { return log_sum_exp(v[0], {0}); }));
  c.push_back(op_case("log_sum_exp_axis1", {{{3, 4}, range(-3.0, 3.0)}},
                      [](Tape&, auto& v) { return log_sum_exp(v[0], {1}); }));
  c.push_back(op_case("rowdot", {{{3, 4}, sym}, {{3, 4}, sym}}, [](Tape&, auto& v) { return rowdot(v[0], v[1]); }));
  c.push_back(op_case("gather_rows", {{{4, 3}, sym}},
                      [](Tape&, auto& v) { return gather_rows(v[0], {1, 2, 3, 0, 1}); }));
  c.push_back(op_case("gather_flat", {{{3, 3}, sym}},
                      [](Tape&, auto& v) { return gather_flat(v[0], {1, 2, 3, 5, 6, 7, 1}); }));
  c.push_back(op_case("diagonal", {{{4, 4}, sym}}, [](Tape&, auto& v) { return diagonal(v[0]); }));
  c.push_back(op_case("embed_mean", {{{6, 3}, sym}}, [](Tape&, auto& v) {
    return embed_mean(v[0], {{1, 2, 0, 0}, {3, 3, 4, 5}, {5, 0, 0, 0}}, 0);
  }));
  c.push_back(op_case("reshape", {{{2, 6}, sym}}, [](Tape&, auto& v) { return reshape(v[0], {3, 4}); }));
  c.push_back(op_case("normalize_rows", {{{3, 4}, sym}}, [](Tape&, auto& v) { return normalize_rows(v[0]); }));
  c.push_back(op_case("jsd_bound", {{{5}, range(-3.0, 3.0)}, {{7}, range(-3.0, 3.0)}},
                      [](Tape&, auto& v) { return jsd_bound({v[0], v[1]}); }));
  c.push_back(op_case("dv_bound", {{{5}, range(-3.0, 3.0)}, {{7}, range(-3.0, 3.0)}},
                      [](Tape&, auto& v) { return dv_bound({v[0], v[1]}); }));
  c.push_back(op_case("infonce_bound", {{{4, 4}, range(-3.0, 3.0)}, {{}, pos}},
                      [](Tape&, auto& v) { return infonce_bound(v[0], v[1]); }));
  return c;
}

namespace detail {

/// A small corpus batch and a model whose biases are perturbed away from zero.
struct CompositeFixture {
  ClipModel model;
  PairBatch batch;
};

inline std::shared_ptr<CompositeFixture> composite_fixture(std::size_t n = 3) {
  auto f = std::make_shared<CompositeFixture>();
  f->model = init_clip_model(5, 6, 5);
  Rng rng(5, "gradcheck/perturb");
  for (auto& p : f->model.parameters(true))
    for (double& v : p.tensor->data) v += 0.05 * rng.uniform(-1.0, 1.0);
  f->model.logit_scale.data[0] = 0.5;
  ShapesCorpusSpec spec;
  spec.n = n;
  spec.seed = 3;
  const ShapesCorpus corpus = gen_captioned_shapes(spec);
  f->batch = make_batch(corpus, all_indices(n));
  return f;
}

/// Checks the model parameters whose names start with one of `prefixes`.
inline GradCheckCase model_case(std::string name, std::vector<std::string> prefixes,
                                std::function<Var(Tape&, CompositeFixture&)> fn) {
  return {name, [=](double eps, double tol) {
            auto f = composite_fixture();
            std::vector<NamedParam> params;
            for (auto& p : f->model.parameters(true))
              for (const auto& prefix : prefixes)
                if (p.name.starts_with(prefix)) {
                  params.push_back(p);
                  break;
                }
            auto forward = [f, fn](Tape& tape) { return fn(tape, *f); };
            return check_gradients(forward, params, eps, tol, name);
          }};
}

}  // namespace detail

inline std::vector<GradCheckCase> composite_gradcheck_cases() {
  using detail::CompositeFixture;
  using detail::model_case;
  std::vector<GradCheckCase> c;
  c.push_back(model_case("image_encoder+projection", {"image/", "image_proj/"}, [](Tape& tape, CompositeFixture& f) {
    return detail::weighted_sum(project_images(tape, f.model, f.batch.images), "image_path");
  }));
  c.push_back(model_case("text_encoder+projection", {"text/", "text_proj/"}, [](Tape& tape, CompositeFixture& f) {
    return detail::weighted_sum(project_texts(tape, f.model, f.batch.captions), "text_path");
  }));
  for (Objective o : {Objective::jsd_single_neg, Objective::infonce_all_pairs, Objective::dv_single_neg}) {
    std::vector<std::string> prefixes{"image", "text"};
    if (o == Objective::infonce_all_pairs) prefixes.push_back("logit_scale");
    c.push_back(model_case("loss/" + std::string(objective_name(o)), prefixes, [o](Tape& tape, CompositeFixture& f) {
      return contrastive_loss(tape, f.model, f.batch, o);
    }));
  }
  for (BoundKind k : {BoundKind::jsd, BoundKind::infonce, BoundKind::dv}) {
    const std::string name = "critic_bound/" + std::string(bound_name(k));
    c.push_back({name, [k, name](double eps, double tol) {
                   auto critic = std::make_shared<Critic>(init_critic(9, 2, 4));
                   const auto data = std::make_shared<GaussianPairs>(gen_gaussian_pairs({2, 0.5, 4, 9}));
                   auto params = critic->parameters();
                   auto forward = [critic, data, k](Tape& tape) {
                     return critic_bound(tape, *critic, k, data->y, data->z);
                   };
                   return check_gradients(forward, params, eps, tol, name);
                 }});
  }
  return c;
}

inline std::vector<GradCheckCase> all_gradcheck_cases() {
  auto c = primitive_gradcheck_cases();
  for (auto& x : composite_gradcheck_cases()) c.push_back(std::move(x));
  return c;
}

struct GradCheckRow {
  std::string check;
  std::string param;
  std::size_t elements = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  bool pass = true;
};

inline std::vector<GradCheckRow> run_gradcheck_suite(double eps = 1e-5, double tol = 1e-4) {
  std::vector<GradCheckRow> rows;
  for (const auto& c : all_gradcheck_cases()) {
    const GradCheckReport r = c.run(eps, tol);
    for (const auto& e : r.entries) rows.push_back({c.name, e.name, e.elements, e.max_rel_error, e.max_abs_error, e.pass});
  }
  return rows;
}

}  // namespace cliplite
