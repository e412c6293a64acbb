// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <sstream>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "mtcm/train.hpp"

using namespace mtcm;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.scene.grid = 12;
  cfg.scene.frames = 4;
  cfg.scene.objects = 2;
  cfg.scene.slots = 3;
  cfg.scene.radius_min = 1;
  cfg.scene.radius_max = 2;
  cfg.scene.appearances = 4;
  cfg.code_dim = 8;
  cfg.channels = 8;
  cfg.heads = 2;
  cfg.l1 = 1;
  cfg.l2 = 1;
  cfg.kernel_size = 3;
  cfg.sigma = 0.02;
  return cfg;
}

std::vector<SyntheticScene> tiny_dataset(const ModelConfig& cfg, std::uint64_t base, int count) {
  return generate_dataset(cfg.scene, base, count);
}

std::vector<double> snapshot(Model& m, const std::string& prefix) {
  ParamRefs refs;
  m.collect(refs);
  std::vector<double> out;
  for (auto& [name, t] : refs) {
    if (name.rfind(prefix, 0) != 0) continue;
    out.insert(out.end(), t->vec().begin(), t->vec().end());
  }
  return out;
}

}  // namespace

TEST_CASE("adam first step moves by about the learning rate") {
  Tensor x = Tensor::scalar_of(5.0);
  AdamState st(1e-3);
  st.init({1});
  std::vector<double> g{0.37};
  adam_apply(st, {&x}, {&g}, {"x"});
  CHECK(std::abs(x.scalar_value() - 5.0 + 1e-3) < 1e-9);

  Tensor y = Tensor::scalar_of(5.0);
  AdamState st2(1e-3);
  st2.init({1});
  std::vector<double> gneg{-2.5};
  adam_apply(st2, {&y}, {&gneg}, {"y"});
  CHECK(std::abs(y.scalar_value() - 5.0 - 1e-3) < 1e-9);
}

TEST_CASE("adam with zero gradients leaves parameters unchanged") {
  Tensor x({3}, {1.0, -2.0, 3.0});
  AdamState st(1e-2);
  st.init({3});
  std::vector<double> zero(3, 0.0);
  for (int i = 0; i < 5; ++i) adam_apply(st, {&x}, {&zero}, {"x"});
  CHECK(x[0] == 1.0);
  CHECK(x[1] == -2.0);
  CHECK(x[2] == 3.0);

  AdamState st3(1e-2);
  st3.init({3});
  adam_apply(st3, {&x}, {nullptr}, {"x"});  // missing gradient counts as zero
  CHECK(x[0] == 1.0);
}

TEST_CASE("adam minimizes a 1-D quadratic") {
  Tensor x = Tensor::scalar_of(4.0);
  AdamState st(1e-2);
  st.init({1});
  for (int i = 0; i < 2000; ++i) {
    std::vector<double> g{2.0 * (x.scalar_value() - 3.0)};
    adam_apply(st, {&x}, {&g}, {"x"});
  }
  CHECK(std::abs(x.scalar_value() - 3.0) < 1e-3);
}

TEST_CASE("adam rejects non-finite gradients by name") {
  Tensor x = Tensor::scalar_of(0.0);
  AdamState st;
  st.init({1});
  std::vector<double> bad{std::nan("")};
  CHECK_THROWS_WITH_AS(adam_apply(st, {&x}, {&bad}, {"proxy.proj"}),
                       doctest::Contains("proxy.proj"), std::runtime_error);
  std::vector<double> inf{1.0 / 0.0};
  CHECK_THROWS_AS(adam_apply(st, {&x}, {&inf}, {"x"}), std::runtime_error);
}

TEST_CASE("validate_plan accepts freeze-ordered plans and rejects the rest") {
  ModelConfig cfg = tiny_config();
  StagePlan good = default_stage_plan(true, true);
  CHECK_NOTHROW(validate_plan(good, cfg));
  CHECK_NOTHROW(validate_plan(joint_plan(true, true), cfg));
  CHECK_NOTHROW(validate_plan(default_stage_plan(false, false), cfg));

  StagePlan empty;
  CHECK_THROWS_AS(validate_plan(empty, cfg), std::invalid_argument);

  StagePlan no_proxy;
  no_proxy.stages.push_back({"aligner", 1, 1e-3});
  CHECK_THROWS_AS(validate_plan(no_proxy, cfg), std::invalid_argument);

  StagePlan reversed;
  reversed.stages = {{"proxy", 1, 1e-3}, {"mce", 1, 1e-3}, {"aligner", 1, 1e-3}};
  CHECK_THROWS_AS(validate_plan(reversed, cfg), std::invalid_argument);

  StagePlan dup;
  dup.stages = {{"proxy", 1, 1e-3}, {"proxy", 1, 1e-3}};
  CHECK_THROWS_AS(validate_plan(dup, cfg), std::invalid_argument);

  StagePlan mixed;
  mixed.stages = {{"joint", 1, 1e-3}, {"proxy", 1, 1e-3}};
  CHECK_THROWS_AS(validate_plan(mixed, cfg), std::invalid_argument);

  StagePlan unknown;
  unknown.stages = {{"proxy", 1, 1e-3}, {"warmup", 1, 1e-3}};
  CHECK_THROWS_AS(validate_plan(unknown, cfg), std::invalid_argument);

  ModelConfig no_aligner = cfg;
  no_aligner.aligner_on = false;
  CHECK_THROWS_AS(validate_plan(default_stage_plan(true, true), no_aligner),
                  std::invalid_argument);

  StagePlan bad_batch = good;
  bad_batch.batch_size = 0;
  CHECK_THROWS_AS(validate_plan(bad_batch, cfg), std::invalid_argument);
}

TEST_CASE("bind_for_stage tracks exactly the stage's parameters") {
  ModelConfig cfg = tiny_config();
  Model model = make_model(cfg, 7);

  auto tracked_names = [&](const std::string& stage) {
    Graph g;
    StageBinding b = bind_for_stage(model, g, stage);
    std::vector<std::string> names;
    for (int idx : b.trainable) names.push_back(b.master[static_cast<std::size_t>(idx)].first);
    return names;
  };

  for (const std::string& name : tracked_names("proxy")) {
    CHECK((name.rfind("proxy.", 0) == 0 || name.rfind("head.", 0) == 0));
  }
  for (const std::string& name : tracked_names("aligner")) {
    CHECK(name.rfind("mtcm.aligner", 0) == 0);
  }
  for (const std::string& name : tracked_names("mce")) {
    CHECK(name.rfind("mtcm.mce", 0) == 0);
  }
  CHECK(tracked_names("joint").size() ==
        tracked_names("proxy").size() + tracked_names("aligner").size() +
            tracked_names("mce").size());
  Graph g;
  CHECK_THROWS_AS(bind_for_stage(model, g, "warmup"), std::invalid_argument);
}

TEST_CASE("frozen parameters have no gradient accumulator at all") {
  ModelConfig cfg = tiny_config();
  Model model = make_model(cfg, 8);
  std::vector<SyntheticScene> scenes = tiny_dataset(cfg, 800, 2);

  Graph g;
  StageBinding b = bind_for_stage(model, g, "aligner");
  SceneForward fwd = forward_scene(b.bound, scenes[0], 99, b.use_aligner, b.use_mce);
  Supervision sup = build_supervision(scenes[0], &fwd.perms);
  LossBreakdown parts = total_loss(fwd.logits, fwd.mask_logits, sup);
  g.backward(parts.total);

  int frozen = 0, trained_with_grad = 0;
  for (std::size_t i = 0; i < b.handles.size(); ++i) {
    const std::string& name = b.master[i].first;
    if (name.rfind("mtcm.aligner", 0) == 0) {
      CHECK(b.handles[i].tracked());
      if (g.grad(b.handles[i]) != nullptr) ++trained_with_grad;
    } else {
      CHECK_FALSE(b.handles[i].tracked());
      CHECK(g.grad(b.handles[i]) == nullptr);
      ++frozen;
    }
  }
  CHECK(frozen > 0);
  CHECK(trained_with_grad > 0);
}

TEST_CASE("later stages leave earlier parameters bit-identical") {
  ModelConfig cfg = tiny_config();
  std::vector<SyntheticScene> scenes = tiny_dataset(cfg, 900, 4);

  Model stage1_only = make_model(cfg, 11);
  StagePlan p1;
  p1.stages = {{"proxy", 2, 1e-3}};
  train_stagewise(stage1_only, scenes, p1, 123);

  Model full = make_model(cfg, 11);
  StagePlan p3;
  p3.stages = {{"proxy", 2, 1e-3}, {"aligner", 2, 1e-3}, {"mce", 2, 1e-3}};
  train_stagewise(full, scenes, p3, 123);

  CHECK(snapshot(full, "proxy.") == snapshot(stage1_only, "proxy."));
  CHECK(snapshot(full, "head.") == snapshot(stage1_only, "head."));

  Model two_stages = make_model(cfg, 11);
  StagePlan p2;
  p2.stages = {{"proxy", 2, 1e-3}, {"aligner", 2, 1e-3}};
  train_stagewise(two_stages, scenes, p2, 123);
  CHECK(snapshot(full, "mtcm.aligner") == snapshot(two_stages, "mtcm.aligner"));

  Model untouched = make_model(cfg, 11);
  CHECK(snapshot(full, "mtcm.mce") != snapshot(untouched, "mtcm.mce"));
}

TEST_CASE("each stage reduces its training loss on a fixed seed") {
  ModelConfig cfg = tiny_config();
  std::vector<SyntheticScene> scenes = tiny_dataset(cfg, 1000, 8);
  Model model = make_model(cfg, 12);
  StagePlan plan;
  plan.stages = {{"proxy", 6, 1e-3}, {"aligner", 6, 1e-3}, {"mce", 6, 1e-3}};
  std::vector<EpochLog> history = train_stagewise(model, scenes, plan, 321);
  REQUIRE(history.size() == 18);
  for (int stage = 0; stage < 3; ++stage) {
    const EpochLog& first = history[static_cast<std::size_t>(stage * 6)];
    const EpochLog& last = history[static_cast<std::size_t>(stage * 6 + 5)];
    CHECK(last.loss < first.loss);
  }
}

TEST_CASE("joint training yields a different checkpoint than staged training") {
  ModelConfig cfg = tiny_config();
  std::vector<SyntheticScene> scenes = tiny_dataset(cfg, 1100, 4);

  Model staged = make_model(cfg, 13);
  StagePlan sp = default_stage_plan(true, true, 2);
  train_stagewise(staged, scenes, sp, 55);

  Model joint = make_model(cfg, 13);
  StagePlan jp = joint_plan(true, true, 6);
  train_stagewise(joint, scenes, jp, 55);

  CHECK(snapshot(staged, "proxy.") != snapshot(joint, "proxy."));
  CHECK(snapshot(staged, "mtcm.") != snapshot(joint, "mtcm."));
}

TEST_CASE("training is reproducible and logs one JSON object per epoch") {
  ModelConfig cfg = tiny_config();
  std::vector<SyntheticScene> scenes = tiny_dataset(cfg, 1200, 4);

  Model a = make_model(cfg, 14);
  Model b = make_model(cfg, 14);
  StagePlan plan = default_stage_plan(true, true, 2);
  std::ostringstream log_a, log_b;
  train_stagewise(a, scenes, plan, 77, &log_a);
  train_stagewise(b, scenes, plan, 77, &log_b);
  CHECK(snapshot(a, "") == snapshot(b, ""));
  CHECK(log_a.str() == log_b.str());

  std::istringstream lines(log_a.str());
  std::string line;
  int count = 0;
  while (std::getline(lines, line)) {
    nlohmann::json j = nlohmann::json::parse(line);
    CHECK(j.contains("stage"));
    CHECK(j.contains("epoch"));
    CHECK(j.contains("loss"));
    CHECK(j.contains("ce"));
    CHECK(j.contains("bce"));
    CHECK(j.contains("dice"));
    ++count;
  }
  CHECK(count == 6);
}

TEST_CASE("forward_scene gradients reach every module end to end") {
  ModelConfig cfg = tiny_config();
  cfg.sigma = 0.0;
  Model model = make_model(cfg, 15);
  SyntheticScene scene = generate_scene(cfg.scene, 1500);

  auto f = [&](Graph& g, const std::vector<Tensor>& in) {
    Model bound;
    bound.cfg = model.cfg;
    bound.proxy = model.proxy;
    bound.proxy.proj = in[0];
    bound.mtcm = model.mtcm;
    bound.mtcm.aligner[0].rca.wq[0] = in[1];
    bound.mtcm.mce[0].conv.kernel = in[2];
    bound.head = model.head;
    bound.head.score_w = in[3];
    bound.head.mask_w1 = in[4];
    (void)g;
    SceneForward fwd = forward_scene(bound, scene, 99, true, true);
    Supervision sup = build_supervision(scene, &fwd.perms);
    return total_loss(fwd.logits, fwd.mask_logits, sup).total;
  };
  const double err = finite_diff_check_multi(
      f,
      {model.proxy.proj, model.mtcm.aligner[0].rca.wq[0], model.mtcm.mce[0].conv.kernel,
       model.head.score_w, model.head.mask_w1},
      1e-5);
  CHECK(err < 1e-4);
}

TEST_CASE("mix_seed separates streams") {
  CHECK(mix_seed(1, 2, 3) == mix_seed(1, 2, 3));
  CHECK(mix_seed(1, 2, 3) != mix_seed(1, 3, 2));
  CHECK(mix_seed(1, 2) != mix_seed(2, 2));
  CHECK(mix_seed(1, 0) != mix_seed(1, 1));
}
