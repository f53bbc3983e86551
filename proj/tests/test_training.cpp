#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "octloc/common.hpp"
#include "octloc/geometry.hpp"
#include "octloc/hotformer.hpp"
#include "octloc/ops.hpp"
#include "octloc/training.hpp"

using namespace octloc;

namespace {

Pose pose_at(double x, double y) {
  Pose p;
  p.t = {x, y, 0.0};
  return p;
}

ModelConfig tiny_model() {
  ModelConfig cfg;
  cfg.depth = 4;
  cfg.levels = 2;
  cfg.blocks = 1;
  cfg.channels = 16;
  cfg.window = 4;
  cfg.heads = 2;
  cfg.stem_blocks = 1;
  cfg.pooled_tokens = {4, 2};
  cfg.mixer_tokens = 4;
  cfg.mixer_channels = 4;
  cfg.descriptor_dim = 16;
  cfg.coord_mode = CoordMode::cartesian;
  return cfg;
}

BoundingRegion ground_region() {
  BoundingRegion r;
  r.mode = CoordMode::cartesian;
  r.lo = {-30.0, -30.0, -2.0};
  r.hi = {30.0, 30.0, 18.0};
  return r;
}

WorldConfig tiny_world() {
  WorldConfig w;
  w.locations = 4;
  w.views_per_location = 2;
  w.grid_cols = 2;
  w.spacing = 80.0;
  w.view_offset = 0.12;
  w.landmarks = 4;
  w.landmark_spread = 12.0;
  w.ring_radii = {5.0};
  w.ring_points = {48};
  w.points_per_landmark = 32;
  w.noise_sigma = 0.02;
  return w;
}

TrainConfig quick_training(uint32_t steps) {
  TrainConfig t;
  t.steps = steps;
  t.eval_interval = 0;  // final evaluation only
  t.augment.rotate_z = true;
  t.augment.rotate_max_deg = 1.0;
  t.augment.translate_max = 0.06;
  t.augment.jitter_sigma = 0.02;
  return t;
}

PointCloud random_cloud(int n, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  PointCloud pc;
  for (int i = 0; i < n; ++i) pc.points.push_back({u(rng), u(rng), u(rng)});
  return pc;
}

Tensor unit_vec(std::vector<double> v) {
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  for (double& x : v) x /= n;
  const std::size_t len = v.size();
  return Tensor::from({len}, std::move(v));
}

}  // namespace

TEST_CASE("mining: two nearby submaps have no negatives, so no tuples") {
  MiningResult r = mine_tuples({pose_at(0, 0), pose_at(5, 0)}, 15.0, 60.0);
  CHECK(r.tuples.empty());
  CHECK(r.skipped == 2);
}

TEST_CASE("mining: line of three at 0, 10, 100 metres") {
  MiningResult r =
      mine_tuples({pose_at(0, 0), pose_at(10, 0), pose_at(100, 0)}, 15.0, 60.0);
  REQUIRE(r.tuples.size() == 2);
  CHECK(r.skipped == 1);  // the far pose has no positive

  CHECK(r.tuples[0].anchor == 0);
  CHECK(r.tuples[0].positives == std::vector<std::size_t>{1});
  CHECK(r.tuples[0].negatives == std::vector<std::size_t>{2});
  CHECK(r.tuples[1].anchor == 1);
  CHECK(r.tuples[1].positives == std::vector<std::size_t>{0});
  CHECK(r.tuples[1].negatives == std::vector<std::size_t>{2});
}

TEST_CASE("mining thresholds are strict") {
  // Exactly 15 m is not a positive; exactly 60 m is not a negative.
  MiningResult r =
      mine_tuples({pose_at(0, 0), pose_at(15, 0), pose_at(60, 0)}, 15.0, 60.0);
  CHECK(r.tuples.empty());
  CHECK(r.skipped == 3);

  // Nudge both inside the thresholds and the first anchor qualifies.
  r = mine_tuples({pose_at(0, 0), pose_at(14.99, 0), pose_at(60.01, 0)}, 15.0,
                  60.0);
  REQUIRE(r.tuples.size() == 1);
  CHECK(r.tuples[0].anchor == 0);
  CHECK(r.skipped == 2);
}

TEST_CASE("mining only sees horizontal distance") {
  // 100 m apart vertically, 5 m horizontally: still a positive pair.
  Pose a = pose_at(0, 0);
  Pose b = pose_at(5, 0);
  b.t[2] = 100.0;
  Pose far = pose_at(200, 0);
  MiningResult r = mine_tuples({a, b, far}, 15.0, 60.0);
  REQUIRE(r.tuples.size() == 2);
  CHECK(r.tuples[0].positives == std::vector<std::size_t>{1});
}

TEST_CASE("mining matches a brute-force oracle on 100 random poses") {
  std::mt19937_64 rng(77);
  std::uniform_real_distribution<double> u(0.0, 200.0);
  std::vector<Pose> poses;
  for (int i = 0; i < 100; ++i) poses.push_back(pose_at(u(rng), u(rng)));

  const double pos_r = 15.0, neg_r = 60.0;
  MiningResult r = mine_tuples(poses, pos_r, neg_r);

  std::vector<TupleSpec> oracle;
  std::size_t skipped = 0;
  for (std::size_t a = 0; a < poses.size(); ++a) {
    TupleSpec t;
    t.anchor = a;
    for (std::size_t b = 0; b < poses.size(); ++b) {
      if (a == b) continue;
      const double d = std::hypot(poses[a].t[0] - poses[b].t[0],
                                  poses[a].t[1] - poses[b].t[1]);
      if (d < pos_r) t.positives.push_back(b);
      if (d > neg_r) t.negatives.push_back(b);
    }
    if (t.positives.empty() || t.negatives.empty())
      ++skipped;
    else
      oracle.push_back(t);
  }
  CHECK(r.skipped == skipped);
  REQUIRE(r.tuples.size() == oracle.size());
  for (std::size_t i = 0; i < oracle.size(); ++i) {
    CHECK(r.tuples[i].anchor == oracle[i].anchor);
    CHECK(r.tuples[i].positives == oracle[i].positives);
    CHECK(r.tuples[i].negatives == oracle[i].negatives);
  }
}

TEST_CASE("triplet loss pinned cases") {
  Tensor a = unit_vec({1, 0, 0, 0});
  Tensor b = unit_vec({0, 1, 0, 0});

  // Positive identical, negative at distance sqrt(2), margin 0.5: satisfied.
  CHECK(triplet_loss(a, a, b, 0.5).scalar() == 0.0);

  // Worst case: negative identical to the anchor.
  const double d_ap = std::sqrt(2.0);
  CHECK(triplet_loss(a, b, a, 0.3).scalar() ==
        doctest::Approx(d_ap + 0.3).epsilon(1e-12));

  // Degenerate: everything equal leaves exactly the margin.
  CHECK(triplet_loss(a, a, a, 0.3).scalar() ==
        doctest::Approx(0.3).epsilon(1e-12));
}

TEST_CASE("triplet loss gradient away from the hinge") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> pv(6), nv(6);
  for (double& x : pv) x = u(rng);
  for (double& x : nv) x = u(rng);
  Tensor p = Tensor::from({6}, pv);
  Tensor n = Tensor::from({6}, nv);
  // Large margin keeps the hinge active for any anchor in range.
  auto f = [&](const Tensor& a) { return triplet_loss(a, p, n, 5.0); };
  std::vector<double> av(6);
  for (double& x : av) x = u(rng);
  CHECK(grad_check(f, Tensor::param({6}, av, "a")) < 1e-6);
}

TEST_CASE("adam: one hand-checked step, with and without decay") {
  AdamConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.0;

  ModelParams params;
  params.tensors.emplace("w", Tensor::param({1}, {1.0}, "w"));
  Adam opt(params, cfg);

  Tensor& w = params.tensors.at("w");
  w.node()->ensure_grad();
  w.node()->grad[0] = 1.0;
  opt.step();
  CHECK(opt.steps_taken() == 1);
  // Bias-corrected mhat = vhat = 1, so the update is lr / (1 + eps).
  const double expect = 1.0 - 0.1 / (1.0 + 1e-8);
  CHECK(w.values()[0] == doctest::Approx(expect).epsilon(1e-12));
  CHECK(w.grad().empty());  // consumed by the step

  // Same setup with decoupled decay on a matrix-group parameter.
  ModelParams pd;
  pd.tensors.emplace("w", Tensor::param({1}, {1.0}, "w"));
  AdamConfig cfg2 = cfg;
  cfg2.weight_decay = 0.5;
  Adam opt2(pd, cfg2);
  Tensor& w2 = pd.tensors.at("w");
  w2.node()->ensure_grad();
  w2.node()->grad[0] = 1.0;
  opt2.step();
  // Decay acts on the freshly updated weight.
  CHECK(w2.values()[0] ==
        doctest::Approx(expect * (1.0 - 0.1 * 0.5)).epsilon(1e-10));
}

TEST_CASE("adam: no_decay parameters skip the decay term") {
  AdamConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.5;

  ModelParams params;
  params.tensors.emplace("mat", Tensor::param({1}, {1.0}, "mat"));
  params.tensors.emplace("vec", Tensor::param({1}, {1.0}, "vec"));
  params.no_decay.insert("vec");
  Adam opt(params, cfg);
  for (const char* name : {"mat", "vec"}) {
    Tensor& t = params.tensors.at(name);
    t.node()->ensure_grad();
    t.node()->grad[0] = 1.0;
  }
  opt.step();
  const double adam_only = 1.0 - 0.1 / (1.0 + 1e-8);
  CHECK(params.tensors.at("vec").values()[0] ==
        doctest::Approx(adam_only).epsilon(1e-12));
  CHECK(params.tensors.at("mat").values()[0] ==
        doctest::Approx(adam_only * 0.95).epsilon(1e-10));
}

TEST_CASE("adam: zero lr is a bitwise no-op") {
  ModelConfig mc = tiny_model();
  ModelParams params = ModelParams::init(mc, 3);
  std::map<std::string, std::vector<double>> before;
  for (const auto& [name, t] : params.tensors) before[name] = t.values();

  // Accumulate real gradients through a forward pass.
  BoundingRegion region;
  region.mode = CoordMode::cartesian;
  region.lo = {0.0, 0.0, 0.0};
  region.hi = {1.0, 1.0, 1.0};
  EmbedResult res = forward(random_cloud(300, 4), region, mc, params);
  backward(sum_all(mul(res.descriptor, res.descriptor)));

  AdamConfig cfg;
  cfg.lr = 0.0;
  cfg.weight_decay = 1e-2;
  Adam opt(params, cfg);
  opt.step();
  opt.step();
  for (const auto& [name, t] : params.tensors) CHECK(t.values() == before[name]);
}

TEST_CASE("adam: a small step descends the loss on most random starts") {
  ModelConfig mc = tiny_model();
  BoundingRegion region;
  region.mode = CoordMode::cartesian;
  region.lo = {0.0, 0.0, 0.0};
  region.hi = {1.0, 1.0, 1.0};
  PointCloud anchor = random_cloud(250, 10);
  PointCloud positive = random_cloud(250, 11);
  PointCloud negative = random_cloud(250, 12);

  int improved = 0;
  for (uint64_t s = 0; s < 20; ++s) {
    ModelParams params = ModelParams::init(mc, 1000 + s);
    auto loss_of = [&]() {
      Tensor da = forward(anchor, region, mc, params).descriptor;
      Tensor dp = forward(positive, region, mc, params).descriptor;
      Tensor dn = forward(negative, region, mc, params).descriptor;
      // Margin 1.0 keeps the hinge active at init where d_ap is close to
      // d_an, so the gradient is informative.
      return triplet_loss(da, dp, dn, 1.0);
    };
    Tensor l0 = loss_of();
    backward(l0);
    AdamConfig cfg;
    cfg.lr = 1e-4;
    cfg.weight_decay = 0.0;
    Adam opt(params, cfg);
    opt.step();
    if (loss_of().scalar() < l0.scalar()) ++improved;
  }
  CHECK(improved >= 18);
}

TEST_CASE("world layout: grid poses and sibling views") {
  WorldConfig wc = tiny_world();
  SyntheticWorld world = make_world(wc, 9);
  REQUIRE(world.poses.size() == 8);
  REQUIRE(world.scenes.size() == 4);

  // View 0 of each location sits exactly on the grid.
  CHECK(world.poses[0].t[0] == 0.0);
  CHECK(world.poses[0].t[1] == 0.0);
  CHECK(world.poses[2].t[0] == 80.0);  // location 1, 2 columns
  CHECK(world.poses[2].t[1] == 0.0);
  CHECK(world.poses[4].t[1] == 80.0);  // location 2 wraps to the next row

  for (std::size_t v = 0; v < world.poses.size(); ++v) {
    const std::size_t loc = world.location_of(v);
    CHECK(loc == v / 2);
    const Pose& base = world.poses[loc * 2];
    const double d = pose_horizontal_distance(base, world.poses[v]);
    CHECK(d <= 2.0 * wc.view_offset + 1e-12);
  }

  // Same seed reproduces the world; another seed moves the landmarks.
  SyntheticWorld again = make_world(wc, 9);
  CHECK(again.poses[3].t == world.poses[3].t);
  REQUIRE(again.scenes[1].landmarks.size() ==
          world.scenes[1].landmarks.size());
  CHECK(again.scenes[1].landmarks[0].cx == world.scenes[1].landmarks[0].cx);
  SyntheticWorld other = make_world(wc, 10);
  CHECK(other.scenes[1].landmarks[0].cx != world.scenes[1].landmarks[0].cx);
}

TEST_CASE("world mining: siblings are positives, everyone else negative") {
  WorldConfig wc = tiny_world();
  SyntheticWorld world = make_world(wc, 13);
  MiningResult r = mine_tuples(world.poses, 15.0, 60.0);
  CHECK(r.skipped == 0);
  REQUIRE(r.tuples.size() == world.poses.size());
  for (const TupleSpec& t : r.tuples) {
    REQUIRE(t.positives.size() == 1);
    CHECK(world.location_of(t.positives[0]) == world.location_of(t.anchor));
    CHECK(t.negatives.size() == 6);  // both views of the 3 other locations
    for (std::size_t n : t.negatives)
      CHECK(world.location_of(n) != world.location_of(t.anchor));
  }
}

TEST_CASE("render_view tags the cloud with its view identity") {
  WorldConfig wc = tiny_world();
  SyntheticWorld world = make_world(wc, 17);
  PointCloud pc = render_view(world, 3, SensorProfile::ground);
  CHECK(pc.source_id == "loc1v1");
  CHECK(pc.pose.t == world.poses[3].t);
  CHECK_FALSE(pc.points.empty());

  PointCloud again = render_view(world, 3, SensorProfile::ground);
  CHECK(again.points.size() == pc.points.size());
  CHECK(again.points[0].x == pc.points[0].x);

  CHECK_THROWS_AS(render_view(world, 99, SensorProfile::ground), DataError);
}

TEST_CASE("config validation") {
  WorldConfig wc = tiny_world();
  wc.views_per_location = 1;
  CHECK_THROWS_AS(wc.validate(), ConfigError);
  wc = tiny_world();
  wc.grid_cols = 0;
  CHECK_THROWS_AS(wc.validate(), ConfigError);
  wc = tiny_world();
  wc.ring_points = {48, 48};
  CHECK_THROWS_AS(wc.validate(), ConfigError);

  TrainConfig tc = quick_training(5);
  CHECK_NOTHROW(tc.validate());
  tc.steps = 0;
  CHECK_THROWS_AS(tc.validate(), ConfigError);
  tc = quick_training(5);
  tc.positive_radius = 70.0;  // above the negative radius
  CHECK_THROWS_AS(tc.validate(), ConfigError);
  tc = quick_training(5);
  tc.lr_decay_factor = 0.0;
  CHECK_THROWS_AS(tc.validate(), ConfigError);
}

TEST_CASE("train_synthetic: deterministic loss curve and metrics log") {
  ModelConfig mc = tiny_model();
  WorldConfig wc = tiny_world();
  TrainConfig tc = quick_training(4);
  tc.eval_interval = 2;
  const auto metrics =
      std::filesystem::temp_directory_path() / "octloc_train_metrics.jsonl";
  tc.metrics_path = metrics.string();

  TrainResult a = train_synthetic(mc, ground_region(), wc, tc, 23);
  REQUIRE(a.history.size() >= 4);
  for (const StepRecord& rec : a.history) {
    CHECK(std::isfinite(rec.loss));
    CHECK(rec.loss >= 0.0);
  }
  CHECK(a.final_recall_at_1 >= 0.0);
  CHECK(a.final_recall_at_1 <= 1.0);
  CHECK(a.final_mrr > 0.0);
  CHECK(a.final_mrr <= 1.0);

  tc.metrics_path.clear();
  TrainResult b = train_synthetic(mc, ground_region(), wc, tc, 23);
  REQUIRE(b.history.size() == a.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i)
    CHECK(a.history[i].loss == b.history[i].loss);
  CHECK(a.final_recall_at_1 == b.final_recall_at_1);

  // The metrics file holds one JSON object per line with the documented keys.
  std::ifstream in(metrics);
  REQUIRE(in.good());
  std::string line;
  std::size_t step_lines = 0, eval_lines = 0;
  while (std::getline(in, line)) {
    const nlohmann::json j = nlohmann::json::parse(line);
    if (j.contains("loss")) {
      CHECK(j.contains("step"));
      CHECK(j.contains("lr"));
      ++step_lines;
    } else {
      CHECK(j.contains("ar1"));
      CHECK(j.contains("mrr"));
      ++eval_lines;
    }
  }
  CHECK(step_lines == 4);
  CHECK(eval_lines >= 2);
  std::filesystem::remove(metrics);
}

TEST_CASE("train_synthetic: zero lr leaves the parameters untouched") {
  ModelConfig mc = tiny_model();
  WorldConfig wc = tiny_world();
  TrainConfig tc = quick_training(3);
  tc.adam.lr = 0.0;

  TrainResult three = train_synthetic(mc, ground_region(), wc, tc, 31);
  tc.steps = 1;
  TrainResult one = train_synthetic(mc, ground_region(), wc, tc, 31);

  // Had any step moved a weight, the two runs would disagree.
  REQUIRE(three.params.tensors.size() == one.params.tensors.size());
  for (const auto& [name, t] : three.params.tensors)
    CHECK(t.values() == one.params.tensors.at(name).values());
}

TEST_CASE("train_synthetic: lr decay shows up in the logged rate") {
  ModelConfig mc = tiny_model();
  WorldConfig wc = tiny_world();
  TrainConfig tc = quick_training(4);
  tc.adam.lr = 1e-3;
  tc.lr_decay_step = 3;
  tc.lr_decay_factor = 0.5;
  const auto metrics =
      std::filesystem::temp_directory_path() / "octloc_decay_metrics.jsonl";
  tc.metrics_path = metrics.string();

  train_synthetic(mc, ground_region(), wc, tc, 37);
  std::ifstream in(metrics);
  REQUIRE(in.good());
  std::string line;
  std::vector<double> lrs;
  while (std::getline(in, line)) {
    const nlohmann::json j = nlohmann::json::parse(line);
    if (j.contains("lr")) lrs.push_back(j["lr"].get<double>());
  }
  REQUIRE(lrs.size() == 4);
  CHECK(lrs[0] == 1e-3);
  CHECK(lrs[1] == 1e-3);
  CHECK(lrs[2] == 5e-4);  // decayed at step 3 (1-based)
  CHECK(lrs[3] == 5e-4);
  std::filesystem::remove(metrics);
}
