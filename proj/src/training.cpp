#include "octloc/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include "octloc/retrieval.hpp"

namespace octloc {

MiningResult mine_tuples(const std::vector<Pose>& poses, double pos_radius,
                         double neg_radius) {
  if (poses.size() < 2) throw DataError("mine_tuples: need at least 2 poses");
  if (!(pos_radius < neg_radius))
    throw ConfigError("mine_tuples: positive radius must be below negative");
  MiningResult out;
  for (std::size_t a = 0; a < poses.size(); ++a) {
    TupleSpec t;
    t.anchor = a;
    for (std::size_t b = 0; b < poses.size(); ++b) {
      if (b == a) continue;
      const double d = pose_horizontal_distance(poses[a], poses[b]);
      if (d < pos_radius)
        t.positives.push_back(b);
      else if (d > neg_radius)
        t.negatives.push_back(b);
    }
    if (t.positives.empty() || t.negatives.empty())
      ++out.skipped;
    else
      out.tuples.push_back(std::move(t));
  }
  return out;
}

Tensor triplet_loss(const Tensor& anchor, const Tensor& positive,
                    const Tensor& negative, double margin) {
  auto dist = [](const Tensor& a, const Tensor& b) {
    Tensor diff = sub(a, b);
    return sqrt_safe(sum_all(mul(diff, diff)));
  };
  Tensor gap = sub(dist(anchor, positive), dist(anchor, negative));
  return relu(shift(gap, margin));
}

Adam::Adam(ModelParams& params, const AdamConfig& cfg)
    : params_(&params), cfg_(cfg) {
  for (auto& [name, t] : params.tensors) {
    Slot s;
    s.m.assign(t.numel(), 0.0);
    s.v.assign(t.numel(), 0.0);
    s.decay = params.no_decay.count(name) == 0;
    slots_.emplace(name, std::move(s));
  }
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (auto& [name, tensor] : params_->tensors) {
    auto& node = *tensor.node();
    if (node.grad.empty()) continue;
    Slot& s = slots_.at(name);
    auto& w = node.value;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double g = node.grad[i];
      s.m[i] = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * g;
      s.v[i] = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * g * g;
      const double mhat = s.m[i] / bc1;
      const double vhat = s.v[i] / bc2;
      w[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      if (s.decay) w[i] -= cfg_.lr * cfg_.weight_decay * w[i];
    }
    node.grad.clear();
  }
}

void WorldConfig::validate() const {
  if (locations < 2) throw ConfigError("world needs at least 2 locations");
  if (views_per_location < 2)
    throw ConfigError("world needs at least 2 views per location");
  if (grid_cols == 0) throw ConfigError("world grid_cols must be positive");
  if (spacing <= 0.0 || view_offset < 0.0 || landmark_spread <= 0.0)
    throw ConfigError("world distances must be positive");
  if (landmarks < 4) throw ConfigError("world needs at least 4 landmarks");
  if (ring_radii.size() != ring_points.size())
    throw ConfigError("ring_radii and ring_points lengths differ");
}

SyntheticWorld make_world(const WorldConfig& cfg, uint64_t seed) {
  cfg.validate();
  SyntheticWorld world;
  world.views_per_location = cfg.views_per_location;
  for (uint32_t loc = 0; loc < cfg.locations; ++loc) {
    const double cx = cfg.spacing * static_cast<double>(loc % cfg.grid_cols);
    const double cy = cfg.spacing * static_cast<double>(loc / cfg.grid_cols);
    std::mt19937_64 rng(derive_seed(seed, 100 + loc));
    std::uniform_real_distribution<double> uni(-1.0, 1.0);

    SceneSpec spec;
    spec.seed = derive_seed(seed, 5000 + loc);
    spec.ring_radii = cfg.ring_radii;
    spec.ring_points = cfg.ring_points;
    spec.points_per_landmark = cfg.points_per_landmark;
    spec.noise_sigma = cfg.noise_sigma;
    for (uint32_t k = 0; k < cfg.landmarks; ++k) {
      CylinderLandmark lm;
      lm.cx = cx + cfg.landmark_spread * uni(rng);
      lm.cy = cy + cfg.landmark_spread * uni(rng);
      lm.radius = 0.4 + 0.4 * std::fabs(uni(rng));
      lm.height = 5.0 + 6.0 * std::fabs(uni(rng));
      spec.landmarks.push_back(lm);
    }
    spec.validate();
    world.scenes.push_back(std::move(spec));

    for (uint32_t v = 0; v < cfg.views_per_location; ++v) {
      Pose p;
      p.t = {cx, cy, 1.6};
      if (v > 0) {
        p.t[0] += cfg.view_offset * uni(rng);
        p.t[1] += cfg.view_offset * uni(rng);
      }
      world.poses.push_back(p);
    }
  }
  return world;
}

PointCloud render_view(const SyntheticWorld& world, std::size_t view,
                       SensorProfile profile) {
  if (view >= world.poses.size()) throw DataError("render_view: bad index");
  const std::size_t loc = world.location_of(view);
  PointCloud pc =
      synth_submap(world.scenes[loc], world.poses[view], profile);
  pc.source_id = "loc" + std::to_string(loc) + "v" +
                 std::to_string(view % world.views_per_location);
  return pc;
}

void TrainConfig::validate() const {
  if (steps == 0) throw ConfigError("training steps must be positive");
  if (lr_decay_factor <= 0.0 || lr_decay_factor > 1.0)
    throw ConfigError("lr_decay_factor must be in (0, 1]");
  if (margin <= 0.0) throw ConfigError("margin must be positive");
  if (!(positive_radius < negative_radius))
    throw ConfigError("positive radius must be below negative radius");
  if (eval_radius <= 0.0) throw ConfigError("eval radius must be positive");
}

namespace {

struct Validator {
  std::vector<std::size_t> db_views;  // indices into the base renders
  std::vector<PointCloud> query_clouds;
  std::vector<Pose> query_poses;
};

// View 0 of each location forms the database (plain render); the remaining
// views become queries, augmented once with fixed seeds so successive
// validations measure parameter progress and nothing else.
Validator make_validator(const SyntheticWorld& world,
                         const std::vector<PointCloud>& base,
                         const TrainConfig& cfg, uint64_t seed) {
  Validator v;
  for (std::size_t i = 0; i < world.poses.size(); ++i) {
    if (i % world.views_per_location == 0) {
      v.db_views.push_back(i);
    } else {
      v.query_clouds.push_back(
          augment(base[i], derive_seed(seed, 900000 + i), cfg.augment));
      v.query_poses.push_back(base[i].pose);
    }
  }
  return v;
}

}  // namespace

TrainResult train_synthetic(const ModelConfig& model_cfg,
                            const BoundingRegion& region,
                            const WorldConfig& world_cfg,
                            const TrainConfig& train_cfg, uint64_t seed) {
  model_cfg.validate();
  region.validate();
  train_cfg.validate();

  SyntheticWorld world = make_world(world_cfg, derive_seed(seed, 1));
  MiningResult mined = mine_tuples(world.poses, train_cfg.positive_radius,
                                   train_cfg.negative_radius);
  if (mined.tuples.empty())
    throw DataError("world layout produced no training tuples");

  TrainResult result;
  result.params = ModelParams::init(model_cfg, derive_seed(seed, 2));
  Adam opt(result.params, train_cfg.adam);
  std::mt19937_64 rng(derive_seed(seed, 3));

  std::vector<PointCloud> base;  // renders are parameter independent
  base.reserve(world.poses.size());
  for (std::size_t i = 0; i < world.poses.size(); ++i)
    base.push_back(render_view(world, i, train_cfg.profile));

  std::ofstream metrics;
  if (!train_cfg.metrics_path.empty()) {
    metrics.open(train_cfg.metrics_path);
    if (!metrics) throw DataError("cannot open " + train_cfg.metrics_path);
    metrics.precision(10);
  }

  auto embed = [&](const PointCloud& pc) {
    return forward(pc, region, model_cfg, result.params).descriptor;
  };

  const Validator validator = make_validator(world, base, train_cfg, seed);
  auto validate = [&]() {
    DescriptorDatabase db;
    for (std::size_t i : validator.db_views) {
      DbEntry e;
      e.id = base[i].source_id;
      e.pose = base[i].pose;
      e.descriptor = embed(base[i]).values();
      db.add(std::move(e));
    }
    std::vector<DbEntry> queries(validator.query_clouds.size());
    for (std::size_t i = 0; i < validator.query_clouds.size(); ++i) {
      queries[i].id = "q" + std::to_string(i);
      queries[i].pose = validator.query_poses[i];
      queries[i].descriptor = embed(validator.query_clouds[i]).values();
    }
    EvalReport rep = evaluate(db, queries, train_cfg.eval_radius);
    return std::make_pair(rep.ar1, rep.mrr);
  };

  std::uniform_int_distribution<std::size_t> pick_tuple(
      0, mined.tuples.size() - 1);

  for (uint32_t step = 1; step <= train_cfg.steps; ++step) {
    if (train_cfg.lr_decay_step > 0 && step == train_cfg.lr_decay_step)
      opt.set_lr(train_cfg.adam.lr * train_cfg.lr_decay_factor);
    const TupleSpec& tup = mined.tuples[pick_tuple(rng)];
    std::uniform_int_distribution<std::size_t> pick_pos(
        0, tup.positives.size() - 1);
    std::uniform_int_distribution<std::size_t> pick_neg(
        0, tup.negatives.size() - 1);
    const std::size_t ia = tup.anchor;
    const std::size_t ip = tup.positives[pick_pos(rng)];
    const std::size_t in = tup.negatives[pick_neg(rng)];

    auto view = [&](std::size_t idx, uint32_t role) {
      return augment(base[idx],
                     derive_seed(seed, 10000 + 8ull * step + role),
                     train_cfg.augment);
    };
    Tensor loss = triplet_loss(embed(view(ia, 0)), embed(view(ip, 1)),
                               embed(view(in, 2)), train_cfg.margin);
    const double loss_v = loss.scalar();
    if (!std::isfinite(loss_v))
      throw DataError("training diverged: non-finite loss at step " +
                      std::to_string(step));
    backward(loss);
    opt.step();

    StepRecord rec;
    rec.step = step;
    rec.loss = loss_v;
    if (metrics.is_open())
      metrics << "{\"step\": " << step << ", \"loss\": " << loss_v
              << ", \"lr\": " << opt.lr() << "}\n";

    const bool last = step == train_cfg.steps;
    if (last || (train_cfg.eval_interval > 0 &&
                 step % train_cfg.eval_interval == 0)) {
      auto [ar1, m] = validate();
      rec.recall_at_1 = ar1;
      rec.mrr = m;
      if (last) {
        result.final_recall_at_1 = ar1;
        result.final_mrr = m;
      }
      if (metrics.is_open())
        metrics << "{\"step\": " << step << ", \"ar1\": " << ar1
                << ", \"mrr\": " << m << "}\n";
    }
    result.history.push_back(rec);
  }
  return result;
}

}  // namespace octloc
