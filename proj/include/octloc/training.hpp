#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "octloc/hotformer.hpp"

namespace octloc {

struct TupleSpec {
  std::size_t anchor = 0;
  std::vector<std::size_t> positives;  // horizontal distance < pos threshold
  std::vector<std::size_t> negatives;  // horizontal distance > neg threshold
};

struct MiningResult {
  std::vector<TupleSpec> tuples;  // ordered by anchor id
  std::size_t skipped = 0;        // anchors lacking a positive or a negative
};

// Brute force over all pose pairs; strict inequalities on both thresholds.
MiningResult mine_tuples(const std::vector<Pose>& poses, double pos_radius,
                         double neg_radius);

// max(0, ||a - p|| - ||a - n|| + margin) on descriptor tensors.
Tensor triplet_loss(const Tensor& anchor, const Tensor& positive,
                    const Tensor& negative, double margin);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;  // decoupled; skipped for no_decay parameters
};

class Adam {
 public:
  Adam(ModelParams& params, const AdamConfig& cfg);
  // Applies accumulated gradients and clears them. Decay is coupled to lr,
  // so lr = 0 leaves every parameter bitwise unchanged.
  void step();
  uint64_t steps_taken() const { return t_; }
  void set_lr(double lr) { cfg_.lr = lr; }
  double lr() const { return cfg_.lr; }

 private:
  struct Slot {
    std::vector<double> m, v;
    bool decay = false;
  };
  ModelParams* params_;
  AdamConfig cfg_;
  std::map<std::string, Slot> slots_;
  uint64_t t_ = 0;
};

// Layout of the synthetic world used for desk-scale training: locations on a
// planar grid, each with its own landmark arrangement so they are visually
// distinct. Every location carries several sensor views a few metres apart,
// so views of one location are each other's positives while the grid spacing
// keeps every other location safely past the negative threshold.
struct WorldConfig {
  uint32_t locations = 60;
  uint32_t views_per_location = 2;
  uint32_t grid_cols = 10;
  double spacing = 80.0;             // metres between neighbouring locations
  double view_offset = 3.0;          // max horizontal offset of extra views
  uint32_t landmarks = 5;
  double landmark_spread = 16.0;     // placement radius around the location
  std::vector<double> ring_radii = {5.0};
  std::vector<uint32_t> ring_points = {64};
  uint32_t points_per_landmark = 32;
  double noise_sigma = 0.02;
  void validate() const;
};

struct SyntheticWorld {
  std::vector<Pose> poses;           // locations * views_per_location
  std::vector<SceneSpec> scenes;     // one spec per location
  uint32_t views_per_location = 1;
  std::size_t location_of(std::size_t view) const {
    return view / views_per_location;
  }
};

SyntheticWorld make_world(const WorldConfig& cfg, uint64_t seed);

PointCloud render_view(const SyntheticWorld& world, std::size_t view,
                       SensorProfile profile);

struct TrainConfig {
  uint32_t steps = 500;
  AdamConfig adam;
  uint32_t lr_decay_step = 0;     // 0 = constant lr
  double lr_decay_factor = 0.1;   // lr multiplier once the decay step hits
  double margin = 0.3;
  double positive_radius = 15.0;
  double negative_radius = 60.0;
  double eval_radius = 30.0;       // true-positive threshold for AR@1
  uint32_t eval_interval = 100;    // 0 = only the final evaluation
  AugmentConfig augment;
  SensorProfile profile = SensorProfile::ground;
  std::string metrics_path;        // JSONL sink, empty = no file
  void validate() const;
};

struct StepRecord {
  uint32_t step = 0;
  double loss = 0.0;
  double recall_at_1 = -1.0;  // set on validation steps only
  double mrr = -1.0;
};

struct TrainResult {
  ModelParams params;
  std::vector<StepRecord> history;
  double final_recall_at_1 = 0.0;
  double final_mrr = 0.0;
};

// Full training run, deterministic per seed; throws DataError if the loss
// turns non-finite. Database descriptors come from the plain renders,
// validation queries from independently augmented re-renders.
TrainResult train_synthetic(const ModelConfig& model_cfg,
                            const BoundingRegion& region,
                            const WorldConfig& world_cfg,
                            const TrainConfig& train_cfg, uint64_t seed);

}  // namespace octloc
