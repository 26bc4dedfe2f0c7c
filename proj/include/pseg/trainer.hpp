#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "pseg/common.hpp"
#include "pseg/data_io.hpp"
#include "pseg/losses.hpp"
#include "pseg/model.hpp"

namespace pseg {

struct TrainConfig {
  ModelConfig model;
  float learning_rate = 1e-3f;
  int64_t batch_size = 16;
  int64_t max_steps = 500;
  float tau = 0.07f;
  uint64_t seed = 0;
  bool pcl_enabled = true;
  bool fixed_prototypes = false;
  std::string train_manifest;
  std::string eval_manifest;  // optional
  int64_t eval_interval = 0;  // 0 disables periodic snapshots

  void validate() const {
    model.validate();
    if (!(learning_rate > 0)) fail(ErrCode::Config, "learning_rate must be positive");
    if (batch_size < 1) fail(ErrCode::Config, "batch_size must be >= 1");
    if (max_steps < 0) fail(ErrCode::Config, "max_steps must be >= 0");
    if (!(tau > 0)) fail(ErrCode::Config, "tau must be positive");
    if (eval_interval < 0) fail(ErrCode::Config, "eval_interval must be >= 0");
  }
};

// One (image, prompt class) training pair.
struct TrainPair {
  const DataSample* sample = nullptr;
  int64_t cls = 0;
};

struct EvalSnapshot {
  int64_t step = 0;
  double challenge_iou = 0.0;
  double mc_iou = 0.0;
};

struct TrainHistory {
  std::vector<LossBreakdown> steps;
  std::vector<double> wall_ms;  // wall-clock per executed step
  std::vector<EvalSnapshot> snapshots;
};

// Seeded parameter initialisation from the configuration: prototypes and
// polarity embeddings from the unit normal, MLP/decoder weights
// Xavier-uniform with zero biases.
ModelState init_model(const TrainConfig& cfg);

// Forward + backward + one Adam update over the trainable set. Dice is
// averaged per sample across the batch; PCL is computed once over class
// embeddings aggregated per class across the batch (classes absent from the
// whole batch are excluded). The polarity pair is frozen and never updated;
// with fixed_prototypes the prototype bank receives no update either.
LossBreakdown train_step(ModelState& state, const std::vector<TrainPair>& batch, const TrainConfig& cfg);

// Mean of the per-sample class embeddings over every training sample where
// the class has foreground at embedding resolution. (C, d) bank.
NdArray compute_fixed_prototypes(const Dataset& dataset, const ModelConfig& cfg);

using StepCallback = std::function<void(int64_t step, const LossBreakdown&)>;

// Deterministic training driver over preloaded datasets.
TrainHistory fit(ModelState& state, const Dataset& train, const Dataset* eval_set, const TrainConfig& cfg,
                 const StepCallback& on_step = {});

// Convenience path: loads datasets from the config manifests, initialises the
// model (fixed mean prototypes when requested) and trains.
std::pair<ModelState, TrainHistory> fit(const TrainConfig& cfg, const StepCallback& on_step = {});

}  // namespace pseg
