#include "pseg/trainer.hpp"

#include <chrono>
#include <cmath>
#include <map>

#include "pseg/metrics.hpp"
#include "pseg/rng.hpp"

namespace pseg {

namespace {

constexpr double kAdamBeta1 = 0.9;
constexpr double kAdamBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

NdArray gt_at_logits(const DataSample& s, int64_t cls, const ModelConfig& cfg) {
  const int64_t oh = s.embedding.shape[0] * cfg.upscale;
  const int64_t ow = s.embedding.shape[1] * cfg.upscale;
  return nn_resample(binary_mask(s.mask, cls), oh, ow);
}

NdArray gt_at_embedding(const DataSample& s, int64_t cls) {
  return nn_resample(binary_mask(s.mask, cls), s.embedding.shape[0], s.embedding.shape[1]);
}

bool any_foreground(const NdArray& mask) {
  for (float v : mask.v)
    if (v != 0.0f) return true;
  return false;
}

void adam_update(ModelState& state, const std::vector<std::vector<float>>& grads, const TrainConfig& cfg) {
  state.set_step(state.step() + 1);
  const double t = static_cast<double>(state.step());
  const double bc1 = 1.0 - std::pow(kAdamBeta1, t);
  const double bc2 = 1.0 - std::pow(kAdamBeta2, t);
  for (size_t p = 0; p < state.params().size(); ++p) {
    const auto& spec = state.specs()[p];
    if (!spec.trainable) continue;
    if (cfg.fixed_prototypes && spec.group == "prototypes") continue;
    auto& param = state.params()[p];
    auto& m = state.moment1()[p];
    auto& v = state.moment2()[p];
    const auto& g = grads[p];
    for (size_t i = 0; i < param.v.size(); ++i) {
      const double gi = g[i];
      m.v[i] = static_cast<float>(kAdamBeta1 * m.v[i] + (1.0 - kAdamBeta1) * gi);
      v.v[i] = static_cast<float>(kAdamBeta2 * v.v[i] + (1.0 - kAdamBeta2) * gi * gi);
      const double mhat = m.v[i] / bc1;
      const double vhat = v.v[i] / bc2;
      param.v[i] = static_cast<float>(param.v[i] - cfg.learning_rate * mhat / (std::sqrt(vhat) + kAdamEps));
    }
  }
}

}  // namespace

ModelState init_model(const TrainConfig& cfg) {
  cfg.validate();
  return ModelState::init(cfg.model, cfg.seed);
}

LossBreakdown train_step(ModelState& state, const std::vector<TrainPair>& batch, const TrainConfig& cfg) {
  if (batch.empty()) fail(ErrCode::Config, "empty batch");
  const ModelConfig& mc = state.config();

  Tape tape;
  auto leaves = make_leaves(tape, state);
  auto bound = bind_model<float>(mc, leaves);

  // dice, averaged per sample
  TensorT<float> dice_sum;
  bool have_dice = false;
  for (const auto& pair : batch) {
    const NdArray native = binary_mask(pair.sample->mask, pair.cls);
    if (!any_foreground(native))
      fail(ErrCode::EmptyMask, "class " + std::to_string(pair.cls) + " absent from sample " + pair.sample->id);
    auto logits = forward_logits(tape, bound, pair.sample->embedding, pair.cls);
    auto dice = dice_loss(logits, gt_at_logits(*pair.sample, pair.cls, mc));
    dice_sum = have_dice ? add(dice_sum, dice) : dice;
    have_dice = true;
  }
  auto dice_mean = scale(dice_sum, 1.0 / static_cast<double>(batch.size()));

  // PCL over per-class aggregates of the batch
  TensorT<float> total = dice_mean;
  double pcl_value = 0.0;
  if (cfg.pcl_enabled) {
    std::map<int64_t, std::pair<NdArray, int64_t>> agg;  // class -> (sum of v, count)
    for (const auto& pair : batch) {
      const NdArray small = gt_at_embedding(*pair.sample, pair.cls);
      if (!any_foreground(small)) continue;  // class vanished at embedding resolution
      const NdArray v = class_embedding_array(pair.sample->embedding, small);
      auto it = agg.find(pair.cls);
      if (it == agg.end()) {
        agg.emplace(pair.cls, std::make_pair(v, int64_t{1}));
      } else {
        for (size_t i = 0; i < v.v.size(); ++i) it->second.first.v[i] += v.v[i];
        it->second.second += 1;
      }
    }
    if (!agg.empty()) {
      std::vector<int64_t> rows;
      std::vector<NdArray> embeds;
      for (auto& [cls, acc] : agg) {
        rows.push_back(cls - 1);
        NdArray mean = acc.first;
        for (auto& x : mean.v) x /= static_cast<float>(acc.second);
        embeds.push_back(std::move(mean));
      }
      auto pcl = pcl_from_aggregates(bound.prototypes, rows, embeds, cfg.tau);
      pcl_value = pcl.scalar();
      total = add(dice_mean, pcl);
    }
  }

  auto table = tape.backward(total);
  std::vector<std::vector<float>> grads;
  grads.reserve(leaves.size());
  for (const auto& leaf : leaves) grads.push_back(table.grad(leaf));
  adam_update(state, grads, cfg);

  LossBreakdown out;
  out.dice = dice_mean.scalar();
  out.pcl = pcl_value;
  out.total = out.dice + out.pcl;
  out.tau = cfg.tau;
  return out;
}

NdArray compute_fixed_prototypes(const Dataset& dataset, const ModelConfig& cfg) {
  NdArray bank({cfg.classes, cfg.channels});
  std::vector<int64_t> counts(static_cast<size_t>(cfg.classes), 0);
  for (const auto& s : dataset.samples) {
    for (int64_t cls : s.present_classes) {
      if (cls > cfg.classes)
        fail(ErrCode::Class, "dataset class " + std::to_string(cls) + " beyond configured " +
                                 std::to_string(cfg.classes));
      const NdArray small = gt_at_embedding(s, cls);
      if (!any_foreground(small)) continue;
      const NdArray v = class_embedding_array(s.embedding, small);
      for (int64_t t = 0; t < cfg.channels; ++t)
        bank.v[static_cast<size_t>((cls - 1) * cfg.channels + t)] += v.v[static_cast<size_t>(t)];
      counts[static_cast<size_t>(cls - 1)] += 1;
    }
  }
  for (int64_t k = 0; k < cfg.classes; ++k) {
    if (counts[static_cast<size_t>(k)] == 0)
      fail(ErrCode::MissingClass, "class " + std::to_string(k + 1) + " never occurs in the training set");
    for (int64_t t = 0; t < cfg.channels; ++t)
      bank.v[static_cast<size_t>(k * cfg.channels + t)] /= static_cast<float>(counts[static_cast<size_t>(k)]);
  }
  return bank;
}

TrainHistory fit(ModelState& state, const Dataset& train, const Dataset* eval_set, const TrainConfig& cfg,
                 const StepCallback& on_step) {
  cfg.validate();
  if (train.samples.empty()) fail(ErrCode::Io, "training dataset is empty");
  if (train.max_class() > cfg.model.classes)
    fail(ErrCode::Class, "training data contains class " + std::to_string(train.max_class()) +
                             " beyond configured " + std::to_string(cfg.model.classes));

  std::vector<TrainPair> pairs;
  for (const auto& s : train.samples)
    for (int64_t cls : s.present_classes) pairs.push_back({&s, cls});
  if (pairs.empty()) fail(ErrCode::Io, "training dataset has no (image, class) pairs");

  TrainHistory history;
  size_t cursor = 0;
  uint64_t epoch = 0;
  Rng shuffle_rng = Rng::stream(cfg.seed, 500);
  shuffle_rng.shuffle(pairs.begin(), pairs.end());

  for (int64_t step = 1; step <= cfg.max_steps; ++step) {
    std::vector<TrainPair> batch;
    batch.reserve(static_cast<size_t>(cfg.batch_size));
    while (batch.size() < static_cast<size_t>(cfg.batch_size)) {
      if (cursor == pairs.size()) {
        cursor = 0;
        ++epoch;
        Rng r = Rng::stream(cfg.seed, 500 + epoch);
        r.shuffle(pairs.begin(), pairs.end());
      }
      batch.push_back(pairs[cursor++]);
    }
    const auto t0 = std::chrono::steady_clock::now();
    const LossBreakdown loss = train_step(state, batch, cfg);
    const auto t1 = std::chrono::steady_clock::now();
    history.steps.push_back(loss);
    history.wall_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    if (on_step) on_step(step, loss);
    if (eval_set && cfg.eval_interval > 0 && step % cfg.eval_interval == 0) {
      const MetricsReport report = evaluate(state, *eval_set);
      history.snapshots.push_back({step, report.challenge_iou, report.mc_iou});
    }
  }
  return history;
}

std::pair<ModelState, TrainHistory> fit(const TrainConfig& cfg, const StepCallback& on_step) {
  cfg.validate();
  if (cfg.train_manifest.empty()) fail(ErrCode::Config, "train_manifest is not set");
  Dataset train = load_dataset(cfg.train_manifest);
  Dataset eval_set;
  const bool have_eval = !cfg.eval_manifest.empty();
  if (have_eval) eval_set = load_dataset(cfg.eval_manifest);

  ModelState state = init_model(cfg);
  if (cfg.fixed_prototypes) state.param("prototypes.bank") = compute_fixed_prototypes(train, cfg.model);

  TrainHistory history = fit(state, train, have_eval ? &eval_set : nullptr, cfg, on_step);
  return {std::move(state), std::move(history)};
}

}  // namespace pseg
