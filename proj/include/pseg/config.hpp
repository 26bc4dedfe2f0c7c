#pragma once

#include <string>

#include "pseg/common.hpp"
#include "pseg/data_io.hpp"
#include "pseg/trainer.hpp"

namespace pseg {

// Flat key=value run configuration covering dataset generation, model scale
// and training. '#' starts a comment; unknown and duplicate keys are
// rejected. Serialisation is canonical (fixed key order, shortest float
// form), so parse-then-reserialize is idempotent.
struct AppConfig {
  // synthetic dataset
  int64_t classes = 3;
  int64_t height = 8, width = 8;
  int64_t channels = 16;
  int64_t samples = 64;
  int64_t sample_offset = 0;
  int64_t shapes_min = 1, shapes_max = 3;
  float snr = 4.0f;
  // shared
  uint64_t seed = 0;
  // model
  int64_t tokens_per_class = 2;
  int64_t r_dense = 128, r_sparse = 128;
  int64_t decoder_layers = 2;
  int64_t output_tokens = 1;
  int64_t upscale = 4;
  int64_t head_channels = 0;
  // training
  float learning_rate = 1e-3f;
  int64_t batch_size = 32;
  int64_t max_steps = 500;
  float tau = 0.07f;
  bool pcl_enabled = true;
  bool fixed_prototypes = false;
  std::string train_manifest;
  std::string eval_manifest;
  int64_t eval_interval = 0;
  std::string checkpoint_out = "checkpoint.sscp";
  std::string history_out = "history.csv";

  SynthConfig synth() const {
    SynthConfig s;
    s.classes = classes;
    s.height = height;
    s.width = width;
    s.channels = channels;
    s.samples = samples;
    s.sample_offset = sample_offset;
    s.shapes_min = shapes_min;
    s.shapes_max = shapes_max;
    s.snr = snr;
    s.seed = seed;
    return s;
  }

  ModelConfig model() const {
    ModelConfig m;
    m.classes = classes;
    m.channels = channels;
    m.tokens_per_class = tokens_per_class;
    m.r_dense = r_dense;
    m.r_sparse = r_sparse;
    m.decoder_layers = decoder_layers;
    m.output_tokens = output_tokens;
    m.upscale = upscale;
    m.head_channels = head_channels;
    return m;
  }

  TrainConfig train() const {
    TrainConfig t;
    t.model = model();
    t.learning_rate = learning_rate;
    t.batch_size = batch_size;
    t.max_steps = max_steps;
    t.tau = tau;
    t.seed = seed;
    t.pcl_enabled = pcl_enabled;
    t.fixed_prototypes = fixed_prototypes;
    t.train_manifest = train_manifest;
    t.eval_manifest = eval_manifest;
    t.eval_interval = eval_interval;
    return t;
  }
};

AppConfig parse_config_text(const std::string& text);
AppConfig load_config(const std::string& path);
std::string serialize_config(const AppConfig& cfg);

}  // namespace pseg
