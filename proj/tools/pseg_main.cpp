// pseg: dataset generation, training, evaluation, gradient checking and
// similarity-map export for class-promptable segmentation over precomputed
// image embeddings.
//
// Exit codes: 0 success, 1 config/io failure, 2 numeric failure,
// 3 gradient check failure.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include "CLI11.hpp"
#include "pseg/config.hpp"
#include "pseg/data_io.hpp"
#include "pseg/encoder.hpp"
#include "pseg/gradcheck.hpp"
#include "pseg/metrics.hpp"
#include "pseg/probe.hpp"
#include "pseg/trainer.hpp"

namespace fs = std::filesystem;
using namespace pseg;

namespace {

bool g_deterministic_logs = false;

void log_line(const std::string& msg) {
  if (g_deterministic_logs) {
    std::cout << msg << "\n";
    return;
  }
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char stamp[32];
  std::strftime(stamp, sizeof(stamp), "%Y-%m-%d %H:%M:%S", std::localtime(&now));
  std::cout << "[" << stamp << "] " << msg << "\n";
}

int exit_code_for(const Error& e) { return e.code() == ErrCode::Numeric ? 2 : 1; }

int cmd_gen_data(const std::string& config_path, const std::string& out_dir) {
  const AppConfig cfg = load_config(config_path);
  const std::string manifest = gen_synthetic(cfg.synth(), out_dir);
  uintmax_t bytes = 0;
  for (const auto& entry : fs::directory_iterator(out_dir))
    if (entry.is_regular_file()) bytes += entry.file_size();
  char msg[160];
  std::snprintf(msg, sizeof(msg), "generated samples=%lld classes=%lld bytes=%llu manifest=%s",
                static_cast<long long>(cfg.samples), static_cast<long long>(cfg.classes),
                static_cast<unsigned long long>(bytes), manifest.c_str());
  log_line(msg);
  return 0;
}

int cmd_train(const std::string& config_path, std::string checkpoint_override, std::string history_override) {
  const AppConfig cfg = load_config(config_path);
  const std::string checkpoint_path = checkpoint_override.empty() ? cfg.checkpoint_out : checkpoint_override;
  const std::string history_path = history_override.empty() ? cfg.history_out : history_override;

  auto [state, history] = fit(cfg.train(), [](int64_t step, const LossBreakdown& loss) {
    char msg[128];
    std::snprintf(msg, sizeof(msg), "step=%lld dice=%.6f pcl=%.6f total=%.6f", static_cast<long long>(step),
                  loss.dice, loss.pcl, loss.total);
    log_line(msg);
  });
  for (const auto& snap : history.snapshots) {
    char msg[128];
    std::snprintf(msg, sizeof(msg), "eval step=%lld challenge_iou=%.6f mc_iou=%.6f",
                  static_cast<long long>(snap.step), snap.challenge_iou, snap.mc_iou);
    log_line(msg);
  }

  save_checkpoint(checkpoint_path, state, serialize_config(cfg));
  std::ofstream hist(history_path, std::ios::binary | std::ios::trunc);
  if (!hist) fail(ErrCode::Io, "cannot write " + history_path);
  hist << "step,dice,pcl,total,wall_ms\n";
  for (size_t i = 0; i < history.steps.size(); ++i) {
    char row[128];
    std::snprintf(row, sizeof(row), "%zu,%.6f,%.6f,%.6f,%.3f\n", i + 1, history.steps[i].dice,
                  history.steps[i].pcl, history.steps[i].total, history.wall_ms[i]);
    hist << row;
  }
  log_line("checkpoint=" + checkpoint_path + " history=" + history_path);
  return 0;
}

int cmd_eval(const std::string& checkpoint_path, const std::string& manifest_path, const std::string& out_csv) {
  const ModelState state = load_checkpoint(checkpoint_path);
  const Dataset dataset = load_dataset(manifest_path);
  const MetricsReport report = evaluate(state, dataset);
  write_metrics_csv(out_csv, report);
  char msg[160];
  std::snprintf(msg, sizeof(msg), "pairs=%zu challenge_iou=%.6f iou=%.6f mc_iou=%.6f csv=%s",
                report.pairs.size(), report.challenge_iou, report.iou, report.mc_iou, out_csv.c_str());
  log_line(msg);
  return 0;
}

struct GradcheckScale {
  int64_t height = 4, width = 4, channels = 8, classes = 2;
  int64_t tokens = 2, r_dense = 8, r_sparse = 8, layers = 1;
};

int cmd_gradcheck(uint64_t seed, const GradcheckScale& scale, bool inject_fault) {
  ModelConfig cfg;
  cfg.classes = scale.classes;
  cfg.channels = scale.channels;
  cfg.tokens_per_class = scale.tokens;
  cfg.r_dense = scale.r_dense;
  cfg.r_sparse = scale.r_sparse;
  cfg.decoder_layers = scale.layers;
  const FullModelLoss probe = make_gradcheck_probe(cfg, scale.height, scale.width, seed);

  ModelState state = ModelState::init(cfg, seed);
  std::vector<std::string> names;
  for (const auto& spec : state.specs()) names.push_back(spec.name);
  const double fault = inject_fault ? 1.5 : 1.0;
  const GradReport report =
      grad_check(probe, state.params(), names, 1e-3, 1e-4, seed, 10000, fault);

  // aggregate per group; the frozen polarity pair is excluded from the
  // finite-difference criterion and checked for zero training gradient below
  std::map<std::string, double> group_err;
  for (size_t i = 0; i < report.per_param.size(); ++i) {
    const auto& spec = state.specs()[i];
    if (!spec.trainable) continue;
    auto [it, inserted] = group_err.emplace(spec.group, 0.0);
    it->second = std::max(it->second, report.per_param[i].max_rel_err);
  }
  bool pass = true;
  std::string offending;
  for (const char* group : {"prototypes", "dense_mlp", "sparse_mlp", "decoder", "output_tokens"}) {
    const double err = group_err.at(group);
    const bool ok = err < report.tolerance;
    if (!ok && pass) {
      pass = false;
      offending = group;
    }
    char msg[128];
    std::snprintf(msg, sizeof(msg), "group=%s max_rel_err=%.3e %s", group, err, ok ? "ok" : "FAIL");
    log_line(msg);
  }

  // frozen leaves must receive exactly zero gradient on the training path
  Tape tape;
  auto leaves = make_leaves(tape, state);
  auto loss = probe(tape, leaves);
  auto table = tape.backward(loss);
  bool frozen_ok = true;
  for (size_t i = 0; i < state.specs().size(); ++i) {
    if (state.specs()[i].trainable) continue;
    for (float g : table.grad(leaves[i]))
      if (g != 0.0f) frozen_ok = false;
  }
  log_line(std::string("group=polarity frozen zero_gradient=") + (frozen_ok ? "ok" : "FAIL"));
  if (!frozen_ok && pass) {
    pass = false;
    offending = "polarity";
  }

  if (!pass) {
    std::cerr << "gradient check failed in group " << offending << "\n";
    return 3;
  }
  log_line("gradient check passed");
  return 0;
}

int cmd_export_sim(const std::string& checkpoint_path, const std::string& manifest_path, int64_t cls,
                   const std::string& out_dir) {
  const ModelState state = load_checkpoint(checkpoint_path);
  if (cls < 1 || cls > state.config().classes)
    fail(ErrCode::Class, "class " + std::to_string(cls) + " out of range 1.." +
                             std::to_string(state.config().classes));
  const Dataset dataset = load_dataset(manifest_path);
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) fail(ErrCode::Io, "cannot create " + out_dir);

  const NdArray& bank = state.param("prototypes.bank");
  for (const auto& sample : dataset.samples) {
    Tape tape;
    auto image = tape.constant(sample.embedding);
    auto prototypes = tape.constant(bank);
    const NdArray sim = compute_similarity(image, prototypes).to_ndarray();
    const NdArray normalized = export_similarity_map(sim, cls);
    const std::string stem = (fs::path(out_dir) / (sample.id + "_sim")).string();
    write_grid(stem + ".ssgr", normalized);
    write_pgm(stem + ".pgm", normalized);
  }
  log_line("exported " + std::to_string(dataset.samples.size()) + " similarity maps to " + out_dir);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"class-promptable segmentation over precomputed image embeddings"};
  app.require_subcommand(1);
  app.add_flag("--deterministic-logs", g_deterministic_logs, "omit timestamps from log lines");

  std::string config_path, out_dir, checkpoint_path, manifest_path, out_csv;
  std::string checkpoint_override, history_override;
  int64_t cls = 0;
  uint64_t seed = 0;
  GradcheckScale scale;
  bool inject_fault = false;

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  gen->add_option("config", config_path, "key=value config file")->required();
  gen->add_option("out_dir", out_dir, "output directory")->required();

  auto* train = app.add_subcommand("train", "train from a config file");
  train->add_option("config", config_path, "key=value config file")->required();
  train->add_option("--checkpoint", checkpoint_override, "override checkpoint_out");
  train->add_option("--history", history_override, "override history_out");

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  eval_cmd->add_option("checkpoint", checkpoint_path, "checkpoint file")->required();
  eval_cmd->add_option("manifest", manifest_path, "dataset manifest")->required();
  eval_cmd->add_option("out_csv", out_csv, "metrics CSV output")->required();

  auto* grad = app.add_subcommand("gradcheck", "full-model finite-difference gradient check");
  grad->add_option("--seed", seed, "probe seed");
  grad->add_option("--height", scale.height, "embedding rows");
  grad->add_option("--width", scale.width, "embedding columns");
  grad->add_option("--channels", scale.channels, "embedding channels");
  grad->add_option("--classes", scale.classes, "class count");
  grad->add_option("--tokens", scale.tokens, "sparse tokens per class");
  grad->add_option("--r-dense", scale.r_dense, "dense MLP width");
  grad->add_option("--r-sparse", scale.r_sparse, "sparse MLP width");
  grad->add_option("--layers", scale.layers, "decoder layers");
  grad->add_flag("--inject-fault", inject_fault, "negative control: corrupt analytic gradients");

  auto* exp = app.add_subcommand("export-sim", "export normalized class similarity maps");
  exp->add_option("checkpoint", checkpoint_path, "checkpoint file")->required();
  exp->add_option("manifest", manifest_path, "dataset manifest")->required();
  exp->add_option("class_id", cls, "class to export (1-based)")->required();
  exp->add_option("out_dir", out_dir, "output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(config_path, out_dir);
    if (train->parsed()) return cmd_train(config_path, checkpoint_override, history_override);
    if (eval_cmd->parsed()) return cmd_eval(checkpoint_path, manifest_path, out_csv);
    if (grad->parsed()) return cmd_gradcheck(seed, scale, inject_fault);
    if (exp->parsed()) return cmd_export_sim(checkpoint_path, manifest_path, cls, out_dir);
  } catch (const Error& e) {
    std::cerr << e.what() << "\n";
    return exit_code_for(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
