#include "pseg/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>

#include "pseg/kernels.hpp"

namespace pseg {

BinaryMask binarize(const NdArray& logits, double threshold) {
  if (logits.shape.size() != 2) fail(ErrCode::Shape, "binarize needs a 2-d logit grid");
  if (!(threshold > 0.0 && threshold < 1.0)) fail(ErrCode::Config, "threshold must be in (0,1)");
  BinaryMask mask;
  mask.height = logits.shape[0];
  mask.width = logits.shape[1];
  mask.on.resize(logits.v.size());
  for (size_t i = 0; i < logits.v.size(); ++i) {
    const double x = logits.v[i];
    const double p = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    mask.on[i] = p > threshold ? 1 : 0;
  }
  return mask;
}

double iou(const BinaryMask& pred, const BinaryMask& gt) {
  if (pred.height != gt.height || pred.width != gt.width)
    fail(ErrCode::Shape, "iou mask shapes differ");
  int64_t inter = 0, uni = 0;
  for (size_t i = 0; i < pred.on.size(); ++i) {
    const bool a = pred.on[i] != 0, b = gt.on[i] != 0;
    inter += a && b;
    uni += a || b;
  }
  if (uni == 0) return 1.0;  // both empty
  return static_cast<double>(inter) / static_cast<double>(uni);
}

namespace {

BinaryMask gt_at(const IdMask& mask, int64_t cls, int64_t oh, int64_t ow) {
  const NdArray native = binary_mask(mask, cls);
  const NdArray scaled = nn_resample(native, oh, ow);
  BinaryMask out;
  out.height = oh;
  out.width = ow;
  out.on.resize(scaled.v.size());
  for (size_t i = 0; i < scaled.v.size(); ++i) out.on[i] = scaled.v[i] > 0.5f ? 1 : 0;
  return out;
}

}  // namespace

MetricsReport evaluate(const ModelState& state, const Dataset& dataset) {
  if (dataset.samples.empty()) fail(ErrCode::Io, "evaluation dataset is empty");
  if (dataset.max_class() > state.config().classes)
    fail(ErrCode::Class, "dataset contains class " + std::to_string(dataset.max_class()) +
                             " beyond the model's " + std::to_string(state.config().classes));

  struct Pair {
    const DataSample* sample;
    int64_t cls;
  };
  std::vector<Pair> pairs;
  for (const auto& s : dataset.samples)
    for (int64_t c : s.present_classes) pairs.push_back({&s, c});

  std::vector<double> scores(pairs.size(), 0.0);
  std::string error_message;
  bool failed = false;
  ErrCode error_code = ErrCode::Io;

#pragma omp parallel for schedule(dynamic) if (kern::parallel_enabled())
  for (int64_t i = 0; i < static_cast<int64_t>(pairs.size()); ++i) {
    try {
      const auto& pr = pairs[static_cast<size_t>(i)];
      Tape tape;
      auto leaves = make_leaves(tape, state);
      auto bound = bind_model<float>(state.config(), leaves);
      auto logits = forward_logits(tape, bound, pr.sample->embedding, pr.cls).to_ndarray();
      const BinaryMask pred = binarize(logits);
      const BinaryMask gt = gt_at(pr.sample->mask, pr.cls, logits.shape[0], logits.shape[1]);
      scores[static_cast<size_t>(i)] = iou(pred, gt);
    } catch (const Error& e) {
#pragma omp critical
      {
        if (!failed) {
          failed = true;
          error_code = e.code();
          error_message = e.what();
        }
      }
    }
  }
  if (failed) throw Error(error_code, error_message);

  MetricsReport report;
  report.pairs.reserve(pairs.size());
  // challenge_iou averages pairs whose class is present in the ground truth;
  // prompts are drawn from present classes, so the two pair sets coincide and
  // the summaries agree bit for bit.
  double challenge_sum = 0.0, all_sum = 0.0;
  int64_t challenge_n = 0, all_n = 0;
  std::map<int64_t, std::pair<double, int64_t>> by_class;
  for (size_t i = 0; i < pairs.size(); ++i) {
    const double score = scores[i];
    report.pairs.push_back({pairs[i].sample->id, pairs[i].cls, score});
    challenge_sum += score;
    ++challenge_n;
    all_sum += score;
    ++all_n;
    auto& acc = by_class[pairs[i].cls];
    acc.first += score;
    acc.second += 1;
  }
  report.challenge_iou = challenge_sum / static_cast<double>(challenge_n);
  report.iou = all_sum / static_cast<double>(all_n);
  double mc_sum = 0.0;
  for (const auto& [cls, acc] : by_class) {
    report.per_class.push_back({cls, acc.first / static_cast<double>(acc.second), acc.second});
    mc_sum += acc.first / static_cast<double>(acc.second);
  }
  report.mc_iou = by_class.empty() ? 0.0 : mc_sum / static_cast<double>(by_class.size());
  return report;
}

std::string metrics_csv(const MetricsReport& report) {
  std::string out = "metric,class,value\n";
  char line[96];
  for (const auto& row : report.per_class) {
    std::snprintf(line, sizeof(line), "class_iou,%lld,%.6f\n", static_cast<long long>(row.cls), row.iou);
    out += line;
  }
  std::snprintf(line, sizeof(line), "challenge_iou,,%.6f\n", report.challenge_iou);
  out += line;
  std::snprintf(line, sizeof(line), "iou,,%.6f\n", report.iou);
  out += line;
  std::snprintf(line, sizeof(line), "mc_iou,,%.6f\n", report.mc_iou);
  out += line;
  return out;
}

void write_metrics_csv(const std::string& path, const MetricsReport& report) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrCode::Io, "cannot write " + path);
  out << metrics_csv(report);
  if (!out) fail(ErrCode::Io, "write failure on " + path);
}

}  // namespace pseg
