#pragma once

#include <string>
#include <vector>

#include "pseg/common.hpp"
#include "pseg/data_io.hpp"
#include "pseg/model.hpp"

namespace pseg {

struct BinaryMask {
  int64_t height = 0, width = 0;
  std::vector<uint8_t> on;
};

// mask[i,j] = sigmoid(logits[i,j]) > threshold (strict).
BinaryMask binarize(const NdArray& logits, double threshold = 0.5);

// Intersection over union; 1.0 when both masks are empty, 0.0 when exactly
// one is.
double iou(const BinaryMask& pred, const BinaryMask& gt);

struct MetricsReport {
  struct ClassRow {
    int64_t cls = 0;
    double iou = 0.0;
    int64_t pairs = 0;
  };
  struct PairRow {
    std::string sample_id;
    int64_t cls = 0;
    double iou = 0.0;
  };
  std::vector<ClassRow> per_class;  // ascending class id, classes with >= 1 pair
  std::vector<PairRow> pairs;       // per (image, class) detail
  double challenge_iou = 0.0;       // mean over pairs with the class present
  double iou = 0.0;                 // mean over all prompted pairs
  double mc_iou = 0.0;              // unweighted mean of per-class rows
};

// Runs the class-prompted forward pass for every (image, present class) pair
// and aggregates IoU. Pairs are processed in parallel; accumulation follows
// the fixed pair order.
MetricsReport evaluate(const ModelState& state, const Dataset& dataset);

// header row, one row per class, then summary rows; 6 decimal places.
std::string metrics_csv(const MetricsReport& report);
void write_metrics_csv(const std::string& path, const MetricsReport& report);

}  // namespace pseg
