#pragma once

#include "pseg/data_io.hpp"
#include "pseg/model.hpp"

namespace pseg {

// Deterministic toy instance for full-model gradient checking: a seeded
// embedding over an h x w grid, vertical class stripes with a background row
// as ground truth, class 1 prompted, PCL aggregates taken from the same
// sample. The same probe drives the gradcheck CLI and the acceptance suite.
FullModelLoss make_gradcheck_probe(const ModelConfig& cfg, int64_t height, int64_t width, uint64_t seed);

}  // namespace pseg
