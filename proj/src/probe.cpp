#include "pseg/probe.hpp"

#include "pseg/rng.hpp"

namespace pseg {

FullModelLoss make_gradcheck_probe(const ModelConfig& cfg, int64_t height, int64_t width, uint64_t seed) {
  cfg.validate();
  if (height < 2 || width < cfg.classes)
    fail(ErrCode::Config, "probe grid too small for " + std::to_string(cfg.classes) + " classes");

  FullModelLoss probe;
  probe.cfg = cfg;
  probe.cls = 1;
  probe.tau = 0.07;

  probe.embedding = NdArray({height, width, cfg.channels});
  Rng rng = Rng::stream(seed, 42);
  for (auto& x : probe.embedding.v) x = 0.5f * rng.normal();

  // vertical class stripes, last row left as background
  IdMask mask;
  mask.height = height;
  mask.width = width;
  mask.ids.assign(static_cast<size_t>(height * width), 0);
  for (int64_t j = 0; j < width; ++j) {
    const int64_t cls = std::min<int64_t>(cfg.classes, j * cfg.classes / width + 1);
    for (int64_t i = 0; i < height - 1; ++i)
      mask.ids[static_cast<size_t>(i * width + j)] = static_cast<uint8_t>(cls);
  }

  probe.gt_at_logits =
      nn_resample(binary_mask(mask, probe.cls), height * cfg.upscale, width * cfg.upscale);

  for (int64_t cls = 1; cls <= cfg.classes; ++cls) {
    const NdArray small = binary_mask(mask, cls);
    probe.pcl_rows.push_back(cls - 1);
    probe.pcl_embeds.push_back(class_embedding_array(probe.embedding, small));
  }
  return probe;
}

}  // namespace pseg
