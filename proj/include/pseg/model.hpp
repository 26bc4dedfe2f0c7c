#pragma once

#include <string>
#include <vector>

#include "pseg/common.hpp"
#include "pseg/decoder.hpp"
#include "pseg/encoder.hpp"
#include "pseg/losses.hpp"
#include "pseg/rng.hpp"
#include "pseg/tensor.hpp"

namespace pseg {

struct ModelConfig {
  int64_t classes = 0;
  int64_t channels = 0;
  int64_t tokens_per_class = 2;
  int64_t r_dense = 128;
  int64_t r_sparse = 128;
  int64_t decoder_layers = 2;
  int64_t output_tokens = 1;
  int64_t upscale = 4;
  int64_t head_channels = 0;  // 0 -> channels / 2

  int64_t head_dim() const { return head_channels > 0 ? head_channels : std::max<int64_t>(1, channels / 2); }

  void validate() const {
    if (classes < 1) fail(ErrCode::Config, "classes must be >= 1");
    if (channels < 1) fail(ErrCode::Config, "channels must be >= 1");
    if (tokens_per_class < 1) fail(ErrCode::Config, "tokens_per_class must be >= 1");
    if (r_dense < 1 || r_sparse < 1) fail(ErrCode::Config, "MLP widths must be >= 1");
    if (decoder_layers < 1) fail(ErrCode::Config, "decoder_layers must be >= 1");
    if (output_tokens < 1) fail(ErrCode::Config, "output_tokens must be >= 1");
    if (upscale < 1) fail(ErrCode::Config, "upscale must be >= 1");
    if (head_channels < 0) fail(ErrCode::Config, "head_channels must be >= 0");
  }
};

enum class InitKind { Normal, Xavier, Zero };

struct ParamSpec {
  std::string name;
  std::string group;  // prototypes | dense_mlp | sparse_mlp | polarity | output_tokens | decoder
  Shape shape;
  bool trainable = true;
  InitKind init = InitKind::Xavier;
  int64_t fan_in = 0, fan_out = 0;  // for Xavier
};

// Fixed parameter order; binding, checkpoints and the optimizer all index by
// this registry.
inline std::vector<ParamSpec> param_registry(const ModelConfig& cfg) {
  cfg.validate();
  const int64_t c = cfg.classes, d = cfg.channels, n = cfg.tokens_per_class;
  const int64_t rd = cfg.r_dense, rs = cfg.r_sparse, dh = cfg.head_dim();
  std::vector<ParamSpec> specs;
  auto weight = [&](std::string name, std::string group, int64_t in, int64_t out) {
    specs.push_back({std::move(name), std::move(group), Shape{in, out}, true, InitKind::Xavier, in, out});
  };
  auto bias = [&](std::string name, std::string group, int64_t width) {
    specs.push_back({std::move(name), std::move(group), Shape{width}, true, InitKind::Zero, 0, 0});
  };

  specs.push_back({"prototypes.bank", "prototypes", Shape{c, d}, true, InitKind::Normal, 0, 0});
  weight("dense_mlp.f_w", "dense_mlp", d, rd);
  bias("dense_mlp.f_b", "dense_mlp", rd);
  weight("dense_mlp.g_w", "dense_mlp", rd, d);
  bias("dense_mlp.g_b", "dense_mlp", d);
  weight("sparse_mlp.f_w", "sparse_mlp", d, rs);
  bias("sparse_mlp.f_b", "sparse_mlp", rs);
  weight("sparse_mlp.g_w", "sparse_mlp", rs, n * d);
  bias("sparse_mlp.g_b", "sparse_mlp", n * d);
  specs.push_back({"polarity.positive", "polarity", Shape{d}, false, InitKind::Normal, 0, 0});
  specs.push_back({"polarity.negative", "polarity", Shape{d}, false, InitKind::Normal, 0, 0});
  specs.push_back({"output_tokens.tokens", "output_tokens", Shape{cfg.output_tokens, d}, true, InitKind::Normal, 0, 0});
  for (int64_t l = 0; l < cfg.decoder_layers; ++l) {
    const std::string base = "decoder.layer" + std::to_string(l) + ".";
    for (const char* block : {"self", "t2i", "i2t"}) {
      for (const char* mat : {"w_q", "w_k", "w_v", "w_o"}) weight(base + block + "." + mat, "decoder", d, d);
      for (const char* vec : {"b_q", "b_k", "b_v", "b_o"}) bias(base + block + "." + vec, "decoder", d);
    }
    weight(base + "mlp.w1", "decoder", d, 4 * d);
    bias(base + "mlp.b1", "decoder", 4 * d);
    weight(base + "mlp.w2", "decoder", 4 * d, d);
    bias(base + "mlp.b2", "decoder", d);
  }
  weight("decoder.pixel.w", "decoder", d, dh);
  bias("decoder.pixel.b", "decoder", dh);
  weight("decoder.token.w", "decoder", d, dh);
  bias("decoder.token.b", "decoder", dh);
  return specs;
}

struct GroupCensus {
  std::string group;
  int64_t tensors = 0;
  int64_t elements = 0;
  bool trainable = false;
};

// All model parameters plus optimizer slots. Frozen entries (the polarity
// pair) are never touched by an update.
class ModelState {
 public:
  ModelState() = default;

  static ModelState init(const ModelConfig& cfg, uint64_t seed) {
    ModelState s;
    s.cfg_ = cfg;
    s.specs_ = param_registry(cfg);
    s.params_.reserve(s.specs_.size());
    for (size_t i = 0; i < s.specs_.size(); ++i) {
      const auto& spec = s.specs_[i];
      NdArray a(spec.shape);
      Rng rng = Rng::stream(seed, i);
      switch (spec.init) {
        case InitKind::Normal: rng.fill_normal(a); break;
        case InitKind::Xavier: rng.fill_xavier(a, spec.fan_in, spec.fan_out); break;
        case InitKind::Zero: break;
      }
      s.params_.push_back(std::move(a));
    }
    s.reset_optimizer();
    return s;
  }

  const ModelConfig& config() const { return cfg_; }
  const std::vector<ParamSpec>& specs() const { return specs_; }
  std::vector<NdArray>& params() { return params_; }
  const std::vector<NdArray>& params() const { return params_; }
  NdArray& param(const std::string& name) {
    for (size_t i = 0; i < specs_.size(); ++i)
      if (specs_[i].name == name) return params_[i];
    fail(ErrCode::Config, "unknown parameter " + name);
  }
  const NdArray& param(const std::string& name) const { return const_cast<ModelState*>(this)->param(name); }

  int64_t step() const { return step_; }
  void set_step(int64_t s) { step_ = s; }
  std::vector<NdArray>& moment1() { return m_; }
  std::vector<NdArray>& moment2() { return v_; }

  void reset_optimizer() {
    m_.clear();
    v_.clear();
    for (const auto& p : params_) {
      m_.emplace_back(p.shape);
      v_.emplace_back(p.shape);
    }
    step_ = 0;
  }

  std::vector<GroupCensus> census() const {
    std::vector<GroupCensus> out;
    for (size_t i = 0; i < specs_.size(); ++i) {
      const auto& spec = specs_[i];
      auto it = std::find_if(out.begin(), out.end(), [&](const GroupCensus& g) { return g.group == spec.group; });
      if (it == out.end()) {
        out.push_back({spec.group, 0, 0, spec.trainable});
        it = out.end() - 1;
      }
      it->tensors += 1;
      it->elements += numel(spec.shape);
    }
    return out;
  }

  // restore support (checkpoint loading)
  void adopt(ModelConfig cfg, std::vector<NdArray> params, int64_t step) {
    cfg_ = cfg;
    specs_ = param_registry(cfg);
    if (params.size() != specs_.size()) fail(ErrCode::Format, "parameter count does not match registry");
    for (size_t i = 0; i < specs_.size(); ++i)
      if (params[i].shape != specs_[i].shape)
        fail(ErrCode::Format, "parameter " + specs_[i].name + " has shape " + shape_str(params[i].shape) +
                                  ", expected " + shape_str(specs_[i].shape));
    params_ = std::move(params);
    reset_optimizer();
    step_ = step;
  }

 private:
  ModelConfig cfg_;
  std::vector<ParamSpec> specs_;
  std::vector<NdArray> params_;
  std::vector<NdArray> m_, v_;
  int64_t step_ = 0;
};

// Tape-bound view of the parameters, in registry order.
template <class T>
struct BoundModel {
  ModelConfig cfg;
  TensorT<T> prototypes;
  PromptMlp<T> dense_mlp;
  PromptMlp<T> sparse_mlp;
  TensorT<T> pol_pos, pol_neg;
  TensorT<T> output_tokens;
  DecoderParams<T> decoder;
};

template <class T>
BoundModel<T> bind_model(const ModelConfig& cfg, const std::vector<TensorT<T>>& leaves) {
  BoundModel<T> m;
  m.cfg = cfg;
  size_t i = 0;
  auto next = [&]() -> const TensorT<T>& { return leaves.at(i++); };
  m.prototypes = next();
  m.dense_mlp.f_w = next();
  m.dense_mlp.f_b = next();
  m.dense_mlp.g_w = next();
  m.dense_mlp.g_b = next();
  m.sparse_mlp.f_w = next();
  m.sparse_mlp.f_b = next();
  m.sparse_mlp.g_w = next();
  m.sparse_mlp.g_b = next();
  m.pol_pos = next();
  m.pol_neg = next();
  m.output_tokens = next();
  m.decoder.upscale = cfg.upscale;
  for (int64_t l = 0; l < cfg.decoder_layers; ++l) {
    DecoderLayerParams<T> layer;
    for (AttentionParams<T>* block : {&layer.self_attn, &layer.token_to_image, &layer.image_to_token}) {
      block->w_q = next();
      block->w_k = next();
      block->w_v = next();
      block->w_o = next();
      block->b_q = next();
      block->b_k = next();
      block->b_v = next();
      block->b_o = next();
    }
    layer.mlp_w1 = next();
    layer.mlp_b1 = next();
    layer.mlp_w2 = next();
    layer.mlp_b2 = next();
    m.decoder.layers.push_back(std::move(layer));
  }
  m.decoder.pixel_w = next();
  m.decoder.pixel_b = next();
  m.decoder.token_w = next();
  m.decoder.token_b = next();
  if (i != leaves.size()) fail(ErrCode::Config, "leaf count does not match the parameter registry");
  return m;
}

template <class T>
std::vector<TensorT<T>> make_leaves(TapeT<T>& tape, const ModelState& state) {
  std::vector<TensorT<T>> leaves;
  leaves.reserve(state.params().size());
  for (size_t i = 0; i < state.params().size(); ++i)
    leaves.push_back(tape.leaf(state.params()[i], state.specs()[i].trainable));
  return leaves;
}

// Full class-prompted forward pass: similarity, activation, prompt encoding,
// decoding. Returns (u*h, u*w) mask logits for class `cls` (1-based).
template <class T>
TensorT<T> forward_logits(TapeT<T>& tape, const BoundModel<T>& m, const NdArray& embedding, int64_t cls) {
  if (embedding.shape.size() != 3) fail(ErrCode::Shape, "embedding must be (h,w,d)");
  if (embedding.shape[2] != m.cfg.channels)
    fail(ErrCode::Shape, "embedding channel count does not match model");
  if (cls < 1 || cls > m.cfg.classes)
    fail(ErrCode::Class, "prompt class " + std::to_string(cls) + " out of range");
  auto image = tape.constant(embedding);
  auto sim = compute_similarity(image, m.prototypes);
  auto activated = activate_features(image, sim);
  const int64_t h = embedding.shape[0], w = embedding.shape[1], d = embedding.shape[2];
  auto act_c = reshape(slice_rows(reshape(activated, {m.cfg.classes, h * w * d}), cls - 1, cls), {h, w, d});
  auto dense = encode_dense(act_c, m.dense_mlp);
  auto sparse = encode_sparse(activated, cls, m.sparse_mlp, m.pol_pos, m.pol_neg, m.cfg.tokens_per_class);
  return decode_mask(image, dense, sparse, m.output_tokens, m.decoder);
}

// PCL term from aggregated class embeddings: `rows` are 0-based prototype
// rows present in the aggregate, `embeds` the matching mean class embeddings.
template <class T>
TensorT<T> pcl_from_aggregates(const TensorT<T>& prototypes, const std::vector<int64_t>& rows,
                               const std::vector<NdArray>& embeds, double tau) {
  if (rows.empty() || rows.size() != embeds.size())
    fail(ErrCode::Config, "PCL aggregates must pair rows with embeddings");
  const int64_t d = prototypes.shape[1];
  auto sub_bank = gather_rows(prototypes, rows);
  std::vector<T> v(rows.size() * static_cast<size_t>(d));
  for (size_t r = 0; r < embeds.size(); ++r) {
    if (embeds[r].shape != Shape{d}) fail(ErrCode::Shape, "class embedding width mismatch");
    for (int64_t t = 0; t < d; ++t) v[r * static_cast<size_t>(d) + static_cast<size_t>(t)] =
        static_cast<T>(embeds[r].v[static_cast<size_t>(t)]);
  }
  auto v_const = prototypes.tape->constant({static_cast<int64_t>(rows.size()), d}, std::move(v));
  return prototype_contrastive_loss(sub_bank, v_const, tau);
}

// Scalar loss of one (embedding, class) sample: dice against the mask at
// logits resolution plus, optionally, PCL over this sample's class
// embeddings. Templated so gradient checking can replay it in double.
struct FullModelLoss {
  ModelConfig cfg;
  NdArray embedding;            // (h,w,d)
  int64_t cls = 1;              // prompted class, 1-based
  NdArray gt_at_logits;         // (u*h, u*w) binary
  std::vector<int64_t> pcl_rows;
  std::vector<NdArray> pcl_embeds;
  double tau = 0.07;
  bool include_pcl = true;

  template <class T>
  TensorT<T> operator()(TapeT<T>& tape, const std::vector<TensorT<T>>& leaves) const {
    BoundModel<T> m = bind_model(cfg, leaves);
    auto logits = forward_logits(tape, m, embedding, cls);
    auto dice = dice_loss(logits, gt_at_logits);
    if (!include_pcl || pcl_rows.empty()) return dice;
    return add(dice, pcl_from_aggregates(m.prototypes, pcl_rows, pcl_embeds, tau));
  }
};

}  // namespace pseg
