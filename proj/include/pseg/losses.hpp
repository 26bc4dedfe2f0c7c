#pragma once

#include <vector>

#include "pseg/common.hpp"
#include "pseg/tensor.hpp"

namespace pseg {

// Per-step loss components. total is always dice + pcl.
struct LossBreakdown {
  double dice = 0.0;
  double pcl = 0.0;
  double total = 0.0;
  double tau = 0.0;
};

// Masked average of image features over the foreground of a binary h x w
// mask: v[t] = sum_ij F[i,j,t]*G[i,j] / sum_ij G[i,j].
template <class T>
TensorT<T> class_embedding(const TensorT<T>& image, const NdArray& mask) {
  if (image.shape.size() != 3) fail(ErrCode::Shape, "image embedding must be (h,w,d)");
  const int64_t h = image.shape[0], w = image.shape[1];
  if (mask.shape != Shape{h, w}) fail(ErrCode::Shape, "mask grid does not match image grid");
  double fg = 0;
  for (float m : mask.v) fg += m;
  if (fg == 0) fail(ErrCode::EmptyMask, "class embedding over an empty mask");
  TapeT<T>* tape = image.tape;
  std::vector<T> mv(mask.v.begin(), mask.v.end());
  auto g = tape->constant({h, w, 1}, std::move(mv));
  auto summed = reduce_sum(mul(image, g), {0, 1}, false);  // (d)
  return scale(summed, 1.0 / fg);
}

// Plain-array variant used where no gradient is needed (fixed prototypes,
// batch aggregation).
inline NdArray class_embedding_array(const NdArray& image, const NdArray& mask) {
  if (image.shape.size() != 3) fail(ErrCode::Shape, "image embedding must be (h,w,d)");
  const int64_t h = image.shape[0], w = image.shape[1], d = image.shape[2];
  if (mask.shape != Shape{h, w}) fail(ErrCode::Shape, "mask grid does not match image grid");
  NdArray out({d});
  double fg = 0;
  for (float m : mask.v) fg += m;
  if (fg == 0) fail(ErrCode::EmptyMask, "class embedding over an empty mask");
  for (int64_t i = 0; i < h * w; ++i) {
    if (mask.v[static_cast<size_t>(i)] == 0.0f) continue;
    for (int64_t t = 0; t < d; ++t) out.v[static_cast<size_t>(t)] += image.v[static_cast<size_t>(i * d + t)];
  }
  for (auto& x : out.v) x = static_cast<float>(x / fg);
  return out;
}

// InfoNCE-style prototype contrastive loss over prototypes B (P,d) and class
// embeddings V (P,d), both row-aligned:
//   L = -(1/P) sum_k log softmax_q(B_k . V_q / tau)[q = k]
// computed through max-shifted log-sum-exp.
template <class T>
TensorT<T> prototype_contrastive_loss(const TensorT<T>& prototypes, const TensorT<T>& embeddings, double tau) {
  if (tau <= 0) fail(ErrCode::Config, "temperature must be positive");
  if (prototypes.shape.size() != 2 || embeddings.shape.size() != 2 || prototypes.shape != embeddings.shape)
    fail(ErrCode::Shape, "prototypes and embeddings must both be (P,d)");
  const int64_t p = prototypes.shape[0];
  auto logits = scale(matmul(prototypes, transpose(embeddings)), 1.0 / tau);  // (P,P)
  auto lse = logsumexp_last(logits);                                          // (P,1)
  TapeT<T>* tape = prototypes.tape;
  std::vector<T> eye(static_cast<size_t>(p * p), T(0));
  for (int64_t i = 0; i < p; ++i) eye[static_cast<size_t>(i * p + i)] = T(1);
  auto diag = reduce_sum(mul(logits, tape->constant({p, p}, std::move(eye))), {1}, true);  // (P,1)
  return scale(sum_all(sub(lse, diag)), 1.0 / static_cast<double>(p));
}

// Dice loss from probabilities in [0,1] against a binary mask of the same
// shape, with smoothing eps added to numerator and denominator:
//   loss = 1 - (2*sum(m*g) + eps) / (sum(m^2) + sum(g^2) + eps)
// Exposed separately so tests can inject probabilities directly.
template <class T>
TensorT<T> dice_loss_from_probs(const TensorT<T>& probs, const NdArray& target, double eps = 1.0) {
  if (probs.shape != target.shape)
    fail(ErrCode::Shape, "dice probs " + shape_str(probs.shape) + " vs target " + shape_str(target.shape));
  TapeT<T>* tape = probs.tape;
  std::vector<T> tv(target.v.begin(), target.v.end());
  auto g = tape->constant(target.shape, std::move(tv));
  double gsq = 0;
  for (float x : target.v) gsq += static_cast<double>(x) * static_cast<double>(x);
  auto inter = sum_all(mul(probs, g));
  auto msq = sum_all(mul(probs, probs));
  auto num = add(scale(inter, 2.0), tape->scalar_const(static_cast<T>(eps)));
  auto den = add(msq, tape->scalar_const(static_cast<T>(gsq + eps)));
  return sub(tape->scalar_const(T(1)), div(num, den));
}

// Dice loss on raw logits: sigmoid first, then the smoothed dice objective.
template <class T>
TensorT<T> dice_loss(const TensorT<T>& logits, const NdArray& target, double eps = 1.0) {
  return dice_loss_from_probs(sigmoid(logits), target, eps);
}

// L = L_dice + L_pcl, unweighted.
template <class T>
TensorT<T> total_loss(const TensorT<T>& dice, const TensorT<T>& pcl) {
  return add(dice, pcl);
}

}  // namespace pseg
