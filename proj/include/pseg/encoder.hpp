#pragma once

#include "pseg/common.hpp"
#include "pseg/tensor.hpp"

// Prototype-based class prompt encoding: similarity maps between image
// features and per-class prototypes, spatial-attention activation, and the
// dense / sparse prompt embedding MLPs.
namespace pseg {

template <class T>
struct PromptMlp {
  TensorT<T> f_w, f_b;  // d -> r
  TensorT<T> g_w, g_b;  // r -> out
};

// S[k,i,j] = sum_t F[i,j,t] * B[k,t].  F is (h,w,d), B is (C,d), S is (C,h,w).
template <class T>
TensorT<T> compute_similarity(const TensorT<T>& image, const TensorT<T>& prototypes) {
  if (image.shape.size() != 3) fail(ErrCode::Shape, "image embedding must be (h,w,d)");
  if (prototypes.shape.size() != 2) fail(ErrCode::Shape, "prototype bank must be (C,d)");
  const int64_t h = image.shape[0], w = image.shape[1], d = image.shape[2];
  const int64_t classes = prototypes.shape[0];
  if (prototypes.shape[1] != d)
    fail(ErrCode::Shape, "prototype width " + std::to_string(prototypes.shape[1]) +
                             " does not match channel count " + std::to_string(d));
  auto flat = reshape(image, {h * w, d});
  auto sim = matmul(flat, transpose(prototypes));   // (hw, C)
  return reshape(transpose(sim), {classes, h, w});  // (C, h, w)
}

// F^(k) = F ∘ S^(k) + F, the similarity map acting as spatial attention with
// a residual. Output is (C,h,w,d).
template <class T>
TensorT<T> activate_features(const TensorT<T>& image, const TensorT<T>& similarity) {
  if (image.shape.size() != 3 || similarity.shape.size() != 3)
    fail(ErrCode::Shape, "activate_features expects (h,w,d) and (C,h,w)");
  const int64_t h = image.shape[0], w = image.shape[1], d = image.shape[2];
  if (similarity.shape[1] != h || similarity.shape[2] != w)
    fail(ErrCode::Shape, "similarity grid does not match image grid");
  const int64_t classes = similarity.shape[0];
  auto img = reshape(image, {1, h, w, d});
  auto sim = reshape(similarity, {classes, h, w, 1});
  return add(mul(img, sim), img);
}

// Per-location two-layer MLP d -> r_D -> d over one class-activated feature
// grid (h,w,d); the spatial extent is preserved.
template <class T>
TensorT<T> encode_dense(const TensorT<T>& activated, const PromptMlp<T>& mlp) {
  if (activated.shape.size() != 3) fail(ErrCode::Shape, "dense encoder expects (h,w,d)");
  const int64_t h = activated.shape[0], w = activated.shape[1], d = activated.shape[2];
  if (mlp.f_w.shape[0] != d) fail(ErrCode::Shape, "dense MLP input width mismatch");
  auto x = reshape(activated, {h * w, d});
  auto hidden = relu(add(matmul(x, mlp.f_w), mlp.f_b));
  auto out = add(matmul(hidden, mlp.g_w), mlp.g_b);
  return reshape(out, {h, w, d});
}

// Sparse prompt embeddings from all class-activated features (C,h,w,d):
// per-location d -> r_S affine, ReLU, spatial mean-pool, r_S -> n*d affine,
// reshape to (C,n,d), then add the positive polarity vector to the prompted
// class rows and the negative one to all other rows. Returns the flattened
// (C*n, d) view, class-major / token-minor.
template <class T>
TensorT<T> encode_sparse(const TensorT<T>& activated_all, int64_t cls, const PromptMlp<T>& mlp,
                         const TensorT<T>& pol_pos, const TensorT<T>& pol_neg, int64_t tokens_per_class) {
  if (activated_all.shape.size() != 4) fail(ErrCode::Shape, "sparse encoder expects (C,h,w,d)");
  const int64_t classes = activated_all.shape[0];
  const int64_t h = activated_all.shape[1], w = activated_all.shape[2], d = activated_all.shape[3];
  if (cls < 1 || cls > classes)
    fail(ErrCode::Class, "prompt class " + std::to_string(cls) + " out of range 1.." + std::to_string(classes));
  const int64_t n = tokens_per_class;
  if (mlp.g_w.shape[1] != n * d) fail(ErrCode::Shape, "sparse MLP output width must be n*d");

  auto x = reshape(activated_all, {classes * h * w, d});
  auto hidden = relu(add(matmul(x, mlp.f_w), mlp.f_b));               // (C*hw, r_S)
  const int64_t r_s = hidden.shape[1];
  auto pooled = reduce_sum(reshape(hidden, {classes, h * w, r_s}), {1}, false);  // (C, r_S)
  pooled = scale(pooled, 1.0 / static_cast<double>(h * w));
  auto tokens = add(matmul(pooled, mlp.g_w), mlp.g_b);                // (C, n*d)
  auto cube = reshape(tokens, {classes, n, d});

  // polarity: one-hot selector over classes picks lambda+ for the prompted
  // class and lambda- for the rest
  TapeT<T>* tape = activated_all.tape;
  std::vector<T> sel_pos(static_cast<size_t>(classes), T(0));
  std::vector<T> sel_neg(static_cast<size_t>(classes), T(1));
  sel_pos[static_cast<size_t>(cls - 1)] = T(1);
  sel_neg[static_cast<size_t>(cls - 1)] = T(0);
  auto mask_pos = tape->constant({classes, 1, 1}, std::move(sel_pos));
  auto mask_neg = tape->constant({classes, 1, 1}, std::move(sel_neg));
  auto lp = reshape(pol_pos, {1, 1, d});
  auto ln = reshape(pol_neg, {1, 1, d});
  auto polarity = add(mul(mask_pos, lp), mul(mask_neg, ln));          // (C,1,d)
  return reshape(add(cube, polarity), {classes * n, d});
}

// Min-max normalisation of one class similarity map to [0,1]; a constant map
// normalises to all zeros.
inline NdArray export_similarity_map(const NdArray& similarity, int64_t cls) {
  if (similarity.shape.size() != 3) fail(ErrCode::Shape, "similarity must be (C,h,w)");
  const int64_t classes = similarity.shape[0];
  const int64_t h = similarity.shape[1], w = similarity.shape[2];
  if (cls < 1 || cls > classes)
    fail(ErrCode::Class, "class " + std::to_string(cls) + " out of range 1.." + std::to_string(classes));
  NdArray out({h, w});
  const float* src = similarity.v.data() + (cls - 1) * h * w;
  float lo = src[0], hi = src[0];
  for (int64_t i = 1; i < h * w; ++i) {
    lo = std::min(lo, src[i]);
    hi = std::max(hi, src[i]);
  }
  if (hi == lo) return out;  // degenerate range -> zeros
  for (int64_t i = 0; i < h * w; ++i) out.v[static_cast<size_t>(i)] = (src[i] - lo) / (hi - lo);
  return out;
}

}  // namespace pseg
