#pragma once

#include <cmath>
#include <vector>

#include "pseg/common.hpp"
#include "pseg/tensor.hpp"

// Minimal two-way decoder. Token stream = [output tokens ; sparse prompt
// tokens]; image stream = image embedding + dense prompt embedding. Each of
// the L layers runs, with residual connections:
//   tokens += self_attention(tokens)
//   tokens += cross_attention(tokens -> image)
//   tokens += mlp(tokens)
//   image  += cross_attention(image -> tokens)
// then the image grid is bilinearly upscaled by u, projected per pixel to d'
// channels, and the mask logit at each pixel is the inner product with the
// projected mask token (token stream row 0), scaled by 1/d' so the logit
// magnitude stays in the sigmoid's responsive range at init. Single attention
// head; no positional encodings at this scale.
namespace pseg {

template <class T>
struct AttentionParams {
  TensorT<T> w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o;  // all d -> d
};

template <class T>
struct DecoderLayerParams {
  AttentionParams<T> self_attn;
  AttentionParams<T> token_to_image;
  AttentionParams<T> image_to_token;
  TensorT<T> mlp_w1, mlp_b1;  // d -> 4d
  TensorT<T> mlp_w2, mlp_b2;  // 4d -> d
};

template <class T>
struct DecoderParams {
  std::vector<DecoderLayerParams<T>> layers;
  TensorT<T> pixel_w, pixel_b;  // d -> d'
  TensorT<T> token_w, token_b;  // d -> d'
  int64_t upscale = 4;
};

template <class T>
TensorT<T> attention(const TensorT<T>& query, const TensorT<T>& keyval, const AttentionParams<T>& p) {
  const int64_t d = query.shape[1];
  auto q = add(matmul(query, p.w_q), p.b_q);
  auto k = add(matmul(keyval, p.w_k), p.b_k);
  auto v = add(matmul(keyval, p.w_v), p.b_v);
  auto logits = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(d)));
  auto weights = softmax_last(logits);
  return add(matmul(matmul(weights, v), p.w_o), p.b_o);
}

template <class T>
TensorT<T> decode_mask(const TensorT<T>& image,         // (h,w,d)
                       const TensorT<T>& dense_prompt,  // (h,w,d)
                       const TensorT<T>& sparse_prompt, // (C*n, d)
                       const TensorT<T>& output_tokens, // (n_out, d)
                       const DecoderParams<T>& params) {
  if (image.shape.size() != 3 || dense_prompt.shape.size() != 3)
    fail(ErrCode::Shape, "decoder expects (h,w,d) image and dense prompt");
  if (image.shape != dense_prompt.shape)
    fail(ErrCode::Shape, "dense prompt shape " + shape_str(dense_prompt.shape) +
                             " does not match image " + shape_str(image.shape));
  const int64_t h = image.shape[0], w = image.shape[1], d = image.shape[2];
  if (sparse_prompt.shape.size() != 2 || sparse_prompt.shape[1] != d)
    fail(ErrCode::Shape, "sparse prompt must be (C*n, d)");
  if (output_tokens.shape.size() != 2 || output_tokens.shape[1] != d)
    fail(ErrCode::Shape, "output tokens must be (n_out, d)");

  auto img = reshape(add(image, dense_prompt), {h * w, d});
  auto tok = concat_rows(output_tokens, sparse_prompt);

  for (const auto& layer : params.layers) {
    tok = add(tok, attention(tok, tok, layer.self_attn));
    tok = add(tok, attention(tok, img, layer.token_to_image));
    auto hidden = relu(add(matmul(tok, layer.mlp_w1), layer.mlp_b1));
    tok = add(tok, add(matmul(hidden, layer.mlp_w2), layer.mlp_b2));
    img = add(img, attention(img, tok, layer.image_to_token));
  }

  const int64_t u = params.upscale;
  auto up = upsample_bilinear(reshape(img, {h, w, d}), u);
  auto pixels = add(matmul(reshape(up, {h * u * w * u, d}), params.pixel_w), params.pixel_b);
  auto mask_token = slice_rows(tok, 0, 1);
  auto head = add(matmul(mask_token, params.token_w), params.token_b);  // (1, d')
  const int64_t head_dim = params.pixel_w.shape[1];
  auto logits = scale(matmul(pixels, transpose(head)), 1.0 / static_cast<double>(head_dim));
  return reshape(logits, {h * u, w * u});
}

}  // namespace pseg
