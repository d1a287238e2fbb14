// SPDX-License-Identifier: Apache-2.0
//
// Pre-LN transformer encoder shared by the predictor and the rewriter, and
// the masked-language-model predictor with a tied output head.

#pragma once

#include <cmath>
#include <cstddef>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "bertese/tensor.hpp"

namespace bertese {

struct ModelConfig {
  int dim = 64;
  int layers = 2;
  int heads = 4;
  int ffn_dim = 128;
  int max_len = 16;
  int vocab_size = 0;

  void validate() const {
    if (dim <= 0 || layers <= 0 || heads <= 0 || ffn_dim <= 0 || max_len <= 0 || vocab_size <= 0) {
      throw std::invalid_argument("model config: all sizes must be positive");
    }
    if (dim % heads != 0) {
      throw std::invalid_argument("model config: dim " + std::to_string(dim) +
                                  " not divisible by heads " + std::to_string(heads));
    }
  }
  bool operator==(const ModelConfig&) const = default;
};

inline constexpr double kInitStd = 0.02;
inline constexpr double kLayerNormEps = 1e-12;

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
  bool decay = true;  // decoupled weight decay applies
};

template <typename T>
struct EncoderLayer {
  Tensor<T> ln1_g, ln1_b;
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor<T> ln2_g, ln2_b;
  Tensor<T> w1, b1, w2, b2;

  template <typename Rng>
  static EncoderLayer init(const ModelConfig& c, Rng& rng) {
    const auto d = static_cast<std::size_t>(c.dim), f = static_cast<std::size_t>(c.ffn_dim);
    EncoderLayer l;
    l.ln1_g = Tensor<T>::full(1, d, T(1), true);
    l.ln1_b = Tensor<T>::zeros(1, d, true);
    l.wq = Tensor<T>::randn(d, d, kInitStd, rng, true);
    l.bq = Tensor<T>::zeros(1, d, true);
    l.wk = Tensor<T>::randn(d, d, kInitStd, rng, true);
    l.bk = Tensor<T>::zeros(1, d, true);
    l.wv = Tensor<T>::randn(d, d, kInitStd, rng, true);
    l.bv = Tensor<T>::zeros(1, d, true);
    l.wo = Tensor<T>::randn(d, d, kInitStd, rng, true);
    l.bo = Tensor<T>::zeros(1, d, true);
    l.ln2_g = Tensor<T>::full(1, d, T(1), true);
    l.ln2_b = Tensor<T>::zeros(1, d, true);
    l.w1 = Tensor<T>::randn(d, f, kInitStd, rng, true);
    l.b1 = Tensor<T>::zeros(1, f, true);
    l.w2 = Tensor<T>::randn(f, d, kInitStd, rng, true);
    l.b2 = Tensor<T>::zeros(1, d, true);
    return l;
  }

  void collect(const std::string& prefix, std::vector<NamedParam<T>>& out) const {
    out.push_back({prefix + "ln1.gamma", ln1_g, false});
    out.push_back({prefix + "ln1.beta", ln1_b, false});
    out.push_back({prefix + "attn.wq", wq, true});
    out.push_back({prefix + "attn.bq", bq, false});
    out.push_back({prefix + "attn.wk", wk, true});
    out.push_back({prefix + "attn.bk", bk, false});
    out.push_back({prefix + "attn.wv", wv, true});
    out.push_back({prefix + "attn.bv", bv, false});
    out.push_back({prefix + "attn.wo", wo, true});
    out.push_back({prefix + "attn.bo", bo, false});
    out.push_back({prefix + "ln2.gamma", ln2_g, false});
    out.push_back({prefix + "ln2.beta", ln2_b, false});
    out.push_back({prefix + "ffn.w1", w1, true});
    out.push_back({prefix + "ffn.b1", b1, false});
    out.push_back({prefix + "ffn.w2", w2, true});
    out.push_back({prefix + "ffn.b2", b2, false});
  }

  /// x + attn(ln1(x)), then + ffn(ln2(.)). x is n x d.
  Tensor<T> forward(const Tensor<T>& x, int heads) const {
    const std::size_t d = x.cols(), dh = d / static_cast<std::size_t>(heads);
    const T eps = static_cast<T>(kLayerNormEps);
    const auto h = layer_norm_rows(x, ln1_g, ln1_b, eps);
    const auto q = add(matmul(h, wq), bq);
    const auto k = add(matmul(h, wk), bk);
    const auto v = add(matmul(h, wv), bv);
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
    std::vector<Tensor<T>> ctx;
    ctx.reserve(static_cast<std::size_t>(heads));
    for (int hd = 0; hd < heads; ++hd) {
      const std::size_t off = static_cast<std::size_t>(hd) * dh;
      const auto qh = slice_cols(q, off, dh);
      const auto kh = slice_cols(k, off, dh);
      const auto vh = slice_cols(v, off, dh);
      const auto p = softmax_rows(scale(matmul_nt(qh, kh), inv_sqrt));
      ctx.push_back(matmul(p, vh));
    }
    const auto attn = add(matmul(concat_cols(ctx), wo), bo);
    const auto x1 = add(x, attn);
    const auto h2 = layer_norm_rows(x1, ln2_g, ln2_b, eps);
    const auto ff = add(matmul(gelu(add(matmul(h2, w1), b1)), w2), b2);
    return add(x1, ff);
  }
};

/// Copies parameter values from `src` into `dst` (same layout, any precision).
template <typename T, typename U>
void copy_param_values(const std::vector<NamedParam<U>>& src, std::vector<NamedParam<T>>& dst) {
  if (src.size() != dst.size()) throw std::invalid_argument("copy_param_values: layout mismatch");
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i].tensor.shape() != dst[i].tensor.shape()) {
      throw ShapeError("copy_param_values: " + src[i].name + " " + src[i].tensor.shape().str() +
                       " vs " + dst[i].tensor.shape().str());
    }
    auto out = dst[i].tensor.data();
    const auto in = src[i].tensor.data();
    for (std::size_t k = 0; k < in.size(); ++k) out[k] = static_cast<T>(in[k]);
  }
}

template <typename T>
struct PredictorOutput {
  Tensor<T> logits;  // n x V

  /// Per-position distributions o_i.
  Tensor<T> probs() const {
    NoGradGuard guard;
    return softmax_rows(logits);
  }
};

/// Masked language model: token + position embeddings, pre-LN encoder, final
/// layer norm, and logits = hidden * B_V^T + bias.
template <typename T>
class Predictor {
 public:
  Predictor() = default;

  template <typename Rng>
  static Predictor init(const ModelConfig& c, Rng& rng) {
    c.validate();
    Predictor p;
    p.config_ = c;
    const auto d = static_cast<std::size_t>(c.dim);
    p.tok_emb_ = Tensor<T>::randn(static_cast<std::size_t>(c.vocab_size), d, kInitStd, rng, true);
    p.pos_emb_ = Tensor<T>::randn(static_cast<std::size_t>(c.max_len), d, kInitStd, rng, true);
    for (int l = 0; l < c.layers; ++l) p.layers_.push_back(EncoderLayer<T>::init(c, rng));
    p.lnf_g_ = Tensor<T>::full(1, d, T(1), true);
    p.lnf_b_ = Tensor<T>::zeros(1, d, true);
    p.out_bias_ = Tensor<T>::zeros(1, static_cast<std::size_t>(c.vocab_size), true);
    return p;
  }

  const ModelConfig& config() const { return config_; }

  /// B_V: the token embedding table, shared by the input and the output head.
  const Tensor<T>& embeddings() const { return tok_emb_; }
  const Tensor<T>& position_embeddings() const { return pos_emb_; }
  const std::vector<EncoderLayer<T>>& layers() const { return layers_; }

  std::vector<NamedParam<T>> parameters() const {
    std::vector<NamedParam<T>> out;
    out.push_back({"tok_emb", tok_emb_, true});
    out.push_back({"pos_emb", pos_emb_, true});
    for (std::size_t l = 0; l < layers_.size(); ++l)
      layers_[l].collect("layer" + std::to_string(l) + ".", out);
    out.push_back({"lnf.gamma", lnf_g_, false});
    out.push_back({"lnf.beta", lnf_b_, false});
    out.push_back({"head.bias", out_bias_, false});
    return out;
  }

  void set_trainable(bool flag) {
    for (auto& p : parameters()) {
      auto t = p.tensor;
      t.set_requires_grad(flag);
      t.zero_grad();
    }
  }

  /// Independent copy with its own parameter storage.
  Predictor clone() const {
    Predictor p = *this;
    p.tok_emb_ = tok_emb_.clone();
    p.pos_emb_ = pos_emb_.clone();
    for (auto& l : p.layers_) {
      for (Tensor<T>* t : {&l.ln1_g, &l.ln1_b, &l.wq, &l.bq, &l.wk, &l.bk, &l.wv, &l.bv, &l.wo,
                           &l.bo, &l.ln2_g, &l.ln2_b, &l.w1, &l.b1, &l.w2, &l.b2})
        *t = t->clone();
    }
    p.lnf_g_ = lnf_g_.clone();
    p.lnf_b_ = lnf_b_.clone();
    p.out_bias_ = out_bias_.clone();
    return p;
  }

  /// Same weights in another precision.
  template <typename U>
  Predictor<U> cast() const {
    std::mt19937_64 rng(0);
    auto out = Predictor<U>::init(config_, rng);
    auto dst = out.parameters();
    copy_param_values(parameters(), dst);
    return out;
  }

  /// Final hidden states for token-embedding substitutes (n x d).
  Tensor<T> hidden(const Tensor<T>& vectors) const {
    if (vectors.cols() != static_cast<std::size_t>(config_.dim)) {
      throw ShapeError("predictor: input width " + std::to_string(vectors.cols()) +
                       " != model dim " + std::to_string(config_.dim));
    }
    check_length(vectors.rows());
    auto x = add(vectors, slice_rows(pos_emb_, 0, vectors.rows()));
    for (const auto& l : layers_) x = l.forward(x, config_.heads);
    return layer_norm_rows(x, lnf_g_, lnf_b_, static_cast<T>(kLayerNormEps));
  }

  Tensor<T> logits(const Tensor<T>& hidden_states) const {
    return add(matmul_nt(hidden_states, tok_emb_), out_bias_);
  }

  PredictorOutput<T> forward_vectors(const Tensor<T>& vectors) const {
    return {logits(hidden(vectors))};
  }

  PredictorOutput<T> forward_tokens(std::span<const int> ids) const {
    check_length(ids.size());
    return forward_vectors(gather_rows(tok_emb_, ids));
  }

 private:
  void check_length(std::size_t n) const {
    if (n == 0 || n > static_cast<std::size_t>(config_.max_len)) {
      throw std::length_error("predictor: sequence length " + std::to_string(n) +
                              " outside [1, " + std::to_string(config_.max_len) + "]");
    }
  }

  ModelConfig config_;
  Tensor<T> tok_emb_, pos_emb_;
  std::vector<EncoderLayer<T>> layers_;
  Tensor<T> lnf_g_, lnf_b_, out_bias_;
};

struct MaskPrediction {
  int token = 0;
  double probability = 0.0;
};

/// Most probable token at the query's mask position (lowest id on ties).
template <typename T>
MaskPrediction predict_mask_token(const Predictor<T>& model, std::span<const int> ids,
                                  std::size_t mask_index) {
  NoGradGuard guard;
  const auto out = model.forward_tokens(ids);
  if (mask_index >= out.logits.rows()) throw std::out_of_range("predict_mask_token: mask index");
  const auto probs = softmax_rows(slice_rows(out.logits, mask_index, 1));
  const std::size_t best = argmax(std::span<const T>(probs.data()));
  return {static_cast<int>(best), static_cast<double>(probs.data()[best])};
}

}  // namespace bertese
