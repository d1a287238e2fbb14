// SPDX-License-Identifier: Apache-2.0
//
// The trainable query rewriter: encodes a query into rewrite vectors, scores
// positions by closeness to the [MASK] embedding, and combines the prediction
// loss with the valid-token and single-mask auxiliary losses.

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "bertese/model.hpp"
#include "bertese/tensor.hpp"
#include "bertese/vocab.hpp"

namespace bertese {

enum class SteMode { Hard, Soft };

inline std::string to_string(SteMode m) { return m == SteMode::Hard ? "hard" : "soft"; }

inline SteMode parse_ste_mode(const std::string& s) {
  if (s == "hard") return SteMode::Hard;
  if (s == "soft") return SteMode::Soft;
  throw std::invalid_argument("ste_mode must be 'hard' or 'soft', got '" + s + "'");
}

/// Transformer encoder with its own embeddings whose final hidden states are
/// the rewrite vectors; beta = exp(log_beta) is the softmin temperature.
template <typename T>
class Rewriter {
 public:
  Rewriter() = default;

  /// Copies embeddings, position embeddings and encoder layers from the predictor.
  static Rewriter init_from(const Predictor<T>& predictor) {
    const auto src = predictor.clone();
    Rewriter r;
    r.config_ = src.config();
    r.tok_emb_ = src.embeddings();
    r.pos_emb_ = src.position_embeddings();
    r.layers_ = src.layers();
    r.log_beta_ = Tensor<T>::scalar(T(0), true);
    r.set_trainable(true);
    return r;
  }

  /// Fresh random weights (used for checkpoint round trips and tests).
  template <typename Rng>
  static Rewriter init(const ModelConfig& c, Rng& rng) {
    return init_from(Predictor<T>::init(c, rng));
  }

  const ModelConfig& config() const { return config_; }
  const Tensor<T>& log_beta() const { return log_beta_; }
  const Tensor<T>& embeddings() const { return tok_emb_; }

  Tensor<T> beta() const { return exp(log_beta_); }

  std::vector<NamedParam<T>> parameters() const {
    std::vector<NamedParam<T>> out;
    out.push_back({"tok_emb", tok_emb_, true});
    out.push_back({"pos_emb", pos_emb_, true});
    for (std::size_t l = 0; l < layers_.size(); ++l)
      layers_[l].collect("layer" + std::to_string(l) + ".", out);
    out.push_back({"log_beta", log_beta_, false});
    return out;
  }

  void set_trainable(bool flag) {
    for (auto& p : parameters()) {
      auto t = p.tensor;
      t.set_requires_grad(flag);
      t.zero_grad();
    }
  }

  Rewriter clone() const {
    Rewriter r = *this;
    r.tok_emb_ = tok_emb_.clone();
    r.pos_emb_ = pos_emb_.clone();
    for (auto& l : r.layers_) {
      for (Tensor<T>* t : {&l.ln1_g, &l.ln1_b, &l.wq, &l.bq, &l.wk, &l.bk, &l.wv, &l.bv, &l.wo,
                           &l.bo, &l.ln2_g, &l.ln2_b, &l.w1, &l.b1, &l.w2, &l.b2})
        *t = t->clone();
    }
    r.log_beta_ = log_beta_.clone();
    return r;
  }

  template <typename U>
  Rewriter<U> cast() const {
    std::mt19937_64 rng(0);
    auto out = Rewriter<U>::init(config_, rng);
    auto dst = out.parameters();
    copy_param_values(parameters(), dst);
    return out;
  }

  /// Q-hat(S): one d-dimensional vector per input position.
  Tensor<T> rewrite(std::span<const int> ids) const {
    if (ids.empty() || ids.size() > static_cast<std::size_t>(config_.max_len)) {
      throw std::length_error("rewriter: sequence length " + std::to_string(ids.size()) +
                              " outside [1, " + std::to_string(config_.max_len) + "]");
    }
    auto x = add(gather_rows(tok_emb_, ids), slice_rows(pos_emb_, 0, ids.size()));
    for (const auto& l : layers_) x = l.forward(x, config_.heads);
    return x;
  }

 private:
  ModelConfig config_;
  Tensor<T> tok_emb_, pos_emb_;
  std::vector<EncoderLayer<T>> layers_;
  Tensor<T> log_beta_;
};

// ---------------------------------------------------------------------------
// Loss terms

/// f1: mean over positions of the squared distance to the nearest embedding row.
template <typename T>
Tensor<T> valid_token_loss(const Tensor<T>& q_hat, const Tensor<T>& embeddings) {
  return mean(min_cols(sq_dist_rows(q_hat, embeddings)));
}

/// Softmin over positions of beta * ||B_mask - q_i||^2 (1 x n).
template <typename T>
Tensor<T> mask_distribution(const Tensor<T>& q_hat, const Tensor<T>& mask_embedding,
                            const Tensor<T>& beta) {
  if (mask_embedding.rows() != 1) {
    throw ShapeError("mask_distribution: mask embedding must be one row, got " +
                     mask_embedding.shape().str());
  }
  if (beta.numel() != 1) throw ShapeError("mask_distribution: beta must be a scalar");
  if (!(beta.item() > T(0))) throw std::invalid_argument("mask_distribution: beta must be positive");
  return softmax_rows(neg(mul(beta, sq_dist_rows(mask_embedding, q_hat))));
}

/// f2 = -max_i m_i.
template <typename T>
Tensor<T> single_mask_loss(const Tensor<T>& m) {
  return neg(max_all(m));
}

/// Per-position cross-entropy of the gold answer, l(y, o_i), as a 1 x n row.
template <typename T>
Tensor<T> position_cross_entropy(const PredictorOutput<T>& out, int answer) {
  if (answer < 0 || static_cast<std::size_t>(answer) >= out.logits.cols()) {
    throw std::out_of_range("prediction_loss: answer " + std::to_string(answer) + " outside vocabulary");
  }
  return transpose(neg(select_col(log_softmax_rows(out.logits), static_cast<std::size_t>(answer))));
}

/// f_CE = sum_i w_i l(y, o_i) with w = m (soft) or the straight-through
/// one-hot of argmax m (hard).
template <typename T>
Tensor<T> prediction_loss(const Tensor<T>& m, const PredictorOutput<T>& out, int answer,
                          SteMode mode) {
  if (m.rows() != 1 || m.cols() != out.logits.rows()) {
    throw ShapeError("prediction_loss: distribution " + m.shape().str() + " vs predictor output " +
                     out.logits.shape().str());
  }
  const auto ell = position_cross_entropy(out, answer);
  const auto w = mode == SteMode::Hard ? ste_hardmax(m) : m;
  return sum(mul(w, ell));
}

template <typename T>
struct LossBreakdown {
  Tensor<T> total;
  double f1 = 0, f2 = 0, f_ce = 0;
  double lambda1 = 0, lambda2 = 0;
  double value = 0;  // total.item()
};

/// L = f_ce + lambda1 * f1 + lambda2 * f2.
template <typename T>
LossBreakdown<T> total_loss(const Tensor<T>& f_ce, const Tensor<T>& f1, const Tensor<T>& f2,
                            double lambda1, double lambda2) {
  if (lambda1 < 0 || lambda2 < 0) throw std::invalid_argument("total_loss: lambdas must be >= 0");
  LossBreakdown<T> b;
  b.total = add(add(f_ce, scale(f1, static_cast<T>(lambda1))), scale(f2, static_cast<T>(lambda2)));
  b.f1 = static_cast<double>(f1.item());
  b.f2 = static_cast<double>(f2.item());
  b.f_ce = static_cast<double>(f_ce.item());
  b.lambda1 = lambda1;
  b.lambda2 = lambda2;
  b.value = static_cast<double>(b.total.item());
  return b;
}

struct LossOptions {
  double lambda1 = 0.3;
  double lambda2 = 0.5;
  SteMode ste_mode = SteMode::Hard;
  bool snap_input = false;  // feed nearest-row embeddings with straight-through gradients
};

/// Full training objective for one query against a frozen predictor.
template <typename T>
LossBreakdown<T> bertese_loss(const Rewriter<T>& rewriter, const Predictor<T>& predictor,
                              std::span<const int> ids, int answer, const LossOptions& opt) {
  const auto q_hat = rewriter.rewrite(ids);
  const auto& table = predictor.embeddings();
  const auto f1 = valid_token_loss(q_hat, table);
  const auto m = mask_distribution(q_hat, slice_rows(table, kMaskId, 1), rewriter.beta());
  const auto f2 = single_mask_loss(m);
  const auto input = opt.snap_input ? ste_snap_rows(q_hat, table) : q_hat;
  const auto f_ce = prediction_loss(m, predictor.forward_vectors(input), answer, opt.ste_mode);
  return total_loss(f_ce, f1, f2, opt.lambda1, opt.lambda2);
}

/// Mean over positions of ||q_hat_i - q_i||^2.
template <typename T>
Tensor<T> identity_pretrain_loss(const Tensor<T>& q_hat, const Tensor<T>& q_input) {
  if (q_hat.shape() != q_input.shape()) {
    throw ShapeError("identity_pretrain_loss: shape mismatch " + q_hat.shape().str() + " vs " +
                     q_input.shape().str());
  }
  const auto diff = sub(q_hat, q_input);
  return scale(sum(mul(diff, diff)), T(1) / static_cast<T>(q_hat.rows()));
}

// ---------------------------------------------------------------------------
// Inference

/// Nearest embedding row per position (inference only, lowest index on ties).
template <typename T>
std::vector<int> project_to_tokens(const Tensor<T>& q_hat, const Tensor<T>& embeddings) {
  return nearest_rows(q_hat, embeddings);
}

template <typename T>
struct RewriteResult {
  Tensor<T> q_hat;
  std::vector<double> m;
  std::vector<int> projected_ids;
  std::size_t mask_position = 0;
};

template <typename T>
RewriteResult<T> rewrite_query(const Rewriter<T>& rewriter, const Predictor<T>& predictor,
                               std::span<const int> ids) {
  NoGradGuard guard;
  RewriteResult<T> r;
  r.q_hat = rewriter.rewrite(ids);
  const auto& table = predictor.embeddings();
  const auto m = mask_distribution(r.q_hat, slice_rows(table, kMaskId, 1), rewriter.beta());
  r.m.assign(m.data().begin(), m.data().end());
  r.mask_position = argmax(std::span<const double>(r.m));
  r.projected_ids = project_to_tokens(r.q_hat, table);
  return r;
}

struct InferenceResult {
  int answer = 0;
  double probability = 0.0;
  std::vector<int> projected_ids;  // raw nearest-row projection
  std::vector<int> rewritten_ids;  // projection with [MASK] forced at mask_position
  std::size_t mask_position = 0;

  int projected_mask_count() const {
    return static_cast<int>(std::count(projected_ids.begin(), projected_ids.end(), kMaskId));
  }
};

/// Rewrite, project to tokens, force a single [MASK] at argmax m, and read
/// the predictor's answer there.
template <typename T>
InferenceResult infer_answer(const Rewriter<T>& rewriter, const Predictor<T>& predictor,
                             std::span<const int> ids) {
  const auto rw = rewrite_query(rewriter, predictor, ids);
  InferenceResult out;
  out.projected_ids = rw.projected_ids;
  out.mask_position = rw.mask_position;
  out.rewritten_ids = rw.projected_ids;
  const auto& table = predictor.embeddings();
  const std::size_t d = table.cols();
  for (std::size_t i = 0; i < out.rewritten_ids.size(); ++i) {
    if (out.rewritten_ids[i] != kMaskId || i == rw.mask_position) continue;
    // Extra mask-like positions take their nearest non-[MASK] row.
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t v = 0; v < table.rows(); ++v) {
      if (static_cast<int>(v) == kMaskId) continue;
      double s = 0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = static_cast<double>(rw.q_hat(i, k)) - static_cast<double>(table(v, k));
        s += diff * diff;
      }
      if (s < best) {
        best = s;
        out.rewritten_ids[i] = static_cast<int>(v);
      }
    }
  }
  out.rewritten_ids[rw.mask_position] = kMaskId;
  const auto pred = predict_mask_token(predictor, out.rewritten_ids, rw.mask_position);
  out.answer = pred.token;
  out.probability = pred.probability;
  return out;
}

}  // namespace bertese
