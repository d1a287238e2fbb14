// SPDX-License-Identifier: Apache-2.0
//
// Training stages: predictor MLM pretraining, rewriter identity pretraining,
// rewriter training against a frozen predictor, and the fine-tuned predictor
// baseline.

#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "bertese/checkpoint.hpp"
#include "bertese/config.hpp"
#include "bertese/evaluation.hpp"
#include "bertese/model.hpp"
#include "bertese/optim.hpp"
#include "bertese/rewriter.hpp"
#include "bertese/world.hpp"

namespace bertese {

/// A stage that missed its success criterion.
class StageFailure : public std::runtime_error {
 public:
  StageFailure(std::string stage, const std::string& what)
      : std::runtime_error(stage + ": " + what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

/// Metrics stream: one JSON object per line. Records are kept in memory and,
/// when a path is set, appended to the file as they arrive.
class RunLog {
 public:
  RunLog() = default;
  explicit RunLog(std::filesystem::path path) : path_(std::move(path)) {}

  void set_echo(std::ostream* echo) { echo_ = echo; }

  void write(const nlohmann::json& record) {
    records_.push_back(record);
    if (!path_.empty()) {
      std::ofstream out(path_, std::ios::app);
      if (!out) throw std::runtime_error("cannot append to run log " + path_.string());
      out << record.dump() << "\n";
    }
    if (echo_) *echo_ << record.dump() << std::endl;
  }

  const std::vector<nlohmann::json>& records() const { return records_; }

 private:
  std::filesystem::path path_;
  std::ostream* echo_ = nullptr;
  std::vector<nlohmann::json> records_;
};

namespace detail {

inline void require_finite(double v, const std::string& stage, int epoch, std::size_t batch) {
  if (!std::isfinite(v)) {
    throw StageFailure(stage, "non-finite loss in epoch " + std::to_string(epoch) + ", batch " +
                                  std::to_string(batch));
  }
}

/// Deterministic epoch order.
inline std::vector<std::size_t> shuffled_indices(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

struct EpochStats {
  double L = 0, f1 = 0, f2 = 0, f_ce = 0;
  std::size_t examples = 0;
};

template <typename T>
struct ExampleLoss {
  Tensor<T> loss;
  double f1 = 0, f2 = 0, f_ce = 0;
};

/// One epoch of mini-batch updates. `loss_fn(i, rng)` returns the loss for
/// example i together with the breakdown to average.
template <typename T, typename LossFn>
EpochStats run_epoch(AdamW<T>& opt, const std::vector<NamedParam<T>>& params, std::size_t n,
                     const StageConfig& stage, double clip_norm, std::mt19937_64& rng,
                     const std::string& stage_name, int epoch, LossFn&& loss_fn) {
  EpochStats stats;
  const auto order = shuffled_indices(n, rng);
  const std::size_t bs = static_cast<std::size_t>(stage.batch_size);
  std::size_t batch_id = 0;
  for (std::size_t start = 0; start < n; start += bs, ++batch_id) {
    const std::size_t end = std::min(n, start + bs);
    opt.zero_grad();
    const T inv = T(1) / static_cast<T>(end - start);
    for (std::size_t k = start; k < end; ++k) {
      ExampleLoss<T> ex = loss_fn(order[k], rng);
      const double value = static_cast<double>(ex.loss.item());
      require_finite(value, stage_name, epoch, batch_id);
      backward(scale(ex.loss, inv));
      stats.L += value;
      stats.f1 += ex.f1;
      stats.f2 += ex.f2;
      stats.f_ce += ex.f_ce;
      ++stats.examples;
    }
    const double norm = clip_grad_norm(params, clip_norm);
    if (!std::isfinite(norm)) {
      throw StageFailure(stage_name, "non-finite gradient in epoch " + std::to_string(epoch) + ", batch " +
                                         std::to_string(batch_id));
    }
    opt.step(stage.learning_rate);
  }
  if (stats.examples) {
    const double d = static_cast<double>(stats.examples);
    stats.L /= d;
    stats.f1 /= d;
    stats.f2 /= d;
    stats.f_ce /= d;
  }
  return stats;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Predictor

/// One masked-language-model example: the object slot is masked with
/// probability kObjectMaskRate, otherwise a uniformly chosen non-special position.
struct MlmExample {
  std::vector<int> ids;
  std::size_t position = 0;
  int target = 0;
};

inline constexpr double kObjectMaskRate = 0.5;

inline MlmExample make_mlm_example(const std::vector<int>& sentence, std::size_t object_position,
                                   std::mt19937_64& rng) {
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < sentence.size(); ++i)
    if (sentence[i] >= kNumSpecial) candidates.push_back(i);
  if (candidates.empty()) throw std::invalid_argument("mlm: sentence has no maskable token");
  std::size_t pos = object_position;
  const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  if (u >= kObjectMaskRate || sentence.at(object_position) < kNumSpecial) {
    pos = candidates[static_cast<std::size_t>(rng() % candidates.size())];
  }
  MlmExample ex{sentence, pos, sentence[pos]};
  ex.ids[pos] = kMaskId;
  return ex;
}

template <typename T>
Tensor<T> mlm_loss(const Predictor<T>& model, const MlmExample& ex) {
  const auto h = model.hidden(gather_rows(model.embeddings(), std::span<const int>(ex.ids)));
  const auto logits = model.logits(slice_rows(h, ex.position, 1));
  const int target = ex.target;
  return cross_entropy(logits, std::span<const int>(&target, 1));
}

template <typename T>
struct PredictorStageResult {
  Predictor<T> model;
  double canonical_p_at_1 = 0;
  int epochs_run = 0;
};

inline constexpr double kPredictorTarget = 0.95;
inline constexpr double kPredictorFloor = 0.80;

template <typename T>
PredictorStageResult<T> train_predictor_stage(const World& world, const TrainingConfig& cfg, RunLog& log) {
  const std::string stage = "train-predictor";
  std::mt19937_64 rng(derive_seed(cfg.seed, "predictor"));
  auto model = Predictor<T>::init(cfg.model_config(static_cast<int>(world.vocab.size())), rng);
  auto params = model.parameters();
  AdamW<T> opt(params, cfg.adamw);

  std::vector<std::vector<int>> sentences;
  std::vector<std::size_t> object_pos;
  for (const auto& f : world.facts) {
    sentences.push_back(world.fact_sentence(f));
    const auto& words = world.relations[f.relation].canonical_words;
    const auto it = std::find(words.begin(), words.end(), std::string(kMaskToken));
    object_pos.push_back(static_cast<std::size_t>(it - words.begin()) + 1);
  }

  PredictorStageResult<T> result{model, 0.0, 0};
  for (int epoch = 1; epoch <= cfg.predictor.epochs; ++epoch) {
    const auto stats = detail::run_epoch<T>(
        opt, params, sentences.size(), cfg.predictor, cfg.clip_norm, rng, stage, epoch,
        [&](std::size_t i, std::mt19937_64& r) {
          const auto ex = make_mlm_example(sentences[i], object_pos[i], r);
          auto loss = mlm_loss(model, ex);
          const double v = static_cast<double>(loss.item());
          return detail::ExampleLoss<T>{loss, 0, 0, v};
        });
    const auto report = evaluate_predictor(model, world.canonical, "predictor", "canonical");
    result.canonical_p_at_1 = report.macro_p_at_1;
    result.epochs_run = epoch;
    log.write({{"stage", stage}, {"epoch", epoch}, {"step", opt.step_count()}, {"f1", nullptr},
               {"f2", nullptr}, {"f_ce", stats.f_ce}, {"L", stats.L}, {"p_at_1", report.macro_p_at_1}});
    if (report.macro_p_at_1 >= kPredictorTarget) break;
  }
  if (result.canonical_p_at_1 < kPredictorFloor) {
    throw StageFailure(stage, "canonical P@1 " + percent(result.canonical_p_at_1) + "% is below the 80% floor after " +
                                  std::to_string(result.epochs_run) + " epochs");
  }
  result.model = model;
  return result;
}

// ---------------------------------------------------------------------------
// Identity pretraining

/// Fraction of queries whose nearest-row projection reproduces every input token.
template <typename T>
double decode_accuracy(const Rewriter<T>& rewriter, const Predictor<T>& predictor,
                       const std::vector<ClozeQuery>& queries) {
  if (queries.empty()) return 0.0;
  NoGradGuard guard;
  std::size_t exact = 0;
  for (const auto& q : queries) {
    const auto ids = project_to_tokens(rewriter.rewrite(q.tokens), predictor.embeddings());
    exact += ids == q.tokens ? 1 : 0;
  }
  return static_cast<double>(exact) / static_cast<double>(queries.size());
}

/// Fraction of queries on which infer_answer matches the predictor's own answer.
template <typename T>
double zero_shot_agreement(const Rewriter<T>& rewriter, const Predictor<T>& predictor,
                           const std::vector<ClozeQuery>& queries) {
  if (queries.empty()) return 0.0;
  std::size_t same = 0;
  for (const auto& q : queries) {
    const auto a = infer_answer(rewriter, predictor, q.tokens).answer;
    const auto b = predict_mask_token(predictor, q.tokens, q.mask_index).token;
    same += a == b ? 1 : 0;
  }
  return static_cast<double>(same) / static_cast<double>(queries.size());
}

template <typename T>
struct IdentityStageResult {
  Rewriter<T> model;
  double decode_accuracy = 0;
  double agreement = 0;  // infer_answer vs direct predictor answer, held-out queries
  int epochs_run = 0;
};

inline constexpr double kIdentityTarget = 0.99;
inline constexpr double kIdentityFloor = 0.95;

/// Held-out queries are those about eval-split subjects, in both phrasings.
inline std::vector<ClozeQuery> identity_heldout(const World& world) {
  auto held = world.canonical_eval();
  const auto pe = world.perturbed_eval();
  held.insert(held.end(), pe.begin(), pe.end());
  return held;
}

template <typename T>
IdentityStageResult<T> pretrain_rewriter_stage(const Predictor<T>& predictor, const World& world,
                                               const TrainingConfig& cfg, RunLog& log) {
  const std::string stage = "pretrain-rewriter";
  std::mt19937_64 rng(derive_seed(cfg.seed, "identity"));
  auto frozen = predictor.clone();
  frozen.set_trainable(false);
  auto rewriter = Rewriter<T>::init_from(frozen);
  auto params = rewriter.parameters();
  AdamW<T> opt(params, cfg.adamw);

  auto pool = world.canonical_train();
  const auto pt = world.perturbed_train();
  pool.insert(pool.end(), pt.begin(), pt.end());
  const auto held = identity_heldout(world);

  IdentityStageResult<T> result{rewriter, 0.0, 0.0, 0};
  result.decode_accuracy = decode_accuracy(rewriter, frozen, held);
  log.write({{"stage", stage}, {"epoch", 0}, {"step", 0}, {"f1", nullptr}, {"f2", nullptr}, {"f_ce", nullptr},
             {"L", nullptr}, {"decode_accuracy", result.decode_accuracy}});
  for (int epoch = 1; epoch <= cfg.identity.epochs && result.decode_accuracy < kIdentityTarget; ++epoch) {
    const auto stats = detail::run_epoch<T>(
        opt, params, pool.size(), cfg.identity, cfg.clip_norm, rng, stage, epoch,
        [&](std::size_t i, std::mt19937_64&) {
          const auto& ids = pool[i].tokens;
          const auto target = gather_rows(frozen.embeddings(), std::span<const int>(ids));
          auto loss = identity_pretrain_loss(rewriter.rewrite(ids), target);
          return detail::ExampleLoss<T>{loss, 0, 0, 0};
        });
    result.decode_accuracy = decode_accuracy(rewriter, frozen, held);
    result.epochs_run = epoch;
    log.write({{"stage", stage}, {"epoch", epoch}, {"step", opt.step_count()}, {"f1", nullptr}, {"f2", nullptr},
               {"f_ce", nullptr}, {"L", stats.L}, {"decode_accuracy", result.decode_accuracy}});
  }
  if (result.decode_accuracy < kIdentityFloor) {
    throw StageFailure(stage, "held-out decode accuracy " + percent(result.decode_accuracy) +
                                  "% is below the 95% floor after " + std::to_string(result.epochs_run) + " epochs");
  }
  result.agreement = zero_shot_agreement(rewriter, frozen, held);
  result.model = rewriter;
  return result;
}

// ---------------------------------------------------------------------------
// Rewriter training

template <typename T>
struct BerteseStageResult {
  Rewriter<T> model;
  double initial_p_at_1 = 0;  // identity-initialized rewriter on the eval split
  double p_at_1 = 0;
  std::string predictor_digest_before;
  std::string predictor_digest_after;
};

template <typename T>
BerteseStageResult<T> train_bertese_stage(const Rewriter<T>& init, const Predictor<T>& predictor, const World& world,
                                          const TrainingConfig& cfg, RunLog& log,
                                          const std::string& stage = "train-bertese") {
  std::mt19937_64 rng(derive_seed(cfg.seed, "bertese"));
  BerteseStageResult<T> result{init.clone(), 0, 0, model_digest(predictor, "predictor"), {}};
  auto frozen = predictor.clone();
  frozen.set_trainable(false);
  auto rewriter = init.clone();
  auto params = rewriter.parameters();
  AdamW<T> opt(params, cfg.adamw);
  const auto opts = cfg.loss_options();

  const auto train = world.perturbed_train();
  const auto eval = world.perturbed_eval();
  result.initial_p_at_1 = evaluate_bertese(rewriter, frozen, eval).macro_p_at_1;
  log.write({{"stage", stage}, {"epoch", 0}, {"step", 0}, {"f1", nullptr}, {"f2", nullptr}, {"f_ce", nullptr},
             {"L", nullptr}, {"p_at_1", result.initial_p_at_1}});
  result.p_at_1 = result.initial_p_at_1;
  for (int epoch = 1; epoch <= cfg.bertese.epochs; ++epoch) {
    const auto stats = detail::run_epoch<T>(
        opt, params, train.size(), cfg.bertese, cfg.clip_norm, rng, stage, epoch,
        [&](std::size_t i, std::mt19937_64&) {
          auto b = bertese_loss(rewriter, frozen, std::span<const int>(train[i].tokens), train[i].answer, opts);
          return detail::ExampleLoss<T>{b.total, b.f1, b.f2, b.f_ce};
        });
    result.p_at_1 = evaluate_bertese(rewriter, frozen, eval).macro_p_at_1;
    log.write({{"stage", stage}, {"epoch", epoch}, {"step", opt.step_count()}, {"f1", stats.f1}, {"f2", stats.f2},
               {"f_ce", stats.f_ce}, {"L", stats.L}, {"p_at_1", result.p_at_1}});
  }
  result.predictor_digest_after = model_digest(predictor, "predictor");
  if (result.predictor_digest_after != result.predictor_digest_before ||
      model_digest(frozen, "predictor") != result.predictor_digest_before) {
    throw StageFailure(stage, "predictor parameters changed during rewriter training");
  }
  result.model = rewriter;
  return result;
}

// ---------------------------------------------------------------------------
// Fine-tuned predictor baseline

template <typename T>
struct FtStageResult {
  Predictor<T> model;
  double zero_shot_p_at_1 = 0;
  double p_at_1 = 0;
};

template <typename T>
FtStageResult<T> train_ft_baseline(const Predictor<T>& predictor, const World& world, const TrainingConfig& cfg,
                                   RunLog& log) {
  const std::string stage = "train-ft-baseline";
  std::mt19937_64 rng(derive_seed(cfg.seed, "ft"));
  const auto digest = model_digest(predictor, "predictor");
  auto model = predictor.clone();
  model.set_trainable(true);
  auto params = model.parameters();
  AdamW<T> opt(params, cfg.adamw);

  const auto train = world.perturbed_train();
  const auto eval = world.perturbed_eval();
  FtStageResult<T> result{model, evaluate_predictor(predictor, eval, "zero-shot").macro_p_at_1, 0};
  result.p_at_1 = result.zero_shot_p_at_1;
  log.write({{"stage", stage}, {"epoch", 0}, {"step", 0}, {"f1", nullptr}, {"f2", nullptr}, {"f_ce", nullptr},
             {"L", nullptr}, {"p_at_1", result.p_at_1}});
  for (int epoch = 1; epoch <= cfg.ft.epochs; ++epoch) {
    const auto stats = detail::run_epoch<T>(
        opt, params, train.size(), cfg.ft, cfg.clip_norm, rng, stage, epoch,
        [&](std::size_t i, std::mt19937_64&) {
          const MlmExample ex{train[i].tokens, train[i].mask_index, train[i].answer};
          auto loss = mlm_loss(model, ex);
          const double v = static_cast<double>(loss.item());
          return detail::ExampleLoss<T>{loss, 0, 0, v};
        });
    result.p_at_1 = evaluate_predictor(model, eval, "ft").macro_p_at_1;
    log.write({{"stage", stage}, {"epoch", epoch}, {"step", opt.step_count()}, {"f1", nullptr}, {"f2", nullptr},
               {"f_ce", stats.f_ce}, {"L", stats.L}, {"p_at_1", result.p_at_1}});
  }
  if (model_digest(predictor, "predictor") != digest) {
    throw StageFailure(stage, "source predictor changed during fine-tuning");
  }
  result.model = model;
  return result;
}

// ---------------------------------------------------------------------------
// Ablations

struct AblationVariant {
  std::string name;
  double lambda1;
  double lambda2;
};

/// No auxiliary losses, SML only, VTL only, both.
inline std::vector<AblationVariant> ablation_variants(const TrainingConfig& cfg) {
  return {{"No auxiliary losses", 0.0, 0.0},
          {"SML", 0.0, cfg.lambda2},
          {"VTL", cfg.lambda1, 0.0},
          {"SML + VTL", cfg.lambda1, cfg.lambda2}};
}

template <typename T>
AblationRow ablation_measurements(const std::string& name, const TrainingConfig& cfg, const Rewriter<T>& rewriter,
                                  const Predictor<T>& predictor, const std::vector<ClozeQuery>& eval) {
  AblationRow row;
  row.name = name;
  row.lambda1 = cfg.lambda1;
  row.lambda2 = cfg.lambda2;
  row.config_digest = config_digest(cfg);
  const auto report = evaluate_bertese(rewriter, predictor, eval);
  row.macro_p_at_1 = report.macro_p_at_1;
  double dist = 0, masks = 0;
  std::size_t positions = 0;
  NoGradGuard guard;
  for (const auto& q : eval) {
    const auto q_hat = rewriter.rewrite(q.tokens);
    const auto d = min_cols(sq_dist_rows(q_hat, predictor.embeddings()));
    for (auto v : d.data()) dist += static_cast<double>(v);
    positions += d.numel();
    const auto ids = project_to_tokens(q_hat, predictor.embeddings());
    const auto c = std::count(ids.begin(), ids.end(), kMaskId);
    masks += static_cast<double>(c);
    row.multi_mask_rewrites += c > 1 ? 1 : 0;
  }
  row.mean_nearest_distance = positions ? dist / static_cast<double>(positions) : 0.0;
  row.mean_projected_masks = eval.empty() ? 0.0 : masks / static_cast<double>(eval.size());
  return row;
}

/// Trains each variant from the same identity checkpoint and seed.
template <typename T>
std::vector<AblationRow> run_ablations(const Rewriter<T>& identity, const Predictor<T>& predictor, const World& world,
                                       const TrainingConfig& cfg, RunLog& log) {
  std::vector<AblationRow> rows;
  for (const auto& v : ablation_variants(cfg)) {
    TrainingConfig c = cfg;
    c.lambda1 = v.lambda1;
    c.lambda2 = v.lambda2;
    const auto trained = train_bertese_stage(identity, predictor, world, c, log, "ablate:" + v.name);
    rows.push_back(ablation_measurements(v.name, c, trained.model, predictor, world.perturbed_eval()));
  }
  return rows;
}

inline nlohmann::json ablation_to_json(const std::vector<AblationRow>& rows) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : rows)
    j.push_back({{"name", r.name},
                 {"lambda1", r.lambda1},
                 {"lambda2", r.lambda2},
                 {"macro_p_at_1", r.macro_p_at_1},
                 {"mean_nearest_distance", r.mean_nearest_distance},
                 {"mean_projected_masks", r.mean_projected_masks},
                 {"multi_mask_rewrites", r.multi_mask_rewrites},
                 {"config_digest", r.config_digest}});
  return j;
}

}  // namespace bertese
