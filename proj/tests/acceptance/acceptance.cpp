// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite: prints one PASS/FAIL line per criterion and exits
// non-zero if any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "bertese/bertese.hpp"
#include "bertese/cli.hpp"
#include "support.hpp"

using namespace bertese;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Verdict {
  bool pass = true;
  std::string detail;
};

class Checker {
 public:
  void expect(bool ok, const std::string& what) {
    if (!ok) failures_.push_back(what);
  }
  void near(double got, double want, double tol, const std::string& what) {
    if (!(std::abs(got - want) <= tol)) {
      char buf[200];
      std::snprintf(buf, sizeof buf, "%s: got %.17g, want %.17g (tol %g)", what.c_str(), got, want, tol);
      failures_.push_back(buf);
    }
  }
  Verdict verdict(const std::string& ok_detail) const {
    if (failures_.empty()) return {true, ok_detail};
    std::string d = std::to_string(failures_.size()) + " check(s) failed; first: " + failures_.front();
    return {false, d};
  }

 private:
  std::vector<std::string> failures_;
};

double minutes_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count() / 60.0;
}

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

// ---------------------------------------------------------------------------
// 1. Loss examples

template <typename T>
void loss_examples(Checker& c, double tol, const std::string& tag) {
  using Tn = Tensor<T>;
  const auto s = [](double v) { return Tn::scalar(static_cast<T>(v)); };
  const auto at = [](const Tn& t, std::size_t i) { return static_cast<double>(t.data()[i]); };
  const auto item = [](const Tn& t) { return static_cast<double>(t.item()); };

  const Tn two(2, 2, {0, 0, 1, 0});
  c.near(item(valid_token_loss(Tn(1, 2, {0.5, 0}), two)), 0.25, tol, tag + " f1 midpoint");
  c.near(item(valid_token_loss(Tn(1, 2, {3, 4}), Tn(1, 2, {0, 0}))), 25, tol, tag + " f1 3-4-5");
  c.near(item(valid_token_loss(Tn(2, 2, {1, 0, 0, 0}), two)), 0, tol, tag + " f1 on rows");

  const auto mask = Tn::row({0, 0});
  const auto eq = mask_distribution(Tn(2, 2, {1, 0, 0, 1}), mask, s(1));
  c.near(at(eq, 0), 0.5, tol, tag + " m equidistant");
  c.near(at(eq, 1), 0.5, tol, tag + " m equidistant");
  const auto r = static_cast<T>(std::sqrt(std::log(4.0)));
  const auto m = mask_distribution(Tn(2, 2, {0, 0, r, 0}), mask, s(1));
  c.near(at(m, 0), 0.8, tol, tag + " m (0, ln 4)");
  c.near(at(m, 1), 0.2, tol, tag + " m (0, ln 4)");
  const auto sharp = mask_distribution(Tn(3, 2, {1, 0, 0.5, 0, 2, 0}), mask, s(1000));
  c.near(at(sharp, 1), 1.0, tol, tag + " m large beta");

  c.near(item(single_mask_loss(Tn::row({0, 1, 0}))), -1, tol, tag + " f2 one-hot");
  c.near(item(single_mask_loss(Tn::row({static_cast<T>(0.8), static_cast<T>(0.2)}))), -0.8, tol, tag + " f2 (0.8, 0.2)");
  c.near(item(single_mask_loss(Tn::row({0.25, 0.25, 0.25, 0.25}))), -0.25, tol, tag + " f2 uniform");

  const PredictorOutput<T> uniform{Tn::zeros(2, 2)};
  const auto onehot = Tn::row({0, 1});
  c.near(item(prediction_loss(onehot, uniform, 0, SteMode::Soft)), std::log(2.0), tol, tag + " f_ce soft ln 2");
  c.near(item(prediction_loss(onehot, uniform, 0, SteMode::Hard)), std::log(2.0), tol, tag + " f_ce hard ln 2");
  const PredictorOutput<T> varied{Tn(2, 3, {2, 0, 0, 0, 1, 0})};
  const auto ell = position_cross_entropy(varied, 0);
  c.near(item(prediction_loss(Tn::row({0, 1}), varied, 0, SteMode::Hard)), at(ell, 1), tol, tag + " hard one-hot");
  c.near(item(prediction_loss(Tn::row({0, 1}), varied, 0, SteMode::Soft)), at(ell, 1), tol, tag + " soft one-hot");
  c.near(item(prediction_loss(Tn::row({static_cast<T>(0.6), static_cast<T>(0.4)}), varied, 0, SteMode::Hard)),
         at(ell, 0), tol, tag + " hard (0.6, 0.4)");

  c.near(total_loss(s(0.6931), s(0.25), s(-0.8), 0.3, 0.5).value, 0.3681, tol, tag + " L example");
  c.near(total_loss(s(1.25), s(2), s(-0.5), 0, 0).value, 1.25, tol, tag + " L without auxiliaries");
  c.near(total_loss(s(0), s(0), s(0), 0.3, 0.5).value, 0, tol, tag + " L zero");

  const Tn three(3, 2, {0, 0, 1, 0, 0, 1});
  c.expect(project_to_tokens(Tn(1, 2, {static_cast<T>(0.9), static_cast<T>(0.1)}), three) == std::vector<int>{1},
           tag + " projection (0.9, 0.1)");
  auto table = Tn::zeros(8, 1);
  for (std::size_t i = 0; i < 8; ++i) table(i, 0) = static_cast<T>(10 + i);
  c.expect(project_to_tokens(Tn(1, 1, {17}), table) == std::vector<int>{7}, tag + " projection exact row");
  c.expect(project_to_tokens(Tn(1, 1, {0}), Tn(6, 1, {9, 9, -1, 9, 9, 1})) == std::vector<int>{2},
           tag + " projection tie");

  c.near(item(identity_pretrain_loss(Tn(1, 2, {1, 0}), Tn(1, 2, {0, 0}))), 1, tol, tag + " identity unit");
  c.near(item(identity_pretrain_loss(three, three)), 0, tol, tag + " identity zero");
}

Verdict criterion1() {
  Checker c;
  loss_examples<double>(c, 1e-12, "f64");
  loss_examples<float>(c, 1e-6, "f32");
  return c.verdict("every example matches (64-bit within 1e-12, 32-bit within 1e-6)");
}

// ---------------------------------------------------------------------------
// 2. Gradient oracle

struct Pair {
  Predictor<double> predictor;
  Rewriter<double> rewriter;
};

Pair small_pair(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const ModelConfig c{8, 2, 2, 16, 8, 12};
  Pair p{Predictor<double>::init(c, rng), {}};
  testing::scramble(p.predictor, rng);
  p.predictor.set_trainable(false);
  p.rewriter = Rewriter<double>::init_from(p.predictor);
  testing::scramble(p.rewriter, rng);
  return p;
}

/// The hard-mode one-hot and the snapped input are piecewise constant. Their
/// derivative is defined by the straight-through rule, so the finite-difference
/// side holds the discrete choice from the base point fixed: w = m - m0 + e_k and
/// input = q + (B[nn0] - q0). Both equal the true values at the base point.
/// Evaluated in extended precision so the differences are not dominated by rounding.
using Wide = long double;

Wide frozen_choice_loss(const Predictor<Wide>& pred, const Rewriter<Wide>& rw, std::span<const int> ids, int answer,
                        const LossOptions& opt, const Tensor<Wide>& w_shift, const Tensor<Wide>& input_shift) {
  const auto& table = pred.embeddings();
  const auto q = rw.rewrite(ids);
  const auto f1 = valid_token_loss(q, table);
  const auto m = mask_distribution(q, slice_rows(table, kMaskId, 1), rw.beta());
  const auto f2 = single_mask_loss(m);
  const auto input = opt.snap_input ? add(q, input_shift) : q;
  const auto ell = position_cross_entropy(pred.forward_vectors(input), answer);
  const auto w = opt.ste_mode == SteMode::Hard ? add(m, w_shift) : m;
  return total_loss(sum(mul(w, ell)), f1, f2, opt.lambda1, opt.lambda2).total.item();
}

struct OracleResult {
  double worst = 0;
  double base_gap = 0;
  bool predictor_untouched = true;
};

OracleResult gradient_oracle(SteMode mode, bool snap, std::uint64_t seed) {
  auto p = small_pair(seed);
  const std::vector<int> ids{kClsId, 5, kMaskId, 6, 7, kSepId};
  const auto span = std::span<const int>(ids);
  const int answer = 9;
  LossOptions opt;
  opt.ste_mode = mode;
  opt.snap_input = snap;

  const auto params = p.rewriter.parameters();
  for (const auto& np : params) {
    auto t = np.tensor;
    t.zero_grad();
  }
  const auto real = bertese_loss(p.rewriter, p.predictor, span, answer, opt);
  backward(real.total);

  OracleResult res;
  for (const auto& np : p.predictor.parameters()) res.predictor_untouched &= !np.tensor.has_grad();

  NoGradGuard guard;
  const auto pred = p.predictor.template cast<Wide>();
  const auto rw = p.rewriter.template cast<Wide>();
  const auto& table = pred.embeddings();
  const auto q0 = rw.rewrite(span);
  const auto m0 = mask_distribution(q0, slice_rows(table, kMaskId, 1), rw.beta());
  auto w_shift = neg(m0);
  w_shift.data()[argmax(std::span<const Wide>(m0.data()))] += 1;
  const auto nn0 = nearest_rows(q0, table);
  const auto input_shift = sub(gather_rows(table, std::span<const int>(nn0)), q0);

  auto eval = [&] { return frozen_choice_loss(pred, rw, span, answer, opt, w_shift, input_shift); };
  res.base_gap = std::abs(static_cast<double>(eval()) - real.value);

  const Wide eps = 1e-6L;
  const auto wide_params = rw.parameters();
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto& t = params[k].tensor;
    const std::vector<double> analytic = t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end())
                                                      : std::vector<double>(t.numel(), 0.0);
    auto wt = wide_params[k].tensor;
    auto values = wt.data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const Wide saved = values[i];
      values[i] = saved + eps;
      const Wide up = eval();
      values[i] = saved - eps;
      const Wide down = eval();
      values[i] = saved;
      const double numeric = static_cast<double>((up - down) / (2 * eps));
      const double rel = std::abs(analytic[i] - numeric) / std::max(1e-8, std::abs(analytic[i]) + std::abs(numeric));
      res.worst = std::max(res.worst, rel);
    }
  }
  return res;
}

Verdict criterion2() {
  Checker c;
  std::ostringstream detail;
  detail << "max relative error";
  for (auto mode : {SteMode::Soft, SteMode::Hard}) {
    for (bool snap : {false, true}) {
      const std::string tag = to_string(mode) + (snap ? "+snap" : "");
      double worst = 0;
      for (std::uint64_t seed : {11u, 12u}) {
        const auto r = gradient_oracle(mode, snap, seed);
        worst = std::max(worst, r.worst);
        c.expect(r.base_gap < 1e-12, tag + ": frozen-choice surrogate differs from the loss at the base point");
        c.expect(r.predictor_untouched, tag + ": predictor received gradients");
      }
      c.expect(worst < 1e-4, tag + fmt(": max relative error %.3g", worst));
      detail << " " << tag << " " << fmt("%.2g", worst);
    }
  }
  return c.verdict(detail.str());
}


// ---------------------------------------------------------------------------
// 3. Straight-through contract

Verdict criterion3() {
  Checker c;
  double worst = 0;
  for (std::uint64_t seed = 100; seed < 120; ++seed) {
    auto p = small_pair(seed);
    std::mt19937_64 rng(seed);
    const std::size_t n = 3 + rng() % 6;
    std::vector<int> ids(n);
    for (auto& id : ids) id = static_cast<int>(rng() % 12);
    ids[rng() % n] = kMaskId;
    const int answer = kNumSpecial + static_cast<int>(rng() % (12 - kNumSpecial));
    const auto span = std::span<const int>(ids);

    PredictorOutput<double> out;
    std::vector<double> m0;
    {
      NoGradGuard guard;
      const auto q = p.rewriter.rewrite(span);
      out = p.predictor.forward_vectors(q);
      const auto m = mask_distribution(q, slice_rows(p.predictor.embeddings(), kMaskId, 1), p.rewriter.beta());
      m0.assign(m.data().begin(), m.data().end());
    }
    const auto ell = position_cross_entropy(out, answer);
    const auto k = argmax(std::span<const double>(m0));
    c.expect(m0[k] < 1.0, "instance has a one-hot m, which would not exercise the estimator");

    std::map<SteMode, std::vector<double>> m_grad;
    std::map<SteMode, double> beta_grad;
    for (auto mode : {SteMode::Hard, SteMode::Soft}) {
      Tensor<double> leaf(1, n, m0, true);
      const auto f = prediction_loss(leaf, out, answer, mode);
      if (mode == SteMode::Hard) c.near(f.item(), ell.data()[k], 1e-12, "hard forward equals l(y, o_argmax)");
      backward(f);
      m_grad[mode].assign(leaf.grad().begin(), leaf.grad().end());

      LossOptions opt;
      opt.ste_mode = mode;
      auto lb = p.rewriter.log_beta();
      lb.zero_grad();
      backward(bertese_loss(p.rewriter, p.predictor, span, answer, opt).total);
      beta_grad[mode] = lb.grad()[0];
    }
    for (std::size_t i = 0; i < n; ++i) worst = std::max(worst, std::abs(m_grad[SteMode::Hard][i] - m_grad[SteMode::Soft][i]));
    worst = std::max(worst, std::abs(beta_grad[SteMode::Hard] - beta_grad[SteMode::Soft]));
  }
  c.expect(worst <= 1e-6, fmt("gradient gap %.3g exceeds 1e-6", worst));
  return c.verdict(fmt("20 instances; max gap in gradients w.r.t. m and log_beta %.2g", worst));
}

// ---------------------------------------------------------------------------
// 4. Nearest-neighbor oracle

template <typename T>
std::pair<std::vector<int>, bool> brute_force_nearest(const Tensor<T>& q, const Tensor<T>& table) {
  std::vector<int> out;
  bool tie = false;
  for (std::size_t i = 0; i < q.rows(); ++i) {
    long double best = 0;
    int arg = -1;
    for (std::size_t j = 0; j < table.rows(); ++j) {
      long double d = 0;
      for (std::size_t k = 0; k < q.cols(); ++k) {
        const long double diff = static_cast<long double>(q(i, k)) - static_cast<long double>(table(j, k));
        d += diff * diff;
      }
      if (arg < 0 || d < best) {
        best = d;
        arg = static_cast<int>(j);
      } else if (d == best) {
        tie = true;
      }
    }
    out.push_back(arg);
  }
  return {out, tie};
}

Verdict criterion4() {
  Checker c;
  std::mt19937_64 rng(2024);
  std::size_t ties = 0, mismatches = 0;
  for (int inst = 0; inst < 1000; ++inst) {
    const std::size_t V = 2 + rng() % 40, d = 1 + rng() % 6, n = 1 + rng() % 8;
    const bool lattice = inst % 2 == 0;
    std::normal_distribution<double> normal(0.0, 1.0);
    auto draw = [&] { return lattice ? static_cast<double>(static_cast<int>(rng() % 5) - 2) : normal(rng); };
    auto table = Tensor<double>::zeros(V, d);
    auto q = Tensor<double>::zeros(n, d);
    for (auto& v : table.data()) v = draw();
    for (auto& v : q.data()) v = draw();
    if (inst % 4 == 1) {
      // Duplicate a row at a higher index and query it exactly.
      const std::size_t a = rng() % (V - 1), b = a + 1 + rng() % (V - a - 1);
      for (std::size_t k = 0; k < d; ++k) {
        table(b, k) = table(a, k);
        q(0, k) = table(a, k);
      }
    }
    const auto [want, tie] = brute_force_nearest(q, table);
    ties += tie ? 1 : 0;
    if (project_to_tokens(q, table) != want) ++mismatches;
    Tensor<float> qf(n, d, std::vector<float>(q.data().begin(), q.data().end()));
    Tensor<float> tf(V, d, std::vector<float>(table.data().begin(), table.data().end()));
    if (project_to_tokens(qf, tf) != brute_force_nearest(qf, tf).first) ++mismatches;
  }
  c.expect(mismatches == 0, std::to_string(mismatches) + " disagreements with the brute-force scan");
  c.expect(ties > 0, "no tied instance was generated");
  return c.verdict("1000 instances in 64-bit and 32-bit, " + std::to_string(ties) +
                   " with tied distances, all exact");
}

// ---------------------------------------------------------------------------
// 5-8. Toy-world experiments

struct ToyRun {
  TrainingConfig cfg;
  World world;
  PredictorStageResult<float> predictor;
  IdentityStageResult<float> identity;
  BerteseStageResult<float> bertese;
  double canonical = 0, zero_shot = 0;
  std::string digest_after_stage;
  double identity_minutes = 0, end_to_end_minutes = 0;
};

ToyRun train_toy(const std::string& config_path) {
  ToyRun t;
  const auto t0 = Clock::now();
  t.cfg = load_config(config_path);
  t.world = generate_world(world_spec(t.cfg));
  RunLog log;
  t.predictor = train_predictor_stage<float>(t.world, t.cfg, log);
  std::cerr << "toy: predictor canonical P@1 " << percent(t.predictor.canonical_p_at_1) << "% ("
            << fmt("%.1f", minutes_since(t0)) << " min)\n";
  const auto t1 = Clock::now();
  t.identity = pretrain_rewriter_stage(t.predictor.model, t.world, t.cfg, log);
  t.identity_minutes = minutes_since(t1);
  std::cerr << "toy: identity decode " << percent(t.identity.decode_accuracy) << "% ("
            << fmt("%.1f", t.identity_minutes) << " min)\n";
  t.bertese = train_bertese_stage(t.identity.model, t.predictor.model, t.world, t.cfg, log);
  t.end_to_end_minutes = minutes_since(t0);
  t.canonical = evaluate_predictor(t.predictor.model, t.world.canonical, "predictor", "canonical").macro_p_at_1;
  t.zero_shot = evaluate_predictor(t.predictor.model, t.world.perturbed_eval(), "zero-shot").macro_p_at_1;
  t.digest_after_stage = model_digest(t.predictor.model, "predictor");
  std::cerr << "toy: BERTese eval P@1 " << percent(t.bertese.p_at_1) << "% ("
            << fmt("%.1f", t.end_to_end_minutes) << " min end to end)\n";
  return t;
}

Verdict criterion5(const ToyRun& t) {
  Checker c;
  c.expect(t.identity.decode_accuracy >= 0.99, "held-out decode accuracy below 99%");
  c.expect(t.identity_minutes < 5.0, "identity stage took 5 minutes or more");
  return c.verdict(fmt("held-out decode %.1f%% after %.0f epochs in %.1f min", 100 * t.identity.decode_accuracy,
                       t.identity.epochs_run, t.identity_minutes));
}

Verdict criterion6(const ToyRun& t) {
  Checker c;
  const double gap = t.canonical - t.zero_shot;
  const double closed = gap > 0 ? (t.bertese.p_at_1 - t.zero_shot) / gap : 0.0;
  c.expect(t.canonical >= 0.95, "canonical P@1 below 0.95");
  c.expect(gap >= 0.20, "zero-shot is less than 20 points below canonical");
  c.expect(closed >= 0.5, "BERTese closes less than half of the gap");
  c.expect(t.end_to_end_minutes < 15.0, "end-to-end run took 15 minutes or more");
  return c.verdict(fmt("canonical %.1f%%, zero-shot %.1f%%, BERTese %.1f%% (gap closed %.0f%%)", 100 * t.canonical,
                       100 * t.zero_shot, 100 * t.bertese.p_at_1, 100 * closed) +
                   fmt(" in %.1f min", t.end_to_end_minutes));
}

Verdict criterion7(const ToyRun& t) {
  Checker c;
  const auto t0 = Clock::now();
  RunLog log;
  const auto rows = run_ablations(t.identity.model, t.predictor.model, t.world, t.cfg, log);
  const double minutes = minutes_since(t0);
  std::cerr << ablation_table(rows);
  const auto& none = rows[0];
  const auto& sml = rows[1];
  const auto& vtl = rows[2];
  const auto& full = rows[3];
  const double point = 0.01;
  c.expect(full.macro_p_at_1 >= sml.macro_p_at_1 - point, "(a) full is more than 1 point below SML-only");
  c.expect(full.macro_p_at_1 >= vtl.macro_p_at_1 - point, "(a) full is more than 1 point below VTL-only");
  c.expect(sml.macro_p_at_1 >= none.macro_p_at_1 + 3 * point, "(b) SML-only is less than 3 points above no-aux");
  c.expect(vtl.macro_p_at_1 >= none.macro_p_at_1 + 3 * point, "(b) VTL-only is less than 3 points above no-aux");
  c.expect(vtl.multi_mask_rewrites > full.multi_mask_rewrites,
           "(c) VTL-only has no more multi-[MASK] projections than full");
  c.expect(minutes < 45.0, "ablation runs took 45 minutes or more");
  std::ostringstream d;
  d << "P@1 none " << percent(none.macro_p_at_1) << ", SML " << percent(sml.macro_p_at_1) << ", VTL "
    << percent(vtl.macro_p_at_1) << ", full " << percent(full.macro_p_at_1) << "; multi-[MASK] VTL "
    << vtl.multi_mask_rewrites << " vs full " << full.multi_mask_rewrites << fmt("; %.1f min", minutes);
  auto v = c.verdict(d.str());
  if (!v.pass) v.detail += " | " + d.str();
  return v;
}

std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().filename() != ".lock")
      files[fs::relative(e.path(), dir).string()] = cli::read_text(e.path());
  return files;
}

Verdict criterion8(const ToyRun& t, const fs::path& work, const std::string& config_path) {
  Checker c;
  c.expect(t.bertese.predictor_digest_before == t.bertese.predictor_digest_after,
           "predictor digest changed across rewriter training");
  c.expect(t.digest_after_stage == t.bertese.predictor_digest_before, "predictor digest changed after the stage");

  std::vector<std::map<std::string, std::string>> runs;
  for (const char* name : {"run_a", "run_b"}) {
    const auto dir = work / name;
    fs::remove_all(dir);
    const std::string dir_s = dir.string();
    const char* argv[] = {"bertese", "run-all", "--config", config_path.c_str(), "--out", dir_s.c_str()};
    std::ostringstream out, err;
    const auto t0 = Clock::now();
    const int code = cli::run(6, argv, out, err);
    std::cerr << out.str() << err.str() << "run-all " << name << fmt(": %.1f min\n", minutes_since(t0));
    c.expect(code == 0, std::string("run-all exited with an error in ") + name + ": " + err.str());
    runs.push_back(snapshot(dir));
  }
  std::size_t differing = 0;
  std::string first_diff;
  std::set<std::string> names;
  for (const auto& r : runs)
    for (const auto& [k, _] : r) names.insert(k);
  for (const auto& n : names) {
    const auto a = runs[0].find(n), b = runs[1].find(n);
    if (a == runs[0].end() || b == runs[1].end() || a->second != b->second) {
      ++differing;
      if (first_diff.empty()) first_diff = n;
    }
  }
  c.expect(!runs[0].empty(), "run-all produced no files");
  c.expect(differing == 0, std::to_string(differing) + " file(s) differ between the two runs, e.g. " + first_diff);
  return c.verdict("predictor digest " + t.bertese.predictor_digest_before.substr(0, 12) +
                   " unchanged; two run-all invocations produced " + std::to_string(runs[0].size()) +
                   " byte-identical files");
}

// ---------------------------------------------------------------------------
// 9. Checkpoint format

struct Split {
  nlohmann::json header;
  std::string data;
};

Split split_checkpoint(const std::string& bytes) {
  std::uint32_t len = 0;
  for (int b = 0; b < 4; ++b) len |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[8 + b])) << (8 * b);
  return {nlohmann::json::parse(bytes.substr(12, len)), bytes.substr(12 + len)};
}

std::string join_checkpoint(const nlohmann::json& header, const std::string& data) {
  const auto h = header.dump();
  std::string out(kCheckpointMagic);
  const auto len = static_cast<std::uint32_t>(h.size());
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((len >> (8 * b)) & 0xFFu));
  return out + h + data;
}

template <typename Real>
Verdict checkpoint_checks(const Predictor<Real>& predictor, const Rewriter<Real>& rewriter, const fs::path& work) {
  using K = CheckpointError::Kind;
  Checker c;
  fs::create_directories(work);
  save_checkpoint(work / "p1.ckpt", predictor, "predictor");
  save_checkpoint(work / "p2.ckpt", load_checkpoint<Predictor<Real>>(work / "p1.ckpt", "predictor"), "predictor");
  c.expect(read_file_bytes(work / "p1.ckpt") == read_file_bytes(work / "p2.ckpt"), "predictor round trip differs");
  save_checkpoint(work / "r1.ckpt", rewriter, "rewriter");
  save_checkpoint(work / "r2.ckpt", load_checkpoint<Rewriter<Real>>(work / "r1.ckpt", "rewriter"), "rewriter");
  c.expect(read_file_bytes(work / "r1.ckpt") == read_file_bytes(work / "r2.ckpt"), "rewriter round trip differs");

  const auto bytes = read_file_bytes(work / "p1.ckpt");
  const auto parts = split_checkpoint(bytes);
  const ModelConfig config = predictor.config();
  auto expect_error = [&](const std::string& what, const std::string& blob, K kind, const std::string& tensor = {},
                          const std::optional<ModelConfig>& expected = std::nullopt) {
    try {
      (void)deserialize_checkpoint<Predictor<Real>>(blob, "predictor", expected);
      c.expect(false, what + ": loaded without error");
    } catch (const CheckpointError& e) {
      c.expect(e.kind() == kind, what + ": wrong error kind (" + e.what() + ")");
      if (!tensor.empty()) {
        c.expect(e.tensor() == tensor, what + ": error names '" + e.tensor() + "' instead of '" + tensor + "'");
        c.expect(std::string(e.what()).find("'" + tensor + "'") != std::string::npos,
                 what + ": message does not name the tensor");
      }
    }
  };
  expect_error("bad magic", "XERTESE1" + bytes.substr(8), K::BadMagic);
  auto bad_len = bytes;
  bad_len[10] = '\x7f';
  expect_error("header length", bad_len, K::BadHeader);
  auto h = parts.header;
  h["format_version"] = kCheckpointVersion + 1;
  expect_error("version", join_checkpoint(h, parts.data), K::BadVersion);
  h = parts.header;
  h["kind"] = "rewriter";
  expect_error("kind", join_checkpoint(h, parts.data), K::WrongKind);
  auto other = config;
  other.ffn_dim *= 2;
  expect_error("config", bytes, K::ConfigMismatch, {}, other);
  h = parts.header;
  const std::string shaped = h["tensors"][4]["name"];
  h["tensors"][4]["shape"] = {1, 1};
  expect_error("shape", join_checkpoint(h, parts.data), K::ShapeMismatch, shaped);
  h = parts.header;
  const std::string last = h["tensors"].back()["name"];
  h["tensors"].erase(h["tensors"].size() - 1);
  expect_error("missing tensor", join_checkpoint(h, parts.data), K::MissingTensor, last);
  expect_error("truncated", bytes.substr(0, bytes.size() - 5), K::Truncated, last);
  expect_error("trailing", bytes + std::string(4, '\0'), K::TrailingData);
  try {
    (void)load_checkpoint<Predictor<Real>>(work / "absent.ckpt", "predictor");
    c.expect(false, "missing file loaded");
  } catch (const CheckpointError& e) {
    c.expect(e.kind() == K::Io, "missing file: wrong error kind");
  }
  return c.verdict("predictor and rewriter round trips byte-identical; 10 corruption cases rejected with named errors");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria 1-9"};
  std::string work_dir = "acceptance_runs";
  std::string config_path = BERTESE_TOY_CONFIG;
  std::vector<int> only;
  app.add_option("--work-dir", work_dir, "Scratch directory for training runs");
  app.add_option("--config", config_path, "Toy-world configuration")->check(CLI::ExistingFile);
  app.add_option("--only", only, "Run only these criteria")->check(CLI::Range(1, 9));
  CLI11_PARSE(app, argc, argv);

  const fs::path work = fs::absolute(work_dir);
  fs::create_directories(work);
  auto wanted = [&](int n) { return only.empty() || std::find(only.begin(), only.end(), n) != only.end(); };

  std::optional<ToyRun> toy;
  auto need_toy = [&]() -> const ToyRun& {
    if (!toy) toy = train_toy(config_path);
    return *toy;
  };

  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria = {
      {"loss examples", criterion1},
      {"gradient oracle", criterion2},
      {"straight-through contract", criterion3},
      {"nearest-neighbor oracle", criterion4},
      {"identity pretraining", [&] { return criterion5(need_toy()); }},
      {"template gap", [&] { return criterion6(need_toy()); }},
      {"ablation ordering", [&] { return criterion7(need_toy()); }},
      {"freezing and determinism", [&] { return criterion8(need_toy(), work, config_path); }},
      {"checkpoint format",
       [&] {
         if (only.empty() || toy) {
           const auto& t = need_toy();
           return checkpoint_checks(t.predictor.model, t.bertese.model, work / "checkpoints");
         }
         const auto p = small_pair(9);
         return checkpoint_checks(p.predictor, p.rewriter, work / "checkpoints");
       }},
  };

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int n = static_cast<int>(i) + 1;
    if (!wanted(n)) continue;
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    failed += v.pass ? 0 : 1;
    std::cout << (v.pass ? "PASS" : "FAIL") << " criterion " << n << " (" << criteria[i].first << "): " << v.detail
              << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
