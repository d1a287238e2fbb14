// SPDX-License-Identifier: Apache-2.0
//
// Precision at one, macro-averaged over relations, with full per-query
// records so every reported number can be recomputed from the report.

#pragma once

#include <algorithm>
#include <cstdio>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "bertese/model.hpp"
#include "bertese/rewriter.hpp"
#include "bertese/vocab.hpp"
#include "bertese/world.hpp"

namespace bertese {

struct QueryRecord {
  std::string relation;
  std::vector<int> query_ids;
  std::vector<int> rewritten_ids;  // empty for systems without a rewrite
  std::vector<int> projected_ids;  // raw projection before [MASK] forcing
  std::size_t mask_position = 0;
  int predicted = 0;
  int gold = 0;
  bool correct = false;
};

struct RelationScore {
  std::size_t correct = 0;
  std::size_t total = 0;
  double p_at_1 = 0.0;
};

struct EvalReport {
  std::string system;
  std::string split;
  std::string config_digest;
  std::map<std::string, RelationScore> per_relation;
  double macro_p_at_1 = 0.0;
  std::size_t total = 0;
  std::size_t correct = 0;
  std::vector<std::string> warnings;
  std::vector<QueryRecord> records;
};

/// Fraction of records whose prediction equals the gold answer; nullopt when empty.
inline std::optional<double> precision_at_1(const std::vector<QueryRecord>& records) {
  if (records.empty()) return std::nullopt;
  std::size_t hit = 0;
  for (const auto& r : records) hit += r.predicted == r.gold ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(records.size());
}

/// Groups records by relation, scores each, and averages across relations.
/// Relations listed in `relations` with no records are excluded with a warning.
inline void aggregate(EvalReport& report, const std::vector<std::string>& relations = {}) {
  std::map<std::string, std::vector<QueryRecord>> groups;
  for (const auto& name : relations) groups[name];
  for (const auto& r : report.records) groups[r.relation].push_back(r);
  report.per_relation.clear();
  report.warnings.clear();
  report.total = report.records.size();
  report.correct = 0;
  double sum = 0;
  std::size_t counted = 0;
  for (const auto& [name, recs] : groups) {
    const auto p = precision_at_1(recs);
    if (!p) {
      report.warnings.push_back("relation '" + name + "' has no queries; excluded from the macro average");
      continue;
    }
    RelationScore s;
    s.total = recs.size();
    for (const auto& r : recs) s.correct += r.correct ? 1 : 0;
    s.p_at_1 = *p;
    report.correct += s.correct;
    report.per_relation[name] = s;
    sum += *p;
    ++counted;
  }
  report.macro_p_at_1 = counted ? sum / static_cast<double>(counted) : 0.0;
}

inline std::vector<std::string> relation_names(const std::vector<ClozeQuery>& queries) {
  std::vector<std::string> names;
  for (const auto& q : queries)
    if (std::find(names.begin(), names.end(), q.relation) == names.end()) names.push_back(q.relation);
  return names;
}

/// Reads each query's answer straight from the predictor.
template <typename T>
EvalReport evaluate_predictor(const Predictor<T>& predictor, const std::vector<ClozeQuery>& queries,
                              std::string system, std::string split = "perturbed_eval") {
  EvalReport report;
  report.system = std::move(system);
  report.split = std::move(split);
  for (const auto& q : queries) {
    const auto pred = predict_mask_token(predictor, q.tokens, q.mask_index);
    QueryRecord r;
    r.relation = q.relation;
    r.query_ids = q.tokens;
    r.mask_position = q.mask_index;
    r.predicted = pred.token;
    r.gold = q.answer;
    r.correct = r.predicted == r.gold;
    report.records.push_back(std::move(r));
  }
  aggregate(report, relation_names(queries));
  return report;
}

/// Rewrites each query, then answers it with the predictor.
template <typename T>
EvalReport evaluate_bertese(const Rewriter<T>& rewriter, const Predictor<T>& predictor,
                            const std::vector<ClozeQuery>& queries, std::string split = "perturbed_eval") {
  EvalReport report;
  report.system = "bertese";
  report.split = std::move(split);
  for (const auto& q : queries) {
    const auto inf = infer_answer(rewriter, predictor, q.tokens);
    QueryRecord r;
    r.relation = q.relation;
    r.query_ids = q.tokens;
    r.rewritten_ids = inf.rewritten_ids;
    r.projected_ids = inf.projected_ids;
    r.mask_position = inf.mask_position;
    r.predicted = inf.answer;
    r.gold = q.answer;
    r.correct = r.predicted == r.gold;
    report.records.push_back(std::move(r));
  }
  aggregate(report, relation_names(queries));
  return report;
}

inline nlohmann::json report_to_json(const EvalReport& r, const Vocabulary* vocab = nullptr) {
  nlohmann::json j;
  j["system"] = r.system;
  j["split"] = r.split;
  j["config_digest"] = r.config_digest;
  j["macro_p_at_1"] = r.macro_p_at_1;
  j["total"] = r.total;
  j["correct"] = r.correct;
  j["warnings"] = r.warnings;
  for (const auto& [name, s] : r.per_relation)
    j["per_relation"][name] = {{"correct", s.correct}, {"total", s.total}, {"p_at_1", s.p_at_1}};
  j["records"] = nlohmann::json::array();
  for (const auto& q : r.records) {
    nlohmann::json rec = {{"relation", q.relation},     {"query_ids", q.query_ids},
                          {"mask_position", q.mask_position}, {"predicted", q.predicted},
                          {"gold", q.gold},             {"correct", q.correct}};
    if (!q.rewritten_ids.empty()) {
      rec["rewritten_ids"] = q.rewritten_ids;
      rec["projected_ids"] = q.projected_ids;
    }
    if (vocab) {
      rec["query"] = decode_tokens(*vocab, q.query_ids);
      if (!q.rewritten_ids.empty()) rec["rewrite"] = decode_tokens(*vocab, q.rewritten_ids);
      rec["predicted_token"] = vocab->token(q.predicted);
      rec["gold_token"] = vocab->token(q.gold);
    }
    j["records"].push_back(std::move(rec));
  }
  return j;
}

inline EvalReport report_from_json(const nlohmann::json& j) {
  EvalReport r;
  r.system = j.at("system");
  r.split = j.at("split");
  r.config_digest = j.at("config_digest");
  for (const auto& rec : j.at("records")) {
    QueryRecord q;
    q.relation = rec.at("relation");
    q.query_ids = rec.at("query_ids").get<std::vector<int>>();
    q.mask_position = rec.at("mask_position");
    q.predicted = rec.at("predicted");
    q.gold = rec.at("gold");
    q.correct = rec.at("correct");
    if (rec.contains("rewritten_ids")) {
      q.rewritten_ids = rec.at("rewritten_ids").get<std::vector<int>>();
      q.projected_ids = rec.at("projected_ids").get<std::vector<int>>();
    }
    r.records.push_back(std::move(q));
  }
  aggregate(r);
  return r;
}

inline std::string report_csv(const EvalReport& r, const Vocabulary& vocab) {
  std::ostringstream out;
  out << "relation,query,rewrite,mask_position,predicted,gold,correct\n";
  for (const auto& q : r.records) {
    out << q.relation << ",\"" << decode_tokens(vocab, q.query_ids) << "\",\""
        << (q.rewritten_ids.empty() ? "" : decode_tokens(vocab, q.rewritten_ids)) << "\","
        << q.mask_position << "," << vocab.token(q.predicted) << "," << vocab.token(q.gold) << ","
        << (q.correct ? 1 : 0) << "\n";
  }
  return out.str();
}

inline std::string percent(double p) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", 100.0 * p);
  return buf;
}

/// Mean P@1 per system in a single-row table (zero-shot, fine-tuned, rewriter).
inline std::string results_table(const std::string& corpus,
                                 const std::vector<std::pair<std::string, double>>& systems) {
  std::ostringstream out;
  out << "Mean precision at one (P@1, macro over relations)\n\n";
  out << "Corpus";
  for (const auto& [name, _] : systems) out << " | " << name;
  out << "\n";
  out << corpus;
  for (const auto& [_, p] : systems) out << " | " << percent(p);
  out << "\n";
  return out.str();
}

// ---------------------------------------------------------------------------
// Rewrite analysis

struct ReplacementPair {
  int original = 0;
  int rewritten = 0;
  std::size_t count = 0;
  std::string example;  // decoded input query showing the pair
};

struct RewriteAnalysis {
  std::size_t positions = 0;
  std::size_t replacements = 0;
  double replacement_rate = 0.0;
  std::map<std::string, std::size_t> category_counts;  // by category of the original token
  std::map<std::string, double> category_share;        // sums to 1 over replacements
  std::vector<ReplacementPair> top_pairs;
};

/// Positional alignment of each input with its rewrite (length-preserving).
inline RewriteAnalysis analyze_rewrites(const EvalReport& report, const World& world, std::size_t top_k = 10) {
  RewriteAnalysis a;
  std::map<std::pair<int, int>, ReplacementPair> pairs;
  for (const auto& rec : report.records) {
    if (rec.rewritten_ids.size() != rec.query_ids.size()) continue;
    for (std::size_t i = 0; i < rec.query_ids.size(); ++i) {
      ++a.positions;
      const int from = rec.query_ids[i], to = rec.rewritten_ids[i];
      if (from == to) continue;
      ++a.replacements;
      const auto cat = static_cast<std::size_t>(from) < world.categories.size() ? world.categories[from] : "unknown";
      ++a.category_counts[cat];
      auto& p = pairs[{from, to}];
      if (p.count++ == 0) {
        p.original = from;
        p.rewritten = to;
        p.example = decode_tokens(world.vocab, rec.query_ids);
      }
    }
  }
  a.replacement_rate = a.positions ? static_cast<double>(a.replacements) / static_cast<double>(a.positions) : 0.0;
  for (const auto& [cat, n] : a.category_counts)
    a.category_share[cat] = static_cast<double>(n) / static_cast<double>(a.replacements);
  for (const auto& [_, p] : pairs) a.top_pairs.push_back(p);
  std::stable_sort(a.top_pairs.begin(), a.top_pairs.end(),
                   [](const auto& x, const auto& y) { return x.count > y.count; });
  if (a.top_pairs.size() > top_k) a.top_pairs.resize(top_k);
  return a;
}

inline nlohmann::json analysis_to_json(const RewriteAnalysis& a, const Vocabulary& vocab) {
  nlohmann::json j;
  j["positions"] = a.positions;
  j["replacements"] = a.replacements;
  j["replacement_rate"] = a.replacement_rate;
  j["category_counts"] = a.category_counts;
  j["category_share"] = a.category_share;
  j["top_pairs"] = nlohmann::json::array();
  for (const auto& p : a.top_pairs)
    j["top_pairs"].push_back({{"original", vocab.token(p.original)},
                              {"rewritten", vocab.token(p.rewritten)},
                              {"count", p.count},
                              {"example", p.example}});
  return j;
}

inline std::string analysis_text(const RewriteAnalysis& a, const Vocabulary& vocab) {
  std::ostringstream out;
  out << "Replaced positions: " << a.replacements << " / " << a.positions << " ("
      << percent(a.replacement_rate) << "%)\n\n";
  out << "Category | Frequency\n";
  std::vector<std::pair<std::string, double>> shares(a.category_share.begin(), a.category_share.end());
  std::stable_sort(shares.begin(), shares.end(), [](const auto& x, const auto& y) { return x.second > y.second; });
  for (const auto& [cat, s] : shares) out << cat << " | " << percent(s) << "%\n";
  out << "\nMost frequent replacements\n";
  for (const auto& p : a.top_pairs)
    out << vocab.token(p.original) << " -> " << vocab.token(p.rewritten) << " | " << p.count << " | " << p.example
        << "\n";
  return out.str();
}

// ---------------------------------------------------------------------------
// Ablations

struct AblationRow {
  std::string name;       // "No auxiliary losses", "SML", "VTL", "SML + VTL"
  double lambda1 = 0.0;
  double lambda2 = 0.0;
  double macro_p_at_1 = 0.0;
  double mean_nearest_distance = 0.0;   // mean over eval positions of min_v ||v - q_i||^2
  double mean_projected_masks = 0.0;    // [MASK] tokens per raw projection
  std::size_t multi_mask_rewrites = 0;  // raw projections with more than one [MASK]
  std::string config_digest;
};

inline std::string ablation_table(const std::vector<AblationRow>& rows) {
  std::ostringstream out;
  out << "Ablation | P@1 | mean NN distance | [MASK]/rewrite | multi-[MASK] rewrites\n";
  for (const auto& r : rows) {
    char buf[160];
    std::snprintf(buf, sizeof buf, " | %s | %.4f | %.3f | %zu\n", percent(r.macro_p_at_1).c_str(),
                  r.mean_nearest_distance, r.mean_projected_masks, r.multi_mask_rewrites);
    out << r.name << buf;
  }
  return out.str();
}

}  // namespace bertese
