// SPDX-License-Identifier: Apache-2.0
//
// LAMA-style JSONL ingestion and world serialization.

#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "bertese/vocab.hpp"
#include "bertese/world.hpp"

namespace bertese {

class DatasetError : public std::runtime_error {
 public:
  DatasetError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

struct SkippedRecord {
  std::size_t line = 0;
  std::string reason;
};

struct LamaLoadResult {
  std::vector<ClozeQuery> queries;
  std::vector<SkippedRecord> skipped;
};

/// Parses one {"relation","query","answer"} object per line. Queries whose
/// answer is not a single in-vocabulary token are skipped and reported.
inline LamaLoadResult load_lama_jsonl(std::istream& in, const Vocabulary& vocab) {
  LamaLoadResult result;
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw DatasetError(lineno, std::string("malformed JSON: ") + e.what());
    }
    if (!rec.is_object() || !rec.contains("relation") || !rec.contains("query") ||
        !rec.contains("answer") || !rec["relation"].is_string() || !rec["query"].is_string() ||
        !rec["answer"].is_string()) {
      throw DatasetError(lineno, "expected string fields relation, query, answer");
    }
    auto ids = encode_query(vocab, rec["query"].get<std::string>());
    const auto masks = std::count(ids.begin(), ids.end(), kMaskId);
    if (masks != 1) {
      throw DatasetError(lineno, "query must contain exactly one [MASK], found " + std::to_string(masks));
    }
    const auto answer_words = split_words(rec["answer"].get<std::string>());
    if (answer_words.size() != 1) {
      result.skipped.push_back({lineno, "answer is not a single token"});
      continue;
    }
    const int answer = vocab.id(answer_words.front());
    if (answer == kUnkId || is_special(answer)) {
      result.skipped.push_back({lineno, "answer '" + answer_words.front() + "' is out of vocabulary"});
      continue;
    }
    result.queries.push_back(make_query(std::move(ids), answer, rec["relation"].get<std::string>()));
  }
  return result;
}

inline LamaLoadResult load_lama_jsonl(const std::filesystem::path& path, const Vocabulary& vocab) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return load_lama_jsonl(in, vocab);
}

/// Writes queries back in the LAMA record format (framing tokens dropped).
inline void write_lama_jsonl(const std::filesystem::path& path, const std::vector<ClozeQuery>& queries,
                             const Vocabulary& vocab) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& q : queries) {
    std::vector<int> inner;
    for (int t : q.tokens)
      if (t != kClsId && t != kSepId) inner.push_back(t);
    nlohmann::json rec;
    rec["relation"] = q.relation;
    rec["query"] = decode_tokens(vocab, inner);
    rec["answer"] = vocab.token(q.answer);
    out << rec.dump() << '\n';
  }
}

// ---------------------------------------------------------------------------
// World files

inline nlohmann::json world_spec_to_json(const SyntheticWorldSpec& s) {
  nlohmann::json j;
  j["relation_count"] = s.relation_count;
  j["entities_per_relation"] = s.entities_per_relation;
  j["objects_per_relation"] = s.objects_per_relation;
  j["eval_fraction"] = s.eval_fraction;
  j["seed"] = s.seed;
  j["templates"] = nlohmann::json::array();
  for (const auto& t : s.templates)
    j["templates"].push_back({{"name", t.name}, {"object_kind", t.object_kind},
                              {"canonical", t.canonical}, {"perturbed", t.perturbed}});
  j["entities"] = s.entities;
  j["token_category"] = s.token_category;
  return j;
}

inline SyntheticWorldSpec world_spec_from_json(const nlohmann::json& j) {
  SyntheticWorldSpec s;
  s.relation_count = j.at("relation_count").get<int>();
  s.entities_per_relation = j.at("entities_per_relation").get<int>();
  s.objects_per_relation = j.at("objects_per_relation").get<int>();
  s.eval_fraction = j.at("eval_fraction").get<double>();
  s.seed = j.at("seed").get<std::uint64_t>();
  for (const auto& t : j.at("templates"))
    s.templates.push_back({t.at("name"), t.at("object_kind"), t.at("canonical"), t.at("perturbed")});
  s.entities = j.at("entities").get<std::vector<std::string>>();
  s.token_category = j.at("token_category").get<std::map<std::string, std::string>>();
  return s;
}

inline nlohmann::json world_to_json(const World& w) {
  nlohmann::json j;
  j["spec"] = world_spec_to_json(w.spec);
  j["vocab"] = w.vocab.tokens();
  j["categories"] = w.categories;
  j["relations"] = nlohmann::json::array();
  for (const auto& r : w.relations)
    j["relations"].push_back({{"name", r.templ.name}, {"canonical", r.templ.canonical},
                              {"perturbed", r.templ.perturbed}, {"objects", r.objects}});
  j["facts"] = nlohmann::json::array();
  for (const auto& f : w.facts) j["facts"].push_back({f.subject, f.relation, f.object});
  j["eval_subjects"] = std::vector<int>(w.eval_subjects.begin(), w.eval_subjects.end());
  return j;
}

/// Regenerates the world from the stored spec and checks it against the
/// stored vocabulary, facts and split.
inline World world_from_json(const nlohmann::json& j) {
  World w = generate_world(world_spec_from_json(j.at("spec")));
  if (j.at("vocab").get<std::vector<std::string>>() != w.vocab.tokens()) {
    throw std::runtime_error("world file: vocabulary does not match its spec");
  }
  const auto& facts = j.at("facts");
  if (facts.size() != w.facts.size()) throw std::runtime_error("world file: fact count mismatch");
  for (std::size_t i = 0; i < facts.size(); ++i) {
    const auto& f = w.facts[i];
    if (facts[i][0] != f.subject || facts[i][1] != f.relation || facts[i][2] != f.object) {
      throw std::runtime_error("world file: fact " + std::to_string(i) + " does not match its spec");
    }
  }
  if (j.at("eval_subjects").get<std::vector<int>>() !=
      std::vector<int>(w.eval_subjects.begin(), w.eval_subjects.end())) {
    throw std::runtime_error("world file: eval split does not match its spec");
  }
  return w;
}

inline void save_world(const std::filesystem::path& dir, const World& w) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "world.json", std::ios::binary);
    out << world_to_json(w).dump(1) << '\n';
  }
  {
    std::ofstream out(dir / "vocab.txt", std::ios::binary);
    for (std::size_t i = 0; i < w.vocab.size(); ++i)
      out << w.vocab.token(static_cast<int>(i)) << '\t' << w.categories[i] << '\n';
  }
  write_lama_jsonl(dir / "canonical.jsonl", w.canonical, w.vocab);
  write_lama_jsonl(dir / "perturbed_train.jsonl", w.perturbed_train(), w.vocab);
  write_lama_jsonl(dir / "perturbed_eval.jsonl", w.perturbed_eval(), w.vocab);
}

inline World load_world(const std::filesystem::path& dir) {
  std::ifstream in(dir / "world.json");
  if (!in) throw std::runtime_error("cannot open " + (dir / "world.json").string());
  return world_from_json(nlohmann::json::parse(in));
}

}  // namespace bertese
