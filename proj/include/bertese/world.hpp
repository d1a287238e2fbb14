// SPDX-License-Identifier: Apache-2.0
//
// Synthetic relational-fact world with a deliberate template gap.
//
// Every entity holds one fact per relation. The predictor is pretrained on
// sentences built from each relation's canonical template; queries built
// from the perturbed template probe the same facts with different wording.

#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "bertese/vocab.hpp"

namespace bertese {

inline constexpr std::string_view kSubjectSlot = "SUBJ";

struct RelationTemplate {
  std::string name;         // relation identifier, e.g. "born_in"
  std::string object_kind;  // prefix of this relation's object tokens
  std::string canonical;    // e.g. "SUBJ was born in [MASK] ."
  std::string perturbed;    // e.g. "SUBJ is raised in [MASK] ."
};

struct SyntheticWorldSpec {
  int relation_count = 8;
  int entities_per_relation = 100;
  int objects_per_relation = 10;
  double eval_fraction = 0.2;
  std::uint64_t seed = 1;
  std::vector<RelationTemplate> templates;     // empty -> built-in bank
  std::vector<std::string> entities;           // empty -> subj_0 .. subj_{n-1}
  std::map<std::string, std::string> token_category;  // word -> category
};

/// Relations used when the spec does not list templates. Perturbations are
/// length-preserving template edits: tense swaps, determiner swaps and
/// synonym substitutions.
inline const std::vector<RelationTemplate>& default_template_bank() {
  static const std::vector<RelationTemplate> bank = {
      {"born_in", "city", "SUBJ was born in [MASK] .", "SUBJ is raised in [MASK] ."},
      {"died_in", "town", "SUBJ was killed in [MASK] .", "SUBJ is slain in [MASK] ."},
      {"located_in", "region", "SUBJ was located in [MASK] .", "SUBJ is situated in [MASK] ."},
      {"works_for", "company", "SUBJ was employed by [MASK] .", "SUBJ is hired by [MASK] ."},
      {"founded_by", "person", "SUBJ was founded by [MASK] .", "SUBJ is created by [MASK] ."},
      {"citizen_of", "country", "SUBJ was a citizen of [MASK] .", "SUBJ is the native of [MASK] ."},
      {"occupation", "job", "SUBJ was a [MASK] by trade .", "SUBJ is the [MASK] by craft ."},
      {"plays", "instrument", "SUBJ was playing a [MASK] .", "SUBJ is strumming the [MASK] ."},
  };
  return bank;
}

inline const std::map<std::string, std::string>& default_token_categories() {
  static const std::map<std::string, std::string> cats = {
      {"was", "verb"},      {"is", "verb"},       {"born", "verb"},     {"raised", "verb"},
      {"killed", "verb"},   {"slain", "verb"},    {"located", "verb"},  {"situated", "verb"},
      {"employed", "verb"}, {"hired", "verb"},    {"founded", "verb"},  {"created", "verb"},
      {"playing", "verb"},  {"strumming", "verb"}, {"a", "determiner"}, {"the", "determiner"},
      {"an", "determiner"},
  };
  return cats;
}

struct Fact {
  int subject = 0;
  int relation = 0;
  int object = 0;
};

struct RelationInfo {
  RelationTemplate templ;
  std::vector<std::string> canonical_words;
  std::vector<std::string> perturbed_words;
  std::vector<int> objects;
};

struct World {
  SyntheticWorldSpec spec;
  Vocabulary vocab;
  std::vector<std::string> categories;  // by token id
  std::vector<RelationInfo> relations;
  std::vector<int> entities;            // subject token ids
  std::vector<Fact> facts;
  std::set<int> eval_subjects;

  // One query per fact, in fact order.
  std::vector<ClozeQuery> canonical;
  std::vector<ClozeQuery> perturbed;

  bool is_eval(const ClozeQuery& q) const { return eval_subjects.count(q.subject) > 0; }

  std::vector<ClozeQuery> select(const std::vector<ClozeQuery>& qs, bool eval) const {
    std::vector<ClozeQuery> out;
    for (const auto& q : qs)
      if (is_eval(q) == eval) out.push_back(q);
    return out;
  }
  std::vector<ClozeQuery> perturbed_train() const { return select(perturbed, false); }
  std::vector<ClozeQuery> perturbed_eval() const { return select(perturbed, true); }
  std::vector<ClozeQuery> canonical_train() const { return select(canonical, false); }
  std::vector<ClozeQuery> canonical_eval() const { return select(canonical, true); }

  /// Canonical sentence of a fact with the object in place of [MASK].
  std::vector<int> fact_sentence(const Fact& f) const {
    return instantiate(relations[f.relation].canonical_words, f.subject, f.object);
  }

  std::vector<int> instantiate(const std::vector<std::string>& words, int subject,
                               int fill_mask = kMaskId) const {
    std::vector<int> ids{kClsId};
    for (const auto& w : words) {
      if (w == kSubjectSlot) {
        ids.push_back(subject);
      } else if (w == kMaskToken) {
        ids.push_back(fill_mask);
      } else {
        ids.push_back(vocab.id(w));
      }
    }
    ids.push_back(kSepId);
    return ids;
  }
};

namespace detail {

inline std::vector<std::string> template_words(const std::string& text, const std::string& rel) {
  std::vector<std::string> words;
  std::istringstream in(text);
  for (std::string w; in >> w;) words.push_back(w == "[mask]" ? std::string(kMaskToken) : w);
  const auto subj = std::count(words.begin(), words.end(), std::string(kSubjectSlot));
  const auto mask = std::count(words.begin(), words.end(), std::string(kMaskToken));
  if (subj != 1 || mask != 1) {
    throw std::invalid_argument("relation " + rel + ": template '" + text +
                                "' needs exactly one SUBJ and one [MASK] slot");
  }
  return words;
}

inline std::vector<RelationTemplate> resolve_templates(const SyntheticWorldSpec& spec) {
  if (spec.relation_count <= 0) throw std::invalid_argument("relation_count must be positive");
  if (!spec.templates.empty()) {
    if (static_cast<int>(spec.templates.size()) != spec.relation_count) {
      throw std::invalid_argument("relation_count does not match the template list");
    }
    return spec.templates;
  }
  std::vector<RelationTemplate> out;
  const auto& bank = default_template_bank();
  for (int r = 0; r < spec.relation_count; ++r) {
    if (r < static_cast<int>(bank.size())) {
      out.push_back(bank[r]);
    } else {
      const std::string p = "rel" + std::to_string(r) + "_";
      out.push_back({"relation_" + std::to_string(r), "obj" + std::to_string(r),
                     "SUBJ " + p + "a " + p + "b [MASK] .",
                     "SUBJ " + p + "c " + p + "d [MASK] ."});
    }
  }
  return out;
}

}  // namespace detail

/// Builds the vocabulary, facts and both query sets. Deterministic in spec.seed.
inline World generate_world(const SyntheticWorldSpec& spec) {
  if (spec.entities_per_relation <= 0) throw std::invalid_argument("entities_per_relation must be positive");
  if (spec.objects_per_relation <= 0) throw std::invalid_argument("objects_per_relation must be positive");
  if (!(spec.eval_fraction > 0.0 && spec.eval_fraction < 1.0)) {
    throw std::invalid_argument("eval_fraction must lie in (0, 1)");
  }
  World w;
  w.spec = spec;

  std::vector<std::string> entity_names = spec.entities;
  if (entity_names.empty()) {
    for (int e = 0; e < spec.entities_per_relation; ++e)
      entity_names.push_back("subj_" + std::to_string(e));
  }
  if (static_cast<int>(entity_names.size()) != spec.entities_per_relation) {
    throw std::invalid_argument("entity list does not match entities_per_relation");
  }
  {
    std::set<std::string> seen;
    for (const auto& n : entity_names)
      if (!seen.insert(to_lower(n)).second) {
        throw std::invalid_argument("duplicate subject '" + n +
                                    "' within a relation makes the gold answer ambiguous");
      }
  }

  const auto templates = detail::resolve_templates(spec);
  std::vector<std::string> categories(kNumSpecial, "special");
  auto add_token = [&](const std::string& tok, const std::string& cat) {
    const bool fresh = !w.vocab.contains(tok);
    const int id = w.vocab.add(tok);
    if (fresh) categories.push_back(cat);
    return id;
  };
  auto word_category = [&](const std::string& word) {
    if (auto it = spec.token_category.find(word); it != spec.token_category.end()) return it->second;
    const auto& defaults = default_token_categories();
    if (auto it = defaults.find(word); it != defaults.end()) return it->second;
    return std::string("noun-filler");
  };

  for (const auto& n : entity_names) w.entities.push_back(add_token(to_lower(n), "entity"));
  for (const auto& t : templates) {
    RelationInfo info;
    info.templ = t;
    info.canonical_words = detail::template_words(t.canonical, t.name);
    info.perturbed_words = detail::template_words(t.perturbed, t.name);
    bool differs = false;
    for (std::size_t i = 0; i < std::max(info.canonical_words.size(), info.perturbed_words.size()); ++i) {
      const bool in_c = i < info.canonical_words.size(), in_p = i < info.perturbed_words.size();
      if (!in_c || !in_p || info.canonical_words[i] != info.perturbed_words[i]) differs = true;
    }
    if (!differs) {
      throw std::invalid_argument("relation " + t.name + ": perturbed template equals canonical");
    }
    for (const auto* words : {&info.canonical_words, &info.perturbed_words})
      for (const auto& wd : *words)
        if (wd != kSubjectSlot && wd != kMaskToken) add_token(wd, word_category(wd));
    for (int k = 0; k < spec.objects_per_relation; ++k)
      info.objects.push_back(add_token(t.object_kind + "_" + std::to_string(k), "entity"));
    w.relations.push_back(std::move(info));
  }
  {
    std::map<std::vector<std::string>, std::string> owner;
    for (const auto& rel : w.relations)
      for (const auto* words : {&rel.canonical_words, &rel.perturbed_words}) {
        auto [it, fresh] = owner.emplace(*words, rel.templ.name);
        if (!fresh && it->second != rel.templ.name) {
          throw std::invalid_argument("relations " + it->second + " and " + rel.templ.name +
                                      " share a template, so their queries are ambiguous");
        }
      }
  }
  w.categories = std::move(categories);

  std::mt19937_64 rng(spec.seed);
  for (std::size_t r = 0; r < w.relations.size(); ++r) {
    const auto& objs = w.relations[r].objects;
    std::uniform_int_distribution<std::size_t> pick(0, objs.size() - 1);
    for (int subject : w.entities) w.facts.push_back({subject, static_cast<int>(r), objs[pick(rng)]});
  }

  std::vector<int> order = w.entities;
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_eval = std::max<std::size_t>(
      1, static_cast<std::size_t>(spec.eval_fraction * static_cast<double>(order.size()) + 0.5));
  if (n_eval >= order.size()) throw std::invalid_argument("eval split leaves no training subjects");
  w.eval_subjects.insert(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_eval));

  for (const auto& f : w.facts) {
    const auto& rel = w.relations[f.relation];
    auto c = make_query(w.instantiate(rel.canonical_words, f.subject), f.object, rel.templ.name, f.subject);
    auto p = make_query(w.instantiate(rel.perturbed_words, f.subject), f.object, rel.templ.name, f.subject);
    validate_query(c, w.vocab.size());
    validate_query(p, w.vocab.size());
    w.canonical.push_back(std::move(c));
    w.perturbed.push_back(std::move(p));
  }
  return w;
}

}  // namespace bertese
