// SPDX-License-Identifier: Apache-2.0
//
// Word-level vocabulary with fixed special ids, and cloze queries.

#pragma once

#include <algorithm>
#include <cctype>
#include <cstddef>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace bertese {

inline constexpr int kPadId = 0;
inline constexpr int kUnkId = 1;
inline constexpr int kClsId = 2;
inline constexpr int kSepId = 3;
inline constexpr int kMaskId = 4;
inline constexpr int kNumSpecial = 5;

inline constexpr std::string_view kMaskToken = "[MASK]";

inline bool is_special(int id) { return id >= 0 && id < kNumSpecial; }

class Vocabulary {
 public:
  Vocabulary() {
    for (const char* t : {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"}) add(t);
  }

  /// Adds a token if absent and returns its id.
  int add(const std::string& token) {
    if (auto it = index_.find(token); it != index_.end()) return it->second;
    const int id = static_cast<int>(tokens_.size());
    tokens_.push_back(token);
    index_.emplace(token, id);
    return id;
  }

  bool contains(const std::string& token) const { return index_.count(token) > 0; }

  /// Id of a token, or [UNK].
  int id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnkId : it->second;
  }

  const std::string& token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
      throw std::out_of_range("vocabulary: id " + std::to_string(id) +
                              " outside vocabulary of size " + std::to_string(tokens_.size()));
    }
    return tokens_[id];
  }

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

inline std::string to_lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

/// Lowercased whitespace split; "[mask]" is restored to the mask token.
inline std::vector<std::string> split_words(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::vector<std::string> words;
  for (std::string w; in >> w;) {
    w = to_lower(std::move(w));
    if (w == "[mask]") w = std::string(kMaskToken);
    words.push_back(std::move(w));
  }
  return words;
}

/// Lowercase, split on whitespace, map unknowns to [UNK], frame with [CLS]/[SEP].
inline std::vector<int> encode_query(const Vocabulary& vocab, std::string_view text) {
  const auto words = split_words(text);
  if (words.empty()) throw std::invalid_argument("encode_query: empty text");
  std::vector<int> ids{kClsId};
  for (const auto& w : words) ids.push_back(vocab.id(w));
  ids.push_back(kSepId);
  return ids;
}

inline std::string decode_tokens(const Vocabulary& vocab, const std::vector<int>& ids) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab.size()) {
      throw std::out_of_range("decode_tokens: id " + std::to_string(ids[i]) +
                              " >= vocabulary size " + std::to_string(vocab.size()));
    }
    if (i) out += ' ';
    out += vocab.token(ids[i]);
  }
  return out;
}

struct ClozeQuery {
  std::vector<int> tokens;  // framed by [CLS] ... [SEP]
  std::size_t mask_index = 0;
  int answer = kUnkId;
  std::string relation;
  int subject = -1;  // subject token id when known (synthetic world), else -1
};

/// Throws std::invalid_argument unless the query holds exactly one [MASK]
/// at mask_index and a non-special in-vocabulary answer.
inline void validate_query(const ClozeQuery& q, std::size_t vocab_size) {
  const auto masks = std::count(q.tokens.begin(), q.tokens.end(), kMaskId);
  if (masks != 1) {
    throw std::invalid_argument("query has " + std::to_string(masks) + " [MASK] tokens");
  }
  if (q.mask_index >= q.tokens.size() || q.tokens[q.mask_index] != kMaskId) {
    throw std::invalid_argument("mask_index does not point at [MASK]");
  }
  if (q.answer < kNumSpecial || static_cast<std::size_t>(q.answer) >= vocab_size) {
    throw std::invalid_argument("answer id " + std::to_string(q.answer) +
                                " is not an ordinary vocabulary token");
  }
  for (int t : q.tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= vocab_size) {
      throw std::invalid_argument("token id " + std::to_string(t) + " outside vocabulary");
    }
  }
}

inline ClozeQuery make_query(std::vector<int> tokens, int answer, std::string relation,
                             int subject = -1) {
  ClozeQuery q;
  q.mask_index = static_cast<std::size_t>(
      std::find(tokens.begin(), tokens.end(), kMaskId) - tokens.begin());
  q.tokens = std::move(tokens);
  q.answer = answer;
  q.relation = std::move(relation);
  q.subject = subject;
  return q;
}

}  // namespace bertese
