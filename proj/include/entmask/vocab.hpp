#pragma once

#include <algorithm>
#include <istream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "entmask/errors.hpp"

namespace entmask {

// Token ids. The five reserved ids come first and are fixed forever; content
// tokens start right after them.
class Vocabulary {
 public:
  static constexpr int pad_id = 0;
  static constexpr int unk_id = 1;
  static constexpr int cls_id = 2;
  static constexpr int sep_id = 3;
  static constexpr int mask_id = 4;
  static constexpr int reserved_count = 5;

  Vocabulary() : tokens_{"<pad>", "<unk>", "<cls>", "<sep>", "<mask>"} {
    for (int i = 0; i < reserved_count; ++i) index_[tokens_[static_cast<size_t>(i)]] = i;
  }

  static Vocabulary synthetic(int content_tokens) {
    if (content_tokens < 1) {
      throw ConfigError("synthetic vocabulary needs at least one content token");
    }
    Vocabulary v;
    for (int i = 0; i < content_tokens; ++i) {
      v.push_token("w" + std::to_string(i));
    }
    return v;
  }

  // Whitespace tokens ranked by frequency, ties broken lexicographically,
  // truncated so the whole vocabulary (reserved ids included) has at most
  // max_size entries.
  static Vocabulary build(std::istream& corpus, int max_size) {
    if (max_size < reserved_count + 1) {
      throw ConfigError("vocabulary max_size must leave room for content tokens");
    }
    std::map<std::string, int64_t> freq;
    std::string tok;
    while (corpus >> tok) ++freq[tok];
    if (freq.empty()) throw DataError("cannot build vocabulary from an empty corpus");
    std::vector<std::pair<std::string, int64_t>> ranked(freq.begin(), freq.end());
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second > b.second;
      return a.first < b.first;
    });
    Vocabulary v;
    for (const auto& [token, count] : ranked) {
      (void)count;
      if (v.size() >= max_size) break;
      if (v.index_.count(token)) continue;
      v.push_token(token);
    }
    return v;
  }

  static Vocabulary build(const std::string& corpus, int max_size) {
    std::istringstream in(corpus);
    return build(in, max_size);
  }

  int size() const { return static_cast<int>(tokens_.size()); }
  int content_size() const { return size() - reserved_count; }

  // Reserved surfaces in running text map to unk: ground-truth sequences may
  // never contain the mask id or framing ids.
  int id_of(const std::string& token) const {
    auto it = index_.find(token);
    if (it == index_.end() || it->second < reserved_count) return unk_id;
    return it->second;
  }

  const std::string& token_of(int id) const {
    if (id < 0 || id >= size()) {
      throw IndexError("token id " + std::to_string(id) + " out of range for vocabulary of " +
                       std::to_string(size()));
    }
    return tokens_[static_cast<size_t>(id)];
  }

  static bool is_special(int id) { return id < reserved_count; }

  // cls/sep/pad framing is never masked; unk counts as content.
  static bool is_maskable(int id) {
    return id != pad_id && id != cls_id && id != sep_id && id != mask_id;
  }

  const std::vector<std::string>& tokens() const { return tokens_; }

  bool operator==(const Vocabulary& o) const { return tokens_ == o.tokens_; }

 private:
  void push_token(const std::string& t) {
    index_[t] = size();
    tokens_.push_back(t);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

using TokenSequence = std::vector<int>;

inline TokenSequence tokenize(const std::string& text, const Vocabulary& v,
                              int max_len = 128) {
  TokenSequence out;
  out.push_back(Vocabulary::cls_id);
  std::istringstream in(text);
  std::string tok;
  while (in >> tok) {
    if (static_cast<int>(out.size()) >= max_len - 1) break;
    out.push_back(v.id_of(tok));
  }
  out.push_back(Vocabulary::sep_id);
  return out;
}

}  // namespace entmask
