#pragma once

#include <algorithm>
#include <cctype>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "mivqa/error.hpp"

namespace mivqa {

struct TokenSeq {
  std::vector<int> ids;    // length L, pad id past the mask
  std::vector<char> mask;  // 1 = real token
  std::string vocab_ref;   // tokenizer that produced the ids

  int length() const { return static_cast<int>(std::count(mask.begin(), mask.end(), 1)); }
};

/// Text -> token ids. Pretrained-embedding adapters bring their own.
class TokenizerPlugin {
 public:
  virtual ~TokenizerPlugin() = default;
  virtual std::vector<int> encode(std::string_view text) const = 0;
  virtual int pad_id() const = 0;
  virtual int vocab_size() const = 0;
  virtual std::string name() const = 0;
};

/// Lowercases and splits on anything that is not a letter, digit or
/// apostrophe; punctuation is dropped.
inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c) || ch == '\'' || c >= 0x80) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

/// Word-level tokenizer over a closed vocabulary: 0 = <pad>, 1 = <unk>.
class WordTokenizer final : public TokenizerPlugin {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;

  WordTokenizer() : words_{"<pad>", "<unk>"} {}

  explicit WordTokenizer(std::vector<std::string> words) : WordTokenizer() {
    for (auto& w : words) {
      if (w == "<pad>" || w == "<unk>") continue;
      index_[w] = static_cast<int>(words_.size());
      words_.push_back(std::move(w));
    }
  }

  /// Vocabulary of every word in `texts`, sorted.
  static WordTokenizer fit(const std::vector<std::string>& texts) {
    std::set<std::string> words;
    for (const auto& t : texts)
      for (auto& w : split_words(t)) words.insert(std::move(w));
    return WordTokenizer(std::vector<std::string>(words.begin(), words.end()));
  }

  std::vector<int> encode(std::string_view text) const override {
    std::vector<int> ids;
    for (const auto& w : split_words(text)) {
      auto it = index_.find(w);
      ids.push_back(it == index_.end() ? kUnk : it->second);
    }
    return ids;
  }

  int pad_id() const override { return kPad; }
  int vocab_size() const override { return static_cast<int>(words_.size()); }
  std::string name() const override { return "word"; }

  /// Full id -> word table, including the two reserved entries.
  const std::vector<std::string>& words() const { return words_; }

 private:
  std::vector<std::string> words_;
  std::map<std::string, int> index_;
};

/// Encodes, then pads or truncates to `max_len`.
inline TokenSeq tokenize(std::string_view question, int max_len, const TokenizerPlugin& tokenizer) {
  require(max_len >= 1, Errc::ConfigInvalid, "question length must be at least 1");
  std::vector<int> ids = tokenizer.encode(question);
  require(!ids.empty(), Errc::EmptyQuestion, "no tokens in question '" + std::string(question) + "'");
  TokenSeq seq;
  seq.vocab_ref = tokenizer.name();
  const auto keep = std::min(ids.size(), static_cast<std::size_t>(max_len));
  seq.ids.assign(static_cast<std::size_t>(max_len), tokenizer.pad_id());
  seq.mask.assign(static_cast<std::size_t>(max_len), 0);
  for (std::size_t i = 0; i < keep; ++i) {
    seq.ids[i] = ids[i];
    seq.mask[i] = 1;
  }
  return seq;
}

}  // namespace mivqa
