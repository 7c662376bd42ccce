#pragma once

#include <string>
#include <unordered_map>
#include <vector>

namespace oscar {

/// Whitespace word-level tokenizer over the synthetic corpus vocabulary plus
/// the reserved specials. Special ids are fixed so models and files agree:
/// [PAD]=0 [BOS]=1 [EOS]=2 [SEP]=3 [RR]=4 [MEM_1..8]=5..12, words follow.
class Tokenizer {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kSep = 3;
  static constexpr int kRr = 4;
  static constexpr int kMemBase = 5;  // [MEM_1] .. [MEM_8]
  static constexpr int kMaxMem = 8;
  static constexpr int kNumSpecials = kMemBase + kMaxMem;

  Tokenizer() = default;
  /// Builds ids for `words` after the specials; duplicates are erased,
  /// order of first appearance kept.
  explicit Tokenizer(const std::vector<std::string>& words);

  int vocab_size() const { return static_cast<int>(id_to_word_.size()); }
  bool has_word(const std::string& w) const { return word_to_id_.count(w) > 0; }
  int id(const std::string& w) const;
  const std::string& word(int id) const;

  std::vector<int> encode(const std::string& text) const;
  /// Joins words with single spaces; specials are skipped unless asked for.
  std::string decode(const std::vector<int>& ids, bool keep_specials = false) const;

  static bool is_special(int id) { return id < kNumSpecials; }

  void save(const std::string& path) const;
  static Tokenizer load(const std::string& path);

 private:
  std::vector<std::string> id_to_word_;
  std::unordered_map<std::string, int> word_to_id_;
  void init_specials();
};

}  // namespace oscar
