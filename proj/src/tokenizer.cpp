#include "oscar/tokenizer.hpp"

#include <fstream>
#include <sstream>

#include "oscar/errors.hpp"

namespace oscar {

void Tokenizer::init_specials() {
  id_to_word_ = {"[PAD]", "[BOS]", "[EOS]", "[SEP]", "[RR]"};
  for (int j = 1; j <= kMaxMem; j++) id_to_word_.push_back("[MEM_" + std::to_string(j) + "]");
  for (size_t i = 0; i < id_to_word_.size(); i++) word_to_id_[id_to_word_[i]] = static_cast<int>(i);
}

Tokenizer::Tokenizer(const std::vector<std::string>& words) {
  init_specials();
  for (const auto& w : words) {
    if (w.empty() || word_to_id_.count(w)) continue;
    word_to_id_[w] = static_cast<int>(id_to_word_.size());
    id_to_word_.push_back(w);
  }
}

int Tokenizer::id(const std::string& w) const {
  auto it = word_to_id_.find(w);
  if (it == word_to_id_.end()) throw DataError("tokenizer: unknown word '" + w + "'");
  return it->second;
}

const std::string& Tokenizer::word(int id) const {
  if (id < 0 || id >= vocab_size())
    throw DataError("tokenizer: id " + std::to_string(id) + " out of range");
  return id_to_word_[id];
}

std::vector<int> Tokenizer::encode(const std::string& text) const {
  std::vector<int> out;
  std::istringstream is(text);
  std::string w;
  while (is >> w) out.push_back(id(w));
  return out;
}

std::string Tokenizer::decode(const std::vector<int>& ids, bool keep_specials) const {
  std::string out;
  for (int id : ids) {
    if (!keep_specials && is_special(id)) continue;
    if (!out.empty()) out += ' ';
    out += word(id);
  }
  return out;
}

void Tokenizer::save(const std::string& path) const {
  std::ofstream os(path);
  if (!os) throw DataError("tokenizer: cannot write " + path);
  for (const auto& w : id_to_word_) os << w << '\n';
}

Tokenizer Tokenizer::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("tokenizer: cannot open " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(is, line))
    if (!line.empty()) lines.push_back(line);
  if (lines.size() < kNumSpecials) throw DataError("tokenizer: file too short " + path);
  Tokenizer t;
  t.init_specials();
  for (size_t i = 0; i < lines.size(); i++) {
    if (i < kNumSpecials) {
      if (lines[i] != t.id_to_word_[i]) throw DataError("tokenizer: specials mismatch in " + path);
      continue;
    }
    t.word_to_id_[lines[i]] = static_cast<int>(t.id_to_word_.size());
    t.id_to_word_.push_back(lines[i]);
  }
  return t;
}

}  // namespace oscar
