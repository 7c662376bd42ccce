#pragma once

#include <string>
#include <variant>
#include <vector>

#include "oscar/compressor.hpp"
#include "oscar/tokenizer.hpp"
#include "oscar/transformer.hpp"

namespace oscar {

/// Prompt scaffold: system/background prefix, separator between documents,
/// question and answer markers. Rendering k documents inserts k-1 separators.
struct RagPromptTemplate {
  std::vector<int> system_prefix;    // starts with [BOS]
  int separator = Tokenizer::kSep;
  std::vector<int> question_prefix;
  std::vector<int> answer_prefix;

  static RagPromptTemplate standard(const Tokenizer& tok);
  int overhead() const {
    return static_cast<int>(system_prefix.size() + question_prefix.size() +
                            answer_prefix.size());
  }
};

/// A document in a prompt: raw token ids or a compressed embedding block.
using PromptDoc = std::variant<std::vector<int>, CompressedDoc>;

struct AnswerRecord {
  std::string qid;
  std::string variant;  // teacher | oscar | oscar-e2e | no-rag
  std::vector<int> token_ids;
  std::string text;
  std::vector<float> scores;  // per-doc relevance actually used (may be empty)
  int n_docs = 0;

  std::string to_jsonl() const;
};

/// Assembles [system "background"] doc1 SEP doc2 ... [question] q [answer].
RagSequence build_prompt(const RagPromptTemplate& tmpl, const std::vector<int>& query_tokens,
                         const std::vector<PromptDoc>& docs, int max_seq);

/// No-compression path: raw documents in the prompt, greedy decoding.
AnswerRecord answer_teacher(const TransformerModel& generator, const Tokenizer& tok,
                            const RagPromptTemplate& tmpl, const std::string& qid,
                            const std::vector<int>& query_tokens,
                            const std::vector<std::vector<int>>& docs, int max_new = 32);

/// Compressed path: batch-compress then generate from the embedding blocks.
AnswerRecord answer_oscar(const TransformerModel& generator, const Compressor& compressor,
                          const Tokenizer& tok, const RagPromptTemplate& tmpl,
                          const std::string& qid, const std::vector<int>& query_tokens,
                          const std::vector<std::vector<int>>& docs, bool query_dependent = true,
                          int max_new = 32);

/// Compress+score all candidates in one pass each, keep the top k_keep by
/// predicted relevance, generate from those same embeddings.
AnswerRecord answer_e2e_rerank(const TransformerModel& generator, const Compressor& compressor,
                               const Tokenizer& tok, const RagPromptTemplate& tmpl,
                               const std::string& qid, const std::vector<int>& query_tokens,
                               const std::vector<std::vector<int>>& candidates, int k_keep,
                               int max_new = 32);

}  // namespace oscar
