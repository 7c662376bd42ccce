#include "oscar/pipeline.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

#include "oscar/errors.hpp"

namespace oscar {

RagPromptTemplate RagPromptTemplate::standard(const Tokenizer& tok) {
  RagPromptTemplate t;
  t.system_prefix = {Tokenizer::kBos, tok.id("background")};
  t.question_prefix = {tok.id("question")};
  t.answer_prefix = {tok.id("answer")};
  return t;
}

std::string AnswerRecord::to_jsonl() const {
  std::ostringstream os;
  os << "{\"qid\": \"" << qid << "\", \"variant\": \"" << variant << "\", \"answer\": \""
     << text << "\", \"scores\": [";
  for (size_t i = 0; i < scores.size(); i++) os << (i ? ", " : "") << scores[i];
  os << "], \"n_docs\": " << n_docs << "}";
  return os.str();
}

RagSequence build_prompt(const RagPromptTemplate& tmpl, const std::vector<int>& query_tokens,
                         const std::vector<PromptDoc>& docs, int max_seq) {
  RagSequence seq;
  seq.push_tokens(tmpl.system_prefix);
  for (size_t i = 0; i < docs.size(); i++) {
    if (i > 0) seq.push_token(tmpl.separator);
    if (std::holds_alternative<std::vector<int>>(docs[i]))
      seq.push_tokens(std::get<std::vector<int>>(docs[i]));
    else
      seq.push_embeddings(std::get<CompressedDoc>(docs[i]).embeddings);
  }
  seq.push_tokens(tmpl.question_prefix);
  seq.push_tokens(query_tokens);
  seq.push_tokens(tmpl.answer_prefix);
  if (seq.length() > max_seq)
    throw SequenceLengthError("build_prompt: " + std::to_string(docs.size()) +
                              " documents render to " + std::to_string(seq.length()) +
                              " positions, over max_seq " + std::to_string(max_seq));
  return seq;
}

namespace {

AnswerRecord finish(const TransformerModel& generator, const Tokenizer& tok,
                    const RagSequence& prompt, std::string qid, std::string variant,
                    int n_docs, std::vector<float> scores, int max_new) {
  AnswerRecord rec;
  rec.qid = std::move(qid);
  rec.variant = std::move(variant);
  rec.n_docs = n_docs;
  rec.scores = std::move(scores);
  rec.token_ids = generator.greedy_decode(prompt, max_new, Tokenizer::kEos);
  rec.text = tok.decode(rec.token_ids);
  return rec;
}

}  // namespace

AnswerRecord answer_teacher(const TransformerModel& generator, const Tokenizer& tok,
                            const RagPromptTemplate& tmpl, const std::string& qid,
                            const std::vector<int>& query_tokens,
                            const std::vector<std::vector<int>>& docs, int max_new) {
  std::vector<PromptDoc> pdocs(docs.begin(), docs.end());
  RagSequence prompt = build_prompt(tmpl, query_tokens, pdocs, generator.cfg.max_seq);
  return finish(generator, tok, prompt, qid, docs.empty() ? "no-rag" : "teacher",
                static_cast<int>(docs.size()), {}, max_new);
}

AnswerRecord answer_oscar(const TransformerModel& generator, const Compressor& compressor,
                          const Tokenizer& tok, const RagPromptTemplate& tmpl,
                          const std::string& qid, const std::vector<int>& query_tokens,
                          const std::vector<std::vector<int>>& docs, bool query_dependent,
                          int max_new) {
  NoGradGuard ng;
  bool scored = compressor.rerank.has_value();
  auto compressed = compressor.batch_compress(query_tokens, docs, scored, query_dependent);
  std::vector<PromptDoc> pdocs;
  std::vector<float> scores;
  for (auto& c : compressed) {
    if (scored) scores.push_back(*c.relevance);
    pdocs.emplace_back(std::move(c));
  }
  RagSequence prompt = build_prompt(tmpl, query_tokens, pdocs, generator.cfg.max_seq);
  return finish(generator, tok, prompt, qid, "oscar", static_cast<int>(docs.size()),
                std::move(scores), max_new);
}

AnswerRecord answer_e2e_rerank(const TransformerModel& generator, const Compressor& compressor,
                               const Tokenizer& tok, const RagPromptTemplate& tmpl,
                               const std::string& qid, const std::vector<int>& query_tokens,
                               const std::vector<std::vector<int>>& candidates, int k_keep,
                               int max_new) {
  if (!compressor.rerank.has_value())
    throw ConfigError("answer_e2e_rerank: compressor has no rerank head");
  if (k_keep < 1 || k_keep > static_cast<int>(candidates.size()))
    throw ConfigError("answer_e2e_rerank: k_keep " + std::to_string(k_keep) + " not in [1," +
                      std::to_string(candidates.size()) + "]");
  NoGradGuard ng;
  auto compressed = compressor.batch_compress(query_tokens, candidates, true);
  std::vector<int> order(compressed.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return *compressed[a].relevance > *compressed[b].relevance;
  });
  std::vector<PromptDoc> pdocs;
  std::vector<float> scores;
  for (int i = 0; i < k_keep; i++) {
    scores.push_back(*compressed[order[i]].relevance);
    pdocs.emplace_back(std::move(compressed[order[i]]));
  }
  RagSequence prompt = build_prompt(tmpl, query_tokens, pdocs, generator.cfg.max_seq);
  return finish(generator, tok, prompt, qid, "oscar-e2e", k_keep, std::move(scores), max_new);
}

}  // namespace oscar
