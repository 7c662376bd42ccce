#pragma once

#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "oscar/rng.hpp"
#include "oscar/tokenizer.hpp"

namespace oscar {

struct Chunk {
  int id = 0;
  std::vector<int> tokens;  // <= chunk_len
  int doc_id = 0;
  int span_begin = 0, span_end = 0;  // char span in the source document text
  bool aug = false;  // per-query context chunk, kept out of the retrieval index
};

struct Fact {
  std::string entity, attr, value;
  int chunk_id = -1;
  int needle_begin = 0, needle_end = 0;  // token span of the fact sentence in its chunk
  bool train_split = true;
};

struct TaskQuery {
  std::string qid;
  std::string text;
  std::vector<std::string> gold;
  int fact_index = -1;             // -1 for augmented queries
  bool train_split = true;
  std::vector<int> fixed_docs;     // chunk ids; empty means retrieve by BM25
};

/// Corpus-generation knobs. Defaults give the clean-retrieval reference task;
/// facts_per_doc > 1 gives the multi-fact task used by the query-dependence
/// comparisons.
struct CorpusSpec {
  uint64_t seed = 0;
  int n_facts = 300;
  int n_distractors = 120;
  int doc_len_tokens = 128;
  int facts_per_doc = 1;
  int n_attrs = 6;
  int n_values = 200;
  int n_fillers = 280;
  int eval_fraction_pct = 25;      // facts held out for evaluation
  int queries_per_train_fact = 2;
  int queries_per_eval_fact = 2;
  int n_aug_queries = 0;           // extraction-forcing rows with resampled values
  int aug_context_docs = 5;
  double distractor_entity_rate = 0.15;  // distractor chunks mentioning an entity
};

/// The hermetic stand-in corpus: facts planted in distractor text, queries
/// with gold answers, and needle spans for the embedding probes.
struct SyntheticTask {
  CorpusSpec spec;
  Tokenizer tokenizer;
  std::vector<Chunk> chunks;
  std::vector<Fact> facts;
  std::vector<TaskQuery> train_queries;
  std::vector<TaskQuery> eval_queries;
  std::vector<std::string> templates;
  double measured_top5_recall = 0.0;

  void save(const std::string& dir) const;  // chunks.jsonl, task.json, tokenizer.txt
  static SyntheticTask load(const std::string& dir);
};

SyntheticTask gen_corpus(const CorpusSpec& spec);

/// Splits a token stream into chunks of at most chunk_len tokens;
/// concatenating the results reproduces the stream exactly.
std::vector<Chunk> chunk_document(const std::vector<int>& doc_tokens, int chunk_len, int doc_id);

struct ScoredChunk {
  int chunk_id;
  double score;
};

/// Okapi BM25 (k1=1.2, b=0.75) over the non-aug chunks; ties break by chunk
/// id ascending.
class Bm25Index {
 public:
  explicit Bm25Index(const std::vector<Chunk>& chunks, double k1 = 1.2, double b = 0.75);
  std::vector<ScoredChunk> topk(const std::vector<int>& query_tokens, int k) const;
  double score(const std::vector<int>& query_tokens, int chunk_id) const;

 private:
  double k1_, b_, avg_len_ = 0.0;
  int n_docs_ = 0;
  std::vector<int> ids_;                      // indexed chunk ids
  std::vector<int> lengths_;                  // by position in ids_
  std::unordered_map<int, int> pos_of_id_;
  std::unordered_map<int, std::vector<std::pair<int, int>>> postings_;  // token -> (pos, tf)
  std::unordered_map<int, double> idf_;
};

/// Min-max normalization of a candidate list's BM25 scores into [0,1]; a
/// constant list maps to all 0.5.
std::vector<float> normalize_scores(const std::vector<ScoredChunk>& ranked);

/// Doubles every retrieved chunk by appending a randomly selected other
/// chunk's tokens (noisy long-document robustness setting).
std::vector<std::vector<int>> docmerge_noisy(const std::vector<std::vector<int>>& docs,
                                             const std::vector<Chunk>& pool, Rng& rng);
/// Concatenates retrieved chunks pairwise, halving the count.
std::vector<std::vector<int>> docmerge_pairwise(const std::vector<std::vector<int>>& docs);

}  // namespace oscar
