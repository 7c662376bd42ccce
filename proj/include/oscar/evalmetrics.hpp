#pragma once

#include <map>
#include <string>
#include <vector>

#include "oscar/compressor.hpp"
#include "oscar/transformer.hpp"

namespace oscar {

/// Answer-string normalization: lowercase, strip punctuation, drop the
/// articles "a"/"an"/"the", collapse whitespace — in that order. Idempotent.
std::string normalize(const std::string& s);

/// 1 when any normalized label is a substring of the normalized prediction.
int accuracy(const std::string& prediction, const std::vector<std::string>& labels);

struct EvalReport {
  // variant name -> accuracy over the evaluated query set
  std::map<std::string, double> accuracy_by_variant;
  std::map<std::string, int> counts;
  // variants requested but whose checkpoints were absent
  std::vector<std::string> missing;

  std::string to_csv() const;
  std::string to_json() const;
};

struct ProbeResult {
  std::vector<float> cosines;  // one per document position
  int needle_begin = 0, needle_end = 0;
  int argmax_pos = 0;
  bool trained_flag = true;  // false annotates probes over untrained models
  std::vector<std::vector<int>> top_tokens;  // top-n vocab ids per memory embedding

  std::string to_csv() const;  // position,cosine rows
};

/// Compresses the document against the query and reports, per document
/// position, the max cosine similarity between any memory embedding and the
/// generator's token embedding at that position.
ProbeResult needle_probe(const Compressor& compressor, const TransformerModel& generator,
                         const std::vector<int>& doc_tokens, int needle_begin, int needle_end,
                         const std::vector<int>& query_tokens, bool trained = true);

/// Projects each compressed embedding row through the generator unembedding
/// and returns the top_n vocabulary ids per row.
std::vector<std::vector<int>> logit_attribution(const TransformerModel& generator,
                                                const CompressedDoc& compressed, int top_n);

double cosine(const float* a, const float* b, int n);

/// Spearman rank correlation with average ranks for ties.
double spearman(const std::vector<float>& a, const std::vector<float>& b);

}  // namespace oscar
