#pragma once

#include <optional>
#include <string>
#include <vector>

#include "oscar/tokenizer.hpp"
#include "oscar/transformer.hpp"

namespace oscar {

/// Learnable [MEM 1..l] input vectors plus the [RR] vector, in compressor
/// embedding space. Their last-layer hidden states become the compressed
/// document representation and the rerank-score feature.
struct MemoryTokenBank {
  Tensor mem;  // [l x d_comp]
  Tensor rr;   // [1 x d_comp]

  int l() const { return mem.dim(0); }
  static MemoryTokenBank init(int l, int d_comp, uint64_t seed);
};

/// Two dense layers with ReLU, mapping compressor hidden space into the
/// generator embedding space (cross-model variant only).
struct Adapter {
  Linear fc1;  // d_comp -> hidden
  Linear fc2;  // hidden -> d_gen

  Tensor apply(const Tensor& x) const { return fc2.apply(relu(fc1.apply(x, nullptr)), nullptr); }
  static Adapter init(int d_comp, int hidden, int d_gen, uint64_t seed);
};

/// Dense layer from the [RR] hidden state to one relevance score in [0,1].
struct RerankHead {
  Tensor w;  // [d_comp x 1]
  static RerankHead init(int d_comp, uint64_t seed);
};

/// l embedding vectors in generator space plus an optional relevance score.
struct CompressedDoc {
  Tensor embeddings;  // [l x d_gen]
  std::optional<float> relevance;
  Tensor relevance_node;  // scalar, graph-connected (defined when scored)
  int source_doc_id = -1;
};

/// Query-conditioned document compressor: one forward pass yields the memory
/// embeddings and, when requested, the relevance score. Two variants share
/// this struct: a headless truncation of the generator (no adapter) and a
/// separate small model whose hidden space the adapter maps into the
/// generator's.
struct Compressor {
  TransformerModel model;
  MemoryTokenBank bank;
  std::optional<Adapter> adapter;
  std::optional<RerankHead> rerank;
  int d_gen = 0;

  /// Input layout: [BOS] query [SEP] doc [MEM 1..l] ([RR]).
  CompressedDoc compress(const std::vector<int>& query_tokens,
                         const std::vector<int>& doc_tokens, bool rr = false,
                         int doc_id = -1, const ForwardCtx& ctx = {}) const;
  /// Same layout with the query prefix omitted: [BOS] doc [MEM 1..l] ([RR]).
  CompressedDoc compress_query_independent(const std::vector<int>& doc_tokens, bool rr = false,
                                           int doc_id = -1, const ForwardCtx& ctx = {}) const;
  /// Each document compressed independently, order preserved.
  std::vector<CompressedDoc> batch_compress(const std::vector<int>& query_tokens,
                                            const std::vector<std::vector<int>>& docs,
                                            bool rr = false, bool query_dependent = true,
                                            const ForwardCtx& ctx = {}) const;

  /// Everything trainable: backbone, bank, adapter, rerank head.
  ParamRegistry params() const;

  void save(const std::string& path) const;
  static Compressor load(const std::string& path);

  /// Cross-model compressor with a fresh backbone and adapter into `d_gen`.
  /// `adapter_hidden` <= 0 picks the default 4 * d_gen.
  static Compressor init_cross_model(const ArchConfig& comp_cfg, int d_gen, int l,
                                     bool with_rerank, uint64_t seed, int adapter_hidden = 0);
  /// Compressor built from the first n layers of `generator` (shared hidden
  /// space, no adapter).
  static Compressor init_n_layers(const TransformerModel& generator, int n, int l,
                                  bool with_rerank, uint64_t seed);

 private:
  CompressedDoc run(RagSequence seq, bool rr, int doc_id, const ForwardCtx& ctx) const;
};

}  // namespace oscar
