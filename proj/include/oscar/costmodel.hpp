#pragma once

#include <optional>
#include <string>
#include <vector>

#include "oscar/transformer.hpp"

namespace oscar {

/// Floating-point operation totals for one RAG pipeline configuration.
struct FlopsReport {
  double inference_flops = 0.0;
  double compression_flops = 0.0;
  double total_flops = 0.0;
  double speedup = 1.0;  // reference (no-compression) total / this total
};

/// How compression is costed in a scenario.
struct CompressorCost {
  enum class Kind { kNLayers, kCrossModel };
  Kind kind = Kind::kNLayers;
  int n_layers = 0;        // kNLayers: first N layers of the generator
  ArchConfig arch;         // kCrossModel: the small backbone
  int adapter_hidden = 0;  // kCrossModel: two-layer adapter width (0 = none)
  bool rr_token = false;   // extra [RR] position per document
  std::string label;
};

/// The standardized efficiency setup: a query of `query_len` tokens with k
/// documents of `doc_len` tokens (or their l-vector compressions) and a
/// generated answer of `answer_len` tokens.
struct CostScenario {
  int query_len = 128;
  int k = 10;
  int doc_len = 128;
  int answer_len = 32;
  int l = 8;
  ArchConfig generator;
  std::optional<CompressorCost> compressor;
  bool include_query_in_compression = false;
  std::string label;
};

/// Matmul weights inside the transformer blocks (attention + SwiGLU MLP).
/// Embedding lookups cost no FLOPs and the LM head is costed per generated
/// token, so this is the count that scales the per-token forward cost.
int64_t block_matmul_params(const ArchConfig& cfg);

/// Full analytic parameter count (embedding, blocks, norm gains, untied
/// unembedding). Matches TransformerModel::param_count().
int64_t total_param_count(const ArchConfig& cfg, bool headless = false);

/// Forward cost for a prefill of `prefill_len` tokens plus `gen_len` greedily
/// decoded tokens:
///   2 * block_params * (prefill + gen)            token-linear matmul work
/// + 2 * n_layers * (prefill + gen)^2 * d_model    causal attention
/// + gen * 2 * vocab * d_model                     LM head per decoded token
/// Decode attention is costed at final sequence length (upper bound).
double forward_flops(const ArchConfig& cfg, int64_t prefill_len, int64_t gen_len);

/// Costs the full pipeline. Compression runs the compressor once per
/// document over doc_len + l (+1 with [RR]) positions (+ query_len when
/// include_query_in_compression), plus the adapter on the l outputs.
FlopsReport pipeline_flops(const CostScenario& s);

/// Evaluates scenarios and renders the table-shaped CSV:
/// generator,compressor,inference_tflops,compression_tflops,total_tflops,speedup.
std::string sweep_csv(const std::vector<CostScenario>& scenarios);

/// Backbone description from a JSON data file ({name, n_layers, ...}).
ArchConfig load_backbone_json(const std::string& path, std::string* name = nullptr);

}  // namespace oscar
