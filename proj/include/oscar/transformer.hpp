#pragma once

#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "oscar/params.hpp"
#include "oscar/rng.hpp"
#include "oscar/tensor.hpp"

namespace oscar {

/// Architecture hyperparameters. Drives both trainable models and the
/// analytic cost model; published backbone configs load into this struct
/// from data files.
struct ArchConfig {
  int n_layers = 0;
  int d_model = 0;
  int n_heads = 0;
  int d_head = 0;
  int d_ff = 0;
  int vocab_size = 0;
  int max_seq = 0;
  int n_kv_heads = 0;  // 0 means n_heads (no grouped queries)
  bool tied_unembedding = true;

  int kv_heads() const { return n_kv_heads > 0 ? n_kv_heads : n_heads; }
  void validate() const;

  std::string to_kv() const;
  static ArchConfig from_kv(const std::string& text);
};

struct TokenSegment {
  std::vector<int> ids;
};
struct EmbeddingSegment {
  Tensor rows;  // [n x d_model] in the consuming model's space
};

/// Heterogeneous model input: token runs interleaved with raw embedding
/// blocks that bypass the embedding table. Positions are assigned 0..len-1
/// across the concatenation regardless of segment kind.
struct RagSequence {
  std::vector<std::variant<TokenSegment, EmbeddingSegment>> segments;

  int length() const;
  void push_tokens(std::vector<int> ids);
  void push_token(int id);
  void push_embeddings(Tensor rows);
  static RagSequence of_tokens(std::vector<int> ids);
  /// Token ids of the token segments, with embedding blocks skipped.
  std::vector<int> token_ids() const;
};

struct LoraConfig {
  int rank = 16;
  float alpha = 32.0f;
  float dropout = 0.1f;
};

/// One linear projection, optionally carrying a low-rank adapter
/// y = x W + (alpha/rank) * drop(x) A B with B zero-initialized.
struct Linear {
  Tensor w;  // [in x out]
  Tensor lora_a, lora_b;
  float lora_scale = 0.0f;
  float lora_dropout = 0.0f;

  bool has_lora() const { return lora_a.defined(); }
  Tensor apply(const Tensor& x, Rng* dropout_rng) const;
};

struct TransformerLayer {
  Tensor attn_norm, mlp_norm;  // rms gains
  Linear wq, wk, wv, wo;
  Linear w_gate, w_up, w_down;
};

struct ForwardOut {
  Tensor hidden;  // [len x d_model], residual stream after the last layer
  Tensor logits;  // [len x vocab]
};

struct ForwardCtx {
  Rng* lora_dropout_rng = nullptr;  // null: adapters run without dropout
  // Rotary positions start here instead of 0 (training-time augmentation so
  // the model is robust at positions longer prompts will occupy). Inference
  // always runs at 0.
  int position_offset = 0;
};

/// Decoder-only pre-norm transformer: rotary positions, RMS norms, SwiGLU
/// blocks, causal attention, no biases. `headless` models (layer-truncated
/// compressors) have no final norm or unembedding; their forward output is
/// the raw residual stream, which truncation keeps bit-compatible with the
/// source model's layer-N activations.
class TransformerModel {
 public:
  ArchConfig cfg;
  Tensor embedding;  // [vocab x d_model]
  std::vector<TransformerLayer> layers;
  Tensor final_norm;
  Linear unembedding;  // defined only when !tied and !headless
  bool headless = false;

  static TransformerModel init(const ArchConfig& cfg, uint64_t seed);

  /// Residual-stream states after the last layer, one row per position.
  Tensor forward_hidden(const RagSequence& input, const ForwardCtx& ctx = {}) const;
  /// Final norm + unembedding over given hidden rows.
  Tensor unembed_rows(const Tensor& hidden_rows, const ForwardCtx& ctx = {}) const;
  ForwardOut forward(const RagSequence& input, const ForwardCtx& ctx = {}) const;

  /// Greedy continuation; decoding is deterministic and stops at `stop_token`
  /// or after `max_new` tokens (or when max_seq is reached).
  std::vector<int> greedy_decode(const RagSequence& prefix, int max_new, int stop_token) const;

  int64_t param_count() const;
  /// Base weights (embedding, layers, norms, unembedding), checkpoint order.
  ParamRegistry base_params() const;
  /// Adapter weights only; empty registry when no adapters installed.
  ParamRegistry lora_params() const;

  void freeze_base();
  /// Installs fresh adapters on every layer linear (A random-normal, B zero);
  /// forward is bit-identical to the base model until B trains away from 0.
  void add_lora(const LoraConfig& lc, uint64_t seed);

  void save(const std::string& path) const;  // weights + ".arch" sidecar
  static TransformerModel load(const std::string& path);

  /// Copy of the embedding plus the first `n` layers as a headless model.
  TransformerModel truncate_layers(int n) const;

 private:
  Tensor embed_input(const RagSequence& input) const;
};

}  // namespace oscar
