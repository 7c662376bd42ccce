#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "oscar/retrieval.hpp"
#include "oscar/training.hpp"
#include "oscar/transformer.hpp"

namespace oscar {

/// One experiment's configuration, parsed from a `key = value` file.
/// The schema is versioned and closed: unknown keys are errors so typos
/// cannot silently change a run.
struct RunConfig {
  int schema_version = 1;
  uint64_t seed = 0;

  // data
  std::string task_kind = "single";  // single | multi
  CorpusSpec corpus;

  // generator / compressor architectures (desk scale)
  int gen_layers = 8, gen_d_model = 128, gen_heads = 8, gen_d_ff = 512, gen_max_seq = 1600;
  int comp_layers = 4, comp_d_model = 64, comp_heads = 4, comp_d_ff = 256, comp_max_seq = 192;
  int nlayers_n = 2;       // N for the layer-truncated compressor
  int adapter_hidden = 0;  // 0 -> 4 * d_gen

  // training
  std::string variant = "cross";  // cross | nlayers
  TrainConfig train;
  int pretrain = 1;          // cross-model pretraining phase on/off
  int pretrain_steps = 150;
  int pretrain_batch = 16;
  double teacher_lr = 1e-3;
  int teacher_batch = 12;
  int teacher_epochs = 1;
  double teacher_gate = 0.95;  // required teacher answer quality before distillation
  int teacher_eval_every = 50;
  double teacher_short_frac = 0.35;  // fraction of fine-tune rows at k=2
  double teacher_long_frac = 0.10;   // fraction at k=10
  int max_teacher_answer = 128;

  // evaluation
  int eval_k = 10;
  int eval_max_new = 16;
  int eval_max_queries = -1;

  std::string backbones_dir = "data/backbones";

  ArchConfig generator_arch(int vocab_size) const;
  ArchConfig compressor_arch(int vocab_size) const;

  static RunConfig from_file(const std::string& path);
  static RunConfig from_text(const std::string& text);
  /// Applies a "key=value" override (the --set flag).
  void set_key(const std::string& key, const std::string& value);
};

/// RunManifest: one JSON record per command invocation, written into the
/// output directory before the command body runs and finalized after.
struct RunManifest {
  std::string command;
  std::string config_path;
  uint64_t seed = 0;
  std::string git_describe;
  std::string out_dir;
  std::string started_at;
  std::string finished_at;

  void write(const std::string& path) const;
};

std::string git_describe_string();
std::string timestamp_utc();

}  // namespace oscar
