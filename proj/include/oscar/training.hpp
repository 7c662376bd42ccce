#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "oscar/compressor.hpp"
#include "oscar/optimizer.hpp"
#include "oscar/pipeline.hpp"
#include "oscar/retrieval.hpp"
#include "oscar/tokenizer.hpp"
#include "oscar/transformer.hpp"

namespace oscar {

/// One distillation row: query, the k retrieved doc chunks, the teacher's
/// answer tokens and (optionally) reference relevance scores.
struct DistillExample {
  std::string qid;
  std::vector<int> query;
  std::vector<std::vector<int>> docs;
  std::vector<int> answer;
  std::vector<float> scores;  // empty or one per doc
  bool padded = false;        // retrieval returned fewer than k docs

  std::string to_jsonl() const;
  static DistillExample from_jsonl(const std::string& line);
};

void save_distill_set(const std::string& path, const std::vector<DistillExample>& set);
std::vector<DistillExample> load_distill_set(const std::string& path);

using RetrievalFn = std::function<std::vector<int>(const TaskQuery&)>;  // -> chunk ids
using ScoreOracleFn =
    std::function<std::vector<float>(const TaskQuery&, const std::vector<int>&)>;

/// BM25 top-k retrieval honoring per-query fixed doc lists.
RetrievalFn make_retrieval(const SyntheticTask& task, const Bm25Index& index, int k);
/// Min-max normalized BM25 scores per candidate list; augmented-context docs
/// (not indexed) yield no scores.
ScoreOracleFn make_score_oracle(const SyntheticTask& task, const Bm25Index& index);

/// Greedy teacher labels over the query set; deterministic, row order equals
/// query order. Queries with fewer than k retrieved docs are padded with an
/// empty-doc sentinel and flagged.
std::vector<DistillExample> generate_teacher_set(
    const TransformerModel& teacher, const Tokenizer& tok, const RagPromptTemplate& tmpl,
    const std::vector<TaskQuery>& queries, const SyntheticTask& task, const RetrievalFn& retrieve,
    int k, const ScoreOracleFn& score_oracle, int max_answer_tokens = 128);

/// Mean answer-token NLL of the compressed pipeline under teacher forcing;
/// prompt positions are excluded from the loss.
Tensor distill_loss(const TransformerModel& generator, const Compressor& compressor,
                    const Tokenizer& tok, const RagPromptTemplate& tmpl,
                    const DistillExample& ex, bool query_dependent = true,
                    bool with_scores = false, const ForwardCtx& ctx = {});

/// distill_loss + lambda * sum_i (r_i - r'_i)^2.
Tensor joint_loss(const TransformerModel& generator, const Compressor& compressor,
                  const Tokenizer& tok, const RagPromptTemplate& tmpl, const DistillExample& ex,
                  double lambda, bool query_dependent = true, const ForwardCtx& ctx = {});

enum class PretrainTask { kAutoEncode, kContinue };

/// Compression pretraining: the generator reconstructs (or continues) a
/// document from its compressed embeddings alone.
Tensor pretrain_step(const TransformerModel& generator, const Compressor& compressor,
                     const std::vector<int>& doc_tokens, PretrainTask task,
                     const ForwardCtx& ctx = {});

/// Raw-text supervised loss for teacher fine-tuning (gold answer tokens over
/// an uncompressed RAG prompt).
Tensor teacher_loss(const TransformerModel& generator, const Tokenizer& tok,
                    const RagPromptTemplate& tmpl, const DistillExample& ex,
                    const ForwardCtx& ctx = {});

struct TrainConfig {
  int batch_size = 128;
  double lr_generator = 1e-4;
  double lr_cross_compressor = 1e-4;
  double lr_nlayers_compressor = 5e-5;
  int epochs = 1;
  double lambda = 0.05;
  int l = 8;
  int k = 5;
  LoraConfig lora;
  double weight_decay = 0.1;
  double warmup_ratio = 0.05;
  double max_grad_norm = 1.0;
  uint64_t seed = 0;

  bool query_dependent = true;
  bool joint_rerank = false;
  bool frozen_generator = false;

  void validate() const;
};

enum class TrainMode { kTeacher, kDistill, kPretrain };

struct LossCurvePoint {
  int step;
  double loss;
  double lr;
  double grad_norm;
};

/// Mini-batch trainer shared by teacher fine-tuning, compression
/// pretraining, and distillation. Examples in a batch evaluate in parallel
/// on independent graphs; gradients reduce in example order, so results do
/// not depend on the worker count. Aborts with diagnostics on NaN loss.
class Trainer {
 public:
  /// Teacher mode: full fine-tune of `generator`, no compressor.
  Trainer(TrainMode mode, TransformerModel* generator, Compressor* compressor,
          const Tokenizer* tok, const RagPromptTemplate* tmpl, TrainConfig cfg,
          bool nlayers_variant, int total_examples);

  /// Runs `n_steps` more steps (or to the end of the configured epochs when
  /// n_steps < 0). Batch order is a pure function of (seed, step), so
  /// training can stop and resume deterministically.
  std::vector<LossCurvePoint> run(const std::vector<DistillExample>& examples, int n_steps = -1,
                                  const std::function<bool(int, double)>& stop = nullptr);

  int step() const { return step_; }
  int total_steps() const { return total_steps_; }
  AdamW& optimizer() { return *opt_; }

  void save_state(const std::string& path) const;  // optimizer moments + step
  void load_state(const std::string& path);

 private:
  double run_batch(const std::vector<DistillExample>& examples,
                   const std::vector<int>& batch_idx, GradSink& total, double* grad_norm);

  TrainMode mode_;
  TransformerModel* generator_;
  Compressor* compressor_;
  const Tokenizer* tok_;
  const RagPromptTemplate* tmpl_;
  TrainConfig cfg_;
  std::unique_ptr<AdamW> opt_;
  int step_ = 0;
  int steps_per_epoch_ = 0;
  int total_steps_ = 0;
};

/// Writes "step,loss,lr,grad_norm" rows.
void save_loss_curve(const std::string& path, const std::vector<LossCurvePoint>& curve);

/// Student bundle on disk: LoRA adapters + compressor + metadata referencing
/// the base generator checkpoint.
struct StudentMeta {
  std::string base_checkpoint;  // path of the teacher/base generator
  LoraConfig lora;
  int l = 8;
  bool query_dependent = true;
  bool joint_rerank = false;
  bool frozen_generator = false;
  std::string variant;  // cross-model | nlayers-N
};

void save_student(const std::string& dir, const TransformerModel& generator,
                  const Compressor& compressor, const StudentMeta& meta);

struct Student {
  TransformerModel generator;
  Compressor compressor;
  StudentMeta meta;
};

Student load_student(const std::string& dir);

}  // namespace oscar
