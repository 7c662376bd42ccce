#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "oscar/evalmetrics.hpp"
#include "oscar/retrieval.hpp"
#include "oscar/runconfig.hpp"
#include "oscar/training.hpp"

namespace oscar {

/// Conventional layout of one experiment directory:
///   data/            corpus, task, tokenizer
///   teacher.osc1     fine-tuned teacher (base generator for students)
///   distill.jsonl    teacher-labelled training set
///   students/<name>/ per-variant student checkpoints
struct Workspace {
  std::string root;
  std::string data_dir() const { return root + "/data"; }
  std::string teacher_path() const { return root + "/teacher.osc1"; }
  std::string distill_path() const { return root + "/distill.jsonl"; }
  std::string students_dir() const { return root + "/students"; }
  std::string student_dir(const std::string& name) const { return students_dir() + "/" + name; }
};

struct LoadedTask {
  SyntheticTask task;
  std::unique_ptr<Bm25Index> index;
  RagPromptTemplate tmpl;
};

LoadedTask load_task(const std::string& data_dir);

/// Gold-labelled fine-tuning rows for the teacher. Every row's context is
/// guaranteed to contain the supporting chunk; the document count per row is
/// mixed (short/standard/long) so the teacher stays robust across prompt
/// sizes.
std::vector<DistillExample> build_teacher_rows(const RunConfig& cfg, const SyntheticTask& task,
                                               const Bm25Index& index);

struct TeacherResult {
  TransformerModel model;
  std::vector<LossCurvePoint> curve;
  double gate_accuracy = 0.0;  // answer quality on sampled training rows
};

/// Full fine-tune of a fresh generator on the gold rows, stopping early once
/// the quality gate holds on a sampled subset.
TeacherResult train_teacher(const RunConfig& cfg, const SyntheticTask& task,
                            const Bm25Index& index, bool verbose = false);

/// Fraction of examples whose teacher answer contains the gold value.
double teacher_set_quality(const std::vector<DistillExample>& set, const SyntheticTask& task,
                           const Tokenizer& tok);

struct VariantSpec {
  std::string name = "oscar-16";
  bool nlayers = false;  // layer-truncated compressor instead of cross-model
  int n = 2;             // N for the truncated variant
  int l = 8;
  bool query_dependent = true;
  bool joint_rerank = false;
  bool frozen_generator = false;
  bool pretrain = true;  // cross-model pretraining phase
  uint64_t seed = 0;
};

struct StudentResult {
  Student student;
  std::vector<LossCurvePoint> pretrain_curve;
  std::vector<LossCurvePoint> distill_curve;
};

/// Builds the student (generator = base + fresh LoRA, compressor per
/// variant), runs the optional pretraining phase and the distillation epoch.
StudentResult train_student(const RunConfig& cfg, const SyntheticTask& task,
                            const TransformerModel& base_generator,
                            const std::string& base_checkpoint_path,
                            const std::vector<DistillExample>& distill_set,
                            const VariantSpec& variant, bool verbose = false);

struct EvalOptions {
  int k = 10;
  int max_new = 16;
  int max_queries = -1;  // cap on evaluation queries (-1: all)
  uint64_t seed = 0;
};

/// Accuracy of the raw-text pipeline on held-out queries (k = 0 gives the
/// no-retrieval baseline).
double eval_teacher_accuracy(const TransformerModel& generator, const SyntheticTask& task,
                             const Bm25Index& index, const EvalOptions& opts);

double eval_student_accuracy(const Student& student, const SyntheticTask& task,
                             const Bm25Index& index, const EvalOptions& opts);

/// e2e path: candidates = BM25 top (2*k_keep), OSCAR reranks and keeps
/// k_keep; standalone comparison keeps the oracle-ranked top k_keep.
double eval_e2e_accuracy(const Student& student, const SyntheticTask& task,
                         const Bm25Index& index, int k_keep, const EvalOptions& opts);
double eval_standalone_accuracy(const Student& student, const SyntheticTask& task,
                                const Bm25Index& index, int k_keep, const EvalOptions& opts);

/// Mean Spearman correlation between predicted and oracle relevance over
/// held-out candidate lists.
double eval_rerank_spearman(const Student& student, const SyntheticTask& task,
                            const Bm25Index& index, int candidates, const EvalOptions& opts);

struct ProbeStats {
  int probes = 0;
  double needle_hit_frac = 0.0;     // argmax within +-8 of the needle span
  double attrib_mem_frac = 0.0;     // memory embeddings with gold in top-10
  std::vector<ProbeResult> results;
};

ProbeStats run_needle_probes(const Student& student, const SyntheticTask& task, int max_probes,
                             int window = 8);

/// Evaluates every variant with a checkpoint under root/students plus the
/// teacher and no-retrieval baselines; absent checkpoints are reported, not
/// fatal.
EvalReport run_ablation_suite(const Workspace& ws, const LoadedTask& lt,
                              const std::vector<std::string>& variants, const EvalOptions& opts);

}  // namespace oscar
