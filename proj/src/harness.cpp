#include "oscar/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <set>

#include "oscar/errors.hpp"
#include "oscar/parallel.hpp"

namespace oscar {

namespace fs = std::filesystem;

LoadedTask load_task(const std::string& data_dir) {
  LoadedTask lt;
  lt.task = SyntheticTask::load(data_dir);
  lt.index = std::make_unique<Bm25Index>(lt.task.chunks);
  lt.tmpl = RagPromptTemplate::standard(lt.task.tokenizer);
  return lt;
}

// ---- teacher --------------------------------------------------------------------

std::vector<DistillExample> build_teacher_rows(const RunConfig& cfg, const SyntheticTask& task,
                                               const Bm25Index& index) {
  const Tokenizer& tok = task.tokenizer;
  Rng rng(derive_seed(cfg.seed, 0x7ea));
  std::vector<DistillExample> rows;

  std::vector<int> distractor_ids;
  for (const auto& c : task.chunks)
    if (!c.aug && c.id >= task.spec.n_facts / task.spec.facts_per_doc)
      distractor_ids.push_back(c.id);

  for (const auto& q : task.train_queries) {
    DistillExample ex;
    ex.qid = q.qid;
    ex.query = tok.encode(q.text);
    for (const auto& g : q.gold) {
      auto ids = tok.encode(g);
      ex.answer.insert(ex.answer.end(), ids.begin(), ids.end());
    }

    // pick this row's document count
    double u = rng.uniform();
    int k_row = cfg.train.k;
    if (u < cfg.teacher_short_frac) k_row = 2;
    else if (u < cfg.teacher_short_frac + cfg.teacher_long_frac) k_row = cfg.eval_k;

    int support = q.fact_index >= 0 ? task.facts[q.fact_index].chunk_id : q.fixed_docs.empty()
                      ? -1 : q.fixed_docs[0];
    std::vector<int> ids;
    if (!q.fixed_docs.empty()) {
      // augmented rows: the aug chunk id is recorded first in fixed_docs
      // before shuffling, so recover it by the aug flag instead
      for (int id : q.fixed_docs)
        if (task.chunks[id].aug) support = id;
      ids = q.fixed_docs;
    } else {
      for (const auto& r : index.topk(ex.query, k_row)) ids.push_back(r.chunk_id);
    }
    // guarantee the supporting chunk is present, then size to k_row
    if (support >= 0 && std::find(ids.begin(), ids.end(), support) == ids.end())
      ids.insert(ids.begin(), support);
    if (static_cast<int>(ids.size()) > k_row) {
      if (std::find(ids.begin(), ids.begin() + k_row, support) == ids.begin() + k_row) {
        ids[k_row - 1] = support;
      }
      ids.resize(k_row);
    }
    while (static_cast<int>(ids.size()) < k_row && !distractor_ids.empty())
      ids.push_back(distractor_ids[rng.index(static_cast<int>(distractor_ids.size()))]);
    rng.shuffle(ids);
    for (int id : ids) ex.docs.push_back(task.chunks.at(id).tokens);
    rows.push_back(std::move(ex));
  }
  return rows;
}

namespace {

// answer quality over sampled rows: greedy answer contains the gold string
double sampled_quality(const TransformerModel& model, const Tokenizer& tok,
                       const RagPromptTemplate& tmpl,
                       const std::vector<DistillExample>& rows,
                       const std::vector<std::string>& golds, int sample, uint64_t seed) {
  std::vector<int> idx(rows.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(derive_seed(seed, 0x9a7e));
  rng.shuffle(idx);
  int n = std::min<int>(sample, static_cast<int>(idx.size()));
  std::atomic<int> hits{0};
  parallel_for(n, [&](int i) {
    const DistillExample& ex = rows[idx[i]];
    AnswerRecord rec = answer_teacher(model, tok, tmpl, ex.qid, ex.query, ex.docs, 8);
    if (accuracy(rec.text, {golds[idx[i]]}) == 1) hits++;
  });
  return n > 0 ? static_cast<double>(hits) / n : 0.0;
}

}  // namespace

TeacherResult train_teacher(const RunConfig& cfg, const SyntheticTask& task,
                            const Bm25Index& index, bool verbose) {
  const Tokenizer& tok = task.tokenizer;
  RagPromptTemplate tmpl = RagPromptTemplate::standard(tok);
  auto rows = build_teacher_rows(cfg, task, index);
  std::vector<std::string> golds(rows.size());
  for (size_t i = 0; i < rows.size(); i++) golds[i] = tok.decode(rows[i].answer);

  TeacherResult out{TransformerModel::init(cfg.generator_arch(tok.vocab_size()),
                                           derive_seed(cfg.seed, 0x9e4)),
                    {}, 0.0};

  TrainConfig tc = cfg.train;
  tc.batch_size = cfg.teacher_batch;
  tc.lr_generator = cfg.teacher_lr;
  tc.epochs = cfg.teacher_epochs;
  tc.seed = derive_seed(cfg.seed, 0x7e4c);
  Trainer trainer(TrainMode::kTeacher, &out.model, nullptr, &tok, &tmpl, tc, false,
                  static_cast<int>(rows.size()));

  auto stop = [&](int step, double) {
    if (step % cfg.teacher_eval_every != 0) return false;
    double q = sampled_quality(out.model, tok, tmpl, rows, golds, 64, cfg.seed + step);
    if (verbose) std::fprintf(stderr, "[teacher] step %d sampled quality %.3f\n", step, q);
    return q >= cfg.teacher_gate + 0.02;  // margin over the gate before stopping
  };
  out.curve = trainer.run(rows, -1, stop);
  out.gate_accuracy = sampled_quality(out.model, tok, tmpl, rows, golds, 256, cfg.seed);
  return out;
}

double teacher_set_quality(const std::vector<DistillExample>& set, const SyntheticTask& task,
                           const Tokenizer& tok) {
  std::unordered_map<std::string, const TaskQuery*> by_qid;
  for (const auto* qs : {&task.train_queries, &task.eval_queries})
    for (const auto& q : *qs) by_qid[q.qid] = &q;
  int hits = 0, total = 0;
  for (const auto& ex : set) {
    auto it = by_qid.find(ex.qid);
    if (it == by_qid.end()) continue;
    total++;
    if (accuracy(tok.decode(ex.answer), it->second->gold) == 1) hits++;
  }
  return total > 0 ? static_cast<double>(hits) / total : 0.0;
}

// ---- student --------------------------------------------------------------------

StudentResult train_student(const RunConfig& cfg, const SyntheticTask& task,
                            const TransformerModel& base_generator,
                            const std::string& base_checkpoint_path,
                            const std::vector<DistillExample>& distill_set,
                            const VariantSpec& variant, bool verbose) {
  const Tokenizer& tok = task.tokenizer;
  RagPromptTemplate tmpl = RagPromptTemplate::standard(tok);
  uint64_t seed = derive_seed(cfg.seed, 0x57d, variant.seed);

  StudentResult out;
  // student generator: base weights from the teacher, trainable only through
  // fresh adapters
  out.student.generator = TransformerModel::load(base_checkpoint_path);
  out.student.generator.freeze_base();
  out.student.generator.add_lora(cfg.train.lora, derive_seed(seed, 1));

  if (variant.nlayers) {
    out.student.compressor = Compressor::init_n_layers(base_generator, variant.n, variant.l,
                                                       variant.joint_rerank, seed);
  } else {
    out.student.compressor =
        Compressor::init_cross_model(cfg.compressor_arch(tok.vocab_size()),
                                     base_generator.cfg.d_model, variant.l,
                                     variant.joint_rerank, seed, cfg.adapter_hidden);
  }

  TrainConfig tc = cfg.train;
  tc.seed = derive_seed(seed, 2);
  tc.l = variant.l;
  tc.query_dependent = variant.query_dependent;
  tc.joint_rerank = variant.joint_rerank;
  tc.frozen_generator = variant.frozen_generator;

  // pretraining phase (cross-model only): auto-encode / continue corpus
  // chunks through the compressed bottleneck
  if (!variant.nlayers && variant.pretrain && cfg.pretrain_steps > 0) {
    std::vector<DistillExample> chunk_rows;
    for (const auto& c : task.chunks) {
      if (c.aug) continue;
      DistillExample ex;
      ex.qid = "chunk" + std::to_string(c.id);
      ex.docs.push_back(c.tokens);
      ex.answer = {Tokenizer::kEos};  // unused by pretraining
      chunk_rows.push_back(std::move(ex));
    }
    TrainConfig pc = tc;
    pc.batch_size = cfg.pretrain_batch;
    pc.frozen_generator = false;
    int spe = (static_cast<int>(chunk_rows.size()) + pc.batch_size - 1) / pc.batch_size;
    pc.epochs = std::max(1, (cfg.pretrain_steps + spe - 1) / spe);
    Trainer pretrainer(TrainMode::kPretrain, &out.student.generator, &out.student.compressor,
                       &tok, &tmpl, pc, variant.nlayers, static_cast<int>(chunk_rows.size()));
    out.pretrain_curve = pretrainer.run(chunk_rows, cfg.pretrain_steps);
    if (verbose && !out.pretrain_curve.empty())
      std::fprintf(stderr, "[pretrain] %zu steps, loss %.3f -> %.3f\n",
                   out.pretrain_curve.size(), out.pretrain_curve.front().loss,
                   out.pretrain_curve.back().loss);
  }

  Trainer trainer(TrainMode::kDistill, &out.student.generator, &out.student.compressor, &tok,
                  &tmpl, tc, variant.nlayers, static_cast<int>(distill_set.size()));
  out.distill_curve = trainer.run(distill_set);
  if (verbose && !out.distill_curve.empty())
    std::fprintf(stderr, "[distill:%s] %zu steps, loss %.3f -> %.3f\n", variant.name.c_str(),
                 out.distill_curve.size(), out.distill_curve.front().loss,
                 out.distill_curve.back().loss);

  out.student.meta.base_checkpoint = base_checkpoint_path;
  out.student.meta.lora = cfg.train.lora;
  out.student.meta.l = variant.l;
  out.student.meta.query_dependent = variant.query_dependent;
  out.student.meta.joint_rerank = variant.joint_rerank;
  out.student.meta.frozen_generator = variant.frozen_generator;
  out.student.meta.variant = variant.name;
  return out;
}

// ---- evaluation -----------------------------------------------------------------

namespace {

std::vector<const TaskQuery*> eval_queries(const SyntheticTask& task, const EvalOptions& opts) {
  std::vector<const TaskQuery*> qs;
  for (const auto& q : task.eval_queries) qs.push_back(&q);
  if (opts.max_queries > 0 && static_cast<int>(qs.size()) > opts.max_queries) {
    Rng rng(derive_seed(opts.seed, 0xeba1));
    rng.shuffle(qs);
    qs.resize(opts.max_queries);
  }
  return qs;
}

std::vector<std::vector<int>> retrieve_docs(const SyntheticTask& task, const Bm25Index& index,
                                            const TaskQuery& q, int k) {
  std::vector<std::vector<int>> docs;
  for (const auto& r : index.topk(task.tokenizer.encode(q.text), k))
    docs.push_back(task.chunks.at(r.chunk_id).tokens);
  return docs;
}

double mean_accuracy(const SyntheticTask& task, const EvalOptions& opts,
                     const std::function<AnswerRecord(const TaskQuery&)>& answer) {
  auto qs = eval_queries(task, opts);
  if (qs.empty()) throw DataError("evaluate: no evaluation queries");
  std::vector<int> correct(qs.size(), 0);
  parallel_for(static_cast<int>(qs.size()), [&](int i) {
    AnswerRecord rec = answer(*qs[i]);
    correct[i] = accuracy(rec.text, qs[i]->gold);
  });
  return std::accumulate(correct.begin(), correct.end(), 0.0) / qs.size();
}

}  // namespace

double eval_teacher_accuracy(const TransformerModel& generator, const SyntheticTask& task,
                             const Bm25Index& index, const EvalOptions& opts) {
  RagPromptTemplate tmpl = RagPromptTemplate::standard(task.tokenizer);
  return mean_accuracy(task, opts, [&](const TaskQuery& q) {
    auto docs = opts.k > 0 ? retrieve_docs(task, index, q, opts.k)
                           : std::vector<std::vector<int>>{};
    return answer_teacher(generator, task.tokenizer, tmpl, q.qid,
                          task.tokenizer.encode(q.text), docs, opts.max_new);
  });
}

double eval_student_accuracy(const Student& student, const SyntheticTask& task,
                             const Bm25Index& index, const EvalOptions& opts) {
  RagPromptTemplate tmpl = RagPromptTemplate::standard(task.tokenizer);
  return mean_accuracy(task, opts, [&](const TaskQuery& q) {
    auto docs = retrieve_docs(task, index, q, opts.k);
    return answer_oscar(student.generator, student.compressor, task.tokenizer, tmpl, q.qid,
                        task.tokenizer.encode(q.text), docs, student.meta.query_dependent,
                        opts.max_new);
  });
}

double eval_e2e_accuracy(const Student& student, const SyntheticTask& task,
                         const Bm25Index& index, int k_keep, const EvalOptions& opts) {
  RagPromptTemplate tmpl = RagPromptTemplate::standard(task.tokenizer);
  return mean_accuracy(task, opts, [&](const TaskQuery& q) {
    auto candidates = retrieve_docs(task, index, q, 2 * k_keep);
    return answer_e2e_rerank(student.generator, student.compressor, task.tokenizer, tmpl, q.qid,
                             task.tokenizer.encode(q.text), candidates, k_keep, opts.max_new);
  });
}

double eval_standalone_accuracy(const Student& student, const SyntheticTask& task,
                                const Bm25Index& index, int k_keep, const EvalOptions& opts) {
  EvalOptions o = opts;
  o.k = k_keep;  // oracle ranking: BM25 order, top k_keep
  return eval_student_accuracy(student, task, index, o);
}

double eval_rerank_spearman(const Student& student, const SyntheticTask& task,
                            const Bm25Index& index, int candidates, const EvalOptions& opts) {
  if (!student.compressor.rerank.has_value())
    throw ConfigError("eval_rerank: compressor has no rerank head");
  auto qs = eval_queries(task, opts);
  std::vector<double> rho(qs.size(), 0.0);
  std::vector<int> valid(qs.size(), 0);
  parallel_for(static_cast<int>(qs.size()), [&](int i) {
    NoGradGuard ng;
    const TaskQuery& q = *qs[i];
    auto query_tokens = task.tokenizer.encode(q.text);
    auto ranked = index.topk(query_tokens, candidates);
    if (ranked.size() < 3) return;
    std::vector<float> oracle = normalize_scores(ranked);
    std::vector<std::vector<int>> docs;
    for (const auto& r : ranked) docs.push_back(task.chunks.at(r.chunk_id).tokens);
    auto compressed = student.compressor.batch_compress(query_tokens, docs, true,
                                                        student.meta.query_dependent);
    std::vector<float> predicted;
    for (const auto& c : compressed) predicted.push_back(*c.relevance);
    rho[i] = spearman(predicted, oracle);
    valid[i] = 1;
  });
  double sum = 0.0;
  int n = 0;
  for (size_t i = 0; i < rho.size(); i++)
    if (valid[i]) {
      sum += rho[i];
      n++;
    }
  if (n == 0) throw DataError("eval_rerank: no usable candidate lists");
  return sum / n;
}

ProbeStats run_needle_probes(const Student& student, const SyntheticTask& task, int max_probes,
                             int window) {
  ProbeStats stats;
  std::vector<std::pair<const Fact*, const TaskQuery*>> probes;
  for (const auto& q : task.eval_queries) {
    if (q.fact_index < 0) continue;
    probes.push_back({&task.facts[q.fact_index], &q});
    if (static_cast<int>(probes.size()) >= max_probes) break;
  }
  if (probes.empty()) throw DataError("needle probes: no eval queries with facts");
  stats.results.resize(probes.size());
  std::vector<int> hit(probes.size(), 0);
  std::vector<double> frac(probes.size(), 0.0);
  parallel_for(static_cast<int>(probes.size()), [&](int i) {
    const auto& [fact, query] = probes[i];
    const Chunk& chunk = task.chunks.at(fact->chunk_id);
    ProbeResult pr = needle_probe(student.compressor, student.generator, chunk.tokens,
                                  fact->needle_begin, fact->needle_end,
                                  task.tokenizer.encode(query->text));
    hit[i] = (pr.argmax_pos >= fact->needle_begin - window &&
              pr.argmax_pos < fact->needle_end + window)
                 ? 1 : 0;
    int gold_id = task.tokenizer.id(fact->value);
    int with_gold = 0;
    for (const auto& top : pr.top_tokens)
      if (std::find(top.begin(), top.end(), gold_id) != top.end()) with_gold++;
    frac[i] = pr.top_tokens.empty() ? 0.0
                                    : static_cast<double>(with_gold) / pr.top_tokens.size();
    stats.results[i] = std::move(pr);
  });
  stats.probes = static_cast<int>(probes.size());
  stats.needle_hit_frac = std::accumulate(hit.begin(), hit.end(), 0.0) / stats.probes;
  stats.attrib_mem_frac = std::accumulate(frac.begin(), frac.end(), 0.0) / stats.probes;
  return stats;
}

EvalReport run_ablation_suite(const Workspace& ws, const LoadedTask& lt,
                              const std::vector<std::string>& variants,
                              const EvalOptions& opts) {
  EvalReport report;
  int n_queries = opts.max_queries > 0
                      ? std::min<int>(opts.max_queries, lt.task.eval_queries.size())
                      : static_cast<int>(lt.task.eval_queries.size());

  bool teacher_present = fs::exists(ws.teacher_path());
  if (teacher_present) {
    TransformerModel teacher = TransformerModel::load(ws.teacher_path());
    report.accuracy_by_variant["teacher"] =
        eval_teacher_accuracy(teacher, lt.task, *lt.index, opts);
    report.counts["teacher"] = n_queries;
    EvalOptions norag = opts;
    norag.k = 0;
    report.accuracy_by_variant["no-rag"] =
        eval_teacher_accuracy(teacher, lt.task, *lt.index, norag);
    report.counts["no-rag"] = n_queries;
  } else {
    report.missing.push_back("teacher");
    report.missing.push_back("no-rag");
  }

  for (const auto& name : variants) {
    std::string dir = ws.student_dir(name);
    if (!fs::exists(dir + "/student.json")) {
      report.missing.push_back(name);
      continue;
    }
    Student st = load_student(dir);
    report.accuracy_by_variant[name] = eval_student_accuracy(st, lt.task, *lt.index, opts);
    report.counts[name] = n_queries;
  }
  return report;
}

}  // namespace oscar
