#include "oscar/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "oscar/checkpoint.hpp"
#include "oscar/errors.hpp"
#include "oscar/parallel.hpp"

namespace oscar {

using nlohmann::json;

// ---- distillation set ---------------------------------------------------------

std::string DistillExample::to_jsonl() const {
  json j{{"qid", qid}, {"query", query}, {"docs", docs}, {"answer", answer}, {"scores", scores}};
  if (padded) j["padded"] = true;
  return j.dump();
}

DistillExample DistillExample::from_jsonl(const std::string& line) {
  json j = json::parse(line);
  DistillExample ex;
  ex.qid = j.at("qid");
  ex.query = j.at("query").get<std::vector<int>>();
  ex.docs = j.at("docs").get<std::vector<std::vector<int>>>();
  ex.answer = j.at("answer").get<std::vector<int>>();
  ex.scores = j.at("scores").get<std::vector<float>>();
  ex.padded = j.value("padded", false);
  if (ex.docs.empty()) throw DataError("distill example " + ex.qid + ": k must be >= 1");
  if (ex.answer.empty()) throw DataError("distill example " + ex.qid + ": empty answer");
  if (!ex.scores.empty() && ex.scores.size() != ex.docs.size())
    throw DataError("distill example " + ex.qid + ": score count mismatch");
  return ex;
}

void save_distill_set(const std::string& path, const std::vector<DistillExample>& set) {
  std::ofstream os(path);
  if (!os) throw DataError("distill set: cannot write " + path);
  for (const auto& ex : set) os << ex.to_jsonl() << "\n";
}

std::vector<DistillExample> load_distill_set(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("distill set: cannot open " + path);
  std::vector<DistillExample> out;
  std::string line;
  while (std::getline(is, line))
    if (!line.empty()) out.push_back(DistillExample::from_jsonl(line));
  if (out.empty()) throw DataError("distill set: " + path + " is empty");
  return out;
}

// ---- teacher set --------------------------------------------------------------

RetrievalFn make_retrieval(const SyntheticTask& task, const Bm25Index& index, int k) {
  const Tokenizer* tok = &task.tokenizer;
  return [&task, &index, tok, k](const TaskQuery& q) {
    if (!q.fixed_docs.empty()) {
      auto ids = q.fixed_docs;
      if (static_cast<int>(ids.size()) > k) ids.resize(k);
      return ids;
    }
    std::vector<int> ids;
    for (const auto& r : index.topk(tok->encode(q.text), k)) ids.push_back(r.chunk_id);
    return ids;
  };
}

ScoreOracleFn make_score_oracle(const SyntheticTask& task, const Bm25Index& index) {
  const Tokenizer* tok = &task.tokenizer;
  return [&task, &index, tok](const TaskQuery& q, const std::vector<int>& chunk_ids) {
    std::vector<float> out;
    if (!q.fixed_docs.empty()) return out;  // augmented contexts are unscored
    std::vector<ScoredChunk> ranked;
    auto query_tokens = tok->encode(q.text);
    for (int id : chunk_ids) ranked.push_back({id, index.score(query_tokens, id)});
    return normalize_scores(ranked);
  };
}

std::vector<DistillExample> generate_teacher_set(
    const TransformerModel& teacher, const Tokenizer& tok, const RagPromptTemplate& tmpl,
    const std::vector<TaskQuery>& queries, const SyntheticTask& task, const RetrievalFn& retrieve,
    int k, const ScoreOracleFn& score_oracle, int max_answer_tokens) {
  std::vector<DistillExample> out(queries.size());
  parallel_for(static_cast<int>(queries.size()), [&](int i) {
    const TaskQuery& q = queries[i];
    DistillExample ex;
    ex.qid = q.qid;
    ex.query = tok.encode(q.text);
    std::vector<int> chunk_ids = retrieve(q);
    for (int id : chunk_ids) ex.docs.push_back(task.chunks.at(id).tokens);
    while (static_cast<int>(ex.docs.size()) < k) {
      ex.docs.push_back({});  // empty-doc sentinel
      ex.padded = true;
    }
    ex.scores = score_oracle(q, chunk_ids);
    if (ex.padded) ex.scores.clear();
    AnswerRecord rec = answer_teacher(teacher, tok, tmpl, q.qid, ex.query, ex.docs,
                                      max_answer_tokens);
    ex.answer = rec.token_ids;
    if (ex.answer.empty()) ex.answer = {Tokenizer::kEos};
    out[i] = std::move(ex);
  });
  return out;
}

// ---- losses ----------------------------------------------------------------------

namespace {

// Teacher-forced mean NLL of `answer` (plus terminal EOS) after `prompt`.
Tensor answer_nll(const TransformerModel& generator, const RagSequence& prompt,
                  std::vector<int> answer, const ForwardCtx& ctx) {
  int prompt_len = prompt.length();
  int room = generator.cfg.max_seq - prompt_len - 1;
  if (room < 1)
    throw SequenceLengthError("answer_nll: prompt length " + std::to_string(prompt_len) +
                              " leaves no room for the answer");
  if (static_cast<int>(answer.size()) > room) {
    std::fprintf(stderr, "[train] warning: truncating answer of %zu tokens to %d\n",
                 answer.size(), room);
    answer.resize(room);
  }
  RagSequence seq = prompt;
  seq.push_tokens(answer);
  Tensor hidden = generator.forward_hidden(seq, ctx);
  // logits at prompt end predict answer[0]; at answer[i] predict answer[i+1];
  // at the last answer token predict EOS
  Tensor rows = slice_rows(hidden, prompt_len - 1, prompt_len + static_cast<int>(answer.size()));
  Tensor logits = generator.unembed_rows(rows, ctx);
  std::vector<int> targets = answer;
  targets.push_back(Tokenizer::kEos);
  return cross_entropy_mean(logits, targets);
}

}  // namespace

Tensor distill_loss(const TransformerModel& generator, const Compressor& compressor,
                    const Tokenizer& tok, const RagPromptTemplate& tmpl,
                    const DistillExample& ex, bool query_dependent, bool with_scores,
                    const ForwardCtx& ctx) {
  (void)tok;
  auto compressed = compressor.batch_compress(ex.query, ex.docs, with_scores, query_dependent, ctx);
  std::vector<PromptDoc> pdocs;
  for (auto& c : compressed) pdocs.emplace_back(std::move(c));
  RagSequence prompt = build_prompt(tmpl, ex.query, pdocs, generator.cfg.max_seq);
  return answer_nll(generator, prompt, ex.answer, ctx);
}

Tensor joint_loss(const TransformerModel& generator, const Compressor& compressor,
                  const Tokenizer& tok, const RagPromptTemplate& tmpl, const DistillExample& ex,
                  double lambda, bool query_dependent, const ForwardCtx& ctx) {
  (void)tok;
  if (!compressor.rerank.has_value()) throw ConfigError("joint_loss: no rerank head installed");
  if (ex.scores.empty())
    throw ConfigError("joint_loss: example " + ex.qid + " carries no reference scores");
  auto compressed = compressor.batch_compress(ex.query, ex.docs, true, query_dependent, ctx);
  std::vector<Tensor> rs;
  for (const auto& c : compressed) rs.push_back(c.relevance_node);
  std::vector<PromptDoc> pdocs;
  for (auto& c : compressed) pdocs.emplace_back(std::move(c));
  RagSequence prompt = build_prompt(tmpl, ex.query, pdocs, generator.cfg.max_seq);
  Tensor nll = answer_nll(generator, prompt, ex.answer, ctx);
  Tensor residual = sum(square(sub_const(concat_rows(rs), ex.scores)));
  return add(nll, scale(residual, static_cast<float>(lambda)));
}

Tensor pretrain_step(const TransformerModel& generator, const Compressor& compressor,
                     const std::vector<int>& doc_tokens, PretrainTask task,
                     const ForwardCtx& ctx) {
  std::vector<int> compress_part = doc_tokens;
  std::vector<int> target_part = doc_tokens;
  if (task == PretrainTask::kContinue) {
    if (doc_tokens.size() < 2)
      throw DataError("pretrain continuation: document must have at least 2 tokens");
    size_t half = doc_tokens.size() / 2;
    compress_part.assign(doc_tokens.begin(), doc_tokens.begin() + half);
    target_part.assign(doc_tokens.begin() + half, doc_tokens.end());
  }
  CompressedDoc cd = compressor.compress_query_independent(compress_part, false, -1, ctx);
  RagSequence prompt;
  prompt.push_token(Tokenizer::kBos);
  prompt.push_embeddings(cd.embeddings);
  prompt.push_token(Tokenizer::kSep);
  return answer_nll(generator, prompt, target_part, ctx);
}

Tensor teacher_loss(const TransformerModel& generator, const Tokenizer& tok,
                    const RagPromptTemplate& tmpl, const DistillExample& ex,
                    const ForwardCtx& ctx) {
  (void)tok;
  std::vector<PromptDoc> pdocs(ex.docs.begin(), ex.docs.end());
  RagSequence prompt = build_prompt(tmpl, ex.query, pdocs, generator.cfg.max_seq);
  return answer_nll(generator, prompt, ex.answer, ctx);
}

// ---- trainer ---------------------------------------------------------------------

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (lambda < 0.0) throw ConfigError("train: lambda must be >= 0");
  if (lr_generator <= 0.0 || lr_cross_compressor <= 0.0 || lr_nlayers_compressor <= 0.0)
    throw ConfigError("train: learning rates must be > 0");
  if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (k < 1) throw ConfigError("train: k must be >= 1");
  if (l < 1) throw ConfigError("train: l must be >= 1");
}

Trainer::Trainer(TrainMode mode, TransformerModel* generator, Compressor* compressor,
                 const Tokenizer* tok, const RagPromptTemplate* tmpl, TrainConfig cfg,
                 bool nlayers_variant, int total_examples)
    : mode_(mode), generator_(generator), compressor_(compressor), tok_(tok), tmpl_(tmpl),
      cfg_(cfg) {
  cfg_.validate();
  if (total_examples < 1) throw DataError("trainer: empty dataset");
  steps_per_epoch_ = (total_examples + cfg_.batch_size - 1) / cfg_.batch_size;
  total_steps_ = steps_per_epoch_ * cfg_.epochs;

  std::vector<ParamGroup> groups;
  if (mode_ == TrainMode::kTeacher) {
    groups.push_back({"generator", generator_->base_params(), cfg_.lr_generator});
  } else {
    if (compressor_ == nullptr) throw ConfigError("trainer: compressor required");
    if (!cfg_.frozen_generator) {
      ParamRegistry lora = generator_->lora_params();
      if (lora.total_size() == 0)
        throw ConfigError("trainer: generator has no adapters; call add_lora first");
      groups.push_back({"generator_lora", lora, cfg_.lr_generator});
    }
    double comp_lr = nlayers_variant ? cfg_.lr_nlayers_compressor : cfg_.lr_cross_compressor;
    groups.push_back({"compressor", compressor_->params(), comp_lr});
  }

  OptimizerConfig oc;
  oc.weight_decay = cfg_.weight_decay;
  oc.warmup_ratio = cfg_.warmup_ratio;
  oc.max_grad_norm = cfg_.max_grad_norm;
  oc.total_steps = total_steps_;
  opt_ = std::make_unique<AdamW>(std::move(groups), oc);
  opt_->activate();
}

double Trainer::run_batch(const std::vector<DistillExample>& examples,
                          const std::vector<int>& batch_idx, GradSink& total,
                          double* grad_norm_unused) {
  (void)grad_norm_unused;
  int B = static_cast<int>(batch_idx.size());
  std::vector<GradSink> sinks(B, GradSink(static_cast<size_t>(opt_->total_params())));
  std::vector<double> losses(B, 0.0);
  float inv_b = 1.0f / static_cast<float>(B);

  parallel_for(B, [&](int bi) {
    const DistillExample& ex = examples[batch_idx[bi]];
    Rng drop_rng(derive_seed(cfg_.seed, 0xd70 + step_, bi));
    ForwardCtx ctx;
    ctx.lora_dropout_rng = &drop_rng;
    // random rotary offset so training covers the positions longer
    // evaluation prompts will use
    int len = tmpl_->overhead() + static_cast<int>(ex.query.size()) +
              static_cast<int>(ex.answer.size());
    int k = static_cast<int>(ex.docs.size());
    if (mode_ == TrainMode::kDistill) {
      len += cfg_.l * k + (k - 1);
    } else if (mode_ == TrainMode::kTeacher) {
      for (const auto& d : ex.docs) len += static_cast<int>(d.size());
      len += k - 1;
    } else {
      len = 2 + cfg_.l + static_cast<int>(ex.docs.at(0).size());
    }
    int room = generator_->cfg.max_seq - len - 2;
    ctx.position_offset = room > 0 ? drop_rng.index(room + 1) : 0;
    Tensor loss;
    switch (mode_) {
      case TrainMode::kTeacher:
        loss = teacher_loss(*generator_, *tok_, *tmpl_, ex, ctx);
        break;
      case TrainMode::kDistill:
        if (cfg_.joint_rerank && !ex.scores.empty())
          loss = joint_loss(*generator_, *compressor_, *tok_, *tmpl_, ex, cfg_.lambda,
                            cfg_.query_dependent, ctx);
        else
          loss = distill_loss(*generator_, *compressor_, *tok_, *tmpl_, ex,
                              cfg_.query_dependent, false, ctx);
        break;
      case TrainMode::kPretrain: {
        // alternate auto-encoding and continuation rows
        PretrainTask pt = (batch_idx[bi] % 2 == 0) ? PretrainTask::kAutoEncode
                                                   : PretrainTask::kContinue;
        loss = pretrain_step(*generator_, *compressor_, ex.docs.at(0), pt, ctx);
        break;
      }
    }
    losses[bi] = loss.scalar();
    backward(scale(loss, inv_b), &sinks[bi]);
  });

  // deterministic reduction in example order
  for (int bi = 0; bi < B; bi++) total.add_from(sinks[bi]);
  double mean_loss = 0.0;
  for (double l : losses) mean_loss += l;
  return mean_loss / B;
}

std::vector<LossCurvePoint> Trainer::run(const std::vector<DistillExample>& examples, int n_steps,
                                         const std::function<bool(int, double)>& stop) {
  int remaining = n_steps < 0 ? total_steps_ - step_ : n_steps;
  std::vector<LossCurvePoint> curve;
  GradSink total(static_cast<size_t>(opt_->total_params()));
  for (int s = 0; s < remaining && step_ < total_steps_; s++) {
    int epoch = step_ / steps_per_epoch_;
    int within = step_ % steps_per_epoch_;
    std::vector<int> order(examples.size());
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(derive_seed(cfg_.seed, 0x0e0c, epoch));
    shuffle_rng.shuffle(order);
    int begin = within * cfg_.batch_size;
    int end = std::min<int>(begin + cfg_.batch_size, static_cast<int>(order.size()));
    std::vector<int> batch(order.begin() + begin, order.begin() + end);

    total.reset();
    double loss = run_batch(examples, batch, total, nullptr);
    if (!std::isfinite(loss)) {
      std::ostringstream os;
      os << "train: NaN/Inf loss at step " << step_ + 1 << " (lr "
         << opt_->group_lr(0, step_ + 1) << ")";
      throw NumericError(os.str());
    }
    double norm = opt_->step(total);
    step_++;
    curve.push_back({step_, loss, opt_->group_lr(0, step_), norm});
    if (stop && stop(step_, loss)) break;
  }
  return curve;
}

void Trainer::save_state(const std::string& path) const {
  std::vector<float> m, v;
  int st;
  opt_->export_state(m, v, st);
  ParamRegistry reg;
  reg.add("adam.m", Tensor::from_data({static_cast<int>(m.size())}, m));
  reg.add("adam.v", Tensor::from_data({static_cast<int>(v.size())}, v));
  reg.add("adam.step", Tensor::from_data({1}, {static_cast<float>(st)}));
  save_checkpoint(path, reg);
}

void Trainer::load_state(const std::string& path) {
  auto records = read_checkpoint(path);
  std::vector<float> m, v;
  int st = 0;
  for (auto& [name, t] : records) {
    if (name == "adam.m") m = t.data();
    else if (name == "adam.v") v = t.data();
    else if (name == "adam.step") st = static_cast<int>(t.data()[0]);
  }
  opt_->import_state(m, v, st);
  step_ = st;
}

void save_loss_curve(const std::string& path, const std::vector<LossCurvePoint>& curve) {
  std::ofstream os(path);
  if (!os) throw DataError("loss curve: cannot write " + path);
  os << "step,loss,lr,grad_norm\n";
  for (const auto& p : curve)
    os << p.step << "," << p.loss << "," << p.lr << "," << p.grad_norm << "\n";
}

// ---- student persistence ------------------------------------------------------------

void save_student(const std::string& dir, const TransformerModel& generator,
                  const Compressor& compressor, const StudentMeta& meta) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  compressor.save(dir + "/compressor.osc1");
  ParamRegistry lora = generator.lora_params();
  if (lora.total_size() > 0) save_checkpoint(dir + "/generator_lora.osc1", lora);
  json j{{"base_checkpoint", meta.base_checkpoint},
         {"lora_rank", meta.lora.rank},
         {"lora_alpha", meta.lora.alpha},
         {"lora_dropout", meta.lora.dropout},
         {"l", meta.l},
         {"query_dependent", meta.query_dependent},
         {"joint_rerank", meta.joint_rerank},
         {"frozen_generator", meta.frozen_generator},
         {"variant", meta.variant},
         {"has_lora", lora.total_size() > 0}};
  std::ofstream os(dir + "/student.json");
  if (!os) throw DataError("student save: cannot write " + dir + "/student.json");
  os << j.dump(1) << "\n";
}

Student load_student(const std::string& dir) {
  std::ifstream is(dir + "/student.json");
  if (!is) throw DataError("student load: missing " + dir + "/student.json");
  json j = json::parse(is);
  Student st;
  st.meta.base_checkpoint = j.at("base_checkpoint");
  st.meta.lora.rank = j.at("lora_rank");
  st.meta.lora.alpha = j.at("lora_alpha");
  st.meta.lora.dropout = j.at("lora_dropout");
  st.meta.l = j.at("l");
  st.meta.query_dependent = j.at("query_dependent");
  st.meta.joint_rerank = j.at("joint_rerank");
  st.meta.frozen_generator = j.at("frozen_generator");
  st.meta.variant = j.at("variant");

  st.generator = TransformerModel::load(st.meta.base_checkpoint);
  if (j.value("has_lora", false)) {
    st.generator.freeze_base();
    st.generator.add_lora(st.meta.lora, 0);
    load_checkpoint(dir + "/generator_lora.osc1", st.generator.lora_params());
  }
  st.compressor = Compressor::load(dir + "/compressor.osc1");
  return st;
}

}  // namespace oscar
