#include "oscar/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "oscar/errors.hpp"

namespace oscar {

using nlohmann::json;

// ---- word pools ---------------------------------------------------------------

namespace {

const char* kConsonants = "bdfgklmnprstvz";
const char* kVowels = "aeiou";

std::string make_word(Rng& rng, int syllables, const char* suffix) {
  std::string w;
  for (int s = 0; s < syllables; s++) {
    w += kConsonants[rng.index(14)];
    w += kVowels[rng.index(5)];
  }
  return w + suffix;
}

std::vector<std::string> make_pool(Rng& rng, int n, int syllables, const char* suffix) {
  std::set<std::string> seen;
  std::vector<std::string> out;
  while (static_cast<int>(out.size()) < n) {
    std::string w = make_word(rng, syllables, suffix);
    if (seen.insert(w).second) out.push_back(w);
  }
  return out;
}

const std::vector<std::string> kAttrPool = {"color",  "origin", "size",   "rank",
                                            "tone",   "shape",  "grade",  "style"};

}  // namespace

// ---- chunking -------------------------------------------------------------------

std::vector<Chunk> chunk_document(const std::vector<int>& doc_tokens, int chunk_len, int doc_id) {
  if (chunk_len < 1) throw ConfigError("chunk_document: chunk_len must be >= 1");
  std::vector<Chunk> out;
  for (size_t off = 0; off < doc_tokens.size(); off += chunk_len) {
    Chunk c;
    c.doc_id = doc_id;
    size_t end = std::min(doc_tokens.size(), off + chunk_len);
    c.tokens.assign(doc_tokens.begin() + off, doc_tokens.begin() + end);
    out.push_back(std::move(c));
  }
  return out;
}

// ---- corpus generation ------------------------------------------------------------

SyntheticTask gen_corpus(const CorpusSpec& spec) {
  if (spec.n_facts < 1) throw ConfigError("gen_corpus: n_facts must be >= 1");
  if (spec.facts_per_doc < 1) throw ConfigError("gen_corpus: facts_per_doc must be >= 1");
  if (spec.n_attrs > static_cast<int>(kAttrPool.size()))
    throw ConfigError("gen_corpus: at most " + std::to_string(kAttrPool.size()) + " attributes");
  if (spec.n_facts % spec.facts_per_doc != 0)
    throw ConfigError("gen_corpus: n_facts must be a multiple of facts_per_doc");

  SyntheticTask task;
  task.spec = spec;
  Rng rng(derive_seed(spec.seed, 0xc0));

  int n_entities = spec.n_facts / spec.facts_per_doc;
  auto entities = make_pool(rng, n_entities, 3, "or");
  auto values = make_pool(rng, spec.n_values, 3, "ix");
  auto fillers = make_pool(rng, spec.n_fillers, 2, "");
  std::vector<std::string> attrs(kAttrPool.begin(), kAttrPool.begin() + spec.n_attrs);

  std::vector<std::string> vocab_words = {"the", "of", "is", ".", "what", "tell", "me",
                                          "about", "background", "question", "answer"};
  for (auto* pool : {&entities, &values, &fillers, &attrs})
    vocab_words.insert(vocab_words.end(), pool->begin(), pool->end());
  task.tokenizer = Tokenizer(vocab_words);
  const Tokenizer& tok = task.tokenizer;

  task.templates = {"what is the <attr> of <entity>", "tell me the <attr> of <entity>"};

  auto filler_words = [&](int n) {
    std::vector<int> out;
    for (int i = 0; i < n; i++) out.push_back(tok.id(rng.choice(fillers)));
    return out;
  };
  auto needle_tokens = [&](const std::string& attr, const std::string& entity,
                           const std::string& value) {
    return std::vector<int>{tok.id("the"), tok.id(attr), tok.id("of"), tok.id(entity),
                            tok.id("is"),  tok.id(value), tok.id(".")};
  };

  // fact chunks: each document carries facts_per_doc facts about one entity,
  // planted at random offsets in filler text
  int next_doc = 0;
  for (int e = 0; e < n_entities; e++) {
    // sample distinct attributes for this entity
    std::vector<int> attr_idx(attrs.size());
    std::iota(attr_idx.begin(), attr_idx.end(), 0);
    rng.shuffle(attr_idx);
    attr_idx.resize(spec.facts_per_doc);
    std::sort(attr_idx.begin(), attr_idx.end());

    std::vector<int> body;
    int gap0 = rng.index(std::max(1, (spec.doc_len_tokens / (spec.facts_per_doc + 1)) - 7));
    for (int f = 0; f < spec.facts_per_doc; f++) {
      std::string value = values[rng.index(spec.n_values)];
      auto filler = filler_words(f == 0 ? gap0 : 3 + rng.index(6));
      body.insert(body.end(), filler.begin(), filler.end());
      size_t pos = body.size();
      auto nd = needle_tokens(attrs[attr_idx[f]], entities[e], value);
      body.insert(body.end(), nd.begin(), nd.end());
      Fact fact;
      fact.entity = entities[e];
      fact.attr = attrs[attr_idx[f]];
      fact.value = value;
      fact.needle_begin = static_cast<int>(pos);
      fact.needle_end = static_cast<int>(pos + nd.size());
      task.facts.push_back(std::move(fact));
    }
    if (static_cast<int>(body.size()) > spec.doc_len_tokens)
      throw ConfigError("gen_corpus: facts_per_doc does not fit in doc_len_tokens");
    if (static_cast<int>(body.size()) < spec.doc_len_tokens) {
      auto filler = filler_words(spec.doc_len_tokens - static_cast<int>(body.size()));
      body.insert(body.end(), filler.begin(), filler.end());
    }

    Chunk c;
    c.id = static_cast<int>(task.chunks.size());
    c.doc_id = next_doc++;
    c.tokens = body;
    c.span_end = static_cast<int>(tok.decode(body, true).size());
    for (size_t f = task.facts.size() - spec.facts_per_doc; f < task.facts.size(); f++)
      task.facts[f].chunk_id = c.id;
    task.chunks.push_back(std::move(c));
  }

  // distractor chunks; a fraction mention an entity (never with attr+is+value)
  for (int d = 0; d < spec.n_distractors; d++) {
    std::vector<int> body = filler_words(spec.doc_len_tokens);
    if (rng.uniform() < spec.distractor_entity_rate) {
      int at = rng.index(spec.doc_len_tokens - 4);
      body[at] = tok.id("about");
      body[at + 1] = tok.id(rng.choice(entities));
    }
    Chunk c;
    c.id = static_cast<int>(task.chunks.size());
    c.doc_id = next_doc++;
    c.tokens = std::move(body);
    c.span_end = static_cast<int>(tok.decode(c.tokens, true).size());
    task.chunks.push_back(std::move(c));
  }

  // train/eval split over entities so evaluation facts never appear in any
  // training answer
  std::vector<int> entity_order(n_entities);
  std::iota(entity_order.begin(), entity_order.end(), 0);
  rng.shuffle(entity_order);
  int n_eval_entities = std::max(1, n_entities * spec.eval_fraction_pct / 100);
  std::set<std::string> eval_entities;
  for (int i = 0; i < n_eval_entities; i++) eval_entities.insert(entities[entity_order[i]]);
  for (auto& f : task.facts) f.train_split = eval_entities.count(f.entity) == 0;

  auto render_query = [&](const std::string& tmpl, const Fact& f) {
    std::string out;
    std::istringstream is(tmpl);
    std::string w;
    while (is >> w) {
      if (w == "<attr>") w = f.attr;
      else if (w == "<entity>") w = f.entity;
      if (!out.empty()) out += ' ';
      out += w;
    }
    return out;
  };

  int qn = 0;
  for (size_t fi = 0; fi < task.facts.size(); fi++) {
    const Fact& f = task.facts[fi];
    int per = f.train_split ? spec.queries_per_train_fact : spec.queries_per_eval_fact;
    per = std::min(per, static_cast<int>(task.templates.size()));
    for (int t = 0; t < per; t++) {
      TaskQuery q;
      q.qid = "q" + std::to_string(qn++);
      q.text = render_query(task.templates[t], f);
      q.gold = {f.value};
      q.fact_index = static_cast<int>(fi);
      q.train_split = f.train_split;
      (f.train_split ? task.train_queries : task.eval_queries).push_back(std::move(q));
    }
  }

  // augmented queries: fresh values planted in one-off context chunks so the
  // answer is only ever derivable from the context
  std::vector<const Fact*> train_facts;
  for (const auto& f : task.facts)
    if (f.train_split) train_facts.push_back(&f);
  int n_plain_distractors = spec.n_distractors;
  for (int a = 0; a < spec.n_aug_queries && !train_facts.empty(); a++) {
    const Fact* base = train_facts[rng.index(static_cast<int>(train_facts.size()))];
    std::string value = values[rng.index(spec.n_values)];

    std::vector<int> body;
    int facts_here = spec.facts_per_doc;
    int slot = rng.index(facts_here);
    std::vector<int> attr_idx(attrs.size());
    std::iota(attr_idx.begin(), attr_idx.end(), 0);
    rng.shuffle(attr_idx);
    std::string asked_attr;
    for (int f = 0; f < facts_here; f++) {
      auto filler = filler_words(f == 0 ? rng.index(std::max(
                                              1, spec.doc_len_tokens / (facts_here + 1) - 7))
                                        : 3 + rng.index(6));
      body.insert(body.end(), filler.begin(), filler.end());
      std::string attr = attrs[attr_idx[f]];
      std::string v = (f == slot) ? value : values[rng.index(spec.n_values)];
      if (f == slot) asked_attr = attr;
      auto nd = needle_tokens(attr, base->entity, v);
      body.insert(body.end(), nd.begin(), nd.end());
    }
    if (static_cast<int>(body.size()) > spec.doc_len_tokens)
      throw ConfigError("gen_corpus: facts_per_doc does not fit in doc_len_tokens");
    if (static_cast<int>(body.size()) < spec.doc_len_tokens) {
      auto filler = filler_words(spec.doc_len_tokens - static_cast<int>(body.size()));
      body.insert(body.end(), filler.begin(), filler.end());
    }

    Chunk c;
    c.id = static_cast<int>(task.chunks.size());
    c.doc_id = next_doc++;
    c.tokens = std::move(body);
    c.span_end = static_cast<int>(tok.decode(c.tokens, true).size());
    c.aug = true;
    task.chunks.push_back(std::move(c));

    TaskQuery q;
    q.qid = "aug" + std::to_string(a);
    Fact tmp;
    tmp.attr = asked_attr;
    tmp.entity = base->entity;
    q.text = render_query(task.templates[rng.index(static_cast<int>(task.templates.size()))], tmp);
    q.gold = {value};
    q.fact_index = -1;
    q.train_split = true;
    q.fixed_docs.push_back(task.chunks.back().id);
    for (int d = 1; d < spec.aug_context_docs && n_plain_distractors > 0; d++)
      q.fixed_docs.push_back(task.chunks[spec.n_facts / spec.facts_per_doc +
                                         rng.index(n_plain_distractors)].id);
    rng.shuffle(q.fixed_docs);
    task.train_queries.push_back(std::move(q));
  }

  // retrieval-quality report over the non-aug queries
  Bm25Index index(task.chunks);
  int hits = 0, total = 0;
  for (const auto* qs : {&task.train_queries, &task.eval_queries}) {
    for (const auto& q : *qs) {
      if (q.fact_index < 0) continue;
      auto ranked = index.topk(tok.encode(q.text), 5);
      int support = task.facts[q.fact_index].chunk_id;
      total++;
      for (const auto& r : ranked)
        if (r.chunk_id == support) {
          hits++;
          break;
        }
    }
  }
  task.measured_top5_recall = total > 0 ? static_cast<double>(hits) / total : 0.0;
  return task;
}

// ---- BM25 -----------------------------------------------------------------------

Bm25Index::Bm25Index(const std::vector<Chunk>& chunks, double k1, double b) : k1_(k1), b_(b) {
  int64_t total_len = 0;
  for (const auto& c : chunks) {
    if (c.aug) continue;
    int pos = static_cast<int>(ids_.size());
    ids_.push_back(c.id);
    pos_of_id_[c.id] = pos;
    lengths_.push_back(static_cast<int>(c.tokens.size()));
    total_len += c.tokens.size();
    std::unordered_map<int, int> tf;
    for (int t : c.tokens) tf[t]++;
    for (auto [t, f] : tf) postings_[t].push_back({pos, f});
  }
  n_docs_ = static_cast<int>(ids_.size());
  if (n_docs_ == 0) throw DataError("bm25: empty chunk store");
  avg_len_ = static_cast<double>(total_len) / n_docs_;
  for (auto& [t, plist] : postings_) {
    double df = static_cast<double>(plist.size());
    idf_[t] = std::log(1.0 + (n_docs_ - df + 0.5) / (df + 0.5));
  }
}

std::vector<ScoredChunk> Bm25Index::topk(const std::vector<int>& query_tokens, int k) const {
  if (query_tokens.empty()) {
    std::fprintf(stderr, "[bm25] warning: empty query, returning no results\n");
    return {};
  }
  std::vector<double> scores(n_docs_, 0.0);
  for (int t : query_tokens) {
    auto it = postings_.find(t);
    if (it == postings_.end()) continue;
    double idf = idf_.at(t);
    for (auto [pos, tf] : it->second) {
      double norm = k1_ * (1.0 - b_ + b_ * lengths_[pos] / avg_len_);
      scores[pos] += idf * (tf * (k1_ + 1.0)) / (tf + norm);
    }
  }
  std::vector<int> order(n_docs_);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b2) {
    if (scores[a] != scores[b2]) return scores[a] > scores[b2];
    return ids_[a] < ids_[b2];
  });
  int n = std::min<int>(k, n_docs_);
  std::vector<ScoredChunk> out;
  out.reserve(n);
  for (int i = 0; i < n; i++) out.push_back({ids_[order[i]], scores[order[i]]});
  return out;
}

double Bm25Index::score(const std::vector<int>& query_tokens, int chunk_id) const {
  auto it = pos_of_id_.find(chunk_id);
  if (it == pos_of_id_.end()) throw DataError("bm25: chunk id not indexed");
  int pos = it->second;
  std::unordered_map<int, int> tf;
  // recompute tf for this chunk from postings
  double out = 0.0;
  for (int t : query_tokens) {
    auto pit = postings_.find(t);
    if (pit == postings_.end()) continue;
    for (auto [p, f] : pit->second)
      if (p == pos) {
        double norm = k1_ * (1.0 - b_ + b_ * lengths_[pos] / avg_len_);
        out += idf_.at(t) * (f * (k1_ + 1.0)) / (f + norm);
        break;
      }
  }
  return out;
}

std::vector<float> normalize_scores(const std::vector<ScoredChunk>& ranked) {
  std::vector<float> out(ranked.size(), 0.5f);
  if (ranked.empty()) return out;
  double lo = ranked[0].score, hi = ranked[0].score;
  for (const auto& r : ranked) {
    lo = std::min(lo, r.score);
    hi = std::max(hi, r.score);
  }
  if (hi - lo < 1e-12) return out;
  for (size_t i = 0; i < ranked.size(); i++)
    out[i] = static_cast<float>((ranked[i].score - lo) / (hi - lo));
  return out;
}

std::vector<std::vector<int>> docmerge_noisy(const std::vector<std::vector<int>>& docs,
                                             const std::vector<Chunk>& pool, Rng& rng) {
  if (pool.empty()) throw DataError("docmerge_noisy: empty chunk pool");
  std::vector<std::vector<int>> out;
  out.reserve(docs.size());
  for (const auto& d : docs) {
    std::vector<int> merged = d;
    const auto& extra = pool[rng.index(static_cast<int>(pool.size()))].tokens;
    merged.insert(merged.end(), extra.begin(), extra.end());
    out.push_back(std::move(merged));
  }
  return out;
}

std::vector<std::vector<int>> docmerge_pairwise(const std::vector<std::vector<int>>& docs) {
  std::vector<std::vector<int>> out;
  for (size_t i = 0; i + 1 < docs.size(); i += 2) {
    std::vector<int> merged = docs[i];
    merged.insert(merged.end(), docs[i + 1].begin(), docs[i + 1].end());
    out.push_back(std::move(merged));
  }
  if (docs.size() % 2 == 1) out.push_back(docs.back());
  return out;
}

// ---- persistence -------------------------------------------------------------------

void SyntheticTask::save(const std::string& dir) const {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  tokenizer.save(dir + "/tokenizer.txt");

  std::ofstream cs(dir + "/chunks.jsonl");
  if (!cs) throw DataError("task save: cannot write chunks.jsonl");
  for (const auto& c : chunks) {
    json j{{"id", c.id}, {"doc", c.doc_id}, {"span", {c.span_begin, c.span_end}},
           {"tokens", c.tokens}};
    if (c.aug) j["aug"] = true;
    cs << j.dump() << "\n";
  }

  json t;
  t["schema_version"] = 1;
  t["seed"] = spec.seed;
  t["spec"] = {{"n_facts", spec.n_facts},
               {"n_distractors", spec.n_distractors},
               {"doc_len_tokens", spec.doc_len_tokens},
               {"facts_per_doc", spec.facts_per_doc},
               {"n_attrs", spec.n_attrs},
               {"n_values", spec.n_values},
               {"n_fillers", spec.n_fillers},
               {"eval_fraction_pct", spec.eval_fraction_pct},
               {"queries_per_train_fact", spec.queries_per_train_fact},
               {"queries_per_eval_fact", spec.queries_per_eval_fact},
               {"n_aug_queries", spec.n_aug_queries},
               {"aug_context_docs", spec.aug_context_docs},
               {"distractor_entity_rate", spec.distractor_entity_rate}};
  t["templates"] = templates;
  t["measured_top5_recall"] = measured_top5_recall;
  t["facts"] = json::array();
  for (const auto& f : facts)
    t["facts"].push_back({{"entity", f.entity},
                          {"attr", f.attr},
                          {"value", f.value},
                          {"chunk_id", f.chunk_id},
                          {"needle", {f.needle_begin, f.needle_end}},
                          {"train", f.train_split}});
  auto dump_queries = [](const std::vector<TaskQuery>& qs) {
    json arr = json::array();
    for (const auto& q : qs)
      arr.push_back({{"qid", q.qid},
                     {"text", q.text},
                     {"gold", q.gold},
                     {"fact_index", q.fact_index},
                     {"train", q.train_split},
                     {"fixed_docs", q.fixed_docs}});
    return arr;
  };
  t["train_queries"] = dump_queries(train_queries);
  t["eval_queries"] = dump_queries(eval_queries);

  std::ofstream ts(dir + "/task.json");
  if (!ts) throw DataError("task save: cannot write task.json");
  ts << t.dump(1) << "\n";
}

SyntheticTask SyntheticTask::load(const std::string& dir) {
  SyntheticTask task;
  task.tokenizer = Tokenizer::load(dir + "/tokenizer.txt");

  std::ifstream cs(dir + "/chunks.jsonl");
  if (!cs) throw DataError("task load: cannot open " + dir + "/chunks.jsonl");
  std::string line;
  while (std::getline(cs, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    Chunk c;
    c.id = j["id"];
    c.doc_id = j["doc"];
    c.span_begin = j["span"][0];
    c.span_end = j["span"][1];
    c.tokens = j["tokens"].get<std::vector<int>>();
    c.aug = j.value("aug", false);
    task.chunks.push_back(std::move(c));
  }

  std::ifstream ts(dir + "/task.json");
  if (!ts) throw DataError("task load: cannot open " + dir + "/task.json");
  json t = json::parse(ts);
  if (t.value("schema_version", 0) != 1) throw ConfigError("task load: unsupported schema");
  const json& s = t["spec"];
  task.spec.seed = t["seed"];
  task.spec.n_facts = s["n_facts"];
  task.spec.n_distractors = s["n_distractors"];
  task.spec.doc_len_tokens = s["doc_len_tokens"];
  task.spec.facts_per_doc = s["facts_per_doc"];
  task.spec.n_attrs = s["n_attrs"];
  task.spec.n_values = s["n_values"];
  task.spec.n_fillers = s["n_fillers"];
  task.spec.eval_fraction_pct = s["eval_fraction_pct"];
  task.spec.queries_per_train_fact = s["queries_per_train_fact"];
  task.spec.queries_per_eval_fact = s["queries_per_eval_fact"];
  task.spec.n_aug_queries = s["n_aug_queries"];
  task.spec.aug_context_docs = s["aug_context_docs"];
  task.spec.distractor_entity_rate = s["distractor_entity_rate"];
  task.templates = t["templates"].get<std::vector<std::string>>();
  task.measured_top5_recall = t["measured_top5_recall"];
  for (const auto& j : t["facts"]) {
    Fact f;
    f.entity = j["entity"];
    f.attr = j["attr"];
    f.value = j["value"];
    f.chunk_id = j["chunk_id"];
    f.needle_begin = j["needle"][0];
    f.needle_end = j["needle"][1];
    f.train_split = j["train"];
    task.facts.push_back(std::move(f));
  }
  auto load_queries = [](const json& arr, std::vector<TaskQuery>& out) {
    for (const auto& j : arr) {
      TaskQuery q;
      q.qid = j["qid"];
      q.text = j["text"];
      q.gold = j["gold"].get<std::vector<std::string>>();
      q.fact_index = j["fact_index"];
      q.train_split = j["train"];
      q.fixed_docs = j["fixed_docs"].get<std::vector<int>>();
      out.push_back(std::move(q));
    }
  };
  load_queries(t["train_queries"], task.train_queries);
  load_queries(t["eval_queries"], task.eval_queries);
  return task;
}

}  // namespace oscar
