#include "oscar/compressor.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "oscar/checkpoint.hpp"
#include "oscar/errors.hpp"

namespace oscar {

MemoryTokenBank MemoryTokenBank::init(int l, int d_comp, uint64_t seed) {
  if (l < 1) throw ConfigError("memory bank: l must be >= 1");
  if (l > Tokenizer::kMaxMem)
    throw ConfigError("memory bank: l exceeds reserved [MEM] specials");
  Rng rng(derive_seed(seed, 0x3e3));
  MemoryTokenBank bank;
  bank.mem = Tensor::randn({l, d_comp}, rng, 0.5f, true);
  bank.rr = Tensor::randn({1, d_comp}, rng, 0.5f, true);
  return bank;
}

Adapter Adapter::init(int d_comp, int hidden, int d_gen, uint64_t seed) {
  Rng rng(derive_seed(seed, 0xada));
  Adapter a;
  a.fc1.w = Tensor::randn({d_comp, hidden}, rng, 1.0f / std::sqrt((float)d_comp), true);
  a.fc2.w = Tensor::randn({hidden, d_gen}, rng, 1.0f / std::sqrt((float)hidden), true);
  return a;
}

RerankHead RerankHead::init(int d_comp, uint64_t seed) {
  Rng rng(derive_seed(seed, 0x44e));
  RerankHead h;
  h.w = Tensor::randn({d_comp, 1}, rng, 1.0f / std::sqrt((float)d_comp), true);
  return h;
}

CompressedDoc Compressor::run(RagSequence seq, bool rr, int doc_id, const ForwardCtx& ctx) const {
  int l = bank.l();
  int extra = l + (rr ? 1 : 0);
  if (seq.length() + extra > model.cfg.max_seq)
    throw SequenceLengthError("compress: input of " + std::to_string(seq.length()) +
                              " tokens plus " + std::to_string(extra) +
                              " memory positions exceeds max_seq " +
                              std::to_string(model.cfg.max_seq));
  if (rr && !rerank.has_value()) throw ConfigError("compress: no rerank head installed");
  if (model.cfg.d_model != d_gen && !adapter.has_value())
    throw ConfigError("compress: compressor width " + std::to_string(model.cfg.d_model) +
                      " differs from generator width " + std::to_string(d_gen) +
                      " and no adapter is configured");

  seq.push_embeddings(bank.mem);
  if (rr) seq.push_embeddings(bank.rr);
  // compressor inputs are short; positions always start at 0
  ForwardCtx comp_ctx = ctx;
  comp_ctx.position_offset = 0;
  Tensor hidden = model.forward_hidden(seq, comp_ctx);
  int len = hidden.dim(0);
  Tensor mem_h = slice_rows(hidden, len - extra, len - extra + l);

  CompressedDoc out;
  out.source_doc_id = doc_id;
  out.embeddings = adapter.has_value() ? adapter->apply(mem_h) : mem_h;
  if (rr) {
    Tensor rr_h = slice_rows(hidden, len - 1, len);
    out.relevance_node = sigmoid(matmul(rr_h, rerank->w));
    out.relevance = out.relevance_node.scalar();
  }
  return out;
}

CompressedDoc Compressor::compress(const std::vector<int>& query_tokens,
                                   const std::vector<int>& doc_tokens, bool rr, int doc_id,
                                   const ForwardCtx& ctx) const {
  RagSequence seq;
  seq.push_token(Tokenizer::kBos);
  seq.push_tokens(query_tokens);
  seq.push_token(Tokenizer::kSep);
  seq.push_tokens(doc_tokens);
  return run(std::move(seq), rr, doc_id, ctx);
}

CompressedDoc Compressor::compress_query_independent(const std::vector<int>& doc_tokens, bool rr,
                                                     int doc_id, const ForwardCtx& ctx) const {
  RagSequence seq;
  seq.push_token(Tokenizer::kBos);
  seq.push_tokens(doc_tokens);
  return run(std::move(seq), rr, doc_id, ctx);
}

std::vector<CompressedDoc> Compressor::batch_compress(const std::vector<int>& query_tokens,
                                                      const std::vector<std::vector<int>>& docs,
                                                      bool rr, bool query_dependent,
                                                      const ForwardCtx& ctx) const {
  if (docs.empty()) throw DataError("batch_compress: need k >= 1 documents");
  std::vector<CompressedDoc> out;
  out.reserve(docs.size());
  for (size_t i = 0; i < docs.size(); i++) {
    auto tag = [&](const std::string& msg) {
      return "doc " + std::to_string(i) + ": " + msg;
    };
    try {
      out.push_back(query_dependent
                        ? compress(query_tokens, docs[i], rr, static_cast<int>(i), ctx)
                        : compress_query_independent(docs[i], rr, static_cast<int>(i), ctx));
    } catch (const SequenceLengthError& e) {
      throw SequenceLengthError(tag(e.what()));
    } catch (const ConfigError& e) {
      throw ConfigError(tag(e.what()));
    } catch (const DimensionError& e) {
      throw DimensionError(tag(e.what()));
    }
  }
  return out;
}

ParamRegistry Compressor::params() const {
  ParamRegistry reg;
  reg.append(model.base_params(), "model.");
  reg.add("bank.mem", bank.mem);
  reg.add("bank.rr", bank.rr);
  if (adapter.has_value()) {
    reg.add("adapter.fc1", adapter->fc1.w);
    reg.add("adapter.fc2", adapter->fc2.w);
  }
  if (rerank.has_value()) reg.add("rerank.w", rerank->w);
  return reg;
}

void Compressor::save(const std::string& path) const {
  save_checkpoint(path, params());
  std::ofstream os(path + ".arch");
  if (!os) throw DataError("compressor save: cannot write " + path + ".arch");
  os << model.cfg.to_kv();
  os << "headless = " << (model.headless ? 1 : 0) << "\n";
  os << "comp_l = " << bank.l() << "\n";
  os << "comp_d_gen = " << d_gen << "\n";
  os << "comp_adapter_hidden = " << (adapter.has_value() ? adapter->fc1.w.dim(1) : 0) << "\n";
  os << "comp_rerank = " << (rerank.has_value() ? 1 : 0) << "\n";
}

Compressor Compressor::load(const std::string& path) {
  std::ifstream is(path + ".arch");
  if (!is) throw DataError("compressor load: missing sidecar " + path + ".arch");
  std::string line, arch_text;
  int l = 0, dg = 0, hidden = 0, has_rr = 0, headless = 0;
  while (std::getline(is, line)) {
    if (line.rfind("comp_l", 0) == 0) l = std::stoi(line.substr(line.find('=') + 1));
    else if (line.rfind("comp_d_gen", 0) == 0) dg = std::stoi(line.substr(line.find('=') + 1));
    else if (line.rfind("comp_adapter_hidden", 0) == 0) hidden = std::stoi(line.substr(line.find('=') + 1));
    else if (line.rfind("comp_rerank", 0) == 0) has_rr = std::stoi(line.substr(line.find('=') + 1));
    else if (line.rfind("headless", 0) == 0) headless = std::stoi(line.substr(line.find('=') + 1));
    else arch_text += line + "\n";
  }
  ArchConfig cfg = ArchConfig::from_kv(arch_text);

  Compressor c;
  c.model = TransformerModel::init(cfg, 0);
  c.model.headless = headless != 0;
  if (c.model.headless) {
    c.model.final_norm = Tensor();
    c.model.unembedding = Linear{};
  }
  c.bank = MemoryTokenBank::init(l, cfg.d_model, 0);
  c.d_gen = dg;
  if (hidden > 0) c.adapter = Adapter::init(cfg.d_model, hidden, dg, 0);
  if (has_rr) c.rerank = RerankHead::init(cfg.d_model, 0);
  load_checkpoint(path, c.params());
  return c;
}

Compressor Compressor::init_cross_model(const ArchConfig& comp_cfg, int d_gen, int l,
                                        bool with_rerank, uint64_t seed, int adapter_hidden) {
  Compressor c;
  c.model = TransformerModel::init(comp_cfg, derive_seed(seed, 1));
  // the backbone runs headless: memory states are read from the residual
  // stream and the LM head plays no role in compression
  c.model.headless = true;
  c.model.final_norm = Tensor();
  c.model.unembedding = Linear{};
  c.d_gen = d_gen;
  c.bank = MemoryTokenBank::init(l, comp_cfg.d_model, derive_seed(seed, 2));
  if (adapter_hidden <= 0) adapter_hidden = 4 * d_gen;
  c.adapter = Adapter::init(comp_cfg.d_model, adapter_hidden, d_gen, derive_seed(seed, 3));
  if (with_rerank) c.rerank = RerankHead::init(comp_cfg.d_model, derive_seed(seed, 4));
  return c;
}

Compressor Compressor::init_n_layers(const TransformerModel& generator, int n, int l,
                                     bool with_rerank, uint64_t seed) {
  Compressor c;
  c.model = generator.truncate_layers(n);
  c.d_gen = generator.cfg.d_model;
  c.bank = MemoryTokenBank::init(l, generator.cfg.d_model, derive_seed(seed, 2));
  if (with_rerank) c.rerank = RerankHead::init(generator.cfg.d_model, derive_seed(seed, 4));
  return c;
}

}  // namespace oscar
