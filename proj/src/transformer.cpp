#include "oscar/transformer.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "oscar/errors.hpp"
#include "oscar/checkpoint.hpp"

namespace oscar {

// ---- ArchConfig -------------------------------------------------------------

void ArchConfig::validate() const {
  if (n_layers < 1) throw ConfigError("arch: n_layers must be >= 1");
  if (vocab_size < 2) throw ConfigError("arch: vocab_size must be >= 2");
  if (n_heads < 1 || d_head < 1 || d_model != n_heads * d_head)
    throw ConfigError("arch: d_model must equal n_heads * d_head");
  if (n_kv_heads != 0 && (n_kv_heads > n_heads || n_heads % n_kv_heads != 0))
    throw ConfigError("arch: n_heads must be a multiple of n_kv_heads");
  if (d_ff < 1 || max_seq < 1) throw ConfigError("arch: d_ff and max_seq must be positive");
  if (d_head % 2 != 0) throw ConfigError("arch: d_head must be even for rotary positions");
}

std::string ArchConfig::to_kv() const {
  std::ostringstream os;
  os << "n_layers = " << n_layers << "\n"
     << "d_model = " << d_model << "\n"
     << "n_heads = " << n_heads << "\n"
     << "d_head = " << d_head << "\n"
     << "d_ff = " << d_ff << "\n"
     << "vocab_size = " << vocab_size << "\n"
     << "max_seq = " << max_seq << "\n"
     << "n_kv_heads = " << n_kv_heads << "\n"
     << "tied_unembedding = " << (tied_unembedding ? 1 : 0) << "\n";
  return os.str();
}

ArchConfig ArchConfig::from_kv(const std::string& text) {
  ArchConfig cfg;
  std::istringstream is(text);
  std::string line;
  bool headless_ignored = false;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("arch record: bad line '" + line + "'");
    auto trim = [](std::string s) {
      size_t a = s.find_first_not_of(" \t");
      size_t b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    std::string key = trim(line.substr(0, eq));
    int value = std::stoi(trim(line.substr(eq + 1)));
    if (key == "n_layers") cfg.n_layers = value;
    else if (key == "d_model") cfg.d_model = value;
    else if (key == "n_heads") cfg.n_heads = value;
    else if (key == "d_head") cfg.d_head = value;
    else if (key == "d_ff") cfg.d_ff = value;
    else if (key == "vocab_size") cfg.vocab_size = value;
    else if (key == "max_seq") cfg.max_seq = value;
    else if (key == "n_kv_heads") cfg.n_kv_heads = value;
    else if (key == "tied_unembedding") cfg.tied_unembedding = value != 0;
    else if (key == "headless") headless_ignored = value != 0;  // handled by caller
    else throw ConfigError("arch record: unknown key '" + key + "'");
  }
  (void)headless_ignored;
  cfg.validate();
  return cfg;
}

// ---- RagSequence ------------------------------------------------------------

int RagSequence::length() const {
  int n = 0;
  for (const auto& s : segments) {
    if (std::holds_alternative<TokenSegment>(s))
      n += static_cast<int>(std::get<TokenSegment>(s).ids.size());
    else
      n += std::get<EmbeddingSegment>(s).rows.dim(0);
  }
  return n;
}

void RagSequence::push_tokens(std::vector<int> ids) {
  if (ids.empty()) return;
  if (!segments.empty() && std::holds_alternative<TokenSegment>(segments.back())) {
    auto& seg = std::get<TokenSegment>(segments.back());
    seg.ids.insert(seg.ids.end(), ids.begin(), ids.end());
    return;
  }
  segments.push_back(TokenSegment{std::move(ids)});
}

void RagSequence::push_token(int id) { push_tokens({id}); }

void RagSequence::push_embeddings(Tensor rows) {
  segments.push_back(EmbeddingSegment{std::move(rows)});
}

RagSequence RagSequence::of_tokens(std::vector<int> ids) {
  RagSequence seq;
  seq.push_tokens(std::move(ids));
  return seq;
}

std::vector<int> RagSequence::token_ids() const {
  std::vector<int> out;
  for (const auto& s : segments)
    if (std::holds_alternative<TokenSegment>(s)) {
      const auto& ids = std::get<TokenSegment>(s).ids;
      out.insert(out.end(), ids.begin(), ids.end());
    }
  return out;
}

// ---- Linear -----------------------------------------------------------------

Tensor Linear::apply(const Tensor& x, Rng* dropout_rng) const {
  Tensor y = matmul(x, w);
  if (!has_lora()) return y;
  Tensor xin = x;
  if (lora_dropout > 0.0f && dropout_rng != nullptr)
    xin = dropout(x, lora_dropout, *dropout_rng);
  Tensor delta = matmul(matmul(xin, lora_a), lora_b);
  return add(y, scale(delta, lora_scale));
}

// ---- model construction -------------------------------------------------------

namespace {

Tensor init_weight(int in, int out, Rng& rng, float gain = 1.0f) {
  float stddev = gain / std::sqrt(static_cast<float>(in));
  return Tensor::randn({in, out}, rng, stddev, true);
}

}  // namespace

TransformerModel TransformerModel::init(const ArchConfig& cfg, uint64_t seed) {
  cfg.validate();
  TransformerModel m;
  m.cfg = cfg;
  Rng rng(derive_seed(seed, 0x7f00));
  m.embedding = Tensor::randn({cfg.vocab_size, cfg.d_model}, rng, 0.5f, true);
  float residual_gain = 1.0f / std::sqrt(2.0f * cfg.n_layers);
  for (int l = 0; l < cfg.n_layers; l++) {
    TransformerLayer layer;
    layer.attn_norm = Tensor::full({cfg.d_model}, 1.0f, true);
    layer.mlp_norm = Tensor::full({cfg.d_model}, 1.0f, true);
    layer.wq.w = init_weight(cfg.d_model, cfg.n_heads * cfg.d_head, rng);
    layer.wk.w = init_weight(cfg.d_model, cfg.kv_heads() * cfg.d_head, rng);
    layer.wv.w = init_weight(cfg.d_model, cfg.kv_heads() * cfg.d_head, rng);
    layer.wo.w = init_weight(cfg.n_heads * cfg.d_head, cfg.d_model, rng, residual_gain);
    layer.w_gate.w = init_weight(cfg.d_model, cfg.d_ff, rng);
    layer.w_up.w = init_weight(cfg.d_model, cfg.d_ff, rng);
    layer.w_down.w = init_weight(cfg.d_ff, cfg.d_model, rng, residual_gain);
    m.layers.push_back(std::move(layer));
  }
  m.final_norm = Tensor::full({cfg.d_model}, 1.0f, true);
  if (!cfg.tied_unembedding)
    m.unembedding.w = init_weight(cfg.d_model, cfg.vocab_size, rng);
  return m;
}

// ---- forward ----------------------------------------------------------------

Tensor TransformerModel::embed_input(const RagSequence& input) const {
  int len = input.length();
  if (len == 0) throw SequenceLengthError("forward: empty input");
  if (len > cfg.max_seq)
    throw SequenceLengthError("forward: input length " + std::to_string(len) +
                              " exceeds max_seq " + std::to_string(cfg.max_seq));
  std::vector<Tensor> parts;
  for (const auto& seg : input.segments) {
    if (std::holds_alternative<TokenSegment>(seg)) {
      const auto& ids = std::get<TokenSegment>(seg).ids;
      if (ids.empty()) continue;
      parts.push_back(row_gather(embedding, ids));
    } else {
      const Tensor& rows = std::get<EmbeddingSegment>(seg).rows;
      if (rows.shape().size() != 2 || rows.dim(1) != cfg.d_model)
        throw DimensionError("forward: embedding segment width " +
                             std::to_string(rows.dim(1)) + " != d_model " +
                             std::to_string(cfg.d_model));
      parts.push_back(rows);
    }
  }
  return parts.size() == 1 ? parts[0] : concat_rows(parts);
}

Tensor TransformerModel::forward_hidden(const RagSequence& input, const ForwardCtx& ctx) const {
  Tensor x = embed_input(input);
  int len = x.dim(0);
  if (ctx.position_offset < 0 || ctx.position_offset + len > cfg.max_seq)
    throw SequenceLengthError("forward: position offset " + std::to_string(ctx.position_offset) +
                              " plus length " + std::to_string(len) + " exceeds max_seq");
  std::vector<int> positions(len);
  std::iota(positions.begin(), positions.end(), ctx.position_offset);
  Rng* drop = ctx.lora_dropout_rng;
  for (const auto& layer : layers) {
    Tensor h = rms_norm(x, layer.attn_norm);
    Tensor q = rope(layer.wq.apply(h, drop), positions, cfg.n_heads);
    Tensor k = rope(layer.wk.apply(h, drop), positions, cfg.kv_heads());
    Tensor v = layer.wv.apply(h, drop);
    Tensor attn = causal_attention(q, k, v, cfg.n_heads, cfg.kv_heads());
    x = add(x, layer.wo.apply(attn, drop));
    Tensor h2 = rms_norm(x, layer.mlp_norm);
    Tensor gated = mul(silu(layer.w_gate.apply(h2, drop)), layer.w_up.apply(h2, drop));
    x = add(x, layer.w_down.apply(gated, drop));
  }
  return x;
}

Tensor TransformerModel::unembed_rows(const Tensor& hidden_rows, const ForwardCtx& ctx) const {
  if (headless) throw ConfigError("unembed_rows: headless model has no unembedding");
  Tensor h = rms_norm(hidden_rows, final_norm);
  if (cfg.tied_unembedding) return matmul_nt(h, embedding);
  return unembedding.apply(h, ctx.lora_dropout_rng);
}

ForwardOut TransformerModel::forward(const RagSequence& input, const ForwardCtx& ctx) const {
  ForwardOut out;
  out.hidden = forward_hidden(input, ctx);
  if (!headless) out.logits = unembed_rows(out.hidden, ctx);
  return out;
}

std::vector<int> TransformerModel::greedy_decode(const RagSequence& prefix, int max_new,
                                                 int stop_token) const {
  if (prefix.length() == 0) throw SequenceLengthError("greedy_decode: empty prefix");
  if (prefix.length() >= cfg.max_seq)
    throw SequenceLengthError("greedy_decode: prefix already at max_seq");
  NoGradGuard ng;
  RagSequence seq = prefix;
  std::vector<int> out;
  for (int i = 0; i < max_new && seq.length() < cfg.max_seq; i++) {
    Tensor hidden = forward_hidden(seq);
    Tensor last = slice_rows(hidden, hidden.dim(0) - 1, hidden.dim(0));
    Tensor logits = unembed_rows(last);
    int next = argmax_row(logits.ptr(), logits.dim(1));
    if (next == stop_token) break;
    out.push_back(next);
    seq.push_token(next);
  }
  return out;
}

// ---- parameters ---------------------------------------------------------------

int64_t TransformerModel::param_count() const {
  int64_t n = 0;
  for (const auto& e : base_params().entries()) n += e.tensor.numel();
  return n;
}

ParamRegistry TransformerModel::base_params() const {
  ParamRegistry reg;
  reg.add("embed", embedding);
  for (size_t l = 0; l < layers.size(); l++) {
    std::string p = "layers." + std::to_string(l) + ".";
    reg.add(p + "attn_norm", layers[l].attn_norm);
    reg.add(p + "wq", layers[l].wq.w);
    reg.add(p + "wk", layers[l].wk.w);
    reg.add(p + "wv", layers[l].wv.w);
    reg.add(p + "wo", layers[l].wo.w);
    reg.add(p + "mlp_norm", layers[l].mlp_norm);
    reg.add(p + "w_gate", layers[l].w_gate.w);
    reg.add(p + "w_up", layers[l].w_up.w);
    reg.add(p + "w_down", layers[l].w_down.w);
  }
  if (!headless) {
    reg.add("final_norm", final_norm);
    if (!cfg.tied_unembedding) reg.add("unembed", unembedding.w);
  }
  return reg;
}

ParamRegistry TransformerModel::lora_params() const {
  ParamRegistry reg;
  auto add_linear = [&](const std::string& name, const Linear& lin) {
    if (!lin.has_lora()) return;
    reg.add(name + ".lora_a", lin.lora_a);
    reg.add(name + ".lora_b", lin.lora_b);
  };
  for (size_t l = 0; l < layers.size(); l++) {
    std::string p = "layers." + std::to_string(l) + ".";
    add_linear(p + "wq", layers[l].wq);
    add_linear(p + "wk", layers[l].wk);
    add_linear(p + "wv", layers[l].wv);
    add_linear(p + "wo", layers[l].wo);
    add_linear(p + "w_gate", layers[l].w_gate);
    add_linear(p + "w_up", layers[l].w_up);
    add_linear(p + "w_down", layers[l].w_down);
  }
  return reg;
}

void TransformerModel::freeze_base() {
  for (const auto& e : base_params().entries()) e.tensor.set_requires_grad(false);
}

void TransformerModel::add_lora(const LoraConfig& lc, uint64_t seed) {
  if (lc.rank < 1) throw ConfigError("lora: rank must be >= 1");
  if (lc.dropout < 0.0f || lc.dropout >= 1.0f) throw ConfigError("lora: dropout must be in [0,1)");
  Rng rng(derive_seed(seed, 0x10a0));
  auto wrap = [&](Linear& lin) {
    int in = lin.w.dim(0), out = lin.w.dim(1);
    lin.lora_a = Tensor::randn({in, lc.rank}, rng, 1.0f / std::sqrt(static_cast<float>(in)), true);
    lin.lora_b = Tensor::zeros({lc.rank, out}, true);
    lin.lora_scale = lc.alpha / static_cast<float>(lc.rank);
    lin.lora_dropout = lc.dropout;
  };
  for (auto& layer : layers) {
    wrap(layer.wq);
    wrap(layer.wk);
    wrap(layer.wv);
    wrap(layer.wo);
    wrap(layer.w_gate);
    wrap(layer.w_up);
    wrap(layer.w_down);
  }
}

// ---- persistence ----------------------------------------------------------------

void TransformerModel::save(const std::string& path) const {
  save_checkpoint(path, base_params());
  std::ofstream os(path + ".arch");
  if (!os) throw DataError("model save: cannot write " + path + ".arch");
  os << cfg.to_kv();
  os << "headless = " << (headless ? 1 : 0) << "\n";
}

TransformerModel TransformerModel::load(const std::string& path) {
  std::ifstream is(path + ".arch");
  if (!is) throw DataError("model load: missing sidecar " + path + ".arch");
  std::stringstream buf;
  buf << is.rdbuf();
  std::string text = buf.str();
  ArchConfig cfg = ArchConfig::from_kv(text);
  bool headless = text.find("headless = 1") != std::string::npos;
  TransformerModel m = init(cfg, 0);
  m.headless = headless;
  if (headless) {
    m.final_norm = Tensor();
    m.unembedding = Linear{};
  }
  load_checkpoint(path, m.base_params());
  return m;
}

TransformerModel TransformerModel::truncate_layers(int n) const {
  if (n < 1 || n > cfg.n_layers)
    throw ConfigError("truncate_layers: N=" + std::to_string(n) + " out of [1," +
                      std::to_string(cfg.n_layers) + "]");
  TransformerModel m;
  m.cfg = cfg;
  m.cfg.n_layers = n;
  m.headless = true;
  m.embedding = embedding.clone_detached();
  m.embedding.set_requires_grad(true);
  for (int l = 0; l < n; l++) {
    const TransformerLayer& src = layers[l];
    TransformerLayer dst;
    auto copy_linear = [](const Linear& lin) {
      Linear out;
      out.w = lin.w.clone_detached();
      out.w.set_requires_grad(true);
      return out;  // adapters are not carried over
    };
    dst.attn_norm = src.attn_norm.clone_detached();
    dst.attn_norm.set_requires_grad(true);
    dst.mlp_norm = src.mlp_norm.clone_detached();
    dst.mlp_norm.set_requires_grad(true);
    dst.wq = copy_linear(src.wq);
    dst.wk = copy_linear(src.wk);
    dst.wv = copy_linear(src.wv);
    dst.wo = copy_linear(src.wo);
    dst.w_gate = copy_linear(src.w_gate);
    dst.w_up = copy_linear(src.w_up);
    dst.w_down = copy_linear(src.w_down);
    m.layers.push_back(std::move(dst));
  }
  return m;
}

}  // namespace oscar
