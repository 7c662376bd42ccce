#include "oscar/costmodel.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

#include "oscar/errors.hpp"

namespace oscar {

int64_t block_matmul_params(const ArchConfig& cfg) {
  int64_t d = cfg.d_model;
  int64_t q_width = static_cast<int64_t>(cfg.n_heads) * cfg.d_head;
  int64_t kv_width = static_cast<int64_t>(cfg.kv_heads()) * cfg.d_head;
  int64_t attn = d * q_width + 2 * d * kv_width + q_width * d;
  int64_t mlp = 3 * d * cfg.d_ff;
  return cfg.n_layers * (attn + mlp);
}

int64_t total_param_count(const ArchConfig& cfg, bool headless) {
  int64_t d = cfg.d_model;
  int64_t n = static_cast<int64_t>(cfg.vocab_size) * d;  // embedding
  n += block_matmul_params(cfg);
  n += cfg.n_layers * 2 * d;  // attn/mlp norm gains
  if (!headless) {
    n += d;  // final norm
    if (!cfg.tied_unembedding) n += static_cast<int64_t>(cfg.vocab_size) * d;
  }
  return n;
}

double forward_flops(const ArchConfig& cfg, int64_t prefill_len, int64_t gen_len) {
  if (prefill_len < 0 || gen_len < 0) throw ConfigError("forward_flops: negative length");
  int64_t L = prefill_len + gen_len;
  if (L == 0) return 0.0;
  double tokens = static_cast<double>(L);
  double flops = 2.0 * static_cast<double>(block_matmul_params(cfg)) * tokens;
  flops += 2.0 * cfg.n_layers * tokens * tokens * cfg.d_model;
  flops += 2.0 * static_cast<double>(gen_len) * cfg.vocab_size * cfg.d_model;
  return flops;
}

FlopsReport pipeline_flops(const CostScenario& s) {
  s.generator.validate();
  int seps = s.k > 1 ? s.k - 1 : 0;

  auto inference_for = [&](bool compressed) {
    int64_t background = compressed ? static_cast<int64_t>(s.k) * s.l
                                    : static_cast<int64_t>(s.k) * s.doc_len;
    int64_t prompt = s.query_len + background + seps;
    return forward_flops(s.generator, prompt, s.answer_len);
  };

  FlopsReport rep;
  double reference_total = inference_for(false);

  if (!s.compressor.has_value()) {
    rep.inference_flops = reference_total;
    rep.compression_flops = 0.0;
    rep.total_flops = rep.inference_flops;
    rep.speedup = 1.0;
    return rep;
  }

  const CompressorCost& cc = *s.compressor;
  rep.inference_flops = inference_for(true);

  int64_t per_doc = s.doc_len + s.l + (cc.rr_token ? 1 : 0) +
                    (s.include_query_in_compression ? s.query_len : 0);
  ArchConfig comp_cfg;
  if (cc.kind == CompressorCost::Kind::kNLayers) {
    if (cc.n_layers < 1 || cc.n_layers > s.generator.n_layers)
      throw ConfigError("pipeline_flops: compressor layer count out of range");
    comp_cfg = s.generator;
    comp_cfg.n_layers = cc.n_layers;
  } else {
    comp_cfg = cc.arch;
    comp_cfg.validate();
  }
  rep.compression_flops = s.k * forward_flops(comp_cfg, per_doc, 0);
  if (cc.kind == CompressorCost::Kind::kCrossModel && cc.adapter_hidden > 0) {
    double adapter = 2.0 * (static_cast<double>(comp_cfg.d_model) * cc.adapter_hidden +
                            static_cast<double>(cc.adapter_hidden) * s.generator.d_model);
    rep.compression_flops += static_cast<double>(s.k) * s.l * adapter;
  }

  rep.total_flops = rep.inference_flops + rep.compression_flops;
  rep.speedup = reference_total / rep.total_flops;
  return rep;
}

std::string sweep_csv(const std::vector<CostScenario>& scenarios) {
  std::ostringstream os;
  os << "generator,compressor,k,l,inference_tflops,compression_tflops,total_tflops,speedup\n";
  os.precision(4);
  os.setf(std::ios::fixed);
  for (const auto& s : scenarios) {
    FlopsReport r = pipeline_flops(s);
    os << s.label << "," << (s.compressor.has_value() ? s.compressor->label : "none") << ","
       << s.k << "," << (s.compressor.has_value() ? s.l : 0) << ","
       << r.inference_flops / 1e12 << "," << r.compression_flops / 1e12 << ","
       << r.total_flops / 1e12 << "," << r.speedup << "\n";
  }
  return os.str();
}

ArchConfig load_backbone_json(const std::string& path, std::string* name) {
  std::ifstream is(path);
  if (!is) throw DataError("backbone config: cannot open " + path);
  nlohmann::json j = nlohmann::json::parse(is);
  ArchConfig cfg;
  cfg.n_layers = j.at("n_layers");
  cfg.d_model = j.at("d_model");
  cfg.n_heads = j.at("n_heads");
  cfg.d_head = j.at("d_head");
  cfg.n_kv_heads = j.value("n_kv_heads", 0);
  cfg.d_ff = j.at("d_ff");
  cfg.vocab_size = j.at("vocab_size");
  cfg.max_seq = j.value("max_seq", 8192);
  cfg.tied_unembedding = j.value("tied_unembedding", false);
  cfg.validate();
  if (name != nullptr) *name = j.value("name", path);
  return cfg;
}

}  // namespace oscar
