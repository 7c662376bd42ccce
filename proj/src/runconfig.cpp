#include "oscar/runconfig.hpp"

#include <array>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "oscar/errors.hpp"

namespace oscar {

ArchConfig RunConfig::generator_arch(int vocab_size) const {
  ArchConfig cfg;
  cfg.n_layers = gen_layers;
  cfg.d_model = gen_d_model;
  cfg.n_heads = gen_heads;
  cfg.d_head = gen_d_model / gen_heads;
  cfg.d_ff = gen_d_ff;
  cfg.vocab_size = vocab_size;
  cfg.max_seq = gen_max_seq;
  cfg.tied_unembedding = true;
  cfg.validate();
  return cfg;
}

ArchConfig RunConfig::compressor_arch(int vocab_size) const {
  ArchConfig cfg;
  cfg.n_layers = comp_layers;
  cfg.d_model = comp_d_model;
  cfg.n_heads = comp_heads;
  cfg.d_head = comp_d_model / comp_heads;
  cfg.d_ff = comp_d_ff;
  cfg.vocab_size = vocab_size;
  cfg.max_seq = comp_max_seq;
  cfg.tied_unembedding = true;
  cfg.validate();
  return cfg;
}

void RunConfig::set_key(const std::string& key, const std::string& value) {
  auto as_int = [&] { return std::stoi(value); };
  auto as_u64 = [&] { return static_cast<uint64_t>(std::stoull(value)); };
  auto as_double = [&] { return std::stod(value); };

  if (key == "schema_version") schema_version = as_int();
  else if (key == "seed") seed = as_u64();
  else if (key == "task") task_kind = value;
  else if (key == "n_facts") corpus.n_facts = as_int();
  else if (key == "n_distractors") corpus.n_distractors = as_int();
  else if (key == "doc_len_tokens") corpus.doc_len_tokens = as_int();
  else if (key == "facts_per_doc") corpus.facts_per_doc = as_int();
  else if (key == "n_attrs") corpus.n_attrs = as_int();
  else if (key == "n_values") corpus.n_values = as_int();
  else if (key == "n_fillers") corpus.n_fillers = as_int();
  else if (key == "eval_fraction_pct") corpus.eval_fraction_pct = as_int();
  else if (key == "queries_per_train_fact") corpus.queries_per_train_fact = as_int();
  else if (key == "queries_per_eval_fact") corpus.queries_per_eval_fact = as_int();
  else if (key == "n_aug_queries") corpus.n_aug_queries = as_int();
  else if (key == "aug_context_docs") corpus.aug_context_docs = as_int();
  else if (key == "distractor_entity_rate") corpus.distractor_entity_rate = as_double();
  else if (key == "gen_layers") gen_layers = as_int();
  else if (key == "gen_d_model") gen_d_model = as_int();
  else if (key == "gen_heads") gen_heads = as_int();
  else if (key == "gen_d_ff") gen_d_ff = as_int();
  else if (key == "gen_max_seq") gen_max_seq = as_int();
  else if (key == "comp_layers") comp_layers = as_int();
  else if (key == "comp_d_model") comp_d_model = as_int();
  else if (key == "comp_heads") comp_heads = as_int();
  else if (key == "comp_d_ff") comp_d_ff = as_int();
  else if (key == "comp_max_seq") comp_max_seq = as_int();
  else if (key == "nlayers_n") nlayers_n = as_int();
  else if (key == "adapter_hidden") adapter_hidden = as_int();
  else if (key == "variant") variant = value;
  else if (key == "batch_size") train.batch_size = as_int();
  else if (key == "lr_generator") train.lr_generator = as_double();
  else if (key == "lr_cross_compressor") train.lr_cross_compressor = as_double();
  else if (key == "lr_nlayers_compressor") train.lr_nlayers_compressor = as_double();
  else if (key == "epochs") train.epochs = as_int();
  else if (key == "lambda") train.lambda = as_double();
  else if (key == "l") train.l = as_int();
  else if (key == "k") train.k = as_int();
  else if (key == "lora_rank") train.lora.rank = as_int();
  else if (key == "lora_alpha") train.lora.alpha = static_cast<float>(as_double());
  else if (key == "lora_dropout") train.lora.dropout = static_cast<float>(as_double());
  else if (key == "weight_decay") train.weight_decay = as_double();
  else if (key == "warmup_ratio") train.warmup_ratio = as_double();
  else if (key == "max_grad_norm") train.max_grad_norm = as_double();
  else if (key == "query_dependent") train.query_dependent = as_int() != 0;
  else if (key == "joint_rerank") train.joint_rerank = as_int() != 0;
  else if (key == "frozen_generator") train.frozen_generator = as_int() != 0;
  else if (key == "pretrain") pretrain = as_int();
  else if (key == "pretrain_steps") pretrain_steps = as_int();
  else if (key == "pretrain_batch") pretrain_batch = as_int();
  else if (key == "teacher_lr") teacher_lr = as_double();
  else if (key == "teacher_batch") teacher_batch = as_int();
  else if (key == "teacher_epochs") teacher_epochs = as_int();
  else if (key == "teacher_gate") teacher_gate = as_double();
  else if (key == "teacher_eval_every") teacher_eval_every = as_int();
  else if (key == "teacher_short_frac") teacher_short_frac = as_double();
  else if (key == "teacher_long_frac") teacher_long_frac = as_double();
  else if (key == "max_teacher_answer") max_teacher_answer = as_int();
  else if (key == "eval_k") eval_k = as_int();
  else if (key == "eval_max_new") eval_max_new = as_int();
  else if (key == "eval_max_queries") eval_max_queries = as_int();
  else if (key == "backbones_dir") backbones_dir = value;
  else throw ConfigError("config: unknown key '" + key + "'");
}

RunConfig RunConfig::from_text(const std::string& text) {
  RunConfig cfg;
  std::istringstream is(text);
  std::string line;
  bool saw_version = false;
  int lineno = 0;
  while (std::getline(is, line)) {
    lineno++;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    auto trim = [](std::string s) {
      size_t a = s.find_first_not_of(" \t\r");
      size_t b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config: line " + std::to_string(lineno) + " is not key = value");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key == "schema_version") saw_version = true;
    cfg.set_key(key, value);
  }
  if (!saw_version) throw ConfigError("config: missing schema_version");
  if (cfg.schema_version != 1)
    throw ConfigError("config: unsupported schema_version " + std::to_string(cfg.schema_version));
  if (cfg.task_kind != "single" && cfg.task_kind != "multi")
    throw ConfigError("config: task must be 'single' or 'multi'");
  return cfg;
}

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config: cannot open " + path);
  std::stringstream buf;
  buf << is.rdbuf();
  return from_text(buf.str());
}

void RunManifest::write(const std::string& path) const {
  nlohmann::json j{{"command", command},       {"config", config_path},
                   {"seed", seed},             {"git_describe", git_describe},
                   {"out_dir", out_dir},       {"started_at", started_at},
                   {"finished_at", finished_at}};
  std::ofstream os(path);
  if (!os) throw DataError("manifest: cannot write " + path);
  os << j.dump(1) << "\n";
}

std::string git_describe_string() {
  std::array<char, 128> buf{};
  FILE* pipe = popen("git describe --always --dirty 2>/dev/null", "r");
  if (!pipe) return "unknown";
  std::string out;
  while (fgets(buf.data(), buf.size(), pipe) != nullptr) out += buf.data();
  pclose(pipe);
  while (!out.empty() && (out.back() == '\n' || out.back() == '\r')) out.pop_back();
  return out.empty() ? "unknown" : out;
}

std::string timestamp_utc() {
  auto now = std::chrono::system_clock::now();
  std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

}  // namespace oscar
