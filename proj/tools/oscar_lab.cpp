// oscar_lab: data generation, training, evaluation, cost analysis and
// embedding probes behind one command-line entry point.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "oscar/costmodel.hpp"
#include "oscar/errors.hpp"
#include "oscar/harness.hpp"
#include "oscar/runconfig.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace oscar;

namespace {

struct CommonArgs {
  std::string config_path;
  std::string out_dir;
  std::string variant;
  int64_t seed_override = -1;
  std::vector<std::string> sets;
};

RunConfig load_config(const CommonArgs& args) {
  RunConfig cfg = RunConfig::from_file(args.config_path);
  for (const auto& kv : args.sets) {
    auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got " + kv);
    cfg.set_key(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (args.seed_override >= 0) cfg.seed = static_cast<uint64_t>(args.seed_override);
  return cfg;
}

void finish_manifest(const CommonArgs& args, const RunConfig& cfg, const std::string& command,
                     const std::string& started) {
  RunManifest m;
  m.command = command;
  m.config_path = args.config_path;
  m.seed = cfg.seed;
  m.git_describe = git_describe_string();
  m.out_dir = args.out_dir;
  m.started_at = started;
  m.finished_at = timestamp_utc();
  m.write(args.out_dir + "/manifest_" + command + ".json");
}

VariantSpec parse_variant(const std::string& name, const RunConfig& cfg) {
  VariantSpec v;
  v.name = name;
  v.l = cfg.train.l;
  v.query_dependent = cfg.train.query_dependent;
  v.joint_rerank = cfg.train.joint_rerank;
  v.frozen_generator = cfg.train.frozen_generator;
  v.pretrain = cfg.pretrain != 0;
  v.n = cfg.nlayers_n;
  v.nlayers = false;
  v.seed = cfg.seed;

  std::string rest = name;
  std::vector<std::string> parts;
  size_t pos;
  while ((pos = rest.find('-')) != std::string::npos) {
    parts.push_back(rest.substr(0, pos));
    rest = rest.substr(pos + 1);
  }
  parts.push_back(rest);
  for (const auto& p : parts) {
    if (p == "cross") v.nlayers = false;
    else if (p.rfind("nlayers", 0) == 0) {
      v.nlayers = true;
      if (p.size() > 7) v.n = std::stoi(p.substr(7));
    } else if (p.size() > 1 && p[0] == 'l' && std::isdigit(static_cast<unsigned char>(p[1]))) {
      v.l = std::stoi(p.substr(1));
    } else if (p == "qi") v.query_dependent = false;
    else if (p == "qd") v.query_dependent = true;
    else if (p == "joint") v.joint_rerank = true;
    else if (p == "frozen") v.frozen_generator = true;
    else if (p == "nopretrain") v.pretrain = false;
    else if (p.rfind("seed", 0) == 0) v.seed = std::stoull(p.substr(4));
    else throw ConfigError("train: unknown variant part '" + p + "' in " + name);
  }
  return v;
}

int cmd_gen_data(const CommonArgs& args) {
  std::string started = timestamp_utc();
  RunConfig cfg = load_config(args);
  CorpusSpec spec = cfg.corpus;
  spec.seed = cfg.seed;
  SyntheticTask task = gen_corpus(spec);
  fs::create_directories(args.out_dir);
  Workspace ws{args.out_dir};
  task.save(ws.data_dir());
  std::cout << "corpus: " << task.chunks.size() << " chunks, " << task.facts.size()
            << " facts, " << task.train_queries.size() << " train / "
            << task.eval_queries.size() << " eval queries\n"
            << "vocab: " << task.tokenizer.vocab_size() << "\n"
            << "measured top-5 recall: " << task.measured_top5_recall << "\n";
  finish_manifest(args, cfg, "gen-data", started);
  return 0;
}

int cmd_teacher(const CommonArgs& args) {
  std::string started = timestamp_utc();
  RunConfig cfg = load_config(args);
  Workspace ws{args.out_dir};
  LoadedTask lt = load_task(ws.data_dir());

  TeacherResult tr = train_teacher(cfg, lt.task, *lt.index, true);
  std::cout << "teacher: " << tr.curve.size() << " steps, sampled train quality "
            << tr.gate_accuracy << "\n";
  tr.model.save(ws.teacher_path());
  save_loss_curve(args.out_dir + "/teacher_curve.csv", tr.curve);

  auto retrieve = make_retrieval(lt.task, *lt.index, cfg.train.k);
  auto oracle = make_score_oracle(lt.task, *lt.index);
  auto set = generate_teacher_set(tr.model, lt.task.tokenizer, lt.tmpl, lt.task.train_queries,
                                  lt.task, retrieve, cfg.train.k, oracle,
                                  cfg.max_teacher_answer);
  double quality = teacher_set_quality(set, lt.task, lt.task.tokenizer);
  std::cout << "teacher set: " << set.size() << " examples, gold-containment " << quality
            << "\n";
  save_distill_set(ws.distill_path(), set);
  json q{{"teacher_quality", quality}, {"gate", cfg.teacher_gate},
         {"train_steps", tr.curve.size()}};
  std::ofstream(args.out_dir + "/teacher_quality.json") << q.dump(1) << "\n";
  if (quality < cfg.teacher_gate) {
    std::cerr << "{\"error\": \"teacher quality " << quality << " below gate "
              << cfg.teacher_gate << "; distillation would start from a weak teacher\"}\n";
    return 2;
  }
  finish_manifest(args, cfg, "teacher", started);
  return 0;
}

int cmd_train(const CommonArgs& args) {
  std::string started = timestamp_utc();
  RunConfig cfg = load_config(args);
  Workspace ws{args.out_dir};
  LoadedTask lt = load_task(ws.data_dir());
  std::string vname = args.variant.empty() ? cfg.variant : args.variant;
  VariantSpec variant = parse_variant(vname, cfg);

  TransformerModel base = TransformerModel::load(ws.teacher_path());
  auto distill_set = load_distill_set(ws.distill_path());
  StudentResult sr = train_student(cfg, lt.task, base, ws.teacher_path(), distill_set, variant,
                                   true);
  std::string dir = ws.student_dir(variant.name);
  save_student(dir, sr.student.generator, sr.student.compressor, sr.student.meta);
  if (!sr.pretrain_curve.empty())
    save_loss_curve(dir + "/pretrain_curve.csv", sr.pretrain_curve);
  save_loss_curve(dir + "/distill_curve.csv", sr.distill_curve);
  std::cout << "student " << variant.name << ": " << sr.distill_curve.size()
            << " distillation steps, final loss "
            << (sr.distill_curve.empty() ? 0.0 : sr.distill_curve.back().loss) << "\n";
  finish_manifest(args, cfg, "train", started);
  return 0;
}

int cmd_eval(const CommonArgs& args) {
  std::string started = timestamp_utc();
  RunConfig cfg = load_config(args);
  Workspace ws{args.out_dir};
  LoadedTask lt = load_task(ws.data_dir());

  std::vector<std::string> variants;
  if (fs::exists(ws.students_dir()))
    for (const auto& e : fs::directory_iterator(ws.students_dir()))
      if (e.is_directory()) variants.push_back(e.path().filename().string());
  std::sort(variants.begin(), variants.end());

  EvalOptions opts;
  opts.k = cfg.eval_k;
  opts.max_new = cfg.eval_max_new;
  opts.max_queries = cfg.eval_max_queries;
  opts.seed = cfg.seed;
  EvalReport report = run_ablation_suite(ws, lt, variants, opts);
  std::ofstream(args.out_dir + "/eval_report.csv") << report.to_csv();
  std::ofstream(args.out_dir + "/eval_report.json") << report.to_json();
  std::cout << report.to_csv();
  finish_manifest(args, cfg, "eval", started);
  return 0;
}

CostScenario make_scenario(const json& row, const std::string& backbones_dir, int k, int l) {
  CostScenario s;
  s.k = k;
  s.l = l;
  std::string gen = row.at("generator");
  std::string gen_name;
  s.generator = load_backbone_json(backbones_dir + "/" + gen + ".json", &gen_name);
  s.label = gen_name;
  std::string comp = row.value("compressor", "none");
  if (comp == "none") return s;
  CompressorCost cc;
  cc.label = row.value("label", comp);
  if (comp.rfind("nlayers:", 0) == 0) {
    cc.kind = CompressorCost::Kind::kNLayers;
    cc.n_layers = std::stoi(comp.substr(8));
  } else {
    cc.kind = CompressorCost::Kind::kCrossModel;
    cc.arch = load_backbone_json(backbones_dir + "/" + comp + ".json");
    cc.adapter_hidden = row.value("adapter_hidden", 0);
  }
  s.compressor = cc;
  return s;
}

int cmd_flops(const CommonArgs& args) {
  std::string started = timestamp_utc();
  RunConfig cfg = load_config(args);
  fs::create_directories(args.out_dir);
  std::ifstream sf(cfg.backbones_dir + "/../flops_scenarios.json");
  if (!sf) throw DataError("flops: cannot open scenarios next to " + cfg.backbones_dir);
  json scen = json::parse(sf);

  std::vector<CostScenario> table;
  for (const auto& row : scen.at("table1"))
    table.push_back(make_scenario(row, cfg.backbones_dir, 10, 8));
  std::string csv = sweep_csv(table);
  std::ofstream(args.out_dir + "/table1.csv") << csv;
  std::cout << csv;

  std::vector<CostScenario> docs;
  const json& ds = scen.at("doc_sweep");
  for (int k : ds.at("k_values").get<std::vector<int>>()) {
    json none{{"generator", ds.at("generator")}, {"compressor", "none"}};
    docs.push_back(make_scenario(none, cfg.backbones_dir, k, 8));
    docs.push_back(make_scenario(ds, cfg.backbones_dir, k, 8));
  }
  std::ofstream(args.out_dir + "/sweep_docs.csv") << sweep_csv(docs);

  std::vector<CostScenario> layers;
  const json& ls = scen.at("layer_sweep");
  for (int n : ls.at("n_values").get<std::vector<int>>()) {
    json row{{"generator", ls.at("generator")},
             {"compressor", "nlayers:" + std::to_string(n)},
             {"label", "nlayers-" + std::to_string(n)}};
    layers.push_back(make_scenario(row, cfg.backbones_dir, 10, 8));
  }
  std::ofstream(args.out_dir + "/sweep_layers.csv") << sweep_csv(layers);
  finish_manifest(args, cfg, "flops", started);
  return 0;
}

int cmd_probe(const CommonArgs& args) {
  std::string started = timestamp_utc();
  RunConfig cfg = load_config(args);
  Workspace ws{args.out_dir};
  LoadedTask lt = load_task(ws.data_dir());
  std::string vname = args.variant.empty() ? cfg.variant : args.variant;
  Student st = load_student(ws.student_dir(vname));

  ProbeStats stats = run_needle_probes(st, lt.task, 50);
  fs::create_directories(args.out_dir + "/probes");
  for (size_t i = 0; i < stats.results.size(); i++) {
    std::ofstream(args.out_dir + "/probes/probe_" + std::to_string(i) + ".csv")
        << stats.results[i].to_csv();
  }
  json j{{"probes", stats.probes},
         {"needle_hit_frac", stats.needle_hit_frac},
         {"attrib_mem_frac", stats.attrib_mem_frac}};
  std::ofstream(args.out_dir + "/probes/summary.json") << j.dump(1) << "\n";
  std::cout << "probes: " << stats.probes << ", needle argmax within window: "
            << stats.needle_hit_frac << ", gold in top-10 attribution (mem frac): "
            << stats.attrib_mem_frac << "\n";
  finish_manifest(args, cfg, "probe", started);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale online soft compression lab"};
  app.require_subcommand(1);

  CommonArgs args;
  auto add_common = [&](CLI::App* sub, bool with_variant) {
    sub->add_option("--config", args.config_path, "key = value run configuration")->required();
    sub->add_option("--out", args.out_dir, "output directory")->required();
    sub->add_option("--seed", args.seed_override, "override the config seed");
    sub->add_option("--set", args.sets, "extra config overrides (key=value)");
    if (with_variant) sub->add_option("--variant", args.variant, "student variant name");
  };

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic corpus and task");
  add_common(gen, false);
  auto* teach = app.add_subcommand("teacher", "fine-tune the teacher and label the training set");
  add_common(teach, false);
  auto* train = app.add_subcommand("train", "train a compression student variant");
  add_common(train, true);
  auto* ev = app.add_subcommand("eval", "evaluate teacher and student checkpoints");
  add_common(ev, false);
  auto* fl = app.add_subcommand("flops", "analytic cost model tables");
  add_common(fl, false);
  auto* pr = app.add_subcommand("probe", "needle and logit-attribution probes");
  add_common(pr, true);

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(args);
    if (teach->parsed()) return cmd_teacher(args);
    if (train->parsed()) return cmd_train(args);
    if (ev->parsed()) return cmd_eval(args);
    if (fl->parsed()) return cmd_flops(args);
    if (pr->parsed()) return cmd_probe(args);
  } catch (const std::exception& e) {
    std::cerr << "{\"error\": \"" << e.what() << "\"}\n";
    return 1;
  }
  return 0;
}
