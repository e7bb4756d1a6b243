// kal: command-line front end for knowledge-driven active learning experiments.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "kal/data.hpp"
#include "kal/harness.hpp"
#include "kal/knowledge.hpp"
#include "kal/lowering.hpp"
#include "kal/model.hpp"

namespace {

constexpr const char* kVersion = "0.1.0";

enum Exit { kOk = 0, kConfigError = 1, kDataError = 2, kRuntimeError = 3 };

using namespace kal;
using nlohmann::json;

struct ExperimentFlags {
  std::string dataset = "xor";
  std::string strategy = "kal";
  std::string preset = "table1";
  std::string rules;
  std::string data;
  std::string tnorm = "product";
  std::string generator = "oneminus";
  std::optional<std::size_t> n, p, q;
  std::size_t folds = 10;
  std::size_t fold_limit = 0;
  std::size_t seeds = 1;
  std::uint64_t seed = 0;
  int mc_passes = 10;
  std::size_t diversity_cap = 0;
  bool no_diversity = false;
  bool no_uncertainty = false;
  bool xai = false;
  double xai_fraction = 0.6;
  std::string dump_xai;
  std::string out = "kal_out";
  std::size_t jobs = 1;
  std::size_t xor_pool = 100000;
  std::optional<int> epochs;
  std::optional<double> lr;
  bool cold_start = false;
  bool save_models = false;
};

void add_experiment_flags(CLI::App* cmd, ExperimentFlags& f) {
  cmd->add_option("--dataset", f.dataset, "xor, iris or insurance")->check(CLI::IsMember({"xor", "iris", "insurance"}));
  cmd->add_option("--strategy", f.strategy, "selection strategy id");
  cmd->add_option("--preset", f.preset, "budget preset")->check(CLI::IsMember({"table1", "appendix"}));
  cmd->add_option("--rules", f.rules, "rule file replacing the bundled knowledge");
  cmd->add_option("--data", f.data, "dataset CSV (iris or insurance)");
  cmd->add_option("--tnorm", f.tnorm, "product, lukasiewicz or goedel");
  cmd->add_option("--generator", f.generator, "oneminus or neglog");
  cmd->add_option("--n", f.n, "initial labels");
  cmd->add_option("--p", f.p, "batch size");
  cmd->add_option("--q", f.q, "iterations");
  cmd->add_option("--folds", f.folds, "cross-validation folds");
  cmd->add_option("--fold-limit", f.fold_limit, "run only the first folds (0 = all)");
  cmd->add_option("--seeds", f.seeds, "number of seeds, starting at --seed");
  cmd->add_option("--seed", f.seed, "first seed");
  cmd->add_option("--mc-passes", f.mc_passes, "Monte-Carlo dropout passes");
  cmd->add_option("--diversity-cap", f.diversity_cap, "max samples per rule group (0 = p/2)");
  cmd->add_flag("--no-diversity", f.no_diversity, "disable the per-rule diversity cap");
  cmd->add_flag("--no-uncertainty-rule", f.no_uncertainty, "do not add the uncertainty rule");
  cmd->add_flag("--xai", f.xai, "use rules extracted from a surrogate tree (kal_xai)");
  cmd->add_option("--xai-fraction", f.xai_fraction, "share of the batch chosen by KAL under --xai");
  cmd->add_option("--dump-xai-rules", f.dump_xai, "directory for extracted rule files");
  cmd->add_option("--out", f.out, "output directory");
  cmd->add_option("--jobs", f.jobs, "folds run concurrently");
  cmd->add_option("--xor-pool", f.xor_pool, "XOR dataset size");
  cmd->add_option("--epochs", f.epochs, "training epochs per iteration");
  cmd->add_option("--lr", f.lr, "learning rate");
  cmd->add_flag("--cold-start", f.cold_start, "re-initialise the network every iteration");
  cmd->add_flag("--save-models", f.save_models, "write final model snapshots");
}

harness::ExperimentConfig resolve(const ExperimentFlags& f) {
  auto strategy = f.xai ? strategies::StrategyId::KalXai : strategies::strategy_from_string(f.strategy);
  auto cfg = harness::make_config(f.dataset, strategy, harness::preset_from_string(f.preset));
  if (f.n) cfg.n = *f.n;
  if (f.p) cfg.p = *f.p;
  if (f.q) cfg.q = *f.q;
  if (f.epochs) cfg.train.epochs = *f.epochs;
  if (f.lr) cfg.train.learning_rate = *f.lr;
  cfg.train.warm_start = !f.cold_start;
  cfg.folds = f.folds;
  cfg.fold_limit = f.fold_limit;
  cfg.seed = f.seed;
  cfg.jobs = f.jobs;
  cfg.xor_pool = f.xor_pool;
  cfg.data_path = f.data;
  if (!f.rules.empty()) cfg.rules_text = data::read_file(f.rules);
  cfg.tnorm = lowering::tnorm_from_string(f.tnorm);
  cfg.generator = lowering::generator_from_string(f.generator);
  cfg.mc_passes = f.mc_passes;
  cfg.diversity_cap = f.diversity_cap;
  cfg.diversity = !f.no_diversity;
  cfg.uncertainty_rule = !f.no_uncertainty;
  cfg.xai.kal_fraction = f.xai_fraction;
  cfg.dump_xai_dir = f.dump_xai;
  cfg.keep_models = f.save_models;
  return cfg;
}

std::vector<std::uint64_t> seed_list(const ExperimentFlags& f) {
  if (f.seeds == 0) throw ContractError("--seeds must be positive");
  std::vector<std::uint64_t> s;
  for (std::size_t i = 0; i < f.seeds; ++i) s.push_back(f.seed + i);
  return s;
}

std::string fnv1a(std::string_view bytes) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void write_manifest(const harness::ExperimentConfig& cfg, const std::vector<std::uint64_t>& seeds,
                    const std::filesystem::path& out, const std::string& command) {
  json digests = json::object();
  if (!cfg.data_path.empty()) digests["data"] = fnv1a(data::read_file(cfg.data_path));
  auto ds = harness::load_dataset(cfg);
  digests["rules"] = fnv1a(cfg.rules_text.empty() ? ds.knowledge_text : cfg.rules_text);
  json m = {{"tool", "kal"},
            {"version", kVersion},
            {"command", command},
            {"config", harness::config_json(cfg)},
            {"seeds", seeds},
            {"output_dir", out.string()},
            {"digests", digests}};
  if (!cfg.data_path.empty()) m["config"]["data"] = cfg.data_path.string();
  if (!cfg.rules_text.empty()) m["config"]["rules_text"] = cfg.rules_text;
  std::filesystem::create_directories(out);
  std::ofstream(out / "manifest.json") << m.dump(2) << '\n';
}

int cmd_run(const ExperimentFlags& f) {
  auto cfg = resolve(f);
  auto seeds = seed_list(f);
  harness::validate(cfg, harness::load_dataset(cfg));
  std::filesystem::path out = f.out;
  write_manifest(cfg, seeds, out, "run");
  auto result = harness::run_seeds(cfg, seeds);
  harness::write_outputs(result, out);
  if (f.save_models) {
    std::filesystem::create_directories(out / "models");
    for (const auto& fold : result.folds) {
      if (fold.final_model) {
        model::save_snapshot(*fold.final_model, out / "models" /
                                                     ("seed" + std::to_string(fold.seed / 1000003ULL) + "_fold" +
                                                      std::to_string(fold.fold) + ".kalm"));
      }
    }
  }
  std::printf("%s %s %s: AUBC %.4f +- %.4f over %zu folds, selection/random time ratio %.2f\n", cfg.dataset.c_str(),
              std::string(strategies::to_string(cfg.strategy)).c_str(), result.metric.c_str(), result.mean_aubc,
              result.std_aubc, result.folds.size(), result.time_ratio);
  return kOk;
}

int cmd_ablate(const ExperimentFlags& f, const std::vector<double>& fractions) {
  auto cfg = resolve(f);
  cfg.strategy = strategies::StrategyId::Kal;
  auto seeds = seed_list(f);
  harness::validate(cfg, harness::load_dataset(cfg));
  std::filesystem::path out = f.out;
  write_manifest(cfg, seeds, out, "ablate");
  auto rows = harness::knowledge_fraction_ablation(cfg, fractions, seeds);
  json table = json::array();
  for (const auto& r : rows) {
    std::printf("knowledge %5.1f%% (%zu rules): AUBC %.4f +- %.4f\n", r.fraction * 100.0, r.rules, r.result.mean_aubc,
                r.result.std_aubc);
    table.push_back({{"fraction", r.fraction},
                     {"rules", r.rules},
                     {"aubc_mean", r.result.mean_aubc},
                     {"aubc_std", r.result.std_aubc}});
  }
  std::ofstream(out / "ablation.json") << table.dump(2) << '\n';
  return kOk;
}

Schema schema_for(const std::string& dataset, std::optional<std::size_t> input_dim,
                  std::optional<std::size_t> output_dim, const std::string& task) {
  if (input_dim || output_dim) {
    if (!input_dim || !output_dim) throw ContractError("--input-dim and --output-dim go together");
    return Schema{*input_dim, *output_dim, task_kind_from_string(task)};
  }
  if (dataset == "xor") return Schema{2, 1, TaskKind::Binary};
  if (dataset == "iris") return Schema{4, 3, TaskKind::Multiclass};
  if (dataset == "insurance") return Schema{6, 1, TaskKind::Regression};
  throw ContractError("unknown dataset '" + dataset + "'");
}

std::string_view bundled_rules(const std::string& dataset) {
  if (dataset == "xor") return data::xor_knowledge();
  if (dataset == "iris") return data::iris_knowledge();
  return data::insurance_knowledge();
}

std::vector<double> parse_vector(const std::string& text) {
  std::vector<double> v;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      v.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ContractError("invalid number '" + item + "' in vector '" + text + "'");
    }
  }
  return v;
}

struct CompileFlags {
  std::string rules;
  std::string dataset = "xor";
  std::optional<std::size_t> input_dim, output_dim;
  std::string task = "binary";
  std::string tnorm = "product";
  std::string generator = "oneminus";
  std::string x, f;
  bool uncertainty = false;
};

int cmd_compile(const CompileFlags& c) {
  auto schema = schema_for(c.dataset, c.input_dim, c.output_dim, c.task);
  std::string text = c.rules.empty() ? std::string(bundled_rules(c.dataset)) : data::read_file(c.rules);
  auto kb = knowledge::parse_knowledge(text, schema);
  if (c.uncertainty) kb = knowledge::add_uncertainty_rule(kb);
  lowering::CompiledKnowledge ck(kb, lowering::tnorm_from_string(c.tnorm), lowering::generator_from_string(c.generator));
  std::optional<std::vector<double>> x, f;
  if (!c.x.empty() || !c.f.empty()) {
    if (c.x.empty() || c.f.empty()) throw ContractError("--x and --f go together");
    x = parse_vector(c.x);
    f = parse_vector(c.f);
    if (x->size() != schema.input_dim || f->size() != schema.output_dim) {
      throw ContractError("sample vector sizes do not match the schema");
    }
  }
  std::printf("# tnorm %s, generator %s\n", c.tnorm.c_str(), c.generator.c_str());
  for (const auto& rule : ck.rules()) {
    std::printf("rule %s\n", rule.id().c_str());
    for (const auto& line : rule.closed_form()) std::printf("  %s\n", line.c_str());
    if (x) std::printf("  violation = %.17g\n", rule.violation(*x, *f));
  }
  return kOk;
}

Eigen::MatrixXd read_numeric_csv(const std::filesystem::path& path, std::size_t columns) {
  std::string text = data::read_file(path);
  std::stringstream ss(text);
  std::string line;
  std::vector<std::vector<double>> rows;
  std::size_t line_no = 0;
  while (std::getline(ss, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line_no == 1 && line.find_first_of("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ_") != std::string::npos) {
      continue;  // header
    }
    std::vector<double> v;
    try {
      v = parse_vector(line);
    } catch (const ContractError& e) {
      throw data::DataError(e.what(), line_no);
    }
    if (v.size() < columns) throw data::DataError("expected at least " + std::to_string(columns) + " columns", line_no);
    v.resize(columns);
    rows.push_back(std::move(v));
  }
  if (rows.empty()) throw data::DataError("empty CSV: " + path.string());
  Eigen::MatrixXd X(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(columns));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < columns; ++j) X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  }
  return X;
}

struct AuditFlags {
  std::string model;
  std::string reference;
  std::string rules;
  std::string dataset = "xor";
  std::string test;
  std::string tnorm = "product";
  std::string generator = "oneminus";
  std::string out;
};

Eigen::MatrixXd audit_inputs(const AuditFlags& a, const model::Mlp& net) {
  if (a.test.empty()) throw ContractError("--test is required");
  if (a.dataset == "iris") {
    try {
      return data::load_iris(a.test).X;
    } catch (const data::DataError&) {
    }
  }
  if (a.dataset == "insurance") {
    try {
      return data::load_insurance(a.test).X;
    } catch (const data::DataError&) {
    }
  }
  return read_numeric_csv(a.test, net.input_dim());
}

int cmd_audit(const AuditFlags& a) {
  model::Mlp net = model::load_snapshot(a.model);
  Schema schema{net.input_dim(), net.output_dim(), net.task()};
  std::string text = a.rules.empty() ? std::string(bundled_rules(a.dataset)) : data::read_file(a.rules);
  auto kb = knowledge::parse_knowledge(text, schema);
  auto X = audit_inputs(a, net);
  auto tn = lowering::tnorm_from_string(a.tnorm);
  auto gen = lowering::generator_from_string(a.generator);
  std::optional<double> ref;
  if (!a.reference.empty()) {
    model::Mlp other = model::load_snapshot(a.reference);
    if (other.input_dim() != net.input_dim() || other.output_dim() != net.output_dim() || other.task() != net.task()) {
      throw ContractError("reference snapshot does not match the audited model's schema");
    }
    ref = harness::knowledge_audit(other, kb, X, tn, gen).total;
  }
  auto rep = harness::knowledge_audit(net, kb, X, tn, gen, ref);
  json per_rule = json::object();
  for (std::size_t i = 0; i < rep.rule_ids.size(); ++i) {
    per_rule[rep.rule_ids[i]] = rep.per_rule[i];
    std::printf("%-16s %.6f\n", rep.rule_ids[i].c_str(), rep.per_rule[i]);
  }
  std::printf("%-16s %.6f\n", "total", rep.total);
  json j = {{"samples", X.rows()}, {"per_rule", per_rule}, {"total", rep.total}};
  if (rep.percent_increase) {
    std::printf("increase vs reference: %+.2f%%\n", *rep.percent_increase);
    j["reference_total"] = *rep.reference_total;
    j["percent_increase"] = *rep.percent_increase;
  }
  if (!a.out.empty()) std::ofstream(a.out) << j.dump(2) << '\n';
  return kOk;
}

struct GenerateFlags {
  std::string dataset = "xor";
  std::size_t n = 1000;
  std::uint64_t seed = 0;
  std::string out;
};

int cmd_generate(const GenerateFlags& g) {
  std::string text;
  if (g.dataset == "xor") {
    auto ds = data::make_xor(g.n, g.seed);
    std::ostringstream os;
    os << "x1,x2,y\n";
    for (Eigen::Index i = 0; i < ds.X.rows(); ++i) {
      os << knowledge::format_real(ds.X(i, 0)) << ',' << knowledge::format_real(ds.X(i, 1)) << ','
         << ds.labels[static_cast<std::size_t>(i)] << '\n';
    }
    text = os.str();
  } else if (g.dataset == "insurance") {
    text = data::insurance_csv(data::make_insurance_synthetic(g.n, g.seed));
  } else {
    throw ContractError("generate supports xor and insurance");
  }
  if (g.out.empty()) {
    std::cout << text;
  } else {
    std::ofstream(g.out) << text;
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Knowledge-driven active learning experiments"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  ExperimentFlags run_flags, ablate_flags;
  auto* run = app.add_subcommand("run", "run an active-learning experiment");
  add_experiment_flags(run, run_flags);

  auto* ablate = app.add_subcommand("ablate", "KAL with growing fractions of the knowledge base");
  add_experiment_flags(ablate, ablate_flags);
  std::vector<double> fractions{0.0, 0.25, 0.5, 0.75, 1.0};
  ablate->add_option("--fractions", fractions, "knowledge fractions")->delimiter(',');

  CompileFlags compile_flags;
  auto* compile = app.add_subcommand("compile", "print the lowered form of each rule");
  compile->add_option("rules,--rules", compile_flags.rules, "rule file (default: bundled rules of --dataset)");
  compile->add_option("--dataset", compile_flags.dataset, "schema and bundled rules")
      ->check(CLI::IsMember({"xor", "iris", "insurance"}));
  compile->add_option("--input-dim", compile_flags.input_dim);
  compile->add_option("--output-dim", compile_flags.output_dim);
  compile->add_option("--task", compile_flags.task, "binary, multiclass, multilabel or regression");
  compile->add_option("--tnorm", compile_flags.tnorm);
  compile->add_option("--generator", compile_flags.generator);
  compile->add_option("--x", compile_flags.x, "input vector, comma separated");
  compile->add_option("--f", compile_flags.f, "output vector, comma separated");
  compile->add_flag("--uncertainty-rule", compile_flags.uncertainty, "append the uncertainty rule");

  AuditFlags audit_flags;
  auto* audit = app.add_subcommand("audit", "sum rule violations of a model on a test set");
  audit->add_option("--model", audit_flags.model, "model snapshot")->required();
  audit->add_option("--reference", audit_flags.reference, "reference snapshot for the percentage increase");
  audit->add_option("--rules", audit_flags.rules, "rule file");
  audit->add_option("--dataset", audit_flags.dataset)->check(CLI::IsMember({"xor", "iris", "insurance"}));
  audit->add_option("--test", audit_flags.test, "test CSV")->required();
  audit->add_option("--tnorm", audit_flags.tnorm);
  audit->add_option("--generator", audit_flags.generator);
  audit->add_option("--out", audit_flags.out, "JSON report path");

  GenerateFlags gen_flags;
  auto* generate = app.add_subcommand("generate", "write a synthetic dataset as CSV");
  generate->add_option("--dataset", gen_flags.dataset)->check(CLI::IsMember({"xor", "insurance"}));
  generate->add_option("--n", gen_flags.n);
  generate->add_option("--seed", gen_flags.seed);
  generate->add_option("--out", gen_flags.out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (*run) return cmd_run(run_flags);
    if (*ablate) return cmd_ablate(ablate_flags, fractions);
    if (*compile) return cmd_compile(compile_flags);
    if (*audit) return cmd_audit(audit_flags);
    if (*generate) return cmd_generate(gen_flags);
  } catch (const data::DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kDataError;
  } catch (const knowledge::KnowledgeError& e) {
    std::fprintf(stderr, "rule error: %s\n", e.what());
    return kConfigError;
  } catch (const lowering::UnsupportedLowering& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfigError;
  } catch (const NotApplicableError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfigError;
  } catch (const ContractError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfigError;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "runtime error: %s\n", e.what());
    return kRuntimeError;
  }
  return kOk;
}
