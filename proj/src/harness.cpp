#include "kal/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>


namespace kal::harness {

using Eigen::Index;
using Eigen::MatrixXd;
using strategies::StrategyId;

Preset preset_from_string(std::string_view text) {
  if (text == "table1") return Preset::Table1;
  if (text == "appendix") return Preset::Appendix;
  throw ContractError("unknown preset '" + std::string(text) + "' (expected table1 or appendix)");
}

std::string_view to_string(Preset p) { return p == Preset::Table1 ? "table1" : "appendix"; }

ExperimentConfig make_config(const std::string& dataset, StrategyId strategy, Preset preset) {
  ExperimentConfig cfg;
  cfg.dataset = dataset;
  cfg.strategy = strategy;
  cfg.preset = preset;
  const bool appendix = preset == Preset::Appendix;
  if (dataset == "xor") {
    cfg.n = 10;
    cfg.p = 5;
    cfg.q = appendix ? 78 : 18;
    cfg.train.epochs = 250;
    cfg.train.learning_rate = 1e-3;
  } else if (dataset == "iris") {
    cfg.n = appendix ? 5 : 10;
    cfg.p = 5;
    cfg.q = appendix ? 14 : 8;
    cfg.train.epochs = 200;
    cfg.train.learning_rate = 3e-3;
  } else if (dataset == "insurance") {
    cfg.n = 10;
    cfg.p = 10;
    cfg.q = 29;
    cfg.train.epochs = 200;
    cfg.train.learning_rate = 1e-3;
  } else {
    throw ContractError("unknown dataset '" + dataset + "' (expected xor, iris or insurance)");
  }
  return cfg;
}

// ---------------------------------------------------------------------------
// Metrics

double aubc(const std::vector<std::size_t>& labeled, const std::vector<double>& values) {
  if (labeled.size() != values.size() || labeled.empty()) throw ContractError("aubc: mismatched curve");
  if (labeled.size() == 1) return values[0];
  double area = 0.0;
  for (std::size_t i = 1; i < labeled.size(); ++i) {
    if (labeled[i] <= labeled[i - 1]) throw ContractError("aubc: labeled counts must increase");
    area += 0.5 * (values[i] + values[i - 1]) * static_cast<double>(labeled[i] - labeled[i - 1]);
  }
  return area / static_cast<double>(labeled.back() - labeled.front());
}

double aubc(const BudgetCurve& curve) { return aubc(curve.labeled, curve.values); }

double macro_f1(const std::vector<int>& truth, const std::vector<int>& predicted, std::size_t classes) {
  if (truth.size() != predicted.size()) throw ContractError("macro_f1: size mismatch");
  double sum = 0.0;
  for (std::size_t c = 0; c < classes; ++c) {
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
      const bool t = truth[i] == static_cast<int>(c), p = predicted[i] == static_cast<int>(c);
      tp += t && p;
      fp += !t && p;
      fn += t && !p;
    }
    const std::size_t denom = 2 * tp + fp + fn;
    sum += denom == 0 ? 1.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
  }
  return sum / static_cast<double>(classes);
}

double accuracy(const std::vector<int>& truth, const std::vector<int>& predicted) {
  if (truth.size() != predicted.size() || truth.empty()) throw ContractError("accuracy: size mismatch");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hits += truth[i] == predicted[i];
  return static_cast<double>(hits) / static_cast<double>(truth.size());
}

double r2_score(const Eigen::VectorXd& truth, const Eigen::VectorXd& predicted) {
  if (truth.size() != predicted.size() || truth.size() == 0) throw ContractError("r2_score: size mismatch");
  const double ss_res = (truth - predicted).squaredNorm();
  const double ss_tot = (truth.array() - truth.mean()).matrix().squaredNorm();
  return ss_tot > 0.0 ? 1.0 - ss_res / ss_tot : (ss_res == 0.0 ? 1.0 : 0.0);
}

// ---------------------------------------------------------------------------
// Setup

data::Dataset load_dataset(const ExperimentConfig& cfg) {
  if (cfg.dataset == "xor") return data::make_xor(cfg.xor_pool, cfg.seed);
  if (cfg.dataset == "iris") {
    auto path = cfg.data_path.empty() ? data::default_data_dir() / "iris.csv" : cfg.data_path;
    return data::load_iris(path, cfg.iris_min_max);
  }
  if (cfg.dataset == "insurance") {
    // the synthetic table is fixed across seeds, like a real CSV would be
    return cfg.data_path.empty() ? data::make_insurance_synthetic() : data::load_insurance(cfg.data_path);
  }
  throw ContractError("unknown dataset '" + cfg.dataset + "'");
}

knowledge::KnowledgeBase experiment_knowledge(const ExperimentConfig& cfg, const data::Dataset& ds) {
  auto kb = cfg.rules_text.empty() ? ds.knowledge() : knowledge::parse_knowledge(cfg.rules_text, ds.schema());
  if (cfg.rule_count) kb = kb.truncated(*cfg.rule_count, true);
  if (cfg.uncertainty_rule && is_classification(ds.task) && !kb.has_uncertainty_rule()) {
    kb = knowledge::add_uncertainty_rule(kb);
  }
  return kb;
}

void validate(const ExperimentConfig& cfg, const data::Dataset& ds) {
  if (strategies::classification_only(cfg.strategy) && !is_classification(ds.task)) {
    throw NotApplicableError("strategy not applicable to regression");
  }
  if (cfg.n == 0 || cfg.p == 0 || cfg.q == 0) throw ContractError("n, p and q must be positive");
  if (cfg.folds < 2) throw ContractError("at least two folds are required");
  const std::size_t pool = ds.size() - (ds.size() + cfg.folds - 1) / cfg.folds;
  if (cfg.budget() > pool) {
    throw ContractError("budget " + std::to_string(cfg.budget()) + " exceeds training pool of about " +
                        std::to_string(pool));
  }
  if (strategies::uses_mc_dropout(cfg.strategy) && cfg.mc_passes < 2) {
    throw ContractError("MC strategies need at least two dropout passes");
  }
}

namespace {

MatrixXd gather(const MatrixXd& M, const std::vector<std::size_t>& rows) {
  MatrixXd out(static_cast<Index>(rows.size()), M.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = M.row(static_cast<Index>(rows[i]));
  return out;
}

bool needs_predictions(StrategyId id) {
  return id != StrategyId::Random && id != StrategyId::KCenter && id != StrategyId::KMeans &&
         id != StrategyId::AdvBim;
}

std::uint64_t fold_seed(std::uint64_t seed, std::size_t fold) { return seed * 1000003ULL + fold; }

struct Evaluation {
  double metric;
  double accuracy;
};

Evaluation evaluate(const model::Mlp& net, const data::Dataset& ds, const std::vector<std::size_t>& test) {
  MatrixXd F = net.forward(gather(ds.X, test));
  if (!is_classification(ds.task)) {
    MatrixXd Y = gather(ds.Y, test);
    return {r2_score(Y.col(0), F.col(0)), 0.0};
  }
  auto pred = xai::predicted_classes(F, ds.task);
  std::vector<int> truth;
  truth.reserve(test.size());
  for (std::size_t i : test) truth.push_back(ds.labels[i]);
  const std::size_t classes = ds.task == TaskKind::Binary ? 2 : ds.classes;
  return {macro_f1(truth, pred, classes), accuracy(truth, pred)};
}

FoldResult run_fold(const ExperimentConfig& cfg, const data::Dataset& ds, const data::Fold& fold, std::size_t index,
                    const lowering::CompiledKnowledge* compiled) {
  FoldResult res;
  res.fold = index;
  res.seed = fold_seed(cfg.seed, index);
  res.test = fold.test;
  res.curve.metric = is_classification(ds.task) ? "macro_f1" : "r2";
  std::mt19937_64 rng(res.seed);

  // initial labels drawn uniformly from the training pool
  std::vector<std::size_t> pool = fold.train;
  for (std::size_t k = 0; k < cfg.n; ++k) {
    std::uniform_int_distribution<std::size_t> pick(k, pool.size() - 1);
    std::swap(pool[k], pool[pick(rng)]);
  }
  std::vector<std::size_t> labeled(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(cfg.n));
  std::vector<std::size_t> unlabeled(pool.begin() + static_cast<std::ptrdiff_t>(cfg.n), pool.end());
  std::sort(unlabeled.begin(), unlabeled.end());

  const bool mc = strategies::uses_mc_dropout(cfg.strategy);
  model::Mlp net(static_cast<std::size_t>(ds.X.cols()), cfg.hidden, ds.classes, ds.task, mc ? cfg.mc_dropout : 0.0,
                 res.seed);
  if (ds.standardize_inputs) net.fit_input_scaling(gather(ds.X, fold.train));
  if (!is_classification(ds.task)) net.fit_target_scaling(gather(ds.Y, labeled));

  for (std::size_t it = 0;; ++it) {
    model::TrainConfig tc = cfg.train;
    tc.seed = res.seed + 7919ULL * (it + 1);
    model::train(net, gather(ds.X, labeled), gather(ds.Y, labeled), tc);
    auto ev = evaluate(net, ds, fold.test);
    res.curve.labeled.push_back(labeled.size());
    res.curve.values.push_back(ev.metric);
    if (is_classification(ds.task)) res.curve.accuracy.push_back(ev.accuracy);
    if (it == cfg.q) break;

    strategies::SelectionRequest req;
    req.X = &ds.X;
    req.labeled = labeled;
    req.unlabeled = unlabeled;
    req.knowledge = compiled;
    req.task = ds.task;
    req.p = cfg.p;
    req.r = cfg.diversity_cap;
    req.diversity = cfg.diversity;
    req.seed = res.seed + 104729ULL * (it + 1);
    req.model = &net;
    req.targets = &ds.Y;
    req.benchmark_mode = true;

    model::Prediction pred;
    double inference = 0.0;
    if (needs_predictions(cfg.strategy)) {
      auto t0 = std::chrono::steady_clock::now();
      pred = model::predict(net, gather(ds.X, unlabeled), mc ? cfg.mc_passes : 0, req.seed ^ 0x9e3779b97f4a7c15ULL);
      inference = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      req.predictions = &pred;
    }
    res.inference_seconds.push_back(inference);
    auto start = std::chrono::steady_clock::now();
    strategies::SelectionResult sel;
    if (cfg.strategy == StrategyId::KalXai) {
      xai::XaiOptions xo = cfg.xai;
      xo.tnorm = cfg.tnorm;
      xo.generator = cfg.generator;
      xo.add_uncertainty = cfg.uncertainty_rule;
      xo.kal = cfg.strategy_options.kal;
      auto xs = xai::select_kal_xai(req, xo);
      if (!cfg.dump_xai_dir.empty()) {
        std::filesystem::create_directories(cfg.dump_xai_dir);
        std::ofstream(cfg.dump_xai_dir / ("seed" + std::to_string(cfg.seed) + "_fold" + std::to_string(index) +
                                          "_iter" + std::to_string(it) + ".kal"))
            << xs.rules;
      }
      sel = std::move(xs.result);
    } else {
      sel = strategies::select(cfg.strategy, req, cfg.strategy_options);
    }
    res.selection_seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
    if (cfg.time_random) res.random_seconds.push_back(strategies::select(StrategyId::Random, req).seconds);

    if (sel.chosen.size() != cfg.p) throw std::logic_error("strategy returned a batch of the wrong size");
    std::vector<std::size_t> chosen = sel.chosen;
    std::sort(chosen.begin(), chosen.end());
    if (std::adjacent_find(chosen.begin(), chosen.end()) != chosen.end()) {
      throw std::logic_error("strategy selected a sample twice");
    }
    std::vector<std::size_t> rest;
    rest.reserve(unlabeled.size());
    std::set_difference(unlabeled.begin(), unlabeled.end(), chosen.begin(), chosen.end(), std::back_inserter(rest));
    if (rest.size() + cfg.p != unlabeled.size()) throw std::logic_error("strategy selected outside the pool");
    unlabeled = std::move(rest);
    labeled.insert(labeled.end(), sel.chosen.begin(), sel.chosen.end());
    res.batches.push_back(std::move(sel.chosen));
  }
  res.aubc = aubc(res.curve);
  if (cfg.keep_models) res.final_model = std::move(net);
  return res;
}

void summarize(ExperimentResult& out) {
  std::vector<double> a;
  double sel = 0.0, rnd = 0.0, inf = 0.0;
  std::size_t iters = 0;
  for (const auto& f : out.folds) {
    a.push_back(f.aubc);
    for (double s : f.selection_seconds) sel += s;
    for (double s : f.inference_seconds) inf += s;
    for (double s : f.random_seconds) rnd += s;
    iters += f.selection_seconds.size();
  }
  if (a.empty()) return;
  out.mean_aubc = std::accumulate(a.begin(), a.end(), 0.0) / static_cast<double>(a.size());
  double var = 0.0;
  for (double v : a) var += (v - out.mean_aubc) * (v - out.mean_aubc);
  out.std_aubc = a.size() > 1 ? std::sqrt(var / static_cast<double>(a.size() - 1)) : 0.0;
  if (iters > 0) {
    out.selection_seconds = sel / static_cast<double>(iters);
    out.random_seconds = rnd / static_cast<double>(iters);
    out.inference_seconds = inf / static_cast<double>(iters);
    out.time_ratio = rnd > 0.0 ? sel / rnd : 0.0;
    out.time_ratio_with_inference = rnd > 0.0 ? (sel + inf) / rnd : 0.0;
  }
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& cfg) { return run_experiment(cfg, load_dataset(cfg)); }

ExperimentResult run_experiment(const ExperimentConfig& cfg, const data::Dataset& ds) {
  validate(cfg, ds);
  ExperimentResult out;
  out.config = cfg;
  out.metric = is_classification(ds.task) ? "macro_f1" : "r2";

  std::optional<lowering::CompiledKnowledge> compiled;
  if (cfg.strategy == StrategyId::Kal || cfg.strategy == StrategyId::KalD) {
    compiled.emplace(experiment_knowledge(cfg, ds), cfg.tnorm, cfg.generator);
  }
  auto plan = data::make_folds(ds, cfg.folds, cfg.seed);
  const std::size_t folds = cfg.fold_limit > 0 ? std::min(cfg.fold_limit, cfg.folds) : cfg.folds;
  out.folds.resize(folds);
  const lowering::CompiledKnowledge* ck = compiled ? &*compiled : nullptr;

  const std::size_t jobs = std::max<std::size_t>(1, cfg.jobs);
  if (jobs == 1) {
    for (std::size_t f = 0; f < folds; ++f) out.folds[f] = run_fold(cfg, ds, plan.folds[f], f, ck);
  } else {
    std::vector<std::exception_ptr> errors(folds);
    for (std::size_t start = 0; start < folds; start += jobs) {
      std::vector<std::thread> workers;
      for (std::size_t f = start; f < std::min(folds, start + jobs); ++f) {
        workers.emplace_back([&, f] {
          try {
            out.folds[f] = run_fold(cfg, ds, plan.folds[f], f, ck);
          } catch (...) {
            errors[f] = std::current_exception();
          }
        });
      }
      for (auto& w : workers) w.join();
    }
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }
  summarize(out);
  return out;
}

ExperimentResult run_seeds(const ExperimentConfig& cfg, const std::vector<std::uint64_t>& seeds) {
  if (seeds.empty()) throw ContractError("at least one seed is required");
  ExperimentResult all;
  all.config = cfg;
  for (auto s : seeds) {
    ExperimentConfig c = cfg;
    c.seed = s;
    auto r = run_experiment(c);
    all.metric = r.metric;
    for (auto& f : r.folds) all.folds.push_back(std::move(f));
  }
  summarize(all);
  return all;
}

// ---------------------------------------------------------------------------
// Audit and ablation

AuditReport knowledge_audit(const model::Mlp& model, const knowledge::KnowledgeBase& kb, const MatrixXd& X_test,
                            lowering::TNorm tnorm, lowering::Generator gen, std::optional<double> reference_total) {
  AuditReport rep;
  lowering::CompiledKnowledge ck(kb, tnorm, gen);
  for (const auto& r : ck.rules()) rep.rule_ids.push_back(r.id());
  rep.per_rule.assign(ck.rules().size(), 0.0);
  if (X_test.rows() > 0 && !ck.rules().empty()) {
    MatrixXd V = ck.violation_matrix(X_test, model.forward(X_test));
    for (Index r = 0; r < V.cols(); ++r) rep.per_rule[static_cast<std::size_t>(r)] = V.col(r).sum();
  }
  rep.total = std::accumulate(rep.per_rule.begin(), rep.per_rule.end(), 0.0);
  if (reference_total) {
    rep.reference_total = reference_total;
    if (*reference_total > 0.0) {
      rep.percent_increase = (rep.total - *reference_total) / *reference_total * 100.0;
    } else {
      rep.percent_increase = rep.total == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
    }
  }
  return rep;
}

std::vector<AblationRow> knowledge_fraction_ablation(const ExperimentConfig& cfg, const std::vector<double>& fractions,
                                                     const std::vector<std::uint64_t>& seeds) {
  auto ds = load_dataset(cfg);
  auto base = cfg.rules_text.empty() ? ds.knowledge() : knowledge::parse_knowledge(cfg.rules_text, ds.schema());
  std::size_t domain_rules = 0;
  for (const auto& r : base.rules()) domain_rules += !r.is_uncertainty;
  if (domain_rules == 0) throw ContractError("ablation needs a knowledge base with at least one rule");

  std::vector<AblationRow> rows;
  for (double frac : fractions) {
    if (frac < 0.0 || frac > 1.0) throw ContractError("fractions must lie in [0, 1]");
    AblationRow row;
    row.fraction = frac;
    row.rules = static_cast<std::size_t>(std::ceil(frac * static_cast<double>(domain_rules) - 1e-9));
    ExperimentConfig c = cfg;
    c.strategy = StrategyId::Kal;
    c.uncertainty_rule = true;
    c.rule_count = row.rules;
    row.result = run_seeds(c, seeds);
    rows.push_back(std::move(row));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Output

nlohmann::json config_json(const ExperimentConfig& c) {
  using nlohmann::json;
  json cfg = {
      {"dataset", c.dataset},
      {"strategy", std::string(strategies::to_string(c.strategy))},
      {"preset", std::string(to_string(c.preset))},
      {"n", c.n},
      {"p", c.p},
      {"q", c.q},
      {"budget", c.budget()},
      {"folds", c.folds},
      {"fold_limit", c.fold_limit},
      {"hidden", c.hidden},
      {"epochs", c.train.epochs},
      {"learning_rate", c.train.learning_rate},
      {"weight_decay", c.train.weight_decay},
      {"warm_start", c.train.warm_start},
      {"mc_passes", c.mc_passes},
      {"mc_dropout", c.mc_dropout},
      {"tnorm", std::string(lowering::to_string(c.tnorm))},
      {"generator", std::string(lowering::to_string(c.generator))},
      {"uncertainty_rule", c.uncertainty_rule},
      {"diversity", c.diversity},
      {"diversity_cap", c.diversity_cap},
  };
  if (c.rule_count) cfg["rule_count"] = *c.rule_count;
  if (c.dataset == "xor") cfg["xor_pool"] = c.xor_pool;
  return cfg;
}

std::string summary_json(const ExperimentResult& r, int indent) {
  using nlohmann::json;
  json cfg = config_json(r.config);
  json folds = json::array();
  for (const auto& f : r.folds) {
    folds.push_back({{"fold", f.fold},
                     {"seed", f.seed},
                     {"base_seed", f.seed / 1000003ULL},
                     {"aubc", f.aubc},
                     {"final_metric", f.curve.values.empty() ? 0.0 : f.curve.values.back()}});
  }
  json out = {
      {"config", cfg},
      {"metric", r.metric},
      {"aubc_mean", r.mean_aubc},
      {"aubc_std", r.std_aubc},
      {"folds", folds},
      {"timing",
       {{"selection_seconds_mean", r.selection_seconds},
        {"random_seconds_mean", r.random_seconds},
        {"ratio_to_random", r.time_ratio},
        {"inference_seconds_mean", r.inference_seconds},
        {"ratio_to_random_with_inference", r.time_ratio_with_inference}}},
  };
  return out.dump(indent);
}

std::string curve_csv(const BudgetCurve& curve) {
  std::ostringstream out;
  out << "labeled_count," << curve.metric << '\n';
  for (std::size_t i = 0; i < curve.labeled.size(); ++i) {
    out << curve.labeled[i] << ',' << knowledge::format_real(curve.values[i]) << '\n';
  }
  return out.str();
}

void write_outputs(const ExperimentResult& result, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream(dir / "summary.json") << summary_json(result) << '\n';
  for (std::size_t i = 0; i < result.folds.size(); ++i) {
    const auto& f = result.folds[i];
    std::ofstream(dir / ("curve_seed" + std::to_string(f.seed / 1000003ULL) + "_fold" + std::to_string(f.fold) + ".csv"))
        << curve_csv(f.curve);
  }
}

}  // namespace kal::harness
