#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "kal/data.hpp"
#include "kal/knowledge.hpp"
#include "kal/lowering.hpp"
#include "kal/model.hpp"
#include "kal/strategies.hpp"
#include "kal/xai.hpp"

namespace kal::harness {

enum class Preset { Table1, Appendix };
Preset preset_from_string(std::string_view text);
std::string_view to_string(Preset p);

struct ExperimentConfig {
  std::string dataset = "xor";  // xor | iris | insurance
  strategies::StrategyId strategy = strategies::StrategyId::Kal;
  Preset preset = Preset::Table1;
  std::size_t n = 10, p = 5, q = 18;
  std::size_t folds = 10;
  std::size_t fold_limit = 0;  // run only the first folds; 0 runs all
  std::uint64_t seed = 0;
  std::size_t jobs = 1;

  std::size_t xor_pool = 100000;
  std::filesystem::path data_path;  // iris / insurance CSV; empty: bundled iris, synthetic insurance
  std::string rules_text;           // overrides the dataset's bundled rules
  bool iris_min_max = true;

  std::size_t hidden = 100;
  double mc_dropout = 0.2;  // used only by MC strategies
  int mc_passes = 10;
  model::TrainConfig train;

  lowering::TNorm tnorm = lowering::TNorm::Product;
  lowering::Generator generator = lowering::Generator::OneMinus;
  bool uncertainty_rule = true;
  bool diversity = true;
  std::size_t diversity_cap = 0;     // 0: max(1, p / 2)
  std::optional<std::size_t> rule_count;  // keep only the first rules of the KB
  strategies::StrategyOptions strategy_options;
  xai::XaiOptions xai;
  std::filesystem::path dump_xai_dir;
  bool keep_models = false;
  bool time_random = true;

  std::size_t budget() const { return n + q * p; }
};

/// Budget, epochs and learning rate for a dataset under a preset.
ExperimentConfig make_config(const std::string& dataset, strategies::StrategyId strategy,
                             Preset preset = Preset::Table1);

struct BudgetCurve {
  std::string metric;                 // macro_f1 | r2
  std::vector<std::size_t> labeled;   // strictly increasing from n to b
  std::vector<double> values;
  std::vector<double> accuracy;       // classification only
};

/// Trapezoidal area over the labeled-count span, divided by (b - n).
double aubc(const BudgetCurve& curve);
double aubc(const std::vector<std::size_t>& labeled, const std::vector<double>& values);

double macro_f1(const std::vector<int>& truth, const std::vector<int>& predicted, std::size_t classes);
double accuracy(const std::vector<int>& truth, const std::vector<int>& predicted);
double r2_score(const Eigen::VectorXd& truth, const Eigen::VectorXd& predicted);

struct FoldResult {
  std::size_t fold = 0;
  std::uint64_t seed = 0;
  BudgetCurve curve;
  double aubc = 0.0;
  std::vector<std::vector<std::size_t>> batches;  // pool indices selected per iteration
  std::vector<double> selection_seconds;  // strategy call only
  std::vector<double> inference_seconds;  // pool predictions handed to the strategy
  std::vector<double> random_seconds;
  std::vector<std::size_t> test;
  std::optional<model::Mlp> final_model;
};

struct ExperimentResult {
  ExperimentConfig config;
  std::string metric;
  std::vector<FoldResult> folds;
  double mean_aubc = 0.0;
  double std_aubc = 0.0;
  double selection_seconds = 0.0;  // mean per iteration
  double random_seconds = 0.0;
  double inference_seconds = 0.0;
  double time_ratio = 0.0;         // selection / random
  double time_ratio_with_inference = 0.0;
};

data::Dataset load_dataset(const ExperimentConfig& cfg);
/// Rules used by the strategy: bundled or overridden text, truncated, plus the uncertainty rule if enabled.
knowledge::KnowledgeBase experiment_knowledge(const ExperimentConfig& cfg, const data::Dataset& ds);

/// Throws ContractError for invalid budgets and NotApplicableError for strategy/task mismatches.
void validate(const ExperimentConfig& cfg, const data::Dataset& ds);

ExperimentResult run_experiment(const ExperimentConfig& cfg);
ExperimentResult run_experiment(const ExperimentConfig& cfg, const data::Dataset& ds);
/// One experiment per seed; the summary pools AUBCs over all folds of all seeds.
ExperimentResult run_seeds(const ExperimentConfig& cfg, const std::vector<std::uint64_t>& seeds);

struct AuditReport {
  std::vector<std::string> rule_ids;
  std::vector<double> per_rule;  // summed over samples
  double total = 0.0;
  std::optional<double> reference_total;
  std::optional<double> percent_increase;  // (total - reference) / reference * 100
};

AuditReport knowledge_audit(const model::Mlp& model, const knowledge::KnowledgeBase& kb, const Eigen::MatrixXd& X_test,
                            lowering::TNorm tnorm = lowering::TNorm::Product,
                            lowering::Generator gen = lowering::Generator::OneMinus,
                            std::optional<double> reference_total = std::nullopt);

struct AblationRow {
  double fraction = 0.0;
  std::size_t rules = 0;
  ExperimentResult result;
};

/// KAL with the first ceil(fraction * |rules|) domain rules; the uncertainty rule is always kept.
std::vector<AblationRow> knowledge_fraction_ablation(const ExperimentConfig& cfg, const std::vector<double>& fractions,
                                                     const std::vector<std::uint64_t>& seeds);

nlohmann::json config_json(const ExperimentConfig& cfg);
std::string summary_json(const ExperimentResult& result, int indent = 2);
std::string curve_csv(const BudgetCurve& curve);
void write_outputs(const ExperimentResult& result, const std::filesystem::path& dir);

}  // namespace kal::harness
