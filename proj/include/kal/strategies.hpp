#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kal/lowering.hpp"
#include "kal/model.hpp"
#include "kal/types.hpp"

namespace kal::strategies {

enum class StrategyId {
  Kal,
  KalD,
  KalXai,
  Entropy,
  EntropyD,
  Margin,
  MarginD,
  LeastConf,
  LeastConfD,
  Bald,
  KCenter,
  KMeans,
  SupLoss,
  AdvBim,
  Random,
};

StrategyId strategy_from_string(std::string_view id);
std::string_view to_string(StrategyId id);
const std::vector<StrategyId>& all_strategies();

/// Needs a Monte-Carlo dropout prediction stack.
bool uses_mc_dropout(StrategyId id);
/// Defined only on classification tasks.
bool classification_only(StrategyId id);

struct SelectionRequest {
  const Eigen::MatrixXd* X = nullptr;      // pool inputs in raw units, one row per pool index
  std::span<const std::size_t> labeled;    // pool indices
  std::span<const std::size_t> unlabeled;  // pool indices, ascending
  const model::Prediction* predictions = nullptr;  // rows aligned with `unlabeled`
  const lowering::CompiledKnowledge* knowledge = nullptr;
  TaskKind task = TaskKind::Binary;
  std::size_t p = 1;
  std::size_t r = 0;       // diversity cap, 0 means max(1, p / 2)
  bool diversity = true;
  std::uint64_t seed = 0;

  const model::Mlp* model = nullptr;        // adv_bim
  const Eigen::MatrixXd* targets = nullptr; // suploss: encoded targets, one row per pool index
  bool benchmark_mode = false;              // suploss refuses to run otherwise
};

struct SelectionResult {
  std::vector<std::size_t> chosen;  // pool indices in acceptance order
  std::vector<double> scores;       // ranking score per unlabeled candidate, higher is selected first
  std::vector<int> groups;          // KAL: most violated rule per candidate
  double seconds = 0.0;             // wall-clock time of the selection call
};

struct KalOptions {
  /// KAL_D: average per-pass violations instead of scoring the mean prediction.
  bool per_pass_violations = false;
};

struct AdvOptions {
  double step = 0.01;
  int max_iters = 100;
  /// Rank by largest perturbation instead of smallest.
  bool largest = false;
};

/// Main-class distribution: [f, 1-f] for a single binary head, the rows of F otherwise.
Eigen::MatrixXd main_class_probabilities(const Eigen::MatrixXd& F, TaskKind task);
/// Softmax over main classes of the logits log f - log(1 - f), f clipped to [1e-7, 1 - 1e-7].
Eigen::MatrixXd logit_softmax(const Eigen::MatrixXd& F, TaskKind task);

double entropy(std::span<const double> probs);

/// Indices 0..n-1 ordered by descending score; ties keep ascending index order.
std::vector<std::size_t> rank_descending(std::span<const double> scores);
/// The first `head` entries of that ordering.
std::vector<std::size_t> rank_descending(std::span<const double> scores, std::size_t head);

SelectionResult select_kal(const SelectionRequest& req, bool mc = false, const KalOptions& opts = {});
SelectionResult select_entropy(const SelectionRequest& req, bool mc = false);
SelectionResult select_margin(const SelectionRequest& req, bool mc = false);
SelectionResult select_leastconf(const SelectionRequest& req, bool mc = false);
SelectionResult select_bald(const SelectionRequest& req);
SelectionResult select_kcenter(const SelectionRequest& req);
SelectionResult select_kmeans(const SelectionRequest& req);
SelectionResult select_suploss(const SelectionRequest& req);
SelectionResult select_adv_bim(const SelectionRequest& req, const AdvOptions& opts = {});
SelectionResult select_random(const SelectionRequest& req);

struct StrategyOptions {
  KalOptions kal;
  AdvOptions adv;
};

/// Dispatches on the strategy id and fills SelectionResult::seconds. KalXai is handled by the xai module.
SelectionResult select(StrategyId id, const SelectionRequest& req, const StrategyOptions& opts = {});

/// Lloyd's k-means with seeded k-means++ init; returns k x d centroids.
Eigen::MatrixXd kmeans(const Eigen::MatrixXd& points, std::size_t k, std::uint64_t seed, int max_iters = 100,
                       double tol = 1e-6);

}  // namespace kal::strategies
