#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "kal/knowledge.hpp"
#include "kal/lowering.hpp"
#include "kal/model.hpp"
#include "kal/strategies.hpp"

namespace kal::xai {

/// Binary CART tree. Left child takes x[feature] <= threshold.
struct SurrogateTree {
  struct Node {
    int feature = -1;  // -1 for a leaf
    double threshold = 0.0;
    int left = -1, right = -1;
    std::vector<std::size_t> counts;  // training points per class reaching the node
    int majority = 0;                 // lowest class index on ties
  };

  std::size_t classes = 0;
  std::size_t max_depth = 0;
  std::vector<Node> nodes;  // nodes[0] is the root

  bool is_leaf(std::size_t i) const { return nodes[i].feature < 0; }
  std::size_t leaf_for(std::span<const double> x) const;
  int predict(std::span<const double> x) const { return nodes[leaf_for(x)].majority; }
  std::size_t depth() const;
};

/// Gini CART on (X, classes). Ties go to the lowest feature, then the lowest threshold.
SurrogateTree fit_tree(const Eigen::MatrixXd& X, const std::vector<int>& classes, std::size_t n_classes,
                       std::size_t max_depth = 3);

/// Predicted classes of the network: argmax for multiclass, 1[f >= 0.5] for a binary head.
std::vector<int> predicted_classes(const Eigen::MatrixXd& F, TaskKind task);

/// Tree that mimics the network's predictions on X_s.
SurrogateTree fit_surrogate(const model::Mlp& model, const Eigen::MatrixXd& X_s, std::size_t max_depth = 3);

double fidelity(const SurrogateTree& tree, const Eigen::MatrixXd& X, const std::vector<int>& classes);

/// One biconditional per class with at least one majority leaf, plus exactly-one over the main classes.
/// Binary schemas map class 1 to `F` and class 0 to `not F`.
knowledge::KnowledgeBase extract_rules(const SurrogateTree& tree, const Schema& schema);
std::string extract_rules_dsl(const SurrogateTree& tree, const Schema& schema);

struct XaiOptions {
  double kal_fraction = 0.6;
  std::size_t max_depth = 3;
  lowering::TNorm tnorm = lowering::TNorm::Product;
  lowering::Generator generator = lowering::Generator::OneMinus;
  bool add_uncertainty = false;
  strategies::KalOptions kal;
};

struct XaiSelection {
  strategies::SelectionResult result;
  std::string rules;  // extracted knowledge as DSL text
  std::size_t kal_count = 0;
};

/// Refits the surrogate on the labeled set, runs KAL for ceil(fraction * p) samples and fills the rest at
/// random from the remaining pool. Needs req.model and req.predictions.
XaiSelection select_kal_xai(const strategies::SelectionRequest& req, const XaiOptions& opts = {});

}  // namespace kal::xai
