#include "kal/xai.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

namespace kal::xai {

using Eigen::Index;
using Eigen::MatrixXd;

std::size_t SurrogateTree::leaf_for(std::span<const double> x) const {
  std::size_t i = 0;
  while (!is_leaf(i)) {
    const auto& n = nodes[i];
    i = static_cast<std::size_t>(x[static_cast<std::size_t>(n.feature)] <= n.threshold ? n.left : n.right);
  }
  return i;
}

std::size_t SurrogateTree::depth() const {
  std::vector<std::size_t> d(nodes.size(), 0);
  std::size_t best = 0;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (!is_leaf(i)) {
      d[static_cast<std::size_t>(nodes[i].left)] = d[i] + 1;
      d[static_cast<std::size_t>(nodes[i].right)] = d[i] + 1;
    }
    best = std::max(best, d[i]);
  }
  return best;
}

namespace {

double gini(const std::vector<std::size_t>& counts, std::size_t total) {
  if (total == 0) return 0.0;
  double s = 1.0;
  for (std::size_t c : counts) {
    double p = static_cast<double>(c) / static_cast<double>(total);
    s -= p * p;
  }
  return s;
}

int majority_of(const std::vector<std::size_t>& counts) {
  return static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
}

struct Builder {
  const MatrixXd& X;
  const std::vector<int>& y;
  std::size_t n_classes;
  std::size_t max_depth;
  SurrogateTree tree;

  std::vector<std::size_t> count(const std::vector<std::size_t>& rows) const {
    std::vector<std::size_t> c(n_classes, 0);
    for (std::size_t r : rows) ++c[static_cast<std::size_t>(y[r])];
    return c;
  }

  int grow(const std::vector<std::size_t>& rows, std::size_t depth) {
    const int id = static_cast<int>(tree.nodes.size());
    tree.nodes.emplace_back();
    auto counts = count(rows);
    tree.nodes[static_cast<std::size_t>(id)].counts = counts;
    tree.nodes[static_cast<std::size_t>(id)].majority = majority_of(counts);
    const double parent = gini(counts, rows.size());
    if (depth >= max_depth || rows.size() < 2 || parent == 0.0) return id;

    int best_feature = -1;
    double best_threshold = 0.0, best_impurity = parent;
    std::vector<std::size_t> order(rows);
    for (Index j = 0; j < X.cols(); ++j) {
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return X(static_cast<Index>(a), j) < X(static_cast<Index>(b), j); });
      std::vector<std::size_t> left(n_classes, 0), right = counts;
      for (std::size_t k = 0; k + 1 < order.size(); ++k) {
        const std::size_t c = static_cast<std::size_t>(y[order[k]]);
        ++left[c];
        --right[c];
        const double a = X(static_cast<Index>(order[k]), j), b = X(static_cast<Index>(order[k + 1]), j);
        if (!(a < b)) continue;
        const std::size_t nl = k + 1, nr = order.size() - nl;
        const double impurity = (static_cast<double>(nl) * gini(left, nl) + static_cast<double>(nr) * gini(right, nr)) /
                                static_cast<double>(order.size());
        if (impurity < best_impurity - 1e-12) {
          best_impurity = impurity;
          best_feature = static_cast<int>(j);
          best_threshold = 0.5 * (a + b);
        }
      }
    }
    if (best_feature < 0) return id;

    std::vector<std::size_t> lrows, rrows;
    for (std::size_t r : rows) {
      (X(static_cast<Index>(r), best_feature) <= best_threshold ? lrows : rrows).push_back(r);
    }
    int l = grow(lrows, depth + 1);
    int r = grow(rrows, depth + 1);
    auto& node = tree.nodes[static_cast<std::size_t>(id)];
    node.feature = best_feature;
    node.threshold = best_threshold;
    node.left = l;
    node.right = r;
    return id;
  }
};

}  // namespace

SurrogateTree fit_tree(const MatrixXd& X, const std::vector<int>& classes, std::size_t n_classes,
                       std::size_t max_depth) {
  if (static_cast<std::size_t>(X.rows()) != classes.size()) throw ContractError("fit_tree: one class per row");
  if (n_classes == 0) throw ContractError("fit_tree: need at least one class");
  for (int c : classes) {
    if (c < 0 || static_cast<std::size_t>(c) >= n_classes) throw ContractError("fit_tree: class out of range");
  }
  Builder b{X, classes, n_classes, max_depth, {}};
  b.tree.classes = n_classes;
  b.tree.max_depth = max_depth;
  std::vector<std::size_t> rows(classes.size());
  std::iota(rows.begin(), rows.end(), 0);
  b.grow(rows, 0);
  return std::move(b.tree);
}

std::vector<int> predicted_classes(const MatrixXd& F, TaskKind task) {
  std::vector<int> out(static_cast<std::size_t>(F.rows()));
  for (Index i = 0; i < F.rows(); ++i) {
    if (task == TaskKind::Binary) {
      out[static_cast<std::size_t>(i)] = F(i, 0) >= 0.5 ? 1 : 0;
    } else {
      Index best = 0;
      for (Index j = 1; j < F.cols(); ++j) {
        if (F(i, j) > F(i, best)) best = j;
      }
      out[static_cast<std::size_t>(i)] = static_cast<int>(best);
    }
  }
  return out;
}

SurrogateTree fit_surrogate(const model::Mlp& model, const MatrixXd& X_s, std::size_t max_depth) {
  if (model.task() != TaskKind::Binary && model.task() != TaskKind::Multiclass) {
    throw NotApplicableError("surrogate extraction needs a binary or multiclass task");
  }
  const std::size_t n_classes = model.task() == TaskKind::Binary ? 2 : model.output_dim();
  return fit_tree(X_s, predicted_classes(model.forward(X_s), model.task()), n_classes, max_depth);
}

double fidelity(const SurrogateTree& tree, const MatrixXd& X, const std::vector<int>& classes) {
  if (classes.empty()) return 1.0;
  std::size_t hits = 0;
  for (Index i = 0; i < X.rows(); ++i) {
    Eigen::VectorXd x = X.row(i).transpose();
    if (tree.predict({x.data(), static_cast<std::size_t>(x.size())}) == classes[static_cast<std::size_t>(i)]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(classes.size());
}

std::string extract_rules_dsl(const SurrogateTree& tree, const Schema& schema) {
  if (schema.task != TaskKind::Binary && schema.task != TaskKind::Multiclass) {
    throw NotApplicableError("rule extraction needs a binary or multiclass task");
  }
  const bool binary = schema.task == TaskKind::Binary;
  const std::size_t n_classes = binary ? 2 : schema.output_dim;
  if (tree.classes != n_classes) throw ContractError("extract_rules: tree classes do not match the schema");

  // atom names, deduplicated on (feature, direction, threshold)
  std::map<std::tuple<int, bool, double>, std::string> atoms;
  std::vector<std::string> declarations;
  auto atom = [&](int feature, bool greater, double threshold) {
    auto key = std::make_tuple(feature, greater, threshold);
    auto it = atoms.find(key);
    if (it != atoms.end()) return it->second;
    std::string name = "x" + std::to_string(feature) + (greater ? "_gt_" : "_lt_") + std::to_string(atoms.size());
    declarations.push_back("input " + name + " = feature(" + std::to_string(feature) + ") " + (greater ? ">" : "<") +
                           " " + knowledge::format_real(threshold));
    atoms.emplace(key, name);
    return name;
  };

  // root-to-leaf conjunctions grouped by leaf majority
  std::vector<std::vector<std::string>> paths(n_classes);
  std::vector<std::pair<std::size_t, std::vector<std::string>>> stack{{0, {}}};
  while (!stack.empty()) {
    auto [i, conj] = std::move(stack.back());
    stack.pop_back();
    const auto& node = tree.nodes[i];
    if (tree.is_leaf(i)) {
      if (conj.empty()) continue;  // single leaf: nothing to explain
      std::string text;
      for (std::size_t k = 0; k < conj.size(); ++k) text += (k ? " and " : "") + conj[k];
      paths[static_cast<std::size_t>(node.majority)].push_back(text);
      continue;
    }
    auto right = conj, left = conj;
    right.push_back(atom(node.feature, true, node.threshold));
    left.push_back(atom(node.feature, false, node.threshold));
    stack.push_back({static_cast<std::size_t>(node.right), std::move(right)});
    stack.push_back({static_cast<std::size_t>(node.left), std::move(left)});
  }

  std::ostringstream out;
  for (const auto& d : declarations) out << d << '\n';
  std::vector<std::string> class_atoms;
  if (binary) {
    out << "output F = class(0)\n";
    class_atoms = {"not F", "F"};
  } else {
    for (std::size_t c = 0; c < n_classes; ++c) {
      out << "output C" << c << " = class(" << c << ")\n";
      class_atoms.push_back("C" + std::to_string(c));
    }
  }
  for (std::size_t c = 0; c < n_classes; ++c) {
    if (paths[c].empty()) continue;
    out << "rule class" << c << ": " << class_atoms[c] << " <=> ";
    if (paths[c].size() == 1) {
      out << paths[c][0];
    } else {
      for (std::size_t k = 0; k < paths[c].size(); ++k) out << (k ? " or " : "") << "(" << paths[c][k] << ")";
    }
    out << '\n';
  }
  out << "rule exclusive: ";
  for (std::size_t c = 0; c < n_classes; ++c) out << (c ? " xor " : "") << class_atoms[c];
  out << '\n';
  return out.str();
}

knowledge::KnowledgeBase extract_rules(const SurrogateTree& tree, const Schema& schema) {
  return knowledge::parse_knowledge(extract_rules_dsl(tree, schema), schema);
}

XaiSelection select_kal_xai(const strategies::SelectionRequest& req, const XaiOptions& opts) {
  auto start = std::chrono::steady_clock::now();
  if (!is_classification(req.task)) throw NotApplicableError("strategy not applicable to regression");
  if (req.model == nullptr || req.X == nullptr) throw ContractError("kal_xai: model and pool inputs required");
  if (req.p == 0 || req.p > req.unlabeled.size()) throw ContractError("kal_xai: invalid batch size");
  if (opts.kal_fraction < 0.0 || opts.kal_fraction > 1.0) throw ContractError("kal_xai: fraction must lie in [0, 1]");

  MatrixXd Xs(static_cast<Index>(req.labeled.size()), req.X->cols());
  for (std::size_t i = 0; i < req.labeled.size(); ++i) Xs.row(static_cast<Index>(i)) = req.X->row(static_cast<Index>(req.labeled[i]));
  SurrogateTree tree = fit_surrogate(*req.model, Xs, opts.max_depth);
  Schema schema{static_cast<std::size_t>(req.X->cols()), req.model->output_dim(), req.task};

  XaiSelection sel;
  sel.rules = extract_rules_dsl(tree, schema);
  auto kb = knowledge::parse_knowledge(sel.rules, schema);
  if (opts.add_uncertainty && !kb.has_uncertainty_rule()) kb = knowledge::add_uncertainty_rule(kb);
  lowering::CompiledKnowledge compiled(kb, opts.tnorm, opts.generator);

  sel.kal_count = static_cast<std::size_t>(std::ceil(opts.kal_fraction * static_cast<double>(req.p) - 1e-9));
  sel.kal_count = std::min(sel.kal_count, req.p);
  if (sel.kal_count > 0) {
    strategies::SelectionRequest sub = req;
    sub.knowledge = &compiled;
    sub.p = sel.kal_count;
    sel.result = strategies::select_kal(sub, false, opts.kal);
  }

  std::vector<std::size_t> rest;
  std::vector<std::size_t> chosen_sorted = sel.result.chosen;
  std::sort(chosen_sorted.begin(), chosen_sorted.end());
  for (std::size_t idx : req.unlabeled) {
    if (!std::binary_search(chosen_sorted.begin(), chosen_sorted.end(), idx)) rest.push_back(idx);
  }
  std::mt19937_64 rng(req.seed);
  for (std::size_t k = 0; k < req.p - sel.kal_count; ++k) {
    std::uniform_int_distribution<std::size_t> pick(k, rest.size() - 1);
    std::swap(rest[k], rest[pick(rng)]);
    sel.result.chosen.push_back(rest[k]);
  }
  sel.result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return sel;
}

}  // namespace kal::xai
