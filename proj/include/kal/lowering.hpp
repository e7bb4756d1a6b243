#pragma once

// Lowering of FOL rules to fuzzy constraint violations.
//
// Connective semantics per T-norm:
//
//              and              or              not     implies
//   Product    x*y              x+y-x*y         1-x     1-x*(1-y)
//   Lukasiewicz max(0,x+y-1)    min(1,x+y)      1-x     min(1,1-x+y)
//   Goedel     min(x,y)         max(x,y)        1-x     x<=y ? 1 : y
//
// Violation of a rule is g(t) for its truth t, except a top-level biconditional
// A <=> B, whose violation is g(t(A => B)) + g(t(B => A)).

#include <Eigen/Dense>
#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kal/knowledge.hpp"

namespace kal::lowering {

enum class TNorm { Product, Lukasiewicz, Goedel };
enum class Generator { OneMinus, NegLog };

TNorm tnorm_from_string(std::string_view text);
Generator generator_from_string(std::string_view text);
std::string_view to_string(TNorm t);
std::string_view to_string(Generator g);

/// Raised for formulas a T-norm has no lowering for (n-ary xor outside Product).
class UnsupportedLowering : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

double logistic(double value, double midpoint, double tau);
double apply_generator(Generator g, double truth);

/// Fuzzy truth of one predicate for input x and prediction f.
double eval_predicate(const knowledge::PredicateBinding& binding, std::span<const double> x,
                      std::span<const double> f);

class CompiledRule {
 public:
  const std::string& id() const { return id_; }
  bool is_uncertainty() const { return is_uncertainty_; }
  TNorm tnorm() const { return tnorm_; }
  Generator generator() const { return generator_; }

  /// Fuzzy truth of the whole formula.
  double truth(std::span<const double> x, std::span<const double> f) const;
  /// Fuzzy truth given precomputed predicate truths, indexed like the KB bindings.
  double truth_from_atoms(std::span<const double> atoms) const;
  double violation(std::span<const double> x, std::span<const double> f) const;
  double violation_from_atoms(std::span<const double> atoms) const;

  /// Human-readable closed form of the violation; one line per directional term for a biconditional.
  std::vector<std::string> closed_form() const;

 private:
  friend class CompiledKnowledge;
  friend CompiledRule compile(const knowledge::Formula&, const knowledge::KnowledgeBase&, TNorm, Generator);

  struct Node {
    knowledge::Formula::Op op;
    std::size_t binding = 0;               // Atom
    std::vector<std::size_t> children;     // indices into nodes_
  };

  double eval(std::size_t node, std::span<const double> atoms) const;
  Eigen::ArrayXd eval_columns(std::size_t node, const std::vector<Eigen::ArrayXd>& atoms) const;
  Eigen::ArrayXd violation_columns(const std::vector<Eigen::ArrayXd>& atoms) const;
  std::vector<double> atom_truths(std::span<const double> x, std::span<const double> f) const;

  std::string id_;
  bool is_uncertainty_ = false;
  TNorm tnorm_ = TNorm::Product;
  Generator generator_ = Generator::OneMinus;
  knowledge::Formula formula_;
  std::vector<Node> nodes_;  // nodes_[root_] is the formula root
  std::size_t root_ = 0;
  std::vector<knowledge::PredicateBinding> bindings_;
  std::vector<std::string> names_;
};

CompiledRule compile(const knowledge::Formula& formula, const knowledge::KnowledgeBase& kb,
                     TNorm tnorm = TNorm::Product, Generator gen = Generator::OneMinus);

/// Every rule of a knowledge base, compiled under one T-norm and generator.
class CompiledKnowledge {
 public:
  CompiledKnowledge(const knowledge::KnowledgeBase& kb, TNorm tnorm = TNorm::Product,
                    Generator gen = Generator::OneMinus);

  const std::vector<CompiledRule>& rules() const { return rules_; }
  const knowledge::KnowledgeBase& kb() const { return kb_; }

  /// V(s, r): violation of rule r on sample s. X is n x input_dim, F is n x output_dim.
  Eigen::MatrixXd violation_matrix(const Eigen::MatrixXd& X, const Eigen::MatrixXd& F) const;

 private:
  knowledge::KnowledgeBase kb_;
  std::vector<CompiledRule> rules_;
};

Eigen::MatrixXd violation_matrix(const knowledge::KnowledgeBase& kb, const Eigen::MatrixXd& X,
                                 const Eigen::MatrixXd& F, TNorm tnorm = TNorm::Product,
                                 Generator gen = Generator::OneMinus);

}  // namespace kal::lowering
