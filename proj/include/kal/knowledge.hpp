#pragma once

// Rule DSL: predicate bindings and FOL formulas over a fixed schema.
//
//   input  LongPetal = feature(2) > 0.5
//   output Setosa    = class(0)
//   output Cheap     = value(0) < 7500 tau 0.01
//   rule r1: not LongPetal <=> Setosa
//
// A rule whose id is `uncertainty` is the uncertainty-like rule.

#include <cstddef>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "kal/types.hpp"

namespace kal::knowledge {

inline constexpr double kDefaultTau = 10.0;
inline constexpr std::string_view kUncertaintyRuleId = "uncertainty";

enum class Direction { Greater, Less };

struct InputThreshold {
  std::size_t feature = 0;
  Direction direction = Direction::Greater;
  double threshold = 0.0;
  bool operator==(const InputThreshold&) const = default;
};

struct OutputClass {
  std::size_t head = 0;
  bool operator==(const OutputClass&) const = default;
};

struct OutputThreshold {
  std::size_t head = 0;
  Direction direction = Direction::Greater;
  double threshold = 0.0;
  bool operator==(const OutputThreshold&) const = default;
};

using PredicateKind = std::variant<InputThreshold, OutputClass, OutputThreshold>;

struct PredicateBinding {
  std::string name;
  PredicateKind kind;
  double tau = kDefaultTau;  // logistic steepness

  bool operator==(const PredicateBinding&) const = default;
};

/// Recursive FOL formula. Universally quantified over samples.
struct Formula {
  enum class Op { Atom, Not, And, Or, ExactlyOne, Implies, Iff };

  Op op = Op::Atom;
  std::string name;               // Atom only
  std::vector<Formula> children;  // Not: 1, Implies/Iff: 2, And/Or/ExactlyOne: >= 2

  bool operator==(const Formula&) const = default;

  static Formula atom(std::string name);
  static Formula negate(Formula operand);
  static Formula all_of(std::vector<Formula> operands);
  static Formula any_of(std::vector<Formula> operands);
  static Formula exactly_one(std::vector<Formula> operands);
  static Formula implies(Formula antecedent, Formula consequent);
  static Formula iff(Formula lhs, Formula rhs);
};

struct Rule {
  std::string id;
  Formula formula;
  bool is_uncertainty = false;

  bool operator==(const Rule&) const = default;
};

/// Lexical, syntactic or binding error. Line and column are 1-based; 0 when not tied to source text.
class KnowledgeError : public std::runtime_error {
 public:
  KnowledgeError(const std::string& message, std::size_t line = 0, std::size_t column = 0);
  std::size_t line() const { return line_; }
  std::size_t column() const { return column_; }

 private:
  std::size_t line_;
  std::size_t column_;
};

/// Ordered rules plus their predicate bindings. Immutable; validated on construction.
class KnowledgeBase {
 public:
  KnowledgeBase(Schema schema, std::vector<PredicateBinding> bindings, std::vector<Rule> rules);

  const Schema& schema() const { return schema_; }
  const std::vector<PredicateBinding>& bindings() const { return bindings_; }
  const std::vector<Rule>& rules() const { return rules_; }

  const PredicateBinding* find_binding(std::string_view name) const;
  std::size_t binding_index(std::string_view name) const;
  bool has_uncertainty_rule() const;

  /// Copy keeping the first `count` non-uncertainty rules and, if `keep_uncertainty`, the uncertainty rule.
  KnowledgeBase truncated(std::size_t count, bool keep_uncertainty = true) const;
  /// Copy without the uncertainty rule.
  KnowledgeBase without_uncertainty_rule() const;

  bool operator==(const KnowledgeBase& other) const {
    return schema_ == other.schema_ && bindings_ == other.bindings_ && rules_ == other.rules_;
  }

 private:
  Schema schema_;
  std::vector<PredicateBinding> bindings_;
  std::vector<Rule> rules_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

KnowledgeBase parse_knowledge(std::string_view text, const Schema& schema);

/// Appends the rule AND_i (f_i xor not f_i) over every output head. Classification schemas only.
KnowledgeBase add_uncertainty_rule(const KnowledgeBase& kb);

std::string to_string(const Formula& formula);
std::string to_string(const PredicateBinding& binding);
/// Canonical DSL text; parse_knowledge(to_dsl(kb), kb.schema()) == kb.
std::string to_dsl(const KnowledgeBase& kb);

/// Shortest decimal text that parses back to the same double.
std::string format_real(double value);

}  // namespace kal::knowledge
