#include "kal/lowering.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace kal::lowering {

using knowledge::Formula;
using Op = knowledge::Formula::Op;

TNorm tnorm_from_string(std::string_view text) {
  if (text == "product") return TNorm::Product;
  if (text == "lukasiewicz") return TNorm::Lukasiewicz;
  if (text == "goedel" || text == "godel") return TNorm::Goedel;
  throw ContractError("unknown t-norm '" + std::string(text) + "'");
}

Generator generator_from_string(std::string_view text) {
  if (text == "oneminus") return Generator::OneMinus;
  if (text == "neglog") return Generator::NegLog;
  throw ContractError("unknown generator '" + std::string(text) + "'");
}

std::string_view to_string(TNorm t) {
  switch (t) {
    case TNorm::Product: return "product";
    case TNorm::Lukasiewicz: return "lukasiewicz";
    case TNorm::Goedel: return "goedel";
  }
  return "?";
}

std::string_view to_string(Generator g) { return g == Generator::OneMinus ? "oneminus" : "neglog"; }

double logistic(double value, double midpoint, double tau) {
  double z = tau * (value - midpoint);
  // split on sign so neither branch overflows
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  double e = std::exp(z);
  return e / (1.0 + e);
}

double apply_generator(Generator g, double truth) {
  if (g == Generator::OneMinus) return 1.0 - truth;
  if (truth >= 1.0) return 0.0;
  return -std::log(std::max(truth, std::numeric_limits<double>::min()));
}

double eval_predicate(const knowledge::PredicateBinding& binding, std::span<const double> x,
                      std::span<const double> f) {
  return std::visit(
      [&](const auto& kind) -> double {
        using K = std::decay_t<decltype(kind)>;
        if constexpr (std::is_same_v<K, knowledge::InputThreshold>) {
          if (kind.feature >= x.size()) throw ContractError("predicate '" + binding.name + "': feature index");
          double s = logistic(x[kind.feature], kind.threshold, binding.tau);
          return kind.direction == knowledge::Direction::Greater ? s : 1.0 - s;
        } else if constexpr (std::is_same_v<K, knowledge::OutputClass>) {
          if (kind.head >= f.size()) throw ContractError("predicate '" + binding.name + "': head index");
          return std::clamp(f[kind.head], 0.0, 1.0);
        } else {
          if (kind.head >= f.size()) throw ContractError("predicate '" + binding.name + "': head index");
          double s = logistic(f[kind.head], kind.threshold, binding.tau);
          return kind.direction == knowledge::Direction::Greater ? s : 1.0 - s;
        }
      },
      binding.kind);
}

// ---------------------------------------------------------------------------
// Connectives

namespace {

double t_and(TNorm t, std::span<const double> v) {
  switch (t) {
    case TNorm::Product: {
      double r = 1.0;
      for (double a : v) r *= a;
      return r;
    }
    case TNorm::Lukasiewicz: {
      double s = 0.0;
      for (double a : v) s += a;
      return std::max(0.0, s - static_cast<double>(v.size() - 1));
    }
    case TNorm::Goedel: return *std::min_element(v.begin(), v.end());
  }
  return 0.0;
}

double t_or(TNorm t, std::span<const double> v) {
  switch (t) {
    case TNorm::Product: {
      double r = 1.0;
      for (double a : v) r *= 1.0 - a;
      return 1.0 - r;
    }
    case TNorm::Lukasiewicz: {
      double s = 0.0;
      for (double a : v) s += a;
      return std::min(1.0, s);
    }
    case TNorm::Goedel: return *std::max_element(v.begin(), v.end());
  }
  return 0.0;
}

double t_implies(TNorm t, double a, double b) {
  switch (t) {
    case TNorm::Product: return 1.0 - a * (1.0 - b);
    case TNorm::Lukasiewicz: return std::min(1.0, 1.0 - a + b);
    case TNorm::Goedel: return a <= b ? 1.0 : b;
  }
  return 0.0;
}

double t_exactly_one(TNorm t, std::span<const double> v) {
  if (t == TNorm::Product) {
    double total = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
      double term = v[i];
      for (std::size_t j = 0; j < v.size(); ++j) {
        if (j != i) term *= 1.0 - v[j];
      }
      total += term;
    }
    return total;
  }
  // binary only: (a and not b) or (not a and b)
  double a = v[0], b = v[1];
  double l[2] = {a, 1.0 - b};
  double r[2] = {1.0 - a, b};
  double both[2] = {t_and(t, l), t_and(t, r)};
  return t_or(t, both);
}

// Column versions: one entry per sample, same operation order as the scalar helpers.
using Col = Eigen::ArrayXd;

Col c_and(TNorm t, const std::vector<Col>& v) {
  switch (t) {
    case TNorm::Product: {
      Col r = Col::Ones(v[0].size());
      for (const auto& a : v) r *= a;
      return r;
    }
    case TNorm::Lukasiewicz: {
      Col s = Col::Zero(v[0].size());
      for (const auto& a : v) s += a;
      return (s - static_cast<double>(v.size() - 1)).max(0.0);
    }
    case TNorm::Goedel: {
      Col r = v[0];
      for (std::size_t i = 1; i < v.size(); ++i) r = r.min(v[i]);
      return r;
    }
  }
  return Col();
}

Col c_or(TNorm t, const std::vector<Col>& v) {
  switch (t) {
    case TNorm::Product: {
      Col r = Col::Ones(v[0].size());
      for (const auto& a : v) r *= 1.0 - a;
      return 1.0 - r;
    }
    case TNorm::Lukasiewicz: {
      Col s = Col::Zero(v[0].size());
      for (const auto& a : v) s += a;
      return s.min(1.0);
    }
    case TNorm::Goedel: {
      Col r = v[0];
      for (std::size_t i = 1; i < v.size(); ++i) r = r.max(v[i]);
      return r;
    }
  }
  return Col();
}

Col c_implies(TNorm t, const Col& a, const Col& b) {
  switch (t) {
    case TNorm::Product: return 1.0 - a * (1.0 - b);
    case TNorm::Lukasiewicz: return (1.0 - a + b).min(1.0);
    case TNorm::Goedel: return (a <= b).select(Col::Ones(a.size()), b);
  }
  return Col();
}

Col c_exactly_one(TNorm t, const std::vector<Col>& v) {
  if (t == TNorm::Product) {
    Col total = Col::Zero(v[0].size());
    for (std::size_t i = 0; i < v.size(); ++i) {
      Col term = v[i];
      for (std::size_t j = 0; j < v.size(); ++j) {
        if (j != i) term *= 1.0 - v[j];
      }
      total += term;
    }
    return total;
  }
  std::vector<Col> l{v[0], 1.0 - v[1]}, r{1.0 - v[0], v[1]};
  return c_or(t, {c_and(t, l), c_and(t, r)});
}

Col c_generator(Generator g, const Col& t) {
  if (g == Generator::OneMinus) return 1.0 - t;
  Col out(t.size());
  for (Eigen::Index i = 0; i < t.size(); ++i) out(i) = apply_generator(g, t(i));
  return out;
}

Col c_logistic(const Col& value, double midpoint, double tau) {
  Col out(value.size());
  for (Eigen::Index i = 0; i < value.size(); ++i) out(i) = logistic(value(i), midpoint, tau);
  return out;
}

Col predicate_column(const knowledge::PredicateBinding& binding, const Eigen::MatrixXd& X, const Eigen::MatrixXd& F) {
  return std::visit(
      [&](const auto& kind) -> Col {
        using K = std::decay_t<decltype(kind)>;
        if constexpr (std::is_same_v<K, knowledge::InputThreshold>) {
          Col s = c_logistic(X.col(static_cast<Eigen::Index>(kind.feature)).array(), kind.threshold, binding.tau);
          return kind.direction == knowledge::Direction::Greater ? s : Col(1.0 - s);
        } else if constexpr (std::is_same_v<K, knowledge::OutputClass>) {
          return F.col(static_cast<Eigen::Index>(kind.head)).array().max(0.0).min(1.0);
        } else {
          Col s = c_logistic(F.col(static_cast<Eigen::Index>(kind.head)).array(), kind.threshold, binding.tau);
          return kind.direction == knowledge::Direction::Greater ? s : Col(1.0 - s);
        }
      },
      binding.kind);
}

}  // namespace

// ---------------------------------------------------------------------------
// CompiledRule

double CompiledRule::eval(std::size_t node, std::span<const double> atoms) const {
  const Node& n = nodes_[node];
  if (n.op == Op::Atom) return atoms[n.binding];
  if (n.op == Op::Not) return 1.0 - eval(n.children[0], atoms);
  if (n.op == Op::Implies) return t_implies(tnorm_, eval(n.children[0], atoms), eval(n.children[1], atoms));
  if (n.op == Op::Iff) {
    double a = eval(n.children[0], atoms);
    double b = eval(n.children[1], atoms);
    double both[2] = {t_implies(tnorm_, a, b), t_implies(tnorm_, b, a)};
    return t_and(tnorm_, both);
  }
  double small[8];
  std::vector<double> large;
  std::span<double> vals;
  if (n.children.size() <= 8) {
    vals = std::span<double>(small, n.children.size());
  } else {
    large.resize(n.children.size());
    vals = large;
  }
  for (std::size_t i = 0; i < n.children.size(); ++i) vals[i] = eval(n.children[i], atoms);
  switch (n.op) {
    case Op::And: return t_and(tnorm_, vals);
    case Op::Or: return t_or(tnorm_, vals);
    default: return t_exactly_one(tnorm_, vals);
  }
}

std::vector<double> CompiledRule::atom_truths(std::span<const double> x, std::span<const double> f) const {
  std::vector<double> atoms(bindings_.size(), 0.0);
  std::vector<bool> used(bindings_.size(), false);
  for (const auto& n : nodes_) {
    if (n.op == Op::Atom) used[n.binding] = true;
  }
  for (std::size_t i = 0; i < bindings_.size(); ++i) {
    if (used[i]) atoms[i] = eval_predicate(bindings_[i], x, f);
  }
  return atoms;
}

double CompiledRule::truth_from_atoms(std::span<const double> atoms) const { return eval(root_, atoms); }

double CompiledRule::truth(std::span<const double> x, std::span<const double> f) const {
  return truth_from_atoms(atom_truths(x, f));
}

double CompiledRule::violation_from_atoms(std::span<const double> atoms) const {
  const Node& r = nodes_[root_];
  if (r.op == Op::Iff) {
    double a = eval(r.children[0], atoms);
    double b = eval(r.children[1], atoms);
    return apply_generator(generator_, t_implies(tnorm_, a, b)) + apply_generator(generator_, t_implies(tnorm_, b, a));
  }
  return apply_generator(generator_, eval(root_, atoms));
}

Eigen::ArrayXd CompiledRule::eval_columns(std::size_t node, const std::vector<Eigen::ArrayXd>& atoms) const {
  const Node& n = nodes_[node];
  if (n.op == Op::Atom) return atoms[n.binding];
  if (n.op == Op::Not) return 1.0 - eval_columns(n.children[0], atoms);
  if (n.op == Op::Implies) {
    return c_implies(tnorm_, eval_columns(n.children[0], atoms), eval_columns(n.children[1], atoms));
  }
  if (n.op == Op::Iff) {
    Col a = eval_columns(n.children[0], atoms);
    Col b = eval_columns(n.children[1], atoms);
    return c_and(tnorm_, {c_implies(tnorm_, a, b), c_implies(tnorm_, b, a)});
  }
  std::vector<Col> vals;
  vals.reserve(n.children.size());
  for (std::size_t c : n.children) vals.push_back(eval_columns(c, atoms));
  switch (n.op) {
    case Op::And: return c_and(tnorm_, vals);
    case Op::Or: return c_or(tnorm_, vals);
    default: return c_exactly_one(tnorm_, vals);
  }
}

Eigen::ArrayXd CompiledRule::violation_columns(const std::vector<Eigen::ArrayXd>& atoms) const {
  const Node& r = nodes_[root_];
  if (r.op == Op::Iff) {
    Col a = eval_columns(r.children[0], atoms);
    Col b = eval_columns(r.children[1], atoms);
    return c_generator(generator_, c_implies(tnorm_, a, b)) + c_generator(generator_, c_implies(tnorm_, b, a));
  }
  return c_generator(generator_, eval_columns(root_, atoms));
}

double CompiledRule::violation(std::span<const double> x, std::span<const double> f) const {
  return violation_from_atoms(atom_truths(x, f));
}

// ---------------------------------------------------------------------------
// Closed-form rendering

namespace {

// prec: 0 additive, 1 multiplicative, 2 primary
struct Expr {
  std::string text;
  int prec = 2;
};

std::string wrap(const Expr& e, int min_prec) { return e.prec < min_prec ? "(" + e.text + ")" : e.text; }

std::string join(const std::vector<Expr>& parts, const std::string& sep, int min_prec) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i > 0) out += sep;
    out += wrap(parts[i], min_prec);
  }
  return out;
}

Expr r_not(const Expr& a) { return {"1 - " + wrap(a, 1), 0}; }

Expr r_and(TNorm t, const std::vector<Expr>& v) {
  if (t == TNorm::Product) return {join(v, " * ", 1), 1};
  if (t == TNorm::Goedel) return {"min(" + join(v, ", ", 0) + ")", 2};
  return {"max(0, " + join(v, " + ", 0) + " - " + std::to_string(v.size() - 1) + ")", 2};
}

Expr r_or(TNorm t, const std::vector<Expr>& v) {
  if (t == TNorm::Product) {
    if (v.size() == 2) return {wrap(v[0], 1) + " + " + wrap(v[1], 1) + " - " + wrap(v[0], 1) + " * " + wrap(v[1], 1), 0};
    std::vector<Expr> neg;
    for (const auto& e : v) neg.push_back(r_not(e));
    return {"1 - " + join(neg, " * ", 1), 0};
  }
  if (t == TNorm::Goedel) return {"max(" + join(v, ", ", 0) + ")", 2};
  return {"min(1, " + join(v, " + ", 0) + ")", 2};
}

Expr r_implies(TNorm t, const Expr& a, const Expr& b) {
  if (t == TNorm::Product) return {"1 - " + wrap(a, 1) + " * " + wrap(r_not(b), 1), 0};
  if (t == TNorm::Lukasiewicz) return {"min(1, 1 - " + wrap(a, 1) + " + " + wrap(b, 1) + ")", 2};
  return {"(" + a.text + " <= " + b.text + " ? 1 : " + b.text + ")", 2};
}

Expr r_exactly_one(TNorm t, const std::vector<Expr>& v) {
  if (t == TNorm::Product) {
    if (v.size() == 2) return {wrap(v[0], 1) + " + " + wrap(v[1], 1) + " - 2 * " + wrap(v[0], 1) + " * " + wrap(v[1], 1), 0};
    std::vector<Expr> terms;
    for (std::size_t i = 0; i < v.size(); ++i) {
      std::vector<Expr> factors{v[i]};
      for (std::size_t j = 0; j < v.size(); ++j) {
        if (j != i) factors.push_back(r_not(v[j]));
      }
      terms.push_back(r_and(t, factors));
    }
    return {join(terms, " + ", 0), 0};
  }
  if (t == TNorm::Lukasiewicz) return {"abs(" + v[0].text + " - " + wrap(v[1], 1) + ")", 2};
  return {"max(min(" + v[0].text + ", " + r_not(v[1]).text + "), min(" + r_not(v[0]).text + ", " + v[1].text + "))", 2};
}

Expr r_violation(TNorm t, Generator g, const Expr& truth, const Expr* imp_lhs, const Expr* imp_rhs) {
  if (g == Generator::NegLog) return {"-log(" + truth.text + ")", 2};
  if (t == TNorm::Product && imp_lhs != nullptr) return {wrap(*imp_lhs, 1) + " * " + wrap(r_not(*imp_rhs), 1), 1};
  return {"1 - " + wrap(truth, 1), 0};
}

}  // namespace

std::vector<std::string> CompiledRule::closed_form() const {
  auto render = [&](auto&& self, std::size_t id) -> Expr {
    const Node& n = nodes_[id];
    if (n.op == Op::Atom) return {names_[n.binding], 2};
    std::vector<Expr> kids;
    for (std::size_t c : n.children) kids.push_back(self(self, c));
    switch (n.op) {
      case Op::Not: return r_not(kids[0]);
      case Op::And: return r_and(tnorm_, kids);
      case Op::Or: return r_or(tnorm_, kids);
      case Op::ExactlyOne: return r_exactly_one(tnorm_, kids);
      case Op::Implies: return r_implies(tnorm_, kids[0], kids[1]);
      default: {
        std::vector<Expr> both{r_implies(tnorm_, kids[0], kids[1]), r_implies(tnorm_, kids[1], kids[0])};
        return r_and(tnorm_, both);
      }
    }
  };
  const Node& root = nodes_[root_];
  auto text = [&](std::size_t i) {
    const Formula& c = formula_.children[i];
    std::string t = knowledge::to_string(c);
    return c.op == Op::Atom || c.op == Op::Not ? t : "(" + t + ")";
  };
  std::vector<std::string> lines;
  if (root.op == Op::Iff) {
    Expr a = render(render, root.children[0]);
    Expr b = render(render, root.children[1]);
    lines.push_back("phi[" + text(0) + " => " + text(1) + "] = " + r_violation(tnorm_, generator_, r_implies(tnorm_, a, b), &a, &b).text);
    lines.push_back("phi[" + text(1) + " => " + text(0) + "] = " + r_violation(tnorm_, generator_, r_implies(tnorm_, b, a), &b, &a).text);
  } else if (root.op == Op::Implies) {
    Expr a = render(render, root.children[0]);
    Expr b = render(render, root.children[1]);
    lines.push_back("phi = " + r_violation(tnorm_, generator_, r_implies(tnorm_, a, b), &a, &b).text);
  } else {
    lines.push_back("phi = " + r_violation(tnorm_, generator_, render(render, root_), nullptr, nullptr).text);
  }
  return lines;
}

// ---------------------------------------------------------------------------
// compile

namespace {

void check_supported(const Formula& f, TNorm t) {
  if (f.op == Op::ExactlyOne && t != TNorm::Product && f.children.size() > 2) {
    throw UnsupportedLowering("unsupported lowering: " + std::to_string(f.children.size()) + "-ary xor under " +
                              std::string(to_string(t)) + " (only the product t-norm lowers n-ary xor)");
  }
  for (const auto& c : f.children) check_supported(c, t);
}

}  // namespace

CompiledRule compile(const Formula& formula, const knowledge::KnowledgeBase& kb, TNorm tnorm, Generator gen) {
  check_supported(formula, tnorm);
  CompiledRule rule;
  rule.tnorm_ = tnorm;
  rule.generator_ = gen;
  rule.bindings_ = kb.bindings();
  for (const auto& b : rule.bindings_) rule.names_.push_back(b.name);
  auto lower = [&](auto&& self, const Formula& f) -> std::size_t {
    CompiledRule::Node node{f.op, 0, {}};
    if (f.op == Op::Atom) node.binding = kb.binding_index(f.name);
    for (const auto& c : f.children) node.children.push_back(self(self, c));
    rule.nodes_.push_back(std::move(node));
    return rule.nodes_.size() - 1;
  };
  rule.root_ = lower(lower, formula);
  rule.formula_ = formula;
  return rule;
}

// ---------------------------------------------------------------------------
// Knowledge-level evaluation

CompiledKnowledge::CompiledKnowledge(const knowledge::KnowledgeBase& kb, TNorm tnorm, Generator gen) : kb_(kb) {
  for (const auto& r : kb_.rules()) {
    CompiledRule c = compile(r.formula, kb_, tnorm, gen);
    c.id_ = r.id;
    c.is_uncertainty_ = r.is_uncertainty;
    rules_.push_back(std::move(c));
  }
}

Eigen::MatrixXd CompiledKnowledge::violation_matrix(const Eigen::MatrixXd& X, const Eigen::MatrixXd& F) const {
  const auto& schema = kb_.schema();
  if (X.rows() != F.rows()) throw ContractError("violation_matrix: X and F have different sample counts");
  if (static_cast<std::size_t>(X.cols()) != schema.input_dim) {
    throw ContractError("violation_matrix: X has " + std::to_string(X.cols()) + " columns, schema expects " +
                        std::to_string(schema.input_dim));
  }
  if (static_cast<std::size_t>(F.cols()) != schema.output_dim) {
    throw ContractError("violation_matrix: F has " + std::to_string(F.cols()) + " columns, schema expects " +
                        std::to_string(schema.output_dim));
  }
  const auto& bindings = kb_.bindings();
  std::vector<bool> used(bindings.size(), false);
  for (const auto& rule : rules_) {
    for (const auto& n : rule.nodes_) {
      if (n.op == Op::Atom) used[n.binding] = true;
    }
  }
  std::vector<Eigen::ArrayXd> atoms(bindings.size());
  for (std::size_t b = 0; b < bindings.size(); ++b) {
    if (used[b]) atoms[b] = predicate_column(bindings[b], X, F);
  }
  Eigen::MatrixXd V(X.rows(), static_cast<Eigen::Index>(rules_.size()));
  if (X.rows() == 0) return V;
  for (std::size_t r = 0; r < rules_.size(); ++r) {
    V.col(static_cast<Eigen::Index>(r)) = rules_[r].violation_columns(atoms).matrix();
  }
  return V;
}

Eigen::MatrixXd violation_matrix(const knowledge::KnowledgeBase& kb, const Eigen::MatrixXd& X,
                                 const Eigen::MatrixXd& F, TNorm tnorm, Generator gen) {
  return CompiledKnowledge(kb, tnorm, gen).violation_matrix(X, F);
}

}  // namespace kal::lowering
