#include "kal/knowledge.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <set>
#include <sstream>
#include <unordered_map>
#include <utility>

namespace kal {

std::string_view to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::Binary: return "binary";
    case TaskKind::Multiclass: return "multiclass";
    case TaskKind::Multilabel: return "multilabel";
    case TaskKind::Regression: return "regression";
  }
  return "?";
}

TaskKind task_kind_from_string(std::string_view text) {
  if (text == "binary") return TaskKind::Binary;
  if (text == "multiclass") return TaskKind::Multiclass;
  if (text == "multilabel") return TaskKind::Multilabel;
  if (text == "regression") return TaskKind::Regression;
  throw ContractError("unknown task kind '" + std::string(text) + "'");
}

}  // namespace kal

namespace kal::knowledge {

KnowledgeError::KnowledgeError(const std::string& message, std::size_t line, std::size_t column)
    : std::runtime_error(line == 0 ? message
                                   : std::to_string(line) + ":" + std::to_string(column) + ": " + message),
      line_(line),
      column_(column) {}

// ---------------------------------------------------------------------------
// Formula factories

Formula Formula::atom(std::string name) {
  Formula f;
  f.op = Op::Atom;
  f.name = std::move(name);
  return f;
}

Formula Formula::negate(Formula operand) {
  Formula f;
  f.op = Op::Not;
  f.children.push_back(std::move(operand));
  return f;
}

namespace {

Formula nary(Formula::Op op, std::vector<Formula> operands) {
  Formula f;
  f.op = op;
  f.children = std::move(operands);
  return f;
}

}  // namespace

Formula Formula::all_of(std::vector<Formula> operands) { return nary(Op::And, std::move(operands)); }
Formula Formula::any_of(std::vector<Formula> operands) { return nary(Op::Or, std::move(operands)); }
Formula Formula::exactly_one(std::vector<Formula> operands) { return nary(Op::ExactlyOne, std::move(operands)); }

Formula Formula::implies(Formula antecedent, Formula consequent) {
  return nary(Op::Implies, {std::move(antecedent), std::move(consequent)});
}

Formula Formula::iff(Formula lhs, Formula rhs) { return nary(Op::Iff, {std::move(lhs), std::move(rhs)}); }

// ---------------------------------------------------------------------------
// Printing

std::string format_real(double value) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), value);
  if (ec != std::errc()) throw ContractError("cannot format real");
  return std::string(buf, end);
}

namespace {

const char* infix(Formula::Op op) {
  switch (op) {
    case Formula::Op::And: return " and ";
    case Formula::Op::Or: return " or ";
    case Formula::Op::ExactlyOne: return " xor ";
    case Formula::Op::Implies: return " => ";
    case Formula::Op::Iff: return " <=> ";
    default: return " ";
  }
}

void print(const Formula& f, std::ostringstream& out, bool top);

void print_operand(const Formula& f, std::ostringstream& out) {
  if (f.op == Formula::Op::Atom || f.op == Formula::Op::Not) {
    print(f, out, false);
  } else {
    out << '(';
    print(f, out, true);
    out << ')';
  }
}

void print(const Formula& f, std::ostringstream& out, bool) {
  switch (f.op) {
    case Formula::Op::Atom:
      out << f.name;
      return;
    case Formula::Op::Not:
      out << "not ";
      print_operand(f.children.front(), out);
      return;
    default:
      for (std::size_t i = 0; i < f.children.size(); ++i) {
        if (i > 0) out << infix(f.op);
        print_operand(f.children[i], out);
      }
  }
}

const char* direction_symbol(Direction d) { return d == Direction::Greater ? ">" : "<"; }

}  // namespace

std::string to_string(const Formula& formula) {
  std::ostringstream out;
  print(formula, out, true);
  return out.str();
}

std::string to_string(const PredicateBinding& binding) {
  std::ostringstream out;
  std::visit(
      [&](const auto& kind) {
        using K = std::decay_t<decltype(kind)>;
        if constexpr (std::is_same_v<K, InputThreshold>) {
          out << "input " << binding.name << " = feature(" << kind.feature << ") "
              << direction_symbol(kind.direction) << ' ' << format_real(kind.threshold);
        } else if constexpr (std::is_same_v<K, OutputClass>) {
          out << "output " << binding.name << " = class(" << kind.head << ")";
        } else {
          out << "output " << binding.name << " = value(" << kind.head << ") " << direction_symbol(kind.direction)
              << ' ' << format_real(kind.threshold);
        }
      },
      binding.kind);
  if (binding.tau != kDefaultTau) out << " tau " << format_real(binding.tau);
  return out.str();
}

std::string to_dsl(const KnowledgeBase& kb) {
  std::ostringstream out;
  for (const auto& b : kb.bindings()) out << to_string(b) << '\n';
  for (const auto& r : kb.rules()) out << "rule " << r.id << ": " << to_string(r.formula) << '\n';
  return out.str();
}

// ---------------------------------------------------------------------------
// Validation

namespace {

void check_formula(const Formula& f, const std::map<std::string, std::size_t, std::less<>>& index,
                   const std::string& rule_id) {
  switch (f.op) {
    case Formula::Op::Atom:
      if (!index.contains(f.name)) {
        throw KnowledgeError("rule '" + rule_id + "': unbound predicate '" + f.name + "'");
      }
      if (!f.children.empty()) throw KnowledgeError("rule '" + rule_id + "': atom with operands");
      return;
    case Formula::Op::Not:
      if (f.children.size() != 1) throw KnowledgeError("rule '" + rule_id + "': negation needs one operand");
      break;
    case Formula::Op::Implies:
    case Formula::Op::Iff:
      if (f.children.size() != 2) throw KnowledgeError("rule '" + rule_id + "': binary connective arity");
      break;
    default:
      if (f.children.size() < 2) {
        throw KnowledgeError("rule '" + rule_id + "': and/or/xor need at least two operands");
      }
  }
  for (const auto& c : f.children) check_formula(c, index, rule_id);
}

bool is_identifier(std::string_view s) {
  if (s.empty() || !(std::isalpha(static_cast<unsigned char>(s[0])) || s[0] == '_')) return false;
  return std::all_of(s.begin(), s.end(), [](char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_'; });
}

}  // namespace

KnowledgeBase::KnowledgeBase(Schema schema, std::vector<PredicateBinding> bindings, std::vector<Rule> rules)
    : schema_(schema), bindings_(std::move(bindings)), rules_(std::move(rules)) {
  if (schema_.input_dim == 0 || schema_.output_dim == 0) {
    throw KnowledgeError("schema dimensions must be positive");
  }
  if (schema_.task == TaskKind::Binary && schema_.output_dim != 1) {
    throw KnowledgeError("binary schema has exactly one output head");
  }
  for (std::size_t i = 0; i < bindings_.size(); ++i) {
    const auto& b = bindings_[i];
    if (!is_identifier(b.name)) throw KnowledgeError("invalid predicate name '" + b.name + "'");
    if (!(b.tau > 0.0) || !std::isfinite(b.tau)) {
      throw KnowledgeError("predicate '" + b.name + "': tau must be positive");
    }
    if (!index_.emplace(b.name, i).second) throw KnowledgeError("duplicate binding '" + b.name + "'");
    std::visit(
        [&](const auto& kind) {
          using K = std::decay_t<decltype(kind)>;
          if constexpr (std::is_same_v<K, InputThreshold>) {
            if (kind.feature >= schema_.input_dim) {
              throw KnowledgeError("predicate '" + b.name + "': feature index " + std::to_string(kind.feature) +
                                   " out of range (input dimension " + std::to_string(schema_.input_dim) + ")");
            }
            if (!std::isfinite(kind.threshold)) throw KnowledgeError("predicate '" + b.name + "': bad threshold");
          } else {
            if (kind.head >= schema_.output_dim) {
              throw KnowledgeError("predicate '" + b.name + "': head index " + std::to_string(kind.head) +
                                   " out of range (output dimension " + std::to_string(schema_.output_dim) + ")");
            }
            if constexpr (std::is_same_v<K, OutputClass>) {
              if (schema_.task == TaskKind::Regression) {
                throw KnowledgeError("predicate '" + b.name + "': class() binding on a regression schema");
              }
            } else {
              if (schema_.task != TaskKind::Regression) {
                throw KnowledgeError("predicate '" + b.name + "': value() binding needs a regression schema");
              }
              if (!std::isfinite(kind.threshold)) throw KnowledgeError("predicate '" + b.name + "': bad threshold");
            }
          }
        },
        b.kind);
  }
  std::set<std::string, std::less<>> ids;
  std::size_t uncertainty = 0;
  for (const auto& r : rules_) {
    if (!is_identifier(r.id)) throw KnowledgeError("invalid rule id '" + r.id + "'");
    if (!ids.insert(r.id).second) throw KnowledgeError("duplicate rule id '" + r.id + "'");
    if (r.is_uncertainty != (r.id == kUncertaintyRuleId)) {
      throw KnowledgeError("rule '" + r.id + "': uncertainty flag must match the reserved id");
    }
    uncertainty += r.is_uncertainty ? 1 : 0;
    check_formula(r.formula, index_, r.id);
  }
  if (uncertainty > 1) throw KnowledgeError("at most one uncertainty rule");
}

const PredicateBinding* KnowledgeBase::find_binding(std::string_view name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &bindings_[it->second];
}

std::size_t KnowledgeBase::binding_index(std::string_view name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw KnowledgeError("unbound predicate '" + std::string(name) + "'");
  return it->second;
}

bool KnowledgeBase::has_uncertainty_rule() const {
  return std::any_of(rules_.begin(), rules_.end(), [](const Rule& r) { return r.is_uncertainty; });
}

KnowledgeBase KnowledgeBase::truncated(std::size_t count, bool keep_uncertainty) const {
  std::vector<Rule> kept;
  std::size_t taken = 0;
  for (const auto& r : rules_) {
    if (r.is_uncertainty) {
      if (keep_uncertainty) kept.push_back(r);
    } else if (taken < count) {
      kept.push_back(r);
      ++taken;
    }
  }
  return KnowledgeBase(schema_, bindings_, std::move(kept));
}

KnowledgeBase KnowledgeBase::without_uncertainty_rule() const {
  return truncated(rules_.size(), false);
}

// ---------------------------------------------------------------------------
// Uncertainty rule

KnowledgeBase add_uncertainty_rule(const KnowledgeBase& kb) {
  if (kb.has_uncertainty_rule()) throw KnowledgeError("knowledge base already has an uncertainty rule");
  const Schema& schema = kb.schema();
  if (schema.task == TaskKind::Regression) {
    throw KnowledgeError("uncertainty rule applies to classification heads, not regression outputs");
  }
  auto bindings = kb.bindings();
  std::vector<std::string> head_names(schema.output_dim);
  for (const auto& b : bindings) {
    if (const auto* oc = std::get_if<OutputClass>(&b.kind); oc && head_names[oc->head].empty()) {
      head_names[oc->head] = b.name;
    }
  }
  for (std::size_t h = 0; h < head_names.size(); ++h) {
    if (!head_names[h].empty()) continue;
    std::string name = "head" + std::to_string(h);
    while (kb.find_binding(name) != nullptr) name += "_";
    bindings.push_back({name, OutputClass{h}, kDefaultTau});
    head_names[h] = name;
  }
  std::vector<Formula> terms;
  for (const auto& name : head_names) {
    terms.push_back(Formula::exactly_one({Formula::atom(name), Formula::negate(Formula::atom(name))}));
  }
  Formula formula = terms.size() == 1 ? std::move(terms.front()) : Formula::all_of(std::move(terms));
  auto rules = kb.rules();
  rules.push_back({std::string(kUncertaintyRuleId), std::move(formula), true});
  return KnowledgeBase(schema, std::move(bindings), std::move(rules));
}

// ---------------------------------------------------------------------------
// Lexer / parser

namespace {

enum class Tok { Name, Int, Real, Symbol, End };

struct Token {
  Tok kind = Tok::End;
  std::string text;
  std::size_t line = 0;
  std::size_t column = 0;
};

const std::set<std::string, std::less<>> kKeywords = {"input", "output", "rule", "feature", "class", "value",
                                                      "tau",   "not",    "and",  "or",      "xor"};

class Lexer {
 public:
  explicit Lexer(std::string_view text) : text_(text) {}

  std::vector<Token> run() {
    std::vector<Token> out;
    while (true) {
      skip_space();
      Token t;
      t.line = line_;
      t.column = column_;
      if (pos_ >= text_.size()) {
        t.kind = Tok::End;
        out.push_back(t);
        return out;
      }
      char c = text_[pos_];
      if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
        t.kind = Tok::Name;
        while (pos_ < text_.size() && (std::isalnum(static_cast<unsigned char>(text_[pos_])) || text_[pos_] == '_')) {
          t.text += advance();
        }
      } else if (std::isdigit(static_cast<unsigned char>(c)) || c == '.' ||
                 ((c == '-' || c == '+') && pos_ + 1 < text_.size() &&
                  (std::isdigit(static_cast<unsigned char>(text_[pos_ + 1])) || text_[pos_ + 1] == '.'))) {
        lex_number(t);
      } else if (match("<=>") || match("=>")) {
        t.kind = Tok::Symbol;
        t.text = last_;
      } else if (std::string_view("()=:<>").find(c) != std::string_view::npos) {
        t.kind = Tok::Symbol;
        t.text = std::string(1, advance());
      } else {
        throw KnowledgeError(std::string("unexpected character '") + c + "'", t.line, t.column);
      }
      out.push_back(std::move(t));
    }
  }

 private:
  char advance() {
    char c = text_[pos_++];
    if (c == '\n') {
      ++line_;
      column_ = 1;
    } else {
      ++column_;
    }
    return c;
  }

  bool match(std::string_view sym) {
    if (text_.substr(pos_, sym.size()) != sym) return false;
    for (std::size_t i = 0; i < sym.size(); ++i) advance();
    last_ = std::string(sym);
    return true;
  }

  void skip_space() {
    while (pos_ < text_.size()) {
      char c = text_[pos_];
      if (c == '#') {
        while (pos_ < text_.size() && text_[pos_] != '\n') advance();
      } else if (std::isspace(static_cast<unsigned char>(c))) {
        advance();
      } else {
        return;
      }
    }
  }

  void lex_number(Token& t) {
    bool real = false;
    auto digits = [&] {
      std::size_t n = 0;
      while (pos_ < text_.size() && std::isdigit(static_cast<unsigned char>(text_[pos_]))) {
        t.text += advance();
        ++n;
      }
      return n;
    };
    if (text_[pos_] == '-' || text_[pos_] == '+') {
      t.text += advance();
      real = true;
    }
    std::size_t n = digits();
    if (pos_ < text_.size() && text_[pos_] == '.') {
      real = true;
      t.text += advance();
      n += digits();
    }
    if (n == 0) throw KnowledgeError("malformed number", t.line, t.column);
    if (pos_ < text_.size() && (text_[pos_] == 'e' || text_[pos_] == 'E')) {
      real = true;
      t.text += advance();
      if (pos_ < text_.size() && (text_[pos_] == '-' || text_[pos_] == '+')) t.text += advance();
      if (digits() == 0) throw KnowledgeError("malformed exponent", t.line, t.column);
    }
    t.kind = real ? Tok::Real : Tok::Int;
  }

  std::string_view text_;
  std::size_t pos_ = 0;
  std::size_t line_ = 1;
  std::size_t column_ = 1;
  std::string last_;
};

class Parser {
 public:
  Parser(std::vector<Token> tokens, const Schema& schema) : tokens_(std::move(tokens)), schema_(schema) {}

  KnowledgeBase run() {
    while (peek().kind != Tok::End) {
      const Token& t = peek();
      if (is_word(t, "input") || is_word(t, "output")) {
        declaration();
      } else if (is_word(t, "rule")) {
        rule();
      } else {
        fail("expected 'input', 'output' or 'rule'", t);
      }
    }
    for (const auto& [name, where] : atom_sites_) {
      if (!declared_.contains(name)) fail("unbound predicate '" + name + "'", where);
    }
    return KnowledgeBase(schema_, std::move(bindings_), std::move(rules_));
  }

 private:
  static bool is_word(const Token& t, std::string_view w) { return t.kind == Tok::Name && t.text == w; }
  static bool is_symbol(const Token& t, std::string_view s) { return t.kind == Tok::Symbol && t.text == s; }

  [[noreturn]] static void fail(const std::string& message, const Token& at) {
    throw KnowledgeError(message, at.line, at.column);
  }

  const Token& peek() const { return tokens_[pos_]; }
  const Token& next() { return tokens_[pos_ == tokens_.size() - 1 ? pos_ : pos_++]; }

  const Token& expect_symbol(std::string_view s) {
    const Token& t = next();
    if (!is_symbol(t, s)) fail("expected '" + std::string(s) + "'", t);
    return t;
  }

  void expect_word(std::string_view w) {
    const Token& t = next();
    if (!is_word(t, w)) fail("expected '" + std::string(w) + "'", t);
  }

  const Token& identifier(const char* what) {
    const Token& t = next();
    if (t.kind != Tok::Name || kKeywords.contains(t.text)) fail(std::string("expected ") + what, t);
    return t;
  }

  double real() {
    const Token& t = next();
    if (t.kind != Tok::Int && t.kind != Tok::Real) fail("expected a number", t);
    double v = 0.0;
    const char* b = t.text.data();
    if (*b == '+') ++b;
    auto [end, ec] = std::from_chars(b, t.text.data() + t.text.size(), v);
    if (ec != std::errc() || end != t.text.data() + t.text.size()) fail("malformed number '" + t.text + "'", t);
    return v;
  }

  void declaration() {
    bool is_input = next().text == "input";
    const Token& name_tok = identifier("a predicate name");
    std::string name = name_tok.text;
    if (declared_.contains(name)) fail("duplicate binding '" + name + "'", name_tok);
    expect_symbol("=");
    const Token& kind_tok = next();
    std::string kind = kind_tok.text;
    if (kind_tok.kind != Tok::Name || (kind != "feature" && kind != "class" && kind != "value")) {
      fail("expected 'feature', 'class' or 'value'", kind_tok);
    }
    expect_symbol("(");
    const Token& index_tok = next();
    if (index_tok.kind != Tok::Int) fail("expected a non-negative integer index", index_tok);
    std::size_t index = std::stoull(index_tok.text);
    expect_symbol(")");

    std::optional<std::pair<Direction, double>> threshold;
    if (is_symbol(peek(), "<") || is_symbol(peek(), ">")) {
      Direction d = next().text == ">" ? Direction::Greater : Direction::Less;
      threshold = std::make_pair(d, real());
    }
    double tau = kDefaultTau;
    if (is_word(peek(), "tau")) {
      next();
      const Token& at = peek();
      tau = real();
      if (!(tau > 0.0)) fail("tau must be positive", at);
    }

    PredicateBinding b{name, OutputClass{}, tau};
    if (kind == "feature") {
      if (!is_input) fail("feature() belongs in an input declaration", kind_tok);
      if (!threshold) fail("feature predicate needs '<' or '>' and a threshold", kind_tok);
      if (index >= schema_.input_dim) fail("feature index " + std::to_string(index) + " out of range", index_tok);
      b.kind = InputThreshold{index, threshold->first, threshold->second};
    } else {
      if (is_input) fail(kind + "() belongs in an output declaration", kind_tok);
      if (index >= schema_.output_dim) fail("head index " + std::to_string(index) + " out of range", index_tok);
      if (kind == "class") {
        if (threshold) fail("class() takes no threshold", kind_tok);
        b.kind = OutputClass{index};
      } else {
        if (!threshold) fail("value predicate needs '<' or '>' and a threshold", kind_tok);
        b.kind = OutputThreshold{index, threshold->first, threshold->second};
      }
    }
    declared_.insert(name);
    bindings_.push_back(std::move(b));
  }

  void rule() {
    next();
    const Token& id_tok = identifier("a rule id");
    for (const auto& r : rules_) {
      if (r.id == id_tok.text) fail("duplicate rule id '" + id_tok.text + "'", id_tok);
    }
    expect_symbol(":");
    Formula f = expr();
    bool unc = id_tok.text == kUncertaintyRuleId;
    rules_.push_back({id_tok.text, std::move(f), unc});
  }

  Formula expr() { return iff(); }

  Formula iff() {
    Formula lhs = imp();
    while (is_symbol(peek(), "<=>")) {
      next();
      lhs = Formula::iff(std::move(lhs), imp());
    }
    return lhs;
  }

  // right associative: a => b => c is a => (b => c)
  Formula imp() {
    Formula lhs = chain(Formula::Op::ExactlyOne);
    if (is_symbol(peek(), "=>")) {
      next();
      return Formula::implies(std::move(lhs), imp());
    }
    return lhs;
  }

  Formula chain(Formula::Op op) {
    const char* word = op == Formula::Op::ExactlyOne ? "xor" : op == Formula::Op::Or ? "or" : "and";
    auto sub = [&] {
      if (op == Formula::Op::ExactlyOne) return chain(Formula::Op::Or);
      if (op == Formula::Op::Or) return chain(Formula::Op::And);
      return unary();
    };
    std::vector<Formula> parts;
    parts.push_back(sub());
    while (is_word(peek(), word)) {
      next();
      parts.push_back(sub());
    }
    if (parts.size() == 1) return std::move(parts.front());
    Formula f;
    f.op = op;
    f.children = std::move(parts);
    return f;
  }

  Formula unary() {
    const Token& t = peek();
    if (is_word(t, "not")) {
      next();
      return Formula::negate(unary());
    }
    if (is_symbol(t, "(")) {
      next();
      Formula f = expr();
      expect_symbol(")");
      return f;
    }
    const Token& name = identifier("a predicate name, 'not' or '('");
    atom_sites_.emplace(name.text, name);
    return Formula::atom(name.text);
  }

  std::vector<Token> tokens_;
  std::size_t pos_ = 0;
  Schema schema_;
  std::vector<PredicateBinding> bindings_;
  std::vector<Rule> rules_;
  std::set<std::string, std::less<>> declared_;
  std::map<std::string, Token, std::less<>> atom_sites_;
};

}  // namespace

KnowledgeBase parse_knowledge(std::string_view text, const Schema& schema) {
  if (schema.input_dim == 0 || schema.output_dim == 0) throw KnowledgeError("schema dimensions must be positive");
  return Parser(Lexer(text).run(), schema).run();
}

}  // namespace kal::knowledge
