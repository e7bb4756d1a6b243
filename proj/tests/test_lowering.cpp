#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>

#include "kal/data.hpp"
#include "kal/lowering.hpp"
#include "support.hpp"

using namespace kal;
using namespace kal::lowering;
using knowledge::Formula;
using knowledge::parse_knowledge;

namespace {

const Schema kXor{2, 1, TaskKind::Binary};

knowledge::KnowledgeBase xor_kb() { return parse_knowledge(data::xor_knowledge(), kXor); }

// Hard-valued atoms: a binding truth of exactly 0 or 1 for the xor rule's three predicates.
double xor_violation(const CompiledRule& r, double x1, double x2, double f) {
  std::vector<double> atoms{x1, x2, f};
  return r.violation_from_atoms(atoms);
}

knowledge::KnowledgeBase two_atoms() {
  return parse_knowledge("input a = feature(0) > 0.5\ninput b = feature(1) > 0.5\n", kXor);
}

double binary_truth(const char* expr, TNorm t, double a, double b) {
  auto kb = parse_knowledge(std::string("input a = feature(0) > 0.5\ninput b = feature(1) > 0.5\nrule r: ") + expr,
                            kXor);
  std::vector<double> atoms{a, b};
  return compile(kb.rules()[0].formula, kb, t).truth_from_atoms(atoms);
}

}  // namespace

TEST_CASE("connective tables") {
  const double a = 0.7, b = 0.4;
  CHECK(binary_truth("a and b", TNorm::Product, a, b) == doctest::Approx(0.28));
  CHECK(binary_truth("a or b", TNorm::Product, a, b) == doctest::Approx(0.82));
  CHECK(binary_truth("not a", TNorm::Product, a, b) == doctest::Approx(0.3));
  CHECK(binary_truth("a => b", TNorm::Product, a, b) == doctest::Approx(1 - 0.7 * 0.6));

  CHECK(binary_truth("a and b", TNorm::Lukasiewicz, a, b) == doctest::Approx(0.1));
  CHECK(binary_truth("a and b", TNorm::Lukasiewicz, 0.3, 0.4) == 0.0);
  CHECK(binary_truth("a or b", TNorm::Lukasiewicz, a, b) == 1.0);
  CHECK(binary_truth("a => b", TNorm::Lukasiewicz, a, b) == doctest::Approx(0.7));

  CHECK(binary_truth("a and b", TNorm::Goedel, a, b) == 0.4);
  CHECK(binary_truth("a or b", TNorm::Goedel, a, b) == 0.7);
  CHECK(binary_truth("a => b", TNorm::Goedel, a, b) == 0.4);
  CHECK(binary_truth("a => b", TNorm::Goedel, b, a) == 1.0);
}

TEST_CASE("product exactly-one") {
  CHECK(binary_truth("a xor b", TNorm::Product, 0.3, 0.6) == doctest::Approx(0.3 + 0.6 - 2 * 0.18));
  auto kb = parse_knowledge(
      "input a = feature(0) > 0.5\ninput b = feature(1) > 0.5\noutput c = class(0)\nrule r: a xor b xor c\n", kXor);
  std::vector<double> atoms{0.2, 0.5, 0.9};
  const double expect = 0.2 * 0.5 * 0.1 + 0.5 * 0.8 * 0.1 + 0.9 * 0.8 * 0.5;
  CHECK(compile(kb.rules()[0].formula, kb).truth_from_atoms(atoms) == doctest::Approx(expect));
}

TEST_CASE("n-ary exactly-one outside product is unsupported") {
  auto kb = parse_knowledge(
      "input a = feature(0) > 0.5\ninput b = feature(1) > 0.5\noutput c = class(0)\nrule r: a xor b xor c\n", kXor);
  CHECK_THROWS_AS(compile(kb.rules()[0].formula, kb, TNorm::Lukasiewicz), UnsupportedLowering);
  CHECK_THROWS_AS(compile(kb.rules()[0].formula, kb, TNorm::Goedel), UnsupportedLowering);
  CHECK_NOTHROW(compile(kb.rules()[0].formula, kb, TNorm::Product));
}

TEST_CASE("boolean corners match truth tables") {
  for (auto t : {TNorm::Product, TNorm::Lukasiewicz, TNorm::Goedel}) {
    std::size_t bad = 0;
    for (std::uint64_t seed = 0; seed < 150; ++seed) {
      testing::FormulaGen gen(seed, 6, t != TNorm::Product);
      knowledge::KnowledgeBase kb(Schema{6, 1, TaskKind::Binary}, testing::atom_bindings(6), {});
      bad += testing::corner_mismatches(gen(4), kb, t);
    }
    CHECK(bad == 0);
  }
}

TEST_CASE("predicates") {
  knowledge::PredicateBinding gt{"g", knowledge::InputThreshold{0, knowledge::Direction::Greater, 0.3}};
  knowledge::PredicateBinding lt{"l", knowledge::InputThreshold{0, knowledge::Direction::Less, 0.3}};
  std::vector<double> x{0.3}, f{1.0};
  CHECK(eval_predicate(gt, x, f) == 0.5);
  CHECK(eval_predicate(lt, x, f) == 0.5);
  x[0] = 0.6;
  CHECK(eval_predicate(gt, x, f) == doctest::Approx(1 / (1 + std::exp(-3.0))));
  CHECK(eval_predicate(gt, x, f) + eval_predicate(lt, x, f) == doctest::Approx(1.0));

  knowledge::PredicateBinding cls{"c", knowledge::OutputClass{0}};
  CHECK(eval_predicate(cls, x, f) == 1.0);
  f[0] = 1.2;
  CHECK(eval_predicate(cls, x, f) == 1.0);
  f[0] = -0.1;
  CHECK(eval_predicate(cls, x, f) == 0.0);
}

TEST_CASE("charge threshold in thousands saturates") {
  knowledge::PredicateBinding over{"Over", knowledge::OutputThreshold{0, knowledge::Direction::Greater, 7.5}};
  std::vector<double> x{0.0}, f{20.0};
  const double got = eval_predicate(over, x, f);
  CHECK(got == doctest::Approx(1.0 / (1.0 + std::exp(-10.0 * 12.5))).epsilon(1e-15));
  CHECK(std::abs(got - 1.0) < 1e-3);
}

TEST_CASE("xor biconditional examples") {
  auto kb = xor_kb();
  auto rule = compile(kb.rules()[0].formula, kb);
  CHECK(xor_violation(rule, 1, 0, 1) == 0.0);
  CHECK(xor_violation(rule, 1, 0, 0) == 1.0);
  CHECK(xor_violation(rule, 0, 0, 0) == 0.0);
  CHECK(xor_violation(rule, 1, 1, 1) == 1.0);
}

TEST_CASE("conjunctive implication example") {
  auto kb = parse_knowledge(
      "input x1 = feature(0) > 0.5\ninput x2 = feature(1) > 0.5\noutput f = class(0)\nrule r: x1 and x2 => f\n", kXor);
  auto rule = compile(kb.rules()[0].formula, kb);
  std::vector<double> atoms{0.5, 0.5, 0.0};
  CHECK(rule.violation_from_atoms(atoms) == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("xor closed form on random triples") {
  auto kb = xor_kb();
  auto rule = compile(kb.rules()[0].formula, kb);
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const double a = u(rng), b = u(rng), f = u(rng);
    const double x = a + b - 2 * a * b;
    worst = std::max(worst, std::abs(xor_violation(rule, a, b, f) - (x * (1 - f) + f * (1 - x))));
  }
  CHECK(worst < 1e-12);
}

TEST_CASE("violation range and generator") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    testing::FormulaGen gen(seed, 4);
    knowledge::KnowledgeBase kb(Schema{4, 1, TaskKind::Binary}, testing::atom_bindings(4), {});
    auto f = gen(3);
    auto one = compile(f, kb, TNorm::Product, Generator::OneMinus);
    auto nl = compile(f, kb, TNorm::Product, Generator::NegLog);
    for (int i = 0; i < 20; ++i) {
      std::vector<double> atoms{u(rng), u(rng), u(rng), u(rng), 0.0};
      const double v = one.violation_from_atoms(atoms);
      const double w = nl.violation_from_atoms(atoms);
      const double bound = f.op == Formula::Op::Iff ? 2.0 : 1.0;
      CHECK(v >= 0.0);
      CHECK(v <= bound + 1e-12);
      CHECK(w >= 0.0);
      if (f.op != Formula::Op::Iff) CHECK((v == 0.0) == (w == 0.0));
    }
  }
  CHECK(apply_generator(Generator::OneMinus, 1.0) == 0.0);
  CHECK(apply_generator(Generator::NegLog, 1.0) == 0.0);
  CHECK(apply_generator(Generator::NegLog, 0.5) == doctest::Approx(std::log(2.0)));
}

TEST_CASE("implication monotonicity") {
  auto kb = two_atoms();
  auto rule = compile(Formula::implies(Formula::atom("a"), Formula::atom("b")), kb);
  for (int i = 0; i <= 10; ++i) {
    for (int j = 0; j < 10; ++j) {
      std::vector<double> lo{j / 10.0, i / 10.0}, hi{(j + 1) / 10.0, i / 10.0};
      CHECK(rule.violation_from_atoms(lo) <= rule.violation_from_atoms(hi));
      std::vector<double> blo{i / 10.0, j / 10.0}, bhi{i / 10.0, (j + 1) / 10.0};
      CHECK(rule.violation_from_atoms(blo) >= rule.violation_from_atoms(bhi));
    }
  }
}

TEST_CASE("uncertainty rule is 2f(1-f)") {
  auto kb = knowledge::add_uncertainty_rule(knowledge::KnowledgeBase(kXor, {}, {}));
  CompiledKnowledge ck(kb);
  Eigen::MatrixXd X = Eigen::MatrixXd::Zero(101, 2);
  Eigen::MatrixXd F(101, 1);
  for (int i = 0; i <= 100; ++i) F(i, 0) = i / 100.0;
  auto V = ck.violation_matrix(X, F);
  REQUIRE(V.cols() == 1);
  for (int i = 0; i <= 100; ++i) CHECK(V(i, 0) == doctest::Approx(2 * F(i, 0) * (1 - F(i, 0))).epsilon(1e-14));
  Eigen::Index best;
  V.col(0).maxCoeff(&best);
  CHECK(best == 50);
}

TEST_CASE("empty knowledge gives zero columns") {
  CompiledKnowledge ck(knowledge::KnowledgeBase(kXor, {}, {}));
  auto V = ck.violation_matrix(Eigen::MatrixXd::Random(5, 2), Eigen::MatrixXd::Constant(5, 1, 0.3));
  CHECK(V.rows() == 5);
  CHECK(V.cols() == 0);
  CHECK(V.rowwise().sum().isZero());
}

TEST_CASE("violation matrix matches per-sample evaluation") {
  auto kb = knowledge::add_uncertainty_rule(parse_knowledge(data::iris_knowledge(), Schema{4, 3, TaskKind::Multiclass}));
  CompiledKnowledge ck(kb);
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Eigen::MatrixXd X(40, 4), F(40, 3);
  for (Eigen::Index i = 0; i < X.size(); ++i) X.data()[i] = u(rng);
  for (Eigen::Index i = 0; i < F.size(); ++i) F.data()[i] = u(rng);
  auto V = ck.violation_matrix(X, F);
  REQUIRE(V.cols() == static_cast<Eigen::Index>(kb.rules().size()));
  for (Eigen::Index s = 0; s < 40; ++s) {
    Eigen::RowVectorXd xr = X.row(s), fr = F.row(s);
    for (std::size_t r = 0; r < ck.rules().size(); ++r) {
      const double direct = ck.rules()[r].violation({xr.data(), 4}, {fr.data(), 3});
      CHECK(V(s, static_cast<Eigen::Index>(r)) == direct);
    }
  }
}

TEST_CASE("xor grid with constant zero prediction") {
  auto kb = xor_kb();
  auto hard = knowledge::KnowledgeBase(kXor,
                                       {{"X1", knowledge::InputThreshold{0, knowledge::Direction::Greater, 0.5}, 1e6},
                                        {"X2", knowledge::InputThreshold{1, knowledge::Direction::Greater, 0.5}, 1e6},
                                        {"F", knowledge::OutputClass{0}}},
                                       kb.rules());
  CompiledKnowledge ck(hard);
  Eigen::MatrixXd X(16, 2);
  int k = 0;
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) X.row(k++) << 0.125 + 0.25 * i, 0.125 + 0.25 * j;
  auto V = ck.violation_matrix(X, Eigen::MatrixXd::Zero(16, 1));
  for (Eigen::Index s = 0; s < 16; ++s) {
    CHECK(V.row(s).sum() == doctest::Approx(data::xor_label(X(s, 0), X(s, 1))));
  }
  Eigen::MatrixXd satisfied(1, 2);
  satisfied << 0.9, 0.1;
  CHECK(ck.violation_matrix(satisfied, Eigen::MatrixXd::Ones(1, 1)).sum() == doctest::Approx(0.0));
}

TEST_CASE("closed forms") {
  auto kb = xor_kb();
  auto iff = compile(kb.rules()[0].formula, kb).closed_form();
  CHECK(iff.size() == 2);
  auto luk = compile(Formula::all_of({Formula::atom("a"), Formula::atom("b")}), two_atoms(), TNorm::Lukasiewicz)
                 .closed_form();
  REQUIRE(luk.size() == 1);
  CHECK(luk[0].find("max(0") != std::string::npos);
}

TEST_CASE("shape mismatch is a contract error") {
  CompiledKnowledge ck(xor_kb());
  CHECK_THROWS_AS(ck.violation_matrix(Eigen::MatrixXd::Zero(3, 3), Eigen::MatrixXd::Zero(3, 1)), ContractError);
  CHECK_THROWS_AS(ck.violation_matrix(Eigen::MatrixXd::Zero(3, 2), Eigen::MatrixXd::Zero(2, 1)), ContractError);
}
