#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <numeric>
#include <random>
#include <set>

#include "kal/data.hpp"
#include "kal/xai.hpp"

using namespace kal;
using namespace kal::xai;
using Eigen::MatrixXd;

namespace {

// Steep linear network: class 1 iff x0 > 0.7.
model::Mlp step_net() {
  model::Mlp net(2, 2, 1, TaskKind::Binary, 0.0, 0);
  net.w1() << 100.0, 0.0, -100.0, 0.0;
  net.b1() << -70.0 + 500.0, 70.0 + 500.0;
  net.w2() << 0.5, -0.5;
  net.b2() << 0.0;
  return net;
}

MatrixXd grid50() {
  MatrixXd X(50, 2);
  for (int i = 0; i < 50; ++i) X.row(i) << i / 49.0, (i * 7 % 50) / 49.0;
  return X;
}

// Evaluates a class rule's DNF with hard predicates.
bool dnf_holds(const knowledge::KnowledgeBase& kb, const knowledge::Rule& rule, const Eigen::RowVectorXd& x) {
  auto bindings = kb.bindings();
  for (auto& b : bindings) b.tau = 1e9;
  knowledge::KnowledgeBase hard(kb.schema(), bindings, {});
  auto compiled = lowering::compile(rule.formula.children[1], hard);
  std::vector<double> f(kb.schema().output_dim, 0.0);
  return compiled.truth({x.data(), static_cast<std::size_t>(x.size())}, f) > 0.5;
}

}  // namespace

TEST_CASE("surrogate of a threshold network is a single split") {
  auto net = step_net();
  auto X = grid50();
  auto tree = fit_surrogate(net, X, 3);
  REQUIRE_FALSE(tree.is_leaf(0));
  CHECK(tree.nodes[0].feature == 0);
  CHECK(tree.nodes[0].threshold == doctest::Approx(0.7).epsilon(0.02));
  CHECK(tree.depth() == 1);
  auto classes = predicted_classes(model::predict(net, X).mean, TaskKind::Binary);
  CHECK(fidelity(tree, X, classes) == 1.0);

  // exhaustive oracle: the best single cut separates the grid perfectly between 34/49 and 35/49
  CHECK(tree.nodes[0].threshold == doctest::Approx((34.0 / 49 + 35.0 / 49) / 2));
}

TEST_CASE("single predicted class gives a single leaf") {
  MatrixXd X = grid50();
  auto tree = fit_tree(X, std::vector<int>(50, 1), 2);
  CHECK(tree.nodes.size() == 1);
  CHECK(tree.nodes[0].majority == 1);
  auto kb = extract_rules(tree, Schema{2, 1, TaskKind::Binary});
  REQUIRE(kb.rules().size() == 1);
  CHECK(kb.rules()[0].id == "exclusive");
}

TEST_CASE("tree fidelity dominates the majority stump") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto ds = data::make_xor(200, seed);
    std::mt19937_64 rng(seed);
    std::vector<int> noisy = ds.labels;
    for (auto& c : noisy) if (rng() % 5 == 0) c = 1 - c;
    auto tree = fit_tree(ds.X, noisy, 2, 3);
    const double ones = static_cast<double>(std::count(noisy.begin(), noisy.end(), 1));
    const double stump = std::max(ones, 200.0 - ones) / 200.0;
    CHECK(fidelity(tree, ds.X, noisy) >= stump);
    CHECK(tree.depth() <= 3);
  }
}

TEST_CASE("two leaf tree extraction") {
  auto tree = fit_tree(grid50(), predicted_classes(model::predict(step_net(), grid50()).mean, TaskKind::Binary), 2, 3);
  auto text = extract_rules_dsl(tree, Schema{2, 1, TaskKind::Binary});
  auto kb = extract_rules(tree, Schema{2, 1, TaskKind::Binary});
  REQUIRE(kb.rules().size() == 3);
  CHECK(kb.rules()[0].id == "class0");
  CHECK(kb.rules()[1].id == "class1");
  CHECK(kb.rules()[2].id == "exclusive");
  using knowledge::Formula;
  CHECK(kb.rules()[1].formula.children[0] == Formula::atom("F"));
  CHECK(kb.rules()[0].formula.children[0] == Formula::negate(Formula::atom("F")));
  const auto& gt = kb.rules()[1].formula.children[1];
  REQUIRE(gt.op == Formula::Op::Atom);
  const auto* b = kb.find_binding(gt.name);
  REQUIRE(b != nullptr);
  const auto& th = std::get<knowledge::InputThreshold>(b->kind);
  CHECK(th.feature == 0);
  CHECK(th.direction == knowledge::Direction::Greater);
  CHECK(th.threshold == doctest::Approx(0.7).epsilon(0.02));
  CHECK(b->tau == knowledge::kDefaultTau);
  CHECK(knowledge::parse_knowledge(knowledge::to_dsl(kb), kb.schema()) == kb);
  CHECK(text.find("rule class1: F <=> ") != std::string::npos);
}

TEST_CASE("extracted dnf agrees with the tree") {
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    auto ds = data::make_xor(400, 10 + seed);
    auto tree = fit_tree(ds.X, ds.labels, 2, 2 + seed % 2);
    auto kb = extract_rules(tree, Schema{2, 1, TaskKind::Binary});
    std::set<double> cuts;
    for (const auto& n : tree.nodes) if (n.feature >= 0) cuts.insert(n.threshold);
    auto probe = data::make_xor(500, 99).X;
    for (Eigen::Index i = 0; i < probe.rows(); ++i) {
      Eigen::RowVectorXd x = probe.row(i);
      bool near_cut = false;
      for (double c : cuts) near_cut = near_cut || std::abs(x(0) - c) < 1e-6 || std::abs(x(1) - c) < 1e-6;
      if (near_cut) continue;
      const int cls = tree.predict({x.data(), 2});
      for (const auto& r : kb.rules()) {
        if (r.id == "exclusive") continue;
        const int rc = r.id == "class1" ? 1 : 0;
        CHECK(dnf_holds(kb, r, x) == (cls == rc));
      }
    }
  }
}

TEST_CASE("xor depth two surrogate dnf matches the tree at quadrant centres") {
  auto ds = data::make_xor(400, 5);
  model::Mlp net(2, 100, 1, TaskKind::Binary, 0.0, 5);
  model::TrainConfig cfg;
  cfg.epochs = 1500;
  cfg.learning_rate = 1e-2;
  model::train(net, ds.X, ds.Y, cfg);
  auto tree = fit_surrogate(net, ds.X, 2);
  auto kb = extract_rules(tree, Schema{2, 1, TaskKind::Binary});
  std::size_t leaves = 0, paths = 0;
  for (std::size_t i = 0; i < tree.nodes.size(); ++i) leaves += tree.is_leaf(i);
  for (const auto& r : kb.rules()) {
    if (r.id == "exclusive") continue;
    paths += r.formula.children[1].op == knowledge::Formula::Op::Or ? r.formula.children[1].children.size() : 1;
  }
  CHECK(leaves == 4);
  CHECK(paths == leaves);
  for (auto [a, b] : {std::pair{0.25, 0.25}, {0.25, 0.75}, {0.75, 0.25}, {0.75, 0.75}}) {
    Eigen::RowVectorXd x(2);
    x << a, b;
    const int cls = tree.predict({x.data(), 2});
    for (const auto& r : kb.rules()) {
      if (r.id == "exclusive") continue;
      CHECK(dnf_holds(kb, r, x) == ((r.id == "class1") == (cls == 1)));
    }
  }
}

TEST_CASE("multiclass extraction parses") {
  auto ds = data::load_iris(data::default_data_dir() / "iris.csv");
  auto tree = fit_tree(ds.X, ds.labels, 3, 3);
  auto kb = extract_rules(tree, ds.schema());
  CHECK(kb.rules().back().id == "exclusive");
  CHECK(kb.rules().back().formula.children.size() == 3);
  CHECK(kb.rules().size() == 4);
  CHECK(fidelity(tree, ds.X, ds.labels) > 0.95);
}

TEST_CASE("kal_xai splits the batch sixty forty") {
  auto ds = data::make_xor(500, 2);
  model::Mlp net(2, 30, 1, TaskKind::Binary, 0.0, 3);
  model::TrainConfig cfg;
  cfg.epochs = 300;
  cfg.learning_rate = 1e-2;
  model::train(net, ds.X.topRows(50), ds.Y.topRows(50), cfg);
  std::vector<std::size_t> labeled(50), unlabeled(450);
  std::iota(labeled.begin(), labeled.end(), 0);
  std::iota(unlabeled.begin(), unlabeled.end(), 50);
  auto pred = model::predict(net, ds.X.bottomRows(450));
  strategies::SelectionRequest req;
  req.X = &ds.X;
  req.labeled = labeled;
  req.unlabeled = unlabeled;
  req.predictions = &pred;
  req.task = TaskKind::Binary;
  req.model = &net;
  req.seed = 8;

  req.p = 5;
  auto a = select_kal_xai(req);
  CHECK(a.kal_count == 3);
  REQUIRE(a.result.chosen.size() == 5);
  CHECK(std::set(a.result.chosen.begin(), a.result.chosen.end()).size() == 5);
  for (auto i : a.result.chosen) CHECK(i >= 50);
  auto b = select_kal_xai(req);
  CHECK(a.result.chosen == b.result.chosen);
  CHECK(a.rules == b.rules);
  CHECK_NOTHROW(knowledge::parse_knowledge(a.rules, Schema{2, 1, TaskKind::Binary}));

  req.p = 1;
  auto c = select_kal_xai(req);
  CHECK(c.kal_count == 1);
  CHECK(c.result.chosen.size() == 1);
}
