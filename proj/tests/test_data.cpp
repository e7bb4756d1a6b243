#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <numeric>
#include <set>

#include "kal/data.hpp"
#include "kal/lowering.hpp"

using namespace kal;
using namespace kal::data;

TEST_CASE("xor labels") {
  CHECK(xor_label(0.9, 0.1) == 1);
  CHECK(xor_label(0.2, 0.3) == 0);
  CHECK(xor_label(0.2, 0.8) == 1);
  CHECK(xor_label(0.7, 0.8) == 0);
  CHECK(xor_label(0.5, 0.5) == 0);
  CHECK(xor_label(0.51, 0.5) == 1);
}

TEST_CASE("xor sample") {
  auto ds = make_xor(100000, 3);
  CHECK(ds.size() == 100000);
  CHECK(ds.X.minCoeff() >= 0.0);
  CHECK(ds.X.maxCoeff() <= 1.0);
  const double positive = ds.Y.mean();
  CHECK(std::abs(positive - 0.5) <= 0.01);
  for (Eigen::Index i = 0; i < 1000; ++i) {
    CHECK(ds.labels[static_cast<std::size_t>(i)] == xor_label(ds.X(i, 0), ds.X(i, 1)));
  }
  CHECK(ds.knowledge().rules().size() == 1);
  CHECK(make_xor(50, 9).X == make_xor(50, 9).X);
}

TEST_CASE("ground-truth xor labels satisfy the rule under hard predicates") {
  auto ds = make_xor(5000, 4);
  auto soft = ds.knowledge();
  auto bindings = soft.bindings();
  for (auto& b : bindings) b.tau = 1e9;
  knowledge::KnowledgeBase hard(soft.schema(), bindings, soft.rules());
  auto V = lowering::violation_matrix(hard, ds.X, ds.Y);
  CHECK(V.maxCoeff() == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("iris") {
  auto ds = load_iris(default_data_dir() / "iris.csv");
  CHECK(ds.size() == 150);
  CHECK(ds.X.cols() == 4);
  CHECK(ds.classes == 3);
  CHECK(ds.task == TaskKind::Multiclass);
  CHECK(ds.X.minCoeff() == 0.0);
  CHECK(ds.X.maxCoeff() == 1.0);
  auto kb = ds.knowledge();
  CHECK(kb.rules().size() == 4);
  for (int c = 0; c < 3; ++c) CHECK(std::count(ds.labels.begin(), ds.labels.end(), c) == 50);

  // first row: petal 1.4 x 0.2, setosa
  CHECK(ds.labels[0] == 0);
  auto V = lowering::violation_matrix(kb, ds.X.topRows(1), ds.Y.topRows(1));
  CHECK(V(0, 0) < 0.05);
  CHECK(V.sum() < 0.1);

  auto raw = load_iris(default_data_dir() / "iris.csv", false);
  CHECK(raw.X(0, 2) == 1.4);
}

TEST_CASE("iris accepts the prefixed species names") {
  auto ds = parse_iris(
      "sepal_length,sepal_width,petal_length,petal_width,species\n"
      "5.1,3.5,1.4,0.2,Iris-setosa\n7.0,3.2,4.7,1.4,Iris-versicolor\n6.3,3.3,6.0,2.5,virginica\n");
  CHECK(ds.labels == std::vector<int>{0, 1, 2});
}

TEST_CASE("malformed data") {
  CHECK_THROWS_AS(parse_iris(""), DataError);
  CHECK_THROWS_AS(parse_insurance(""), DataError);
  try {
    parse_iris("sepal_length,sepal_width,petal_length,petal_width,species\n5.1,3.5,1.4,0.2,setosa\n5.1,x,1.4,0.2,setosa\n");
    FAIL("expected error");
  } catch (const DataError& e) {
    CHECK(e.line() == 3);
  }
  CHECK_THROWS_AS(parse_iris("sepal_length,sepal_width,petal_length,petal_width,species\n5.1,3.5,1.4,0.2,rose\n"),
                  DataError);
  CHECK_THROWS_AS(parse_insurance("age,sex,bmi,children,smoker,region,charges\n19,female,27.9,0,maybe,southwest,1\n"),
                  DataError);
  CHECK_THROWS_AS(load_iris("/nonexistent/iris.csv"), DataError);
}

TEST_CASE("insurance encoding and the obese smoker rule") {
  auto ds = parse_insurance(
      "age,sex,bmi,children,smoker,region,charges\n"
      "45,male,32.0,1,yes,northwest,45000.5\n"
      "25,female,22.0,0,no,southeast,3200\n");
  CHECK(ds.task == TaskKind::Regression);
  CHECK(ds.standardize_inputs);
  CHECK(ds.X(0, 1) == 1.0);
  CHECK(ds.X(0, 4) == 1.0);
  CHECK(ds.X(0, 5) == 1.0);
  CHECK(ds.X(1, 5) == 2.0);
  CHECK(ds.Y(0, 0) == 45000.5);
  auto kb = ds.knowledge();
  REQUIRE(kb.rules().size() == 4);
  // antecedent of the fourth rule holds for the first row, and its charge satisfies it
  auto rule = lowering::compile(kb.rules()[3].formula.children[0], kb);
  Eigen::RowVectorXd x = ds.X.row(0), f = ds.Y.row(0);
  CHECK(rule.truth({x.data(), 6}, {f.data(), 1}) > 0.99);  // soft Smoker at 1 vs 0.5 is sigma(5)
  auto V = lowering::violation_matrix(kb, ds.X, ds.Y);
  CHECK(V(0, 3) < 0.01);
  CHECK(V(1, 0) < 0.01);
}

TEST_CASE("synthetic insurance round trips through csv") {
  auto ds = make_insurance_synthetic(300, 2);
  CHECK(ds.size() == 300);
  CHECK(ds.Y.minCoeff() >= 1100.0);
  auto back = parse_insurance(insurance_csv(ds));
  CHECK((back.X - ds.X).cwiseAbs().maxCoeff() < 1e-9);
  CHECK((back.Y - ds.Y).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("folds partition and are deterministic") {
  auto ds = load_iris(default_data_dir() / "iris.csv");
  auto a = make_folds(ds, 10, 5);
  auto b = make_folds(ds, 10, 5);
  REQUIRE(a.folds.size() == 10);
  std::vector<int> seen(150, 0);
  for (std::size_t k = 0; k < 10; ++k) {
    CHECK(a.folds[k].test == b.folds[k].test);
    CHECK(a.folds[k].train.size() + a.folds[k].test.size() == 150);
    for (auto i : a.folds[k].test) ++seen[i];
    std::vector<int> per(3, 0);
    for (auto i : a.folds[k].test) ++per[static_cast<std::size_t>(ds.labels[i])];
    CHECK(per == std::vector<int>{5, 5, 5});
    std::vector<std::size_t> both;
    std::set_intersection(a.folds[k].train.begin(), a.folds[k].train.end(), a.folds[k].test.begin(),
                          a.folds[k].test.end(), std::back_inserter(both));
    CHECK(both.empty());
  }
  CHECK(std::all_of(seen.begin(), seen.end(), [](int s) { return s == 1; }));
  CHECK(make_folds(ds, 10, 6).folds[0].test != a.folds[0].test);

  auto reg = make_insurance_synthetic(100, 1);
  auto rf = make_folds(reg, 3, 0);
  std::size_t total = 0;
  for (const auto& f : rf.folds) total += f.test.size();
  CHECK(total == 100);
}

TEST_CASE("bundled rule files equal the embedded text") {
  CHECK(read_file(default_data_dir() / "xor.kal") == xor_knowledge());
  CHECK(read_file(default_data_dir() / "iris.kal") == iris_knowledge());
  CHECK(read_file(default_data_dir() / "insurance.kal") == insurance_knowledge());
}
