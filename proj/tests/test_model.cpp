#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <random>

#include "kal/data.hpp"
#include "kal/model.hpp"

using namespace kal;
using namespace kal::model;

namespace {

Eigen::MatrixXd uniform(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

Eigen::MatrixXd targets_for(TaskKind task, Eigen::Index n, Eigen::Index c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Eigen::MatrixXd Y = Eigen::MatrixXd::Zero(n, c);
  for (Eigen::Index i = 0; i < n; ++i) {
    switch (task) {
      case TaskKind::Multiclass: Y(i, static_cast<Eigen::Index>(rng() % c)) = 1.0; break;
      case TaskKind::Regression:
        for (Eigen::Index j = 0; j < c; ++j) Y(i, j) = static_cast<double>(rng() % 1000) / 100.0;
        break;
      default:
        for (Eigen::Index j = 0; j < c; ++j) Y(i, j) = static_cast<double>(rng() % 2);
    }
  }
  return Y;
}

Mlp trained_xor(std::size_t n, double dropout = 0.0) {
  auto ds = data::make_xor(n, 5);
  Mlp m(2, 100, 1, TaskKind::Binary, dropout, 5);
  TrainConfig cfg;
  cfg.epochs = 1000;
  cfg.learning_rate = 1e-2;
  train(m, ds.X, ds.Y, cfg);
  return m;
}

}  // namespace

TEST_CASE("gradient check on every task kind") {
  struct Case {
    TaskKind task;
    std::size_t c;
  };
  for (auto [task, c] : {Case{TaskKind::Binary, 1}, Case{TaskKind::Multiclass, 3}, Case{TaskKind::Multilabel, 2},
                         Case{TaskKind::Regression, 1}}) {
    Mlp m(3, 7, c, task, 0.0, 42);
    auto X = uniform(8, 3, 1);
    auto Y = targets_for(task, 8, static_cast<Eigen::Index>(c), 2);
    if (task == TaskKind::Regression) m.fit_target_scaling(Y);
    INFO(to_string(task));
    CHECK(gradient_check(m, X, Y) < 1e-4);
  }
}

TEST_CASE("zero network is stationary in the output bias for matching targets") {
  Mlp m(2, 4, 1, TaskKind::Regression, 0.0, 0);
  m.w1().setZero();
  m.b1().setZero();
  m.w2().setZero();
  m.b2().setZero();
  auto X = uniform(6, 2, 3);
  Eigen::MatrixXd Y = Eigen::MatrixXd::Zero(6, 1);
  auto g = m.gradients(X, Y);
  CHECK(g.b2.isZero(0.0));
  CHECK(g.loss == 0.0);
}

TEST_CASE("single sample memorised") {
  Mlp m(2, 16, 1, TaskKind::Binary, 0.0, 1);
  Eigen::MatrixXd X(1, 2), Y(1, 1);
  X << 0.3, 0.8;
  Y << 1.0;
  TrainConfig cfg;
  cfg.epochs = 1000;
  cfg.learning_rate = 1e-2;
  CHECK(train(m, X, Y, cfg) < 1e-3);
}

TEST_CASE("zero epochs and zero learning rate leave parameters fixed") {
  Mlp m(2, 8, 3, TaskKind::Multiclass, 0.0, 9);
  auto X = uniform(10, 2, 4);
  auto Y = targets_for(TaskKind::Multiclass, 10, 3, 5);
  const auto before = m.flat_parameters();
  TrainConfig cfg;
  cfg.epochs = 0;
  train(m, X, Y, cfg);
  CHECK(m.flat_parameters() == before);
  cfg.epochs = 10;
  cfg.learning_rate = 0.0;
  cfg.weight_decay = 0.0;
  train(m, X, Y, cfg);
  CHECK(m.flat_parameters() == before);
}

TEST_CASE("seeded training is bitwise deterministic") {
  auto X = uniform(30, 2, 6);
  auto Y = targets_for(TaskKind::Binary, 30, 1, 7);
  TrainConfig cfg;
  cfg.epochs = 50;
  cfg.seed = 3;
  Mlp a(2, 20, 1, TaskKind::Binary, 0.2, 11), b(2, 20, 1, TaskKind::Binary, 0.2, 11);
  train(a, X, Y, cfg);
  train(b, X, Y, cfg);
  CHECK(a.flat_parameters() == b.flat_parameters());
}

TEST_CASE("cold start re-initialises") {
  auto X = uniform(30, 2, 6);
  auto Y = targets_for(TaskKind::Binary, 30, 1, 7);
  TrainConfig cfg;
  cfg.epochs = 20;
  Mlp a(2, 20, 1, TaskKind::Binary, 0.0, 11);
  train(a, X, Y, cfg);
  const auto once = a.flat_parameters();
  cfg.warm_start = false;
  train(a, X, Y, cfg);
  CHECK(a.flat_parameters() == once);
}

TEST_CASE("softmax rows sum to one and binary heads stay in range") {
  Mlp m(4, 10, 3, TaskKind::Multiclass, 0.0, 2);
  auto F = predict(m, uniform(50, 4, 8)).mean;
  for (Eigen::Index i = 0; i < F.rows(); ++i) CHECK(F.row(i).sum() == doctest::Approx(1.0).epsilon(1e-12));
  Mlp b(4, 10, 2, TaskKind::Multilabel, 0.0, 2);
  auto G = predict(b, uniform(50, 4, 8) * 100.0).mean;
  CHECK(G.minCoeff() >= 0.0);
  CHECK(G.maxCoeff() <= 1.0);
}

TEST_CASE("zero dropout passes match the deterministic pass") {
  Mlp m(2, 10, 1, TaskKind::Binary, 0.0, 2);
  auto X = uniform(20, 2, 9);
  auto det = predict(m, X);
  auto mc = predict(m, X, 5, 1);
  REQUIRE(mc.passes.size() == 5);
  for (const auto& p : mc.passes) CHECK(p.isApprox(det.mean, 1e-15));
}

TEST_CASE("monte carlo mean approaches the deterministic output") {
  auto m = trained_xor(400, 0.2);
  auto X = data::make_xor(500, 77).X;
  auto det = predict(m, X).mean;
  auto mc = predict(m, X, 100, 3);
  CHECK(mc.passes.size() == 100);
  CHECK((mc.mean - det).cwiseAbs().mean() < 0.05);
  bool differs = false;
  for (const auto& p : mc.passes) differs = differs || !p.isApprox(det);
  CHECK(differs);
}

TEST_CASE("xor at full budget") {
  auto ds = data::make_xor(400, 21);
  auto test = data::make_xor(5000, 22);
  Mlp m(2, 100, 1, TaskKind::Binary, 0.0, 21);
  TrainConfig cfg;  // 250 epochs, lr 1e-3 per call
  for (int it = 0; it < 79; ++it) train(m, ds.X, ds.Y, cfg);
  auto F = predict(m, test.X).mean;
  std::size_t correct = 0;
  for (Eigen::Index i = 0; i < F.rows(); ++i) correct += (F(i, 0) >= 0.5) == (test.labels[i] == 1);
  CHECK(static_cast<double>(correct) / static_cast<double>(F.rows()) >= 0.97);
}

TEST_CASE("regression outputs are reported in target units") {
  Eigen::MatrixXd X = uniform(40, 1, 12);
  Eigen::MatrixXd Y = (X.array() * 5000.0 + 20000.0).matrix();
  Mlp m(1, 32, 1, TaskKind::Regression, 0.0, 4);
  m.fit_target_scaling(Y);
  TrainConfig cfg;
  cfg.epochs = 2000;
  cfg.learning_rate = 1e-2;
  train(m, X, Y, cfg);
  auto F = predict(m, X).mean;
  CHECK((F - Y).cwiseAbs().maxCoeff() < 500.0);
}

TEST_CASE("snapshot round trip") {
  Mlp m(3, 12, 2, TaskKind::Multilabel, 0.0, 8);
  const auto path = std::filesystem::temp_directory_path() / "kal_model_test.kalm";
  save_snapshot(m, path);
  auto back = load_snapshot(path);
  CHECK(back.input_dim() == 3);
  CHECK(back.hidden() == 12);
  CHECK(back.output_dim() == 2);
  auto X = uniform(10, 3, 1);
  CHECK((predict(back, X).mean - predict(m, X).mean).cwiseAbs().maxCoeff() < 1e-5);
  std::filesystem::remove(path);
}

TEST_CASE("invalid dropout is rejected") {
  CHECK_THROWS_AS(Mlp(2, 4, 1, TaskKind::Binary, 1.0), ContractError);
  CHECK_THROWS_AS(Mlp(2, 4, 1, TaskKind::Binary, -0.1), ContractError);
}

TEST_CASE("non-finite loss aborts training") {
  Mlp m(1, 4, 1, TaskKind::Regression, 0.0, 1);
  Eigen::MatrixXd X(2, 1), Y(2, 1);
  X << 0.0, 1.0;
  Y << 0.0, std::numeric_limits<double>::quiet_NaN();
  TrainConfig cfg;
  cfg.epochs = 1;
  CHECK_THROWS_AS(train(m, X, Y, cfg), NonFiniteLoss);
}

TEST_CASE("class encoding") {
  auto Y = encode_classes({0, 2, 1}, TaskKind::Multiclass, 3);
  CHECK(Y.rows() == 3);
  CHECK(Y(1, 2) == 1.0);
  CHECK(Y.rowwise().sum().isOnes());
  auto B = encode_classes({0, 1, 1}, TaskKind::Binary, 1);
  CHECK(B.cols() == 1);
  CHECK(B(0, 0) == 0.0);
  CHECK(B(2, 0) == 1.0);
}
