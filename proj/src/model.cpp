#include "kal/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

namespace kal::model {

namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;

MatrixXd relu(const MatrixXd& z) { return z.cwiseMax(0.0); }

MatrixXd softmax_rows(const MatrixXd& z) {
  MatrixXd out(z.rows(), z.cols());
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    double m = z.row(i).maxCoeff();
    auto e = (z.row(i).array() - m).exp();
    out.row(i) = e / e.sum();
  }
  return out;
}

MatrixXd sigmoid(const MatrixXd& z) {
  return z.unaryExpr([](double v) {
    if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
    double e = std::exp(v);
    return e / (1.0 + e);
  });
}

MatrixXd dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate, std::mt19937_64& rng) {
  MatrixXd mask(rows, cols);
  std::bernoulli_distribution keep(1.0 - rate);
  const double scale = 1.0 / (1.0 - rate);
  for (Eigen::Index j = 0; j < cols; ++j) {
    for (Eigen::Index i = 0; i < rows; ++i) mask(i, j) = keep(rng) ? scale : 0.0;
  }
  return mask;
}

}  // namespace

Mlp::Mlp(std::size_t input_dim, std::size_t hidden, std::size_t output_dim, TaskKind task, double dropout,
         std::uint64_t seed)
    : task_(task), dropout_(dropout), init_seed_(seed) {
  if (input_dim == 0 || hidden == 0 || output_dim == 0) throw ContractError("Mlp: dimensions must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ContractError("Mlp: dropout rate must lie in [0, 1)");
  if (task == TaskKind::Binary && output_dim != 1) throw ContractError("Mlp: binary task has one head");
  if (task == TaskKind::Multiclass && output_dim < 2) throw ContractError("Mlp: multiclass needs >= 2 heads");
  w1_.resize(static_cast<Eigen::Index>(hidden), static_cast<Eigen::Index>(input_dim));
  b1_.resize(static_cast<Eigen::Index>(hidden));
  w2_.resize(static_cast<Eigen::Index>(output_dim), static_cast<Eigen::Index>(hidden));
  b2_.resize(static_cast<Eigen::Index>(output_dim));
  in_mean_ = VectorXd::Zero(static_cast<Eigen::Index>(input_dim));
  in_scale_ = VectorXd::Ones(static_cast<Eigen::Index>(input_dim));
  t_mean_ = VectorXd::Zero(static_cast<Eigen::Index>(output_dim));
  t_scale_ = VectorXd::Ones(static_cast<Eigen::Index>(output_dim));
  reinitialize(seed);
}

void Mlp::reinitialize(std::uint64_t seed) {
  init_seed_ = seed;
  std::mt19937_64 rng(seed);
  // U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases of each layer
  auto fill = [&](auto& m, double fan_in) {
    std::uniform_real_distribution<double> u(-1.0 / std::sqrt(fan_in), 1.0 / std::sqrt(fan_in));
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = u(rng);
    }
  };
  fill(w1_, static_cast<double>(w1_.cols()));
  fill(b1_, static_cast<double>(w1_.cols()));
  fill(w2_, static_cast<double>(w2_.cols()));
  fill(b2_, static_cast<double>(w2_.cols()));
  m_.assign(parameter_count(), 0.0);
  v_.assign(parameter_count(), 0.0);
  step_ = 0;
}

void Mlp::set_input_scaling(VectorXd mean, VectorXd scale) {
  if (mean.size() != w1_.cols() || scale.size() != w1_.cols()) throw ContractError("input scaling: size mismatch");
  if ((scale.array() <= 0.0).any()) throw ContractError("input scaling: scale must be positive");
  in_mean_ = std::move(mean);
  in_scale_ = std::move(scale);
}

void Mlp::fit_input_scaling(const MatrixXd& X) {
  if (X.cols() != w1_.cols() || X.rows() == 0) throw ContractError("fit_input_scaling: shape mismatch");
  VectorXd mean = X.colwise().mean();
  VectorXd scale(X.cols());
  for (Eigen::Index j = 0; j < X.cols(); ++j) {
    double var = (X.col(j).array() - mean(j)).square().mean();
    scale(j) = var > 1e-24 ? std::sqrt(var) : 1.0;
  }
  set_input_scaling(std::move(mean), std::move(scale));
}

void Mlp::set_target_scaling(VectorXd mean, VectorXd scale) {
  if (mean.size() != w2_.rows() || scale.size() != w2_.rows()) throw ContractError("target scaling: size mismatch");
  if ((scale.array() <= 0.0).any()) throw ContractError("target scaling: scale must be positive");
  t_mean_ = std::move(mean);
  t_scale_ = std::move(scale);
  target_fitted_ = true;
}

void Mlp::fit_target_scaling(const MatrixXd& Y) {
  if (Y.cols() != w2_.rows() || Y.rows() == 0) throw ContractError("fit_target_scaling: shape mismatch");
  VectorXd mean = Y.colwise().mean();
  VectorXd scale(Y.cols());
  for (Eigen::Index j = 0; j < Y.cols(); ++j) {
    double var = (Y.col(j).array() - mean(j)).square().mean();
    scale(j) = var > 1e-24 ? std::sqrt(var) : 1.0;
  }
  set_target_scaling(std::move(mean), std::move(scale));
}

MatrixXd Mlp::scale_inputs(const MatrixXd& X) const {
  if (X.cols() != w1_.cols()) {
    throw ContractError("Mlp: input has " + std::to_string(X.cols()) + " columns, expected " +
                        std::to_string(w1_.cols()));
  }
  return (X.rowwise() - in_mean_.transpose()).array().rowwise() / in_scale_.transpose().array();
}

MatrixXd Mlp::logits(const MatrixXd& X) const {
  MatrixXd Xs = scale_inputs(X);
  MatrixXd out(X.rows(), w2_.rows());
  // row blocks keep the hidden activations in cache
  constexpr Eigen::Index kBlock = 256;
  MatrixXd h;
  for (Eigen::Index start = 0; start < X.rows(); start += kBlock) {
    const Eigen::Index rows = std::min(kBlock, X.rows() - start);
    h = b1_.transpose().replicate(rows, 1);
    if (Xs.cols() <= 8) {
      for (Eigen::Index j = 0; j < Xs.cols(); ++j) h.noalias() += Xs.block(start, j, rows, 1) * w1_.col(j).transpose();
    } else {
      h.noalias() += Xs.middleRows(start, rows) * w1_.transpose();
    }
    h = h.cwiseMax(0.0);
    out.middleRows(start, rows).noalias() = h * w2_.transpose();
  }
  return out.rowwise() + b2_.transpose();
}

MatrixXd Mlp::to_interface(const MatrixXd& z) const {
  switch (task_) {
    case TaskKind::Multiclass: return softmax_rows(z);
    case TaskKind::Binary:
    case TaskKind::Multilabel: return sigmoid(z);
    case TaskKind::Regression:
      return (z.array().rowwise() * t_scale_.transpose().array()).rowwise() + t_mean_.transpose().array();
  }
  return z;
}

MatrixXd Mlp::forward(const MatrixXd& X) const { return to_interface(logits(X)); }

MatrixXd Mlp::standardized_targets(const MatrixXd& Y) const {
  return (Y.rowwise() - t_mean_.transpose()).array().rowwise() / t_scale_.transpose().array();
}

// dLoss/dZ2 for the mean loss; writes the loss value.
MatrixXd Mlp::output_delta(const MatrixXd& z, const MatrixXd& Y, double* loss) const {
  if (Y.rows() != z.rows() || Y.cols() != z.cols()) throw ContractError("Mlp: target shape mismatch");
  const double n = static_cast<double>(z.rows());
  const double cells = n * static_cast<double>(z.cols());
  switch (task_) {
    case TaskKind::Multiclass: {
      MatrixXd p = softmax_rows(z);
      double l = 0.0;
      for (Eigen::Index i = 0; i < z.rows(); ++i) {
        double m = z.row(i).maxCoeff();
        double lse = m + std::log((z.row(i).array() - m).exp().sum());
        l += (Y.row(i).array() * (lse - z.row(i).array())).sum();
      }
      *loss = l / n;
      return (p - Y) / n;
    }
    case TaskKind::Binary:
    case TaskKind::Multilabel: {
      double l = 0.0;
      for (Eigen::Index i = 0; i < z.rows(); ++i) {
        for (Eigen::Index j = 0; j < z.cols(); ++j) {
          double v = z(i, j);
          l += std::max(v, 0.0) - v * Y(i, j) + std::log1p(std::exp(-std::abs(v)));
        }
      }
      *loss = l / cells;
      return (sigmoid(z) - Y) / cells;
    }
    case TaskKind::Regression: {
      MatrixXd r = z - standardized_targets(Y);
      *loss = r.squaredNorm() / cells;
      return 2.0 * r / cells;
    }
  }
  return {};
}

double Mlp::loss(const MatrixXd& X, const MatrixXd& Y) const {
  double l = 0.0;
  output_delta(logits(X), Y, &l);
  return l;
}

VectorXd Mlp::sample_losses(const MatrixXd& X, const MatrixXd& Y) const {
  MatrixXd z = logits(X);
  VectorXd out(z.rows());
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    double l = 0.0;
    output_delta(z.row(i), Y.row(i), &l);
    out(i) = l;
  }
  return out;
}

Gradients Mlp::gradients(const MatrixXd& X, const MatrixXd& Y, const MatrixXd* mask) const {
  MatrixXd xs = scale_inputs(X);
  MatrixXd z1 = (xs * w1_.transpose()).rowwise() + b1_.transpose();
  MatrixXd h = relu(z1);
  if (mask != nullptr) h = h.cwiseProduct(*mask);
  MatrixXd z2 = (h * w2_.transpose()).rowwise() + b2_.transpose();
  Gradients g;
  MatrixXd d2 = output_delta(z2, Y, &g.loss);
  g.w2 = d2.transpose() * h;
  g.b2 = d2.colwise().sum().transpose();
  MatrixXd dh = d2 * w2_;
  if (mask != nullptr) dh = dh.cwiseProduct(*mask);
  MatrixXd d1 = dh.cwiseProduct((z1.array() > 0.0).cast<double>().matrix());
  g.w1 = d1.transpose() * xs;
  g.b1 = d1.colwise().sum().transpose();
  return g;
}

MatrixXd Mlp::logit_input_gradient(const MatrixXd& X, const MatrixXd& D) const {
  if (D.rows() != X.rows() || D.cols() != w2_.rows()) throw ContractError("logit_input_gradient: shape mismatch");
  MatrixXd z1 = (scale_inputs(X) * w1_.transpose()).rowwise() + b1_.transpose();
  MatrixXd dh = (D * w2_).cwiseProduct((z1.array() > 0.0).cast<double>().matrix());
  MatrixXd gx = dh * w1_;
  return gx.array().rowwise() / in_scale_.transpose().array();
}

std::size_t Mlp::parameter_count() const {
  return static_cast<std::size_t>(w1_.size() + b1_.size() + w2_.size() + b2_.size());
}

std::vector<double> Mlp::flat_parameters() const {
  std::vector<double> p;
  p.reserve(parameter_count());
  for (const auto* m : {&w1_, &w2_}) p.insert(p.end(), m->data(), m->data() + m->size());
  for (const auto* v : {&b1_, &b2_}) p.insert(p.end(), v->data(), v->data() + v->size());
  return p;
}

void Mlp::set_flat_parameters(const std::vector<double>& p) {
  if (p.size() != parameter_count()) throw ContractError("set_flat_parameters: size mismatch");
  const double* src = p.data();
  for (auto* m : {&w1_, &w2_}) {
    std::copy(src, src + m->size(), m->data());
    src += m->size();
  }
  for (auto* v : {&b1_, &b2_}) {
    std::copy(src, src + v->size(), v->data());
    src += v->size();
  }
}

void Mlp::adamw_step(const Gradients& g, const TrainConfig& cfg) {
  ++step_;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step_));
  std::size_t k = 0;
  auto update = [&](double* param, const double* grad, Eigen::Index count) {
    for (Eigen::Index i = 0; i < count; ++i, ++k) {
      param[i] *= 1.0 - cfg.learning_rate * cfg.weight_decay;  // decoupled decay
      m_[k] = cfg.beta1 * m_[k] + (1.0 - cfg.beta1) * grad[i];
      v_[k] = cfg.beta2 * v_[k] + (1.0 - cfg.beta2) * grad[i] * grad[i];
      double mhat = m_[k] / bc1;
      double vhat = v_[k] / bc2;
      param[i] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.epsilon);
    }
  };
  update(w1_.data(), g.w1.data(), w1_.size());
  update(w2_.data(), g.w2.data(), w2_.size());
  update(b1_.data(), g.b1.data(), b1_.size());
  update(b2_.data(), g.b2.data(), b2_.size());
}

double train(Mlp& model, const MatrixXd& X, const MatrixXd& Y, const TrainConfig& cfg) {
  if (X.rows() == 0) throw ContractError("train: empty training set");
  if (X.rows() != Y.rows()) throw ContractError("train: X and Y sample counts differ");
  if (cfg.epochs < 0) throw ContractError("train: negative epoch count");
  if (!cfg.warm_start) model.reinitialize(model.init_seed());
  std::mt19937_64 rng(cfg.seed);
  const bool use_dropout = model.dropout() > 0.0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    MatrixXd mask;
    if (use_dropout) mask = dropout_mask(X.rows(), static_cast<Eigen::Index>(model.hidden()), model.dropout(), rng);
    Gradients g = model.gradients(X, Y, use_dropout ? &mask : nullptr);
    if (!std::isfinite(g.loss)) {
      throw NonFiniteLoss("training loss became non-finite at epoch " + std::to_string(epoch));
    }
    model.adamw_step(g, cfg);
  }
  double final_loss = model.loss(X, Y);
  if (!std::isfinite(final_loss)) throw NonFiniteLoss("training loss is non-finite after training");
  for (double p : model.flat_parameters()) {
    if (!std::isfinite(p)) throw NonFiniteLoss("non-finite parameter after training");
  }
  return final_loss;
}

Prediction predict(const Mlp& model, const MatrixXd& X, int mc_passes, std::uint64_t seed) {
  if (mc_passes < 0) throw ContractError("predict: negative pass count");
  Prediction out;
  if (mc_passes == 0) {
    out.mean = model.forward(X);
    return out;
  }
  std::mt19937_64 rng(seed);
  MatrixXd xs = model.scale_inputs(X);
  MatrixXd h = relu((xs * model.w1().transpose()).rowwise() + model.b1().transpose());
  out.mean = MatrixXd::Zero(X.rows(), static_cast<Eigen::Index>(model.output_dim()));
  for (int t = 0; t < mc_passes; ++t) {
    MatrixXd ht = h;
    if (model.dropout() > 0.0) {
      ht = ht.cwiseProduct(dropout_mask(h.rows(), h.cols(), model.dropout(), rng));
    }
    MatrixXd z = (ht * model.w2().transpose()).rowwise() + model.b2().transpose();
    out.passes.push_back(model.to_interface(z));
    out.mean += out.passes.back();
  }
  out.mean /= static_cast<double>(mc_passes);
  return out;
}

double gradient_check(const Mlp& original, const MatrixXd& X, const MatrixXd& Y) {
  Mlp model = original;
  constexpr double kKink = 1e-3;
  // shift biases until every pre-activation is at least kKink away from zero
  MatrixXd xs = model.scale_inputs(X);
  for (Eigen::Index j = 0; j < model.b1().size(); ++j) {
    VectorXd base = xs * model.w1().row(j).transpose();
    for (int attempt = 0; attempt < 1000; ++attempt) {
      VectorXd z = base.array() + model.b1()(j);
      if (z.cwiseAbs().minCoeff() >= kKink) break;
      model.b1()(j) += 2.0 * kKink * (attempt % 2 == 0 ? 1.0 : -1.0) * (attempt + 1);
    }
  }
  Gradients g = model.gradients(X, Y);
  std::vector<double> analytic;
  for (const auto* m : {&g.w1, &g.w2}) analytic.insert(analytic.end(), m->data(), m->data() + m->size());
  for (const auto* v : {&g.b1, &g.b2}) analytic.insert(analytic.end(), v->data(), v->data() + v->size());

  constexpr double kStep = 1e-5;
  std::vector<double> p = model.flat_parameters();
  double worst = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double saved = p[i];
    p[i] = saved + kStep;
    model.set_flat_parameters(p);
    double up = model.loss(X, Y);
    p[i] = saved - kStep;
    model.set_flat_parameters(p);
    double down = model.loss(X, Y);
    p[i] = saved;
    double numeric = (up - down) / (2.0 * kStep);
    double denom = std::max({std::abs(numeric), std::abs(analytic[i]), 1e-6});
    worst = std::max(worst, std::abs(numeric - analytic[i]) / denom);
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Snapshots

namespace {

constexpr char kMagic[4] = {'K', 'A', 'L', 'M'};

void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw ContractError("snapshot: truncated header");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_f32(std::ostream& out, double v) { put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v))); }

double get_f32(std::istream& in) { return static_cast<double>(std::bit_cast<float>(get_u32(in))); }

int task_code(TaskKind t) { return static_cast<int>(t); }

}  // namespace

// Payload order: task code, dropout, input mean[d], input scale[d], target mean[c], target scale[c],
// W1 (H x d, row-major), b1[H], W2 (c x H, row-major), b2[c].
void save_snapshot(const Mlp& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("snapshot: cannot open " + path.string() + " for writing");
  out.write(kMagic, 4);
  put_u32(out, static_cast<std::uint32_t>(model.input_dim()));
  put_u32(out, static_cast<std::uint32_t>(model.hidden()));
  put_u32(out, static_cast<std::uint32_t>(model.output_dim()));
  put_f32(out, task_code(model.task()));
  put_f32(out, model.dropout());
  for (const auto* v : {&model.input_mean(), &model.input_scale(), &model.target_mean(), &model.target_scale()}) {
    for (Eigen::Index i = 0; i < v->size(); ++i) put_f32(out, (*v)(i));
  }
  auto rows = [&](const MatrixXd& m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      for (Eigen::Index j = 0; j < m.cols(); ++j) put_f32(out, m(i, j));
    }
  };
  rows(model.w1());
  for (Eigen::Index i = 0; i < model.b1().size(); ++i) put_f32(out, model.b1()(i));
  rows(model.w2());
  for (Eigen::Index i = 0; i < model.b2().size(); ++i) put_f32(out, model.b2()(i));
  if (!out) throw std::runtime_error("snapshot: write failed for " + path.string());
}

Mlp load_snapshot(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("snapshot: cannot open " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    throw ContractError("snapshot: bad magic in " + path.string());
  }
  const std::uint32_t d = get_u32(in), h = get_u32(in), c = get_u32(in);
  if (d == 0 || h == 0 || c == 0 || d > 1u << 20 || h > 1u << 20 || c > 1u << 20) {
    throw ContractError("snapshot: implausible dimensions");
  }
  const int code = static_cast<int>(get_f32(in));
  if (code < 0 || code > 3) throw ContractError("snapshot: unknown task code");
  const double dropout = get_f32(in);
  Mlp model(d, h, c, static_cast<TaskKind>(code), dropout, 0);
  auto vec = [&](Eigen::Index n) {
    VectorXd v(n);
    for (Eigen::Index i = 0; i < n; ++i) v(i) = get_f32(in);
    return v;
  };
  VectorXd in_mean = vec(d), in_scale = vec(d), t_mean = vec(c), t_scale = vec(c);
  model.set_input_scaling(in_mean, in_scale);
  model.set_target_scaling(t_mean, t_scale);
  auto rows = [&](MatrixXd& m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = get_f32(in);
    }
  };
  rows(model.w1());
  for (Eigen::Index i = 0; i < model.b1().size(); ++i) model.b1()(i) = get_f32(in);
  rows(model.w2());
  for (Eigen::Index i = 0; i < model.b2().size(); ++i) model.b2()(i) = get_f32(in);
  return model;
}

Eigen::MatrixXd encode_classes(const std::vector<int>& labels, TaskKind task, std::size_t heads) {
  MatrixXd Y = MatrixXd::Zero(static_cast<Eigen::Index>(labels.size()), static_cast<Eigen::Index>(heads));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i];
    if (task == TaskKind::Binary) {
      if (y != 0 && y != 1) throw ContractError("binary label must be 0 or 1");
      Y(static_cast<Eigen::Index>(i), 0) = y;
    } else {
      if (y < 0 || static_cast<std::size_t>(y) >= heads) throw ContractError("class label out of range");
      Y(static_cast<Eigen::Index>(i), y) = 1.0;
    }
  }
  return Y;
}

}  // namespace kal::model
