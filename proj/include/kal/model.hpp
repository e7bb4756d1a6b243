#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "kal/types.hpp"

namespace kal::model {

struct TrainConfig {
  int epochs = 250;             // full-batch AdamW steps per call to train()
  double learning_rate = 1e-3;
  double weight_decay = 0.01;
  std::uint64_t seed = 0;       // dropout masks
  bool warm_start = true;       // false: re-initialise parameters before training
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Network outputs for a batch. `mean` is n x heads; `passes` holds the Monte-Carlo stack, if any.
struct Prediction {
  Eigen::MatrixXd mean;
  std::vector<Eigen::MatrixXd> passes;
};

struct Gradients {
  Eigen::MatrixXd w1, w2;
  Eigen::VectorXd b1, b2;
  double loss = 0.0;
};

class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One-hidden-layer ReLU network d -> H -> c with a task-specific output activation.
///
/// Inputs are standardised by a stored affine scaler before the first layer; regression targets
/// are standardised by a second scaler and outputs are reported in original units.
class Mlp {
 public:
  Mlp(std::size_t input_dim, std::size_t hidden, std::size_t output_dim, TaskKind task, double dropout = 0.0,
      std::uint64_t seed = 0);

  std::size_t input_dim() const { return static_cast<std::size_t>(w1_.cols()); }
  std::size_t hidden() const { return static_cast<std::size_t>(w1_.rows()); }
  std::size_t output_dim() const { return static_cast<std::size_t>(w2_.rows()); }
  TaskKind task() const { return task_; }
  double dropout() const { return dropout_; }
  std::uint64_t init_seed() const { return init_seed_; }

  const Eigen::MatrixXd& w1() const { return w1_; }
  const Eigen::VectorXd& b1() const { return b1_; }
  const Eigen::MatrixXd& w2() const { return w2_; }
  const Eigen::VectorXd& b2() const { return b2_; }
  Eigen::MatrixXd& w1() { return w1_; }
  Eigen::VectorXd& b1() { return b1_; }
  Eigen::MatrixXd& w2() { return w2_; }
  Eigen::VectorXd& b2() { return b2_; }

  void set_input_scaling(Eigen::VectorXd mean, Eigen::VectorXd scale);
  /// z-score per column; constant columns get scale 1.
  void fit_input_scaling(const Eigen::MatrixXd& X);
  void set_target_scaling(Eigen::VectorXd mean, Eigen::VectorXd scale);
  void fit_target_scaling(const Eigen::MatrixXd& Y);
  bool target_scaling_fitted() const { return target_fitted_; }
  const Eigen::VectorXd& input_mean() const { return in_mean_; }
  const Eigen::VectorXd& input_scale() const { return in_scale_; }
  const Eigen::VectorXd& target_mean() const { return t_mean_; }
  const Eigen::VectorXd& target_scale() const { return t_scale_; }

  /// Re-draws all parameters and clears optimizer state.
  void reinitialize(std::uint64_t seed);

  /// Pre-activation outputs (logits, or standardised values for regression). Dropout off.
  Eigen::MatrixXd logits(const Eigen::MatrixXd& X) const;
  /// Task-activated outputs in interface units. Dropout off.
  Eigen::MatrixXd forward(const Eigen::MatrixXd& X) const;
  /// Task loss on (X, Y) with dropout off. Y is one-hot / 0-1 / original-unit targets.
  double loss(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y) const;
  /// Per-sample task loss (row i of X), dropout off.
  Eigen::VectorXd sample_losses(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y) const;

  /// Analytic gradients of the mean loss. `mask` (n x H, already scaled) applies dropout to the hidden layer.
  Gradients gradients(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y,
                      const Eigen::MatrixXd* mask = nullptr) const;

  /// d(sum_j D(i,j) * logit_j(x_i)) / dx_i, in raw input units. Dropout off.
  Eigen::MatrixXd logit_input_gradient(const Eigen::MatrixXd& X, const Eigen::MatrixXd& D) const;

  /// One AdamW step.
  void adamw_step(const Gradients& g, const TrainConfig& cfg);

  std::vector<double> flat_parameters() const;
  void set_flat_parameters(const std::vector<double>& p);
  std::size_t parameter_count() const;

  Eigen::MatrixXd to_interface(const Eigen::MatrixXd& logits) const;
  Eigen::MatrixXd scale_inputs(const Eigen::MatrixXd& X) const;

 private:
  Eigen::MatrixXd standardized_targets(const Eigen::MatrixXd& Y) const;
  Eigen::MatrixXd output_delta(const Eigen::MatrixXd& Z2, const Eigen::MatrixXd& Y, double* loss) const;

  TaskKind task_;
  double dropout_;
  std::uint64_t init_seed_;
  Eigen::MatrixXd w1_, w2_;
  Eigen::VectorXd b1_, b2_;
  Eigen::VectorXd in_mean_, in_scale_;
  Eigen::VectorXd t_mean_, t_scale_;
  bool target_fitted_ = false;

  // AdamW moments, same layout as flat_parameters()
  std::vector<double> m_, v_;
  long step_ = 0;
};

/// Runs cfg.epochs full-batch AdamW steps on (X, Y). Returns the final training loss (dropout off).
double train(Mlp& model, const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y, const TrainConfig& cfg);

/// mc_passes == 0: deterministic pass. Otherwise mc_passes stochastic passes with dropout and their mean.
Prediction predict(const Mlp& model, const Eigen::MatrixXd& X, int mc_passes = 0, std::uint64_t seed = 0);

/// Maximum relative error between analytic and central-difference gradients (step 1e-5).
/// Works on a copy whose hidden biases are nudged so no pre-activation sits at the ReLU kink.
double gradient_check(const Mlp& model, const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y);

/// Binary snapshot: 16-byte header (magic "KALM", d, H, c as little-endian u32) then little-endian f32 values.
void save_snapshot(const Mlp& model, const std::filesystem::path& path);
Mlp load_snapshot(const std::filesystem::path& path);

/// Encodes labels for training: class indices -> one-hot (multiclass) or 0/1 column (binary).
Eigen::MatrixXd encode_classes(const std::vector<int>& labels, TaskKind task, std::size_t heads);

}  // namespace kal::model
