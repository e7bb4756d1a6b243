#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "kal/knowledge.hpp"
#include "kal/types.hpp"

namespace kal::data {

/// Malformed or unreadable input data. `line` is 1-based, 0 when not tied to a row.
class DataError : public std::runtime_error {
 public:
  DataError(const std::string& message, std::size_t line = 0);
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

struct Dataset {
  std::string name;
  TaskKind task = TaskKind::Binary;
  Eigen::MatrixXd X;            // n x d, units the predicates are written in
  std::vector<int> labels;      // class index per row (classification)
  Eigen::MatrixXd Y;            // encoded targets: 0/1 column, one-hot, or real values
  std::size_t classes = 0;      // output heads
  std::vector<std::string> feature_names;
  std::vector<std::string> target_names;
  std::string knowledge_text;   // canonical rule file
  bool standardize_inputs = false;  // network sees z-scored copies of X

  std::size_t size() const { return static_cast<std::size_t>(X.rows()); }
  Schema schema() const;
  knowledge::KnowledgeBase knowledge() const;
};

struct Fold {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

struct FoldPlan {
  std::size_t k = 0;
  std::uint64_t seed = 0;
  std::vector<Fold> folds;
};

/// k folds with sorted index lists. Classification datasets are stratified by class.
FoldPlan make_folds(const Dataset& ds, std::size_t k, std::uint64_t seed);

/// Uniform points in the unit square, y = 1 on the off-diagonal quadrants.
Dataset make_xor(std::size_t n_total, std::uint64_t seed);
int xor_label(double x1, double x2);

Dataset load_iris(const std::filesystem::path& csv, bool min_max = true);
Dataset parse_iris(std::string_view text, bool min_max = true);

Dataset load_insurance(const std::filesystem::path& csv);
Dataset parse_insurance(std::string_view text);
/// Synthetic stand-in with the marginals and charge structure of the public insurance table.
Dataset make_insurance_synthetic(std::size_t n = 1338, std::uint64_t seed = 0);
std::string insurance_csv(const Dataset& ds);

std::string_view xor_knowledge();
std::string_view iris_knowledge();
std::string_view insurance_knowledge();

/// Directory holding iris.csv and the bundled .kal files.
std::filesystem::path default_data_dir();

std::string read_file(const std::filesystem::path& path);

}  // namespace kal::data
