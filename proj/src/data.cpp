#include "kal/data.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "kal/model.hpp"

#ifndef KAL_DATA_DIR
#define KAL_DATA_DIR "data"
#endif

namespace kal::data {

using Eigen::Index;
using Eigen::MatrixXd;

namespace {

constexpr std::string_view kXorRules = R"(# XOR-like toy task
input X1 = feature(0) > 0.5 tau 100
input X2 = feature(1) > 0.5 tau 100
output F = class(0)

rule r1: X1 xor X2 <=> F
)";

constexpr std::string_view kIrisRules = R"(# Iris, petal features min-max scaled to [0, 1]
input LongPetal = feature(2) > 0.5
input WidePetal = feature(3) > 0.5
output Setosa = class(0)
output Versicolour = class(1)
output Virginica = class(2)

rule r1: not LongPetal <=> Setosa
rule r2: LongPetal and not WidePetal <=> Versicolour
rule r3: LongPetal and WidePetal <=> Virginica
rule exclusive: Setosa xor Versicolour xor Virginica
)";

constexpr std::string_view kInsuranceRules = R"(# Insurance charges; age and bmi in natural units
input Smoker = feature(4) > 0.5
input Young = feature(0) < 40
input Old = feature(0) > 40
input Lean = feature(2) < 30
input Obese = feature(2) > 30
output Under7500 = value(0) < 7500 tau 0.01
output Over7500 = value(0) > 7500 tau 0.01
output Under15000 = value(0) < 15000 tau 0.01
output Over15000 = value(0) > 15000 tau 0.01
output Under30000 = value(0) < 30000 tau 0.01
output Over30000 = value(0) > 30000 tau 0.01

rule r1: not Smoker and Young <=> Under7500
rule r2: not Smoker and Old <=> Over7500 and Under15000
rule r3: Smoker and Lean <=> Over15000 and Under30000
rule r4: Smoker and Obese <=> Over30000
)";

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

std::vector<std::string_view> split(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    std::size_t pos = line.find(',', start);
    out.push_back(trim(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

// Non-empty lines with their 1-based line numbers.
std::vector<std::pair<std::size_t, std::string_view>> csv_lines(std::string_view text) {
  std::vector<std::pair<std::size_t, std::string_view>> out;
  std::size_t line_no = 0, start = 0;
  while (start <= text.size()) {
    std::size_t pos = text.find('\n', start);
    std::string_view line = text.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start);
    ++line_no;
    if (!trim(line).empty()) out.emplace_back(line_no, line);
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

double parse_number(std::string_view field, std::size_t line, std::string_view column) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
  if (ec != std::errc() || ptr != field.data() + field.size() || !std::isfinite(v)) {
    throw DataError("invalid number '" + std::string(field) + "' in column " + std::string(column), line);
  }
  return v;
}

std::vector<std::pair<std::size_t, std::string_view>> checked_rows(std::string_view text, std::string_view header) {
  auto lines = csv_lines(text);
  if (lines.empty()) throw DataError("empty CSV");
  auto got = split(lines.front().second);
  auto want = split(header);
  if (got != want) {
    throw DataError("unexpected header, expected '" + std::string(header) + "'", lines.front().first);
  }
  lines.erase(lines.begin());
  if (lines.empty()) throw DataError("CSV has a header but no rows");
  for (const auto& [no, line] : lines) {
    if (split(line).size() != want.size()) {
      throw DataError("expected " + std::to_string(want.size()) + " fields", no);
    }
  }
  return lines;
}

int lookup(std::string_view value, std::initializer_list<std::string_view> levels, std::size_t line,
           std::string_view column) {
  int i = 0;
  for (auto level : levels) {
    if (level == value) return i;
    ++i;
  }
  throw DataError("unknown category '" + std::string(value) + "' in column " + std::string(column), line);
}

}  // namespace

DataError::DataError(const std::string& message, std::size_t line)
    : std::runtime_error(line > 0 ? "line " + std::to_string(line) + ": " + message : message), line_(line) {}

Schema Dataset::schema() const { return Schema{static_cast<std::size_t>(X.cols()), classes, task}; }

knowledge::KnowledgeBase Dataset::knowledge() const { return knowledge::parse_knowledge(knowledge_text, schema()); }

FoldPlan make_folds(const Dataset& ds, std::size_t k, std::uint64_t seed) {
  const std::size_t n = ds.size();
  if (k < 2 || k > n) throw ContractError("fold count must lie in [2, dataset size]");
  std::mt19937_64 rng(seed);
  FoldPlan plan;
  plan.k = k;
  plan.seed = seed;
  std::vector<std::size_t> assignment(n);

  std::vector<std::vector<std::size_t>> strata;
  if (is_classification(ds.task) && !ds.labels.empty()) {
    strata.resize(ds.classes == 1 ? 2 : ds.classes);
    for (std::size_t i = 0; i < n; ++i) strata[static_cast<std::size_t>(ds.labels[i])].push_back(i);
  } else {
    strata.emplace_back(n);
    std::iota(strata[0].begin(), strata[0].end(), 0);
  }
  // deal each shuffled stratum round-robin, continuing the rotation across strata
  std::size_t next = 0;
  for (auto& stratum : strata) {
    std::shuffle(stratum.begin(), stratum.end(), rng);
    for (std::size_t idx : stratum) {
      assignment[idx] = next;
      next = (next + 1) % k;
    }
  }
  plan.folds.resize(k);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t f = 0; f < k; ++f) {
      (assignment[i] == f ? plan.folds[f].test : plan.folds[f].train).push_back(i);
    }
  }
  return plan;
}

int xor_label(double x1, double x2) { return ((x1 > 0.5 && x2 <= 0.5) || (x1 <= 0.5 && x2 > 0.5)) ? 1 : 0; }

Dataset make_xor(std::size_t n_total, std::uint64_t seed) {
  if (n_total < 4) throw ContractError("make_xor: n_total must be at least 4");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Dataset ds;
  ds.name = "xor";
  ds.task = TaskKind::Binary;
  ds.classes = 1;
  ds.X.resize(static_cast<Index>(n_total), 2);
  ds.labels.resize(n_total);
  for (std::size_t i = 0; i < n_total; ++i) {
    double a = u(rng), b = u(rng);
    ds.X(static_cast<Index>(i), 0) = a;
    ds.X(static_cast<Index>(i), 1) = b;
    ds.labels[i] = xor_label(a, b);
  }
  ds.Y = model::encode_classes(ds.labels, ds.task, 1);
  ds.feature_names = {"x1", "x2"};
  ds.target_names = {"f"};
  ds.knowledge_text = std::string(kXorRules);
  return ds;
}

Dataset parse_iris(std::string_view text, bool min_max) {
  auto rows = checked_rows(text, "sepal_length,sepal_width,petal_length,petal_width,species");
  Dataset ds;
  ds.name = "iris";
  ds.task = TaskKind::Multiclass;
  ds.classes = 3;
  ds.X.resize(static_cast<Index>(rows.size()), 4);
  ds.feature_names = {"sepal_length", "sepal_width", "petal_length", "petal_width"};
  ds.target_names = {"setosa", "versicolor", "virginica"};
  for (std::size_t r = 0; r < rows.size(); ++r) {
    auto [no, line] = rows[r];
    auto fields = split(line);
    for (Index j = 0; j < 4; ++j) {
      ds.X(static_cast<Index>(r), j) = parse_number(fields[static_cast<std::size_t>(j)], no,
                                                    ds.feature_names[static_cast<std::size_t>(j)]);
    }
    std::string_view species = fields[4];
    if (species.starts_with("Iris-")) species.remove_prefix(5);
    ds.labels.push_back(lookup(species, {"setosa", "versicolor", "virginica"}, no, "species"));
  }
  if (min_max) {
    for (Index j = 0; j < ds.X.cols(); ++j) {
      double lo = ds.X.col(j).minCoeff(), hi = ds.X.col(j).maxCoeff();
      double span = hi > lo ? hi - lo : 1.0;
      ds.X.col(j) = ((ds.X.col(j).array() - lo) / span).matrix();
    }
  }
  ds.Y = model::encode_classes(ds.labels, ds.task, 3);
  ds.knowledge_text = std::string(kIrisRules);
  return ds;
}

Dataset load_iris(const std::filesystem::path& csv, bool min_max) { return parse_iris(read_file(csv), min_max); }

Dataset parse_insurance(std::string_view text) {
  auto rows = checked_rows(text, "age,sex,bmi,children,smoker,region,charges");
  Dataset ds;
  ds.name = "insurance";
  ds.task = TaskKind::Regression;
  ds.classes = 1;
  ds.standardize_inputs = true;
  ds.X.resize(static_cast<Index>(rows.size()), 6);
  ds.Y.resize(static_cast<Index>(rows.size()), 1);
  ds.feature_names = {"age", "sex", "bmi", "children", "smoker", "region"};
  ds.target_names = {"charges"};
  for (std::size_t r = 0; r < rows.size(); ++r) {
    auto [no, line] = rows[r];
    auto f = split(line);
    const Index i = static_cast<Index>(r);
    ds.X(i, 0) = parse_number(f[0], no, "age");
    ds.X(i, 1) = lookup(f[1], {"female", "male"}, no, "sex");
    ds.X(i, 2) = parse_number(f[2], no, "bmi");
    ds.X(i, 3) = parse_number(f[3], no, "children");
    ds.X(i, 4) = lookup(f[4], {"no", "yes"}, no, "smoker");
    ds.X(i, 5) = lookup(f[5], {"northeast", "northwest", "southeast", "southwest"}, no, "region");
    ds.Y(i, 0) = parse_number(f[6], no, "charges");
  }
  ds.knowledge_text = std::string(kInsuranceRules);
  return ds;
}

Dataset load_insurance(const std::filesystem::path& csv) { return parse_insurance(read_file(csv)); }

Dataset make_insurance_synthetic(std::size_t n, std::uint64_t seed) {
  if (n < 2) throw ContractError("make_insurance_synthetic: n must be at least 2");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> age_dist(18, 64);
  std::bernoulli_distribution coin(0.5), smoker_dist(0.205), outlier(0.10);
  std::normal_distribution<double> bmi_dist(30.7, 6.1), noise(0.0, 600.0);
  std::discrete_distribution<int> children_dist({43, 24, 18, 12, 2, 1});
  std::uniform_int_distribution<int> region_dist(0, 3);
  std::exponential_distribution<double> extra(1.0 / 8000.0);

  Dataset ds;
  ds.name = "insurance";
  ds.task = TaskKind::Regression;
  ds.classes = 1;
  ds.standardize_inputs = true;
  ds.X.resize(static_cast<Index>(n), 6);
  ds.Y.resize(static_cast<Index>(n), 1);
  ds.feature_names = {"age", "sex", "bmi", "children", "smoker", "region"};
  ds.target_names = {"charges"};
  for (std::size_t r = 0; r < n; ++r) {
    const Index i = static_cast<Index>(r);
    double age = age_dist(rng);
    double sex = coin(rng) ? 1.0 : 0.0;
    double bmi = std::round(std::clamp(bmi_dist(rng), 16.0, 53.0) * 100.0) / 100.0;
    double children = children_dist(rng);
    bool smoker = smoker_dist(rng);
    double region = region_dist(rng);
    double charge;
    if (!smoker) {
      charge = 266.0 * age - 2700.0 + 475.0 * children + noise(rng);
      if (outlier(rng)) charge += extra(rng);
    } else if (bmi < 30.0) {
      charge = 266.0 * age + 11600.0 + noise(rng) * 3.0;
    } else {
      charge = 266.0 * age + 32000.0 + noise(rng) * 3.0;
    }
    ds.X.row(i) << age, sex, bmi, children, smoker ? 1.0 : 0.0, region;
    ds.Y(i, 0) = std::round(std::max(charge, 1100.0) * 100.0) / 100.0;
  }
  ds.knowledge_text = std::string(kInsuranceRules);
  return ds;
}

std::string insurance_csv(const Dataset& ds) {
  static constexpr std::array<std::string_view, 2> sex{"female", "male"}, smoker{"no", "yes"};
  static constexpr std::array<std::string_view, 4> region{"northeast", "northwest", "southeast", "southwest"};
  std::ostringstream out;
  out << "age,sex,bmi,children,smoker,region,charges\n";
  for (Index i = 0; i < ds.X.rows(); ++i) {
    out << knowledge::format_real(ds.X(i, 0)) << ',' << sex[static_cast<std::size_t>(ds.X(i, 1))] << ','
        << knowledge::format_real(ds.X(i, 2)) << ',' << knowledge::format_real(ds.X(i, 3)) << ','
        << smoker[static_cast<std::size_t>(ds.X(i, 4))] << ',' << region[static_cast<std::size_t>(ds.X(i, 5))] << ','
        << knowledge::format_real(ds.Y(i, 0)) << '\n';
  }
  return out.str();
}

std::string_view xor_knowledge() { return kXorRules; }
std::string_view iris_knowledge() { return kIrisRules; }
std::string_view insurance_knowledge() { return kInsuranceRules; }

std::filesystem::path default_data_dir() { return KAL_DATA_DIR; }

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace kal::data
