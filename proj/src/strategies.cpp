#include "kal/strategies.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>

namespace kal::strategies {

using Eigen::Index;
using Eigen::MatrixXd;

namespace {

struct Entry {
  StrategyId id;
  std::string_view name;
};

constexpr Entry kEntries[] = {
    {StrategyId::Kal, "kal"},           {StrategyId::KalD, "kal_d"},
    {StrategyId::KalXai, "kal_xai"},    {StrategyId::Entropy, "entropy"},
    {StrategyId::EntropyD, "entropy_d"}, {StrategyId::Margin, "margin"},
    {StrategyId::MarginD, "margin_d"},  {StrategyId::LeastConf, "leastconf"},
    {StrategyId::LeastConfD, "leastconf_d"}, {StrategyId::Bald, "bald"},
    {StrategyId::KCenter, "kcenter"},   {StrategyId::KMeans, "kmeans"},
    {StrategyId::SupLoss, "suploss"},   {StrategyId::AdvBim, "adv_bim"},
    {StrategyId::Random, "random"},
};

}  // namespace

StrategyId strategy_from_string(std::string_view id) {
  for (const auto& e : kEntries) {
    if (e.name == id) return e.id;
  }
  throw ContractError("unknown strategy '" + std::string(id) + "'");
}

std::string_view to_string(StrategyId id) {
  for (const auto& e : kEntries) {
    if (e.id == id) return e.name;
  }
  return "?";
}

const std::vector<StrategyId>& all_strategies() {
  static const std::vector<StrategyId> ids = [] {
    std::vector<StrategyId> v;
    for (const auto& e : kEntries) v.push_back(e.id);
    return v;
  }();
  return ids;
}

bool uses_mc_dropout(StrategyId id) {
  switch (id) {
    case StrategyId::KalD:
    case StrategyId::EntropyD:
    case StrategyId::MarginD:
    case StrategyId::LeastConfD:
    case StrategyId::Bald: return true;
    default: return false;
  }
}

bool classification_only(StrategyId id) {
  switch (id) {
    case StrategyId::KalXai:
    case StrategyId::Entropy:
    case StrategyId::EntropyD:
    case StrategyId::Margin:
    case StrategyId::MarginD:
    case StrategyId::LeastConf:
    case StrategyId::LeastConfD:
    case StrategyId::Bald:
    case StrategyId::AdvBim: return true;
    default: return false;
  }
}

// ---------------------------------------------------------------------------
// Shared helpers

MatrixXd main_class_probabilities(const MatrixXd& F, TaskKind task) {
  if (task == TaskKind::Regression) throw NotApplicableError("strategy not applicable to regression");
  if (task == TaskKind::Binary) {
    MatrixXd out(F.rows(), 2);
    out.col(0) = F.col(0);
    out.col(1) = (1.0 - F.col(0).array()).matrix();
    return out;
  }
  if (task == TaskKind::Multilabel) return logit_softmax(F, task);
  return F;
}

MatrixXd logit_softmax(const MatrixXd& F, TaskKind task) {
  if (task == TaskKind::Regression) throw NotApplicableError("strategy not applicable to regression");
  MatrixXd probs = task == TaskKind::Binary ? main_class_probabilities(F, task) : F;
  MatrixXd out(probs.rows(), probs.cols());
  for (Index i = 0; i < probs.rows(); ++i) {
    Eigen::ArrayXd f = probs.row(i).transpose().array().min(1.0 - 1e-7).max(1e-7);
    Eigen::ArrayXd logit = f.log() - (1.0 - f).log();
    logit -= logit.maxCoeff();
    Eigen::ArrayXd e = logit.exp();
    out.row(i) = (e / e.sum()).transpose();
  }
  return out;
}

double entropy(std::span<const double> probs) {
  double h = 0.0;
  for (double p : probs) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

std::vector<std::size_t> rank_descending(std::span<const double> scores) {
  return rank_descending(scores, scores.size());
}

std::vector<std::size_t> rank_descending(std::span<const double> scores, std::size_t head) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  auto before = [&](std::size_t a, std::size_t b) { return scores[a] > scores[b] || (scores[a] == scores[b] && a < b); };
  head = std::min(head, order.size());
  if (head == order.size()) {
    std::sort(order.begin(), order.end(), before);
    return order;
  }
  std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(head), order.end(), before);
  order.resize(head);
  std::sort(order.begin(), order.end(), before);
  return order;
}

namespace {

void check_request(const SelectionRequest& req) {
  if (req.unlabeled.empty()) throw ContractError("selection: empty unlabeled pool");
  if (req.p == 0) throw ContractError("selection: batch size must be positive");
  if (req.p > req.unlabeled.size()) {
    throw ContractError("selection: batch size " + std::to_string(req.p) + " exceeds unlabeled pool of " +
                        std::to_string(req.unlabeled.size()));
  }
}

void check_predictions(const SelectionRequest& req) {
  if (req.predictions == nullptr) throw ContractError("selection: predictions required");
  if (static_cast<std::size_t>(req.predictions->mean.rows()) != req.unlabeled.size()) {
    throw ContractError("selection: predictions must have one row per unlabeled sample");
  }
}

void check_classification(const SelectionRequest& req) {
  if (!is_classification(req.task)) throw NotApplicableError("strategy not applicable to regression");
}

const MatrixXd& checked_x(const SelectionRequest& req) {
  if (req.X == nullptr) throw ContractError("selection: pool inputs required");
  return *req.X;
}

MatrixXd gather_rows(const MatrixXd& X, std::span<const std::size_t> rows) {
  MatrixXd out(static_cast<Index>(rows.size()), X.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const std::size_t r = rows[i];
    if (r >= static_cast<std::size_t>(X.rows())) throw ContractError("selection: pool index out of range");
    out.row(static_cast<Index>(i)) = X.row(static_cast<Index>(r));
  }
  return out;
}

SelectionResult top_p(const SelectionRequest& req, std::vector<double> scores) {
  SelectionResult res;
  auto order = rank_descending(scores, req.p);
  for (std::size_t k = 0; k < req.p; ++k) res.chosen.push_back(req.unlabeled[order[k]]);
  res.scores = std::move(scores);
  return res;
}

const MatrixXd& mean_prediction(const SelectionRequest& req, bool mc) {
  check_predictions(req);
  if (mc && req.predictions->passes.empty()) throw ContractError("selection: MC variant needs dropout passes");
  return req.predictions->mean;
}

}  // namespace

// ---------------------------------------------------------------------------
// KAL

SelectionResult select_kal(const SelectionRequest& req, bool mc, const KalOptions& opts) {
  check_request(req);
  const MatrixXd& F = mean_prediction(req, mc);
  if (req.knowledge == nullptr) throw ContractError("kal: compiled knowledge required");
  MatrixXd Xu = gather_rows(checked_x(req), req.unlabeled);

  MatrixXd V;
  if (mc && opts.per_pass_violations) {
    V = MatrixXd::Zero(Xu.rows(), static_cast<Index>(req.knowledge->rules().size()));
    for (const auto& pass : req.predictions->passes) V += req.knowledge->violation_matrix(Xu, pass);
    V /= static_cast<double>(req.predictions->passes.size());
  } else {
    V = req.knowledge->violation_matrix(Xu, F);
  }

  const std::size_t n = req.unlabeled.size();
  std::vector<double> scores(n, 0.0);
  std::vector<int> groups(n, V.cols() > 0 ? 0 : -1);
  if (V.cols() > 0) {
    Eigen::VectorXd::Map(scores.data(), static_cast<Index>(n)) = V.rowwise().sum();
    Eigen::VectorXd best = V.col(0);
    for (Index r = 1; r < V.cols(); ++r) {
      for (std::size_t s = 0; s < n; ++s) {
        const double v = V(static_cast<Index>(s), r);
        if (v > best(static_cast<Index>(s))) {  // ties stay on the lowest rule index
          best(static_cast<Index>(s)) = v;
          groups[s] = static_cast<int>(r);
        }
      }
    }
  }

  const std::size_t cap = req.r > 0 ? req.r : std::max<std::size_t>(1, req.p / 2);
  const bool capped = req.diversity && V.cols() > 0;
  auto before = [&](std::size_t a, std::size_t b) { return scores[a] > scores[b] || (scores[a] == scores[b] && a < b); };

  // A capped walk down the ranking accepts exactly the top `cap` members of each group, in ranking order.
  std::vector<std::size_t> chosen;
  if (capped) {
    std::vector<std::vector<std::size_t>> by_group(static_cast<std::size_t>(V.cols()));
    for (std::size_t s = 0; s < n; ++s) by_group[static_cast<std::size_t>(groups[s])].push_back(s);
    for (auto& members : by_group) {
      const auto keep = static_cast<std::ptrdiff_t>(std::min(cap, members.size()));
      std::nth_element(members.begin(), members.begin() + keep, members.end(), before);
      chosen.insert(chosen.end(), members.begin(), members.begin() + keep);
    }
    std::sort(chosen.begin(), chosen.end(), before);
    if (chosen.size() > req.p) chosen.resize(req.p);
  }
  // relax the cap and fill by score
  if (chosen.size() < req.p) {
    std::vector<bool> taken(n, false);
    for (std::size_t s : chosen) taken[s] = true;
    for (std::size_t s : rank_descending(scores, req.p + chosen.size())) {
      if (chosen.size() == req.p) break;
      if (!taken[s]) chosen.push_back(s);
    }
  }
  SelectionResult res;
  for (std::size_t s : chosen) res.chosen.push_back(req.unlabeled[s]);
  res.scores = std::move(scores);
  res.groups = std::move(groups);
  return res;
}

// ---------------------------------------------------------------------------
// Uncertainty baselines

SelectionResult select_entropy(const SelectionRequest& req, bool mc) {
  check_request(req);
  check_classification(req);
  MatrixXd probs = logit_softmax(mean_prediction(req, mc), req.task);
  std::vector<double> scores(req.unlabeled.size());
  for (Index i = 0; i < probs.rows(); ++i) {
    Eigen::VectorXd row = probs.row(i).transpose();
    scores[static_cast<std::size_t>(i)] = entropy(std::span<const double>(row.data(), static_cast<std::size_t>(row.size())));
  }
  return top_p(req, std::move(scores));
}

SelectionResult select_margin(const SelectionRequest& req, bool mc) {
  check_request(req);
  check_classification(req);
  MatrixXd probs = main_class_probabilities(mean_prediction(req, mc), req.task);
  std::vector<double> scores(req.unlabeled.size());
  for (Index i = 0; i < probs.rows(); ++i) {
    double first = -1.0, second = -1.0;
    for (Index j = 0; j < probs.cols(); ++j) {
      double v = probs(i, j);
      if (v > first) {
        second = first;
        first = v;
      } else if (v > second) {
        second = v;
      }
    }
    scores[static_cast<std::size_t>(i)] = -(first - second);
  }
  return top_p(req, std::move(scores));
}

SelectionResult select_leastconf(const SelectionRequest& req, bool mc) {
  check_request(req);
  check_classification(req);
  MatrixXd probs = main_class_probabilities(mean_prediction(req, mc), req.task);
  std::vector<double> scores(req.unlabeled.size());
  for (Index i = 0; i < probs.rows(); ++i) scores[static_cast<std::size_t>(i)] = 1.0 - probs.row(i).maxCoeff();
  return top_p(req, std::move(scores));
}

SelectionResult select_bald(const SelectionRequest& req) {
  check_request(req);
  check_classification(req);
  check_predictions(req);
  const auto& passes = req.predictions->passes;
  if (passes.size() < 2) throw ContractError("bald: needs at least two MC passes");
  const std::size_t n = req.unlabeled.size();
  std::vector<double> mean_pass_entropy(n, 0.0);
  MatrixXd mean_probs;
  for (const auto& pass : passes) {
    MatrixXd probs = main_class_probabilities(pass, req.task);
    mean_probs = mean_probs.size() == 0 ? probs : MatrixXd(mean_probs + probs);
    for (Index i = 0; i < probs.rows(); ++i) {
      Eigen::VectorXd row = probs.row(i).transpose();
      mean_pass_entropy[static_cast<std::size_t>(i)] += entropy({row.data(), static_cast<std::size_t>(row.size())});
    }
  }
  mean_probs /= static_cast<double>(passes.size());
  std::vector<double> scores(n);
  for (std::size_t i = 0; i < n; ++i) {
    Eigen::VectorXd row = mean_probs.row(static_cast<Index>(i)).transpose();
    double h = entropy({row.data(), static_cast<std::size_t>(row.size())});
    // clamp rounding noise so identical passes score exactly 0
    scores[i] = std::max(0.0, h - mean_pass_entropy[i] / static_cast<double>(passes.size()));
    if (scores[i] < 1e-15) scores[i] = 0.0;
  }
  return top_p(req, std::move(scores));
}

// ---------------------------------------------------------------------------
// Diversity baselines

SelectionResult select_kcenter(const SelectionRequest& req) {
  check_request(req);
  const MatrixXd& X = checked_x(req);
  MatrixXd U = gather_rows(X, req.unlabeled);
  const std::size_t n = req.unlabeled.size();
  std::vector<double> min_dist(n, std::numeric_limits<double>::infinity());
  for (std::size_t l : req.labeled) {
    auto center = X.row(static_cast<Index>(l));
    for (std::size_t i = 0; i < n; ++i) {
      min_dist[i] = std::min(min_dist[i], (U.row(static_cast<Index>(i)) - center).squaredNorm());
    }
  }
  SelectionResult res;
  std::vector<bool> taken(n, false);
  for (std::size_t k = 0; k < req.p; ++k) {
    std::size_t best = n;
    for (std::size_t i = 0; i < n; ++i) {
      if (!taken[i] && (best == n || min_dist[i] > min_dist[best])) best = i;
    }
    taken[best] = true;
    res.chosen.push_back(req.unlabeled[best]);
    auto center = U.row(static_cast<Index>(best));
    for (std::size_t i = 0; i < n; ++i) {
      min_dist[i] = std::min(min_dist[i], (U.row(static_cast<Index>(i)) - center).squaredNorm());
    }
  }
  res.scores.resize(n);
  for (std::size_t i = 0; i < n; ++i) res.scores[i] = std::sqrt(min_dist[i]);
  return res;
}

MatrixXd kmeans(const MatrixXd& points, std::size_t k, std::uint64_t seed, int max_iters, double tol) {
  const Index n = points.rows();
  if (k == 0 || static_cast<Index>(k) > n) throw ContractError("kmeans: k must lie in [1, number of points]");
  std::mt19937_64 rng(seed);
  MatrixXd centers(static_cast<Index>(k), points.cols());
  // k-means++ seeding
  std::uniform_int_distribution<Index> first(0, n - 1);
  centers.row(0) = points.row(first(rng));
  Eigen::VectorXd d2(n);
  for (Index i = 0; i < n; ++i) d2(i) = (points.row(i) - centers.row(0)).squaredNorm();
  for (std::size_t c = 1; c < k; ++c) {
    const double total = d2.sum();
    Index pick = 0;
    if (total > 0.0) {
      std::uniform_real_distribution<double> u(0.0, total);
      double target = u(rng), acc = 0.0;
      pick = n - 1;
      for (Index i = 0; i < n; ++i) {
        acc += d2(i);
        if (acc >= target && d2(i) > 0.0) {
          pick = i;
          break;
        }
      }
    } else {
      pick = first(rng);
    }
    centers.row(static_cast<Index>(c)) = points.row(pick);
    for (Index i = 0; i < n; ++i) d2(i) = std::min(d2(i), (points.row(i) - centers.row(static_cast<Index>(c))).squaredNorm());
  }
  // Lloyd iterations
  std::vector<Index> assign(static_cast<std::size_t>(n), 0);
  for (int it = 0; it < max_iters; ++it) {
    for (Index i = 0; i < n; ++i) {
      Index best = 0;
      double bd = (points.row(i) - centers.row(0)).squaredNorm();
      for (Index c = 1; c < centers.rows(); ++c) {
        double d = (points.row(i) - centers.row(c)).squaredNorm();
        if (d < bd) {
          bd = d;
          best = c;
        }
      }
      assign[static_cast<std::size_t>(i)] = best;
    }
    MatrixXd next = MatrixXd::Zero(centers.rows(), centers.cols());
    Eigen::VectorXd counts = Eigen::VectorXd::Zero(centers.rows());
    for (Index i = 0; i < n; ++i) {
      next.row(assign[static_cast<std::size_t>(i)]) += points.row(i);
      counts(assign[static_cast<std::size_t>(i)]) += 1.0;
    }
    double shift = 0.0;
    for (Index c = 0; c < centers.rows(); ++c) {
      if (counts(c) > 0) {
        next.row(c) /= counts(c);
      } else {
        next.row(c) = centers.row(c);  // empty cluster keeps its centroid
      }
      shift = std::max(shift, (next.row(c) - centers.row(c)).norm());
    }
    centers = std::move(next);
    if (shift <= tol) break;
  }
  return centers;
}

SelectionResult select_kmeans(const SelectionRequest& req) {
  check_request(req);
  MatrixXd U = gather_rows(checked_x(req), req.unlabeled);
  MatrixXd centers = kmeans(U, req.p, req.seed);
  const std::size_t n = req.unlabeled.size();
  SelectionResult res;
  res.scores.assign(n, -std::numeric_limits<double>::infinity());
  std::vector<bool> taken(n, false);
  for (Index c = 0; c < centers.rows(); ++c) {
    std::size_t best = n;
    double bd = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double d = (U.row(static_cast<Index>(i)) - centers.row(c)).squaredNorm();
      res.scores[i] = std::max(res.scores[i], -std::sqrt(d));
      if (!taken[i] && (best == n || d < bd)) {
        best = i;
        bd = d;
      }
    }
    taken[best] = true;
    res.chosen.push_back(req.unlabeled[best]);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Oracle and adversarial baselines

SelectionResult select_suploss(const SelectionRequest& req) {
  if (!req.benchmark_mode) throw ContractError("suploss needs true labels and only runs in benchmark mode");
  check_request(req);
  check_predictions(req);
  if (req.targets == nullptr) throw ContractError("suploss: targets required");
  const MatrixXd& F = req.predictions->mean;
  const MatrixXd& Y = *req.targets;
  std::vector<double> scores(req.unlabeled.size());
  for (std::size_t i = 0; i < req.unlabeled.size(); ++i) {
    auto f = F.row(static_cast<Index>(i));
    auto y = Y.row(static_cast<Index>(req.unlabeled[i]));
    double loss = 0.0;
    for (Index j = 0; j < F.cols(); ++j) {
      double p = std::clamp(f(j), 1e-12, 1.0 - 1e-12);
      switch (req.task) {
        case TaskKind::Multiclass: loss -= y(j) * std::log(p); break;
        case TaskKind::Binary:
        case TaskKind::Multilabel: loss -= y(j) * std::log(p) + (1.0 - y(j)) * std::log(1.0 - p); break;
        case TaskKind::Regression: loss += (f(j) - y(j)) * (f(j) - y(j)); break;
      }
    }
    scores[i] = loss;
  }
  return top_p(req, std::move(scores));
}

namespace {

// Predicted main class: for a binary head f >= 0.5 is class 0 in [f, 1-f].
Index main_class(const Eigen::RowVectorXd& f, TaskKind task) {
  if (task == TaskKind::Binary) return f(0) >= 0.5 ? 0 : 1;
  Index best = 0;
  for (Index j = 1; j < f.size(); ++j) {
    if (f(j) > f(best)) best = j;
  }
  return best;
}

}  // namespace

SelectionResult select_adv_bim(const SelectionRequest& req, const AdvOptions& opts) {
  check_request(req);
  check_classification(req);
  if (req.model == nullptr) throw ContractError("adv_bim: model required");
  const model::Mlp& net = *req.model;
  const MatrixXd X0 = gather_rows(checked_x(req), req.unlabeled);
  const std::size_t n = req.unlabeled.size();
  MatrixXd X = X0;
  const MatrixXd F0 = net.forward(X0);
  std::vector<Index> original(n);
  for (std::size_t i = 0; i < n; ++i) original[i] = main_class(F0.row(static_cast<Index>(i)), req.task);
  std::vector<double> eps(n, std::numeric_limits<double>::infinity());
  std::vector<std::size_t> active(n);
  std::iota(active.begin(), active.end(), 0);

  for (int it = 0; it < opts.max_iters && !active.empty(); ++it) {
    MatrixXd Xa(static_cast<Index>(active.size()), X.cols());
    for (std::size_t a = 0; a < active.size(); ++a) Xa.row(static_cast<Index>(a)) = X.row(static_cast<Index>(active[a]));
    MatrixXd Z = net.logits(Xa);
    // gradient of the margin between the original class and its strongest rival
    MatrixXd D = MatrixXd::Zero(Z.rows(), Z.cols());
    for (std::size_t a = 0; a < active.size(); ++a) {
      const Index row = static_cast<Index>(a);
      const Index c0 = original[active[a]];
      if (req.task == TaskKind::Binary) {
        D(row, 0) = c0 == 0 ? 1.0 : -1.0;
      } else {
        Index rival = c0 == 0 ? 1 : 0;
        for (Index j = 0; j < Z.cols(); ++j) {
          if (j != c0 && Z(row, j) > Z(row, rival)) rival = j;
        }
        D(row, c0) = 1.0;
        D(row, rival) = -1.0;
      }
    }
    MatrixXd G = net.logit_input_gradient(Xa, D);
    Xa -= opts.step * G.unaryExpr([](double g) { return static_cast<double>((g > 0) - (g < 0)); });
    MatrixXd Fa = net.forward(Xa);
    std::vector<std::size_t> still;
    for (std::size_t a = 0; a < active.size(); ++a) {
      const std::size_t i = active[a];
      X.row(static_cast<Index>(i)) = Xa.row(static_cast<Index>(a));
      if (main_class(Fa.row(static_cast<Index>(a)), req.task) != original[i]) {
        eps[i] = (X.row(static_cast<Index>(i)) - X0.row(static_cast<Index>(i))).norm();
      } else {
        still.push_back(i);
      }
    }
    active = std::move(still);
  }
  std::vector<double> scores(n);
  for (std::size_t i = 0; i < n; ++i) {
    scores[i] = opts.largest ? (std::isinf(eps[i]) ? -std::numeric_limits<double>::infinity() : eps[i]) : -eps[i];
  }
  return top_p(req, std::move(scores));
}

SelectionResult select_random(const SelectionRequest& req) {
  check_request(req);
  std::mt19937_64 rng(req.seed);
  std::vector<std::size_t> pos(req.unlabeled.size());
  std::iota(pos.begin(), pos.end(), 0);
  SelectionResult res;
  for (std::size_t k = 0; k < req.p; ++k) {
    std::uniform_int_distribution<std::size_t> pick(k, pos.size() - 1);
    std::swap(pos[k], pos[pick(rng)]);
    res.chosen.push_back(req.unlabeled[pos[k]]);
  }
  return res;
}

SelectionResult select(StrategyId id, const SelectionRequest& req, const StrategyOptions& opts) {
  auto start = std::chrono::steady_clock::now();
  SelectionResult res;
  switch (id) {
    case StrategyId::Kal: res = select_kal(req, false, opts.kal); break;
    case StrategyId::KalD: res = select_kal(req, true, opts.kal); break;
    case StrategyId::Entropy: res = select_entropy(req, false); break;
    case StrategyId::EntropyD: res = select_entropy(req, true); break;
    case StrategyId::Margin: res = select_margin(req, false); break;
    case StrategyId::MarginD: res = select_margin(req, true); break;
    case StrategyId::LeastConf: res = select_leastconf(req, false); break;
    case StrategyId::LeastConfD: res = select_leastconf(req, true); break;
    case StrategyId::Bald: res = select_bald(req); break;
    case StrategyId::KCenter: res = select_kcenter(req); break;
    case StrategyId::KMeans: res = select_kmeans(req); break;
    case StrategyId::SupLoss: res = select_suploss(req); break;
    case StrategyId::AdvBim: res = select_adv_bim(req, opts.adv); break;
    case StrategyId::Random: res = select_random(req); break;
    case StrategyId::KalXai: throw ContractError("kal_xai is dispatched by the xai module");
  }
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return res;
}

}  // namespace kal::strategies
