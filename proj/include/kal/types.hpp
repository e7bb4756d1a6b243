#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>

namespace kal {

/// Output layout of the network and the loss used to train it.
enum class TaskKind {
  Binary,      // one sigmoid head, exposed to multiclass strategies as [f, 1 - f]
  Multiclass,  // softmax over all heads
  Multilabel,  // independent sigmoid heads
  Regression,  // identity heads
};

std::string_view to_string(TaskKind kind);
TaskKind task_kind_from_string(std::string_view text);

inline bool is_classification(TaskKind kind) { return kind != TaskKind::Regression; }

/// Declared dimensions that predicate bindings are checked against.
struct Schema {
  std::size_t input_dim = 0;
  std::size_t output_dim = 0;
  TaskKind task = TaskKind::Binary;

  bool operator==(const Schema&) const = default;
};

/// Raised when a caller violates a documented precondition (shapes, indices, ranges).
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a strategy cannot be applied to a task (e.g. entropy on regression).
class NotApplicableError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace kal
