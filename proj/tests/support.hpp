#pragma once

#include <random>
#include <string>
#include <vector>

#include "kal/knowledge.hpp"
#include "kal/lowering.hpp"

namespace kal::testing {

using knowledge::Formula;

// Atoms a0..a{k-1}, each bound to feature(i) > 0.5 on a binary schema.
inline std::vector<knowledge::PredicateBinding> atom_bindings(std::size_t k) {
  std::vector<knowledge::PredicateBinding> out;
  for (std::size_t i = 0; i < k; ++i) {
    out.push_back({"a" + std::to_string(i), knowledge::InputThreshold{i, knowledge::Direction::Greater, 0.5}});
  }
  out.push_back({"F", knowledge::OutputClass{0}});
  return out;
}

struct FormulaGen {
  std::mt19937_64 rng;
  std::size_t atoms;
  bool binary_xor_only = false;

  FormulaGen(std::uint64_t seed, std::size_t atoms, bool binary_xor_only = false)
      : rng(seed), atoms(atoms), binary_xor_only(binary_xor_only) {}

  std::size_t pick(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); }

  Formula leaf() { return Formula::atom("a" + std::to_string(pick(atoms))); }

  Formula operator()(int depth) {
    if (depth == 0 || pick(4) == 0) return leaf();
    switch (pick(6)) {
      case 0: return Formula::negate((*this)(depth - 1));
      case 1: return Formula::all_of(kids(depth));
      case 2: return Formula::any_of(kids(depth));
      case 3: return Formula::exactly_one(binary_xor_only ? pair(depth) : kids(depth));
      case 4: return Formula::implies((*this)(depth - 1), (*this)(depth - 1));
      default: return Formula::iff((*this)(depth - 1), (*this)(depth - 1));
    }
  }

  std::vector<Formula> pair(int depth) { return {(*this)(depth - 1), (*this)(depth - 1)}; }
  std::vector<Formula> kids(int depth) {
    std::vector<Formula> out = pair(depth);
    if (pick(3) == 0) out.push_back((*this)(depth - 1));
    return out;
  }
};

// Classical truth with atom values indexed by the atom's numeric suffix.
inline bool classical(const Formula& f, unsigned mask) {
  using Op = Formula::Op;
  switch (f.op) {
    case Op::Atom: return (mask >> std::stoul(f.name.substr(1))) & 1U;
    case Op::Not: return !classical(f.children[0], mask);
    case Op::And:
      for (const auto& c : f.children) if (!classical(c, mask)) return false;
      return true;
    case Op::Or:
      for (const auto& c : f.children) if (classical(c, mask)) return true;
      return false;
    case Op::ExactlyOne: {
      int n = 0;
      for (const auto& c : f.children) n += classical(c, mask);
      return n == 1;
    }
    case Op::Implies: return !classical(f.children[0], mask) || classical(f.children[1], mask);
    case Op::Iff: return classical(f.children[0], mask) == classical(f.children[1], mask);
  }
  return false;
}

// Mismatches between fuzzy truth at boolean corners and the truth table.
inline std::size_t corner_mismatches(const Formula& f, const knowledge::KnowledgeBase& kb, lowering::TNorm t) {
  auto rule = lowering::compile(f, kb, t);
  const std::size_t k = kb.bindings().size() - 1;
  std::size_t bad = 0;
  std::vector<double> atoms(kb.bindings().size(), 0.0);
  for (unsigned mask = 0; mask < (1U << k); ++mask) {
    for (std::size_t i = 0; i < k; ++i) atoms[i] = (mask >> i) & 1U;
    const double fuzzy = rule.truth_from_atoms(atoms);
    if (fuzzy != (classical(f, mask) ? 1.0 : 0.0)) ++bad;
  }
  return bad;
}

}  // namespace kal::testing
