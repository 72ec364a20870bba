#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <string_view>

#include "tila/numerics.hpp"

namespace tila {

// Index convention is fixed: improved=0, stable=1, worsened=2.
enum class ProgressionLabel : int { improved = 0, stable = 1, worsened = 2 };

inline constexpr std::array<ProgressionLabel, 3> kAllLabels = {
    ProgressionLabel::improved, ProgressionLabel::stable, ProgressionLabel::worsened};

inline constexpr std::size_t index_of(ProgressionLabel y) { return static_cast<std::size_t>(y); }

inline ProgressionLabel label_from_index(std::size_t i) {
  if (i > 2) fail_domain("progression label index ", i, " out of range");
  return static_cast<ProgressionLabel>(i);
}

inline std::string_view to_string(ProgressionLabel y) {
  switch (y) {
    case ProgressionLabel::improved: return "improved";
    case ProgressionLabel::stable: return "stable";
    case ProgressionLabel::worsened: return "worsened";
  }
  return "?";
}

inline ProgressionLabel parse_label(std::string_view s) {
  for (auto y : kAllLabels)
    if (to_string(y) == s) return y;
  fail_domain("unknown progression label '", s, "'");
}

// Label under temporal inversion: improved <-> worsened, stable fixed.
inline constexpr ProgressionLabel invert_label(ProgressionLabel y) {
  switch (y) {
    case ProgressionLabel::improved: return ProgressionLabel::worsened;
    case ProgressionLabel::worsened: return ProgressionLabel::improved;
    case ProgressionLabel::stable: return ProgressionLabel::stable;
  }
  return y;
}

using ProbTriple = std::array<double, 3>;

inline constexpr double kSimplexTolerance = 1e-9;

inline bool on_simplex(const ProbTriple& p, double tol = kSimplexTolerance) {
  for (double v : p)
    if (!(v >= 0.0) || !std::isfinite(v)) return false;
  return std::abs(p[0] + p[1] + p[2] - 1.0) <= tol;
}

inline void require_simplex(const ProbTriple& p, std::string_view what) {
  if (!on_simplex(p))
    fail_domain(what, ": probabilities (", p[0], ", ", p[1], ", ", p[2], ") are not on the simplex");
}

// Swaps the improved and worsened coordinates; stable is fixed.
inline ProbTriple swap_probs(const ProbTriple& p) {
  require_simplex(p, "swap_probs");
  return {p[2], p[1], p[0]};
}

// Unchecked permutation, used inside losses where the input is a gradient or
// a logit vector rather than a distribution.
inline constexpr ProbTriple swap_coordinates(const ProbTriple& p) { return {p[2], p[1], p[0]}; }

inline ProbTriple to_triple(std::span<const double> v) {
  if (v.size() != 3) fail_domain("expected 3 class scores, got ", v.size());
  return {v[0], v[1], v[2]};
}

// Argmax with the tie rule shared by every classifier in the project:
// ties prefer stable, then improved.
inline ProgressionLabel argmax_label(const ProbTriple& s) {
  const double best = std::max({s[0], s[1], s[2]});
  if (s[1] == best) return ProgressionLabel::stable;
  if (s[0] == best) return ProgressionLabel::improved;
  return ProgressionLabel::worsened;
}

}  // namespace tila
