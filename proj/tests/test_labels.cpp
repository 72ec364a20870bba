#include <gtest/gtest.h>

#include "tila/labels.hpp"
#include "tila/numerics.hpp"

using namespace tila;
using L = ProgressionLabel;

namespace {

ProbTriple random_simplex(Rng& rng) {
  const double a = rng.uniform(), b = rng.uniform(), c = rng.uniform();
  const double s = a + b + c;
  return {a / s, b / s, c / s};
}

}  // namespace

TEST(InvertLabel, Mapping) {
  EXPECT_EQ(invert_label(L::improved), L::worsened);
  EXPECT_EQ(invert_label(L::stable), L::stable);
  EXPECT_EQ(invert_label(L::worsened), L::improved);
  for (auto y : kAllLabels) EXPECT_EQ(invert_label(invert_label(y)), y);
}

TEST(Labels, IndexConventionAndNames) {
  EXPECT_EQ(index_of(L::improved), 0u);
  EXPECT_EQ(index_of(L::stable), 1u);
  EXPECT_EQ(index_of(L::worsened), 2u);
  for (auto y : kAllLabels) EXPECT_EQ(parse_label(to_string(y)), y);
  EXPECT_THROW(parse_label("unchanged"), DomainError);
  EXPECT_THROW(label_from_index(3), DomainError);
}

TEST(SwapProbs, Examples) {
  EXPECT_EQ(swap_probs({1, 0, 0}), (ProbTriple{0, 0, 1}));
  const ProbTriple u{1.0 / 3, 1.0 / 3, 1.0 / 3};
  EXPECT_EQ(swap_probs(u), u);
  EXPECT_EQ(swap_probs({0.2, 0.5, 0.3}), (ProbTriple{0.3, 0.5, 0.2}));
}

TEST(SwapProbs, RejectsOffSimplex) {
  EXPECT_THROW(swap_probs({0.5, 0.5, 0.5}), DomainError);
  EXPECT_THROW(swap_probs({1.2, -0.2, 0.0}), DomainError);
}

TEST(SwapProbs, InvolutionAndStableFixed) {
  Rng rng(21);
  for (int i = 0; i < 1000; ++i) {
    const auto p = random_simplex(rng);
    const auto s = swap_probs(p);
    EXPECT_EQ(swap_probs(s), p);
    EXPECT_EQ(s[1], p[1]);
    EXPECT_TRUE(on_simplex(s));
  }
}

TEST(ArgmaxLabel, TieRule) {
  EXPECT_EQ(argmax_label({0.9, 0.1, 0.1}), L::improved);
  EXPECT_EQ(argmax_label({0.2, 0.2, 0.2}), L::stable);
  EXPECT_EQ(argmax_label({0.3, 0.3, 0.1}), L::stable);
  EXPECT_EQ(argmax_label({0.4, 0.2, 0.4}), L::improved);
  EXPECT_EQ(argmax_label({0.1, 0.2, 0.7}), L::worsened);
}

TEST(ArgmaxLabel, CommutesWithSwap) {
  Rng rng(8);
  for (int i = 0; i < 1000; ++i) {
    const auto p = random_simplex(rng);
    if (p[0] == p[2] || p[0] == p[1] || p[1] == p[2]) continue;
    EXPECT_EQ(argmax_label(swap_probs(p)), invert_label(argmax_label(p)));
  }
}
