#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "tila/evaluation.hpp"

using namespace tila;
using L = ProgressionLabel;

namespace {

ProbTriple one_hot(L y) {
  ProbTriple p{0, 0, 0};
  p[index_of(y)] = 1.0;
  return p;
}

// Cases keyed by integer image ids: case i has prev 2i, cur 2i+1.
std::vector<ProtocolCase<int>> fixture(const std::vector<L>& labels) {
  std::vector<ProtocolCase<int>> out;
  for (std::size_t i = 0; i < labels.size(); ++i)
    out.push_back({"c" + std::to_string(i), static_cast<int>(2 * i), static_cast<int>(2 * i + 1), labels[i]});
  return out;
}

// Deterministic pseudo-random classifier over ordered id pairs.
struct HashClassifier {
  std::uint64_t salt;
  ProbTriple operator()(int a, int b) const {
    Rng rng(mix_seed(salt, static_cast<std::uint64_t>(a) * 1000003u + static_cast<std::uint64_t>(b)));
    const double x = rng.uniform(), y = rng.uniform(), z = rng.uniform(), s = x + y + z;
    return {x / s, y / s, z / s};
  }
};

SimilarityGrid grid_from_ranks(const std::vector<std::size_t>& ranks, std::size_t candidates) {
  SimilarityGrid g{Matrix(ranks.size(), candidates), {}};
  for (std::size_t q = 0; q < ranks.size(); ++q) {
    // Candidate j gets similarity 1 - j/candidates; the true match sits at rank r.
    for (std::size_t j = 0; j < candidates; ++j) g.similarity(q, j) = 1.0 - static_cast<double>(j) / candidates;
    g.truth.push_back(ranks[q] - 1);
  }
  return g;
}

std::vector<std::string> words(std::initializer_list<const char*> w) { return {w.begin(), w.end()}; }

}  // namespace

TEST(MacroAccuracy, Examples) {
  const std::vector<L> t{L::improved, L::improved, L::stable, L::worsened};
  EXPECT_EQ(macro_accuracy(t, t), 100.0);
  const std::vector<L> p{L::improved, L::stable, L::stable, L::improved};
  EXPECT_NEAR(macro_accuracy(p, t), 50.0, 1e-12);
  const std::vector<L> single{L::worsened, L::worsened};
  EXPECT_EQ(macro_accuracy(single, single), 100.0);
  EXPECT_THROW(macro_accuracy(std::vector<L>{}, std::vector<L>{}), DomainError);
  EXPECT_THROW(macro_accuracy(p, single), DomainError);
}

TEST(Protocols, OracleClassifierScoresPerfect) {
  const auto cases = fixture({L::improved, L::stable, L::worsened, L::worsened, L::stable});
  std::map<int, L> truth;
  for (const auto& c : cases) truth[c.prev] = c.label;
  auto oracle = [&](int a, int b) { return a < b ? one_hot(truth.at(a)) : one_hot(invert_label(truth.at(b))); };
  const auto s = evaluate_protocols<int>(oracle, std::span(cases));
  EXPECT_EQ(s.standard, 100.0);
  EXPECT_EQ(s.reversed, 100.0);
  EXPECT_EQ(s.combined, 100.0);
  EXPECT_EQ(s.consistency, 100.0);
  EXPECT_EQ(s.counts, (std::array<std::size_t, 3>{1, 2, 2}));
}

TEST(Protocols, WrongBackwardKillsConsistency) {
  const auto cases = fixture({L::improved, L::stable, L::worsened, L::improved, L::stable, L::worsened});
  std::map<int, L> truth;
  for (const auto& c : cases) truth[c.prev] = c.label;
  auto clf = [&](int a, int b) {
    if (a < b) return one_hot(truth.at(a));
    // Any label except the inverted truth, fixed per case.
    const L wrong = label_from_index((index_of(invert_label(truth.at(b))) + 1 + static_cast<std::size_t>(b) % 2) % 3);
    return one_hot(wrong);
  };
  const auto s = evaluate_protocols<int>(clf, std::span(cases));
  EXPECT_EQ(s.standard, 100.0);
  EXPECT_EQ(s.consistency, 0.0);
  EXPECT_EQ(s.reversed, 0.0);
}

TEST(Protocols, ConstantStableOnBalancedSet) {
  const auto cases = fixture({L::improved, L::improved, L::stable, L::stable, L::worsened, L::worsened});
  auto clf = [](int, int) { return one_hot(L::stable); };
  const auto s = evaluate_protocols<int>(clf, std::span(cases));
  EXPECT_NEAR(s.standard, 100.0 / 3.0, 1e-12);
  EXPECT_NEAR(s.reversed, 100.0 / 3.0, 1e-12);
  EXPECT_NEAR(s.combined, 100.0 / 3.0, 1e-12);
  EXPECT_NEAR(s.consistency, 100.0 / 3.0, 1e-12);
}

TEST(Protocols, ClassifierFailureNamesCase) {
  const auto cases = fixture({L::improved, L::stable});
  auto clf = [](int a, int) -> ProbTriple {
    if (a == 2) throw std::runtime_error("boom");
    return {1.0 / 3, 1.0 / 3, 1.0 / 3};
  };
  try {
    evaluate_protocols<int>(clf, std::span(cases));
    FAIL();
  } catch (const DomainError& e) {
    EXPECT_NE(std::string(e.what()).find("'c1'"), std::string::npos);
  }
  EXPECT_THROW(evaluate_protocols<int>(clf, std::span<const ProtocolCase<int>>{}), DomainError);
}

TEST(Protocols, DualityAndCombinedInvariance) {
  Rng rng(55);
  for (std::uint64_t trial = 0; trial < 50; ++trial) {
    std::vector<L> labels(5 + rng.below(40));
    for (auto& y : labels) y = label_from_index(rng.below(3));
    const auto cases = fixture(labels);
    const auto swapped = swap_cases<int>(std::span(cases));
    const HashClassifier clf{trial};
    const auto fwd = evaluate_protocols<int>(clf, std::span(cases));
    const auto rev = evaluate_protocols<int>(clf, std::span(swapped));
    EXPECT_EQ(fwd.reversed, rev.standard);
    EXPECT_EQ(fwd.standard, rev.reversed);
    EXPECT_EQ(fwd.combined, rev.combined);
    EXPECT_EQ(fwd.consistency, rev.consistency);
    EXPECT_LE(fwd.consistency, std::min(fwd.standard, fwd.reversed) + 1e-9);
  }
}

TEST(Protocols, ReportAverageAndSerialisation) {
  ProtocolReport r;
  r.findings["a"] = {80, 60, 70, 50, {1, 2, 3}};
  r.findings["b"] = {60, 40, 50, 30, {3, 2, 1}};
  const auto avg = r.average();
  EXPECT_EQ(avg.standard, 70);
  EXPECT_EQ(avg.consistency, 40);
  EXPECT_EQ(avg.counts, (std::array<std::size_t, 3>{4, 4, 4}));
  const auto j = to_json(r);
  EXPECT_EQ(j["findings"]["a"]["reversed"], 60.0);
  EXPECT_EQ(j["average"]["combined"], 60.0);
  const auto table = to_table(r, "x");
  EXPECT_NE(table.find("x\taverage\t70.000000"), std::string::npos);
}

TEST(RecallAtK, Examples) {
  SimilarityGrid id{Matrix(4, 4), {0, 1, 2, 3}};
  for (std::size_t i = 0; i < 4; ++i) id.similarity(i, i) = 1.0;
  EXPECT_EQ(recall_at_k(id, 1), 100.0);

  const auto second = grid_from_ranks(std::vector<std::size_t>(5, 2), 10);
  EXPECT_EQ(recall_at_k(second, 1), 0.0);
  EXPECT_EQ(recall_at_k(second, 5), 100.0);

  const auto mixed = grid_from_ranks({1, 3, 7}, 10);
  EXPECT_NEAR(recall_at_k(mixed, 5), 200.0 / 3.0, 1e-12);
  EXPECT_THROW(recall_at_k(mixed, 0), DomainError);
  EXPECT_THROW(recall_at_k(mixed, 11), DomainError);
}

TEST(RecallAtK, TiesFavourLowerIndex) {
  SimilarityGrid g{Matrix(2, 3, 0.5), {0, 2}};
  EXPECT_EQ(rank_of_truth(g, 0), 1u);
  EXPECT_EQ(rank_of_truth(g, 1), 3u);
  EXPECT_EQ(recall_at_k(g, 1), 50.0);
}

TEST(RecallAtK, MonotoneInK) {
  Rng rng(8);
  SimilarityGrid g{Matrix(30, 12), {}};
  for (std::size_t q = 0; q < 30; ++q) {
    for (std::size_t j = 0; j < 12; ++j) g.similarity(q, j) = std::round(rng.uniform(-1, 1) * 4) / 4;
    g.truth.push_back(rng.below(12));
  }
  double last = 0.0;
  for (std::size_t k = 1; k <= 12; ++k) {
    const double r = recall_at_k(g, k);
    EXPECT_GE(r, last);
    last = r;
  }
  EXPECT_EQ(last, 100.0);
}

TEST(Tem, Examples) {
  const auto lex = TemporalLexicon::defaults();
  EXPECT_NEAR(tem_score(words({"effusion", "improved"}), words({"improving", "stable", "edema"}), lex), 200.0 / 3.0,
              1e-12);
  const auto r = words({"new", "effusion", ".", "edema", "is", "worsened", "."});
  EXPECT_EQ(tem_score(r, r, lex), 100.0);
  EXPECT_EQ(tem_score(words({"no", "effusion"}), words({"edema", "present"}), lex), 100.0);
  EXPECT_EQ(tem_score(words({"no", "effusion"}), words({"edema", "stable"}), lex), 0.0);
  EXPECT_EQ(tem_score(words({"Worsening"}), words({"worse"}), lex), 100.0);
  EXPECT_THROW(tem_score(r, r, TemporalLexicon{}), DomainError);
}

TEST(Tem, CorpusUsesTopOne) {
  SimilarityGrid g{Matrix::from_rows({{0.1, 0.9}, {0.8, 0.2}}), {0, 1}};
  const std::vector<std::vector<std::string>> q{words({"stable"}), words({"new"})};
  const std::vector<std::vector<std::string>> c{words({"new"}), words({"stable"})};
  EXPECT_EQ(corpus_tem(g, q, c, TemporalLexicon::defaults()), 100.0);
}

TEST(Auc, Examples) {
  const std::vector<double> sep{0.1, 0.2, 0.8, 0.9};
  EXPECT_EQ(auc(sep, std::vector<int>{0, 0, 1, 1}), 1.0);
  const std::vector<double> flat{0.5, 0.5, 0.5, 0.5};
  EXPECT_EQ(auc(flat, std::vector<int>{0, 1, 0, 1}), 0.5);
  const std::vector<double> s{0.9, 0.8, 0.3, 0.2};
  EXPECT_NEAR(auc(s, std::vector<int>{1, 0, 1, 0}), 0.75, 1e-12);
  EXPECT_THROW(auc(s, std::vector<int>{1, 1, 1, 1}), DomainError);
  EXPECT_THROW(auc(s, std::vector<int>{1, 0, 2, 0}), DomainError);
}

TEST(Auc, MatchesPairCountAndIsRankInvariant) {
  Rng rng(71);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 4 + rng.below(30);
    std::vector<double> sc(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      sc[i] = std::round(rng.uniform(-2, 2) * 3) / 3;  // coarse grid forces ties
      y[i] = static_cast<int>(rng.below(2));
    }
    y[0] = 0;
    y[1] = 1;
    double wins = 0, pairs = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (y[i] == 1 && y[j] == 0) {
          pairs += 1;
          wins += sc[i] > sc[j] ? 1.0 : (sc[i] == sc[j] ? 0.5 : 0.0);
        }
    const double a = auc(sc, y);
    EXPECT_NEAR(a, wins / pairs, 1e-12);
    std::vector<double> t(n);
    for (std::size_t i = 0; i < n; ++i) t[i] = std::exp(3.0 * sc[i]) + 7.0;
    EXPECT_EQ(auc(t, y), a);
  }
}
