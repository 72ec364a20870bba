#include <gtest/gtest.h>

#include "tila/inference.hpp"
#include "tila/synthdata.hpp"

using namespace tila;
using L = ProgressionLabel;

namespace {

void expect_triple_near(const ProbTriple& a, const ProbTriple& b, double tol) {
  for (int k = 0; k < 3; ++k) EXPECT_NEAR(a[k], b[k], tol) << "coordinate " << k;
}

EmbeddingVector unit(std::size_t d, std::size_t axis) {
  EmbeddingVector v(d, 0.0);
  v[axis] = 1.0;
  return v;
}

// Unit vector in the (e0, e_axis) plane with dot c against e0.
EmbeddingVector with_cosine(std::size_t d, std::size_t axis, double c) {
  EmbeddingVector v(d, 0.0);
  v[0] = c;
  v[axis] = std::sqrt(1.0 - c * c);
  return v;
}

}  // namespace

TEST(CombinedScore, Examples) {
  expect_triple_near(combined_score({0.6, 0.3, 0.1}, {0.1, 0.2, 0.7}), {0.65, 0.25, 0.10}, 1e-15);
  const ProbTriple u{1.0 / 3, 1.0 / 3, 1.0 / 3};
  expect_triple_near(combined_score(u, u), u, 1e-15);
  EXPECT_EQ(combined_score({1, 0, 0}, {0, 0, 1}), (ProbTriple{1, 0, 0}));
  EXPECT_THROW(combined_score({0.5, 0.5, 0.5}, u), DomainError);
  EXPECT_THROW(combined_score(u, {0.9, 0.9, 0.0}), DomainError);
}

TEST(CombinedScore, EquivariantUnderSwap) {
  Rng rng(12);
  for (int i = 0; i < 1000; ++i) {
    const double a = rng.uniform(), b = rng.uniform(), c = rng.uniform(), s = a + b + c;
    const double d = rng.uniform(), e = rng.uniform(), f = rng.uniform(), t = d + e + f;
    const ProbTriple pab{a / s, b / s, c / s}, pba{d / t, e / t, f / t};
    const auto fwd = combined_score(pab, pba);
    const auto rev = combined_score(pba, pab);
    EXPECT_EQ(rev, swap_coordinates(fwd));
    if (fwd[0] != fwd[1] && fwd[1] != fwd[2] && fwd[0] != fwd[2]) {
      EXPECT_EQ(argmax_label(rev), invert_label(argmax_label(fwd)));
    }
  }
}

TEST(ZeroShot, IdenticalPromptsGiveUniform) {
  const std::size_t d = 4;
  ClassPromptEmbeddings prompts;
  for (auto& cls : prompts) cls = {unit(d, 1), unit(d, 2)};
  const auto p = zero_shot_classify(unit(d, 0), prompts);
  for (double x : p) EXPECT_NEAR(x, 1.0 / 3.0, 1e-15);
}

TEST(ZeroShot, MatchingClassWins) {
  const std::size_t d = 4;
  ClassPromptEmbeddings prompts{{{unit(d, 1)}, {unit(d, 0)}, {unit(d, 2)}}};
  EXPECT_EQ(argmax_label(zero_shot_classify(unit(d, 0), prompts)), L::stable);
}

TEST(ZeroShot, PromptEnsembleMeans) {
  const std::size_t d = 8;
  ClassPromptEmbeddings prompts{{{with_cosine(d, 1, 0.9), with_cosine(d, 2, 0.7)},
                                 {with_cosine(d, 3, 0.1), with_cosine(d, 4, 0.1)},
                                 {with_cosine(d, 5, 0.0), with_cosine(d, 6, 0.2)}}};
  const auto p = zero_shot_classify(unit(d, 0), prompts);
  const std::vector<double> means{0.8, 0.1, 0.1};
  const auto expected = softmax(means);
  expect_triple_near(p, to_triple(expected), 1e-12);
  EXPECT_EQ(argmax_label(p), L::improved);
}

TEST(ZeroShot, Errors) {
  const std::size_t d = 3;
  ClassPromptEmbeddings prompts{{{unit(d, 0)}, {}, {unit(d, 1)}}};
  EXPECT_THROW(zero_shot_classify(unit(d, 0), prompts), DomainError);
  ClassPromptEmbeddings ok{{{unit(d, 0)}, {unit(d, 1)}, {unit(d, 2)}}};
  EXPECT_THROW(zero_shot_classify(std::vector<double>{2, 0, 0}, ok), DomainError);
}

TEST(RetrievalClassify, ArgmaxAndTies) {
  EXPECT_EQ(retrieval_classify_scores({0.9, 0.1, 0.1}), L::improved);
  EXPECT_EQ(retrieval_classify_scores({0.4, 0.4, 0.4}), L::stable);
  EXPECT_EQ(retrieval_classify_scores({0.3, 0.3, 0.1}), L::stable);
  const std::size_t d = 3;
  const std::vector<EmbeddingVector> variants{unit(d, 0), unit(d, 1), unit(d, 2)};
  EXPECT_EQ(retrieval_classify(unit(d, 2), variants), L::worsened);
  EXPECT_THROW(retrieval_classify(unit(d, 2), std::span(variants).first(2)), DomainError);
}

TEST(PromptBank, ValidatesAndRoundTrips) {
  const auto bank = default_prompt_bank(default_specs());
  bank.validate();
  for (const auto& [finding, classes] : bank.prompts)
    for (const auto& list : classes) EXPECT_GE(list.size(), 3u);
  const auto back = PromptBank::from_json(bank.to_json());
  EXPECT_EQ(back.prompts, bank.prompts);

  PromptBank dup = bank;
  dup.prompts["effusion"][0] = {"effusion is improved .", "effusion is improved ."};
  EXPECT_THROW(dup.validate(), DomainError);
  PromptBank empty = bank;
  empty.prompts["edema"][2].clear();
  EXPECT_THROW(empty.validate(), DomainError);
}

TEST(PromptBank, EncodesThroughTokenizer) {
  EncoderConfig cfg;
  cfg.vocab_size = Vocabulary::standard().size();
  const auto params = init_params(cfg);
  const auto bank = default_prompt_bank(default_specs());
  const Tokenizer tok = [](const std::string& s) { return Vocabulary::standard().tokenize(s); };
  const auto enc = encode_prompts(bank, "edema", tok, params, cfg);
  for (const auto& cls : enc) {
    ASSERT_EQ(cls.size(), 3u);
    for (const auto& e : cls) EXPECT_NEAR(l2_norm(e), 1.0, 1e-9);
  }
  EXPECT_THROW(encode_prompts(bank, "fracture", tok, params, cfg), DomainError);
}
