#include <gtest/gtest.h>

#include <map>

#include "tila/gradcheck.hpp"

using namespace tila;

TEST(GradcheckSuite, EveryObjectivePassesOnFiveSettings) {
  const auto cases = run_gradcheck_suite(2024);
  ASSERT_EQ(cases.size(), 35u);
  std::map<std::string, int> per_check;
  for (const auto& c : cases) {
    ++per_check[c.name];
    EXPECT_TRUE(c.report.passed()) << c.name << " seed " << c.seed << " max rel " << c.report.max_rel_error;
    EXPECT_LE(c.report.max_rel_error, kFdTolerance) << c.name;
    EXPECT_EQ(c.report.step, kFdStep);
    EXPECT_GT(c.report.entries.size(), 0u);
    const auto j = to_json(c);
    EXPECT_EQ(j["passed"].get<bool>(), true);
  }
  EXPECT_EQ(per_check.size(), 7u);
  for (const auto& [name, n] : per_check) EXPECT_EQ(n, 5) << name;
}

TEST(GradcheckSuite, PerturbedGradientIsFlagged) {
  // Same setting as the encoder check but with one analytic entry nudged.
  const auto cfg = gradcheck_encoder_config(5);
  ParamStore p = init_params(cfg);
  Rng rng(6);
  Image prev{cfg.image_side, std::vector<double>(cfg.image_side * cfg.image_side)}, cur = prev;
  for (double& x : prev.pixels) x = rng.uniform();
  for (double& x : cur.pixels) x = rng.uniform();
  const TokenSequence tokens{{1, 2, 0, 3, 4}};
  const auto pp = patch_means(prev, cfg.patch), pc = patch_means(cur, cfg.patch);
  auto loss = [&](const ParamStore& q) {
    return dot(encode_pair_features(pp, pc, q, cfg).embedding, encode_text(tokens, q, cfg));
  };
  const auto a = encode_pair_features(pp, pc, p, cfg);
  const auto t = encode_text_activation(tokens, p, cfg);
  p.zero_grad();
  backprop_pair(a, t.embedding, p, cfg);
  backprop_text(t, a.embedding, p, cfg);
  EXPECT_TRUE(fd_check(loss, p, kFdStep, kFdTolerance).passed());
  p.grads(seg::kImageProj)[0] *= 1.01;
  p.grads(seg::kImageProj)[0] += 1e-3;
  const auto r = fd_check(loss, p, kFdStep, kFdTolerance);
  EXPECT_FALSE(r.passed());
  EXPECT_GE(r.flagged, 1u);
}

TEST(GradcheckSuite, SeedsAreReproducible) {
  const auto a = gradcheck_tcl(77), b = gradcheck_tcl(77);
  EXPECT_EQ(a.report.max_rel_error, b.report.max_rel_error);
  EXPECT_EQ(to_json(a), to_json(b));
}
