#include <gtest/gtest.h>

#include <filesystem>

#include "tila/synthdata.hpp"

using namespace tila;
using L = ProgressionLabel;

namespace {

std::vector<std::string> w(const std::string& s) { return Vocabulary::split_words(s); }

double region_mean(const Image& img, const std::vector<std::size_t>& support) {
  double s = 0.0;
  for (auto i : support) s += img.pixels[i];
  return s / static_cast<double>(support.size());
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("tila_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace

TEST(FindingSpec, Validation) {
  validate_specs(default_specs());
  EXPECT_THROW(validate_specs({}), DomainError);
  auto specs = default_specs();
  specs[1].archetype = specs[0].archetype;
  EXPECT_THROW(validate_specs(specs), DomainError);
  EXPECT_THROW(validate_specs(default_specs(0.1, 0.2)), DomainError);
}

TEST(GenerateStudy, Deterministic) {
  const auto specs = default_specs();
  EXPECT_EQ(generate_study(42, specs), generate_study(42, specs));
  EXPECT_FALSE(generate_study(42, specs) == generate_study(43, specs));
  EXPECT_THROW(generate_study(1, specs, 0.3), DomainError);
}

TEST(GenerateStudy, HugeBandMakesEverythingStable) {
  const auto specs = default_specs(0.95, 0.9);
  for (std::uint64_t i = 0; i < 300; ++i) {
    const auto s = generate_study(mix_seed(8, i), specs);
    bool crossing = false;
    for (std::size_t f = 0; f < specs.size(); ++f) {
      EXPECT_EQ(s.findings[f].label, L::stable);
      crossing |= (s.findings[f].prev > 0.95) != (s.findings[f].cur > 0.95);
    }
    EXPECT_EQ(s.change, crossing ? 1 : 0);
  }
}

TEST(GenerateStudy, TenThousandStudies) {
  const auto specs = default_specs();
  std::vector<std::array<int, 3>> counts(specs.size(), {0, 0, 0});
  const int n = 10000;
  int abstain = 0, unchanged = 0;
  for (int i = 0; i < n; ++i) {
    const auto s = generate_study(mix_seed(2024, static_cast<std::uint64_t>(i)), specs);
    ASSERT_EQ(check_study_invariants(s, specs), "") << s.id;
    for (std::size_t f = 0; f < specs.size(); ++f) ++counts[f][index_of(s.findings[f].label)];
    unchanged += s.change == 0;

    // Swap closure: inverted labels and the same change flag.
    const auto r = swap_study(s, specs);
    ASSERT_EQ(check_study_invariants(r, specs), "");
    for (std::size_t f = 0; f < specs.size(); ++f) EXPECT_EQ(r.findings[f].label, invert_label(s.findings[f].label));
    EXPECT_EQ(r.change, s.change);

    // The rule labeller agrees with the ground truth whenever it commits.
    const auto c = assign_change_flag(s.prior_report_words, s.report_words);
    if (c == ChangeLabel::abstain) {
      ++abstain;
      continue;
    }
    ASSERT_EQ(static_cast<int>(c), s.change) << join_words(s.report_words);
  }
  for (std::size_t f = 0; f < specs.size(); ++f)
    for (int k = 0; k < 3; ++k) {
      const double frac = static_cast<double>(counts[f][k]) / n;
      EXPECT_GE(frac, 0.25) << specs[f].name << " class " << k;
      EXPECT_LE(frac, 0.42) << specs[f].name << " class " << k;
    }
  EXPECT_GT(unchanged, n / 10);
  EXPECT_LT(abstain, n / 10);
}

TEST(RenderImage, NoiseFreeHealthyIsBaseField) {
  const auto specs = default_specs();
  const auto img = render_image({0, 0, 0, 0}, specs, 1, 0.0);
  for (std::size_t r = 0; r < img.side; ++r)
    for (std::size_t c = 0; c < img.side; ++c) EXPECT_EQ(img.at(r, c), base_anatomy(r, img.side));
}

TEST(RenderImage, MonotoneInSeverity) {
  const auto specs = default_specs();
  for (std::size_t f = 0; f < specs.size(); ++f) {
    const auto support = archetype_support(specs[f].archetype, kDefaultImageSide);
    ASSERT_FALSE(support.empty());
    for (const Acquisition& acq : {Acquisition{}, Acquisition{0.8, 0.15, 0.15}}) {
      double last = -1.0;
      for (int k = 0; k <= 20; ++k) {
        std::vector<double> sev(specs.size(), 0.3);
        sev[f] = k / 20.0;
        const double m = region_mean(render_image(sev, specs, 99, kDefaultNoise, kDefaultImageSide, acq), support);
        EXPECT_GT(m, last) << specs[f].name << " severity " << sev[f];
        last = m;
      }
    }
  }
  std::vector<double> hi{1, 0, 0, 0}, mid{0.5, 0, 0, 0};
  const auto basal = archetype_support(Archetype::basal_gradient, kDefaultImageSide);
  EXPECT_GT(region_mean(render_image(hi, specs, 5, kDefaultNoise), basal),
            region_mean(render_image(mid, specs, 5, kDefaultNoise), basal));
}

TEST(RenderImage, ArchetypesAreDisjoint) {
  const auto specs = default_specs();
  std::vector<int> owner(kDefaultImageSide * kDefaultImageSide, -1);
  for (std::size_t f = 0; f < specs.size(); ++f)
    for (auto i : archetype_support(specs[f].archetype, kDefaultImageSide)) {
      EXPECT_EQ(owner[i], -1);
      owner[i] = static_cast<int>(f);
    }
}

TEST(RenderImage, ClampedRange) {
  const auto specs = default_specs();
  Rng rng(3);
  double lo = 1.0, hi = 0.0;
  for (int i = 0; i < 1000; ++i) {
    std::vector<double> sev(4);
    for (double& s : sev) s = rng.uniform();
    const auto img = render_image(sev, specs, static_cast<std::uint64_t>(i), 0.2, 16, {0.8, 0.15, 0.15});
    for (double p : img.pixels) {
      lo = std::min(lo, p);
      hi = std::max(hi, p);
    }
  }
  EXPECT_GE(lo, 0.0);
  EXPECT_LE(hi, 1.0);
  EXPECT_THROW(render_image({1.5, 0, 0, 0}, specs, 0, 0.0), DomainError);
  EXPECT_THROW(render_image({0, 0, 0}, specs, 0, 0.0), DomainError);
}

TEST(ComposeReport, Templates) {
  const auto specs = default_specs();
  auto states = label_states({{0.3, 0.6}, {0, 0}, {0, 0}, {0, 0}}, specs);
  EXPECT_EQ(compose_report_words(states, specs),
            w("effusion is worsened . no pneumothorax . no consolidation . no edema ."));
  EXPECT_EQ(change_flag_from_states(states, specs), 1);

  states = label_states({{0.5, 0.5}, {0.3, 0.32}, {0.7, 0.65}, {0.2, 0.25}}, specs);
  for (const auto& s : states) EXPECT_EQ(s.label, L::stable);
  const auto words = compose_report_words(states, specs);
  for (const auto& x : words)
    for (const char* stem : {"improved", "worsened", "new", "resolved"}) EXPECT_NE(x, stem);
  EXPECT_EQ(change_flag_from_states(states, specs), 0);

  states = label_states({{0.5, 0.05}, {0, 0}, {0, 0}, {0, 0}}, specs);
  EXPECT_EQ(compose_report_words(states, specs),
            w("effusion has resolved . no pneumothorax . no consolidation . no edema ."));
  EXPECT_EQ(change_flag_from_states(states, specs), 1);

  states = label_states({{0.05, 0.5}, {0, 0}, {0, 0}, {0, 0}}, specs);
  EXPECT_EQ(compose_report_words(states, specs)[0], "new");
}

TEST(ComposeReport, DirectionalSentencesCarryOneStem) {
  const auto specs = default_specs();
  for (std::uint64_t i = 0; i < 500; ++i) {
    const auto s = generate_study(mix_seed(91, i), specs);
    for (const auto& p : parse_report(s.report_words, specs)) {
      int stems = 0;
      for (const auto& x : p.words)
        if (has_stem({x}, change_stems()) || has_stem({x}, no_change_stems())) ++stems;
      if (p.kind == SentenceKind::negation || p.kind == SentenceKind::neutral)
        EXPECT_EQ(stems, 0) << join_words(p.words);
      else
        EXPECT_EQ(stems, 1) << join_words(p.words);
    }
  }
}

TEST(AssignChangeFlag, Examples) {
  EXPECT_EQ(assign_change_flag({}, w("effusion is worsened .")), ChangeLabel::change);
  EXPECT_EQ(assign_change_flag({}, w("new consolidation .")), ChangeLabel::change);
  EXPECT_EQ(assign_change_flag({}, w("effusion is stable . edema unchanged .")), ChangeLabel::no_change);
  EXPECT_EQ(assign_change_flag({}, w("no interval change .")), ChangeLabel::no_change);
  EXPECT_EQ(assign_change_flag({}, w("no effusion . no edema .")), ChangeLabel::abstain);
}

TEST(RetrievalVariants, WorkedExample) {
  const auto specs = default_specs();
  const auto v = build_retrieval_variants(w("pneumothorax is stable . consolidation is worsened ."), "pneumothorax", specs);
  EXPECT_EQ(v[0], w("pneumothorax is improved . consolidation is present ."));
  EXPECT_EQ(v[1], w("pneumothorax is stable . consolidation is present ."));
  EXPECT_EQ(v[2], w("pneumothorax is worsened . consolidation is present ."));
}

TEST(RetrievalVariants, AbsentTargetIsAppended) {
  const auto specs = default_specs();
  const auto v = build_retrieval_variants(w("no pneumothorax . edema has resolved . new effusion ."), "pneumothorax", specs);
  EXPECT_EQ(v[0], w("no edema . effusion is present . pneumothorax is improved ."));
  EXPECT_EQ(v[1], w("no edema . effusion is present . pneumothorax is stable ."));
  EXPECT_EQ(v[2], w("no edema . effusion is present . pneumothorax is worsened ."));
  const auto u = build_retrieval_variants(w("edema is stable ."), "effusion", specs);
  EXPECT_EQ(u[2], w("edema is present . effusion is worsened ."));
}

TEST(RetrievalVariants, Errors) {
  const auto specs = default_specs();
  EXPECT_THROW(build_retrieval_variants(w("effusion looks odd ."), "effusion", specs), DomainError);
  EXPECT_THROW(build_retrieval_variants(w("effusion is stable"), "effusion", specs), DomainError);
  EXPECT_THROW(build_retrieval_variants(w("effusion is stable ."), "fracture", specs), DomainError);
}

TEST(RetrievalVariants, ConstructionInvariants) {
  const auto specs = default_specs();
  for (std::uint64_t i = 0; i < 500; ++i) {
    const auto s = generate_study(mix_seed(5, i), specs);
    for (std::size_t f = 0; f < specs.size(); ++f) {
      const auto v = build_retrieval_variants(s.report_words, specs[f].name, specs);
      ASSERT_EQ(v[0].size(), v[1].size());
      ASSERT_EQ(v[1].size(), v[2].size());
      for (int a = 0; a < 3; ++a)
        for (int b = a + 1; b < 3; ++b) {
          int diff = 0;
          for (std::size_t k = 0; k < v[a].size(); ++k) {
            if (v[a][k] == v[b][k]) continue;
            ++diff;
            EXPECT_EQ(v[a][k], std::string(to_string(label_from_index(a))));
          }
          EXPECT_EQ(diff, 1);
        }
      // Non-target sentences carry no direction.
      for (const auto& p : parse_report(v[1], specs))
        if (p.finding != specs[f].name) {
          EXPECT_TRUE(p.kind == SentenceKind::negation || p.kind == SentenceKind::neutral);
        }
      const auto& st = s.findings[f];
      const bool present_both = st.prev > specs[f].presence_threshold && st.cur > specs[f].presence_threshold;
      if (st.label == L::stable && present_both) {
        EXPECT_EQ(v[1], neutralize_report(s.report_words, specs[f].name, specs));
      }
    }
  }
}

TEST(Vocabulary, EncodeDecode) {
  const auto& v = Vocabulary::standard();
  EXPECT_EQ(v.delimiter(), 0u);
  const auto t = v.tokenize("New Effusion .");
  EXPECT_EQ(v.decode(t), w("new effusion ."));
  EXPECT_THROW(v.tokenize("effusion unchanged"), DomainError);
  EXPECT_THROW(v.word(99), DomainError);
}

TEST(DatasetIo, ImageRoundTrip) {
  const auto dir = temp_dir("img");
  const auto s = generate_study(3, default_specs());
  write_image(dir / "a.f32", s.cur);
  EXPECT_EQ(read_image(dir / "a.f32").pixels, s.cur.pixels);
  std::ofstream(dir / "bad.f32") << "NOPE 2 2\n";
  EXPECT_THROW(read_image(dir / "bad.f32"), DomainError);
  std::ofstream(dir / "short.f32") << "TILAIMG 4 4\nxx";
  EXPECT_THROW(read_image(dir / "short.f32"), DomainError);
}

TEST(DatasetIo, ManifestRoundTrip) {
  const auto dir = temp_dir("ds");
  DataConfig cfg;
  cfg.n_train = 12;
  cfg.n_test = 5;
  cfg.followup = {0.8, 0.15, 0.15};
  const auto d = generate_dataset(7, cfg);
  EXPECT_EQ(d.split(Split::train).size(), 12u);
  EXPECT_EQ(d.split(Split::test).size(), 5u);
  write_dataset(dir, d, cfg);
  EXPECT_EQ(read_data_config(dir), cfg);
  const auto back = read_dataset(dir);
  ASSERT_EQ(back.studies.size(), d.studies.size());
  for (std::size_t i = 0; i < d.studies.size(); ++i) EXPECT_EQ(back.studies[i], d.studies[i]) << d.studies[i].id;
  std::string line;
  std::ifstream is(dir / "manifest.jsonl");
  std::getline(is, line);
  const auto rec = nlohmann::json::parse(line);
  for (const char* key : {"id", "seed", "split", "labels", "c", "prev", "cur"}) EXPECT_TRUE(rec.contains(key)) << key;
}

TEST(DatasetIo, GenerationOrderIndependent) {
  DataConfig cfg;
  cfg.n_train = 6;
  cfg.n_test = 2;
  const auto d = generate_dataset(11, cfg);
  for (std::size_t i = d.studies.size(); i-- > 0;) {
    auto s = generate_study(mix_seed(11, i), d.specs, cfg.noise, cfg.image_side, cfg.followup);
    EXPECT_EQ(s.prev, d.studies[i].prev);
    EXPECT_EQ(s.findings, d.studies[i].findings);
  }
}
