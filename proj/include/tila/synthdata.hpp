#pragma once

// Deterministic synthetic longitudinal benchmark: paired 2-D "studies" with
// four findings rendered as disjoint spatial archetypes, templated reports,
// a rule-based change labeller and the directional retrieval-variant builder.

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tila/encoders.hpp"
#include "tila/evaluation.hpp"
#include "tila/inference.hpp"
#include "tila/labels.hpp"
#include "tila/numerics.hpp"

namespace tila {

enum class Archetype { basal_gradient, apical_band, focal_patch, diffuse_texture };

struct FindingSpec {
  std::string name;
  Archetype archetype = Archetype::basal_gradient;
  double presence_threshold = 0.15;  // theta_p
  double stability_band = 0.1;       // delta

  void validate() const {
    if (!(stability_band > 0.0 && stability_band < presence_threshold && presence_threshold < 1.0))
      fail_domain("FindingSpec '", name, "': need 0 < delta < theta_p < 1");
  }
};

inline std::vector<FindingSpec> default_specs(double presence_threshold = 0.15, double stability_band = 0.1) {
  return {{"effusion", Archetype::basal_gradient, presence_threshold, stability_band},
          {"pneumothorax", Archetype::apical_band, presence_threshold, stability_band},
          {"consolidation", Archetype::focal_patch, presence_threshold, stability_band},
          {"edema", Archetype::diffuse_texture, presence_threshold, stability_band}};
}

inline void validate_specs(const std::vector<FindingSpec>& specs) {
  if (specs.empty()) fail_domain("finding specs must be non-empty");
  for (std::size_t a = 0; a < specs.size(); ++a) {
    specs[a].validate();
    for (std::size_t b = a + 1; b < specs.size(); ++b) {
      if (specs[a].archetype == specs[b].archetype) fail_domain("findings must use distinct archetypes");
      if (specs[a].name == specs[b].name) fail_domain("duplicate finding '", specs[a].name, "'");
    }
  }
}

// ---------------------------------------------------------------------------
// Vocabulary

class Vocabulary {
 public:
  static const Vocabulary& standard() {
    static const Vocabulary v({".", "no", "is", "has", "present", "new", "improved", "stable", "worsened",
                               "resolved", "effusion", "pneumothorax", "consolidation", "edema"});
    return v;
  }

  explicit Vocabulary(std::vector<std::string> words) : words_(std::move(words)) {
    for (std::size_t i = 0; i < words_.size(); ++i) {
      if (!index_.emplace(words_[i], static_cast<std::uint32_t>(i)).second)
        fail_domain("Vocabulary: duplicate word '", words_[i], "'");
    }
  }

  std::size_t size() const { return words_.size(); }
  std::uint32_t delimiter() const { return id("."); }

  std::uint32_t id(const std::string& word) const {
    auto it = index_.find(word);
    if (it == index_.end()) fail_domain("Vocabulary: unknown word '", word, "'");
    return it->second;
  }
  const std::string& word(std::uint32_t id) const {
    if (id >= words_.size()) fail_domain("Vocabulary: token ", id, " out of range");
    return words_[id];
  }

  TokenSequence encode(const std::vector<std::string>& words) const {
    TokenSequence t;
    for (const auto& w : words) t.ids.push_back(id(w));
    return t;
  }
  std::vector<std::string> decode(const TokenSequence& t) const {
    std::vector<std::string> out;
    for (auto id : t.ids) out.push_back(word(id));
    return out;
  }
  TokenSequence tokenize(const std::string& text) const { return encode(split_words(text)); }

  static std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream is(text);
    std::string w;
    while (is >> w) {
      std::transform(w.begin(), w.end(), w.begin(), [](unsigned char ch) { return std::tolower(ch); });
      out.push_back(w);
    }
    return out;
  }

 private:
  std::vector<std::string> words_;
  std::map<std::string, std::uint32_t> index_;
};

inline std::string join_words(const std::vector<std::string>& words) {
  std::string s;
  for (const auto& w : words) {
    if (!s.empty()) s += ' ';
    s += w;
  }
  return s;
}

// ---------------------------------------------------------------------------
// Rendering

inline constexpr std::size_t kDefaultImageSide = 64;
inline constexpr double kDefaultNoise = 0.05;
inline constexpr double kArchetypeGain = 0.6;

// Single-precision representable so a noise-free render of a healthy study
// reproduces it exactly.
inline double base_anatomy(std::size_t r, std::size_t side) {
  return static_cast<float>(0.2 + 0.1 * static_cast<double>(r) / static_cast<double>(side - 1));
}

// Archetype weight at pixel (r, c); zero outside the archetype's support.
inline double archetype_weight(Archetype a, std::size_t r, std::size_t c, std::size_t side) {
  const double y = static_cast<double>(r) / static_cast<double>(side);
  const double x = static_cast<double>(c) / static_cast<double>(side);
  switch (a) {
    case Archetype::basal_gradient: {
      if (y < 0.72) return 0.0;
      return 0.3 + 0.7 * (y - 0.72) / 0.28;
    }
    case Archetype::apical_band:
      return y < 0.2 ? 1.0 : 0.0;
    case Archetype::focal_patch: {
      const double dy = y - 0.45, dx = x - 0.28, rad = 0.12;
      const double d2 = (dy * dy + dx * dx) / (rad * rad);
      return d2 < 1.0 ? 1.0 - 0.7 * d2 : 0.0;
    }
    case Archetype::diffuse_texture: {
      if (y < 0.3 || y >= 0.65 || x < 0.55 || x >= 0.9) return 0.0;
      return 0.55 + 0.45 * std::sin(1.3 * static_cast<double>(r)) * std::cos(1.7 * static_cast<double>(c));
    }
  }
  return 0.0;
}

// Pixels where the archetype has non-zero weight.
inline std::vector<std::size_t> archetype_support(Archetype a, std::size_t side) {
  std::vector<std::size_t> out;
  for (std::size_t r = 0; r < side; ++r)
    for (std::size_t c = 0; c < side; ++c)
      if (archetype_weight(a, r, c, side) > 0.0) out.push_back(r * side + c);
  return out;
}

// Global acquisition transform: exposure gain and offset plus a left-right
// intensity tilt. Identity for prior studies; follow-up studies use the
// configured portable-film setting, independent of any label.
struct Acquisition {
  double gain = 1.0;
  double offset = 0.0;
  double tilt = 0.0;

  bool identity() const { return gain == 1.0 && offset == 0.0 && tilt == 0.0; }
  friend bool operator==(const Acquisition&, const Acquisition&) = default;
};

// Base field + severity-scaled archetypes, acquisition transform, seeded
// Gaussian pixel noise; clamped to [0,1] and rounded to single precision (the
// on-disk format).
inline Image render_image(const std::vector<double>& severities, const std::vector<FindingSpec>& specs,
                          std::uint64_t seed, double noise, std::size_t side = kDefaultImageSide,
                          const Acquisition& acq = {}) {
  if (severities.size() != specs.size()) fail_domain("render_image: ", severities.size(), " severities for ", specs.size(), " findings");
  for (double s : severities)
    if (!(s >= 0.0 && s <= 1.0)) fail_domain("render_image: severity ", s, " outside [0,1]");
  if (!(noise >= 0.0)) fail_domain("render_image: negative noise level");
  if (!(acq.gain > 0.0)) fail_domain("render_image: acquisition gain must be positive");
  Image img{side, std::vector<double>(side * side)};
  Rng rng(seed);
  for (std::size_t r = 0; r < side; ++r) {
    for (std::size_t c = 0; c < side; ++c) {
      double v = base_anatomy(r, side);
      for (std::size_t f = 0; f < specs.size(); ++f)
        v += kArchetypeGain * severities[f] * archetype_weight(specs[f].archetype, r, c, side);
      if (!acq.identity())
        v = acq.gain * v + acq.offset + acq.tilt * (static_cast<double>(c) / static_cast<double>(side - 1) - 0.5);
      if (noise > 0.0) v += noise * rng.normal();
      v = std::clamp(v, 0.0, 1.0);
      img.at(r, c) = static_cast<double>(static_cast<float>(v));
    }
  }
  return img;
}

// ---------------------------------------------------------------------------
// Studies

inline ProgressionLabel progression_from_severity(double prev, double cur, double band) {
  if (cur < prev - band) return ProgressionLabel::improved;
  if (cur > prev + band) return ProgressionLabel::worsened;
  return ProgressionLabel::stable;
}

struct FindingState {
  double prev = 0.0;
  double cur = 0.0;
  ProgressionLabel label = ProgressionLabel::stable;
  friend bool operator==(const FindingState&, const FindingState&) = default;
};

inline std::vector<FindingState> label_states(const std::vector<std::pair<double, double>>& severities,
                                              const std::vector<FindingSpec>& specs) {
  std::vector<FindingState> out;
  for (std::size_t f = 0; f < specs.size(); ++f) {
    const auto [p, c] = severities[f];
    out.push_back({p, c, progression_from_severity(p, c, specs[f].stability_band)});
  }
  return out;
}

// c = 1 iff any finding is non-stable or crosses its presence threshold.
inline int change_flag_from_states(const std::vector<FindingState>& states, const std::vector<FindingSpec>& specs) {
  for (std::size_t f = 0; f < specs.size(); ++f) {
    const bool was = states[f].prev > specs[f].presence_threshold;
    const bool is = states[f].cur > specs[f].presence_threshold;
    if (states[f].label != ProgressionLabel::stable || was != is) return 1;
  }
  return 0;
}

enum class Split { train, test };

inline std::string_view to_string(Split s) { return s == Split::train ? "train" : "test"; }

struct PairedStudy {
  std::string id;
  std::uint64_t seed = 0;
  Split split = Split::train;
  Image prev;
  Image cur;
  std::vector<FindingState> findings;
  std::vector<std::string> report_words;
  std::vector<std::string> prior_report_words;
  TokenSequence report;
  int change = 0;

  friend bool operator==(const PairedStudy&, const PairedStudy&) = default;
};

// Severity sampler. Per study, with probability 0.25 every finding is drawn
// stable (|d| <= 0.08, no presence crossing). Otherwise each finding is
// independently: stable-like (0.15, d ~ U(-0.08, 0.08)), decreasing (0.425)
// or increasing (0.425) with magnitude m ~ U(m_lo, 0.6), m_lo =
// max(0.16, theta_p + 0.01) so a changing finding is always present at one
// timepoint. At the default band these give roughly 36/32/32 % stable /
// improved / worsened per finding and about a quarter of studies without
// change.
inline std::vector<std::pair<double, double>> sample_severities(Rng& rng, const std::vector<FindingSpec>& specs) {
  constexpr double kGlobalStable = 0.25, kLocalStable = 0.15, kStableJitter = 0.08;
  std::vector<std::pair<double, double>> out;
  const bool global_stable = rng.uniform() < kGlobalStable;
  for (const auto& spec : specs) {
    const double u = global_stable ? 0.0 : rng.uniform();
    double prev = 0.0, cur = 0.0;
    if (u < kLocalStable) {
      prev = rng.uniform();
      cur = std::clamp(prev + rng.uniform(-kStableJitter, kStableJitter), 0.0, 1.0);
      const bool crosses = (prev > spec.presence_threshold) != (cur > spec.presence_threshold);
      if (global_stable && crosses) cur = prev;
    } else {
      const double lo = std::min(0.9, std::max(0.16, spec.presence_threshold + 0.01));
      const double hi = std::max(lo, 0.6);
      const double m = rng.uniform(lo, hi);
      if (u < kLocalStable + (1.0 - kLocalStable) / 2.0) {
        prev = rng.uniform(m, 1.0);
        cur = prev - m;
      } else {
        prev = rng.uniform(0.0, 1.0 - m);
        cur = prev + m;
      }
    }
    out.emplace_back(prev, cur);
  }
  return out;
}

// Sentence for one finding in the follow-up report.
inline std::vector<std::string> finding_sentence(const FindingSpec& spec, const FindingState& st) {
  const bool was = st.prev > spec.presence_threshold;
  const bool is = st.cur > spec.presence_threshold;
  if (!was && !is && st.label == ProgressionLabel::stable) return {"no", spec.name, "."};
  if (!was && !is) return {spec.name, "is", std::string(to_string(st.label)), "."};
  if (!was && is) return {"new", spec.name, "."};
  if (was && !is) return {spec.name, "has", "resolved", "."};
  return {spec.name, "is", std::string(to_string(st.label)), "."};
}

inline std::vector<std::string> compose_report_words(const std::vector<FindingState>& states,
                                                     const std::vector<FindingSpec>& specs) {
  std::vector<std::string> out;
  for (std::size_t f = 0; f < specs.size(); ++f) {
    auto s = finding_sentence(specs[f], states[f]);
    out.insert(out.end(), s.begin(), s.end());
  }
  if (out.size() > kMaxTokens) fail_domain("compose_report: report exceeds ", kMaxTokens, " tokens");
  return out;
}

inline TokenSequence compose_report(const std::vector<FindingState>& states, const std::vector<FindingSpec>& specs,
                                    const Vocabulary& vocab = Vocabulary::standard()) {
  return vocab.encode(compose_report_words(states, specs));
}

// Direction-free description of the prior timepoint.
inline std::vector<std::string> compose_prior_report_words(const std::vector<FindingState>& states,
                                                           const std::vector<FindingSpec>& specs) {
  std::vector<std::string> out;
  for (std::size_t f = 0; f < specs.size(); ++f) {
    if (states[f].prev > specs[f].presence_threshold)
      out.insert(out.end(), {specs[f].name, "is", "present", "."});
    else
      out.insert(out.end(), {"no", specs[f].name, "."});
  }
  return out;
}

inline PairedStudy make_study(std::string id, std::uint64_t seed, const std::vector<std::pair<double, double>>& sev,
                              const std::vector<FindingSpec>& specs, double noise, std::size_t side,
                              const Acquisition& followup) {
  PairedStudy s;
  s.id = std::move(id);
  s.seed = seed;
  s.findings = label_states(sev, specs);
  std::vector<double> prev(specs.size()), cur(specs.size());
  for (std::size_t f = 0; f < specs.size(); ++f) {
    prev[f] = sev[f].first;
    cur[f] = sev[f].second;
  }
  s.prev = render_image(prev, specs, mix_seed(seed, 1), noise, side);
  s.cur = render_image(cur, specs, mix_seed(seed, 2), noise, side, followup);
  s.report_words = compose_report_words(s.findings, specs);
  s.prior_report_words = compose_prior_report_words(s.findings, specs);
  s.report = Vocabulary::standard().encode(s.report_words);
  s.change = change_flag_from_states(s.findings, specs);
  return s;
}

inline PairedStudy generate_study(std::uint64_t seed, const std::vector<FindingSpec>& specs,
                                  double noise = kDefaultNoise, std::size_t side = kDefaultImageSide,
                                  const Acquisition& followup = {}) {
  validate_specs(specs);
  if (!(noise >= 0.0 && noise <= 0.2)) fail_domain("generate_study: noise level ", noise, " outside [0, 0.2]");
  Rng rng(seed);
  const auto sev = sample_severities(rng, specs);
  std::ostringstream id;
  id << "s" << std::hex << seed;
  return make_study(id.str(), seed, sev, specs, noise, side, followup);
}

// The same study viewed in reversed temporal order: images swapped,
// severities swapped and every label recomputed.
inline PairedStudy swap_study(const PairedStudy& s, const std::vector<FindingSpec>& specs) {
  PairedStudy out = s;
  std::swap(out.prev, out.cur);
  std::vector<std::pair<double, double>> sev;
  for (const auto& f : s.findings) sev.emplace_back(f.cur, f.prev);
  out.findings = label_states(sev, specs);
  out.report_words = compose_report_words(out.findings, specs);
  out.prior_report_words = compose_prior_report_words(out.findings, specs);
  out.report = Vocabulary::standard().encode(out.report_words);
  out.change = change_flag_from_states(out.findings, specs);
  return out;
}

// Checks label/severity and change-flag consistency; returns a description of
// the first violation or an empty string.
inline std::string check_study_invariants(const PairedStudy& s, const std::vector<FindingSpec>& specs) {
  if (s.findings.size() != specs.size()) return "finding count mismatch";
  for (std::size_t f = 0; f < specs.size(); ++f) {
    const auto& st = s.findings[f];
    if (st.label != progression_from_severity(st.prev, st.cur, specs[f].stability_band))
      return "label inconsistent with severities for " + specs[f].name;
  }
  if (s.change != change_flag_from_states(s.findings, specs)) return "change flag inconsistent";
  if (s.report.ids.empty() || s.report.ids.size() > kMaxTokens) return "report length out of range";
  return {};
}

struct DataConfig {
  std::size_t n_train = 2000;
  std::size_t n_test = 500;
  std::size_t image_side = kDefaultImageSide;
  double noise = kDefaultNoise;
  double presence_threshold = 0.15;
  double stability_band = 0.1;
  Acquisition followup;

  std::vector<FindingSpec> specs() const { return default_specs(presence_threshold, stability_band); }
  friend bool operator==(const DataConfig&, const DataConfig&) = default;
};

struct Dataset {
  std::vector<FindingSpec> specs;
  std::vector<PairedStudy> studies;

  std::vector<const PairedStudy*> split(Split which) const {
    std::vector<const PairedStudy*> out;
    for (const auto& s : studies)
      if (s.split == which) out.push_back(&s);
    return out;
  }
};

// Study i takes seed mix(base, i): identical regardless of generation order.
inline Dataset generate_dataset(std::uint64_t base_seed, const DataConfig& cfg) {
  Dataset d;
  d.specs = cfg.specs();
  const std::size_t total = cfg.n_train + cfg.n_test;
  d.studies.reserve(total);
  for (std::size_t i = 0; i < total; ++i) {
    auto s = generate_study(mix_seed(base_seed, i), d.specs, cfg.noise, cfg.image_side, cfg.followup);
    std::ostringstream id;
    id << "study" << std::setw(6) << std::setfill('0') << i;
    s.id = id.str();
    s.split = i < cfg.n_train ? Split::train : Split::test;
    d.studies.push_back(std::move(s));
  }
  return d;
}

// ---------------------------------------------------------------------------
// Rule-based change labelling over report text

enum class ChangeLabel : int { abstain = -1, no_change = 0, change = 1 };

inline const std::vector<std::string>& change_stems() {
  static const std::vector<std::string> stems = {
      "improve", "worse",  "new",      "resolve", "increase", "decrease",  "reduce",    "progress", "regress",
      "develop", "enlarg", "aggravat", "exacerb", "diminish", "disappear", "recur",     "cleared"};
  return stems;
}

inline const std::vector<std::string>& no_change_stems() {
  static const std::vector<std::string> stems = {"stable", "unchanged", "persistent", "constant"};
  return stems;
}

inline bool has_stem(const std::vector<std::string>& words, const std::vector<std::string>& stems) {
  for (const auto& w : words)
    for (const auto& s : stems)
      if (w.rfind(s, 0) == 0) return true;
  return false;
}

// 1 when the follow-up mentions any new, worsening, improving or resolving
// finding; 0 when it only states stability; abstain otherwise. The prior
// report is accepted for interface parity with a report-pair labeller; the
// templated follow-up already carries every comparison term.
inline ChangeLabel assign_change_flag(const std::vector<std::string>& /*prior*/, const std::vector<std::string>& followup) {
  for (std::size_t i = 0; i + 2 < followup.size(); ++i)
    if (followup[i] == "no" && followup[i + 1] == "interval" && followup[i + 2] == "change") return ChangeLabel::no_change;
  if (has_stem(followup, change_stems())) return ChangeLabel::change;
  if (has_stem(followup, no_change_stems())) return ChangeLabel::no_change;
  return ChangeLabel::abstain;
}

// ---------------------------------------------------------------------------
// Directional retrieval variants

enum class SentenceKind { negation, fresh, resolved, directional, neutral };

struct ParsedSentence {
  SentenceKind kind = SentenceKind::neutral;
  std::string finding;
  std::vector<std::string> words;
};

inline std::vector<ParsedSentence> parse_report(const std::vector<std::string>& words,
                                                const std::vector<FindingSpec>& specs) {
  auto is_finding = [&](const std::string& w) {
    return std::any_of(specs.begin(), specs.end(), [&](const FindingSpec& s) { return s.name == w; });
  };
  std::vector<ParsedSentence> out;
  std::vector<std::string> cur;
  for (const auto& w : words) {
    cur.push_back(w);
    if (w != ".") continue;
    ParsedSentence p;
    p.words = cur;
    if (cur.size() == 3 && cur[0] == "no" && is_finding(cur[1])) {
      p = {SentenceKind::negation, cur[1], cur};
    } else if (cur.size() == 3 && cur[0] == "new" && is_finding(cur[1])) {
      p = {SentenceKind::fresh, cur[1], cur};
    } else if (cur.size() == 4 && is_finding(cur[0]) && cur[1] == "has" && cur[2] == "resolved") {
      p = {SentenceKind::resolved, cur[0], cur};
    } else if (cur.size() == 4 && is_finding(cur[0]) && cur[1] == "is" && cur[2] == "present") {
      p = {SentenceKind::neutral, cur[0], cur};
    } else if (cur.size() == 4 && is_finding(cur[0]) && cur[1] == "is" &&
               (cur[2] == "improved" || cur[2] == "stable" || cur[2] == "worsened")) {
      p = {SentenceKind::directional, cur[0], cur};
    } else {
      fail_domain("build_retrieval_variants: untemplatable sentence '", join_words(cur), "'");
    }
    out.push_back(std::move(p));
    cur.clear();
  }
  if (!cur.empty()) fail_domain("build_retrieval_variants: trailing words without sentence end");
  return out;
}

// Stage 2: direction-free rewrite of every sentence except the target's.
inline std::vector<std::string> neutralize_report(const std::vector<std::string>& words, const std::string& target,
                                                  const std::vector<FindingSpec>& specs) {
  std::vector<std::string> out;
  for (const auto& s : parse_report(words, specs)) {
    std::vector<std::string> w = s.words;
    if (s.finding != target) {
      if (s.kind == SentenceKind::directional || s.kind == SentenceKind::fresh)
        w = {s.finding, "is", "present", "."};
      else if (s.kind == SentenceKind::resolved)
        w = {"no", s.finding, "."};
    }
    out.insert(out.end(), w.begin(), w.end());
  }
  return out;
}

// Three reports ordered (improved, stable, worsened) that differ only in the
// target finding's direction word. Unmentioned or negated targets get a
// synthesised sentence appended at the end.
inline std::array<std::vector<std::string>, 3> build_retrieval_variants(const std::vector<std::string>& words,
                                                                        const std::string& target,
                                                                        const std::vector<FindingSpec>& specs) {
  if (std::none_of(specs.begin(), specs.end(), [&](const FindingSpec& s) { return s.name == target; }))
    fail_domain("build_retrieval_variants: unknown target finding '", target, "'");
  const auto sentences = parse_report(words, specs);
  std::array<std::vector<std::string>, 3> out;
  for (auto y : kAllLabels) {
    auto& report = out[index_of(y)];
    const std::vector<std::string> target_sentence = {target, "is", std::string(to_string(y)), "."};
    bool placed = false;
    for (const auto& s : sentences) {
      std::vector<std::string> w = s.words;
      if (s.finding == target) {
        if (s.kind == SentenceKind::negation) continue;
        w = target_sentence;
        placed = true;
      } else if (s.kind == SentenceKind::directional || s.kind == SentenceKind::fresh) {
        w = {s.finding, "is", "present", "."};
      } else if (s.kind == SentenceKind::resolved) {
        w = {"no", s.finding, "."};
      }
      report.insert(report.end(), w.begin(), w.end());
    }
    if (!placed) report.insert(report.end(), target_sentence.begin(), target_sentence.end());
  }
  return out;
}

// Prompt ensembles for zero-shot classification, three phrasings per class.
inline PromptBank default_prompt_bank(const std::vector<FindingSpec>& specs) {
  PromptBank bank;
  for (const auto& s : specs) {
    auto& entry = bank.prompts[s.name];
    for (auto y : kAllLabels) {
      const std::string w(to_string(y));
      entry[index_of(y)] = {s.name + " is " + w + " .", w + " " + s.name + " .", s.name + " " + w + " ."};
    }
  }
  return bank;
}

// ---------------------------------------------------------------------------
// On-disk format: manifest.jsonl + raw float32 images with a text header.

static_assert(std::endian::native == std::endian::little, "image payloads are written little-endian");

inline constexpr const char* kImageMagic = "TILAIMG";

inline void write_image(const std::filesystem::path& path, const Image& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail_domain("write_image: cannot open ", path.string());
  os << kImageMagic << ' ' << img.side << ' ' << img.side << '\n';
  std::vector<float> buf(img.pixels.begin(), img.pixels.end());
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
}

inline Image read_image(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail_domain("read_image: cannot open ", path.string());
  std::string magic;
  std::size_t rows = 0, cols = 0;
  is >> magic >> rows >> cols;
  if (magic != kImageMagic || rows == 0 || rows != cols) fail_domain("read_image: bad header in ", path.string());
  is.get();
  std::vector<float> buf(rows * cols);
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!is) fail_domain("read_image: truncated payload in ", path.string());
  return {rows, std::vector<double>(buf.begin(), buf.end())};
}

inline nlohmann::json study_record(const PairedStudy& s, const std::vector<FindingSpec>& specs) {
  nlohmann::json labels = nlohmann::json::object(), sev = nlohmann::json::object();
  for (std::size_t f = 0; f < specs.size(); ++f) {
    labels[specs[f].name] = std::string(to_string(s.findings[f].label));
    sev[specs[f].name] = {s.findings[f].prev, s.findings[f].cur};
  }
  return {{"id", s.id},
          {"seed", s.seed},
          {"split", std::string(to_string(s.split))},
          {"labels", labels},
          {"severities", sev},
          {"c", s.change},
          {"report", join_words(s.report_words)},
          {"prior_report", join_words(s.prior_report_words)},
          {"prev", "images/" + s.id + "_prev.f32"},
          {"cur", "images/" + s.id + "_cur.f32"}};
}

inline nlohmann::json data_config_json(const DataConfig& cfg) {
  return {{"n_train", cfg.n_train},       {"n_test", cfg.n_test},
          {"image_side", cfg.image_side}, {"noise", cfg.noise},
          {"presence_threshold", cfg.presence_threshold}, {"stability_band", cfg.stability_band},
          {"followup", {{"gain", cfg.followup.gain}, {"offset", cfg.followup.offset}, {"tilt", cfg.followup.tilt}}}};
}

// Writes manifest.jsonl (one record per study), dataset.json and the images.
inline std::vector<std::filesystem::path> write_dataset(const std::filesystem::path& dir, const Dataset& d,
                                                        const DataConfig& cfg) {
  std::filesystem::create_directories(dir / "images");
  std::vector<std::filesystem::path> written;
  {
    std::ofstream meta(dir / "dataset.json");
    meta << data_config_json(cfg).dump(2) << '\n';
    written.push_back(dir / "dataset.json");
  }
  std::ofstream manifest(dir / "manifest.jsonl");
  for (const auto& s : d.studies) {
    const auto rec = study_record(s, d.specs);
    manifest << rec.dump() << '\n';
    write_image(dir / rec["prev"].get<std::string>(), s.prev);
    write_image(dir / rec["cur"].get<std::string>(), s.cur);
    written.push_back(dir / rec["prev"].get<std::string>());
    written.push_back(dir / rec["cur"].get<std::string>());
  }
  written.push_back(dir / "manifest.jsonl");
  return written;
}

inline DataConfig read_data_config(const std::filesystem::path& dir) {
  std::ifstream is(dir / "dataset.json");
  if (!is) fail_domain("read_dataset: missing dataset.json in ", dir.string());
  const auto j = nlohmann::json::parse(is);
  DataConfig cfg;
  cfg.n_train = j.at("n_train");
  cfg.n_test = j.at("n_test");
  cfg.image_side = j.at("image_side");
  cfg.noise = j.at("noise");
  cfg.presence_threshold = j.at("presence_threshold");
  cfg.stability_band = j.at("stability_band");
  const auto& fu = j.at("followup");
  cfg.followup = {fu.at("gain"), fu.at("offset"), fu.at("tilt")};
  return cfg;
}

inline Dataset read_dataset(const std::filesystem::path& dir) {
  const DataConfig cfg = read_data_config(dir);
  Dataset d;
  d.specs = cfg.specs();
  std::ifstream is(dir / "manifest.jsonl");
  if (!is) fail_domain("read_dataset: missing manifest.jsonl in ", dir.string());
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto rec = nlohmann::json::parse(line);
    PairedStudy s;
    s.id = rec.at("id");
    s.seed = rec.at("seed");
    s.split = rec.at("split") == "train" ? Split::train : Split::test;
    for (const auto& spec : d.specs) {
      const auto sv = rec.at("severities").at(spec.name);
      FindingState st{sv.at(0), sv.at(1), parse_label(rec.at("labels").at(spec.name).get<std::string>())};
      s.findings.push_back(st);
    }
    s.change = rec.at("c");
    s.report_words = Vocabulary::split_words(rec.at("report"));
    s.prior_report_words = Vocabulary::split_words(rec.at("prior_report"));
    s.report = Vocabulary::standard().encode(s.report_words);
    s.prev = read_image(dir / rec.at("prev").get<std::string>());
    s.cur = read_image(dir / rec.at("cur").get<std::string>());
    const auto err = check_study_invariants(s, d.specs);
    if (!err.empty()) fail_domain("read_dataset: study ", s.id, ": ", err);
    d.studies.push_back(std::move(s));
  }
  return d;
}

}  // namespace tila
