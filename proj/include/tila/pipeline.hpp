#pragma once

// Evaluation glue between trained parameters and the metric module:
// head-based and zero-shot protocol reports, swap-order cosine margins,
// report retrieval and binary screening.

#include <map>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "tila/encoders.hpp"
#include "tila/evaluation.hpp"
#include "tila/inference.hpp"
#include "tila/synthdata.hpp"
#include "tila/training.hpp"

namespace tila {

using FeatureRef = const std::vector<double>*;

// Memoises per-order model outputs so each ordered pair is encoded once even
// though the protocol evaluator runs finding by finding.
class PairCache {
 public:
  template <typename Fn>
  const std::vector<ProbTriple>& get(FeatureRef prev, FeatureRef cur, Fn&& compute) {
    const auto key = std::make_pair(prev, cur);
    auto it = cache_.find(key);
    if (it == cache_.end()) it = cache_.emplace(key, compute(*prev, *cur)).first;
    return it->second;
  }

 private:
  std::map<std::pair<FeatureRef, FeatureRef>, std::vector<ProbTriple>> cache_;
};

inline std::vector<ProtocolCase<FeatureRef>> protocol_cases(const std::vector<StudyFeatures>& data, std::size_t finding) {
  std::vector<ProtocolCase<FeatureRef>> cases;
  for (std::size_t i = 0; i < data.size(); ++i)
    cases.push_back({"case" + std::to_string(i), &data[i].prev, &data[i].cur, data[i].labels.at(finding)});
  return cases;
}

// `probs(prev, cur)` returns one ProbTriple per finding.
template <typename ProbFn>
ProtocolReport protocol_report(const std::vector<StudyFeatures>& data, const std::vector<FindingSpec>& specs,
                               ProbFn&& probs) {
  ProtocolReport report;
  PairCache cache;
  for (std::size_t f = 0; f < specs.size(); ++f) {
    const auto cases = protocol_cases(data, f);
    auto classify = [&](FeatureRef prev, FeatureRef cur) { return cache.get(prev, cur, probs).at(f); };
    report.findings[specs[f].name] = evaluate_protocols<FeatureRef>(classify, std::span(cases));
  }
  return report;
}

inline ProtocolReport head_protocol_report(const ParamStore& params, const EncoderConfig& ecfg,
                                           const std::vector<StudyFeatures>& data,
                                           const std::vector<FindingSpec>& specs) {
  return protocol_report(data, specs, [&](const std::vector<double>& prev, const std::vector<double>& cur) {
    return classify_pair(params, ecfg, prev, cur);
  });
}

inline Tokenizer standard_tokenizer() {
  return [](const std::string& text) { return Vocabulary::standard().tokenize(text); };
}

inline ProtocolReport zero_shot_protocol_report(const ParamStore& params, const EncoderConfig& ecfg,
                                                const std::vector<StudyFeatures>& data,
                                                const std::vector<FindingSpec>& specs, const PromptBank& bank) {
  std::vector<ClassPromptEmbeddings> prompts;
  for (const auto& s : specs) prompts.push_back(encode_prompts(bank, s.name, standard_tokenizer(), params, ecfg));
  return protocol_report(data, specs, [&](const std::vector<double>& prev, const std::vector<double>& cur) {
    const auto v = encode_pair_features(prev, cur, params, ecfg).embedding;
    std::vector<ProbTriple> out;
    for (const auto& p : prompts) out.push_back(zero_shot_classify(v, p));
    return out;
  });
}

// Mean cosine between reversed-order image embeddings and the forward report,
// split by ground-truth change flag.
struct SwapMargin {
  double unchanged = 0.0;
  double changed = 0.0;
  double margin() const { return unchanged - changed; }
};

inline SwapMargin swap_cosine_margin(const ParamStore& params, const EncoderConfig& ecfg,
                                     const std::vector<StudyFeatures>& data) {
  double sum[2] = {0, 0};
  std::size_t n[2] = {0, 0};
  for (const auto& s : data) {
    const auto v = encode_pair_features(s.cur, s.prev, params, ecfg).embedding;
    const auto t = encode_text(s.report, params, ecfg);
    sum[s.change] += dot(v, t);
    ++n[s.change];
  }
  if (n[0] == 0 || n[1] == 0) fail_domain("swap_cosine_margin: need both changed and unchanged studies");
  return {sum[0] / static_cast<double>(n[0]), sum[1] / static_cast<double>(n[1])};
}

inline std::vector<EmbeddingVector> forward_embeddings(const ParamStore& params, const EncoderConfig& ecfg,
                                                       const std::vector<StudyFeatures>& data) {
  std::vector<EmbeddingVector> out;
  for (const auto& s : data) out.push_back(encode_pair_features(s.prev, s.cur, params, ecfg).embedding);
  return out;
}

inline std::vector<int> change_labels(const std::vector<StudyFeatures>& data) {
  std::vector<int> out;
  for (const auto& s : data) out.push_back(s.change);
  return out;
}

inline ProbeResult screen_binary(const ParamStore& params, const EncoderConfig& ecfg,
                                 const std::vector<StudyFeatures>& train, const std::vector<StudyFeatures>& test,
                                 const ProbeConfig& cfg, const AdamWConfig& opt, std::uint64_t seed) {
  return linear_probe_binary(forward_embeddings(params, ecfg, train), change_labels(train),
                             forward_embeddings(params, ecfg, test), change_labels(test), cfg, opt, seed);
}

// Image-to-report and report-to-image retrieval over one split.
struct RetrievalMetrics {
  std::map<std::size_t, double> i2t, t2i;  // k -> Recall@k
  double tem = 0.0;
};

inline RetrievalMetrics retrieval_metrics(const ParamStore& params, const EncoderConfig& ecfg,
                                          const std::vector<StudyFeatures>& data,
                                          const std::vector<std::size_t>& ks = {1, 5, 10}) {
  const std::size_t n = data.size();
  std::vector<EmbeddingVector> v = forward_embeddings(params, ecfg, data), t;
  for (const auto& s : data) t.push_back(encode_text(s.report, params, ecfg));
  SimilarityGrid i2t{Matrix(n, n), {}}, t2i{Matrix(n, n), {}};
  for (std::size_t i = 0; i < n; ++i) {
    i2t.truth.push_back(i);
    t2i.truth.push_back(i);
    for (std::size_t j = 0; j < n; ++j) {
      i2t.similarity(i, j) = dot(v[i], t[j]);
      t2i.similarity(j, i) = i2t.similarity(i, j);
    }
  }
  RetrievalMetrics m;
  for (auto k : ks) {
    if (k > n) continue;
    m.i2t[k] = recall_at_k(i2t, k);
    m.t2i[k] = recall_at_k(t2i, k);
  }
  std::vector<std::vector<std::string>> reports;
  for (const auto& s : data) reports.push_back(s.report_words);
  m.tem = corpus_tem(i2t, reports, reports, TemporalLexicon::defaults());
  return m;
}

inline nlohmann::json to_json(const RetrievalMetrics& m) {
  nlohmann::json j = {{"tem", m.tem}};
  for (const auto& [k, r] : m.i2t) j["i2t_recall@" + std::to_string(k)] = r;
  for (const auto& [k, r] : m.t2i) j["t2i_recall@" + std::to_string(k)] = r;
  return j;
}

// Directional-variant classification: for each study and finding, the three
// variant reports built from the study's own report, scored by cosine and
// softmax-normalised so the four protocols apply.
inline ProtocolReport variant_protocol_report(const ParamStore& params, const EncoderConfig& ecfg,
                                              const std::vector<StudyFeatures>& data,
                                              const std::vector<FindingSpec>& specs) {
  const auto& vocab = Vocabulary::standard();
  std::map<FeatureRef, std::vector<std::array<EmbeddingVector, 3>>> variants;  // keyed by the study's prev
  for (const auto& s : data) {
    auto& per_finding = variants[&s.prev];
    for (const auto& spec : specs) {
      const auto words = build_retrieval_variants(s.report_words, spec.name, specs);
      std::array<EmbeddingVector, 3> enc;
      for (std::size_t k = 0; k < 3; ++k) enc[k] = encode_text(vocab.encode(words[k]), params, ecfg);
      per_finding.push_back(std::move(enc));
    }
  }
  std::map<FeatureRef, FeatureRef> owner;  // either image of a study -> its prev
  for (const auto& s : data) {
    owner[&s.prev] = &s.prev;
    owner[&s.cur] = &s.prev;
  }
  ProtocolReport report;
  PairCache cache;
  for (std::size_t f = 0; f < specs.size(); ++f) {
    const auto cases = protocol_cases(data, f);
    auto classify = [&](FeatureRef prev, FeatureRef cur) {
      return cache
          .get(prev, cur,
               [&](const std::vector<double>& a, const std::vector<double>& b) {
                 const auto v = encode_pair_features(a, b, params, ecfg).embedding;
                 const auto& enc = variants.at(owner.at(prev));
                 std::vector<ProbTriple> out;
                 for (const auto& e : enc) {
                   const std::array<double, 3> cos{dot(v, e[0]), dot(v, e[1]), dot(v, e[2])};
                   out.push_back(to_triple(softmax(cos)));
                 }
                 return out;
               })
          .at(f);
    };
    report.findings[specs[f].name] = evaluate_protocols<FeatureRef>(classify, std::span(cases));
  }
  return report;
}

}  // namespace tila
