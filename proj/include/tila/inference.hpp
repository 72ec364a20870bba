#pragma once

// Inversion-aware scoring and the two zero-shot classifiers (prompt ensemble
// and directional report variants).

#include <array>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tila/encoders.hpp"
#include "tila/labels.hpp"
#include "tila/numerics.hpp"

namespace tila {

// 1/2 [p_fwd + S(p_bwd)]
inline ProbTriple combined_score(const ProbTriple& p_fwd, const ProbTriple& p_bwd) {
  require_simplex(p_fwd, "combined_score");
  const ProbTriple mirrored = swap_probs(p_bwd);
  return {0.5 * (p_fwd[0] + mirrored[0]), 0.5 * (p_fwd[1] + mirrored[1]), 0.5 * (p_fwd[2] + mirrored[2])};
}

// ---------------------------------------------------------------------------
// Prompt-ensemble zero-shot classification

// finding -> class (improved, stable, worsened) -> prompt texts
struct PromptBank {
  std::map<std::string, std::array<std::vector<std::string>, 3>> prompts;

  void validate() const {
    if (prompts.empty()) fail_domain("PromptBank: no findings");
    for (const auto& [finding, classes] : prompts) {
      for (std::size_t k = 0; k < 3; ++k) {
        const auto& list = classes[k];
        if (list.empty())
          fail_domain("PromptBank: finding '", finding, "' has no prompts for class ", to_string(label_from_index(k)));
        for (std::size_t a = 0; a < list.size(); ++a)
          for (std::size_t b = a + 1; b < list.size(); ++b)
            if (list[a] == list[b]) fail_domain("PromptBank: duplicate prompt '", list[a], "' for ", finding);
      }
    }
  }

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [finding, classes] : prompts)
      for (std::size_t k = 0; k < 3; ++k) j[finding][std::string(to_string(label_from_index(k)))] = classes[k];
    return j;
  }

  static PromptBank from_json(const nlohmann::json& j) {
    PromptBank bank;
    if (!j.is_object()) fail_domain("PromptBank: expected an object of findings");
    for (const auto& [finding, classes] : j.items()) {
      auto& entry = bank.prompts[finding];
      for (const auto& [cls, list] : classes.items())
        entry[index_of(parse_label(cls))] = list.get<std::vector<std::string>>();
    }
    bank.validate();
    return bank;
  }
};

// Encoded prompts for one finding, indexed by class.
using ClassPromptEmbeddings = std::array<std::vector<EmbeddingVector>, 3>;

using Tokenizer = std::function<TokenSequence(const std::string&)>;

inline ClassPromptEmbeddings encode_prompts(const PromptBank& bank, const std::string& finding,
                                            const Tokenizer& tokenize, const ParamStore& params,
                                            const EncoderConfig& cfg) {
  auto it = bank.prompts.find(finding);
  if (it == bank.prompts.end()) fail_domain("PromptBank: no prompts for finding '", finding, "'");
  ClassPromptEmbeddings out;
  for (std::size_t k = 0; k < 3; ++k) {
    if (it->second[k].empty()) fail_domain("zero_shot_classify: empty prompt list for class ", k);
    for (const auto& text : it->second[k]) out[k].push_back(encode_text(tokenize(text), params, cfg));
  }
  return out;
}

// Mean cosine per class, softmax-normalised (temperature 1). Inputs are unit
// vectors so the cosine is the dot product.
inline ProbTriple zero_shot_classify(std::span<const double> v, const ClassPromptEmbeddings& prompts) {
  if (std::abs(l2_norm(v) - 1.0) > 1e-9) fail_domain("zero_shot_classify: embedding is not unit norm");
  std::array<double, 3> score{};
  for (std::size_t k = 0; k < 3; ++k) {
    if (prompts[k].empty()) fail_domain("zero_shot_classify: empty prompt list for class ", k);
    for (const auto& p : prompts[k]) score[k] += dot(v, p);
    score[k] /= static_cast<double>(prompts[k].size());
  }
  return to_triple(softmax(score));
}

inline ProbTriple zero_shot_classify(std::span<const double> v, const PromptBank& bank, const std::string& finding,
                                     const Tokenizer& tokenize, const ParamStore& params,
                                     const EncoderConfig& cfg) {
  return zero_shot_classify(v, encode_prompts(bank, finding, tokenize, params, cfg));
}

// ---------------------------------------------------------------------------
// Directional-variant classification: pick the variant report closest to v.

inline ProgressionLabel retrieval_classify_scores(const std::array<double, 3>& cosines) {
  return argmax_label(cosines);
}

inline ProgressionLabel retrieval_classify(std::span<const double> v, std::span<const EmbeddingVector> variants) {
  if (variants.size() != 3) fail_domain("retrieval_classify: expected 3 variants, got ", variants.size());
  return retrieval_classify_scores({dot(v, variants[0]), dot(v, variants[1]), dot(v, variants[2])});
}

}  // namespace tila
