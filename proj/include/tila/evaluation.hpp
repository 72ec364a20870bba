#pragma once

// Metrics: macro-accuracy, the four-protocol inversion evaluation,
// Recall@k, temporal-term F1 (TEM) and Mann-Whitney AUC.

#include <algorithm>
#include <array>
#include <map>
#include <numeric>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tila/inference.hpp"
#include "tila/labels.hpp"
#include "tila/numerics.hpp"

namespace tila {

// Unweighted mean over the classes present in `truth` of the fraction of
// cases marked correct, in percent.
inline double macro_accuracy_from_hits(const std::vector<bool>& correct, std::span<const ProgressionLabel> truth) {
  if (truth.empty()) fail_domain("macro_accuracy: empty input");
  if (correct.size() != truth.size()) fail_domain("macro_accuracy: ", correct.size(), " outcomes for ", truth.size(), " labels");
  std::array<std::size_t, 3> total{}, hit{};
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const auto k = index_of(truth[i]);
    ++total[k];
    if (correct[i]) ++hit[k];
  }
  // Recalls are summed in sorted order so relabelling the classes (as the
  // reversed protocol does) cannot change the rounding.
  std::vector<double> recalls;
  for (std::size_t k = 0; k < 3; ++k)
    if (total[k] != 0) recalls.push_back(static_cast<double>(hit[k]) / static_cast<double>(total[k]));
  std::sort(recalls.begin(), recalls.end());
  double sum = 0.0;
  for (double r : recalls) sum += r;
  return 100.0 * sum / static_cast<double>(recalls.size());
}

// Macro-accuracy: mean per-class recall, in percent.
inline double macro_accuracy(std::span<const ProgressionLabel> pred, std::span<const ProgressionLabel> truth) {
  if (pred.size() != truth.size()) fail_domain("macro_accuracy: ", pred.size(), " predictions for ", truth.size(), " labels");
  std::vector<bool> correct(truth.size());
  for (std::size_t i = 0; i < truth.size(); ++i) correct[i] = pred[i] == truth[i];
  return macro_accuracy_from_hits(correct, truth);
}

// ---------------------------------------------------------------------------
// Four-protocol evaluation

template <typename Input>
struct ProtocolCase {
  std::string id;
  Input prev;
  Input cur;
  ProgressionLabel label = ProgressionLabel::stable;
};

struct ProtocolScores {
  double standard = 0.0;
  double reversed = 0.0;
  double combined = 0.0;
  double consistency = 0.0;
  std::array<std::size_t, 3> counts{};  // cases per forward-truth class

  friend bool operator==(const ProtocolScores&, const ProtocolScores&) = default;
};

struct ProtocolPredictions {
  std::vector<ProgressionLabel> forward, reversed, combined;
};

// Runs `classify(prev, cur) -> ProbTriple` in both orders for every case.
template <typename Input, typename Classifier>
ProtocolScores evaluate_protocols(Classifier&& classify, std::span<const ProtocolCase<Input>> cases,
                                  ProtocolPredictions* predictions = nullptr) {
  if (cases.empty()) fail_domain("evaluate_protocols: no cases");
  const std::size_t n = cases.size();
  std::vector<ProgressionLabel> truth(n), truth_rev(n), pred_f(n), pred_r(n), pred_c(n);
  std::vector<bool> both(n);
  ProtocolScores s;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& c = cases[i];
    ProbTriple pf, pb;
    try {
      pf = classify(c.prev, c.cur);
      pb = classify(c.cur, c.prev);
      require_simplex(pf, "classifier output");
      require_simplex(pb, "classifier output");
    } catch (const std::exception& e) {
      fail_domain("evaluate_protocols: classifier failed on case '", c.id, "': ", e.what());
    }
    truth[i] = c.label;
    truth_rev[i] = invert_label(c.label);
    pred_f[i] = argmax_label(pf);
    pred_r[i] = argmax_label(pb);
    pred_c[i] = argmax_label(combined_score(pf, pb));
    both[i] = pred_f[i] == truth[i] && pred_r[i] == truth_rev[i];
    ++s.counts[index_of(c.label)];
  }
  s.standard = macro_accuracy(pred_f, truth);
  s.reversed = macro_accuracy(pred_r, truth_rev);
  s.combined = macro_accuracy(pred_c, truth);
  s.consistency = macro_accuracy_from_hits(both, truth);
  if (predictions) *predictions = {pred_f, pred_r, pred_c};
  return s;
}

// Same cases with the pair order reversed and labels inverted.
template <typename Input>
std::vector<ProtocolCase<Input>> swap_cases(std::span<const ProtocolCase<Input>> cases) {
  std::vector<ProtocolCase<Input>> out;
  out.reserve(cases.size());
  for (const auto& c : cases) out.push_back({c.id, c.cur, c.prev, invert_label(c.label)});
  return out;
}

struct ProtocolReport {
  std::map<std::string, ProtocolScores> findings;

  ProtocolScores average() const {
    ProtocolScores avg;
    if (findings.empty()) return avg;
    for (const auto& [name, s] : findings) {
      avg.standard += s.standard;
      avg.reversed += s.reversed;
      avg.combined += s.combined;
      avg.consistency += s.consistency;
      for (std::size_t k = 0; k < 3; ++k) avg.counts[k] += s.counts[k];
    }
    const double n = static_cast<double>(findings.size());
    avg.standard /= n;
    avg.reversed /= n;
    avg.combined /= n;
    avg.consistency /= n;
    return avg;
  }
};

inline nlohmann::json to_json(const ProtocolScores& s) {
  return {{"standard", s.standard},
          {"reversed", s.reversed},
          {"combined", s.combined},
          {"consistency", s.consistency},
          {"counts", {{"improved", s.counts[0]}, {"stable", s.counts[1]}, {"worsened", s.counts[2]}}}};
}

inline nlohmann::json to_json(const ProtocolReport& r) {
  nlohmann::json j;
  for (const auto& [name, s] : r.findings) j["findings"][name] = to_json(s);
  j["average"] = to_json(r.average());
  return j;
}

// Tab-separated table, one row per finding plus the average.
inline std::string to_table(const ProtocolReport& r, const std::string& tag = "") {
  std::ostringstream os;
  os.precision(6);
  os << std::fixed;
  os << "run\tfinding\tstandard\treversed\tcombined\tconsistency\tn_improved\tn_stable\tn_worsened\n";
  auto row = [&](const std::string& name, const ProtocolScores& s) {
    os << tag << '\t' << name << '\t' << s.standard << '\t' << s.reversed << '\t' << s.combined << '\t'
       << s.consistency << '\t' << s.counts[0] << '\t' << s.counts[1] << '\t' << s.counts[2] << '\n';
  };
  for (const auto& [name, s] : r.findings) row(name, s);
  row("average", r.average());
  return os.str();
}

// ---------------------------------------------------------------------------
// Retrieval

struct SimilarityGrid {
  Matrix similarity;                 // queries x candidates
  std::vector<std::size_t> truth;    // index of the true match per query

  void validate() const {
    if (truth.size() != similarity.rows()) fail_domain("SimilarityGrid: one true match per query required");
    for (std::size_t t : truth)
      if (t >= similarity.cols()) fail_domain("SimilarityGrid: true match index ", t, " out of range");
  }
};

// 1-based rank of the true match: descending similarity, ties by candidate index.
inline std::size_t rank_of_truth(const SimilarityGrid& grid, std::size_t query) {
  const auto row = grid.similarity.row(query);
  const std::size_t t = grid.truth[query];
  std::size_t rank = 1;
  for (std::size_t j = 0; j < row.size(); ++j)
    if (row[j] > row[t] || (row[j] == row[t] && j < t)) ++rank;
  return rank;
}

inline double recall_at_k(const SimilarityGrid& grid, std::size_t k) {
  grid.validate();
  if (k < 1 || k > grid.similarity.cols())
    fail_domain("recall_at_k: k=", k, " outside [1, ", grid.similarity.cols(), "]");
  if (grid.similarity.rows() == 0) fail_domain("recall_at_k: no queries");
  std::size_t hits = 0;
  for (std::size_t q = 0; q < grid.similarity.rows(); ++q) hits += rank_of_truth(grid, q) <= k ? 1 : 0;
  return 100.0 * static_cast<double>(hits) / static_cast<double>(grid.similarity.rows());
}

// Index of the highest-similarity candidate (ties to the lowest index).
inline std::size_t top1(const SimilarityGrid& grid, std::size_t query) {
  const auto row = grid.similarity.row(query);
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

// ---------------------------------------------------------------------------
// Temporal term matching

struct TemporalLexicon {
  std::vector<std::string> stems;

  static TemporalLexicon defaults() {
    return {{"chang", "clear", "constant", "decreas", "elevat", "expand", "improv", "increas", "persist", "reduc",
             "remov", "resolv", "stabl", "wors", "new"}};
  }

  void validate() const {
    if (stems.empty()) fail_domain("TemporalLexicon: empty");
    std::set<std::string> seen(stems.begin(), stems.end());
    if (seen.size() != stems.size()) fail_domain("TemporalLexicon: duplicate stems");
  }

  // Stems with a lowercase prefix match in `tokens`.
  std::set<std::string> matches(std::span<const std::string> tokens) const {
    std::set<std::string> out;
    for (const auto& raw : tokens) {
      std::string tok = raw;
      std::transform(tok.begin(), tok.end(), tok.begin(), [](unsigned char ch) { return std::tolower(ch); });
      for (const auto& stem : stems)
        if (tok.rfind(stem, 0) == 0) out.insert(stem);
    }
    return out;
  }
};

// F1 overlap of temporal stems, in [0, 100]. Both empty counts as agreement.
inline double tem_score(std::span<const std::string> reference, std::span<const std::string> retrieved,
                        const TemporalLexicon& lexicon) {
  lexicon.validate();
  const auto a = lexicon.matches(reference);
  const auto b = lexicon.matches(retrieved);
  if (a.empty() && b.empty()) return 100.0;
  if (a.empty() || b.empty()) return 0.0;
  std::size_t common = 0;
  for (const auto& s : a) common += b.count(s);
  return 100.0 * 2.0 * static_cast<double>(common) / static_cast<double>(a.size() + b.size());
}

// Mean TEM over queries, each scored against its top-1 retrieved candidate.
inline double corpus_tem(const SimilarityGrid& grid, const std::vector<std::vector<std::string>>& query_reports,
                         const std::vector<std::vector<std::string>>& candidate_reports,
                         const TemporalLexicon& lexicon) {
  grid.validate();
  if (grid.similarity.rows() == 0) fail_domain("corpus_tem: no queries");
  double sum = 0.0;
  for (std::size_t q = 0; q < grid.similarity.rows(); ++q)
    sum += tem_score(query_reports[q], candidate_reports[top1(grid, q)], lexicon);
  return sum / static_cast<double>(grid.similarity.rows());
}

// ---------------------------------------------------------------------------
// AUC via the Mann-Whitney rank statistic with midranks for ties.

inline double auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) fail_domain("auc: ", scores.size(), " scores for ", labels.size(), " labels");
  const std::size_t n = scores.size();
  std::size_t n_pos = 0;
  for (int l : labels) {
    if (l != 0 && l != 1) fail_domain("auc: labels must be 0/1");
    n_pos += static_cast<std::size_t>(l);
  }
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) fail_domain("auc: both classes must be present");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos_rank_sum = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k)
      if (labels[order[k]] == 1) pos_rank_sum += midrank;
    i = j + 1;
  }
  const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
  return (pos_rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

}  // namespace tila
