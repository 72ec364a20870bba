#pragma once

// Finite-difference certification of every objective and of the encoder
// cosine. Each check wraps one loss as a function of a ParamStore whose
// gradient buffer holds the analytic gradient.

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tila/encoders.hpp"
#include "tila/numerics.hpp"
#include "tila/objectives.hpp"

namespace tila {

struct GradcheckCase {
  std::string name;
  std::uint64_t seed = 0;
  FdReport report;
};

inline constexpr double kFdStep = 1e-4;
inline constexpr double kFdTolerance = 1e-4;

namespace detail {

inline void fill_uniform(std::span<double> v, Rng& rng, double lo, double hi) {
  for (double& x : v) x = rng.uniform(lo, hi);
}

// Rows of a raw segment, L2-normalised, as a Matrix.
inline Matrix normalized_rows(const ParamStore& p, const std::string& name) {
  const auto& s = p.segment(name);
  Matrix m(s.rows, s.cols);
  const auto v = p.values(name);
  for (std::size_t i = 0; i < s.rows; ++i) {
    const auto n = l2_normalize(v.subspan(i * s.cols, s.cols));
    std::copy(n.begin(), n.end(), m.row(i).begin());
  }
  return m;
}

// Pulls dL/d(normalised rows) back onto the raw segment's gradient.
inline void accumulate_normalized(ParamStore& p, const std::string& name, const Matrix& normalized,
                                  const Matrix& grad, double weight = 1.0) {
  const auto& s = p.segment(name);
  const auto v = p.values(name);
  auto g = p.grads(name);
  for (std::size_t i = 0; i < s.rows; ++i) {
    const double n = l2_norm(v.subspan(i * s.cols, s.cols));
    std::vector<double> dy(grad.row(i).begin(), grad.row(i).end());
    for (double& x : dy) x *= weight;
    const auto dx = l2_normalize_backward(normalized.row(i), n, dy);
    for (std::size_t k = 0; k < s.cols; ++k) g[i * s.cols + k] += dx[k];
  }
}

inline LossParams read_logit_params(const ParamStore& p, double w, double lambda) {
  LossParams lp;
  lp.log_scale = p.scalar("log_scale");
  lp.bias = p.scalar("bias");
  lp.swap_log_scale = p.scalar("swap_log_scale");
  lp.swap_bias = p.scalar("swap_bias");
  lp.change_weight = w;
  lp.tcl_weight = lambda;
  return lp;
}

inline ParamStore contrastive_store(std::size_t n, std::size_t d, Rng& rng) {
  ParamStore p;
  p.add("V", n, d);
  p.add("V_swap", n, d);
  p.add("T", n, d);
  p.add("log_scale", 1, 1);
  p.add("bias", 1, 1);
  p.add("swap_log_scale", 1, 1);
  p.add("swap_bias", 1, 1);
  fill_uniform(p.values("V"), rng, -1.0, 1.0);
  fill_uniform(p.values("V_swap"), rng, -1.0, 1.0);
  fill_uniform(p.values("T"), rng, -1.0, 1.0);
  p.scalar("log_scale") = rng.uniform(0.0, std::log(10.0));
  p.scalar("bias") = rng.uniform(-10.0, 0.0);
  p.scalar("swap_log_scale") = rng.uniform(0.0, std::log(10.0));
  p.scalar("swap_bias") = rng.uniform(-10.0, 0.0);
  return p;
}

inline std::vector<int> random_flags(std::size_t n, Rng& rng) {
  std::vector<int> c(n);
  for (auto& x : c) x = rng.uniform() < 0.5 ? 1 : 0;
  return c;
}

inline std::vector<Logits> read_logits(const ParamStore& p, const std::string& name) {
  const auto v = p.values(name);
  std::vector<Logits> out(v.size() / 3);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = {v[3 * i], v[3 * i + 1], v[3 * i + 2]};
  return out;
}

inline void add_logit_grads(ParamStore& p, const std::string& name, const std::vector<Logits>& g) {
  auto out = p.grads(name);
  for (std::size_t i = 0; i < g.size(); ++i)
    for (std::size_t k = 0; k < 3; ++k) out[3 * i + k] += g[i][k];
}

inline std::vector<ProgressionLabel> random_labels(std::size_t n, Rng& rng) {
  std::vector<ProgressionLabel> y(n);
  for (auto& l : y) l = label_from_index(rng.below(3));
  return y;
}

}  // namespace detail

inline GradcheckCase gradcheck_siglip(std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t n = 2 + rng.below(3), d = 3 + rng.below(3);
  ParamStore p = detail::contrastive_store(n, d, rng);
  auto loss = [](const ParamStore& q) {
    return siglip_loss(detail::normalized_rows(q, "V"), detail::normalized_rows(q, "T"),
                       detail::read_logit_params(q, 1.0, 0.0)).value;
  };
  const Matrix v = detail::normalized_rows(p, "V"), t = detail::normalized_rows(p, "T");
  const auto r = siglip_loss(v, t, detail::read_logit_params(p, 1.0, 0.0));
  p.zero_grad();
  detail::accumulate_normalized(p, "V", v, r.grad_v);
  detail::accumulate_normalized(p, "T", t, r.grad_t);
  p.grads("log_scale")[0] += r.grad_log_scale;
  p.grads("bias")[0] += r.grad_bias;
  return {"siglip_loss", seed, fd_check(loss, p, kFdStep, kFdTolerance)};
}

inline GradcheckCase gradcheck_change_aware(std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t n = 2 + rng.below(3), d = 3 + rng.below(3);
  ParamStore p = detail::contrastive_store(n, d, rng);
  const auto c = detail::random_flags(n, rng);
  auto loss = [&](const ParamStore& q) {
    return change_aware_loss(detail::normalized_rows(q, "V_swap"), detail::normalized_rows(q, "T"), c,
                             detail::read_logit_params(q, 1.0, 0.0)).value;
  };
  const Matrix v = detail::normalized_rows(p, "V_swap"), t = detail::normalized_rows(p, "T");
  const auto r = change_aware_loss(v, t, c, detail::read_logit_params(p, 1.0, 0.0));
  p.zero_grad();
  detail::accumulate_normalized(p, "V_swap", v, r.grad_v);
  detail::accumulate_normalized(p, "T", t, r.grad_t);
  p.grads("swap_log_scale")[0] += r.grad_log_scale;
  p.grads("swap_bias")[0] += r.grad_bias;
  return {"change_aware_loss", seed, fd_check(loss, p, kFdStep, kFdTolerance)};
}

inline GradcheckCase gradcheck_pretrain_total(std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t n = 2 + rng.below(3), d = 3 + rng.below(3);
  ParamStore p = detail::contrastive_store(n, d, rng);
  const auto c = detail::random_flags(n, rng);
  const double w = rng.uniform(0.5, 2.0);
  const int epoch = rng.uniform() < 0.8 ? 11 + static_cast<int>(rng.below(20)) : 1 + static_cast<int>(rng.below(10));
  const StageSchedule schedule;
  auto batch_of = [&](const ParamStore& q) {
    return PretrainBatch{detail::normalized_rows(q, "V"), detail::normalized_rows(q, "V_swap"),
                         detail::normalized_rows(q, "T"), c};
  };
  auto loss = [&](const ParamStore& q) {
    return pretrain_total(batch_of(q), detail::read_logit_params(q, w, 0.0), epoch, schedule).total;
  };
  const auto b = batch_of(p);
  const auto r = pretrain_total(b, detail::read_logit_params(p, w, 0.0), epoch, schedule);
  p.zero_grad();
  const double we = r.change_weight;
  detail::accumulate_normalized(p, "V", b.v, r.siglip_terms.grad_v);
  detail::accumulate_normalized(p, "T", b.t, r.siglip_terms.grad_t);
  detail::accumulate_normalized(p, "V_swap", b.v_swap, r.change_terms.grad_v, we);
  detail::accumulate_normalized(p, "T", b.t, r.change_terms.grad_t, we);
  p.grads("log_scale")[0] += r.siglip_terms.grad_log_scale;
  p.grads("bias")[0] += r.siglip_terms.grad_bias;
  p.grads("swap_log_scale")[0] += we * r.change_terms.grad_log_scale;
  p.grads("swap_bias")[0] += we * r.change_terms.grad_bias;
  return {"pretrain_total", seed, fd_check(loss, p, kFdStep, kFdTolerance)};
}

inline GradcheckCase gradcheck_bice(std::uint64_t seed) {
  Rng rng(seed);
  ParamStore p;
  p.add("fwd", 1, 3);
  p.add("bwd", 1, 3);
  detail::fill_uniform(p.all_values(), rng, -3.0, 3.0);
  const auto y = label_from_index(rng.below(3));
  auto logits = [](const ParamStore& q, const char* name) {
    const auto v = q.values(name);
    return Logits{v[0], v[1], v[2]};
  };
  auto loss = [&](const ParamStore& q) { return bice_loss(logits(q, "fwd"), logits(q, "bwd"), y).value; };
  const auto r = bice_loss(logits(p, "fwd"), logits(p, "bwd"), y);
  p.zero_grad();
  for (std::size_t k = 0; k < 3; ++k) {
    p.grads("fwd")[k] = r.grad_fwd[k];
    p.grads("bwd")[k] = r.grad_bwd[k];
  }
  return {"bice_loss", seed, fd_check(loss, p, kFdStep, kFdTolerance)};
}

// TCL is certified through the softmax that produces its probabilities.
inline GradcheckCase gradcheck_tcl(std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t n = 1 + rng.below(4);
  ParamStore p;
  p.add("fwd", n, 3);
  p.add("bwd", n, 3);
  detail::fill_uniform(p.all_values(), rng, -3.0, 3.0);
  auto probs = [](const ParamStore& q, const char* name) {
    std::vector<ProbTriple> out;
    for (const auto& z : detail::read_logits(q, name)) out.push_back(softmax3(z));
    return out;
  };
  auto loss = [&](const ParamStore& q) { return tcl_loss(probs(q, "fwd"), probs(q, "bwd")).value; };
  const auto pf = probs(p, "fwd"), pb = probs(p, "bwd");
  const auto r = tcl_loss(pf, pb);
  p.zero_grad();
  std::vector<Logits> gf, gb;
  for (std::size_t i = 0; i < n; ++i) {
    gf.push_back(softmax_backward(pf[i], r.grad_fwd[i]));
    gb.push_back(softmax_backward(pb[i], r.grad_bwd[i]));
  }
  detail::add_logit_grads(p, "fwd", gf);
  detail::add_logit_grads(p, "bwd", gb);
  return {"tcl_loss", seed, fd_check(loss, p, kFdStep, kFdTolerance)};
}

inline GradcheckCase gradcheck_finetune_total(std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t n = 1 + rng.below(4);
  ParamStore p;
  p.add("fwd", n, 3);
  p.add("bwd", n, 3);
  detail::fill_uniform(p.all_values(), rng, -3.0, 3.0);
  const auto y = detail::random_labels(n, rng);
  LossParams lp;
  lp.tcl_weight = rng.uniform(0.0, 100.0);
  const int epoch = rng.uniform() < 0.8 ? 21 + static_cast<int>(rng.below(30)) : 1 + static_cast<int>(rng.below(20));
  const StageSchedule schedule;
  auto loss = [&](const ParamStore& q) {
    return finetune_total(detail::read_logits(q, "fwd"), detail::read_logits(q, "bwd"), y, lp, epoch, schedule).total;
  };
  const auto r = finetune_total(detail::read_logits(p, "fwd"), detail::read_logits(p, "bwd"), y, lp, epoch, schedule);
  p.zero_grad();
  detail::add_logit_grads(p, "fwd", r.grad_fwd);
  detail::add_logit_grads(p, "bwd", r.grad_bwd);
  return {"finetune_total", seed, fd_check(loss, p, kFdStep, kFdTolerance)};
}

// A deliberately small encoder so every coordinate can be checked.
inline EncoderConfig gradcheck_encoder_config(std::uint64_t seed) {
  EncoderConfig cfg;
  cfg.image_side = 8;
  cfg.patch = 2;
  cfg.hidden = 4;
  cfg.mlp = 5;
  cfg.proj_dim = 6;
  cfg.vocab_size = 5;
  cfg.text_hidden = 3;
  cfg.text_mlp = 4;
  cfg.seed = seed;
  return cfg;
}

// cos(encode_pair(prev, cur), encode_text(tokens)) w.r.t. every encoder weight.
inline GradcheckCase gradcheck_encoder_cosine(std::uint64_t seed) {
  const EncoderConfig cfg = gradcheck_encoder_config(seed);
  ParamStore p = init_params(cfg);
  Rng rng(mix_seed(seed, 7));
  // Non-zero biases so their gradients are exercised away from the origin.
  for (const char* name : {seg::kPatchB, seg::kImageB1, seg::kTextB1})
    detail::fill_uniform(p.values(name), rng, -0.5, 0.5);
  Image prev{cfg.image_side, std::vector<double>(cfg.image_side * cfg.image_side)}, cur = prev;
  detail::fill_uniform(prev.pixels, rng, 0.0, 1.0);
  detail::fill_uniform(cur.pixels, rng, 0.0, 1.0);
  TokenSequence tokens;
  const std::size_t len = 3 + rng.below(6);
  for (std::size_t i = 0; i < len; ++i) tokens.ids.push_back(static_cast<std::uint32_t>(rng.below(cfg.vocab_size)));
  const auto pp = patch_means(prev, cfg.patch), pc = patch_means(cur, cfg.patch);
  auto loss = [&](const ParamStore& q) {
    return dot(encode_pair_features(pp, pc, q, cfg).embedding, encode_text(tokens, q, cfg));
  };
  const auto a = encode_pair_features(pp, pc, p, cfg);
  const auto t = encode_text_activation(tokens, p, cfg);
  p.zero_grad();
  backprop_pair(a, t.embedding, p, cfg);
  backprop_text(t, a.embedding, p, cfg);
  return {"encoder_cosine", seed, fd_check(loss, p, kFdStep, kFdTolerance)};
}

// Five random settings of each of the six objectives plus the encoder cosine.
inline std::vector<GradcheckCase> run_gradcheck_suite(std::uint64_t base_seed, std::size_t settings = 5) {
  std::vector<GradcheckCase> out;
  using Fn = GradcheckCase (*)(std::uint64_t);
  const Fn checks[] = {gradcheck_siglip, gradcheck_change_aware, gradcheck_pretrain_total, gradcheck_bice,
                       gradcheck_tcl,    gradcheck_finetune_total, gradcheck_encoder_cosine};
  for (std::size_t c = 0; c < std::size(checks); ++c)
    for (std::size_t s = 0; s < settings; ++s) out.push_back(checks[c](mix_seed(base_seed, c * 1000 + s)));
  return out;
}

inline nlohmann::json to_json(const GradcheckCase& c) {
  nlohmann::json j = {{"name", c.name},
                      {"seed", c.seed},
                      {"step", c.report.step},
                      {"tol", c.report.tol},
                      {"max_rel_error", c.report.max_rel_error},
                      {"coordinates_checked", c.report.entries.size()},
                      {"total_coordinates", c.report.total_coordinates},
                      {"flagged", c.report.flagged},
                      {"passed", c.report.passed()}};
  if (!c.report.sampling.empty()) j["sampling"] = c.report.sampling;
  return j;
}

}  // namespace tila
