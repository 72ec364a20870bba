#pragma once

// AdamW, warm-up + cosine schedule, the staged pretraining and fine-tuning
// loops, the binary-screening linear probe and checkpoint I/O.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tila/encoders.hpp"
#include "tila/evaluation.hpp"
#include "tila/labels.hpp"
#include "tila/numerics.hpp"
#include "tila/objectives.hpp"
#include "tila/synthdata.hpp"

namespace tila {

// ---------------------------------------------------------------------------
// Optimiser

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  friend bool operator==(const AdamWConfig&, const AdamWConfig&) = default;
};

struct OptimState {
  std::vector<double> m, v;
  std::uint64_t step = 0;

  static OptimState for_store(const ParamStore& p) { return {std::vector<double>(p.size()), std::vector<double>(p.size()), 0}; }
};

using SegmentFilter = std::function<bool(const std::string&)>;

// Decoupled decay first (theta *= 1 - lr*wd), then the bias-corrected Adam
// step. Segments rejected by `trainable` are left untouched.
inline void adamw_step(ParamStore& params, OptimState& state, double lr, const AdamWConfig& cfg,
                       const SegmentFilter& trainable = {}) {
  if (state.m.size() != params.size() || state.v.size() != params.size())
    fail_domain("adamw_step: optimiser state has ", state.m.size(), " entries for ", params.size(), " parameters");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  auto theta = params.all_values();
  const auto g = params.all_grads();
  for (const auto& seg : params.segments()) {
    if (trainable && !trainable(seg.name)) continue;
    for (std::size_t i = seg.offset; i < seg.offset + seg.size(); ++i) {
      theta[i] *= 1.0 - lr * cfg.weight_decay;
      state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g[i];
      state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      theta[i] -= lr * (state.m[i] / c1) / (std::sqrt(state.v[i] / c2) + cfg.eps);
    }
  }
}

struct Schedule {
  double base_lr = 1e-4;
  std::size_t warmup_steps = 100;
  std::size_t total_steps = 1000;
  bool cosine = true;

  void validate() const {
    if (!(base_lr > 0.0)) fail_config("schedule: learning rate must be positive");
    if (total_steps == 0 || warmup_steps >= total_steps)
      fail_config("schedule: warm-up (", warmup_steps, ") must be shorter than the run (", total_steps, " steps)");
  }
};

// Linear ramp 0 -> base over the warm-up, then half-cosine down to 0.
inline double lr_at(std::size_t step, const Schedule& s) {
  if (step > s.total_steps) fail_domain("lr_at: step ", step, " beyond schedule end ", s.total_steps);
  if (step < s.warmup_steps) return s.base_lr * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  if (!s.cosine) return s.base_lr;
  const double progress =
      static_cast<double>(step - s.warmup_steps) / static_cast<double>(s.total_steps - s.warmup_steps);
  return s.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

inline double grad_norm(const ParamStore& p) {
  double s = 0.0;
  for (double g : p.all_grads()) s += g * g;
  return std::sqrt(s);
}

// ---------------------------------------------------------------------------
// Checkpoints: text header then little-endian float64 payload.

inline constexpr const char* kCheckpointMagic = "TILACKPT";

inline void save_checkpoint(const std::filesystem::path& path, const ParamStore& params) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) fail_domain("save_checkpoint: cannot open ", tmp.string());
    os << kCheckpointMagic << " 1\n" << params.segments().size() << '\n';
    for (const auto& s : params.segments()) os << s.name << ' ' << s.rows << ' ' << s.cols << '\n';
    os << "end\n";
    const auto v = params.all_values();
    os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
    if (!os) fail_domain("save_checkpoint: write failed for ", tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline ParamStore load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail_domain("load_checkpoint: cannot open ", path.string());
  std::string magic, end;
  int version = 0;
  std::size_t count = 0;
  is >> magic >> version >> count;
  if (magic != kCheckpointMagic || version != 1) fail_domain("load_checkpoint: ", path.string(), " is not a checkpoint");
  ParamStore p;
  for (std::size_t i = 0; i < count; ++i) {
    std::string name;
    std::size_t rows = 0, cols = 0;
    if (!(is >> name >> rows >> cols)) fail_domain("load_checkpoint: truncated header in ", path.string());
    p.add(name, rows, cols);
  }
  is >> end;
  if (end != "end") fail_domain("load_checkpoint: malformed header in ", path.string());
  is.get();
  auto v = p.all_values();
  is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
  if (!is) fail_domain("load_checkpoint: truncated payload in ", path.string());
  if (is.peek() != std::char_traits<char>::eof()) fail_domain("load_checkpoint: trailing bytes in ", path.string());
  return p;
}

// ---------------------------------------------------------------------------
// Cached inputs

// Patch means of both images plus everything the trainers need per study.
struct StudyFeatures {
  std::vector<double> prev, cur;
  std::vector<ProgressionLabel> labels;
  int change = 0;
  TokenSequence report;
  std::vector<std::string> report_words, prior_report_words;
};

inline std::vector<StudyFeatures> extract_features(const std::vector<const PairedStudy*>& studies,
                                                   const EncoderConfig& cfg) {
  std::vector<StudyFeatures> out;
  out.reserve(studies.size());
  for (const auto* s : studies) {
    check_image(s->prev, cfg, "prev");
    check_image(s->cur, cfg, "cur");
    StudyFeatures f{patch_means(s->prev, cfg.patch), patch_means(s->cur, cfg.patch), {}, s->change,
                    s->report, s->report_words, s->prior_report_words};
    for (const auto& st : s->findings) f.labels.push_back(st.label);
    out.push_back(std::move(f));
  }
  return out;
}

inline LossParams loss_params_from(const ParamStore& p, double change_weight, double tcl_weight) {
  LossParams lp;
  lp.log_scale = p.scalar(seg::kLogScale);
  lp.bias = p.scalar(seg::kBias);
  lp.swap_log_scale = p.scalar(seg::kSwapLogScale);
  lp.swap_bias = p.scalar(seg::kSwapBias);
  lp.change_weight = change_weight;
  lp.tcl_weight = tcl_weight;
  return lp;
}

inline std::string format_json_line(const nlohmann::json& j) { return j.dump() + "\n"; }

// ---------------------------------------------------------------------------
// Pretraining

enum class PretrainMode { tila, siglip };

inline std::string_view to_string(PretrainMode m) { return m == PretrainMode::tila ? "tila" : "siglip"; }

struct PretrainConfig {
  PretrainMode mode = PretrainMode::tila;
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double lr = 1e-4;
  std::size_t warmup_steps = 100;
  double change_weight = 1.0;  // W
  int activation_epoch = 10;
  friend bool operator==(const PretrainConfig&, const PretrainConfig&) = default;
};

struct PretrainResult {
  ParamStore params;
  std::vector<nlohmann::json> log;
  std::size_t excluded_abstain = 0;
};

// Batches for one epoch. Unchanged examples are dealt round-robin first so
// every batch holds at least one; if there are fewer unchanged examples than
// batches they are reused cyclically.
inline std::vector<std::vector<std::size_t>> pretrain_batches(const std::vector<int>& change, std::size_t batch_size,
                                                              Rng& rng) {
  if (batch_size == 0) fail_config("pretrain: batch_size must be positive");
  std::vector<std::size_t> unchanged, changed;
  for (std::size_t i = 0; i < change.size(); ++i) (change[i] == 0 ? unchanged : changed).push_back(i);
  if (unchanged.empty()) fail_config("pretrain: dataset has no no-change examples; every batch needs one");
  rng.shuffle(unchanged);
  rng.shuffle(changed);
  const std::size_t nb = (change.size() + batch_size - 1) / batch_size;
  std::vector<std::vector<std::size_t>> batches(nb);
  std::size_t k = 0;
  for (auto i : unchanged) batches[k++ % nb].push_back(i);
  for (auto i : changed) batches[k++ % nb].push_back(i);
  for (std::size_t b = unchanged.size(); b < nb; ++b) batches[b].push_back(unchanged[b % unchanged.size()]);
  for (auto& b : batches) rng.shuffle(b);
  return batches;
}

struct PretrainStepStats {
  PretrainLoss loss;
  double siglip_grad_norm = 0.0;
  double change_grad_norm = 0.0;
};

// Loss and gradients (left in params' gradient buffer) for one batch.
inline PretrainStepStats pretrain_batch_gradient(ParamStore& params, const EncoderConfig& ecfg,
                                                 const std::vector<const StudyFeatures*>& items,
                                                 const std::vector<int>& change, double change_weight, int epoch,
                                                 const StageSchedule& schedule) {
  const std::size_t n = items.size(), d = ecfg.proj_dim;
  std::vector<PairActivation> fwd, swp;
  std::vector<TextActivation> txt;
  PretrainBatch batch{Matrix(n, d), Matrix(n, d), Matrix(n, d), change};
  for (std::size_t i = 0; i < n; ++i) {
    fwd.push_back(encode_pair_features(items[i]->prev, items[i]->cur, params, ecfg));
    swp.push_back(encode_pair_features(items[i]->cur, items[i]->prev, params, ecfg));
    txt.push_back(encode_text_activation(items[i]->report, params, ecfg));
    std::copy(fwd[i].embedding.begin(), fwd[i].embedding.end(), batch.v.row(i).begin());
    std::copy(swp[i].embedding.begin(), swp[i].embedding.end(), batch.v_swap.row(i).begin());
    std::copy(txt[i].embedding.begin(), txt[i].embedding.end(), batch.t.row(i).begin());
  }
  PretrainStepStats st;
  st.loss = pretrain_total(batch, loss_params_from(params, change_weight, 0.0), epoch, schedule);

  params.zero_grad();
  const auto& sl = st.loss.siglip_terms;
  for (std::size_t i = 0; i < n; ++i) {
    backprop_pair(fwd[i], sl.grad_v.row(i), params, ecfg);
    backprop_text(txt[i], sl.grad_t.row(i), params, ecfg);
  }
  params.grads(seg::kLogScale)[0] += sl.grad_log_scale;
  params.grads(seg::kBias)[0] += sl.grad_bias;
  st.siglip_grad_norm = grad_norm(params);

  const double w = st.loss.change_weight;
  if (w != 0.0) {
    std::vector<double> siglip_grads(params.all_grads().begin(), params.all_grads().end());
    params.zero_grad();
    const auto& ch = st.loss.change_terms;
    std::vector<double> scaled(d);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t k = 0; k < d; ++k) scaled[k] = w * ch.grad_v(i, k);
      backprop_pair(swp[i], scaled, params, ecfg);
      for (std::size_t k = 0; k < d; ++k) scaled[k] = w * ch.grad_t(i, k);
      backprop_text(txt[i], scaled, params, ecfg);
    }
    params.grads(seg::kSwapLogScale)[0] += w * ch.grad_log_scale;
    params.grads(seg::kSwapBias)[0] += w * ch.grad_bias;
    st.change_grad_norm = grad_norm(params);
    auto g = params.all_grads();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += siglip_grads[i];
  }
  return st;
}

// Studies whose report pair the rule labeller abstains on are dropped; the
// labeller's verdict is the change flag used for training.
inline std::vector<int> pretrain_change_flags(const std::vector<StudyFeatures>& data, std::vector<std::size_t>& kept) {
  std::vector<int> flags;
  kept.clear();
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto c = assign_change_flag(data[i].prior_report_words, data[i].report_words);
    if (c == ChangeLabel::abstain) continue;
    kept.push_back(i);
    flags.push_back(static_cast<int>(c));
  }
  return flags;
}

struct LogOptions {
  bool wall_time = false;  // off by default so logs are byte-reproducible
  std::function<void(const nlohmann::json&)> on_epoch;
};

inline PretrainResult pretrain(const std::vector<StudyFeatures>& train, ParamStore params, const EncoderConfig& ecfg,
                               const PretrainConfig& cfg, const AdamWConfig& opt, std::uint64_t seed,
                               const LogOptions& log_opts = {}) {
  std::vector<std::size_t> kept;
  const auto flags = pretrain_change_flags(train, kept);
  if (kept.empty()) fail_config("pretrain: no studies left after excluding abstained change labels");
  const double w = cfg.mode == PretrainMode::tila ? cfg.change_weight : 0.0;
  const StageSchedule schedule{cfg.activation_epoch, 0};
  const std::size_t batches_per_epoch = (kept.size() + cfg.batch_size - 1) / cfg.batch_size;
  const Schedule lr{cfg.lr, cfg.warmup_steps, cfg.epochs * batches_per_epoch, true};
  lr.validate();

  PretrainResult out;
  out.excluded_abstain = train.size() - kept.size();
  OptimState state = OptimState::for_store(params);
  const SegmentFilter trainable = [&](const std::string& name) {
    if (cfg.mode == PretrainMode::siglip && (name == seg::kSwapLogScale || name == seg::kSwapBias)) return false;
    return name.rfind("cls.", 0) != 0;
  };
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(mix_seed(seed, 0x9e7 + epoch));
    const auto batches = pretrain_batches(flags, cfg.batch_size, rng);
    double s_sig = 0, s_chg = 0, s_tot = 0, s_gsig = 0, s_gchg = 0, w_eff = 0, last_lr = 0;
    for (const auto& b : batches) {
      std::vector<const StudyFeatures*> items;
      std::vector<int> c;
      for (auto k : b) {
        items.push_back(&train[kept[k]]);
        c.push_back(flags[k]);
      }
      if (std::find(c.begin(), c.end(), 0) == c.end()) fail_domain("pretrain: sampler produced a batch without a no-change example");
      const auto st = pretrain_batch_gradient(params, ecfg, items, c, w, static_cast<int>(epoch), schedule);
      last_lr = lr_at(++step, lr);
      adamw_step(params, state, last_lr, opt, trainable);
      s_sig += st.loss.siglip;
      s_chg += st.loss.change;
      s_tot += st.loss.total;
      s_gsig += st.siglip_grad_norm;
      s_gchg += st.change_grad_norm;
      w_eff = st.loss.change_weight;
    }
    const double nb = static_cast<double>(batches.size());
    nlohmann::json rec = {{"epoch", epoch},
                          {"step", step},
                          {"lr", last_lr},
                          {"siglip", s_sig / nb},
                          {"change", s_chg / nb},
                          {"change_weight", w_eff},
                          {"total", s_tot / nb},
                          {"grad_norm_siglip", s_gsig / nb},
                          {"grad_norm_change", s_gchg / nb}};
    if (log_opts.wall_time)
      rec["wall_time_s"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (log_opts.on_epoch) log_opts.on_epoch(rec);
    out.log.push_back(std::move(rec));
  }
  params.zero_grad();
  out.params = std::move(params);
  return out;
}

// ---------------------------------------------------------------------------
// Fine-tuning: one linear 3-way head per finding on top of encode_pair.

namespace seg {
inline constexpr const char* kHeadW = "cls.w";
inline constexpr const char* kHeadB = "cls.b";
}  // namespace seg

enum class FinetuneVariant { baseline_ce, bice, bice_tcl };

inline std::string_view to_string(FinetuneVariant v) {
  switch (v) {
    case FinetuneVariant::baseline_ce: return "baseline-ce";
    case FinetuneVariant::bice: return "bice";
    case FinetuneVariant::bice_tcl: return "bice-tcl";
  }
  return "?";
}

inline FinetuneVariant parse_variant(std::string_view s) {
  if (s == "baseline-ce") return FinetuneVariant::baseline_ce;
  if (s == "bice") return FinetuneVariant::bice;
  if (s == "bice-tcl") return FinetuneVariant::bice_tcl;
  fail_config("finetune: unknown variant '", s, "' (expected baseline-ce, bice or bice-tcl)");
}

struct FinetuneConfig {
  FinetuneVariant variant = FinetuneVariant::bice_tcl;
  std::size_t epochs = 50;
  std::size_t batch_size = 32;
  double lr = 1e-5;
  double warmup_fraction = 0.05;
  double tcl_weight = 50.0;  // lambda
  int activation_epoch = 20;
  friend bool operator==(const FinetuneConfig&, const FinetuneConfig&) = default;
};

inline void add_heads(ParamStore& params, std::size_t findings, const EncoderConfig& ecfg, std::uint64_t seed) {
  if (params.contains(seg::kHeadW)) fail_domain("add_heads: checkpoint already carries classifier heads");
  params.add(seg::kHeadW, 3 * findings, ecfg.proj_dim);
  params.add(seg::kHeadB, 1, 3 * findings);
  Rng rng(mix_seed(seed, 0xc15));
  const double scale = 1.0 / std::sqrt(static_cast<double>(ecfg.proj_dim));
  for (double& v : params.values(seg::kHeadW)) v = rng.uniform(-scale, scale);
}

inline std::size_t head_count(const ParamStore& params) { return params.segment(seg::kHeadB).cols / 3; }

inline Logits head_logits(const ParamStore& params, std::size_t finding, std::span<const double> v) {
  const std::size_t d = v.size();
  const auto w = params.values(seg::kHeadW);
  const auto b = params.values(seg::kHeadB);
  Logits z{};
  for (std::size_t k = 0; k < 3; ++k) {
    const std::size_t row = 3 * finding + k;
    z[k] = b[row] + dot(w.subspan(row * d, d), v);
  }
  return z;
}

// dL/dv for one finding's head, accumulating head gradients.
inline void head_backward(ParamStore& params, std::size_t finding, std::span<const double> v, const Logits& dz,
                          std::span<double> dv) {
  const std::size_t d = v.size();
  const auto w = params.values(seg::kHeadW);
  auto gw = params.grads(seg::kHeadW);
  auto gb = params.grads(seg::kHeadB);
  for (std::size_t k = 0; k < 3; ++k) {
    const std::size_t row = 3 * finding + k;
    gb[row] += dz[k];
    for (std::size_t j = 0; j < d; ++j) {
      gw[row * d + j] += dz[k] * v[j];
      dv[j] += dz[k] * w[row * d + j];
    }
  }
}

// Per-finding class probabilities for an ordered pair of patch-feature sets.
inline std::vector<ProbTriple> classify_pair(const ParamStore& params, const EncoderConfig& ecfg,
                                             std::span<const double> prev, std::span<const double> cur) {
  const auto a = encode_pair_features(prev, cur, params, ecfg);
  std::vector<ProbTriple> out;
  for (std::size_t f = 0; f < head_count(params); ++f) out.push_back(softmax3(head_logits(params, f, a.embedding)));
  return out;
}

struct FinetuneStepStats {
  double total = 0.0;
  double classification = 0.0;  // BiCE, or forward CE for the baseline
  double tcl = 0.0;
  double tcl_weight = 0.0;
};

// Batch loss, averaged over findings, with gradients left in params. The
// baseline never encodes the reversed pair.
inline FinetuneStepStats finetune_batch_gradient(ParamStore& params, const EncoderConfig& ecfg,
                                                 const std::vector<const StudyFeatures*>& items,
                                                 FinetuneVariant variant, double tcl_weight, int epoch,
                                                 const StageSchedule& schedule) {
  const std::size_t n = items.size(), d = ecfg.proj_dim, nf = head_count(params);
  if (n == 0) fail_domain("finetune: empty batch");
  const bool bidirectional = variant != FinetuneVariant::baseline_ce;
  std::vector<PairActivation> fwd, bwd;
  for (const auto* it : items) {
    if (it->labels.size() != nf) fail_domain("finetune: study has ", it->labels.size(), " labels for ", nf, " heads");
    fwd.push_back(encode_pair_features(it->prev, it->cur, params, ecfg));
    if (bidirectional) bwd.push_back(encode_pair_features(it->cur, it->prev, params, ecfg));
  }
  params.zero_grad();
  std::vector<std::vector<double>> dv_f(n, std::vector<double>(d)), dv_b(bidirectional ? n : 0, std::vector<double>(d));
  FinetuneStepStats st;
  const double inv_f = 1.0 / static_cast<double>(nf);
  const double lambda = variant == FinetuneVariant::bice_tcl ? tcl_weight : 0.0;
  for (std::size_t f = 0; f < nf; ++f) {
    std::vector<Logits> zf(n), zb(bidirectional ? n : 0);
    std::vector<ProgressionLabel> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      zf[i] = head_logits(params, f, fwd[i].embedding);
      if (bidirectional) zb[i] = head_logits(params, f, bwd[i].embedding);
      y[i] = items[i]->labels[f];
    }
    if (bidirectional) {
      LossParams lp;
      lp.tcl_weight = lambda;
      const auto l = finetune_total(zf, zb, y, lp, epoch, schedule);
      st.total += l.total * inv_f;
      st.classification += l.bice * inv_f;
      st.tcl += l.tcl * inv_f;
      st.tcl_weight = l.tcl_weight;
      for (std::size_t i = 0; i < n; ++i) {
        Logits gf, gb;
        for (std::size_t k = 0; k < 3; ++k) {
          gf[k] = l.grad_fwd[i][k] * inv_f;
          gb[k] = l.grad_bwd[i][k] * inv_f;
        }
        head_backward(params, f, fwd[i].embedding, gf, dv_f[i]);
        head_backward(params, f, bwd[i].embedding, gb, dv_b[i]);
      }
    } else {
      const double inv_b = 1.0 / static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i) {
        const auto l = forward_ce_loss(zf[i], y[i]);
        st.classification += l.value * inv_b * inv_f;
        Logits g;
        for (std::size_t k = 0; k < 3; ++k) g[k] = l.grad_fwd[k] * inv_b * inv_f;
        head_backward(params, f, fwd[i].embedding, g, dv_f[i]);
      }
      st.total = st.classification;
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    backprop_pair(fwd[i], dv_f[i], params, ecfg);
    if (bidirectional) backprop_pair(bwd[i], dv_b[i], params, ecfg);
  }
  return st;
}

// Fine-tuning updates the image encoder and the heads; the text tower and
// the contrastive logit scalars stay frozen.
inline bool finetune_trainable(const std::string& name) { return is_image_segment(name) || name.rfind("cls.", 0) == 0; }

struct FinetuneResult {
  ParamStore params;
  std::vector<nlohmann::json> log;
};

inline FinetuneResult finetune(const std::vector<StudyFeatures>& train, ParamStore params, const EncoderConfig& ecfg,
                               std::size_t findings, const FinetuneConfig& cfg, const AdamWConfig& opt,
                               std::uint64_t seed, const LogOptions& log_opts = {}) {
  if (train.empty()) fail_config("finetune: empty training split");
  if (cfg.batch_size == 0) fail_config("finetune: batch_size must be positive");
  if (!params.contains(seg::kHeadW)) add_heads(params, findings, ecfg, seed);
  const std::size_t per_epoch = (train.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total = cfg.epochs * per_epoch;
  const Schedule lr{cfg.lr, static_cast<std::size_t>(std::floor(cfg.warmup_fraction * static_cast<double>(total))),
                    total, true};
  lr.validate();
  const StageSchedule schedule{0, cfg.activation_epoch};
  OptimState state = OptimState::for_store(params);
  FinetuneResult out;
  std::vector<std::size_t> order(train.size());
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(mix_seed(seed, 0xf1e + epoch));
    rng.shuffle(order);
    double s_tot = 0, s_cls = 0, s_tcl = 0, s_g = 0, lam = 0, last_lr = 0;
    std::size_t nb = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      std::vector<const StudyFeatures*> items;
      for (std::size_t k = b; k < std::min(order.size(), b + cfg.batch_size); ++k) items.push_back(&train[order[k]]);
      const auto st = finetune_batch_gradient(params, ecfg, items, cfg.variant, cfg.tcl_weight, static_cast<int>(epoch), schedule);
      last_lr = lr_at(++step, lr);
      adamw_step(params, state, last_lr, opt, finetune_trainable);
      s_tot += st.total;
      s_cls += st.classification;
      s_tcl += st.tcl;
      s_g += grad_norm(params);
      lam = st.tcl_weight;
      ++nb;
    }
    const double dn = static_cast<double>(nb);
    nlohmann::json rec = {{"epoch", epoch},   {"step", step},          {"lr", last_lr},
                          {"variant", std::string(to_string(cfg.variant))},
                          {"classification", s_cls / dn},   {"tcl", s_tcl / dn},
                          {"tcl_weight", lam}, {"total", s_tot / dn}, {"grad_norm", s_g / dn}};
    if (log_opts.wall_time)
      rec["wall_time_s"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (log_opts.on_epoch) log_opts.on_epoch(rec);
    out.log.push_back(std::move(rec));
  }
  params.zero_grad();
  out.params = std::move(params);
  return out;
}

// ---------------------------------------------------------------------------
// Binary change screening: logistic regression on frozen embeddings.

struct ProbeConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 32;
  double lr = 1e-2;
  friend bool operator==(const ProbeConfig&, const ProbeConfig&) = default;
};

struct ProbeResult {
  std::vector<double> weights;
  double bias = 0.0;
  double auc = 0.0;
  double train_loss = 0.0;
};

inline double probe_score(const ProbeResult& p, std::span<const double> x) { return dot(p.weights, x) + p.bias; }

inline void require_both_classes(std::span<const int> labels, const char* what) {
  bool pos = false, neg = false;
  for (int y : labels) {
    if (y != 0 && y != 1) fail_domain(what, ": binary label ", y, " not in {0,1}");
    (y ? pos : neg) = true;
  }
  if (!pos || !neg) fail_domain(what, ": both classes are required");
}

// Trains on (train_x, train_y) with AdamW and a constant learning rate and
// reports AUC on (test_x, test_y).
inline ProbeResult linear_probe_binary(const std::vector<EmbeddingVector>& train_x, const std::vector<int>& train_y,
                                       const std::vector<EmbeddingVector>& test_x, const std::vector<int>& test_y,
                                       const ProbeConfig& cfg, const AdamWConfig& opt, std::uint64_t seed) {
  if (train_x.empty() || train_x.size() != train_y.size() || test_x.size() != test_y.size())
    fail_domain("linear_probe_binary: inputs and labels must be non-empty and aligned");
  require_both_classes(train_y, "linear_probe_binary (train)");
  require_both_classes(test_y, "linear_probe_binary (test)");
  const std::size_t d = train_x.front().size();
  ParamStore p;
  p.add("probe.w", 1, d);
  p.add("probe.b", 1, 1);
  OptimState state = OptimState::for_store(p);
  std::vector<std::size_t> order(train_x.size());
  double last_loss = 0.0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(mix_seed(seed, 0x960 + epoch));
    rng.shuffle(order);
    double loss = 0.0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const std::size_t e = std::min(order.size(), b + cfg.batch_size);
      const double inv = 1.0 / static_cast<double>(e - b);
      p.zero_grad();
      auto w = p.values("probe.w");
      auto gw = p.grads("probe.w");
      for (std::size_t k = b; k < e; ++k) {
        const auto& x = train_x[order[k]];
        const double z = dot(w, x) + p.scalar("probe.b");
        const double y = train_y[order[k]];
        loss -= (y > 0 ? log_sigmoid(z) : log_sigmoid(-z)) / static_cast<double>(order.size());
        const double g = (stable_sigmoid(z) - y) * inv;
        for (std::size_t j = 0; j < d; ++j) gw[j] += g * x[j];
        p.grads("probe.b")[0] += g;
      }
      adamw_step(p, state, cfg.lr, opt);
    }
    last_loss = loss;
  }
  ProbeResult r;
  r.weights.assign(p.values("probe.w").begin(), p.values("probe.w").end());
  r.bias = p.scalar("probe.b");
  r.train_loss = last_loss;
  std::vector<double> scores;
  for (const auto& x : test_x) scores.push_back(probe_score(r, x));
  r.auc = auc(scores, test_y);
  return r;
}

}  // namespace tila
