#pragma once

// Toy trainable encoders: a paired-image encoder with an explicit temporal
// difference channel, and a bag-of-tokens text encoder. Both end in an L2
// normalisation so their outputs live on the same unit sphere.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tila/numerics.hpp"

namespace tila {

struct Image {
  std::size_t side = 0;
  std::vector<double> pixels;  // row-major, side*side

  double at(std::size_t r, std::size_t c) const { return pixels[r * side + c]; }
  double& at(std::size_t r, std::size_t c) { return pixels[r * side + c]; }
  friend bool operator==(const Image&, const Image&) = default;
};

using EmbeddingVector = std::vector<double>;

inline constexpr std::size_t kMaxTokens = 256;

struct TokenSequence {
  std::vector<std::uint32_t> ids;
  friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

struct EncoderConfig {
  std::size_t image_side = 64;
  std::size_t patch = 8;
  std::size_t hidden = 32;       // per-image patch embedding width
  std::size_t mlp = 64;          // width of the nonlinear layer after concatenation
  std::size_t proj_dim = 128;    // shared embedding dimension D
  std::size_t vocab_size = 64;
  std::size_t text_hidden = 32;  // token embedding width
  std::size_t text_mlp = 64;
  std::uint32_t delimiter_token = 0;  // sentence boundary for pair features
  std::uint64_t seed = 0;

  std::size_t patches() const { return (image_side / patch) * (image_side / patch); }
  std::size_t pair_table_rows() const { return vocab_size * (vocab_size + 1) / 2; }

  void validate() const {
    if (patch == 0 || image_side == 0 || image_side % patch != 0)
      fail_domain("EncoderConfig: image side ", image_side, " not divisible by patch ", patch);
    if (proj_dim < 2) fail_domain("EncoderConfig: projection dim must be >= 2");
    if (hidden == 0 || mlp == 0 || text_hidden == 0 || text_mlp == 0)
      fail_domain("EncoderConfig: widths must be positive");
    if (vocab_size == 0 || delimiter_token >= vocab_size)
      fail_domain("EncoderConfig: delimiter token outside vocabulary");
  }
};

namespace seg {
inline constexpr const char* kPatchW = "image.patch_w";
inline constexpr const char* kPatchB = "image.patch_b";
inline constexpr const char* kImageW1 = "image.w1";
inline constexpr const char* kImageB1 = "image.b1";
inline constexpr const char* kImageProj = "image.proj";
inline constexpr const char* kTokenEmb = "text.token_emb";
inline constexpr const char* kPairEmb = "text.pair_emb";
inline constexpr const char* kTextW1 = "text.w1";
inline constexpr const char* kTextB1 = "text.b1";
inline constexpr const char* kTextProj = "text.proj";
inline constexpr const char* kLogScale = "logit.log_scale";
inline constexpr const char* kBias = "logit.bias";
inline constexpr const char* kSwapLogScale = "logit.swap_log_scale";
inline constexpr const char* kSwapBias = "logit.swap_bias";
}  // namespace seg

inline constexpr double kInitLogScale = 2.302585092994045684;  // log 10
inline constexpr double kInitBias = -10.0;

inline bool is_image_segment(const std::string& name) { return name.rfind("image.", 0) == 0; }
inline bool is_text_segment(const std::string& name) { return name.rfind("text.", 0) == 0; }

inline ParamStore init_params(const EncoderConfig& cfg) {
  cfg.validate();
  ParamStore store;
  const std::size_t h = cfg.hidden;
  store.add(seg::kPatchW, h, cfg.patches());
  store.add(seg::kPatchB, 1, h);
  store.add(seg::kImageW1, cfg.mlp, 3 * h);
  store.add(seg::kImageB1, 1, cfg.mlp);
  store.add(seg::kImageProj, cfg.proj_dim, cfg.mlp);
  store.add(seg::kTokenEmb, cfg.vocab_size, cfg.text_hidden);
  store.add(seg::kPairEmb, cfg.pair_table_rows(), cfg.text_hidden);
  store.add(seg::kTextW1, cfg.text_mlp, cfg.text_hidden);
  store.add(seg::kTextB1, 1, cfg.text_mlp);
  store.add(seg::kTextProj, cfg.proj_dim, cfg.text_mlp);
  store.add(seg::kLogScale, 1, 1, kInitLogScale);
  store.add(seg::kBias, 1, 1, kInitBias);
  store.add(seg::kSwapLogScale, 1, 1, kInitLogScale);
  store.add(seg::kSwapBias, 1, 1, kInitBias);

  // Weight matrices: U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases start at zero.
  // Embedding tables use fan_in = 1 scaled down to keep the mean-pool small.
  Rng rng(mix_seed(cfg.seed, 0x1417));
  for (const auto& s : store.segments()) {
    if (s.name.rfind("logit.", 0) == 0) continue;
    const bool bias = s.rows == 1 && (s.name == seg::kPatchB || s.name == seg::kImageB1 || s.name == seg::kTextB1);
    if (bias) continue;
    const bool table = s.name == seg::kTokenEmb || s.name == seg::kPairEmb;
    const double scale = table ? 1.0 : 1.0 / std::sqrt(static_cast<double>(s.cols));
    for (double& v : store.values(s.name)) v = rng.uniform(-scale, scale);
  }
  return store;
}

// ---------------------------------------------------------------------------
// Image side

// Mean intensity of each non-overlapping patch, row-major over the patch grid.
inline std::vector<double> patch_means(const Image& img, std::size_t patch) {
  if (patch == 0 || img.side % patch != 0) fail_domain("patch_means: side ", img.side, " not divisible by ", patch);
  if (img.pixels.size() != img.side * img.side) fail_domain("patch_means: pixel buffer size mismatch");
  const std::size_t g = img.side / patch;
  std::vector<double> out(g * g, 0.0);
  const double inv = 1.0 / static_cast<double>(patch * patch);
  for (std::size_t r = 0; r < img.side; ++r)
    for (std::size_t c = 0; c < img.side; ++c) out[(r / patch) * g + c / patch] += img.at(r, c);
  for (double& v : out) v *= inv;
  return out;
}

// Intermediate values of one encode_pair evaluation, kept for backprop.
struct PairActivation {
  std::vector<double> prev_features, cur_features;
  std::vector<double> concat;  // [h_prev, h_cur, h_cur - h_prev]
  std::vector<double> hidden;  // tanh output
  std::vector<double> raw;     // pre-normalisation projection
  double norm = 0.0;
  EmbeddingVector embedding;
};

inline PairActivation encode_pair_features(std::span<const double> prev, std::span<const double> cur,
                                           const ParamStore& params, const EncoderConfig& cfg) {
  const std::size_t p = cfg.patches(), h = cfg.hidden;
  if (prev.size() != p || cur.size() != p) fail_domain("encode_pair: expected ", p, " patch features");
  PairActivation a;
  a.prev_features.assign(prev.begin(), prev.end());
  a.cur_features.assign(cur.begin(), cur.end());

  const auto pw = params.values(seg::kPatchW);
  const auto pb = params.values(seg::kPatchB);
  a.concat.assign(3 * h, 0.0);
  std::span<double> hp(a.concat.data(), h), hc(a.concat.data() + h, h), hd(a.concat.data() + 2 * h, h);
  std::copy(pb.begin(), pb.end(), hp.begin());
  std::copy(pb.begin(), pb.end(), hc.begin());
  gemv_add(pw, h, p, prev, hp);
  gemv_add(pw, h, p, cur, hc);
  for (std::size_t i = 0; i < h; ++i) hd[i] = hc[i] - hp[i];

  const auto b1 = params.values(seg::kImageB1);
  a.hidden.assign(b1.begin(), b1.end());
  gemv_add(params.values(seg::kImageW1), cfg.mlp, 3 * h, a.concat, a.hidden);
  for (double& v : a.hidden) v = std::tanh(v);

  a.raw.assign(cfg.proj_dim, 0.0);
  gemv_add(params.values(seg::kImageProj), cfg.proj_dim, cfg.mlp, a.hidden, a.raw);
  a.norm = l2_norm(a.raw);
  a.embedding = l2_normalize(a.raw);
  return a;
}

// Accumulates dL/dparams into params' gradient buffer given dL/d(embedding).
inline void backprop_pair(const PairActivation& a, std::span<const double> d_embedding, ParamStore& params,
                          const EncoderConfig& cfg) {
  const std::size_t p = cfg.patches(), h = cfg.hidden;
  const auto d_raw = l2_normalize_backward(a.embedding, a.norm, d_embedding);

  outer_add(params.grads(seg::kImageProj), cfg.proj_dim, cfg.mlp, d_raw, a.hidden);
  std::vector<double> d_hidden(cfg.mlp, 0.0);
  gemv_transposed_add(params.values(seg::kImageProj), cfg.proj_dim, cfg.mlp, d_raw, d_hidden);
  for (std::size_t i = 0; i < cfg.mlp; ++i) d_hidden[i] *= 1.0 - a.hidden[i] * a.hidden[i];

  outer_add(params.grads(seg::kImageW1), cfg.mlp, 3 * h, d_hidden, a.concat);
  auto gb1 = params.grads(seg::kImageB1);
  for (std::size_t i = 0; i < cfg.mlp; ++i) gb1[i] += d_hidden[i];

  std::vector<double> d_concat(3 * h, 0.0);
  gemv_transposed_add(params.values(seg::kImageW1), cfg.mlp, 3 * h, d_hidden, d_concat);
  std::vector<double> d_prev(h), d_cur(h);
  for (std::size_t i = 0; i < h; ++i) {
    d_prev[i] = d_concat[i] - d_concat[2 * h + i];
    d_cur[i] = d_concat[h + i] + d_concat[2 * h + i];
  }
  auto gpw = params.grads(seg::kPatchW);
  outer_add(gpw, h, p, d_prev, a.prev_features);
  outer_add(gpw, h, p, d_cur, a.cur_features);
  auto gpb = params.grads(seg::kPatchB);
  for (std::size_t i = 0; i < h; ++i) gpb[i] += d_prev[i] + d_cur[i];
}

inline void check_image(const Image& img, const EncoderConfig& cfg, const char* which) {
  if (img.side != cfg.image_side || img.pixels.size() != cfg.image_side * cfg.image_side)
    fail_domain("encode_pair: ", which, " image is ", img.side, "x", img.side, ", expected ", cfg.image_side);
}

inline EmbeddingVector encode_pair(const Image& prev, const Image& cur, const ParamStore& params,
                                   const EncoderConfig& cfg) {
  check_image(prev, cfg, "prev");
  check_image(cur, cfg, "cur");
  return encode_pair_features(patch_means(prev, cfg.patch), patch_means(cur, cfg.patch), params, cfg).embedding;
}

// ---------------------------------------------------------------------------
// Text side: mean of token embeddings plus mean of within-sentence token-pair
// embeddings, then tanh layer, projection and normalisation.

inline std::size_t pair_index(std::uint32_t a, std::uint32_t b, std::size_t vocab) {
  if (a > b) std::swap(a, b);
  const std::size_t lo = a, hi = b;
  // Row-major upper triangle including the diagonal.
  return lo * vocab - (lo * (lo == 0 ? 0 : lo - 1)) / 2 + (hi - lo);
}

// Unordered pairs of positions (i<j) that share a sentence; the delimiter
// token closes a sentence and takes part in its pairs.
inline std::vector<std::size_t> sentence_pairs(const TokenSequence& tokens, const EncoderConfig& cfg) {
  std::vector<std::size_t> out;
  std::size_t start = 0;
  const auto& ids = tokens.ids;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    for (std::size_t k = start; k < i; ++k) out.push_back(pair_index(ids[k], ids[i], cfg.vocab_size));
    if (ids[i] == cfg.delimiter_token) start = i + 1;
  }
  return out;
}

struct TextActivation {
  std::vector<std::uint32_t> tokens;
  std::vector<std::size_t> pairs;
  std::vector<double> pooled;
  std::vector<double> hidden;
  std::vector<double> raw;
  double norm = 0.0;
  EmbeddingVector embedding;
};

inline void check_tokens(const TokenSequence& tokens, const EncoderConfig& cfg) {
  if (tokens.ids.empty()) fail_domain("encode_text: empty token sequence");
  if (tokens.ids.size() > kMaxTokens) fail_domain("encode_text: sequence longer than ", kMaxTokens);
  for (auto t : tokens.ids)
    if (t >= cfg.vocab_size) fail_domain("encode_text: token ", t, " outside vocabulary of ", cfg.vocab_size);
}

inline TextActivation encode_text_activation(const TokenSequence& tokens, const ParamStore& params,
                                             const EncoderConfig& cfg) {
  check_tokens(tokens, cfg);
  const std::size_t w = cfg.text_hidden;
  TextActivation a;
  a.tokens = tokens.ids;
  a.pairs = sentence_pairs(tokens, cfg);
  a.pooled.assign(w, 0.0);

  const auto emb = params.values(seg::kTokenEmb);
  const double inv_n = 1.0 / static_cast<double>(a.tokens.size());
  for (auto t : a.tokens)
    for (std::size_t k = 0; k < w; ++k) a.pooled[k] += emb[t * w + k] * inv_n;
  if (!a.pairs.empty()) {
    const auto pe = params.values(seg::kPairEmb);
    const double inv_p = 1.0 / static_cast<double>(a.pairs.size());
    for (auto q : a.pairs)
      for (std::size_t k = 0; k < w; ++k) a.pooled[k] += pe[q * w + k] * inv_p;
  }

  const auto b1 = params.values(seg::kTextB1);
  a.hidden.assign(b1.begin(), b1.end());
  gemv_add(params.values(seg::kTextW1), cfg.text_mlp, w, a.pooled, a.hidden);
  for (double& v : a.hidden) v = std::tanh(v);
  a.raw.assign(cfg.proj_dim, 0.0);
  gemv_add(params.values(seg::kTextProj), cfg.proj_dim, cfg.text_mlp, a.hidden, a.raw);
  a.norm = l2_norm(a.raw);
  a.embedding = l2_normalize(a.raw);
  return a;
}

inline void backprop_text(const TextActivation& a, std::span<const double> d_embedding, ParamStore& params,
                          const EncoderConfig& cfg) {
  const std::size_t w = cfg.text_hidden;
  const auto d_raw = l2_normalize_backward(a.embedding, a.norm, d_embedding);
  outer_add(params.grads(seg::kTextProj), cfg.proj_dim, cfg.text_mlp, d_raw, a.hidden);
  std::vector<double> d_hidden(cfg.text_mlp, 0.0);
  gemv_transposed_add(params.values(seg::kTextProj), cfg.proj_dim, cfg.text_mlp, d_raw, d_hidden);
  for (std::size_t i = 0; i < cfg.text_mlp; ++i) d_hidden[i] *= 1.0 - a.hidden[i] * a.hidden[i];
  outer_add(params.grads(seg::kTextW1), cfg.text_mlp, w, d_hidden, a.pooled);
  auto gb1 = params.grads(seg::kTextB1);
  for (std::size_t i = 0; i < cfg.text_mlp; ++i) gb1[i] += d_hidden[i];

  std::vector<double> d_pooled(w, 0.0);
  gemv_transposed_add(params.values(seg::kTextW1), cfg.text_mlp, w, d_hidden, d_pooled);
  auto gemb = params.grads(seg::kTokenEmb);
  const double inv_n = 1.0 / static_cast<double>(a.tokens.size());
  for (auto t : a.tokens)
    for (std::size_t k = 0; k < w; ++k) gemb[t * w + k] += d_pooled[k] * inv_n;
  if (!a.pairs.empty()) {
    auto gpe = params.grads(seg::kPairEmb);
    const double inv_p = 1.0 / static_cast<double>(a.pairs.size());
    for (auto q : a.pairs)
      for (std::size_t k = 0; k < w; ++k) gpe[q * w + k] += d_pooled[k] * inv_p;
  }
}

inline EmbeddingVector encode_text(const TokenSequence& tokens, const ParamStore& params, const EncoderConfig& cfg) {
  return encode_text_activation(tokens, params, cfg).embedding;
}

}  // namespace tila
