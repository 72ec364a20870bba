#pragma once

// Run configuration: JSON parsing with unknown-key rejection, serialisation
// and provenance notes for desk-scale defaults.

#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tila/encoders.hpp"
#include "tila/numerics.hpp"
#include "tila/synthdata.hpp"
#include "tila/training.hpp"

namespace tila {

enum class AblationTarget { lambda, change_weight };

struct AblationConfig {
  AblationTarget target = AblationTarget::lambda;
  std::vector<double> tcl_weights = {0.0, 1.0, 50.0, 100.0};
  std::vector<double> change_weights = {0.0, 0.5, 1.0, 2.0};
  friend bool operator==(const AblationConfig&, const AblationConfig&) = default;
};

struct RunConfig {
  std::uint64_t seed = 0;
  DataConfig data;
  EncoderConfig encoder;
  PretrainConfig pretrain;
  FinetuneConfig finetune;
  AdamWConfig optimizer;
  ProbeConfig probe;
  AblationConfig ablate;
  bool log_wall_time = false;

  RunConfig() {
    encoder.vocab_size = Vocabulary::standard().size();
    data.followup = {0.8, 0.15, 0.15};
    pretrain.lr = 1e-3;
    finetune.lr = 1e-4;
  }

  friend bool operator==(const RunConfig& a, const RunConfig& b) {
    return a.seed == b.seed && a.data == b.data && a.encoder.image_side == b.encoder.image_side &&
           a.encoder.patch == b.encoder.patch && a.encoder.hidden == b.encoder.hidden &&
           a.encoder.mlp == b.encoder.mlp && a.encoder.proj_dim == b.encoder.proj_dim &&
           a.encoder.vocab_size == b.encoder.vocab_size && a.encoder.text_hidden == b.encoder.text_hidden &&
           a.encoder.text_mlp == b.encoder.text_mlp && a.pretrain == b.pretrain && a.finetune == b.finetune &&
           a.optimizer == b.optimizer && a.probe == b.probe && a.ablate == b.ablate &&
           a.log_wall_time == b.log_wall_time;
  }
};

// Keys whose default departs from the full-scale setting, with the reason.
inline const std::map<std::string, std::string>& provenance_notes() {
  static const std::map<std::string, std::string> notes = {
      {"pretrain.batch_size", "32 instead of 144: desk-scale batch"},
      {"pretrain.lr", "1e-3 instead of 1e-4: about 1.9k optimiser steps here, far fewer than the full-scale run"},
      {"finetune.lr", "1e-4 instead of 1e-5: at 1e-5 neither head leaves the underfit regime within 50 short epochs"},
      {"finetune.batch_size", "32: not stated for fine-tuning; matches pretraining"},
      {"optimizer", "AdamW constants unstated; standard defaults"},
      {"data", "synthetic benchmark replaces clinical data (2000 train / 500 test, 64x64)"},
      {"data.followup", "follow-up films use a portable-exposure transform (gain 0.8, offset 0.15, tilt 0.15), independent of labels"},
      {"encoder", "small patch-pooling image tower and bag-of-tokens text tower replace the clinical backbones"},
  };
  return notes;
}

namespace detail {

class ConfigReader {
 public:
  ConfigReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail_config("config: '", path_.empty() ? "<root>" : path_, "' must be an object");
  }

  template <typename T>
  void read(const std::string& key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      fail_config("config: key '", full(key), "' has the wrong type: ", e.what());
    }
  }

  void section(const std::string& key, const std::function<void(ConfigReader&)>& fn) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    ConfigReader sub(j_.at(key), full(key));
    fn(sub);
    sub.finish();
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) fail_config("config: unknown key '", full(k), "'");
  }

  std::string full(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline void validate(const RunConfig& c) {
  auto positive = [](std::size_t v, const char* key) {
    if (v == 0) fail_config("config: '", key, "' must be positive");
  };
  positive(c.data.n_train, "data.n_train");
  positive(c.data.n_test, "data.n_test");
  if (!(c.data.noise >= 0.0 && c.data.noise <= 0.2)) fail_config("config: 'data.noise' must lie in [0, 0.2]");
  if (!(c.data.stability_band > 0.0 && c.data.stability_band < c.data.presence_threshold && c.data.presence_threshold < 1.0))
    fail_config("config: need 0 < 'data.stability_band' < 'data.presence_threshold' < 1");
  if (!(c.data.followup.gain > 0.0)) fail_config("config: 'data.followup.gain' must be positive");
  if (c.data.image_side != c.encoder.image_side)
    fail_config("config: 'data.image_side' (", c.data.image_side, ") differs from 'encoder.image_side' (", c.encoder.image_side, ")");
  try {
    c.encoder.validate();
  } catch (const DomainError& e) {
    fail_config("config: encoder: ", e.what());
  }
  if (c.encoder.vocab_size < Vocabulary::standard().size())
    fail_config("config: 'encoder.vocab_size' must be at least the lexicon size ", Vocabulary::standard().size());
  positive(c.pretrain.epochs, "pretrain.epochs");
  positive(c.pretrain.batch_size, "pretrain.batch_size");
  positive(c.finetune.epochs, "finetune.epochs");
  positive(c.finetune.batch_size, "finetune.batch_size");
  positive(c.probe.epochs, "probe.epochs");
  positive(c.probe.batch_size, "probe.batch_size");
  if (!(c.pretrain.lr > 0.0)) fail_config("config: 'pretrain.lr' must be positive");
  if (!(c.finetune.lr > 0.0)) fail_config("config: 'finetune.lr' must be positive");
  if (!(c.probe.lr > 0.0)) fail_config("config: 'probe.lr' must be positive");
  if (!(c.pretrain.change_weight >= 0.0)) fail_config("config: 'pretrain.W' must be >= 0");
  if (!(c.finetune.tcl_weight >= 0.0)) fail_config("config: 'finetune.lambda' (λ) must be >= 0");
  if (!(c.finetune.warmup_fraction >= 0.0 && c.finetune.warmup_fraction < 1.0))
    fail_config("config: 'finetune.warmup_fraction' must lie in [0, 1)");
  if (c.pretrain.activation_epoch < 0 || static_cast<std::size_t>(c.pretrain.activation_epoch) >= c.pretrain.epochs)
    fail_config("config: 'pretrain.activation_epoch' must be below 'pretrain.epochs'");
  if (c.finetune.activation_epoch < 0 || static_cast<std::size_t>(c.finetune.activation_epoch) >= c.finetune.epochs)
    fail_config("config: 'finetune.activation_epoch' must be below 'finetune.epochs'");
  for (double l : c.ablate.tcl_weights)
    if (!(l >= 0.0)) fail_config("config: 'ablate.lambda' (λ) values must be >= 0");
  for (double w : c.ablate.change_weights)
    if (!(w >= 0.0)) fail_config("config: 'ablate.W' values must be >= 0");
  const auto& o = c.optimizer;
  if (!(o.beta1 >= 0.0 && o.beta1 < 1.0 && o.beta2 >= 0.0 && o.beta2 < 1.0 && o.eps > 0.0 && o.weight_decay >= 0.0))
    fail_config("config: optimizer constants out of range");
}

inline RunConfig parse_config(const nlohmann::json& j) {
  RunConfig c;
  detail::ConfigReader r(j, "");
  r.read("seed", c.seed);
  r.read("log_wall_time", c.log_wall_time);
  r.section("data", [&](detail::ConfigReader& d) {
    d.read("n_train", c.data.n_train);
    d.read("n_test", c.data.n_test);
    d.read("image_side", c.data.image_side);
    d.read("noise", c.data.noise);
    d.read("presence_threshold", c.data.presence_threshold);
    d.read("stability_band", c.data.stability_band);
    d.section("followup", [&](detail::ConfigReader& f) {
      f.read("gain", c.data.followup.gain);
      f.read("offset", c.data.followup.offset);
      f.read("tilt", c.data.followup.tilt);
    });
  });
  r.section("encoder", [&](detail::ConfigReader& e) {
    e.read("image_side", c.encoder.image_side);
    e.read("patch", c.encoder.patch);
    e.read("hidden", c.encoder.hidden);
    e.read("mlp", c.encoder.mlp);
    e.read("proj_dim", c.encoder.proj_dim);
    e.read("vocab_size", c.encoder.vocab_size);
    e.read("text_hidden", c.encoder.text_hidden);
    e.read("text_mlp", c.encoder.text_mlp);
  });
  r.section("pretrain", [&](detail::ConfigReader& p) {
    std::string mode(to_string(c.pretrain.mode));
    p.read("mode", mode);
    if (mode == "tila") c.pretrain.mode = PretrainMode::tila;
    else if (mode == "siglip") c.pretrain.mode = PretrainMode::siglip;
    else fail_config("config: 'pretrain.mode' must be tila or siglip, got '", mode, "'");
    p.read("epochs", c.pretrain.epochs);
    p.read("batch_size", c.pretrain.batch_size);
    p.read("lr", c.pretrain.lr);
    p.read("warmup_steps", c.pretrain.warmup_steps);
    p.read("W", c.pretrain.change_weight);
    p.read("activation_epoch", c.pretrain.activation_epoch);
  });
  r.section("finetune", [&](detail::ConfigReader& f) {
    std::string variant(to_string(c.finetune.variant));
    f.read("variant", variant);
    c.finetune.variant = parse_variant(variant);
    f.read("epochs", c.finetune.epochs);
    f.read("batch_size", c.finetune.batch_size);
    f.read("lr", c.finetune.lr);
    f.read("warmup_fraction", c.finetune.warmup_fraction);
    f.read("lambda", c.finetune.tcl_weight);
    f.read("activation_epoch", c.finetune.activation_epoch);
  });
  r.section("optimizer", [&](detail::ConfigReader& o) {
    o.read("beta1", c.optimizer.beta1);
    o.read("beta2", c.optimizer.beta2);
    o.read("eps", c.optimizer.eps);
    o.read("weight_decay", c.optimizer.weight_decay);
  });
  r.section("probe", [&](detail::ConfigReader& p) {
    p.read("epochs", c.probe.epochs);
    p.read("batch_size", c.probe.batch_size);
    p.read("lr", c.probe.lr);
  });
  r.section("ablate", [&](detail::ConfigReader& a) {
    std::string target = c.ablate.target == AblationTarget::lambda ? "lambda" : "W";
    a.read("target", target);
    if (target == "lambda") c.ablate.target = AblationTarget::lambda;
    else if (target == "W") c.ablate.target = AblationTarget::change_weight;
    else fail_config("config: 'ablate.target' must be lambda or W, got '", target, "'");
    a.read("lambda", c.ablate.tcl_weights);
    a.read("W", c.ablate.change_weights);
  });
  r.finish();
  validate(c);
  return c;
}

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json provenance = nlohmann::json::object();
  for (const auto& [k, v] : provenance_notes()) provenance[k] = v;
  return {
      {"seed", c.seed},
      {"log_wall_time", c.log_wall_time},
      {"data",
       {{"n_train", c.data.n_train},
        {"n_test", c.data.n_test},
        {"image_side", c.data.image_side},
        {"noise", c.data.noise},
        {"presence_threshold", c.data.presence_threshold},
        {"stability_band", c.data.stability_band},
        {"followup", {{"gain", c.data.followup.gain}, {"offset", c.data.followup.offset}, {"tilt", c.data.followup.tilt}}}}},
      {"encoder",
       {{"image_side", c.encoder.image_side},
        {"patch", c.encoder.patch},
        {"hidden", c.encoder.hidden},
        {"mlp", c.encoder.mlp},
        {"proj_dim", c.encoder.proj_dim},
        {"vocab_size", c.encoder.vocab_size},
        {"text_hidden", c.encoder.text_hidden},
        {"text_mlp", c.encoder.text_mlp}}},
      {"pretrain",
       {{"mode", std::string(to_string(c.pretrain.mode))},
        {"epochs", c.pretrain.epochs},
        {"batch_size", c.pretrain.batch_size},
        {"lr", c.pretrain.lr},
        {"warmup_steps", c.pretrain.warmup_steps},
        {"W", c.pretrain.change_weight},
        {"activation_epoch", c.pretrain.activation_epoch}}},
      {"finetune",
       {{"variant", std::string(to_string(c.finetune.variant))},
        {"epochs", c.finetune.epochs},
        {"batch_size", c.finetune.batch_size},
        {"lr", c.finetune.lr},
        {"warmup_fraction", c.finetune.warmup_fraction},
        {"lambda", c.finetune.tcl_weight},
        {"activation_epoch", c.finetune.activation_epoch}}},
      {"optimizer",
       {{"beta1", c.optimizer.beta1},
        {"beta2", c.optimizer.beta2},
        {"eps", c.optimizer.eps},
        {"weight_decay", c.optimizer.weight_decay}}},
      {"probe", {{"epochs", c.probe.epochs}, {"batch_size", c.probe.batch_size}, {"lr", c.probe.lr}}},
      {"ablate",
       {{"target", c.ablate.target == AblationTarget::lambda ? "lambda" : "W"},
        {"lambda", c.ablate.tcl_weights},
        {"W", c.ablate.change_weights}}},
      {"provenance", provenance},
  };
}

// Serialised configs carry their provenance block; it is informational and
// stripped before parsing.
inline RunConfig parse_config_text(const std::string& text) {
  nlohmann::json j;
  try {
    j = text.find_first_not_of(" \t\r\n") == std::string::npos ? nlohmann::json::object() : nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    fail_config("config: parse error: ", e.what());
  }
  if (j.is_object()) j.erase("provenance");
  return parse_config(j);
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail_config("config: cannot read '", path.string(), "'");
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline RunConfig load_config(const std::filesystem::path& path) { return parse_config_text(read_text_file(path)); }

}  // namespace tila
