#pragma once

// Subcommand driver behind tools/tila.cpp. Every run writes its outputs and a
// run_manifest.json holding the config hash and a checksum per artifact.

#include <openssl/evp.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "tila/config.hpp"
#include "tila/gradcheck.hpp"
#include "tila/pipeline.hpp"
#include "tila/synthdata.hpp"
#include "tila/training.hpp"

namespace tila {

namespace fs = std::filesystem;

inline std::string sha256_hex(std::string_view bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) fail_domain("sha256: digest failed");
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return os.str();
}

inline std::string file_sha256(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail_domain("sha256: cannot read ", path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return sha256_hex(ss.str());
}

inline void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) fail_domain("cannot write ", path.string());
  os << text;
}

inline constexpr const char* kRunManifestName = "run_manifest.json";

struct RunManifest {
  std::string command;
  std::string config_path;    // empty when defaults were used
  std::string config_sha256;  // of the config file bytes, or of the effective config text
  nlohmann::json effective_config;
  std::uint64_t seed = 0;
  std::string out_dir;
  nlohmann::json inputs = nlohmann::json::object();     // name -> {path, sha256}
  std::map<std::string, std::string> artifacts;         // relative path -> sha256

  nlohmann::json to_json() const {
    return {{"command", command}, {"config_path", config_path}, {"config_sha256", config_sha256},
            {"effective_config", effective_config}, {"seed", seed}, {"out_dir", out_dir},
            {"inputs", inputs}, {"artifacts", artifacts}};
  }
};

// Checksums every regular file under `dir` except the manifest itself.
inline std::map<std::string, std::string> checksum_tree(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().filename() != kRunManifestName) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::map<std::string, std::string> out;
  for (const auto& f : files) out[fs::relative(f, dir).generic_string()] = file_sha256(f);
  return out;
}

// Empty when the manifest matches the directory; otherwise one line per problem.
inline std::vector<std::string> verify_run_manifest(const fs::path& dir) {
  std::vector<std::string> problems;
  std::ifstream is(dir / kRunManifestName);
  if (!is) return {"missing " + std::string(kRunManifestName)};
  const auto j = nlohmann::json::parse(is);
  const auto recorded = j.at("artifacts").get<std::map<std::string, std::string>>();
  const auto actual = checksum_tree(dir);
  for (const auto& [path, sum] : recorded) {
    auto it = actual.find(path);
    if (it == actual.end()) problems.push_back("missing artifact " + path);
    else if (it->second != sum) problems.push_back("checksum mismatch for " + path);
  }
  for (const auto& [path, sum] : actual)
    if (!recorded.count(path)) problems.push_back("unrecorded file " + path);
  const std::string cfg_path = j.at("config_path");
  const std::string expected = cfg_path.empty() ? sha256_hex(j.at("effective_config").dump(2))
                                                : (fs::exists(cfg_path) ? file_sha256(cfg_path) : std::string("<missing>"));
  if (expected != j.at("config_sha256").get<std::string>()) problems.push_back("config hash mismatch");
  return problems;
}

struct CliOptions {
  std::string command;
  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  bool quiet = false;
  std::string data_dir;
  std::string checkpoint;
};

class Run {
 public:
  explicit Run(const CliOptions& opts) : opts_(opts) {
    if (!opts.config_path.empty()) {
      const auto text = read_text_file(opts.config_path);
      cfg_ = parse_config_text(text);
      manifest_.config_path = opts.config_path;
      manifest_.config_sha256 = sha256_hex(text);
    }
    if (opts.seed) cfg_.seed = *opts.seed;
    cfg_.encoder.seed = cfg_.seed;
    manifest_.command = opts.command;
    manifest_.effective_config = to_json(cfg_);
    if (opts.config_path.empty()) manifest_.config_sha256 = sha256_hex(manifest_.effective_config.dump(2));
    manifest_.seed = cfg_.seed;
    out_ = opts.out_dir.empty() ? default_out_dir() : fs::path(opts.out_dir);
    manifest_.out_dir = out_.generic_string();
  }

  int execute() {
    const auto& c = opts_.command;
    if (c == "gen-data") gen_data();
    else if (c == "pretrain") run_pretrain();
    else if (c == "finetune") run_finetune();
    else if (c == "evaluate") evaluate();
    else if (c == "build-retrieval") build_retrieval();
    else if (c == "screen-binary") screen();
    else if (c == "ablate") ablate();
    else if (c == "gradcheck") return gradcheck();
    else fail_config("unknown subcommand '", c, "'");
    finish();
    return 0;
  }

 private:
  fs::path default_out_dir() const {
    const char* root = std::getenv("TILA_OUT_ROOT");
    std::ostringstream name;
    name << opts_.command << "-seed" << cfg_.seed << "-" << manifest_.config_sha256.substr(0, 8);
    return fs::path(root && *root ? root : "runs") / name.str();
  }

  void say(const std::string& msg) const {
    if (!opts_.quiet) std::cerr << "[" << opts_.command << "] " << msg << "\n";
  }

  LogOptions log_options() const {
    LogOptions lo;
    lo.wall_time = cfg_.log_wall_time;
    lo.on_epoch = [this](const nlohmann::json& rec) { say(rec.dump()); };
    return lo;
  }

  void record_input(const std::string& name, const fs::path& p) {
    manifest_.inputs[name] = {{"path", p.generic_string()}, {"sha256", fs::is_regular_file(p) ? file_sha256(p) : ""}};
  }

  const Dataset& data() {
    if (!data_) {
      if (!opts_.data_dir.empty()) {
        say("reading dataset from " + opts_.data_dir);
        data_ = read_dataset(opts_.data_dir);
        record_input("data_manifest", fs::path(opts_.data_dir) / "manifest.jsonl");
      } else {
        say("generating dataset in memory from the config seed");
        data_ = generate_dataset(cfg_.seed, cfg_.data);
        manifest_.inputs["data"] = "generated in memory from seed";
      }
      train_ = extract_features(data_->split(Split::train), cfg_.encoder);
      test_ = extract_features(data_->split(Split::test), cfg_.encoder);
      if (train_.empty() || test_.empty()) fail_domain("dataset needs both train and test studies");
    }
    return *data_;
  }

  ParamStore checkpoint_or_fail() {
    if (opts_.checkpoint.empty()) fail_config(opts_.command, ": --checkpoint is required");
    record_input("checkpoint", opts_.checkpoint);
    return load_checkpoint(opts_.checkpoint);
  }

  void write_log(const fs::path& path, const std::vector<nlohmann::json>& log) {
    std::string text;
    for (const auto& r : log) text += format_json_line(r);
    write_text(path, text);
  }

  void write_json(const std::string& rel, const nlohmann::json& j) { write_text(out_ / rel, j.dump(2) + "\n"); }

  void finish() {
    fs::create_directories(out_);
    write_json("config.json", manifest_.effective_config);
    manifest_.artifacts = checksum_tree(out_);
    write_text(out_ / kRunManifestName, manifest_.to_json().dump(2) + "\n");
    say("wrote " + out_.generic_string());
  }

  void gen_data() {
    const auto d = generate_dataset(cfg_.seed, cfg_.data);
    write_dataset(out_ / "data", d, cfg_.data);
    write_json("prompt_bank.json", default_prompt_bank(d.specs).to_json());
    say("generated " + std::to_string(d.studies.size()) + " studies");
  }

  ParamStore pretrain_with(const PretrainConfig& pc, std::vector<nlohmann::json>* log = nullptr) {
    data();
    auto r = pretrain(train_, init_params(cfg_.encoder), cfg_.encoder, pc, cfg_.optimizer, cfg_.seed, log_options());
    if (log) *log = r.log;
    say("excluded " + std::to_string(r.excluded_abstain) + " studies with abstained change labels");
    return std::move(r.params);
  }

  void run_pretrain() {
    std::vector<nlohmann::json> log;
    const auto params = pretrain_with(cfg_.pretrain, &log);
    save_checkpoint(out_ / "checkpoint.bin", params);
    write_log(out_ / "train_log.jsonl", log);
  }

  nlohmann::json head_report(const ParamStore& params, const std::string& tag) {
    const auto rep = head_protocol_report(params, cfg_.encoder, test_, data().specs);
    write_text(out_ / (tag + ".tsv"), to_table(rep, tag));
    return to_json(rep);
  }

  void run_finetune() {
    auto base = checkpoint_or_fail();
    data();
    auto r = finetune(train_, std::move(base), cfg_.encoder, data_->specs.size(), cfg_.finetune, cfg_.optimizer,
                      cfg_.seed, log_options());
    save_checkpoint(out_ / "checkpoint.bin", r.params);
    write_log(out_ / "train_log.jsonl", r.log);
    write_json("report.json", {{"seed", cfg_.seed},
                               {"config_sha256", manifest_.config_sha256},
                               {"variant", std::string(to_string(cfg_.finetune.variant))},
                               {"heads", head_report(r.params, "heads")}});
  }

  void evaluate() {
    const auto params = checkpoint_or_fail();
    const auto& d = data();
    nlohmann::json rep = {{"seed", cfg_.seed}, {"config_sha256", manifest_.config_sha256}};
    if (params.contains(seg::kHeadW)) rep["heads"] = head_report(params, "heads");
    const auto zs = zero_shot_protocol_report(params, cfg_.encoder, test_, d.specs, default_prompt_bank(d.specs));
    write_text(out_ / "zero_shot.tsv", to_table(zs, "zero_shot"));
    rep["zero_shot"] = to_json(zs);
    const auto vr = variant_protocol_report(params, cfg_.encoder, test_, d.specs);
    write_text(out_ / "variants.tsv", to_table(vr, "variants"));
    rep["variant_retrieval"] = to_json(vr);
    rep["retrieval"] = to_json(retrieval_metrics(params, cfg_.encoder, test_));
    const auto m = swap_cosine_margin(params, cfg_.encoder, test_);
    rep["swap_cosine"] = {{"unchanged", m.unchanged}, {"changed", m.changed}, {"margin", m.margin()}};
    write_json("report.json", rep);
  }

  void build_retrieval() {
    const auto& d = data();
    std::string text;
    for (const auto* s : d.split(Split::test)) {
      for (std::size_t f = 0; f < d.specs.size(); ++f) {
        const auto v = build_retrieval_variants(s->report_words, d.specs[f].name, d.specs);
        nlohmann::json rec = {{"id", s->id},
                              {"finding", d.specs[f].name},
                              {"label", std::string(to_string(s->findings[f].label))},
                              {"reference", join_words(s->report_words)}};
        for (auto y : kAllLabels) rec["variants"][std::string(to_string(y))] = join_words(v[index_of(y)]);
        text += rec.dump() + "\n";
      }
    }
    write_text(out_ / "retrieval_variants.jsonl", text);
  }

  void screen() {
    const auto params = checkpoint_or_fail();
    data();
    const auto r = screen_binary(params, cfg_.encoder, train_, test_, cfg_.probe, cfg_.optimizer, cfg_.seed);
    write_json("probe.json", {{"seed", cfg_.seed}, {"config_sha256", manifest_.config_sha256}, {"auc", r.auc},
                              {"train_loss", r.train_loss}, {"bias", r.bias}, {"weights", r.weights}});
    say("held-out AUC " + std::to_string(r.auc));
  }

  void ablate() {
    const auto& d = data();
    std::ostringstream table;
    table.precision(6);
    table << std::fixed;
    nlohmann::json rows = nlohmann::json::array();
    if (cfg_.ablate.target == AblationTarget::lambda) {
      ParamStore base = opts_.checkpoint.empty() ? pretrain_with(cfg_.pretrain) : checkpoint_or_fail();
      table << "lambda\tstandard\treversed\tcombined\tconsistency\n";
      for (double lambda : cfg_.ablate.tcl_weights) {
        FinetuneConfig fc = cfg_.finetune;
        fc.variant = FinetuneVariant::bice_tcl;
        fc.tcl_weight = lambda;
        say("fine-tuning with lambda " + std::to_string(lambda));
        const auto r = finetune(train_, base, cfg_.encoder, d.specs.size(), fc, cfg_.optimizer, cfg_.seed, log_options());
        const auto avg = head_protocol_report(r.params, cfg_.encoder, test_, d.specs).average();
        table << lambda << '\t' << avg.standard << '\t' << avg.reversed << '\t' << avg.combined << '\t'
              << avg.consistency << '\n';
        rows.push_back({{"lambda", lambda}, {"average", to_json(avg)}});
      }
    } else {
      table << "W\tzs_standard\tzs_reversed\tzs_combined\tzs_consistency\tswap_margin\tprobe_auc\n";
      for (double w : cfg_.ablate.change_weights) {
        PretrainConfig pc = cfg_.pretrain;
        pc.mode = PretrainMode::tila;
        pc.change_weight = w;
        say("pretraining with W " + std::to_string(w));
        const auto params = pretrain_with(pc);
        const auto zs = zero_shot_protocol_report(params, cfg_.encoder, test_, d.specs, default_prompt_bank(d.specs)).average();
        const auto m = swap_cosine_margin(params, cfg_.encoder, test_);
        const auto pr = screen_binary(params, cfg_.encoder, train_, test_, cfg_.probe, cfg_.optimizer, cfg_.seed);
        table << w << '\t' << zs.standard << '\t' << zs.reversed << '\t' << zs.combined << '\t' << zs.consistency
              << '\t' << m.margin() << '\t' << pr.auc << '\n';
        rows.push_back({{"W", w}, {"zero_shot", to_json(zs)}, {"swap_margin", m.margin()}, {"probe_auc", pr.auc}});
      }
    }
    write_text(out_ / "ablation.tsv", table.str());
    write_json("ablation.json", {{"seed", cfg_.seed}, {"config_sha256", manifest_.config_sha256}, {"rows", rows}});
  }

  int gradcheck() {
    const auto cases = run_gradcheck_suite(cfg_.seed);
    nlohmann::json j = {{"step", kFdStep}, {"tol", kFdTolerance}, {"cases", nlohmann::json::array()}};
    double worst = 0.0;
    bool ok = true;
    for (const auto& c : cases) {
      j["cases"].push_back(to_json(c));
      worst = std::max(worst, c.report.max_rel_error);
      ok = ok && c.report.passed();
    }
    j["max_rel_error"] = worst;
    j["passed"] = ok;
    write_json("fd_report.json", j);
    finish();
    say("max relative error " + std::to_string(worst));
    if (!ok) {
      std::cerr << "gradcheck: analytic and numeric gradients disagree beyond " << kFdTolerance << "\n";
      return 1;
    }
    return 0;
  }

  CliOptions opts_;
  RunConfig cfg_;
  RunManifest manifest_;
  fs::path out_;
  std::optional<Dataset> data_;
  std::vector<StudyFeatures> train_, test_;
};

inline const std::vector<std::pair<std::string, std::string>>& subcommands() {
  static const std::vector<std::pair<std::string, std::string>> cmds = {
      {"gen-data", "Generate the synthetic paired-study dataset"},
      {"pretrain", "Contrastive pretraining (tila or siglip mode)"},
      {"finetune", "Fine-tune progression heads on a pretrained checkpoint"},
      {"evaluate", "Four-protocol, zero-shot and retrieval evaluation of a checkpoint"},
      {"build-retrieval", "Write directional report variants for the test split"},
      {"screen-binary", "Linear probe for change/no-change screening"},
      {"ablate", "Sweep lambda or W and tabulate the results"},
      {"gradcheck", "Finite-difference certification of every objective"}};
  return cmds;
}

// Exit codes: 0 success, 1 domain error, 2 configuration or usage error.
inline int run(int argc, const char* const* argv) {
  CLI::App app{"Temporal inversion-aware training and evaluation on a synthetic longitudinal benchmark", "tila"};
  app.require_subcommand(1);
  CliOptions opts;
  std::uint64_t seed = 0;
  for (const auto& [name, help] : subcommands()) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", opts.config_path, "JSON config file (defaults when omitted)");
    sub->add_option("--out", opts.out_dir, "Output directory (default $TILA_OUT_ROOT or ./runs)");
    sub->add_option("--seed", seed, "Override the config seed");
    sub->add_flag("--quiet", opts.quiet, "Suppress progress output");
    sub->add_option("--data", opts.data_dir, "Dataset directory written by gen-data (generated in memory if omitted)");
    sub->add_option("--checkpoint", opts.checkpoint, "Input checkpoint");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }
  for (auto* sub : app.get_subcommands()) {
    opts.command = sub->get_name();
    if (sub->count("--seed")) opts.seed = seed;
  }
  try {
    Run run(opts);
    return run.execute();
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 2;
  } catch (const DomainError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace tila
