#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "tila/config.hpp"

using namespace tila;
using nlohmann::json;

namespace {

std::string config_error(const std::string& text) {
  try {
    parse_config_text(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Config, EmptyGivesDefaults) {
  const auto c = parse_config_text("");
  EXPECT_TRUE(c == RunConfig{});
  EXPECT_TRUE(parse_config_text("  \n{}") == c);
  EXPECT_EQ(c.pretrain.change_weight, 1.0);
  EXPECT_EQ(c.finetune.tcl_weight, 50.0);
  EXPECT_EQ(c.pretrain.epochs, 30u);
  EXPECT_EQ(c.finetune.epochs, 50u);
  EXPECT_EQ(c.pretrain.activation_epoch, 10);
  EXPECT_EQ(c.finetune.activation_epoch, 20);
  EXPECT_EQ(c.finetune.variant, FinetuneVariant::bice_tcl);
  EXPECT_EQ(c.pretrain.mode, PretrainMode::tila);
  EXPECT_EQ(c.encoder.vocab_size, Vocabulary::standard().size());
  EXPECT_EQ(c.data.n_train, 2000u);
  EXPECT_EQ(c.data.n_test, 500u);
  EXPECT_FALSE(c.log_wall_time);
  EXPECT_EQ(c.ablate.tcl_weights, (std::vector<double>{0, 1, 50, 100}));
  EXPECT_EQ(c.ablate.change_weights, (std::vector<double>{0, 0.5, 1, 2}));
}

TEST(Config, NegativeLambdaNamesLambda) {
  const auto msg = config_error(R"({"finetune": {"lambda": -1}})");
  EXPECT_NE(msg.find("finetune.lambda"), std::string::npos) << msg;
  EXPECT_NE(msg.find("λ"), std::string::npos) << msg;
  EXPECT_NE(config_error(R"({"ablate": {"lambda": [0, -2]}})").find("λ"), std::string::npos);
  EXPECT_NE(config_error(R"({"pretrain": {"W": -0.5}})").find("pretrain.W"), std::string::npos);
}

TEST(Config, UnknownKeysRejectedWithPath) {
  EXPECT_NE(config_error(R"({"sede": 1})").find("'sede'"), std::string::npos);
  EXPECT_NE(config_error(R"({"finetune": {"lamda": 1}})").find("finetune.lamda"), std::string::npos);
  EXPECT_NE(config_error(R"({"data": {"followup": {"gamma": 1}}})").find("data.followup.gamma"), std::string::npos);
}

TEST(Config, TypeAndValueErrors) {
  EXPECT_NE(config_error(R"({"seed": "zero"})").find("wrong type"), std::string::npos);
  EXPECT_NE(config_error("{not json").find("parse error"), std::string::npos);
  EXPECT_NE(config_error("[1, 2]").find("must be an object"), std::string::npos);
  EXPECT_FALSE(config_error(R"({"pretrain": {"mode": "clip"}})").empty());
  EXPECT_FALSE(config_error(R"({"finetune": {"variant": "tcl"}})").empty());
  EXPECT_FALSE(config_error(R"({"ablate": {"target": "both"}})").empty());
  EXPECT_FALSE(config_error(R"({"data": {"image_side": 32}})").empty());
  EXPECT_FALSE(config_error(R"({"encoder": {"patch": 7}})").empty());
  EXPECT_FALSE(config_error(R"({"encoder": {"vocab_size": 5}})").empty());
  EXPECT_FALSE(config_error(R"({"pretrain": {"activation_epoch": 30}})").empty());
  EXPECT_FALSE(config_error(R"({"finetune": {"warmup_fraction": 1.0}})").empty());
  EXPECT_FALSE(config_error(R"({"optimizer": {"beta2": 1.0}})").empty());
  EXPECT_FALSE(config_error(R"({"data": {"stability_band": 0.2}})").empty());
}

TEST(Config, RoundTripThroughJson) {
  auto c = parse_config_text(R"({"seed": 7, "pretrain": {"mode": "siglip", "W": 2, "epochs": 5, "activation_epoch": 1},
                                 "finetune": {"variant": "bice", "lambda": 1, "epochs": 4, "activation_epoch": 2},
                                 "ablate": {"target": "W", "W": [0, 3]}, "log_wall_time": true})");
  EXPECT_EQ(c.seed, 7u);
  EXPECT_EQ(c.pretrain.mode, PretrainMode::siglip);
  EXPECT_EQ(c.ablate.target, AblationTarget::change_weight);
  const auto text = to_json(c).dump(2);
  EXPECT_TRUE(parse_config_text(text) == c);
  EXPECT_EQ(to_json(parse_config_text(text)).dump(2), text);
}

TEST(Config, ProvenanceRecordsDepartures) {
  const auto j = to_json(RunConfig{});
  ASSERT_TRUE(j.contains("provenance"));
  for (const char* key : {"pretrain.batch_size", "pretrain.lr", "finetune.lr", "data.followup"})
    EXPECT_TRUE(j["provenance"].contains(key)) << key;
  EXPECT_EQ(j["pretrain"]["lr"].get<double>(), 1e-3);
  EXPECT_EQ(j["finetune"]["lr"].get<double>(), 1e-4);
}

TEST(Config, LoadFromFile) {
  const auto path = std::filesystem::temp_directory_path() / "tila_config_test.json";
  {
    std::ofstream os(path);
    os << R"({"seed": 3})";
  }
  EXPECT_EQ(load_config(path).seed, 3u);
  EXPECT_THROW(load_config(path.string() + ".missing"), ConfigError);
}
