#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "fedoap/harness.hpp"

namespace {

using namespace fedoap;
using namespace fedoap::harness;
using nlohmann::json;

ExperimentConfig tiny() {
  ExperimentConfig c;
  c.apply_json({{"rounds", 1}, {"finetune_epochs", 1}, {"image_size", 8}, {"base_channels", 4}, {"depth", 1},
                {"attention_heads", 2}, {"samples_per_client", 20}, {"batch_size", 4}, {"anchor_size", 2},
                {"seeds", {3, 4}}});
  return c;
}

template <typename F>
ErrorCode code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error raised";
  return ErrorCode::InvalidArgument;
}

TEST(ConfigTest, DefaultsMatchTheDeskExperiment) {
  const ExperimentConfig c;
  EXPECT_EQ(c.strategy.tag, StrategyTag::FedOAP);
  EXPECT_TRUE(c.strategy.use_dca && c.strategy.use_adapter && c.strategy.use_pbl);
  EXPECT_EQ(c.clients, 3u);
  EXPECT_EQ(c.rounds, 5u);
  EXPECT_EQ(c.local_epochs, 1u);
  EXPECT_EQ(c.finetune_epochs, 2u);
  EXPECT_EQ(c.image_size, 32u);
  EXPECT_EQ(c.batch_size, 16u);
  EXPECT_EQ(c.tau, 0.75);
  EXPECT_EQ(c.lambda, 0.1);
  EXPECT_EQ(c.noise_variance, 0.1);
  EXPECT_EQ(c.min_lr, 1e-6);
  EXPECT_EQ(c.weight_decay, 1e-5);
  EXPECT_EQ(c.seeds, std::vector<std::uint64_t>{42});
  EXPECT_NO_THROW(c.validate());
}

TEST(ConfigTest, JsonRoundTripCoversEveryKey) {
  const ExperimentConfig a = tiny();
  const auto j = a.to_json();
  std::vector<std::string> keys;
  for (const auto& [k, v] : j.items()) keys.push_back(k);
  EXPECT_EQ(keys, config_keys());
  ExperimentConfig b;
  b.apply_json(json::parse(j.dump()));
  EXPECT_EQ(b.to_json(), j);
}

TEST(ConfigTest, LoadFromFile) {
  const auto path = std::filesystem::temp_directory_path() / "fedoap_config_test.json";
  std::ofstream(path) << R"({"strategy": "local-only", "use_pbl": false, "seeds": [1, 2, 3]})";
  const ExperimentConfig c = load_config(path);
  EXPECT_EQ(c.strategy.tag, StrategyTag::LocalOnly);
  EXPECT_FALSE(c.strategy.use_pbl);
  EXPECT_EQ(c.seeds.size(), 3u);
  std::filesystem::remove(path);
  EXPECT_EQ(code_of([&] { load_config(path); }), ErrorCode::IoError);
}

TEST(ConfigTest, RejectsBadKeysAndValues) {
  for (const json& patch : {json{{"clientz", 3}}, json{{"clients", -1}}, json{{"depth", 2.5}},
                            json{{"strategy", "fedprox"}}, json{{"use_dca", "yes"}}, json{{"seeds", 7}},
                            json{{"seeds", {-1}}}, json{{"lr", "fast"}}, json::array()}) {
    ExperimentConfig c;
    EXPECT_EQ(code_of([&] { c.apply_json(patch); }), ErrorCode::InvalidConfig) << patch.dump();
  }
  for (const json& patch : {json{{"clients", 0}}, json{{"tau", 1.0}}, json{{"lambda", 1.5}}, json{{"seeds", json::array()}},
                            json{{"profiles", {"kidney_like"}}}, json{{"heldout_profile", "breast_like"}},
                            json{{"attention_heads", 3}}, json{{"lr", 0.0}}}) {
    ExperimentConfig c;
    c.apply_json(patch);
    EXPECT_EQ(code_of([&] { c.validate(); }), ErrorCode::InvalidConfig) << patch.dump();
  }
}

TEST(MeanStdTest, SampleStandardDeviation) {
  EXPECT_EQ(mean_std({}).mean, 0.0);
  EXPECT_EQ(mean_std({0.5}).std, 0.0);
  const MeanStd m = mean_std({1.0, 2.0, 3.0, 4.0});
  EXPECT_DOUBLE_EQ(m.mean, 2.5);
  EXPECT_DOUBLE_EQ(m.std, std::sqrt(5.0 / 3.0));
}

TEST(BuildClientsTest, ProfilesCycleAndDataIsSeeded) {
  ExperimentConfig c = tiny();
  c.clients = 4;
  const auto a = build_clients(c, 3), b = build_clients(c, 3), other = build_clients(c, 4);
  ASSERT_EQ(a.size(), 4u);
  EXPECT_EQ(a[0].profile, "breast_like");
  EXPECT_EQ(a[1].profile, "brain_like");
  EXPECT_EQ(a[2].profile, "liver_like");
  EXPECT_EQ(a[3].profile, "breast_like");
  EXPECT_EQ(a[0].params, a[3].params);
  EXPECT_FALSE(a[0].dataset.train_images == a[3].dataset.train_images);
  for (std::size_t k = 0; k < 4; ++k) {
    EXPECT_EQ(a[k].dataset.train_images, b[k].dataset.train_images);
    EXPECT_EQ(a[k].params, b[k].params);
    EXPECT_FALSE(a[k].dataset.train_images == other[k].dataset.train_images);
    EXPECT_EQ(a[k].dataset.n_train + a[k].dataset.n_val + a[k].dataset.n_test, 20u);
  }
}

TEST(RunTrainTest, SummariesAggregateSeedRuns) {
  const ExperimentConfig c = tiny();
  const TrainResult r = run_train(c);
  ASSERT_EQ(r.runs.size(), 2u);
  for (std::size_t k = 0; k < c.clients; ++k) {
    const MeanStd m = mean_std({r.runs[0].clients[k].test_dice, r.runs[1].clients[k].test_dice});
    EXPECT_EQ(r.per_client[k].mean, m.mean);
    EXPECT_EQ(r.per_client[k].std, m.std);
  }
  EXPECT_EQ(r.mean_test_dice.mean, mean_std({r.runs[0].mean_test_dice, r.runs[1].mean_test_dice}).mean);
  for (const auto& run : r.runs) {
    EXPECT_EQ(run.ledger.rounds(), c.rounds);
    for (const auto& client : run.clients) EXPECT_EQ(client.finetune.epoch_val_dice.size(), c.finetune_epochs);
  }
}

TEST(RunTrainTest, BaselineSkipsFineTuningAndLocalOnlySendsNothing) {
  ExperimentConfig c = tiny();
  c.seeds = {3};
  c.strategy.tag = StrategyTag::FedAvgAll;
  const TrainResult baseline = run_train(c);
  for (const auto& client : baseline.runs[0].clients) EXPECT_TRUE(client.finetune.epoch_val_dice.empty());
  c.strategy.tag = StrategyTag::LocalOnly;
  EXPECT_EQ(run_train(c).runs[0].ledger.total(), 0u);
}

TEST(AblationTest, RowsMatchStandaloneTrainRuns) {
  ExperimentConfig c = tiny();
  c.seeds = {3};
  const auto rows = run_ablation(c);
  ASSERT_EQ(rows.size(), 4u);
  for (const auto& row : rows) {
    ExperimentConfig single = c;
    single.strategy = {StrategyTag::FedOAP, row.use_dca, row.use_adapter, row.use_pbl};
    EXPECT_EQ(run_train(single).mean_test_dice.mean, row.mean.mean) << row.name;
  }
}

TEST(GeneralizeTest, GainIsFineTunedMinusZeroShot) {
  const GeneralizationResult r = run_generalize(tiny());
  ASSERT_EQ(r.runs.size(), 2u);
  for (const auto& run : r.runs) EXPECT_EQ(run.finetune.epoch_val_dice.size(), 1u);
  EXPECT_DOUBLE_EQ(r.gain.mean, r.fine_tuned.mean - r.zero_shot.mean);
}

TEST(TransmissionTest, DeskRowsMatchClosedForm) {
  const auto rows = run_transmission(tiny(), false);
  ASSERT_EQ(rows.size(), 4u);
  for (const auto& row : rows) {
    EXPECT_TRUE(row.match);
    EXPECT_EQ(row.uplink_measured, row.closed_form.uplink);
    EXPECT_EQ(row.downlink_measured, row.closed_form.downlink);
  }
  // K=1 sends back exactly what was uploaded; K=3 FedOAP adds the other clients' tokens.
  EXPECT_EQ(rows[0].uplink_measured, rows[0].downlink_measured);
  EXPECT_GT(rows[1].downlink_measured, rows[1].uplink_measured);
  EXPECT_EQ(rows[3].uplink_measured, rows[3].downlink_measured);
}

}  // namespace
