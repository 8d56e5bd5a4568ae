#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedoap/error.hpp"
#include "fedoap/fed_protocol.hpp"

namespace fedoap::harness {

struct ExperimentConfig {
  Strategy strategy;
  std::size_t clients = 3;
  std::size_t rounds = 5;
  std::size_t local_epochs = 1;
  std::size_t finetune_epochs = 2;

  std::size_t image_size = 32;
  std::size_t base_channels = 8;
  std::size_t depth = 3;
  std::size_t attention_heads = 4;

  std::size_t samples_per_client = 200;
  double test_frac = 0.1;
  double val_frac = 0.1;
  std::size_t batch_size = 16;
  std::size_t anchor_size = 4;

  double lr = 1e-3;
  double min_lr = 1e-6;
  double weight_decay = 1e-5;

  double tau = 0.75;
  double lambda = 0.1;
  double noise_variance = 0.1;

  std::vector<std::uint64_t> seeds = {42};
  // Client k draws from profiles[k % profiles.size()].
  std::vector<std::string> profiles = {"breast_like", "brain_like", "liver_like"};
  std::string heldout_profile = "lung_like";
  std::string out = "out";

  ModelConfig model() const;
  TrainingConfig training() const;
  std::string profile_of(std::size_t client) const { return profiles[client % profiles.size()]; }

  // Throws InvalidConfig.
  void validate() const;

  // Flat JSON object; one key per field, strategy flags as use_dca etc.
  nlohmann::ordered_json to_json() const;
  // Applies the keys present in `j` on top of the current values. Unknown keys
  // and ill-typed values throw InvalidConfig.
  void apply_json(const nlohmann::json& j);
};

ExperimentConfig load_config(const std::filesystem::path& path);

// Names of every flat config key, in echo order.
std::vector<std::string> config_keys();

struct ClientRun {
  std::uint32_t client_id = 0;
  std::string profile;
  std::vector<double> round_losses;
  FineTuneResult finetune;
  double test_dice = 0.0;
};

struct SeedRun {
  std::uint64_t seed = 0;
  std::vector<ClientRun> clients;
  double mean_test_dice = 0.0;
  TransmissionLedger ledger;
};

// Builds the seed's clients: per-client synthetic data, shared initial model.
std::vector<ClientState> build_clients(const ExperimentConfig& config, std::uint64_t seed);

// Alignment, fine-tuning and test evaluation for one seed.
SeedRun run_seed(const ExperimentConfig& config, std::uint64_t seed, const AlignmentOptions& options = {});

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation, 0 for one value
};
MeanStd mean_std(const std::vector<double>& values);

struct TrainResult {
  std::vector<SeedRun> runs;
  std::vector<MeanStd> per_client;
  MeanStd mean_test_dice;
};
TrainResult run_train(const ExperimentConfig& config);

struct AblationRow {
  std::string name;
  bool use_dca, use_adapter, use_pbl;
  std::vector<std::vector<double>> per_seed_client;  // [seed][client]
  std::vector<double> per_seed_mean;
  std::vector<double> client_means;  // averaged over seeds
  MeanStd mean;
};
// none | dca | dca+adapter | dca+adapter+pbl, all with the FedOAP protocol.
std::vector<AblationRow> run_ablation(const ExperimentConfig& config);

struct GeneralizationRun {
  std::uint64_t seed = 0;
  double zero_shot_dice = 0.0;
  double fine_tuned_dice = 0.0;
  FineTuneResult finetune;
};
struct GeneralizationResult {
  std::vector<GeneralizationRun> runs;
  MeanStd zero_shot, fine_tuned, gain;
};
GeneralizationResult run_generalize(const ExperimentConfig& config);

struct TransmissionRow {
  std::string scale;  // desk | paper
  StrategyTag strategy;
  std::size_t clients = 0;
  std::size_t rounds = 0;
  TransmissionBytes closed_form;
  std::size_t uplink_measured = 0;    // per client per round
  std::size_t downlink_measured = 0;  // per client per round
  bool match = false;
};
class TransmissionMismatch : public Error {
 public:
  TransmissionMismatch(const std::string& what, std::vector<TransmissionRow> rows)
      : Error(ErrorCode::FormulaMeasurementMismatch, what), rows_(std::move(rows)) {}
  const std::vector<TransmissionRow>& rows() const { return rows_; }

 private:
  std::vector<TransmissionRow> rows_;
};

// Measures real protocol runs for FedOAP and FedAvgAll at K=1 and K=clients on
// the desk config, plus one communication round at the full-size model.
// Throws FormulaMeasurementMismatch after collecting every row.
std::vector<TransmissionRow> run_transmission(const ExperimentConfig& config, bool include_paper_scale = true);

// Measured per-client per-round bytes of a run, checked entry by entry.
TransmissionRow measure_transmission(const ExperimentConfig& config, StrategyTag strategy, std::size_t clients,
                                     const std::string& scale);

// ---------------------------------------------------------------------------
// Report files. Each writer creates `out_dir` if needed.

nlohmann::ordered_json train_report(const ExperimentConfig& config, const TrainResult& result);
nlohmann::ordered_json ablation_report(const ExperimentConfig& config, const std::vector<AblationRow>& rows);
nlohmann::ordered_json generalization_report(const ExperimentConfig& config, const GeneralizationResult& result);
nlohmann::ordered_json transmission_report(const ExperimentConfig& config, const std::vector<TransmissionRow>& rows);

void write_json(const std::filesystem::path& path, const nlohmann::ordered_json& j);
void write_metrics_csv(const std::filesystem::path& path, const TrainResult& result);
void write_ablation_csv(const std::filesystem::path& path, const std::vector<AblationRow>& rows, std::size_t clients);
void write_generalization_csv(const std::filesystem::path& path, const GeneralizationResult& result);
void write_transmission_csv(const std::filesystem::path& path, const std::vector<TransmissionRow>& rows);

}  // namespace fedoap::harness
