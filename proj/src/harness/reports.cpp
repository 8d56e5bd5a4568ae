#include <cstdio>
#include <fstream>

#include "fedoap/error.hpp"
#include "fedoap/harness.hpp"

namespace fedoap::harness {
namespace {

using nlohmann::ordered_json;

constexpr int kReportVersion = 1;

ordered_json envelope(const char* command, const ExperimentConfig& cfg) {
  ordered_json j;
  j["format"] = "fedoap-report";
  j["version"] = kReportVersion;
  j["command"] = command;
  j["config"] = cfg.to_json();
  return j;
}

ordered_json to_json(const MeanStd& m) { return {{"mean", m.mean}, {"std", m.std}}; }

ordered_json to_json(const FineTuneResult& f) {
  return {{"initial_val_dice", f.initial_val_dice},
          {"epoch_val_dice", f.epoch_val_dice},
          {"epoch_losses", f.epoch_losses},
          {"best_epoch", f.best_epoch},
          {"best_val_dice", f.best_val_dice}};
}

ordered_json to_json(const TransmissionLedger& ledger) {
  ordered_json rounds = ordered_json::array();
  for (std::uint32_t r = 0; r < ledger.rounds(); ++r)
    rounds.push_back({{"round", r},
                      {"uplink_bytes", ledger.round_total(r, Direction::Uplink)},
                      {"downlink_bytes", ledger.round_total(r, Direction::Downlink)}});
  return {{"uplink_bytes", ledger.total(Direction::Uplink)},
          {"downlink_bytes", ledger.total(Direction::Downlink)},
          {"rounds", rounds}};
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  require(bool(out), ErrorCode::IoError, "cannot write " + path.string());
  return out;
}

}  // namespace

ordered_json train_report(const ExperimentConfig& cfg, const TrainResult& result) {
  ordered_json j = envelope("train", cfg);
  ordered_json runs = ordered_json::array();
  for (const SeedRun& run : result.runs) {
    ordered_json clients = ordered_json::array();
    for (const ClientRun& c : run.clients)
      clients.push_back({{"client_id", c.client_id},
                         {"profile", c.profile},
                         {"round_losses", c.round_losses},
                         {"finetune", to_json(c.finetune)},
                         {"test_dice", c.test_dice}});
    runs.push_back({{"seed", run.seed},
                    {"clients", clients},
                    {"mean_test_dice", run.mean_test_dice},
                    {"transmission", to_json(run.ledger)}});
  }
  ordered_json per_client = ordered_json::array();
  for (std::size_t k = 0; k < result.per_client.size(); ++k)
    per_client.push_back(
        {{"client_id", k}, {"profile", cfg.profile_of(k)}, {"test_dice", to_json(result.per_client[k])}});
  j["train"] = {{"runs", runs}, {"summary", {{"per_client", per_client}, {"mean_test_dice", to_json(result.mean_test_dice)}}}};
  return j;
}

ordered_json ablation_report(const ExperimentConfig& cfg, const std::vector<AblationRow>& rows) {
  ordered_json j = envelope("ablate", cfg);
  ordered_json out = ordered_json::array();
  for (const AblationRow& row : rows) {
    ordered_json per_seed = ordered_json::array();
    for (std::size_t s = 0; s < row.per_seed_mean.size(); ++s)
      per_seed.push_back({{"seed", cfg.seeds[s]}, {"client_dice", row.per_seed_client[s]}, {"mean", row.per_seed_mean[s]}});
    out.push_back({{"name", row.name},
                   {"use_dca", row.use_dca},
                   {"use_adapter", row.use_adapter},
                   {"use_pbl", row.use_pbl},
                   {"per_seed", per_seed},
                   {"client_means", row.client_means},
                   {"mean_test_dice", to_json(row.mean)}});
  }
  j["ablation"] = {{"rows", out}};
  return j;
}

ordered_json generalization_report(const ExperimentConfig& cfg, const GeneralizationResult& result) {
  ordered_json j = envelope("generalize", cfg);
  ordered_json runs = ordered_json::array();
  for (const auto& r : result.runs)
    runs.push_back({{"seed", r.seed},
                    {"zero_shot_dice", r.zero_shot_dice},
                    {"fine_tuned_dice", r.fine_tuned_dice},
                    {"finetune", to_json(r.finetune)}});
  j["generalization"] = {{"profile", cfg.heldout_profile},
                         {"runs", runs},
                         {"zero_shot_dice", to_json(result.zero_shot)},
                         {"fine_tuned_dice", to_json(result.fine_tuned)},
                         {"gain", to_json(result.gain)}};
  return j;
}

ordered_json transmission_report(const ExperimentConfig& cfg, const std::vector<TransmissionRow>& rows) {
  ordered_json j = envelope("transmission", cfg);
  ordered_json out = ordered_json::array();
  for (const auto& r : rows)
    out.push_back({{"scale", r.scale},
                   {"strategy", std::string(strategy_name(r.strategy))},
                   {"clients", r.clients},
                   {"rounds", r.rounds},
                   {"uplink_closed_form", r.closed_form.uplink},
                   {"downlink_closed_form", r.closed_form.downlink},
                   {"uplink_measured", r.uplink_measured},
                   {"downlink_measured", r.downlink_measured},
                   {"shared_scalars", r.closed_form.shared_scalars},
                   {"kv_scalars", r.closed_form.kv_scalars},
                   {"descriptor_bytes", r.closed_form.descriptor_bytes},
                   {"match", r.match}});
  j["transmission"] = {{"rows", out}};
  return j;
}

void write_json(const std::filesystem::path& path, const ordered_json& j) { open_out(path) << j.dump(2) << "\n"; }

void write_metrics_csv(const std::filesystem::path& path, const TrainResult& result) {
  std::ofstream out = open_out(path);
  out << "seed,client_id,profile,phase,step,metric,value\n";
  for (const SeedRun& run : result.runs)
    for (const ClientRun& c : run.clients) {
      const std::string prefix = std::to_string(run.seed) + "," + std::to_string(c.client_id) + "," + c.profile + ",";
      for (std::size_t r = 0; r < c.round_losses.size(); ++r)
        out << prefix << "align," << r << ",loss," << num(c.round_losses[r]) << "\n";
      out << prefix << "finetune,0,val_dice," << num(c.finetune.initial_val_dice) << "\n";
      for (std::size_t e = 0; e < c.finetune.epoch_val_dice.size(); ++e) {
        out << prefix << "finetune," << e + 1 << ",loss," << num(c.finetune.epoch_losses[e]) << "\n";
        out << prefix << "finetune," << e + 1 << ",val_dice," << num(c.finetune.epoch_val_dice[e]) << "\n";
      }
      out << prefix << "test,0,dice," << num(c.test_dice) << "\n";
    }
}

void write_ablation_csv(const std::filesystem::path& path, const std::vector<AblationRow>& rows, std::size_t clients) {
  std::ofstream out = open_out(path);
  out << "row,use_dca,use_adapter,use_pbl";
  for (std::size_t k = 0; k < clients; ++k) out << ",client_" << k;
  out << ",mean,std\n";
  for (const AblationRow& row : rows) {
    out << row.name << "," << int(row.use_dca) << "," << int(row.use_adapter) << "," << int(row.use_pbl);
    for (double v : row.client_means) out << "," << num(v);
    out << "," << num(row.mean.mean) << "," << num(row.mean.std) << "\n";
  }
}

void write_generalization_csv(const std::filesystem::path& path, const GeneralizationResult& result) {
  std::ofstream out = open_out(path);
  out << "seed,zero_shot_dice,fine_tuned_dice,gain\n";
  for (const auto& r : result.runs)
    out << r.seed << "," << num(r.zero_shot_dice) << "," << num(r.fine_tuned_dice) << ","
        << num(r.fine_tuned_dice - r.zero_shot_dice) << "\n";
}

void write_transmission_csv(const std::filesystem::path& path, const std::vector<TransmissionRow>& rows) {
  std::ofstream out = open_out(path);
  out << "scale,strategy,clients,rounds,uplink_closed_form,downlink_closed_form,uplink_measured,downlink_measured,"
         "uplink_mb,downlink_mb,shared_scalars,kv_scalars,descriptor_bytes,match\n";
  for (const auto& r : rows)
    out << r.scale << "," << strategy_name(r.strategy) << "," << r.clients << "," << r.rounds << ","
        << r.closed_form.uplink << "," << r.closed_form.downlink << "," << r.uplink_measured << ","
        << r.downlink_measured << "," << num(double(r.closed_form.uplink) / 1e6) << ","
        << num(double(r.closed_form.downlink) / 1e6) << "," << r.closed_form.shared_scalars << ","
        << r.closed_form.kv_scalars << "," << r.closed_form.descriptor_bytes << "," << (r.match ? "true" : "false")
        << "\n";
}

}  // namespace fedoap::harness
