#include <chrono>
#include <cstdio>
#include <iostream>
#include <map>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "CLI11.hpp"
#include "fedoap/error.hpp"
#include "fedoap/harness.hpp"
#include "fedoap/synthdata.hpp"

namespace {

using fedoap::ErrorCode;
using fedoap::harness::ExperimentConfig;
using nlohmann::json;

std::string one_line(std::string s) {
  for (char& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

// Converts a flag's text into a JSON value typed like the key's default.
json typed_value(const std::string& key, const json& like, const std::string& text) {
  auto bad = [&] { fedoap::fail(ErrorCode::InvalidConfig, "bad value for --" + key + ": " + text); };
  try {
    if (like.is_boolean()) {
      if (text == "true" || text == "1") return true;
      if (text == "false" || text == "0") return false;
      bad();
    }
    if (like.is_number_unsigned()) {
      std::size_t used = 0;
      const unsigned long long v = std::stoull(text, &used);
      if (used != text.size() || text.front() == '-') bad();
      return v;
    }
    if (like.is_number()) {
      std::size_t used = 0;
      const double v = std::stod(text, &used);
      if (used != text.size()) bad();
      return v;
    }
    if (like.is_array()) {
      json arr = json::array();
      const json elem = like.empty() ? json("") : like.front();
      for (const auto& item : split_list(text)) arr.push_back(typed_value(key, elem, item));
      return arr;
    }
  } catch (const std::logic_error&) {
    bad();
  }
  return text;
}

struct Overrides {
  std::string config_path;
  std::map<std::string, std::string> values;
  std::string seed;
  bool no_dca = false, no_adapter = false, no_pbl = false;
};

void add_experiment_flags(CLI::App* cmd, Overrides& o, const json& defaults) {
  cmd->add_option("--config", o.config_path, "flat JSON config file");
  cmd->add_option("--seed", o.seed, "single seed (same as --seeds N)");
  for (const auto& key : fedoap::harness::config_keys()) {
    std::string flag = key;
    for (char& c : flag)
      if (c == '_') c = '-';
    cmd->add_option("--" + flag, o.values[key], "default " + defaults.at(key).dump());
  }
  cmd->add_flag("--no-dca", o.no_dca, "disable decoupled cross-attention");
  cmd->add_flag("--no-adapter", o.no_adapter, "bypass the spatial adapter");
  cmd->add_flag("--no-pbl", o.no_pbl, "fine-tune on the plain segmentation loss");
}

ExperimentConfig resolve(const Overrides& o) {
  ExperimentConfig cfg = o.config_path.empty() ? ExperimentConfig{} : fedoap::harness::load_config(o.config_path);
  const json defaults = cfg.to_json();
  json patch = json::object();
  for (const auto& [key, text] : o.values)
    if (!text.empty()) patch[key] = typed_value(key, defaults.at(key), text);
  if (!o.seed.empty()) patch["seeds"] = json::array({typed_value("seed", json(0u), o.seed)});
  if (o.no_dca) patch["use_dca"] = false;
  if (o.no_adapter) patch["use_adapter"] = false;
  if (o.no_pbl) patch["use_pbl"] = false;
  cfg.apply_json(patch);
  cfg.validate();
  return cfg;
}

void write_timing(const ExperimentConfig& cfg, const std::string& command, double seconds) {
  json j = {{"command", command}, {"wall_clock_seconds", seconds}};
  std::filesystem::create_directories(cfg.out);
  std::ofstream(std::filesystem::path(cfg.out) / "timing.json") << j.dump(2) << "\n";
  std::printf("wall_clock_seconds=%.3f\n", seconds);
}

void print_mean(const char* label, const fedoap::harness::MeanStd& m) {
  std::printf("%s=%.6f std=%.6f\n", label, m.mean, m.std);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated segmentation experiments on synthetic lesion data"};
  app.require_subcommand(1);
  const json defaults = ExperimentConfig{}.to_json();

  Overrides train_o, ablate_o, gen_o, tx_o;
  auto* train = app.add_subcommand("train", "align, fine-tune and evaluate; writes report.json and metrics.csv");
  auto* ablate = app.add_subcommand("ablate", "four-row component ablation; writes ablation.csv");
  auto* generalize = app.add_subcommand("generalize", "zero-shot vs fine-tuned Dice on the held-out profile");
  auto* transmission = app.add_subcommand("transmission", "closed-form vs measured bytes; writes transmission.csv");
  add_experiment_flags(train, train_o, defaults);
  add_experiment_flags(ablate, ablate_o, defaults);
  add_experiment_flags(generalize, gen_o, defaults);
  add_experiment_flags(transmission, tx_o, defaults);
  bool skip_paper = false;
  transmission->add_flag("--skip-paper-scale", skip_paper, "only measure the desk-scale model");

  std::string gen_profile = "breast_like", gen_out = "data";
  std::size_t gen_samples = 200, gen_size = 32;
  std::uint64_t gen_seed = 42;
  auto* generate = app.add_subcommand("generate", "write one profile's dataset as sample files plus a manifest");
  generate->add_option("--profile", gen_profile, "organ profile")->capture_default_str();
  generate->add_option("--samples", gen_samples, "number of samples")->capture_default_str();
  generate->add_option("--image-size", gen_size, "image side in pixels")->capture_default_str();
  generate->add_option("--seed", gen_seed, "generation seed")->capture_default_str();
  generate->add_option("--out", gen_out, "output directory")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "error: UsageError: %s\n", one_line(e.what()).c_str());
    return 2;
  }

  const auto start = std::chrono::steady_clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(); };
  namespace h = fedoap::harness;
  namespace fs = std::filesystem;
  try {
    if (train->parsed()) {
      const ExperimentConfig cfg = resolve(train_o);
      const h::TrainResult r = h::run_train(cfg);
      h::write_json(fs::path(cfg.out) / "report.json", h::train_report(cfg, r));
      h::write_metrics_csv(fs::path(cfg.out) / "metrics.csv", r);
      for (std::size_t k = 0; k < r.per_client.size(); ++k)
        std::printf("client %zu %s test_dice=%.6f\n", k, cfg.profile_of(k).c_str(), r.per_client[k].mean);
      print_mean("mean_test_dice", r.mean_test_dice);
      write_timing(cfg, "train", elapsed());
    } else if (ablate->parsed()) {
      const ExperimentConfig cfg = resolve(ablate_o);
      const auto rows = h::run_ablation(cfg);
      h::write_json(fs::path(cfg.out) / "report.json", h::ablation_report(cfg, rows));
      h::write_ablation_csv(fs::path(cfg.out) / "ablation.csv", rows, cfg.clients);
      for (const auto& row : rows) print_mean(row.name.c_str(), row.mean);
      write_timing(cfg, "ablate", elapsed());
    } else if (generalize->parsed()) {
      const ExperimentConfig cfg = resolve(gen_o);
      const auto r = h::run_generalize(cfg);
      h::write_json(fs::path(cfg.out) / "report.json", h::generalization_report(cfg, r));
      h::write_generalization_csv(fs::path(cfg.out) / "generalization.csv", r);
      print_mean("zero_shot_dice", r.zero_shot);
      print_mean("fine_tuned_dice", r.fine_tuned);
      print_mean("gain", r.gain);
      write_timing(cfg, "generalize", elapsed());
    } else if (transmission->parsed()) {
      const ExperimentConfig cfg = resolve(tx_o);
      std::vector<h::TransmissionRow> rows;
      try {
        rows = h::run_transmission(cfg, !skip_paper);
      } catch (const h::TransmissionMismatch& e) {
        h::write_transmission_csv(fs::path(cfg.out) / "transmission.csv", e.rows());
        throw;
      }
      h::write_json(fs::path(cfg.out) / "report.json", h::transmission_report(cfg, rows));
      h::write_transmission_csv(fs::path(cfg.out) / "transmission.csv", rows);
      for (const auto& r : rows)
        std::printf("%s %s K=%zu uplink=%zu downlink=%zu (%.2f / %.2f MB) match=%s\n", r.scale.c_str(),
                    std::string(fedoap::strategy_name(r.strategy)).c_str(), r.clients, r.uplink_measured,
                    r.downlink_measured, double(r.closed_form.uplink) / 1e6, double(r.closed_form.downlink) / 1e6,
                    r.match ? "true" : "false");
      write_timing(cfg, "transmission", elapsed());
    } else if (generate->parsed()) {
      const auto profile = fedoap::synth::find_profile(gen_profile);
      fedoap::require(profile.has_value(), ErrorCode::InvalidConfig, "unknown profile " + gen_profile);
      auto samples = fedoap::synth::generate_client_dataset(*profile, gen_samples, gen_size, gen_seed);
      auto split = fedoap::synth::split_dataset(std::move(samples), 0.1, 0.1, gen_seed);
      fedoap::synth::write_dataset(gen_out, gen_profile, gen_seed, gen_size, split);
      std::printf("wrote %zu/%zu/%zu samples to %s\n", split.train.size(), split.val.size(), split.test.size(),
                  gen_out.c_str());
    }
  } catch (const fedoap::Error& e) {
    std::fprintf(stderr, "error: %s\n", one_line(e.what()).c_str());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: InternalError: %s\n", one_line(e.what()).c_str());
    return 1;
  }
  return 0;
}
