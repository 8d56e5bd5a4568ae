#include <cmath>
#include <fstream>
#include <numeric>

#include "fedoap/error.hpp"
#include "fedoap/harness.hpp"

namespace fedoap::harness {
namespace {

using nlohmann::json;
using nlohmann::ordered_json;

constexpr std::uint64_t kSplitStream = 0x5b17;
constexpr std::uint64_t kHeldoutInitStream = 0x4e1d;

std::uint64_t data_seed(std::uint64_t seed, const std::string& profile, std::size_t client) {
  return derive_seed(derive_seed(seed, fnv1a(profile)), client);
}

ClientDataset make_dataset(const ExperimentConfig& cfg, const std::string& profile_name, std::uint64_t seed,
                           std::size_t client) {
  const auto profile = synth::find_profile(profile_name);
  require(profile.has_value(), ErrorCode::InvalidConfig, "unknown profile " + profile_name);
  const std::uint64_t ds = data_seed(seed, profile_name, client);
  auto samples = synth::generate_client_dataset(*profile, cfg.samples_per_client, cfg.image_size, ds);
  return client_dataset(synth::split_dataset(std::move(samples), cfg.test_frac, cfg.val_frac, derive_seed(ds, kSplitStream)));
}

struct Aligned {
  std::vector<ClientState> clients;
  AlignmentResult alignment;
};

Aligned align_seed(const ExperimentConfig& cfg, const Strategy& strategy, std::uint64_t seed,
                   const AlignmentOptions& options) {
  Aligned a{build_clients(cfg, seed), {}};
  a.alignment = run_alignment(a.clients, cfg.rounds, cfg.training(), strategy, options);
  return a;
}

SeedRun finish_seed(const ExperimentConfig& cfg, const Strategy& strategy, std::uint64_t seed,
                    std::vector<ClientState> clients, TransmissionLedger ledger) {
  const TrainingConfig tc = cfg.training();
  SeedRun run;
  run.seed = seed;
  run.ledger = std::move(ledger);
  for (ClientState& c : clients) {
    ClientRun cr;
    cr.client_id = c.client_id;
    cr.profile = c.profile;
    cr.round_losses = c.round_losses;
    if (strategy.fine_tunes()) cr.finetune = fine_tune(c, cfg.finetune_epochs, tc, strategy);
    cr.test_dice = evaluate_client(c, EvalSplit::Test, tc, strategy);
    run.clients.push_back(std::move(cr));
  }
  double sum = 0.0;
  for (const auto& c : run.clients) sum += c.test_dice;
  run.mean_test_dice = sum / double(run.clients.size());
  return run;
}

Strategy ablation_strategy(bool dca, bool adapter, bool pbl) { return {StrategyTag::FedOAP, dca, adapter, pbl}; }

}  // namespace

ModelConfig ExperimentConfig::model() const { return {image_size, 1, base_channels, depth, attention_heads}; }

TrainingConfig ExperimentConfig::training() const {
  TrainingConfig t;
  t.model = model();
  t.optimizer.base_lr = lr;
  t.optimizer.min_lr = min_lr;
  t.optimizer.weight_decay = weight_decay;
  t.pbl = {tau, lambda, noise_variance};
  t.batch_size = batch_size;
  t.anchor_size = anchor_size;
  t.local_epochs = local_epochs;
  return t;
}

void ExperimentConfig::validate() const {
  auto check = [](bool ok, const std::string& what) { require(ok, ErrorCode::InvalidConfig, what); };
  check(clients >= 1, "clients must be >= 1");
  check(samples_per_client >= 3, "samples_per_client must be >= 3");
  check(batch_size >= 1, "batch_size must be >= 1");
  check(lr > 0.0 && min_lr >= 0.0 && min_lr <= lr, "need 0 <= min_lr <= lr and lr > 0");
  check(weight_decay >= 0.0, "weight_decay must be >= 0");
  check(!seeds.empty(), "seeds must not be empty");
  check(!profiles.empty(), "profiles must not be empty");
  for (const auto& p : profiles) check(synth::find_profile(p).has_value(), "unknown profile " + p);
  check(synth::find_profile(heldout_profile).has_value(), "unknown heldout_profile " + heldout_profile);
  for (const auto& p : profiles) check(p != heldout_profile, "heldout_profile " + p + " is also a training profile");
  check(!out.empty(), "out must not be empty");
  model().validate();
  PblConfig{tau, lambda, noise_variance}.validate();
}

std::vector<std::string> config_keys() {
  return {"strategy",   "use_dca",      "use_adapter",     "use_pbl",         "clients",
          "rounds",     "local_epochs", "finetune_epochs", "image_size",      "base_channels",
          "depth",      "attention_heads", "samples_per_client", "test_frac", "val_frac",
          "batch_size", "anchor_size",  "lr",              "min_lr",          "weight_decay",
          "tau",        "lambda",       "noise_variance",  "seeds",           "profiles",
          "heldout_profile", "out"};
}

ordered_json ExperimentConfig::to_json() const {
  ordered_json j;
  j["strategy"] = std::string(strategy_name(strategy.tag));
  j["use_dca"] = strategy.use_dca;
  j["use_adapter"] = strategy.use_adapter;
  j["use_pbl"] = strategy.use_pbl;
  j["clients"] = clients;
  j["rounds"] = rounds;
  j["local_epochs"] = local_epochs;
  j["finetune_epochs"] = finetune_epochs;
  j["image_size"] = image_size;
  j["base_channels"] = base_channels;
  j["depth"] = depth;
  j["attention_heads"] = attention_heads;
  j["samples_per_client"] = samples_per_client;
  j["test_frac"] = test_frac;
  j["val_frac"] = val_frac;
  j["batch_size"] = batch_size;
  j["anchor_size"] = anchor_size;
  j["lr"] = lr;
  j["min_lr"] = min_lr;
  j["weight_decay"] = weight_decay;
  j["tau"] = tau;
  j["lambda"] = lambda;
  j["noise_variance"] = noise_variance;
  j["seeds"] = seeds;
  j["profiles"] = profiles;
  j["heldout_profile"] = heldout_profile;
  j["out"] = out;
  return j;
}

void ExperimentConfig::apply_json(const json& j) {
  require(j.is_object(), ErrorCode::InvalidConfig, "config must be a JSON object");
  const auto keys = config_keys();
  // nlohmann converts -1 or 2.5 to size_t silently, so counts are checked first.
  auto count = [](const json& v) {
    require(v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0), ErrorCode::InvalidConfig,
            "expected a non-negative integer, got " + v.dump());
    return v.get<std::uint64_t>();
  };
  for (const auto& [key, value] : j.items()) {
    require(std::find(keys.begin(), keys.end(), key) != keys.end(), ErrorCode::InvalidConfig,
            "unknown config key " + key);
    try {
      if (key == "strategy") {
        const auto tag = parse_strategy(value.get<std::string>());
        require(tag.has_value(), ErrorCode::InvalidConfig, "unknown strategy " + value.get<std::string>());
        strategy.tag = *tag;
      } else if (key == "use_dca") {
        strategy.use_dca = value.get<bool>();
      } else if (key == "use_adapter") {
        strategy.use_adapter = value.get<bool>();
      } else if (key == "use_pbl") {
        strategy.use_pbl = value.get<bool>();
      } else if (key == "clients") {
        clients = count(value);
      } else if (key == "rounds") {
        rounds = count(value);
      } else if (key == "local_epochs") {
        local_epochs = count(value);
      } else if (key == "finetune_epochs") {
        finetune_epochs = count(value);
      } else if (key == "image_size") {
        image_size = count(value);
      } else if (key == "base_channels") {
        base_channels = count(value);
      } else if (key == "depth") {
        depth = count(value);
      } else if (key == "attention_heads") {
        attention_heads = count(value);
      } else if (key == "samples_per_client") {
        samples_per_client = count(value);
      } else if (key == "test_frac") {
        test_frac = value.get<double>();
      } else if (key == "val_frac") {
        val_frac = value.get<double>();
      } else if (key == "batch_size") {
        batch_size = count(value);
      } else if (key == "anchor_size") {
        anchor_size = count(value);
      } else if (key == "lr") {
        lr = value.get<double>();
      } else if (key == "min_lr") {
        min_lr = value.get<double>();
      } else if (key == "weight_decay") {
        weight_decay = value.get<double>();
      } else if (key == "tau") {
        tau = value.get<double>();
      } else if (key == "lambda") {
        lambda = value.get<double>();
      } else if (key == "noise_variance") {
        noise_variance = value.get<double>();
      } else if (key == "seeds") {
        require(value.is_array(), ErrorCode::InvalidConfig, "seeds must be an array");
        seeds.clear();
        for (const auto& v : value) seeds.push_back(count(v));
      } else if (key == "profiles") {
        profiles = value.get<std::vector<std::string>>();
      } else if (key == "heldout_profile") {
        heldout_profile = value.get<std::string>();
      } else if (key == "out") {
        out = value.get<std::string>();
      }
    } catch (const json::exception& e) {
      fail(ErrorCode::InvalidConfig, "bad value for " + key + ": " + e.what());
    }
  }
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(bool(in), ErrorCode::IoError, "cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    fail(ErrorCode::InvalidConfig, "config " + path.string() + " is not valid JSON: " + e.what());
  }
  ExperimentConfig cfg;
  cfg.apply_json(j);
  return cfg;
}

std::vector<ClientState> build_clients(const ExperimentConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const TrainingConfig tc = cfg.training();
  const ParameterStore init = init_model(cfg.model(), seed);
  std::vector<ClientState> clients;
  for (std::size_t k = 0; k < cfg.clients; ++k) {
    const std::string profile = cfg.profile_of(k);
    clients.push_back(make_client(std::uint32_t(k), profile, init, make_dataset(cfg, profile, seed, k), tc, cfg.rounds,
                                  seed));
  }
  return clients;
}

SeedRun run_seed(const ExperimentConfig& cfg, std::uint64_t seed, const AlignmentOptions& options) {
  Aligned a = align_seed(cfg, cfg.strategy, seed, options);
  return finish_seed(cfg, cfg.strategy, seed, std::move(a.clients), std::move(a.alignment.ledger));
}

MeanStd mean_std(const std::vector<double>& values) {
  MeanStd r;
  if (values.empty()) return r;
  r.mean = std::accumulate(values.begin(), values.end(), 0.0) / double(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - r.mean) * (v - r.mean);
    r.std = std::sqrt(ss / double(values.size() - 1));
  }
  return r;
}

TrainResult run_train(const ExperimentConfig& cfg) {
  cfg.validate();
  TrainResult r;
  for (std::uint64_t seed : cfg.seeds) r.runs.push_back(run_seed(cfg, seed));
  for (std::size_t k = 0; k < cfg.clients; ++k) {
    std::vector<double> v;
    for (const auto& run : r.runs) v.push_back(run.clients[k].test_dice);
    r.per_client.push_back(mean_std(v));
  }
  std::vector<double> means;
  for (const auto& run : r.runs) means.push_back(run.mean_test_dice);
  r.mean_test_dice = mean_std(means);
  return r;
}

std::vector<AblationRow> run_ablation(const ExperimentConfig& cfg) {
  cfg.validate();
  std::vector<AblationRow> rows = {{"none", false, false, false, {}, {}, {}, {}},
                                   {"dca", true, false, false, {}, {}, {}, {}},
                                   {"dca+adapter", true, true, false, {}, {}, {}, {}},
                                   {"dca+adapter+pbl", true, true, true, {}, {}, {}, {}}};
  auto record = [](AblationRow& row, const SeedRun& run) {
    std::vector<double> per_client;
    for (const auto& c : run.clients) per_client.push_back(c.test_dice);
    row.per_seed_client.push_back(std::move(per_client));
    row.per_seed_mean.push_back(run.mean_test_dice);
  };
  for (std::uint64_t seed : cfg.seeds) {
    for (std::size_t i = 0; i < 2; ++i) {
      const Strategy s = ablation_strategy(rows[i].use_dca, rows[i].use_adapter, rows[i].use_pbl);
      Aligned a = align_seed(cfg, s, seed, {});
      record(rows[i], finish_seed(cfg, s, seed, std::move(a.clients), std::move(a.alignment.ledger)));
    }
    // The last two rows differ only in the fine-tuning loss and share one alignment.
    const Strategy with_adapter = ablation_strategy(true, true, false);
    Aligned a = align_seed(cfg, with_adapter, seed, {});
    record(rows[2], finish_seed(cfg, with_adapter, seed, a.clients, a.alignment.ledger));
    record(rows[3], finish_seed(cfg, ablation_strategy(true, true, true), seed, std::move(a.clients),
                                std::move(a.alignment.ledger)));
  }
  for (AblationRow& row : rows) {
    row.client_means.assign(cfg.clients, 0.0);
    for (const auto& per_client : row.per_seed_client)
      for (std::size_t k = 0; k < cfg.clients; ++k) row.client_means[k] += per_client[k] / double(cfg.seeds.size());
    row.mean = mean_std(row.per_seed_mean);
  }
  return rows;
}

GeneralizationResult run_generalize(const ExperimentConfig& cfg) {
  cfg.validate();
  const TrainingConfig tc = cfg.training();
  GeneralizationResult r;
  for (std::uint64_t seed : cfg.seeds) {
    Aligned a = align_seed(cfg, cfg.strategy, seed, {});

    const std::uint32_t id = std::uint32_t(cfg.clients);
    ParameterStore params = init_model(cfg.model(), derive_seed(seed, kHeldoutInitStream));
    ClientState c = make_client(id, cfg.heldout_profile, std::move(params),
                                make_dataset(cfg, cfg.heldout_profile, seed, id), tc, 0, seed);
    if (a.alignment.final_broadcast) {
      Broadcast b = *a.alignment.final_broadcast;
      b.round = c.round;
      apply_broadcast(c, b, cfg.strategy);
    }

    GeneralizationRun run;
    run.seed = seed;
    run.zero_shot_dice = evaluate_client(c, EvalSplit::Test, tc, cfg.strategy);
    run.finetune = fine_tune(c, cfg.finetune_epochs, tc, cfg.strategy);
    run.fine_tuned_dice = evaluate_client(c, EvalSplit::Test, tc, cfg.strategy);
    r.runs.push_back(run);
  }
  std::vector<double> zs, ft, gain;
  for (const auto& run : r.runs) {
    zs.push_back(run.zero_shot_dice);
    ft.push_back(run.fine_tuned_dice);
    gain.push_back(run.fine_tuned_dice - run.zero_shot_dice);
  }
  r.zero_shot = mean_std(zs);
  r.fine_tuned = mean_std(ft);
  r.gain = mean_std(gain);
  return r;
}

TransmissionRow measure_transmission(const ExperimentConfig& cfg, StrategyTag tag, std::size_t clients,
                                     const std::string& scale) {
  ExperimentConfig c = cfg;
  c.clients = clients;
  c.strategy.tag = tag;
  Aligned a = align_seed(c, c.strategy, c.seeds.front(), {});
  const TransmissionLedger& ledger = a.alignment.ledger;

  TransmissionRow row;
  row.scale = scale;
  row.strategy = tag;
  row.clients = clients;
  row.rounds = c.rounds;
  row.closed_form = transmission_bytes(c.model(), c.strategy, clients, c.anchor_size);
  const std::size_t messages = clients * c.rounds;
  row.uplink_measured = messages ? ledger.total(Direction::Uplink) / messages : 0;
  row.downlink_measured = messages ? ledger.total(Direction::Downlink) / messages : 0;
  std::size_t uplinks = 0, downlinks = 0;
  bool exact = true;
  for (const auto& e : ledger.entries()) {
    const bool up = e.direction == Direction::Uplink;
    (up ? uplinks : downlinks)++;
    exact = exact && e.bytes == (up ? row.closed_form.uplink : row.closed_form.downlink);
  }
  const std::size_t expected_entries = c.strategy.communicates() ? messages : 0;
  row.match = exact && uplinks == expected_entries && downlinks == expected_entries &&
              row.uplink_measured == row.closed_form.uplink && row.downlink_measured == row.closed_form.downlink;
  return row;
}

std::vector<TransmissionRow> run_transmission(const ExperimentConfig& cfg, bool include_paper_scale) {
  cfg.validate();
  std::vector<TransmissionRow> rows;
  std::vector<std::size_t> ks = {1};
  if (cfg.clients != 1) ks.push_back(cfg.clients);
  for (StrategyTag tag : {StrategyTag::FedOAP, StrategyTag::FedAvgAll})
    for (std::size_t k : ks) rows.push_back(measure_transmission(cfg, tag, k, "desk"));

  if (include_paper_scale) {
    // One communication round of the full-size model; byte counts do not
    // depend on training, so no local epochs run.
    ExperimentConfig paper = cfg;
    const ModelConfig m = ModelConfig::paper_scale();
    paper.image_size = m.image_size;
    paper.base_channels = m.base_channels;
    paper.depth = m.depth;
    paper.attention_heads = m.attention_heads;
    paper.samples_per_client = paper.anchor_size + 4;
    paper.rounds = 1;
    paper.local_epochs = 0;
    for (StrategyTag tag : {StrategyTag::FedOAP, StrategyTag::FedAvgAll})
      rows.push_back(measure_transmission(paper, tag, cfg.clients, "paper"));
  }

  for (const auto& row : rows)
    if (!row.match) {
      const std::string what = row.scale + " " + std::string(strategy_name(row.strategy)) + " K=" +
                               std::to_string(row.clients) + ": closed form " + std::to_string(row.closed_form.uplink) +
                               "/" + std::to_string(row.closed_form.downlink) + " vs measured " +
                               std::to_string(row.uplink_measured) + "/" + std::to_string(row.downlink_measured);
      throw TransmissionMismatch(what, rows);
    }
  return rows;
}

}  // namespace fedoap::harness
