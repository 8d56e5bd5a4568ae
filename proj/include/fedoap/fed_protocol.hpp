#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fedoap/calibration.hpp"
#include "fedoap/optim.hpp"
#include "fedoap/params.hpp"
#include "fedoap/rng.hpp"
#include "fedoap/segnet.hpp"
#include "fedoap/synthdata.hpp"

namespace fedoap {

// ---------------------------------------------------------------------------
// Strategies

enum class StrategyTag { FedOAP, FedAvgAll, LocalOnly };

std::string_view strategy_name(StrategyTag tag);  // fedoap | fedavg-all | local-only
std::optional<StrategyTag> parse_strategy(std::string_view name);

struct Strategy {
  StrategyTag tag = StrategyTag::FedOAP;
  bool use_dca = true;
  bool use_adapter = true;
  bool use_pbl = true;

  bool communicates() const { return tag != StrategyTag::LocalOnly; }
  bool exchanges_kv() const { return tag == StrategyTag::FedOAP && use_dca; }
  bool adapter_active() const { return tag == StrategyTag::FedAvgAll || use_adapter; }
  bool fine_tunes() const { return tag != StrategyTag::FedAvgAll; }
  bool pbl_active() const { return tag != StrategyTag::FedAvgAll && use_pbl; }

  // Whether the server averages a parameter carrying `tag`. Without DCA the
  // query projection has nothing to decouple from and is averaged too.
  bool shares(PartitionTag tag) const;
  // A bypassed adapter is frozen.
  bool trains(PartitionTag tag) const;

  ForwardOptions forward_options() const { return {adapter_active()}; }

  friend bool operator==(const Strategy&, const Strategy&) = default;
};

// ---------------------------------------------------------------------------
// Wire format: 64-byte header, then named-tensor sections, then KV sections.
//
// header:  "FOAP" | u16 version | u16 kind | u32 round | u32 client_id |
//          u32 tensor sections | u32 kv sections | u64 body bytes | zero pad
// tensor:  u32 name length | name | u8 rank | u32 dims[rank] | f32 data
// kv:      u32 client_id | u32 round | u32 n_tokens | u32 d | f32 keys | f32 values

enum class MessageKind : std::uint16_t { ClientUpdate = 1, Broadcast = 2, Checkpoint = 3 };

inline constexpr char kMessageMagic[4] = {'F', 'O', 'A', 'P'};
inline constexpr std::uint16_t kMessageVersion = 1;
inline constexpr std::size_t kMessageHeaderBytes = 64;
inline constexpr std::size_t kKVSectionHeaderBytes = 16;
inline constexpr std::size_t kWireScalarBytes = 4;

struct WireMessage {
  MessageKind kind = MessageKind::ClientUpdate;
  std::uint32_t round = 0;
  std::uint32_t client_id = 0;
  NamedTensors tensors;
  std::vector<KVTokens> kv;
};

std::size_t tensor_section_bytes(const std::string& name, const Shape& shape);
std::size_t kv_section_bytes(std::size_t n_tokens, std::size_t dim);

std::vector<std::uint8_t> encode_message(const WireMessage& message);
// Throws BadMagic, VersionUnsupported, TruncatedFile.
WireMessage decode_message(std::span<const std::uint8_t> bytes);

// Full parameter store as a Checkpoint message; tags are restored from the
// model config on load (NameSetMismatch when they disagree).
void save_checkpoint(const std::filesystem::path& path, const ParameterStore& params, std::uint32_t round = 0);
ParameterStore load_checkpoint(const std::filesystem::path& path, const ModelConfig& config);

// ---------------------------------------------------------------------------
// Messages

struct RoundMessage {
  std::uint32_t client_id = 0;
  std::uint32_t round = 0;
  NamedTensors shared_params;
  std::optional<KVTokens> kv_tokens;
  std::size_t payload_bytes = 0;
};

struct Broadcast {
  // The round the receiving clients are about to run.
  std::uint32_t round = 0;
  NamedTensors averaged_shared;
  std::vector<KVTokens> all_kv;  // ascending client_id
  std::size_t payload_bytes = 0;
};

WireMessage to_wire(const RoundMessage& message);
WireMessage to_wire(const Broadcast& broadcast);

enum class Direction { Uplink, Downlink };

class TransmissionLedger {
 public:
  struct Entry {
    std::uint32_t round;
    Direction direction;
    std::uint32_t client_id;
    std::size_t bytes;
  };

  void record(std::uint32_t round, Direction direction, std::uint32_t client_id, std::size_t bytes);

  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t total(Direction direction) const;
  std::size_t total() const { return total(Direction::Uplink) + total(Direction::Downlink); }
  std::size_t round_total(std::uint32_t round, Direction direction) const;
  std::size_t client_total(std::uint32_t client_id, Direction direction) const;
  std::uint32_t rounds() const;

 private:
  std::vector<Entry> entries_;
};

// ---------------------------------------------------------------------------
// Clients

struct TrainingConfig {
  ModelConfig model;
  AdamWConfig optimizer;
  PblConfig pbl;
  std::size_t batch_size = 16;
  std::size_t anchor_size = 4;
  std::size_t local_epochs = 1;
};

// Stacked splits; a split with no samples keeps an empty tensor and a zero
// count.
struct ClientDataset {
  Tensor train_images, train_masks;  // [N, 1, H, W]
  Tensor val_images, val_masks;
  Tensor test_images, test_masks;
  std::size_t n_train = 0, n_val = 0, n_test = 0;
};

ClientDataset client_dataset(const synth::DatasetSplit& split);

struct ClientState {
  std::uint32_t client_id = 0;
  std::string profile;
  ParameterStore params;
  AdamWState optimizer;
  ClientDataset dataset;
  Tensor anchor_batch;
  Rng rng;
  std::vector<KVTokens> foreign_kv_cache;
  std::uint32_t round = 0;
  // Mean alignment loss per round.
  std::vector<double> round_losses;
};

// The anchor batch is the first `anchor_size` training samples. The
// optimizer schedule spans `rounds * local_epochs` epochs.
ClientState make_client(std::uint32_t client_id, std::string profile, ParameterStore init, ClientDataset dataset,
                        const TrainingConfig& config, std::size_t rounds, std::uint64_t seed);

std::size_t batches_per_epoch(std::size_t n_samples, std::size_t batch_size);

// Writes the broadcast's averaged parameters into the client's shared slots and
// refreshes its foreign KV cache. Throws RoundMismatch, PartitionViolation,
// NameSetMismatch.
void apply_broadcast(ClientState& client, const Broadcast& broadcast, const Strategy& strategy);

// The shared parameters the client currently holds, under `strategy`.
NamedTensors shared_snapshot(const ParameterStore& params, const Strategy& strategy);

// Merge, `config.local_epochs` epochs of AdamW on the segmentation loss, KV
// refresh on the anchor batch, then the upload message.
RoundMessage client_local_round(ClientState& client, const Broadcast* broadcast, const TrainingConfig& config,
                                const Strategy& strategy);

// Mean of the shared tensors in ascending client order plus the sorted KV
// union. Throws EmptyMessageSet, RoundMismatch, NameSetMismatch.
Broadcast server_aggregate(std::span<const RoundMessage> messages);

struct AlignmentResult {
  TransmissionLedger ledger;
  std::optional<Broadcast> final_broadcast;
  // Filled only when AlignmentOptions::keep_log is set.
  std::vector<std::vector<RoundMessage>> round_messages;
  std::vector<std::vector<std::uint8_t>> wire_log;
};

using MergeObserver = std::function<void(std::uint32_t client_id, std::uint32_t round, const ParameterStore& before,
                                         const ParameterStore& after)>;

struct AlignmentOptions {
  bool keep_log = false;
  // Called after every broadcast merge, from the client's worker thread.
  MergeObserver on_merge;
};

// T rounds of local training and aggregation, one worker thread per client.
// Afterwards every client holds the last average merged with its own personal
// parameters.
AlignmentResult run_alignment(std::vector<ClientState>& clients, std::size_t rounds, const TrainingConfig& config,
                              const Strategy& strategy, const AlignmentOptions& options = {});

struct FineTuneResult {
  double initial_val_dice = 0.0;
  std::vector<double> epoch_val_dice;
  std::vector<double> epoch_losses;
  // 0 keeps the starting parameters, e means the state after epoch e.
  std::size_t best_epoch = 0;
  double best_val_dice = 0.0;
};

// Communication-free local epochs on the composite boundary loss (plain
// segmentation loss without PBL). Keeps the parameters with the best validation
// Dice. Throws EmptyValidationSplit.
FineTuneResult fine_tune(ClientState& client, std::size_t epochs, const TrainingConfig& config,
                         const Strategy& strategy);

enum class EvalSplit { Val, Test };

// Mean per-sample Dice of the binarized predictions. Throws EmptySplit.
double evaluate_client(const ClientState& client, EvalSplit split, const TrainingConfig& config,
                       const Strategy& strategy);

struct EvalReport {
  std::vector<double> per_client;
  double mean = 0.0;
};
EvalReport evaluate_clients(std::span<const ClientState> clients, EvalSplit split, const TrainingConfig& config,
                            const Strategy& strategy);

// Mean per-sample Dice between binarized logits [N,1,H,W] and masks.
double mean_sample_dice(const Tensor& logits, const Tensor& masks);

// ---------------------------------------------------------------------------
// Closed-form transmission per client per round.

struct TransmissionBytes {
  std::size_t uplink = 0;
  std::size_t downlink = 0;
  // Decomposition of one uplink message.
  std::size_t shared_scalars = 0;
  std::size_t kv_scalars = 0;
  std::size_t descriptor_bytes = 0;
};

TransmissionBytes transmission_bytes(const ModelConfig& config, const Strategy& strategy, std::size_t clients,
                                     std::size_t anchor_size);

}  // namespace fedoap
