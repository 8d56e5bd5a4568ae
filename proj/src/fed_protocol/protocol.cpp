#include <algorithm>
#include <exception>
#include <numeric>
#include <thread>

#include "fedoap/error.hpp"
#include "fedoap/fed_protocol.hpp"

namespace fedoap {
namespace {

constexpr std::uint64_t kClientStream = 0xc11e47;

std::span<const KVTokens> attention_context(const ClientState& c, const Strategy& s) {
  if (!s.exchanges_kv()) return {};
  return c.foreign_kv_cache;
}

ParamFilter trainable_filter(const ParameterStore& params, const Strategy& s) {
  return [&params, s](const std::string& name) { return s.trains(params.tag(name)); };
}

std::vector<std::size_t> shuffled(std::size_t n, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

// One pass over the training split; returns the mean minimized loss.
double train_epoch(ClientState& c, AdamWState& opt, const TrainingConfig& cfg, const Strategy& s, bool pbl) {
  const std::size_t n = c.dataset.n_train;
  const std::vector<std::size_t> order = shuffled(n, c.rng);
  const ParamFilter trainable = trainable_filter(c.params, s);
  const std::span<const KVTokens> foreign = attention_context(c, s);
  double total = 0.0;
  std::size_t batches = 0;
  for (std::size_t start = 0; start < n; start += cfg.batch_size) {
    const std::span<const std::size_t> idx(order.data() + start, std::min(cfg.batch_size, n - start));
    Tape tape;
    BoundParams bound = bind_params(tape, c.params, trainable);
    Var logits = forward(bound, tape.constant(gather_samples(c.dataset.train_images, idx)), foreign, cfg.model,
                         s.forward_options());
    const Tensor target = gather_samples(c.dataset.train_masks, idx);
    Var loss = pbl ? composite_pbl_loss(logits, target, cfg.pbl, c.rng).composite
                   : segmentation_loss(logits, target).total;
    const Gradients grads = tape.backward(loss);
    NamedTensors named;
    for (const auto& [name, var] : bound)
      if (var.requires_grad()) named.emplace(name, grads.of(var));
    adamw_step(opt, c.params, named, trainable);
    total += loss.value().item();
    ++batches;
  }
  return total / double(batches);
}

std::size_t shared_name_count(const ParameterStore& params, const Strategy& s) {
  std::size_t n = 0;
  for (const auto& [name, p] : params) n += s.shares(p.tag);
  return n;
}

}  // namespace

std::string_view strategy_name(StrategyTag tag) {
  switch (tag) {
    case StrategyTag::FedOAP: return "fedoap";
    case StrategyTag::FedAvgAll: return "fedavg-all";
    case StrategyTag::LocalOnly: return "local-only";
  }
  return "?";
}

std::optional<StrategyTag> parse_strategy(std::string_view name) {
  for (StrategyTag t : {StrategyTag::FedOAP, StrategyTag::FedAvgAll, StrategyTag::LocalOnly})
    if (strategy_name(t) == name) return t;
  return std::nullopt;
}

bool Strategy::shares(PartitionTag p) const {
  if (tag == StrategyTag::FedAvgAll) return true;
  switch (p) {
    case PartitionTag::Shared: return true;
    case PartitionTag::PersonalQuery: return !use_dca;
    case PartitionTag::PersonalAdapter: return false;
  }
  return false;
}

bool Strategy::trains(PartitionTag p) const { return p != PartitionTag::PersonalAdapter || adapter_active(); }

ClientDataset client_dataset(const synth::DatasetSplit& split) {
  ClientDataset d;
  d.n_train = split.train.size();
  d.n_val = split.val.size();
  d.n_test = split.test.size();
  if (d.n_train) d.train_images = synth::stack_images(split.train), d.train_masks = synth::stack_masks(split.train);
  if (d.n_val) d.val_images = synth::stack_images(split.val), d.val_masks = synth::stack_masks(split.val);
  if (d.n_test) d.test_images = synth::stack_images(split.test), d.test_masks = synth::stack_masks(split.test);
  return d;
}

std::size_t batches_per_epoch(std::size_t n_samples, std::size_t batch_size) {
  require(batch_size >= 1, ErrorCode::InvalidConfig, "batch size must be >= 1");
  return (n_samples + batch_size - 1) / batch_size;
}

ClientState make_client(std::uint32_t client_id, std::string profile, ParameterStore init, ClientDataset dataset,
                        const TrainingConfig& config, std::size_t rounds, std::uint64_t seed) {
  require(dataset.n_train >= 1, ErrorCode::EmptySplit, "client " + std::to_string(client_id) + " has no training data");
  ClientState c;
  c.client_id = client_id;
  c.profile = std::move(profile);
  c.params = std::move(init);
  const std::size_t steps = rounds * config.local_epochs * batches_per_epoch(dataset.n_train, config.batch_size);
  c.optimizer = AdamWState(config.optimizer, std::max<std::size_t>(1, steps));
  const std::size_t a = std::min(config.anchor_size, dataset.n_train);
  if (a > 0) {
    std::vector<std::size_t> idx(a);
    std::iota(idx.begin(), idx.end(), 0);
    c.anchor_batch = gather_samples(dataset.train_images, idx);
  }
  c.dataset = std::move(dataset);
  c.rng = Rng(derive_seed(seed, kClientStream + client_id));
  return c;
}

NamedTensors shared_snapshot(const ParameterStore& params, const Strategy& strategy) {
  NamedTensors out;
  for (const auto& [name, p] : params)
    if (strategy.shares(p.tag)) out.emplace(name, p.value);
  return out;
}

void apply_broadcast(ClientState& client, const Broadcast& broadcast, const Strategy& strategy) {
  require(broadcast.round == client.round, ErrorCode::RoundMismatch,
          "broadcast for round " + std::to_string(broadcast.round) + " reached client " +
              std::to_string(client.client_id) + " at round " + std::to_string(client.round));
  for (const auto& [name, t] : broadcast.averaged_shared) {
    require(client.params.contains(name), ErrorCode::NameSetMismatch, "broadcast carries unknown parameter " + name);
    require(strategy.shares(client.params.tag(name)), ErrorCode::PartitionViolation,
            "broadcast touches personal parameter " + name);
    require(t.shape() == client.params.value(name).shape(), ErrorCode::ShapeMismatch,
            "broadcast shape mismatch for " + name);
  }
  require(broadcast.averaged_shared.size() == shared_name_count(client.params, strategy), ErrorCode::NameSetMismatch,
          "broadcast does not cover every shared parameter");
  for (const auto& [name, t] : broadcast.averaged_shared) client.params.value(name) = t;

  client.foreign_kv_cache.clear();
  if (strategy.exchanges_kv())
    for (const KVTokens& kv : broadcast.all_kv)
      if (kv.client_id != client.client_id) client.foreign_kv_cache.push_back(kv);
}

RoundMessage client_local_round(ClientState& client, const Broadcast* broadcast, const TrainingConfig& config,
                                const Strategy& strategy) {
  if (broadcast) apply_broadcast(client, *broadcast, strategy);
  if (config.local_epochs > 0) {
    double loss = 0.0;
    for (std::size_t e = 0; e < config.local_epochs; ++e)
      loss += train_epoch(client, client.optimizer, config, strategy, false);
    client.round_losses.push_back(loss / double(config.local_epochs));
  }

  RoundMessage msg;
  msg.client_id = client.client_id;
  msg.round = client.round;
  msg.shared_params = shared_snapshot(client.params, strategy);
  if (strategy.exchanges_kv() && client.anchor_batch.numel() > 0)
    msg.kv_tokens = compute_local_kv(client.params, client.anchor_batch, config.model, client.client_id, client.round);
  msg.payload_bytes = encode_message(to_wire(msg)).size();
  ++client.round;
  return msg;
}

Broadcast server_aggregate(std::span<const RoundMessage> messages) {
  require(!messages.empty(), ErrorCode::EmptyMessageSet, "nothing to aggregate");
  std::vector<const RoundMessage*> order;
  for (const RoundMessage& m : messages) order.push_back(&m);
  std::sort(order.begin(), order.end(), [](auto* a, auto* b) { return a->client_id < b->client_id; });

  const RoundMessage& first = *order.front();
  for (std::size_t i = 0; i < order.size(); ++i) {
    const RoundMessage& m = *order[i];
    require(i == 0 || order[i - 1]->client_id != m.client_id, ErrorCode::InvalidArgument,
            "duplicate client id " + std::to_string(m.client_id));
    require(m.round == first.round, ErrorCode::RoundMismatch,
            "round " + std::to_string(m.round) + " mixed with round " + std::to_string(first.round));
    require(m.shared_params.size() == first.shared_params.size(), ErrorCode::NameSetMismatch,
            "client " + std::to_string(m.client_id) + " shares a different parameter set");
    for (const auto& [name, t] : m.shared_params) {
      auto it = first.shared_params.find(name);
      require(it != first.shared_params.end(), ErrorCode::NameSetMismatch,
              "client " + std::to_string(m.client_id) + " shares unexpected " + name);
      require(it->second.shape() == t.shape(), ErrorCode::ShapeMismatch, "shape mismatch for shared " + name);
    }
  }

  Broadcast b;
  b.round = first.round + 1;
  const double k = double(order.size());
  for (const auto& [name, t0] : first.shared_params) {
    Tensor sum = t0;
    for (std::size_t i = 1; i < order.size(); ++i) {
      const Tensor& t = order[i]->shared_params.at(name);
      for (std::size_t j = 0; j < sum.numel(); ++j) sum[j] += t[j];
    }
    for (double& v : sum.storage()) v /= k;
    b.averaged_shared.emplace(name, std::move(sum));
  }
  for (const RoundMessage* m : order)
    if (m->kv_tokens) b.all_kv.push_back(*m->kv_tokens);
  b.payload_bytes = encode_message(to_wire(b)).size();
  return b;
}

AlignmentResult run_alignment(std::vector<ClientState>& clients, std::size_t rounds, const TrainingConfig& config,
                              const Strategy& strategy, const AlignmentOptions& options) {
  require(!clients.empty(), ErrorCode::InvalidArgument, "alignment needs at least one client");
  {
    std::vector<std::uint32_t> ids;
    for (const auto& c : clients) ids.push_back(c.client_id);
    std::sort(ids.begin(), ids.end());
    require(std::adjacent_find(ids.begin(), ids.end()) == ids.end(), ErrorCode::InvalidArgument,
            "client ids must be unique");
  }

  auto merge = [&](ClientState& c, const Broadcast& b) {
    if (!options.on_merge) return apply_broadcast(c, b, strategy);
    const ParameterStore before = c.params;
    apply_broadcast(c, b, strategy);
    options.on_merge(c.client_id, b.round, before, c.params);
  };

  AlignmentResult result;
  std::optional<Broadcast> last;
  for (std::size_t t = 0; t < rounds; ++t) {
    std::vector<RoundMessage> messages(clients.size());
    std::vector<std::exception_ptr> errors(clients.size());
    std::vector<std::thread> workers;
    for (std::size_t k = 0; k < clients.size(); ++k)
      workers.emplace_back([&, k] {
        try {
          if (last) merge(clients[k], *last);
          messages[k] = client_local_round(clients[k], nullptr, config, strategy);
        } catch (...) {
          errors[k] = std::current_exception();
        }
      });
    for (auto& w : workers) w.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);

    const auto round = std::uint32_t(t);
    if (options.keep_log)
      for (const auto& m : messages) result.wire_log.push_back(encode_message(to_wire(m)));
    if (strategy.communicates()) {
      for (const auto& m : messages) result.ledger.record(round, Direction::Uplink, m.client_id, m.payload_bytes);
      Broadcast b = server_aggregate(messages);
      for (const auto& c : clients) result.ledger.record(round, Direction::Downlink, c.client_id, b.payload_bytes);
      if (options.keep_log) result.wire_log.push_back(encode_message(to_wire(b)));
      last = std::move(b);
    }
    if (options.keep_log) result.round_messages.push_back(std::move(messages));
  }
  if (last)
    for (auto& c : clients) merge(c, *last);
  result.final_broadcast = std::move(last);
  return result;
}

double mean_sample_dice(const Tensor& logits, const Tensor& masks) {
  require(logits.shape() == masks.shape() && logits.rank() == 4, ErrorCode::ShapeMismatch,
          "logits and masks must share an [N,1,H,W] shape");
  const std::size_t n = logits.dim(0);
  require(n >= 1, ErrorCode::EmptySplit, "no samples to score");
  const Tensor pred = binarize_logits(logits);
  const std::size_t per = logits.numel() / n;
  const Shape one{per};
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    Tensor p(one, Buffer(pred.data() + i * per, pred.data() + (i + 1) * per));
    Tensor m(one, Buffer(masks.data() + i * per, masks.data() + (i + 1) * per));
    sum += dice_score(p, m);
  }
  return sum / double(n);
}

double evaluate_client(const ClientState& client, EvalSplit split, const TrainingConfig& config,
                       const Strategy& strategy) {
  const bool val = split == EvalSplit::Val;
  const std::size_t n = val ? client.dataset.n_val : client.dataset.n_test;
  require(n >= 1, ErrorCode::EmptySplit,
          std::string("client ") + std::to_string(client.client_id) + " has an empty " + (val ? "val" : "test") +
              " split");
  const Tensor& images = val ? client.dataset.val_images : client.dataset.test_images;
  const Tensor& masks = val ? client.dataset.val_masks : client.dataset.test_masks;
  const Tensor logits =
      predict_logits(client.params, images, attention_context(client, strategy), config.model, strategy.forward_options());
  return mean_sample_dice(logits, masks);
}

EvalReport evaluate_clients(std::span<const ClientState> clients, EvalSplit split, const TrainingConfig& config,
                            const Strategy& strategy) {
  require(!clients.empty(), ErrorCode::EmptySplit, "no clients to evaluate");
  EvalReport r;
  for (const auto& c : clients) r.per_client.push_back(evaluate_client(c, split, config, strategy));
  r.mean = std::accumulate(r.per_client.begin(), r.per_client.end(), 0.0) / double(r.per_client.size());
  return r;
}

FineTuneResult fine_tune(ClientState& client, std::size_t epochs, const TrainingConfig& config,
                         const Strategy& strategy) {
  require(client.dataset.n_val >= 1, ErrorCode::EmptyValidationSplit,
          "client " + std::to_string(client.client_id) + " has no validation samples");
  FineTuneResult r;
  r.initial_val_dice = evaluate_client(client, EvalSplit::Val, config, strategy);
  r.best_val_dice = r.initial_val_dice;
  if (epochs == 0) return r;

  AdamWState opt(config.optimizer, epochs * batches_per_epoch(client.dataset.n_train, config.batch_size));
  ParameterStore best = client.params;
  for (std::size_t e = 1; e <= epochs; ++e) {
    r.epoch_losses.push_back(train_epoch(client, opt, config, strategy, strategy.pbl_active()));
    const double dice = evaluate_client(client, EvalSplit::Val, config, strategy);
    r.epoch_val_dice.push_back(dice);
    if (dice > r.best_val_dice) {
      r.best_val_dice = dice;
      r.best_epoch = e;
      best = client.params;
    }
  }
  client.params = std::move(best);
  return r;
}

TransmissionBytes transmission_bytes(const ModelConfig& config, const Strategy& strategy, std::size_t clients,
                                     std::size_t anchor_size) {
  config.validate();
  TransmissionBytes out;
  if (!strategy.communicates()) return out;
  std::size_t tensors = 0;
  for (const ParamSpec& spec : parameter_specs(config)) {
    if (!strategy.shares(spec.tag)) continue;
    tensors += tensor_section_bytes(spec.name, spec.shape);
    out.shared_scalars += shape_numel(spec.shape);
  }
  out.descriptor_bytes = tensors - kWireScalarBytes * out.shared_scalars;
  std::size_t kv = 0;
  if (strategy.exchanges_kv() && anchor_size > 0) {
    const std::size_t n_tokens = anchor_size * config.tokens_per_sample();
    kv = kv_section_bytes(n_tokens, config.bottleneck_dim());
    out.kv_scalars = 2 * n_tokens * config.bottleneck_dim();
    out.descriptor_bytes += kKVSectionHeaderBytes;
  }
  out.uplink = kMessageHeaderBytes + tensors + kv;
  out.downlink = kMessageHeaderBytes + tensors + clients * kv;
  return out;
}

}  // namespace fedoap
