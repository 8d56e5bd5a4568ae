#pragma once

// Small federations that train in well under a second.

#include <string>
#include <vector>

#include "fedoap/fed_protocol.hpp"
#include "fedoap/synthdata.hpp"

namespace fixture {

using namespace fedoap;

inline TrainingConfig tiny_training() {
  TrainingConfig t;
  t.model = {8, 1, 2, 1, 2};
  t.optimizer = {1e-3, 1e-6, 1e-5};
  t.batch_size = 4;
  t.anchor_size = 2;
  t.local_epochs = 1;
  return t;
}

inline ClientDataset tiny_dataset(const std::string& profile, std::size_t n, std::uint64_t seed, std::size_t size = 8) {
  auto samples = synth::generate_client_dataset(*synth::find_profile(profile), n, size, seed);
  return client_dataset(synth::split_dataset(std::move(samples), 0.2, 0.2, seed));
}

inline std::vector<ClientState> tiny_clients(std::size_t k, std::size_t rounds, const TrainingConfig& cfg,
                                             std::uint64_t seed = 1) {
  static const char* profiles[] = {"breast_like", "brain_like", "liver_like"};
  std::vector<ClientState> clients;
  for (std::size_t i = 0; i < k; ++i)
    clients.push_back(make_client(std::uint32_t(i), profiles[i % 3], init_model(cfg.model, seed),
                                  tiny_dataset(profiles[i % 3], 16, seed * 100 + i), cfg, rounds, seed));
  return clients;
}

}  // namespace fixture
