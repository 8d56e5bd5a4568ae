#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <unordered_map>
#include <vector>

#include "fedoap/fed_protocol.hpp"

namespace protocol_checks {

using namespace fedoap;

// True when any needle (all of equal length) occurs in any message. Rabin-Karp
// over each message, with exact comparison on hash hits.
inline bool contains_any(const std::vector<std::vector<std::uint8_t>>& haystacks,
                         const std::vector<std::vector<std::uint8_t>>& needles) {
  if (needles.empty()) return false;
  constexpr std::uint64_t kBase = 1099511628211ull;
  const std::size_t len = needles.front().size();
  auto hash = [&](const std::uint8_t* p) {
    std::uint64_t h = 0;
    for (std::size_t i = 0; i < len; ++i) h = h * kBase + p[i];
    return h;
  };
  std::unordered_multimap<std::uint64_t, const std::vector<std::uint8_t>*> index;
  for (const auto& n : needles) index.emplace(hash(n.data()), &n);
  std::uint64_t top = 1;  // kBase^(len-1)
  for (std::size_t i = 1; i < len; ++i) top *= kBase;
  for (const auto& msg : haystacks) {
    if (msg.size() < len) continue;
    std::uint64_t h = hash(msg.data());
    for (std::size_t at = 0;; ++at) {
      const auto [lo, hi] = index.equal_range(h);
      for (auto it = lo; it != hi; ++it)
        if (std::equal(it->second->begin(), it->second->end(), msg.begin() + std::ptrdiff_t(at))) return true;
      if (at + len >= msg.size()) break;
      h = (h - msg[at] * top) * kBase + msg[at + len];
    }
  }
  return false;
}

// Looks for any image row (as f32 bytes) or whole mask (as u8 bytes) of the
// client's training data inside the serialized traffic.
inline bool leaks_samples(const std::vector<std::vector<std::uint8_t>>& wire, const ClientDataset& data) {
  const std::size_t side = data.train_images.dim(3), pixels = side * side;
  std::vector<std::vector<std::uint8_t>> rows, masks;
  for (std::size_t r = 0; r < data.train_images.numel() / side; ++r) {
    std::vector<std::uint8_t> row(side * 4);
    for (std::size_t j = 0; j < side; ++j) {
      const float v = float(data.train_images[r * side + j]);
      std::memcpy(row.data() + 4 * j, &v, 4);
    }
    rows.push_back(std::move(row));
  }
  for (std::size_t i = 0; i < data.n_train; ++i) {
    std::vector<std::uint8_t> mask(pixels);
    for (std::size_t j = 0; j < pixels; ++j) mask[j] = std::uint8_t(data.train_masks[i * pixels + j]);
    masks.push_back(std::move(mask));
  }
  return contains_any(wire, rows) || contains_any(wire, masks);
}

}  // namespace protocol_checks
