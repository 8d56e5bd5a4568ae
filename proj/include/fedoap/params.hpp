#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <string>
#include <string_view>

#include "fedoap/tensor.hpp"

namespace fedoap {

// Which side of the shared/personal split a parameter sits on. Personal
// parameters never leave the client.
enum class PartitionTag { Shared, PersonalQuery, PersonalAdapter };

constexpr bool is_personal(PartitionTag tag) { return tag != PartitionTag::Shared; }
std::string_view partition_tag_name(PartitionTag tag);

using NamedTensors = std::map<std::string, Tensor>;

struct Parameter {
  Tensor value;
  PartitionTag tag = PartitionTag::Shared;

  friend bool operator==(const Parameter&, const Parameter&) = default;
};

// Named, partition-tagged trainable tensors for one model. Iteration is in
// lexicographic name order.
class ParameterStore {
 public:
  using Map = std::map<std::string, Parameter>;

  void insert(std::string name, Tensor value, PartitionTag tag);

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  const Parameter& at(const std::string& name) const;
  Tensor& value(const std::string& name);
  const Tensor& value(const std::string& name) const { return at(name).value; }
  PartitionTag tag(const std::string& name) const { return at(name).tag; }

  std::size_t size() const noexcept { return entries_.size(); }
  std::size_t scalar_count() const;
  std::size_t scalar_count(PartitionTag tag) const;

  Map::const_iterator begin() const { return entries_.begin(); }
  Map::const_iterator end() const { return entries_.end(); }

  friend bool operator==(const ParameterStore&, const ParameterStore&) = default;

 private:
  Map entries_;
};

}  // namespace fedoap
