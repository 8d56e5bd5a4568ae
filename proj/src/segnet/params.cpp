#include "fedoap/params.hpp"

#include "fedoap/error.hpp"

namespace fedoap {

std::string_view partition_tag_name(PartitionTag tag) {
  switch (tag) {
    case PartitionTag::Shared: return "shared";
    case PartitionTag::PersonalQuery: return "personal_query";
    case PartitionTag::PersonalAdapter: return "personal_adapter";
  }
  return "unknown";
}

void ParameterStore::insert(std::string name, Tensor value, PartitionTag tag) {
  require(!name.empty(), ErrorCode::InvalidArgument, "parameter name must be non-empty");
  require(!contains(name), ErrorCode::InvalidArgument, "duplicate parameter " + name);
  entries_.emplace(std::move(name), Parameter{std::move(value), tag});
}

const Parameter& ParameterStore::at(const std::string& name) const {
  auto it = entries_.find(name);
  require(it != entries_.end(), ErrorCode::InvalidArgument, "unknown parameter " + name);
  return it->second;
}

Tensor& ParameterStore::value(const std::string& name) {
  auto it = entries_.find(name);
  require(it != entries_.end(), ErrorCode::InvalidArgument, "unknown parameter " + name);
  return it->second.value;
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [name, p] : entries_) n += p.value.numel();
  return n;
}

std::size_t ParameterStore::scalar_count(PartitionTag tag) const {
  std::size_t n = 0;
  for (const auto& [name, p] : entries_)
    if (p.tag == tag) n += p.value.numel();
  return n;
}

}  // namespace fedoap
