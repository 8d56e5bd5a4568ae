#include <algorithm>

#include "common/bytes.hpp"
#include "fedoap/error.hpp"
#include "fedoap/fed_protocol.hpp"

namespace fedoap {
namespace {

void put_tensor(detail::ByteWriter& w, const std::string& name, const Tensor& t) {
  require(t.rank() <= 255, ErrorCode::InvalidArgument, "tensor rank too large for the wire: " + name);
  w.put<std::uint32_t>(std::uint32_t(name.size()));
  w.bytes(name.data(), name.size());
  w.put<std::uint8_t>(std::uint8_t(t.rank()));
  for (std::size_t d : t.shape()) w.put<std::uint32_t>(std::uint32_t(d));
  for (double v : t.values()) w.put<float>(float(v));
}

Tensor get_f32(detail::ByteReader& r, Shape shape) {
  Tensor t(std::move(shape));
  require(r.remaining() / kWireScalarBytes >= t.numel(), ErrorCode::TruncatedFile, "tensor data cut short");
  for (double& v : t.storage()) v = r.get<float>();
  return t;
}

}  // namespace

std::size_t tensor_section_bytes(const std::string& name, const Shape& shape) {
  return 4 + name.size() + 1 + 4 * shape.size() + kWireScalarBytes * shape_numel(shape);
}

std::size_t kv_section_bytes(std::size_t n_tokens, std::size_t dim) {
  return kKVSectionHeaderBytes + 2 * kWireScalarBytes * n_tokens * dim;
}

std::vector<std::uint8_t> encode_message(const WireMessage& message) {
  std::size_t body = 0;
  for (const auto& [name, t] : message.tensors) body += tensor_section_bytes(name, t.shape());
  for (const KVTokens& kv : message.kv) body += kv_section_bytes(kv.n_tokens(), kv.dim());

  std::vector<std::uint8_t> out;
  out.reserve(kMessageHeaderBytes + body);
  detail::ByteWriter w(out);
  w.bytes(kMessageMagic, 4);
  w.put<std::uint16_t>(kMessageVersion);
  w.put<std::uint16_t>(std::uint16_t(message.kind));
  w.put<std::uint32_t>(message.round);
  w.put<std::uint32_t>(message.client_id);
  w.put<std::uint32_t>(std::uint32_t(message.tensors.size()));
  w.put<std::uint32_t>(std::uint32_t(message.kv.size()));
  w.put<std::uint64_t>(body);
  w.zeros(kMessageHeaderBytes - w.size());

  for (const auto& [name, t] : message.tensors) put_tensor(w, name, t);
  for (const KVTokens& kv : message.kv) {
    require(kv.keys.shape() == kv.values.shape() && kv.keys.rank() == 2, ErrorCode::DimMismatch,
            "KV section needs matching [n, d] keys and values");
    w.put<std::uint32_t>(kv.client_id);
    w.put<std::uint32_t>(kv.round);
    w.put<std::uint32_t>(std::uint32_t(kv.n_tokens()));
    w.put<std::uint32_t>(std::uint32_t(kv.dim()));
    for (double v : kv.keys.values()) w.put<float>(float(v));
    for (double v : kv.values.values()) w.put<float>(float(v));
  }
  return out;
}

WireMessage decode_message(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  const auto magic = r.take(4);
  require(std::equal(magic.begin(), magic.end(), kMessageMagic), ErrorCode::BadMagic, "not a FOAP message");
  const auto version = r.get<std::uint16_t>();
  require(version == kMessageVersion, ErrorCode::VersionUnsupported,
          "message version " + std::to_string(version) + " unsupported");
  WireMessage m;
  const auto kind = r.get<std::uint16_t>();
  require(kind >= 1 && kind <= 3, ErrorCode::InvalidArgument, "unknown message kind " + std::to_string(kind));
  m.kind = MessageKind(kind);
  m.round = r.get<std::uint32_t>();
  m.client_id = r.get<std::uint32_t>();
  const std::uint32_t n_tensors = r.get<std::uint32_t>();
  const std::uint32_t n_kv = r.get<std::uint32_t>();
  const std::uint64_t body = r.get<std::uint64_t>();
  r.skip(kMessageHeaderBytes - r.pos());
  require(body <= r.remaining(), ErrorCode::TruncatedFile,
          "body declares " + std::to_string(body) + " bytes, have " + std::to_string(r.remaining()));

  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    std::string name = r.str(r.get<std::uint32_t>());
    const std::size_t rank = r.get<std::uint8_t>();
    Shape shape(rank);
    for (std::size_t& d : shape) d = r.get<std::uint32_t>();
    require(rank > 0, ErrorCode::InvalidArgument, "zero-rank tensor section " + name);
    require(!m.tensors.count(name), ErrorCode::InvalidArgument, "duplicate tensor section " + name);
    m.tensors.emplace(std::move(name), get_f32(r, std::move(shape)));
  }
  for (std::uint32_t i = 0; i < n_kv; ++i) {
    KVTokens kv;
    kv.client_id = r.get<std::uint32_t>();
    kv.round = r.get<std::uint32_t>();
    const std::size_t n = r.get<std::uint32_t>(), d = r.get<std::uint32_t>();
    kv.keys = get_f32(r, {n, d});
    kv.values = get_f32(r, {n, d});
    m.kv.push_back(std::move(kv));
  }
  return m;
}

void save_checkpoint(const std::filesystem::path& path, const ParameterStore& params, std::uint32_t round) {
  WireMessage m;
  m.kind = MessageKind::Checkpoint;
  m.round = round;
  for (const auto& [name, p] : params) m.tensors.emplace(name, p.value);
  detail::write_file(path.string(), encode_message(m));
}

ParameterStore load_checkpoint(const std::filesystem::path& path, const ModelConfig& config) {
  WireMessage m = decode_message(detail::read_file(path.string()));
  require(m.kind == MessageKind::Checkpoint, ErrorCode::InvalidArgument, path.string() + " is not a checkpoint");
  const auto specs = parameter_specs(config);
  require(specs.size() == m.tensors.size(), ErrorCode::NameSetMismatch, "checkpoint does not match the model");
  ParameterStore out;
  for (const ParamSpec& spec : specs) {
    auto it = m.tensors.find(spec.name);
    require(it != m.tensors.end(), ErrorCode::NameSetMismatch, "checkpoint lacks " + spec.name);
    require(it->second.shape() == spec.shape, ErrorCode::ShapeMismatch, "checkpoint shape mismatch for " + spec.name);
    out.insert(spec.name, std::move(it->second), spec.tag);
  }
  return out;
}

WireMessage to_wire(const RoundMessage& message) {
  WireMessage m;
  m.kind = MessageKind::ClientUpdate;
  m.round = message.round;
  m.client_id = message.client_id;
  m.tensors = message.shared_params;
  if (message.kv_tokens) m.kv.push_back(*message.kv_tokens);
  return m;
}

WireMessage to_wire(const Broadcast& broadcast) {
  WireMessage m;
  m.kind = MessageKind::Broadcast;
  m.round = broadcast.round;
  m.tensors = broadcast.averaged_shared;
  m.kv = broadcast.all_kv;
  return m;
}

void TransmissionLedger::record(std::uint32_t round, Direction direction, std::uint32_t client_id,
                                std::size_t bytes) {
  entries_.push_back({round, direction, client_id, bytes});
}

std::size_t TransmissionLedger::total(Direction direction) const {
  std::size_t sum = 0;
  for (const Entry& e : entries_)
    if (e.direction == direction) sum += e.bytes;
  return sum;
}

std::size_t TransmissionLedger::round_total(std::uint32_t round, Direction direction) const {
  std::size_t sum = 0;
  for (const Entry& e : entries_)
    if (e.round == round && e.direction == direction) sum += e.bytes;
  return sum;
}

std::size_t TransmissionLedger::client_total(std::uint32_t client_id, Direction direction) const {
  std::size_t sum = 0;
  for (const Entry& e : entries_)
    if (e.client_id == client_id && e.direction == direction) sum += e.bytes;
  return sum;
}

std::uint32_t TransmissionLedger::rounds() const {
  std::uint32_t n = 0;
  for (const Entry& e : entries_) n = std::max(n, e.round + 1);
  return n;
}

}  // namespace fedoap
