#include <fstream>

#include <nlohmann/json.hpp>

#include "common/bytes.hpp"
#include "fedoap/error.hpp"
#include "fedoap/synthdata.hpp"

namespace fedoap::synth {
namespace fs = std::filesystem;
using nlohmann::json;

std::vector<std::uint8_t> encode_sample(const Sample& sample) {
  require(sample.mask.rank() == 2 && sample.image.rank() == 3 && sample.image.dim(0) == 1 &&
              sample.image.dim(1) == sample.mask.dim(0) && sample.image.dim(2) == sample.mask.dim(1),
          ErrorCode::ShapeMismatch, "sample image must be [1,H,W] with mask [H,W]");
  const std::size_t h = sample.mask.dim(0), w = sample.mask.dim(1);
  std::vector<std::uint8_t> out;
  out.reserve(kSampleHeaderBytes + 5 * h * w);
  detail::ByteWriter wr(out);
  wr.bytes(kSampleMagic, 4);
  wr.put<std::uint16_t>(kSampleVersion);
  wr.put<std::uint32_t>(std::uint32_t(h));
  wr.put<std::uint32_t>(std::uint32_t(w));
  for (double v : sample.image.values()) wr.put<float>(float(v));
  for (double v : sample.mask.values()) wr.put<std::uint8_t>(v != 0.0 ? 1 : 0);
  return out;
}

Sample decode_sample(std::span<const std::uint8_t> bytes) {
  detail::ByteReader rd(bytes);
  const auto magic = rd.take(4);
  require(std::equal(magic.begin(), magic.end(), kSampleMagic), ErrorCode::BadMagic, "not a FOSS sample file");
  const auto version = rd.get<std::uint16_t>();
  require(version == kSampleVersion, ErrorCode::VersionUnsupported,
          "sample version " + std::to_string(version) + " unsupported");
  const std::size_t h = rd.get<std::uint32_t>(), w = rd.get<std::uint32_t>();
  require(h > 0 && w > 0, ErrorCode::TruncatedFile, "sample has zero extent");
  require(rd.remaining() >= 5 * h * w, ErrorCode::TruncatedFile,
          "sample body needs " + std::to_string(5 * h * w) + " bytes, have " + std::to_string(rd.remaining()));
  Sample s{Tensor({1, h, w}), Tensor({h, w}), 0};
  for (std::size_t i = 0; i < h * w; ++i) s.image[i] = rd.get<float>();
  for (std::size_t i = 0; i < h * w; ++i) s.mask[i] = rd.get<std::uint8_t>() != 0 ? 1.0 : 0.0;
  return s;
}

void write_sample(const fs::path& path, const Sample& sample) {
  detail::write_file(path.string(), encode_sample(sample));
}

Sample read_sample(const fs::path& path) { return decode_sample(detail::read_file(path.string())); }

namespace {

std::uint64_t id_from_filename(const std::string& rel) {
  const std::string stem = fs::path(rel).stem().string();
  try {
    return std::stoull(stem);
  } catch (const std::exception&) {
    fail(ErrorCode::IoError, "sample file name is not numeric: " + rel);
  }
}

}  // namespace

DatasetManifest write_dataset(const fs::path& dir, const std::string& profile, std::uint64_t seed,
                              std::size_t image_size, const DatasetSplit& split) {
  DatasetManifest m{profile, seed, image_size, kSampleVersion, {}, {}, {}};
  auto write_split = [&](const char* name, const std::vector<Sample>& samples, std::vector<std::string>& paths) {
    fs::create_directories(dir / name);
    for (const Sample& s : samples) {
      const std::string rel = std::string(name) + "/" + std::to_string(s.sample_id) + ".foss";
      write_sample(dir / rel, s);
      paths.push_back(rel);
    }
  };
  write_split("train", split.train, m.train);
  write_split("val", split.val, m.val);
  write_split("test", split.test, m.test);

  json j = {{"profile", m.profile},         {"seed", m.seed},   {"image_size", m.image_size},
            {"format_version", m.format_version}, {"train", m.train}, {"val", m.val},
            {"test", m.test}};
  std::ofstream out(dir / "manifest.json");
  require(bool(out), ErrorCode::IoError, "cannot write " + (dir / "manifest.json").string());
  out << j.dump(2) << "\n";
  return m;
}

DatasetManifest read_manifest(const fs::path& manifest_path) {
  std::ifstream in(manifest_path);
  require(bool(in), ErrorCode::IoError, "cannot open " + manifest_path.string());
  try {
    const json j = json::parse(in);
    DatasetManifest m;
    m.profile = j.at("profile").get<std::string>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.image_size = j.at("image_size").get<std::size_t>();
    m.format_version = j.at("format_version").get<std::uint16_t>();
    m.train = j.at("train").get<std::vector<std::string>>();
    m.val = j.at("val").get<std::vector<std::string>>();
    m.test = j.at("test").get<std::vector<std::string>>();
    require(m.format_version == kSampleVersion, ErrorCode::VersionUnsupported,
            "manifest format version " + std::to_string(m.format_version) + " unsupported");
    return m;
  } catch (const json::exception& e) {
    fail(ErrorCode::IoError, "malformed manifest " + manifest_path.string() + ": " + e.what());
  }
}

DatasetSplit load_dataset(const fs::path& manifest_path) {
  const DatasetManifest m = read_manifest(manifest_path);
  const fs::path root = manifest_path.parent_path();
  auto load = [&](const std::vector<std::string>& rels) {
    std::vector<Sample> out;
    for (const auto& rel : rels) {
      Sample s = read_sample(root / rel);
      require(s.mask.dim(0) == m.image_size && s.mask.dim(1) == m.image_size, ErrorCode::ShapeMismatch,
              rel + " does not match manifest image size");
      s.sample_id = id_from_filename(rel);
      out.push_back(std::move(s));
    }
    return out;
  };
  return DatasetSplit{load(m.train), load(m.val), load(m.test)};
}

}  // namespace fedoap::synth
