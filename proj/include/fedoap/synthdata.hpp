#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fedoap/tensor.hpp"

namespace fedoap::synth {

// Knobs for one family of lesion images.
struct OrganProfile {
  std::string name;
  std::size_t lesion_count_min = 1;
  std::size_t lesion_count_max = 1;
  // Base lesion radius as a fraction of the image side.
  double radius_min = 0.1;
  double radius_max = 0.2;
  // Relative amplitude of the radial boundary perturbation.
  double boundary_irregularity = 0.0;
  double contrast = 0.5;
  double background_texture = 0.0;
  // Lesions darker than background instead of brighter.
  bool intensity_inversion = false;

  // Throws InvalidProfile.
  void validate() const;
};

OrganProfile breast_like();
OrganProfile brain_like();
OrganProfile liver_like();
OrganProfile lung_like();
// breast_like, brain_like, liver_like, lung_like.
std::vector<OrganProfile> default_profiles();
std::optional<OrganProfile> find_profile(const std::string& name);

struct Sample {
  Tensor image;  // [1, H, W], values in [0, 1], exactly representable as f32
  Tensor mask;   // [H, W], {0, 1}
  std::uint64_t sample_id = 0;

  friend bool operator==(const Sample&, const Sample&) = default;
};

// Pure function of (profile, n, size, seed). Sample i draws from its own
// stream seeded by derive_seed(seed, i).
std::vector<Sample> generate_client_dataset(const OrganProfile& profile, std::size_t n, std::size_t size,
                                            std::uint64_t seed);
Sample generate_sample(const OrganProfile& profile, std::size_t size, std::uint64_t seed, std::uint64_t sample_id);

struct SplitCounts {
  std::size_t train = 0, val = 0, test = 0;
};
// test = round(test_frac * n), val = round(val_frac * (n - test)), rest train.
SplitCounts split_counts(std::size_t n, double test_frac, double val_frac);

struct DatasetSplit {
  std::vector<Sample> train, val, test;
};

// Seeded shuffle, then slice test | val | train. Throws SplitTooSmall when a
// split would be empty.
DatasetSplit split_dataset(std::vector<Sample> samples, double test_frac, double val_frac, std::uint64_t seed);

// Stacks images into [N, 1, H, W] and masks into [N, 1, H, W].
Tensor stack_images(const std::vector<Sample>& samples);
Tensor stack_masks(const std::vector<Sample>& samples);

// ---------------------------------------------------------------------------
// Geometry / statistics

// Boundary length of a binary mask by marching squares at level 0.5.
double mask_perimeter(const Tensor& mask);
// 4*pi*area / perimeter^2 with area = pixel count.
double mask_compactness(const Tensor& mask);

struct SampleStats {
  double area = 0.0;
  double compactness = 0.0;
  // Mean lesion intensity minus mean background intensity.
  double contrast = 0.0;
};
SampleStats sample_stats(const Sample& sample);

// Analytic bounds on the lesion area fraction of any sample the profile can
// produce at `size`, including rasterization slack.
std::pair<double, double> mask_area_fraction_bounds(const OrganProfile& profile, std::size_t size);

// ---------------------------------------------------------------------------
// "FOSS" sample files: magic, u16 version, u32 H, u32 W, f32 image, u8 mask.

inline constexpr char kSampleMagic[4] = {'F', 'O', 'S', 'S'};
inline constexpr std::uint16_t kSampleVersion = 1;
inline constexpr std::size_t kSampleHeaderBytes = 14;

std::vector<std::uint8_t> encode_sample(const Sample& sample);
// Throws BadMagic, TruncatedFile, VersionUnsupported.
Sample decode_sample(std::span<const std::uint8_t> bytes);

void write_sample(const std::filesystem::path& path, const Sample& sample);
Sample read_sample(const std::filesystem::path& path);

struct DatasetManifest {
  std::string profile;
  std::uint64_t seed = 0;
  std::size_t image_size = 0;
  std::uint16_t format_version = kSampleVersion;
  // Relative paths, one list per split.
  std::vector<std::string> train, val, test;
};

// Writes every sample under `dir/<split>/` plus `dir/manifest.json`.
DatasetManifest write_dataset(const std::filesystem::path& dir, const std::string& profile, std::uint64_t seed,
                              std::size_t image_size, const DatasetSplit& split);
DatasetManifest read_manifest(const std::filesystem::path& manifest_path);
DatasetSplit load_dataset(const std::filesystem::path& manifest_path);

}  // namespace fedoap::synth
