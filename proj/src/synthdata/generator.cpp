#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "fedoap/error.hpp"
#include "fedoap/rng.hpp"
#include "fedoap/synthdata.hpp"

namespace fedoap::synth {
namespace {

constexpr std::size_t kPolygonVertices = 64;
constexpr int kHarmonics[] = {2, 3, 4};
// Fraction of the base radius below which the perturbed boundary is clamped.
constexpr double kMinRadiusFactor = 0.2;
// Lesion centers stay inside the central 60% of the frame.
constexpr double kCenterLo = 0.2;
constexpr double kCenterHi = 0.8;

struct Point {
  double x, y;
};

bool inside_polygon(const std::vector<Point>& poly, double px, double py) {
  bool inside = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const Point& a = poly[i];
    const Point& b = poly[j];
    if ((a.y > py) != (b.y > py)) {
      const double x_cross = a.x + (py - a.y) * (b.x - a.x) / (b.y - a.y);
      if (px < x_cross) inside = !inside;
    }
  }
  return inside;
}

double radial_factor(double theta, double irregularity, const double* phases) {
  double wave = 0.0;
  for (std::size_t h = 0; h < std::size(kHarmonics); ++h) wave += std::sin(kHarmonics[h] * theta + phases[h]);
  wave /= double(std::size(kHarmonics));
  return std::max(kMinRadiusFactor, 1.0 + irregularity * wave);
}

double to_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

}  // namespace

void OrganProfile::validate() const {
  require(!name.empty(), ErrorCode::InvalidProfile, "profile needs a name");
  require(lesion_count_min >= 1 && lesion_count_max >= lesion_count_min, ErrorCode::InvalidProfile,
          name + ": lesion count range must satisfy 1 <= min <= max");
  require(radius_min > 0.0 && radius_max < 0.5 && radius_min <= radius_max, ErrorCode::InvalidProfile,
          name + ": radius range must lie within (0, 0.5)");
  require(boundary_irregularity >= 0.0, ErrorCode::InvalidProfile, name + ": irregularity must be >= 0");
  require(contrast > 0.0 && contrast <= 1.0, ErrorCode::InvalidProfile, name + ": contrast must lie in (0, 1]");
  require(background_texture >= 0.0, ErrorCode::InvalidProfile, name + ": texture must be >= 0");
}

OrganProfile breast_like() { return {"breast_like", 1, 1, 0.10, 0.16, 0.05, 0.80, 0.05, false}; }
OrganProfile brain_like() { return {"brain_like", 1, 1, 0.20, 0.28, 0.50, 0.45, 0.08, false}; }
OrganProfile liver_like() { return {"liver_like", 1, 3, 0.07, 0.13, 0.20, 0.35, 0.12, true}; }
OrganProfile lung_like() { return {"lung_like", 1, 2, 0.09, 0.16, 0.30, 0.55, 0.10, false}; }

std::vector<OrganProfile> default_profiles() { return {breast_like(), brain_like(), liver_like(), lung_like()}; }

std::optional<OrganProfile> find_profile(const std::string& name) {
  for (auto& p : default_profiles())
    if (p.name == name) return p;
  return std::nullopt;
}

Sample generate_sample(const OrganProfile& profile, std::size_t size, std::uint64_t seed, std::uint64_t sample_id) {
  profile.validate();
  require(size >= 4, ErrorCode::InvalidArgument, "image size must be at least 4");
  Rng rng(derive_seed(seed, sample_id));
  const double side = double(size);

  Tensor mask({size, size});
  const std::size_t count =
      profile.lesion_count_min + rng.below(profile.lesion_count_max - profile.lesion_count_min + 1);
  double first_cx = 0.0, first_cy = 0.0;
  for (std::size_t lesion = 0; lesion < count; ++lesion) {
    const double cx = rng.uniform(kCenterLo, kCenterHi) * side;
    const double cy = rng.uniform(kCenterLo, kCenterHi) * side;
    const double r0 = rng.uniform(profile.radius_min, profile.radius_max) * side;
    double phases[std::size(kHarmonics)];
    for (double& ph : phases) ph = rng.uniform(0.0, 2.0 * std::numbers::pi);
    if (lesion == 0) first_cx = cx, first_cy = cy;

    std::vector<Point> poly(kPolygonVertices);
    double reach = 0.0;
    for (std::size_t k = 0; k < kPolygonVertices; ++k) {
      const double theta = 2.0 * std::numbers::pi * double(k) / double(kPolygonVertices);
      const double r = r0 * radial_factor(theta, profile.boundary_irregularity, phases);
      reach = std::max(reach, r);
      poly[k] = {cx + r * std::cos(theta), cy + r * std::sin(theta)};
    }
    const auto lo_y = std::size_t(std::max(0.0, std::floor(cy - reach - 1.0)));
    const auto hi_y = std::size_t(std::min(side, std::ceil(cy + reach + 1.0)));
    const auto lo_x = std::size_t(std::max(0.0, std::floor(cx - reach - 1.0)));
    const auto hi_x = std::size_t(std::min(side, std::ceil(cx + reach + 1.0)));
    for (std::size_t y = lo_y; y < hi_y; ++y)
      for (std::size_t x = lo_x; x < hi_x; ++x)
        if (inside_polygon(poly, double(x) + 0.5, double(y) + 0.5)) mask[y * size + x] = 1.0;
  }
  if (std::none_of(mask.storage().begin(), mask.storage().end(), [](double v) { return v != 0.0; })) {
    const auto x = std::min(size - 1, std::size_t(first_cx));
    const auto y = std::min(size - 1, std::size_t(first_cy));
    mask[y * size + x] = 1.0;
  }

  const double lesion_level = profile.intensity_inversion ? 0.5 - profile.contrast / 2 : 0.5 + profile.contrast / 2;
  const double background_level =
      profile.intensity_inversion ? 0.5 + profile.contrast / 2 : 0.5 - profile.contrast / 2;
  Tensor image({1, size, size});
  for (std::size_t i = 0; i < size * size; ++i) {
    double v = mask[i] != 0.0 ? lesion_level : background_level;
    if (profile.background_texture > 0.0) v += profile.background_texture * rng.gaussian(0.0, 1.0);
    image[i] = to_f32(std::clamp(v, 0.0, 1.0));
  }
  return Sample{std::move(image), std::move(mask), sample_id};
}

std::vector<Sample> generate_client_dataset(const OrganProfile& profile, std::size_t n, std::size_t size,
                                            std::uint64_t seed) {
  require(n >= 1, ErrorCode::InvalidArgument, "dataset needs at least one sample");
  profile.validate();
  std::vector<Sample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(generate_sample(profile, size, seed, i));
  return out;
}

SplitCounts split_counts(std::size_t n, double test_frac, double val_frac) {
  require(test_frac >= 0.0 && test_frac < 1.0 && val_frac >= 0.0 && val_frac < 1.0, ErrorCode::InvalidArgument,
          "split fractions must lie in [0, 1)");
  SplitCounts c;
  c.test = std::size_t(std::lround(test_frac * double(n)));
  c.val = std::size_t(std::lround(val_frac * double(n - std::min(n, c.test))));
  require(c.test + c.val < n, ErrorCode::SplitTooSmall, "no training samples left from " + std::to_string(n));
  c.train = n - c.test - c.val;
  return c;
}

DatasetSplit split_dataset(std::vector<Sample> samples, double test_frac, double val_frac, std::uint64_t seed) {
  const SplitCounts c = split_counts(samples.size(), test_frac, val_frac);
  require((test_frac == 0.0 || c.test > 0) && (val_frac == 0.0 || c.val > 0), ErrorCode::SplitTooSmall,
          std::to_string(samples.size()) + " samples cannot fill every requested split");
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

  DatasetSplit split;
  for (std::size_t k = 0; k < order.size(); ++k) {
    Sample& s = samples[order[k]];
    if (k < c.test)
      split.test.push_back(std::move(s));
    else if (k < c.test + c.val)
      split.val.push_back(std::move(s));
    else
      split.train.push_back(std::move(s));
  }
  return split;
}

Tensor stack_images(const std::vector<Sample>& samples) {
  require(!samples.empty(), ErrorCode::EmptySplit, "no samples to stack");
  const Shape& s = samples.front().image.shape();
  Tensor out({samples.size(), s[0], s[1], s[2]});
  const std::size_t per = samples.front().image.numel();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    require(samples[i].image.shape() == s, ErrorCode::ShapeMismatch, "samples differ in image shape");
    std::copy_n(samples[i].image.data(), per, out.data() + i * per);
  }
  return out;
}

Tensor stack_masks(const std::vector<Sample>& samples) {
  require(!samples.empty(), ErrorCode::EmptySplit, "no samples to stack");
  const Shape& s = samples.front().mask.shape();
  Tensor out({samples.size(), 1, s[0], s[1]});
  const std::size_t per = samples.front().mask.numel();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    require(samples[i].mask.shape() == s, ErrorCode::ShapeMismatch, "samples differ in mask shape");
    std::copy_n(samples[i].mask.data(), per, out.data() + i * per);
  }
  return out;
}

double mask_perimeter(const Tensor& mask) {
  require(mask.rank() == 2, ErrorCode::ShapeMismatch, "mask must be [H, W]");
  const std::size_t h = mask.dim(0), w = mask.dim(1);
  auto at = [&](std::ptrdiff_t y, std::ptrdiff_t x) -> int {
    if (y < 0 || x < 0 || y >= std::ptrdiff_t(h) || x >= std::ptrdiff_t(w)) return 0;
    return mask[std::size_t(y) * w + std::size_t(x)] != 0.0;
  };
  const double diagonal = std::sqrt(0.5);
  double perimeter = 0.0;
  for (std::ptrdiff_t y = -1; y < std::ptrdiff_t(h); ++y)
    for (std::ptrdiff_t x = -1; x < std::ptrdiff_t(w); ++x) {
      const int a = at(y, x), b = at(y, x + 1), c = at(y + 1, x), d = at(y + 1, x + 1);
      const int set = a + b + c + d;
      if (set == 1 || set == 3)
        perimeter += diagonal;
      else if (set == 2)
        perimeter += (a == d) ? 2.0 * diagonal : 1.0;  // saddle vs. straight edge
    }
  return perimeter;
}

double mask_compactness(const Tensor& mask) {
  double area = 0.0;
  for (double v : mask.values()) area += v != 0.0;
  const double p = mask_perimeter(mask);
  return p > 0.0 ? 4.0 * std::numbers::pi * area / (p * p) : 0.0;
}

SampleStats sample_stats(const Sample& sample) {
  SampleStats st;
  double fg = 0.0, bg = 0.0;
  std::size_t n_fg = 0, n_bg = 0;
  for (std::size_t i = 0; i < sample.mask.numel(); ++i) {
    if (sample.mask[i] != 0.0) {
      fg += sample.image[i];
      ++n_fg;
    } else {
      bg += sample.image[i];
      ++n_bg;
    }
  }
  st.area = double(n_fg);
  st.compactness = mask_compactness(sample.mask);
  st.contrast = (n_fg ? fg / double(n_fg) : 0.0) - (n_bg ? bg / double(n_bg) : 0.0);
  return st;
}

std::pair<double, double> mask_area_fraction_bounds(const OrganProfile& profile, std::size_t size) {
  profile.validate();
  const double side = double(size);
  const double pixels = side * side;
  // The 64-gon keeps every edge at least cos(pi/64) of the smallest vertex
  // radius away from the center; lattice-point counts deviate from pi*R^2 by
  // at most a sqrt(2)/2 shift of R.
  const double slack = std::sqrt(0.5);
  const double r_in =
      profile.radius_min * side * std::max(kMinRadiusFactor, 1.0 - profile.boundary_irregularity) *
      std::cos(std::numbers::pi / double(kPolygonVertices));
  const double r_out = profile.radius_max * side * (1.0 + profile.boundary_irregularity);
  const double lo = std::max(1.0, std::numbers::pi * std::pow(std::max(0.0, r_in - slack), 2)) / pixels;
  const double hi =
      std::min(1.0, double(profile.lesion_count_max) * std::numbers::pi * std::pow(r_out + slack, 2) / pixels);
  return {lo, hi};
}

}  // namespace fedoap::synth
