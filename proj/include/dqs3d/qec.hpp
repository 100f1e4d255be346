#pragma once

// Quantization error correction.
//
// For a point A and a quarter-turn transform R (rotation k*pi/2, translation
// dr), voxelizing the transformed point does not in general land in the
// transformed voxel of A. Working in voxel units, with M = {A} R + {dr}
// (the rotated fractional part of A plus the fractional part of dr), every
// shift r' = gamma - M with gamma in [0, 1)^3 restores
//   [A R + r'] == [A] R + [dr].
// The shift of minimal norm is gamma0 = clamp(M, 0, 1) per axis.
//
// Floating point: a component clamped to exactly 0 (or to 1 - ulp) puts the
// corrected point on a lattice plane, where round-off in A R + dr + r' picks
// the voxel. Clamped components therefore use a margin eta (initially 2^-32
// voxel) and the margin is widened on the rare axis that still misses.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "dqs3d/error.hpp"
#include "dqs3d/parallel.hpp"
#include "dqs3d/voxel_geometry.hpp"

namespace dqs3d {

struct Compensation {
  Point3 r_prime;  // meters
  Point3 gamma0;   // voxel units
  Point3 m;        // voxel units
};

inline constexpr double kQecInitialMargin = 0x1p-32;

namespace detail {

inline double clamp_unit(double m, double margin) {
  if (m < 0.0) return margin;
  if (m >= 1.0) return 1.0 - margin;
  return m;
}

}  // namespace detail

inline Compensation compensation(Point3 p, const Transform& t, VoxelSize s) {
  if (t.quarter_turns < 0 || t.quarter_turns > 3) {
    throw UnsupportedRotation("compensation requires a quarter-turn rotation, got index " +
                              std::to_string(t.quarter_turns));
  }
  t.validate();
  if (!is_finite(p)) throw InvalidInput("compensation of a non-finite point");

  const double sv = s.value();
  const Point3 m = rotate_point(frac(p, s), t.quarter_turns) + frac(t.translation, s);
  const VoxelKey target = map_anchor(quantize(p, s), t, s);
  const Point3 moved = apply_transform(p, t);

  Compensation c;
  c.m = m;
  std::array<double, 3> margin{kQecInitialMargin, kQecInitialMargin, kQecInitialMargin};
  for (int axis = 0; axis < 3; ++axis) c.gamma0[axis] = detail::clamp_unit(m[axis], margin[axis]);

  for (int attempt = 0;; ++attempt) {
    c.r_prime = (c.gamma0 - m) * sv;
    const VoxelKey got = quantize(moved + c.r_prime, s);
    const std::array<bool, 3> ok{got.i == target.i, got.j == target.j, got.k == target.k};
    if (ok[0] && ok[1] && ok[2]) return c;
    if (attempt == 48) throw Error("quantization error correction did not converge");
    for (int axis = 0; axis < 3; ++axis) {
      if (ok[axis]) continue;
      margin[axis] = std::min(margin[axis] * 16.0, 0.25);
      c.gamma0[axis] = std::clamp(m[axis], margin[axis], 1.0 - margin[axis]);
    }
  }
}

/// Transforms every point and adds its compensation term (student branch).
inline std::vector<Point3> apply_with_qec(const std::vector<Point3>& cloud, const Transform& t,
                                          VoxelSize s, unsigned threads = 1) {
  std::vector<Point3> out(cloud.size());
  parallel_for(cloud.size(), threads, [&](std::size_t i) {
    out[i] = apply_transform(cloud[i], t) + compensation(cloud[i], t, s).r_prime;
  });
  return out;
}

/// Distribution of random transforms and points for QEC statistics.
struct QecSampler {
  double voxel_size = 0.01;
  double point_half_extent = 5.0;      // points uniform in [-e, e]^3 m
  double translation_half_range = 0.5;  // dr uniform in [-h, h]^3 m
  std::array<bool, 4> quarter_turns{true, true, true, true};

  Transform sample_transform(std::mt19937_64& rng) const {
    std::vector<int> allowed;
    for (int k = 0; k < 4; ++k) {
      if (quarter_turns[static_cast<std::size_t>(k)]) allowed.push_back(k);
    }
    if (allowed.empty()) throw InvalidInput("sampler allows no quarter turn");
    std::uniform_int_distribution<std::size_t> pick(0, allowed.size() - 1);
    Transform t;
    t.quarter_turns = allowed[pick(rng)];
    if (translation_half_range > 0.0) {
      std::uniform_real_distribution<double> u(-translation_half_range, translation_half_range);
      t.translation = {u(rng), u(rng), u(rng)};
    }
    return t;
  }

  Point3 sample_point(std::mt19937_64& rng) const {
    std::uniform_real_distribution<double> u(-point_half_extent, point_half_extent);
    return {u(rng), u(rng), u(rng)};
  }
};

inline constexpr std::size_t kQecHistogramBins = 64;

struct StatReport {
  std::size_t samples = 0;
  double bin_width = 0.0;  // in units of s_v; bins cover [0, sqrt(3)]
  std::array<std::size_t, kQecHistogramBins> histogram{};
  std::array<std::size_t, 4> nonzero_components{};  // count of samples with 0..3 nonzero axes
  double zero_fraction = 0.0;
  double mean_norm = 0.0;  // mean ||r'|| / s_v over all samples
  double max_norm = 0.0;
  double axis_aligned_fraction = 0.0;  // among nonzero corrections, exactly one axis moved
  double in_range_fraction = 0.0;      // ||r'|| / s_v in [0.03, 1]
};

/// Monte-Carlo statistics of the compensation term. Samples are drawn in
/// fixed-size chunks with per-chunk seeds, so results do not depend on
/// `threads`.
inline StatReport qec_statistics(std::size_t n_samples, const QecSampler& sampler, std::uint64_t seed,
                                 unsigned threads = 1) {
  if (n_samples == 0) throw InvalidInput("qec_statistics needs at least one sample");
  const VoxelSize s(sampler.voxel_size);
  constexpr std::size_t kChunk = 4096;
  const std::size_t n_chunks = (n_samples + kChunk - 1) / kChunk;
  const double max_norm = std::sqrt(3.0);
  const double width = max_norm / static_cast<double>(kQecHistogramBins);

  struct Partial {
    std::array<std::size_t, kQecHistogramBins> histogram{};
    std::array<std::size_t, 4> nonzero{};
    std::size_t axis_aligned = 0;
    std::size_t in_range = 0;
    double norm_sum = 0.0;
    double norm_max = 0.0;
  };
  std::vector<Partial> partials(n_chunks);
  parallel_for(n_chunks, threads, [&](std::size_t chunk) {
    std::mt19937_64 rng(mix_seed(seed, chunk));
    Partial& part = partials[chunk];
    const std::size_t begin = chunk * kChunk;
    const std::size_t end = std::min(n_samples, begin + kChunk);
    std::vector<double> norms;
    norms.reserve(end - begin);
    for (std::size_t i = begin; i < end; ++i) {
      const Transform t = sampler.sample_transform(rng);
      const Point3 p = sampler.sample_point(rng);
      const Point3 r = compensation(p, t, s).r_prime / s.value();
      const int nz = (r.x != 0.0) + (r.y != 0.0) + (r.z != 0.0);
      ++part.nonzero[static_cast<std::size_t>(nz)];
      if (nz == 1) ++part.axis_aligned;
      const double n = norm(r);
      norms.push_back(n);
      part.norm_max = std::max(part.norm_max, n);
      if (n >= 0.03 && n <= 1.0) ++part.in_range;
      const auto bin = std::min<std::size_t>(static_cast<std::size_t>(n / width), kQecHistogramBins - 1);
      ++part.histogram[bin];
    }
    part.norm_sum = tree_sum(norms);
  });

  StatReport report;
  report.samples = n_samples;
  report.bin_width = width;
  std::vector<double> sums;
  std::size_t axis_aligned = 0;
  std::size_t in_range = 0;
  for (const Partial& part : partials) {
    for (std::size_t b = 0; b < kQecHistogramBins; ++b) report.histogram[b] += part.histogram[b];
    for (std::size_t c = 0; c < 4; ++c) report.nonzero_components[c] += part.nonzero[c];
    axis_aligned += part.axis_aligned;
    in_range += part.in_range;
    sums.push_back(part.norm_sum);
    report.max_norm = std::max(report.max_norm, part.norm_max);
  }
  const auto total = static_cast<double>(n_samples);
  const std::size_t nonzero = n_samples - report.nonzero_components[0];
  report.zero_fraction = static_cast<double>(report.nonzero_components[0]) / total;
  report.mean_norm = tree_sum(sums) / total;
  report.axis_aligned_fraction = nonzero == 0 ? 0.0 : static_cast<double>(axis_aligned) / static_cast<double>(nonzero);
  report.in_range_fraction = static_cast<double>(in_range) / total;
  return report;
}

}  // namespace dqs3d
