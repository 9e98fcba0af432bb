#pragma once

// Radar point clouds and the physics-derived preprocessing applied before
// encoding: Doppler static-background removal, centering, intensity
// standardization, fixed-size resampling and 200 ms windowing.

#include "fmfi/common.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <tuple>
#include <vector>

namespace fmfi {

/// One radar return. Coordinates in meters relative to the sensor, doppler is
/// the signed radial velocity in m/s, intensity is unitless and non-negative.
struct RadarPoint {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
  double doppler = 0.0;
  double intensity = 0.0;

  friend bool operator==(const RadarPoint&, const RadarPoint&) = default;

  bool valid() const {
    return std::isfinite(x) && std::isfinite(y) && std::isfinite(z) && std::isfinite(doppler) &&
           std::isfinite(intensity) && intensity >= 0.0;
  }
};

inline bool canonical_less(const RadarPoint& a, const RadarPoint& b) {
  return std::tie(a.x, a.y, a.z, a.doppler, a.intensity) <
         std::tie(b.x, b.y, b.z, b.doppler, b.intensity);
}

inline constexpr std::int64_t kDefaultWindowMs = 200;
inline constexpr int kDefaultPointsPerFrame = 128;

/// The points aggregated over one radar window. Point order carries no meaning.
struct PointFrame {
  std::vector<RadarPoint> points;
  std::int64_t timestamp_ms = 0;
  std::int64_t window_ms = kDefaultWindowMs;

  bool empty() const { return points.empty(); }
  std::size_t size() const { return points.size(); }

  friend bool operator==(const PointFrame&, const PointFrame&) = default;
};

/// Frames resampled to a common point count, ready for batched encoding.
struct FrameBatch {
  std::vector<PointFrame> frames;
  std::vector<std::vector<bool>> mask;
  int points_per_frame = kDefaultPointsPerFrame;
};

struct TimedPoint {
  std::int64_t timestamp_ms = 0;
  RadarPoint point;
};

/// Translates the coordinate centroid to the origin. Doppler and intensity
/// are left untouched.
inline PointFrame center_frame(const PointFrame& frame) {
  if (frame.empty()) throw Error(ErrorKind::EmptyFrame, "cannot center an empty frame");
  // Sum in canonical order so the result does not depend on storage order.
  std::vector<const RadarPoint*> order(frame.points.size());
  std::transform(frame.points.begin(), frame.points.end(), order.begin(),
                 [](const RadarPoint& p) { return &p; });
  std::sort(order.begin(), order.end(),
            [](const RadarPoint* a, const RadarPoint* b) { return canonical_less(*a, *b); });
  double cx = 0.0, cy = 0.0, cz = 0.0;
  for (const RadarPoint* p : order) {
    cx += p->x;
    cy += p->y;
    cz += p->z;
  }
  const double n = static_cast<double>(order.size());
  cx /= n;
  cy /= n;
  cz /= n;
  PointFrame out = frame;
  for (RadarPoint& p : out.points) {
    p.x -= cx;
    p.y -= cy;
    p.z -= cz;
  }
  return out;
}

/// Keeps the points whose |doppler| exceeds `v_thresh`, preserving order.
/// A threshold of 0 removes exactly the static background.
inline PointFrame doppler_filter(const PointFrame& frame, double v_thresh) {
  if (!(v_thresh >= 0.0)) throw Error(ErrorKind::Usage, "doppler threshold must be >= 0");
  PointFrame out;
  out.timestamp_ms = frame.timestamp_ms;
  out.window_ms = frame.window_ms;
  std::copy_if(frame.points.begin(), frame.points.end(), std::back_inserter(out.points),
               [v_thresh](const RadarPoint& p) { return std::abs(p.doppler) > v_thresh; });
  return out;
}

/// Resamples to exactly `count` points: a seeded subsample without
/// replacement when the frame is large enough, otherwise seeded draws with
/// replacement.
inline PointFrame resample_fixed(const PointFrame& frame, int count, std::uint64_t seed) {
  if (frame.empty()) throw Error(ErrorKind::EmptyFrame, "cannot resample an empty frame");
  if (count <= 0) throw Error(ErrorKind::Usage, "point count must be positive");
  // Draws are made against the canonical ordering so the output multiset is a
  // function of the point set, not of its storage order.
  std::vector<RadarPoint> sorted = frame.points;
  std::sort(sorted.begin(), sorted.end(), canonical_less);
  const auto n = sorted.size();
  const auto want = static_cast<std::size_t>(count);
  Rng rng(seed);
  PointFrame out;
  out.timestamp_ms = frame.timestamp_ms;
  out.window_ms = frame.window_ms;
  out.points.reserve(want);
  if (n >= want) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t i = 0; i < want; ++i) {
      const std::size_t j = i + std::min(uniform_index(rng, n - i), n - i - 1);
      std::swap(idx[i], idx[j]);
      out.points.push_back(sorted[idx[i]]);
    }
  } else {
    for (std::size_t i = 0; i < want; ++i) out.points.push_back(sorted[std::min(uniform_index(rng, n), n - 1)]);
  }
  return out;
}

/// Partitions a timestamped point stream into consecutive, non-overlapping
/// windows starting at the first timestamp. Empty windows become empty frames.
inline std::vector<PointFrame> window_stream(std::span<const TimedPoint> stream,
                                             std::int64_t window_ms = kDefaultWindowMs) {
  if (window_ms <= 0) throw Error(ErrorKind::Usage, "window_ms must be positive");
  std::vector<PointFrame> frames;
  if (stream.empty()) return frames;
  for (std::size_t i = 1; i < stream.size(); ++i) {
    if (stream[i].timestamp_ms < stream[i - 1].timestamp_ms)
      throw Error(ErrorKind::NonMonotonicTimestamps,
                  "timestamp at index " + std::to_string(i) + " decreases");
  }
  const std::int64_t origin = stream.front().timestamp_ms;
  const std::int64_t last = stream.back().timestamp_ms;
  const std::int64_t n_windows = (last - origin) / window_ms + 1;
  frames.resize(static_cast<std::size_t>(n_windows));
  for (std::int64_t w = 0; w < n_windows; ++w) {
    frames[static_cast<std::size_t>(w)].timestamp_ms = origin + w * window_ms;
    frames[static_cast<std::size_t>(w)].window_ms = window_ms;
  }
  for (const TimedPoint& tp : stream) {
    const auto w = static_cast<std::size_t>((tp.timestamp_ms - origin) / window_ms);
    frames[w].points.push_back(tp.point);
  }
  return frames;
}

/// Dataset-level intensity standardization fitted on the training split.
struct IntensityStats {
  double mean = 0.0;
  double stddev = 1.0;

  friend bool operator==(const IntensityStats&, const IntensityStats&) = default;
};

inline IntensityStats fit_intensity_stats(std::span<const PointFrame> frames) {
  double sum = 0.0, sq = 0.0;
  std::size_t n = 0;
  for (const PointFrame& f : frames) {
    for (const RadarPoint& p : f.points) {
      sum += p.intensity;
      sq += p.intensity * p.intensity;
      ++n;
    }
  }
  IntensityStats stats;
  if (n == 0) return stats;
  stats.mean = sum / static_cast<double>(n);
  const double var = std::max(0.0, sq / static_cast<double>(n) - stats.mean * stats.mean);
  stats.stddev = var > 1e-24 ? std::sqrt(var) : 1.0;
  return stats;
}

/// Preprocessing settings stored with every checkpoint so that evaluation
/// reproduces the training-time input pipeline exactly.
struct PreprocessConfig {
  double v_thresh = 0.0;
  int points_per_frame = kDefaultPointsPerFrame;
  IntensityStats intensity;

  friend bool operator==(const PreprocessConfig&, const PreprocessConfig&) = default;
};

/// Filter, center, standardize intensity and resample. Returns nullopt for a
/// frame that the Doppler filter empties; callers drop such frames.
inline std::optional<PointFrame> preprocess_frame(const PointFrame& frame, const PreprocessConfig& cfg,
                                                  std::uint64_t seed) {
  PointFrame filtered = doppler_filter(frame, cfg.v_thresh);
  if (filtered.empty()) return std::nullopt;
  PointFrame centered = center_frame(filtered);
  for (RadarPoint& p : centered.points)
    p.intensity = (p.intensity - cfg.intensity.mean) / cfg.intensity.stddev;
  return resample_fixed(centered, cfg.points_per_frame, seed);
}

/// Row-per-point matrix with columns (x, y, z, doppler, intensity).
template <class S>
Mat<S> frame_matrix(const PointFrame& frame) {
  Mat<S> m(static_cast<Eigen::Index>(frame.points.size()), 5);
  for (std::size_t i = 0; i < frame.points.size(); ++i) {
    const RadarPoint& p = frame.points[i];
    const auto r = static_cast<Eigen::Index>(i);
    m(r, 0) = static_cast<S>(p.x);
    m(r, 1) = static_cast<S>(p.y);
    m(r, 2) = static_cast<S>(p.z);
    m(r, 3) = static_cast<S>(p.doppler);
    m(r, 4) = static_cast<S>(p.intensity);
  }
  return m;
}

/// Builds a batch from already-resampled frames; every frame must carry
/// `points_per_frame` points.
inline FrameBatch make_batch(std::vector<PointFrame> frames, int points_per_frame) {
  FrameBatch batch;
  batch.points_per_frame = points_per_frame;
  for (const PointFrame& f : frames) {
    if (f.points.size() != static_cast<std::size_t>(points_per_frame))
      throw Error(ErrorKind::ShapeMismatch, "frame has " + std::to_string(f.points.size()) +
                                                " points, batch expects " + std::to_string(points_per_frame));
    batch.mask.emplace_back(f.points.size(), true);
  }
  batch.frames = std::move(frames);
  return batch;
}

}  // namespace fmfi
