#pragma once

// A deterministic synthetic world for exercising the full pipeline without
// sensors. Each class has a kinematic body model that emits radar points;
// an oracle teacher emits noisy copies of a per-class unit anchor, and the
// same anchor doubles as the class text embedding.
//
// Every frame contains the subject (non-zero Doppler), static clutter
// (Doppler exactly 0) and optionally a small moving distractor whose Doppler
// magnitudes overlap the subject's, so only a learned model can discard it.

#include "fmfi/classify.hpp"
#include "fmfi/common.hpp"
#include "fmfi/dataset.hpp"
#include "fmfi/pointcloud.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <random>
#include <string>
#include <vector>

namespace fmfi {

struct BodySegment {
  std::array<double, 3> offset{};  // segment center relative to the body origin (floor level)
  std::array<double, 3> spread{};  // per-axis standard deviation of points
  double doppler = 0.5;            // signed mean radial velocity, m/s
  double doppler_std = 0.1;
  double weight = 1.0;             // share of subject points
};

struct ClassKinematics {
  std::string name;
  std::array<double, 3> drift{};   // centroid velocity over a session, m/s
  double vertical_bob = 0.0;       // amplitude of a 1 Hz vertical oscillation, m
  std::vector<BodySegment> segments;
};

struct SyntheticSpec {
  int n_classes = 5;
  int samples_per_class = 400;
  std::uint64_t seed = 1;
  std::uint64_t stream = 0;  // independent sample streams sharing one anchor set
  double embedding_noise_sigma = 0.05;
  int n_static_points = 40;
  int n_dynamic_distractors = 1;
  int distractor_points = 15;
  int subject_points = 60;
  int session_frames = 20;
  std::int64_t frame_period_ms = kDefaultWindowMs;
  int dim = kEmbeddingDim;
  double anchor_cosine_cap = 0.3;
  double max_doppler = 1.2;
  std::vector<ClassKinematics> kinematics;  // empty = built-in table

  void validate() const {
    if (n_classes < 2 || samples_per_class < 1 || n_static_points < 0 || n_dynamic_distractors < 0 ||
        distractor_points < 1 || subject_points < 1 || session_frames < 1 || dim < 1 || frame_period_ms < 1 ||
        !(embedding_noise_sigma >= 0.0) || !(max_doppler > 0.0))
      throw Error(ErrorKind::Usage, "invalid synthetic spec");
    if (!kinematics.empty() && kinematics.size() != static_cast<std::size_t>(n_classes))
      throw Error(ErrorKind::Usage, "kinematics table must list every class");
  }
};

namespace detail {

inline BodySegment seg(std::array<double, 3> off, std::array<double, 3> sd, double d, double dsd, double w) {
  return BodySegment{off, sd, d, dsd, w};
}

inline std::vector<ClassKinematics> builtin_kinematics() {
  // head, torso, left arm, right arm, legs
  return {
      {"walking", {0.3, 0.0, 0.0}, 0.0,
       {seg({0, 0, 1.65}, {.08, .08, .08}, 0.5, .1, .10), seg({0, 0, 1.2}, {.12, .10, .20}, 0.6, .1, .30),
        seg({-.25, 0, 1.1}, {.06, .15, .20}, 0.9, .15, .12), seg({.25, 0, 1.1}, {.06, .15, .20}, -0.9, .15, .12),
        seg({0, 0, .5}, {.15, .25, .30}, 1.0, .15, .36)}},
      {"sitting", {0, 0, 0}, 0.0,
       {seg({0, 0, 1.2}, {.08, .08, .08}, 0.1, .05, .12), seg({0, .1, .85}, {.15, .15, .15}, 0.15, .05, .40),
        seg({-.25, .2, .75}, {.06, .10, .08}, 0.1, .05, .10), seg({.25, .2, .75}, {.06, .10, .08}, 0.1, .05, .10),
        seg({0, .35, .45}, {.15, .20, .10}, 0.08, .04, .28)}},
      {"jumping", {0, 0, 0}, 0.15,
       {seg({0, 0, 1.85}, {.08, .08, .08}, 1.0, .1, .10), seg({0, 0, 1.35}, {.12, .10, .25}, 1.0, .1, .35),
        seg({-.3, 0, 1.6}, {.06, .08, .25}, 1.1, .1, .10), seg({.3, 0, 1.6}, {.06, .08, .25}, 1.1, .1, .10),
        seg({0, 0, .75}, {.12, .10, .35}, 0.9, .1, .35)}},
      {"waving hands", {0, 0, 0}, 0.0,
       {seg({0, 0, 1.65}, {.08, .08, .08}, 0.1, .05, .10), seg({0, 0, 1.2}, {.12, .10, .20}, 0.1, .05, .35),
        seg({-.35, 0, 1.8}, {.15, .06, .15}, -0.8, .2, .15), seg({.35, 0, 1.8}, {.15, .06, .15}, 0.9, .2, .15),
        seg({0, 0, .5}, {.12, .10, .30}, 0.05, .03, .25)}},
      {"squatting", {0, 0, 0}, 0.0,
       {seg({0, 0, 1.0}, {.08, .08, .08}, -0.5, .1, .10), seg({0, 0, .75}, {.20, .15, .15}, -0.6, .1, .40),
        seg({-.3, .2, .7}, {.06, .10, .10}, -0.4, .1, .10), seg({.3, .2, .7}, {.06, .10, .10}, -0.4, .1, .10),
        seg({0, 0, .35}, {.25, .20, .15}, -0.3, .1, .30)}},
  };
}

inline const char* kExtraClassNames[] = {"climbing", "stretching", "cycling", "picking", "pushing"};

// Procedural body models for classes beyond the built-in table.
inline ClassKinematics procedural_kinematics(int index, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0xc1a55, static_cast<std::uint64_t>(index)));
  auto u = [&rng](double lo, double hi) { return lo + (hi - lo) * uniform01(rng); };
  ClassKinematics k;
  const int extra = index - 5;
  k.name = extra < 5 ? kExtraClassNames[extra] : "activity " + std::to_string(index);
  k.drift = {u(-0.3, 0.3), u(-0.3, 0.3), 0.0};
  k.vertical_bob = u(0.0, 0.1);
  const double height = u(0.8, 1.9);
  for (int s = 0; s < 5; ++s) {
    const double z = height * (s == 4 ? 0.3 : s == 0 ? 1.0 : 0.7);
    const double sign = uniform01(rng) < 0.5 ? -1.0 : 1.0;
    k.segments.push_back(seg({u(-.35, .35), u(-.35, .35), z}, {u(.05, .2), u(.05, .2), u(.05, .3)},
                             sign * u(0.05, 1.1), u(0.03, 0.15), u(0.1, 0.4)));
  }
  return k;
}

}  // namespace detail

inline std::vector<ClassKinematics> class_kinematics(const SyntheticSpec& spec) {
  if (!spec.kinematics.empty()) return spec.kinematics;
  std::vector<ClassKinematics> table = detail::builtin_kinematics();
  if (spec.n_classes <= static_cast<int>(table.size())) {
    table.resize(static_cast<std::size_t>(spec.n_classes));
  } else {
    for (int c = static_cast<int>(table.size()); c < spec.n_classes; ++c)
      table.push_back(detail::procedural_kinematics(c, spec.seed));
  }
  return table;
}

/// Per-class unit anchors in the teacher space. Rows of a seeded Gaussian
/// matrix, normalized and redrawn until every pairwise |cosine| is under the
/// cap. Depends only on the seed, never on the stream.
inline std::vector<std::vector<double>> oracle_anchors(const SyntheticSpec& spec) {
  Rng rng(derive_seed(spec.seed, 0xa2c4));
  std::normal_distribution<double> normal;
  std::vector<std::vector<double>> rows;
  constexpr int kMaxRedraws = 10000;
  int redraws = 0;
  while (rows.size() < static_cast<std::size_t>(spec.n_classes)) {
    std::vector<double> v(static_cast<std::size_t>(spec.dim));
    for (double& x : v) x = normal(rng);
    const double n = l2_norm(v);
    for (double& x : v) x /= n;
    bool ok = true;
    for (const auto& r : rows) {
      double dot = 0.0;
      for (std::size_t i = 0; i < v.size(); ++i) dot += r[i] * v[i];
      if (std::abs(dot) > spec.anchor_cosine_cap) ok = false;
    }
    if (ok) {
      rows.push_back(std::move(v));
    } else if (++redraws > kMaxRedraws) {
      throw Error(ErrorKind::Usage, "cannot satisfy the anchor cosine cap at this dimension");
    }
  }
  return rows;
}

struct SyntheticDataset {
  Dataset samples;
  std::vector<TextAnchor> anchors;
  std::vector<int> classes;  // latent class of every sample
  std::vector<int> subject_point_counts;
};

namespace detail {

struct SessionState {
  std::array<double, 3> origin{};
  double scale = 1.0;
  double yaw = 0.0;
  double doppler_sign = 1.0;
};

inline std::array<double, 3> class_base(int c, int n_classes) {
  const double radius = std::max(1.5, 0.35 * n_classes);
  const double angle = 2.0 * std::numbers::pi * c / n_classes;
  return {radius * std::cos(angle), 3.0 + radius * std::sin(angle), 0.0};
}

}  // namespace detail

/// Generates `n_classes * samples_per_class` samples laid out as contiguous
/// activity sessions on a 200 ms timeline. Pure function of the spec.
inline SyntheticDataset gen_dataset(const SyntheticSpec& spec) {
  spec.validate();
  const auto kin = class_kinematics(spec);
  const auto anchors = oracle_anchors(spec);
  SyntheticDataset out;
  for (int c = 0; c < spec.n_classes; ++c)
    out.anchors.push_back({kin[c].name, default_prompt(kin[c].name), anchors[static_cast<std::size_t>(c)]});

  // Session schedule: rounds over a shuffled class order until every class
  // has emitted its samples.
  struct Session {
    int cls;
    int frames;
  };
  std::vector<Session> schedule;
  std::vector<int> remaining(static_cast<std::size_t>(spec.n_classes), spec.samples_per_class);
  Rng order_rng(derive_seed(spec.seed, 0x0bde + spec.stream));
  for (;;) {
    std::vector<int> order(static_cast<std::size_t>(spec.n_classes));
    for (int c = 0; c < spec.n_classes; ++c) order[static_cast<std::size_t>(c)] = c;
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[std::min(uniform_index(order_rng, i), i - 1)]);
    bool any = false;
    for (int c : order) {
      const int take = std::min(spec.session_frames, remaining[static_cast<std::size_t>(c)]);
      if (take == 0) continue;
      schedule.push_back({c, take});
      remaining[static_cast<std::size_t>(c)] -= take;
      any = true;
    }
    if (!any) break;
  }

  std::uint64_t sample_index = 0;
  for (std::size_t s = 0; s < schedule.size(); ++s) {
    const Session& session = schedule[s];
    const ClassKinematics& k = kin[static_cast<std::size_t>(session.cls)];
    Rng srng(derive_seed(spec.seed, 0x5e55 + spec.stream, s));
    std::normal_distribution<double> sn;
    detail::SessionState st;
    const auto base = detail::class_base(session.cls, spec.n_classes);
    st.origin = {base[0] + 0.25 * sn(srng), base[1] + 0.25 * sn(srng), 0.0};
    st.scale = 0.9 + 0.2 * uniform01(srng);
    st.yaw = (uniform01(srng) - 0.5) * (40.0 * std::numbers::pi / 180.0);
    st.doppler_sign = uniform01(srng) < 0.5 ? -1.0 : 1.0;

    double weight_sum = 0.0;
    for (const auto& sg : k.segments) weight_sum += sg.weight;

    for (int f = 0; f < session.frames; ++f, ++sample_index) {
      Rng rng(derive_seed(spec.seed, 0xf4a3e + spec.stream, sample_index));
      std::normal_distribution<double> normal;
      const double t = (f - 0.5 * (session.frames - 1)) * static_cast<double>(spec.frame_period_ms) / 1000.0;
      const std::array<double, 3> center{st.origin[0] + k.drift[0] * t, st.origin[1] + k.drift[1] * t,
                                         st.origin[2] + k.drift[2] * t +
                                             k.vertical_bob * std::sin(2.0 * std::numbers::pi * t)};
      const double cy = std::cos(st.yaw), sy = std::sin(st.yaw);

      PointFrame frame;
      frame.timestamp_ms = static_cast<std::int64_t>(sample_index) * spec.frame_period_ms;
      frame.window_ms = spec.frame_period_ms;

      // Subject points, allocated to segments by cumulative weight.
      double cum = 0.0;
      int emitted = 0;
      for (std::size_t g = 0; g < k.segments.size(); ++g) {
        const BodySegment& sg = k.segments[g];
        cum += sg.weight;
        const int upto = g + 1 == k.segments.size()
                             ? spec.subject_points
                             : static_cast<int>(std::lround(cum / weight_sum * spec.subject_points));
        for (; emitted < upto; ++emitted) {
          const double lx = st.scale * (sg.offset[0] + sg.spread[0] * normal(rng));
          const double ly = st.scale * (sg.offset[1] + sg.spread[1] * normal(rng));
          const double lz = st.scale * (sg.offset[2] + sg.spread[2] * normal(rng));
          RadarPoint p;
          p.x = center[0] + cy * lx - sy * ly;
          p.y = center[1] + sy * lx + cy * ly;
          p.z = center[2] + lz;
          const double mag =
              std::clamp(std::abs(sg.doppler) + sg.doppler_std * normal(rng), 0.01, spec.max_doppler);
          p.doppler = st.doppler_sign * (sg.doppler < 0.0 ? -mag : mag);
          p.intensity = std::max(0.0, 1.0 + 0.2 * normal(rng));
          frame.points.push_back(p);
        }
      }

      for (int i = 0; i < spec.n_static_points; ++i) {
        RadarPoint p;
        p.x = -4.0 + 8.0 * uniform01(rng);
        p.y = 0.5 + 6.5 * uniform01(rng);
        p.z = 2.5 * uniform01(rng);
        p.doppler = 0.0;
        p.intensity = 0.5 + 2.5 * uniform01(rng);
        frame.points.push_back(p);
      }

      for (int d = 0; d < spec.n_dynamic_distractors; ++d) {
        const std::array<double, 3> at{-3.0 + 6.0 * uniform01(rng), 1.0 + 5.0 * uniform01(rng),
                                       0.1 + 0.3 * uniform01(rng)};
        const double speed = (uniform01(rng) < 0.5 ? -1.0 : 1.0) * (0.2 + 0.8 * uniform01(rng));
        for (int i = 0; i < spec.distractor_points; ++i) {
          RadarPoint p;
          p.x = at[0] + 0.12 * normal(rng);
          p.y = at[1] + 0.12 * normal(rng);
          p.z = at[2] + 0.08 * normal(rng);
          const double mag = std::clamp(std::abs(speed) + 0.1 * normal(rng), 0.01, spec.max_doppler);
          p.doppler = speed < 0.0 ? -mag : mag;
          p.intensity = std::max(0.0, 0.4 + 0.1 * normal(rng));
          frame.points.push_back(p);
        }
      }

      std::vector<double> teacher = anchors[static_cast<std::size_t>(session.cls)];
      if (spec.embedding_noise_sigma > 0.0) {
        for (double& x : teacher) x += spec.embedding_noise_sigma * normal(rng);
        const double n = l2_norm(teacher);
        for (double& x : teacher) x /= n;
      }

      PairedSample sample;
      sample.frame = std::move(frame);
      sample.teacher = std::move(teacher);
      sample.label = k.name;
      sample.timestamp_ms = sample.frame.timestamp_ms;
      out.samples.push_back(std::move(sample));
      out.classes.push_back(session.cls);
      out.subject_point_counts.push_back(spec.subject_points);
    }
  }
  return out;
}

/// Zero-shot accuracy of the teacher embeddings themselves against the
/// anchors: the ceiling any student trained on this data can approach.
inline double oracle_zero_shot_bound(const SyntheticSpec& spec) {
  const SyntheticDataset data = gen_dataset(spec);
  const AnchorMatrix anchors(data.anchors);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.samples.size(); ++i)
    if (zero_shot(data.samples[i].teacher, anchors).index == static_cast<std::size_t>(data.classes[i])) ++correct;
  return static_cast<double>(correct) / static_cast<double>(data.samples.size());
}

}  // namespace fmfi
