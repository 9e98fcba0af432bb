#pragma once

#include "fmfi/encoder.hpp"
#include "fmfi/pointcloud.hpp"

#include <random>
#include <vector>

namespace fmfi::testing {

// Small enough for finite differences, with every layer kind present.
inline EncoderConfig tiny_config() {
  EncoderConfig c;
  c.points_per_frame = 8;
  c.d_model = 8;
  c.d_k = 8;
  c.d_out = 16;
  c.stn_hidden = {8, 12};
  c.phi_hidden = {8, 12, 16};
  c.psi_hidden = {16};
  return c;
}

inline PointFrame random_frame(Rng& rng, int points, double static_share = 0.0) {
  std::normal_distribution<double> n;
  PointFrame f;
  for (int i = 0; i < points; ++i) {
    RadarPoint p;
    p.x = n(rng);
    p.y = 3.0 + n(rng);
    p.z = 1.0 + 0.5 * n(rng);
    p.doppler = uniform01(rng) < static_share ? 0.0 : 0.05 + uniform01(rng);
    if (uniform01(rng) < 0.5) p.doppler = -p.doppler;
    p.intensity = uniform01(rng) * 2.0;
    f.points.push_back(p);
  }
  return f;
}

template <class S>
Mat<S> random_frame_matrix(Rng& rng, int points) {
  std::normal_distribution<double> n;
  Mat<S> m(points, 5);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(n(rng));
  return m;
}

// Moves every learnable tensor away from its structured initialization so
// that no gradient is trivially zero.
template <class S>
void perturb(EncoderParams<S>& p, Rng& rng, double scale) {
  std::normal_distribution<double> n;
  for (auto& [name, m] : p.named_params())
    for (Eigen::Index i = 0; i < m->size(); ++i) m->data()[i] += static_cast<S>(scale * n(rng));
}

}  // namespace fmfi::testing
