#pragma once

// Checks shared by the unit tests and the acceptance runner.

#include "fmfi/distill.hpp"
#include "fmfi/encoder.hpp"

#include "helpers.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace fmfi::testing {

struct GradientCheck {
  double max_rel_error = 0.0;
  std::string worst;
  std::size_t checked = 0;
};

// Central differences over every learnable scalar of a randomly perturbed
// tiny encoder under the contrastive loss, in double precision. Relative
// error is |a - n| / max(|a|, |n|, 1e-6).
inline GradientCheck gradient_check(double step = 1e-5, std::uint64_t seed = 3) {
  const EncoderConfig cfg = tiny_config();
  Rng rng(seed);
  EncoderParams<double> params = init_encoder<double>(cfg, seed);
  perturb(params, rng, 0.1);
  constexpr int kBatch = 4;
  std::vector<Mat<double>> frames;
  for (int b = 0; b < kBatch; ++b) frames.push_back(random_frame_matrix<double>(rng, cfg.points_per_frame));
  MatD teacher(kBatch, cfg.d_out);
  std::normal_distribution<double> n;
  for (Eigen::Index i = 0; i < teacher.size(); ++i) teacher.data()[i] = n(rng);
  const double tau = 1.0;
  const std::uint64_t dropout_seed = 99;

  auto loss_at = [&](const EncoderParams<double>& p) {
    return ckd_loss<double>(teacher, encoder_forward_batch<double>(frames, p, Mode::Train, dropout_seed), tau).value;
  };
  EncoderCache<double> cache;
  const Mat<double> student = encoder_forward_batch<double>(frames, params, Mode::Train, dropout_seed, &cache);
  const EncoderParams<double> grads =
      encoder_backward<double>(cache, params, ckd_loss<double>(teacher, student, tau).grad);

  GradientCheck out;
  auto p = params.named_params();
  const auto g = grads.named_params();
  for (std::size_t t = 0; t < p.size(); ++t) {
    Mat<double>& m = *p[t].second;
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      const double orig = m.data()[i];
      m.data()[i] = orig + step;
      const double up = loss_at(params);
      m.data()[i] = orig - step;
      const double down = loss_at(params);
      m.data()[i] = orig;
      const double numeric = (up - down) / (2.0 * step);
      const double analytic = g[t].second->data()[i];
      const double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
      if (rel > out.max_rel_error) {
        out.max_rel_error = rel;
        out.worst = p[t].first + "[" + std::to_string(i) + "]";
      }
      ++out.checked;
    }
  }
  return out;
}

// Inference-mode embeddings of `frames` random frames under `perms` random
// row permutations each; returns the number of frames whose embeddings were
// not bitwise identical across permutations.
inline int permutation_mismatches(int frames, int perms, std::uint64_t seed = 17) {
  EncoderConfig cfg;
  Rng rng(seed);
  EncoderParams<float> params = init_encoder<float>(cfg, seed);
  perturb(params, rng, 0.05);
  for (auto& [name, m] : params.named_buffers())
    if (name.find("running_var") != std::string::npos) m->array() += 0.5f;
  int bad = 0;
  for (int f = 0; f < frames; ++f) {
    const Mat<float> frame = random_frame_matrix<float>(rng, cfg.points_per_frame);
    const Mat<float> ref = encoder_forward<float>(frame, params);
    for (int k = 0; k < perms; ++k) {
      std::vector<Eigen::Index> order(static_cast<std::size_t>(frame.rows()));
      std::iota(order.begin(), order.end(), Eigen::Index{0});
      std::shuffle(order.begin(), order.end(), rng);
      Mat<float> permuted(frame.rows(), frame.cols());
      for (std::size_t r = 0; r < order.size(); ++r) permuted.row(static_cast<Eigen::Index>(r)) = frame.row(order[r]);
      const Mat<float> e = encoder_forward<float>(permuted, params);
      if (e.size() != ref.size() || std::memcmp(e.data(), ref.data(), sizeof(float) * static_cast<std::size_t>(e.size())) != 0) {
        ++bad;
        break;
      }
    }
  }
  return bad;
}

}  // namespace fmfi::testing
