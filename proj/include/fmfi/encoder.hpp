#pragma once

// The RF student encoder:
//
//   E = psi( maxpool_points( phi( attention( lift( [T(X) x, doppler, intensity] ) ) ) ) )
//
// T is a spatial transformer predicting a 3x3 matrix from the coordinate
// cloud, attention is a stack of single-head self-attention layers over the
// points, phi is a per-point MLP and psi the post-pool MLP. Forward and
// backward passes are written out by hand; every tensor is a row-major Eigen
// matrix with one row per point (or per sample after pooling).
//
// Points are sorted into a canonical order before anything else runs, so the
// output is bitwise independent of the input point order.

#include "fmfi/common.hpp"
#include "fmfi/pointcloud.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace fmfi {

enum class Mode { Train, Inference };

struct EncoderConfig {
  int points_per_frame = kDefaultPointsPerFrame;
  int d_out = kEmbeddingDim;
  std::vector<int> stn_hidden{64, 128};
  int n_attn_layers = 2;
  int d_model = 64;
  int d_k = 64;
  std::vector<int> phi_hidden{64, 128, 512};
  std::vector<int> psi_hidden{512, 512};
  double dropout_rate = 0.3;
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;
  bool attention_residual = true;

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;

  void validate() const {
    auto positive = [](int v) { return v > 0; };
    const bool ok = points_per_frame > 0 && d_out > 0 && n_attn_layers >= 0 && d_model > 0 && d_k > 0 &&
                    std::all_of(stn_hidden.begin(), stn_hidden.end(), positive) &&
                    std::all_of(phi_hidden.begin(), phi_hidden.end(), positive) &&
                    std::all_of(psi_hidden.begin(), psi_hidden.end(), positive) && !stn_hidden.empty() &&
                    !phi_hidden.empty() && dropout_rate >= 0.0 && dropout_rate < 1.0;
    if (!ok) throw Error(ErrorKind::Usage, "invalid encoder configuration");
  }
};

template <class S>
struct Linear {
  Mat<S> w;  // in x out
  Mat<S> b;  // 1 x out
};

template <class S>
struct BatchNorm {
  Mat<S> gamma;
  Mat<S> beta;
  Mat<S> running_mean;
  Mat<S> running_var;
};

template <class S>
struct AttentionWeights {
  Mat<S> wq;  // d_model x d_k
  Mat<S> wk;  // d_model x d_k
  Mat<S> wv;  // d_model x d_model
};

/// All learnable tensors of the encoder plus batch-norm running statistics.
/// The same type doubles as the gradient container.
template <class S>
struct EncoderParams {
  EncoderConfig config;
  std::vector<Linear<S>> stn_point;
  std::vector<BatchNorm<S>> stn_bn;
  Linear<S> stn_head;
  Linear<S> lift;
  std::vector<AttentionWeights<S>> attention;
  std::vector<Linear<S>> phi;
  std::vector<BatchNorm<S>> phi_bn;
  std::vector<Linear<S>> psi;
  std::vector<BatchNorm<S>> psi_bn;
  Linear<S> psi_out;

  /// Learnable tensors in a fixed order, with stable names.
  std::vector<std::pair<std::string, Mat<S>*>> named_params() { return collect_params(*this); }
  std::vector<std::pair<std::string, const Mat<S>*>> named_params() const { return collect_params(*this); }

  /// Batch-norm running statistics.
  std::vector<std::pair<std::string, Mat<S>*>> named_buffers() { return collect_buffers(*this); }
  std::vector<std::pair<std::string, const Mat<S>*>> named_buffers() const { return collect_buffers(*this); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, m] : named_params()) n += static_cast<std::size_t>(m->size());
    return n;
  }

  EncoderParams zeros_like() const {
    EncoderParams out = *this;
    for (auto& [name, m] : out.named_params()) m->setZero();
    return out;
  }

  template <class T>
  EncoderParams<T> cast() const {
    EncoderParams<T> out;
    out.config = config;
    auto conv_lin = [](const Linear<S>& l) { return Linear<T>{l.w.template cast<T>(), l.b.template cast<T>()}; };
    auto conv_bn = [](const BatchNorm<S>& bn) {
      return BatchNorm<T>{bn.gamma.template cast<T>(), bn.beta.template cast<T>(),
                          bn.running_mean.template cast<T>(), bn.running_var.template cast<T>()};
    };
    for (const auto& l : stn_point) out.stn_point.push_back(conv_lin(l));
    for (const auto& bn : stn_bn) out.stn_bn.push_back(conv_bn(bn));
    out.stn_head = conv_lin(stn_head);
    out.lift = conv_lin(lift);
    for (const auto& a : attention)
      out.attention.push_back({a.wq.template cast<T>(), a.wk.template cast<T>(), a.wv.template cast<T>()});
    for (const auto& l : phi) out.phi.push_back(conv_lin(l));
    for (const auto& bn : phi_bn) out.phi_bn.push_back(conv_bn(bn));
    for (const auto& l : psi) out.psi.push_back(conv_lin(l));
    for (const auto& bn : psi_bn) out.psi_bn.push_back(conv_bn(bn));
    out.psi_out = conv_lin(psi_out);
    return out;
  }

 private:
  template <class Self>
  static auto collect_params(Self& self) {
    using Ptr = std::conditional_t<std::is_const_v<Self>, const Mat<S>*, Mat<S>*>;
    std::vector<std::pair<std::string, Ptr>> out;
    auto lin = [&out](const std::string& prefix, auto& l) {
      out.emplace_back(prefix + ".w", &l.w);
      out.emplace_back(prefix + ".b", &l.b);
    };
    auto bn = [&out](const std::string& prefix, auto& n) {
      out.emplace_back(prefix + ".gamma", &n.gamma);
      out.emplace_back(prefix + ".beta", &n.beta);
    };
    for (std::size_t i = 0; i < self.stn_point.size(); ++i) {
      lin("stn." + std::to_string(i), self.stn_point[i]);
      bn("stn." + std::to_string(i) + ".bn", self.stn_bn[i]);
    }
    lin("stn.head", self.stn_head);
    lin("lift", self.lift);
    for (std::size_t i = 0; i < self.attention.size(); ++i) {
      const std::string p = "attn." + std::to_string(i);
      out.emplace_back(p + ".wq", &self.attention[i].wq);
      out.emplace_back(p + ".wk", &self.attention[i].wk);
      out.emplace_back(p + ".wv", &self.attention[i].wv);
    }
    for (std::size_t i = 0; i < self.phi.size(); ++i) {
      lin("phi." + std::to_string(i), self.phi[i]);
      bn("phi." + std::to_string(i) + ".bn", self.phi_bn[i]);
    }
    for (std::size_t i = 0; i < self.psi.size(); ++i) {
      lin("psi." + std::to_string(i), self.psi[i]);
      bn("psi." + std::to_string(i) + ".bn", self.psi_bn[i]);
    }
    lin("psi.out", self.psi_out);
    return out;
  }

  template <class Self>
  static auto collect_buffers(Self& self) {
    using Ptr = std::conditional_t<std::is_const_v<Self>, const Mat<S>*, Mat<S>*>;
    std::vector<std::pair<std::string, Ptr>> out;
    auto bn = [&out](const std::string& prefix, auto& n) {
      out.emplace_back(prefix + ".running_mean", &n.running_mean);
      out.emplace_back(prefix + ".running_var", &n.running_var);
    };
    for (std::size_t i = 0; i < self.stn_bn.size(); ++i) bn("stn." + std::to_string(i) + ".bn", self.stn_bn[i]);
    for (std::size_t i = 0; i < self.phi_bn.size(); ++i) bn("phi." + std::to_string(i) + ".bn", self.phi_bn[i]);
    for (std::size_t i = 0; i < self.psi_bn.size(); ++i) bn("psi." + std::to_string(i) + ".bn", self.psi_bn[i]);
    return out;
  }
};

namespace detail {

template <class S>
Linear<S> init_linear(int in, int out, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  Linear<S> l{Mat<S>(in, out), Mat<S>(1, out)};
  for (Eigen::Index i = 0; i < l.w.size(); ++i) l.w.data()[i] = static_cast<S>((2.0 * uniform01(rng) - 1.0) * bound);
  for (Eigen::Index i = 0; i < l.b.size(); ++i) l.b.data()[i] = static_cast<S>((2.0 * uniform01(rng) - 1.0) * bound);
  return l;
}

template <class S>
Mat<S> init_matrix(int in, int out, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  Mat<S> m(in, out);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>((2.0 * uniform01(rng) - 1.0) * bound);
  return m;
}

template <class S>
BatchNorm<S> init_bn(int width) {
  return BatchNorm<S>{Mat<S>::Ones(1, width), Mat<S>::Zero(1, width), Mat<S>::Zero(1, width),
                      Mat<S>::Ones(1, width)};
}

}  // namespace detail

/// Fresh parameters. The spatial transformer head has zero weights and an
/// identity bias, so a new encoder applies the identity transform.
template <class S>
EncoderParams<S> init_encoder(const EncoderConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  EncoderParams<S> p;
  p.config = cfg;
  int width = 3;
  for (int h : cfg.stn_hidden) {
    p.stn_point.push_back(detail::init_linear<S>(width, h, rng));
    p.stn_bn.push_back(detail::init_bn<S>(h));
    width = h;
  }
  p.stn_head = Linear<S>{Mat<S>::Zero(width, 9), Mat<S>::Zero(1, 9)};
  p.stn_head.b(0, 0) = p.stn_head.b(0, 4) = p.stn_head.b(0, 8) = S(1);
  p.lift = detail::init_linear<S>(5, cfg.d_model, rng);
  for (int i = 0; i < cfg.n_attn_layers; ++i) {
    p.attention.push_back({detail::init_matrix<S>(cfg.d_model, cfg.d_k, rng),
                           detail::init_matrix<S>(cfg.d_model, cfg.d_k, rng),
                           detail::init_matrix<S>(cfg.d_model, cfg.d_model, rng)});
  }
  width = cfg.d_model;
  for (int h : cfg.phi_hidden) {
    p.phi.push_back(detail::init_linear<S>(width, h, rng));
    p.phi_bn.push_back(detail::init_bn<S>(h));
    width = h;
  }
  for (int h : cfg.psi_hidden) {
    p.psi.push_back(detail::init_linear<S>(width, h, rng));
    p.psi_bn.push_back(detail::init_bn<S>(h));
    width = h;
  }
  p.psi_out = detail::init_linear<S>(width, cfg.d_out, rng);
  return p;
}

/// Per-layer state kept by a forward pass for the matching backward pass.
/// The layer input is not stored; it is the previous layer's output.
template <class S>
struct DenseCache {
  Mat<S> xhat;
  Mat<S> inv_std;  // 1 x width
  Mat<S> drop_mask;
  Mat<S> output;
  Mat<S> batch_mean;
  Mat<S> batch_var;  // unbiased, for the running-statistics update
  bool batch_stats = false;
};

/// Projections for all rows plus one softmax block per sample, stacked.
template <class S>
struct AttentionCache {
  Mat<S> q, k, v, a;
};

template <class S>
struct EncoderCache {
  int batch = 0;
  int points = 0;
  Mat<S> input;   // (batch*points) x 5, canonical point order per sample
  Mat<S> coords;  // input.leftCols(3)
  std::vector<DenseCache<S>> stn;
  Mat<S> stn_pooled;
  std::vector<int> stn_argmax;
  Mat<S> transforms;  // batch x 9, row-major 3x3 per sample
  Mat<S> features;    // transformed coordinates + doppler + intensity
  std::vector<Mat<S>> hidden;  // attention inputs; hidden.back() feeds phi
  std::vector<AttentionCache<S>> attention;
  std::vector<DenseCache<S>> phi;
  Mat<S> pooled;
  std::vector<int> pool_argmax;
  std::vector<DenseCache<S>> psi;
};

namespace detail {

template <class S>
Mat<S> affine(const Mat<S>& x, const Linear<S>& l) {
  Mat<S> z(x.rows(), l.w.cols());
  z.noalias() = x * l.w;
  z.rowwise() += l.b.row(0);
  return z;
}

// Linear -> batch norm -> ReLU -> (optional) dropout. Batch statistics
// make the linear bias irrelevant, so it is only added when running
// statistics are used.
template <class S>
Mat<S> dense_forward(const Mat<S>& x, const Linear<S>& lin, const BatchNorm<S>& bn, const EncoderConfig& cfg,
                     Mode mode, double dropout, Rng* rng, DenseCache<S>* cache) {
  const Eigen::Index rows = x.rows(), cols = lin.w.cols();
  Mat<S> z(rows, cols);
  z.noalias() = x * lin.w;
  const bool batch_stats = mode == Mode::Train && rows > 1;
  Mat<S> mean(1, cols), inv_std(1, cols);
  S* __restrict zp = z.data();
  S* __restrict mp = mean.data();
  S* __restrict ip = inv_std.data();
  const S eps = static_cast<S>(cfg.bn_eps);
  if (batch_stats) {
    mean.setZero();
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c) mp[c] += zp[r * cols + c];
    for (Eigen::Index c = 0; c < cols; ++c) mp[c] /= static_cast<S>(rows);
    Mat<S> var = Mat<S>::Zero(1, cols);
    S* __restrict vp = var.data();
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c) {
        const S d = zp[r * cols + c] - mp[c];
        vp[c] += d * d;
      }
    for (Eigen::Index c = 0; c < cols; ++c) {
      vp[c] /= static_cast<S>(rows);
      ip[c] = S(1) / std::sqrt(vp[c] + eps);
    }
    if (cache) {
      cache->batch_mean = mean + lin.b;  // statistics of the biased pre-activation
      cache->batch_var = var * (static_cast<S>(rows) / static_cast<S>(rows - 1));
    }
  } else {
    for (Eigen::Index c = 0; c < cols; ++c) {
      mp[c] = bn.running_mean(0, c) - lin.b(0, c);
      ip[c] = S(1) / std::sqrt(bn.running_var(0, c) + eps);
    }
  }
  const S* __restrict gp = bn.gamma.data();
  const S* __restrict bp = bn.beta.data();
  if (!cache && !(mode == Mode::Train && dropout > 0.0)) {
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c)
        zp[r * cols + c] = std::max(gp[c] * ((zp[r * cols + c] - mp[c]) * ip[c]) + bp[c], S(0));
    return z;
  }
  Mat<S> out(rows, cols);
  S* __restrict op = out.data();
  if (cache) {
    // z becomes xhat in place.
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c) {
        const S xh = (zp[r * cols + c] - mp[c]) * ip[c];
        zp[r * cols + c] = xh;
        op[r * cols + c] = std::max(gp[c] * xh + bp[c], S(0));
      }
  } else {
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c)
        op[r * cols + c] = std::max(gp[c] * ((zp[r * cols + c] - mp[c]) * ip[c]) + bp[c], S(0));
  }
  const bool drop = mode == Mode::Train && dropout > 0.0;
  Mat<S> mask;
  if (drop) {
    mask.resize(rows, cols);
    const S keep_scale = static_cast<S>(1.0 / (1.0 - dropout));
    for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = uniform01(*rng) < dropout ? S(0) : keep_scale;
    out.array() *= mask.array();
  }
  if (cache) {
    cache->xhat = std::move(z);
    cache->inv_std = std::move(inv_std);
    cache->batch_stats = batch_stats;
    cache->drop_mask = std::move(mask);
  }
  return out;
}

// `input` is the tensor the layer consumed in the forward pass.
template <class S>
Mat<S> dense_backward(const DenseCache<S>& c, const Mat<S>& input, Mat<S> d_out, const Linear<S>& lin,
                      const BatchNorm<S>& bn, Linear<S>& g_lin, BatchNorm<S>& g_bn) {
  const Eigen::Index rows = d_out.rows(), cols = d_out.cols();
  S* __restrict dp = d_out.data();
  const S* __restrict op = c.output.data();
  const S* __restrict xp = c.xhat.data();
  Mat<S> sum_d = Mat<S>::Zero(1, cols), sum_dx = Mat<S>::Zero(1, cols);
  S* __restrict sd = sum_d.data();
  S* __restrict sx = sum_dx.data();
  // Gradient through dropout and ReLU: a unit passes iff its output is
  // positive, and then carries the dropout scale.
  const bool drop = c.drop_mask.size() > 0;
  const S* __restrict mk = drop ? c.drop_mask.data() : nullptr;
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index j = 0; j < cols; ++j) {
      const Eigen::Index i = r * cols + j;
      const S g = op[i] > S(0) ? dp[i] * (drop ? mk[i] : S(1)) : S(0);
      dp[i] = g;
      sd[j] += g;
      sx[j] += g * xp[i];
    }
  g_bn.gamma += sum_dx;
  g_bn.beta += sum_d;
  const S* __restrict gp = bn.gamma.data();
  const S* __restrict ip = c.inv_std.data();
  if (c.batch_stats) {
    const S n = static_cast<S>(rows);
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index j = 0; j < cols; ++j) {
        const Eigen::Index i = r * cols + j;
        dp[i] = gp[j] * ip[j] / n * (n * dp[i] - sd[j] - xp[i] * sx[j]);
      }
  } else {
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index j = 0; j < cols; ++j) dp[r * cols + j] *= gp[j] * ip[j];
  }
  g_lin.w.noalias() += input.transpose() * d_out;
  g_lin.b += d_out.colwise().sum();
  Mat<S> dx(input.rows(), input.cols());
  dx.noalias() = d_out * lin.w.transpose();
  return dx;
}

template <class S>
void update_running(BatchNorm<S>& bn, const DenseCache<S>& c, double momentum) {
  if (!c.batch_stats) return;
  const S m = static_cast<S>(momentum);
  bn.running_mean = (S(1) - m) * bn.running_mean + m * c.batch_mean;
  bn.running_var = (S(1) - m) * bn.running_var + m * c.batch_var;
}

// Max over each sample's block of `points` rows; ties go to the first row.
template <class S>
Mat<S> maxpool(const Mat<S>& x, int batch, int points, std::vector<int>& argmax) {
  const Eigen::Index cols = x.cols();
  Mat<S> out(batch, cols);
  argmax.assign(static_cast<std::size_t>(batch) * static_cast<std::size_t>(cols), 0);
  for (int b = 0; b < batch; ++b) {
    const S* __restrict base = x.data() + static_cast<Eigen::Index>(b) * points * cols;
    S* __restrict o = out.data() + b * cols;
    int* __restrict am = argmax.data() + static_cast<std::size_t>(b) * static_cast<std::size_t>(cols);
    std::copy(base, base + cols, o);
    for (int p = 1; p < points; ++p) {
      const S* __restrict row = base + p * cols;
      for (Eigen::Index c = 0; c < cols; ++c) {
        const bool gt = row[c] > o[c];
        o[c] = gt ? row[c] : o[c];
        am[c] = gt ? p : am[c];
      }
    }
  }
  return out;
}

template <class S>
Mat<S> maxpool_backward(const Mat<S>& d_out, int points, const std::vector<int>& argmax) {
  Mat<S> dx = Mat<S>::Zero(d_out.rows() * points, d_out.cols());
  for (Eigen::Index b = 0; b < d_out.rows(); ++b)
    for (Eigen::Index c = 0; c < d_out.cols(); ++c)
      dx(b * points + argmax[static_cast<std::size_t>(b * d_out.cols() + c)], c) = d_out(b, c);
  return dx;
}

template <class S>
void softmax_rows(Eigen::Ref<Mat<S>> m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    row.array() -= row.maxCoeff();
    row = row.array().exp().matrix();
    row /= row.sum();
  }
}

// Self-attention applied independently to each block of `points` rows.
template <class S>
Mat<S> attention_forward(const Mat<S>& h, const AttentionWeights<S>& w, int points, AttentionCache<S>* cache) {
  const Eigen::Index rows = h.rows();
  const int batch = static_cast<int>(rows / points);
  Mat<S> q(rows, w.wq.cols()), k(rows, w.wk.cols()), v(rows, w.wv.cols());
  q.noalias() = h * w.wq;
  k.noalias() = h * w.wk;
  v.noalias() = h * w.wv;
  const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(w.wq.cols())));
  Mat<S> a(rows, points);
  Mat<S> out(rows, v.cols());
  for (int b = 0; b < batch; ++b) {
    const Eigen::Index base = static_cast<Eigen::Index>(b) * points;
    auto ab = a.middleRows(base, points);
    ab.noalias() = q.middleRows(base, points) * k.middleRows(base, points).transpose();
    ab *= scale;
    softmax_rows<S>(ab);
    out.middleRows(base, points).noalias() = ab * v.middleRows(base, points);
  }
  if (cache) *cache = AttentionCache<S>{std::move(q), std::move(k), std::move(v), std::move(a)};
  return out;
}

// Gradient of one attention layer w.r.t. its input; weight gradients are
// accumulated into `g`.
template <class S>
Mat<S> attention_backward(const Mat<S>& h, const AttentionCache<S>& c, const Mat<S>& d_out, int points,
                          const AttentionWeights<S>& w, AttentionWeights<S>& g) {
  const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(w.wq.cols())));
  const Eigen::Index rows = h.rows();
  const int batch = static_cast<int>(rows / points);
  Mat<S> d_q(rows, c.q.cols()), d_k(rows, c.k.cols()), d_v(rows, c.v.cols());
  Mat<S> d_s(points, points);
  for (int b = 0; b < batch; ++b) {
    const Eigen::Index base = static_cast<Eigen::Index>(b) * points;
    const auto ab = c.a.middleRows(base, points);
    const auto db = d_out.middleRows(base, points);
    d_s.noalias() = db * c.v.middleRows(base, points).transpose();
    d_v.middleRows(base, points).noalias() = ab.transpose() * db;
    const auto row_dot = (d_s.array() * ab.array()).rowwise().sum().eval();
    d_s.array() = ab.array() * (d_s.array().colwise() - row_dot) * scale;
    d_q.middleRows(base, points).noalias() = d_s * c.k.middleRows(base, points);
    d_k.middleRows(base, points).noalias() = d_s.transpose() * c.q.middleRows(base, points);
  }
  g.wq.noalias() += h.transpose() * d_q;
  g.wk.noalias() += h.transpose() * d_k;
  g.wv.noalias() += h.transpose() * d_v;
  Mat<S> d_h(rows, h.cols());
  d_h.noalias() = d_q * w.wq.transpose();
  d_h.noalias() += d_k * w.wk.transpose();
  d_h.noalias() += d_v * w.wv.transpose();
  return d_h;
}

template <class S>
Mat<S> canonical_rows(const Mat<S>& frame) {
  std::vector<Eigen::Index> order(static_cast<std::size_t>(frame.rows()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::sort(order.begin(), order.end(), [&frame](Eigen::Index a, Eigen::Index b) {
    for (Eigen::Index c = 0; c < frame.cols(); ++c) {
      if (frame(a, c) < frame(b, c)) return true;
      if (frame(b, c) < frame(a, c)) return false;
    }
    return false;
  });
  Mat<S> out(frame.rows(), frame.cols());
  for (std::size_t i = 0; i < order.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = frame.row(order[i]);
  return out;
}

}  // namespace detail

/// Single self-attention layer: softmax(Q K^T / sqrt(d_k)) V with
/// Q = H Wq, K = H Wk, V = H Wv. Each query row's weights sum to one.
template <class S>
Mat<S> attention_layer(const Mat<S>& features, const AttentionWeights<S>& weights) {
  return detail::attention_forward<S>(features, weights, static_cast<int>(features.rows()), nullptr);
}

/// Batched forward pass. `frames` are points x 5 matrices with exactly
/// `config.points_per_frame` rows and pre-centered coordinates. Returns a
/// batch x d_out matrix. In train mode batch-norm uses batch statistics and
/// dropout masks are drawn from `dropout_seed`.
template <class S>
Mat<S> encoder_forward_batch(std::span<const Mat<S>> frames, const EncoderParams<S>& params, Mode mode,
                             std::uint64_t dropout_seed = 0, EncoderCache<S>* cache = nullptr) {
  const EncoderConfig& cfg = params.config;
  const int points = cfg.points_per_frame;
  const int batch = static_cast<int>(frames.size());
  if (batch == 0) return Mat<S>(0, cfg.d_out);
  for (const Mat<S>& f : frames) {
    if (f.rows() != points || f.cols() != 5)
      throw Error(ErrorKind::ShapeMismatch, "frame is " + std::to_string(f.rows()) + "x" +
                                                std::to_string(f.cols()) + ", encoder expects " +
                                                std::to_string(points) + "x5");
  }
  EncoderCache<S> local;
  EncoderCache<S>& c = cache ? *cache : local;
  const bool keep = cache != nullptr;
  c.batch = batch;
  c.points = points;
  const Eigen::Index rows = static_cast<Eigen::Index>(batch) * points;

  c.input.resize(rows, 5);
  for (int b = 0; b < batch; ++b)
    c.input.middleRows(static_cast<Eigen::Index>(b) * points, points) = detail::canonical_rows<S>(frames[b]);

  // Runs a stack of dense layers, keeping each output in its cache when
  // training so the next layer and the backward pass can reference it.
  auto run_stack = [&](const Mat<S>& x, const std::vector<Linear<S>>& lins, const std::vector<BatchNorm<S>>& bns,
                       std::vector<DenseCache<S>>& caches, double dropout, Rng* rng, Mat<S>& act) {
    caches.assign(lins.size(), {});
    const Mat<S>* in = &x;
    for (std::size_t i = 0; i < lins.size(); ++i) {
      DenseCache<S>* dc = keep ? &caches[i] : nullptr;
      act = detail::dense_forward<S>(*in, lins[i], bns[i], cfg, mode, dropout, rng, dc);
      if (dc) {
        dc->output = std::move(act);
        in = &dc->output;
      } else {
        in = &act;
      }
    }
    return in;
  };

  // Spatial transformer.
  c.coords = c.input.leftCols(3);
  Mat<S> scratch;
  const Mat<S>* act = run_stack(c.coords, params.stn_point, params.stn_bn, c.stn, 0.0, nullptr, scratch);
  c.stn_pooled = detail::maxpool<S>(*act, batch, points, c.stn_argmax);
  c.transforms = detail::affine<S>(c.stn_pooled, params.stn_head);

  c.features.resize(rows, 5);
  for (int b = 0; b < batch; ++b) {
    Eigen::Matrix<S, 3, 3, Eigen::RowMajor> wt;
    for (int k = 0; k < 9; ++k) wt(k / 3, k % 3) = c.transforms(b, k);
    const Eigen::Index base = static_cast<Eigen::Index>(b) * points;
    c.features.middleRows(base, points).leftCols(3).noalias() = c.coords.middleRows(base, points) * wt.transpose();
  }
  c.features.rightCols(2) = c.input.rightCols(2);

  // Lift and attention.
  c.hidden.clear();
  c.hidden.push_back(detail::affine<S>(c.features, params.lift));
  c.attention.assign(params.attention.size(), {});
  for (std::size_t l = 0; l < params.attention.size(); ++l) {
    Mat<S> next = detail::attention_forward<S>(c.hidden.back(), params.attention[l], points,
                                               keep ? &c.attention[l] : nullptr);
    if (cfg.attention_residual) next += c.hidden.back();
    if (keep) {
      c.hidden.push_back(std::move(next));
    } else {
      c.hidden.back() = std::move(next);
    }
  }

  // Per-point MLP, pooling, post-pool MLP.
  act = run_stack(c.hidden.back(), params.phi, params.phi_bn, c.phi, 0.0, nullptr, scratch);
  c.pooled = detail::maxpool<S>(*act, batch, points, c.pool_argmax);
  Rng rng(dropout_seed);
  act = run_stack(c.pooled, params.psi, params.psi_bn, c.psi, cfg.dropout_rate, &rng, scratch);
  return detail::affine<S>(*act, params.psi_out);
}

/// Exact parameter gradients for the batch whose forward pass filled
/// `cache`, given the loss gradient w.r.t. the batch x d_out embeddings.
template <class S>
EncoderParams<S> encoder_backward(const EncoderCache<S>& c, const EncoderParams<S>& params, const Mat<S>& d_emb) {
  const EncoderConfig& cfg = params.config;
  if (d_emb.rows() != c.batch || d_emb.cols() != cfg.d_out)
    throw Error(ErrorKind::ShapeMismatch, "upstream gradient does not match the cached batch");
  EncoderParams<S> g = params.zeros_like();
  const int points = c.points;

  auto back_stack = [](const std::vector<DenseCache<S>>& caches, const Mat<S>& first_input, Mat<S> d,
                       const std::vector<Linear<S>>& lins, const std::vector<BatchNorm<S>>& bns,
                       std::vector<Linear<S>>& g_lins, std::vector<BatchNorm<S>>& g_bns) {
    for (std::size_t i = lins.size(); i-- > 0;) {
      const Mat<S>& in = i == 0 ? first_input : caches[i - 1].output;
      d = detail::dense_backward<S>(caches[i], in, std::move(d), lins[i], bns[i], g_lins[i], g_bns[i]);
    }
    return d;
  };

  const Mat<S>& psi_in = params.psi.empty() ? c.pooled : c.psi.back().output;
  g.psi_out.w.noalias() += psi_in.transpose() * d_emb;
  g.psi_out.b += d_emb.colwise().sum();
  Mat<S> d = d_emb * params.psi_out.w.transpose();
  d = back_stack(c.psi, c.pooled, std::move(d), params.psi, params.psi_bn, g.psi, g.psi_bn);
  d = detail::maxpool_backward<S>(d, points, c.pool_argmax);
  d = back_stack(c.phi, c.hidden.back(), std::move(d), params.phi, params.phi_bn, g.phi, g.phi_bn);

  for (std::size_t l = params.attention.size(); l-- > 0;) {
    Mat<S> dh = detail::attention_backward<S>(c.hidden[l], c.attention[l], d, points, params.attention[l],
                                              g.attention[l]);
    if (cfg.attention_residual) dh += d;
    d = std::move(dh);
  }

  g.lift.w.noalias() += c.features.transpose() * d;
  g.lift.b += d.colwise().sum();
  const Mat<S> d_feat = d * params.lift.w.transpose();

  // Only the transform depends on parameters; the input coordinates do not.
  Mat<S> d_transforms(c.batch, 9);
  for (int b = 0; b < c.batch; ++b) {
    const Eigen::Index base = static_cast<Eigen::Index>(b) * points;
    const Eigen::Matrix<S, 3, 3> dwt =
        d_feat.middleRows(base, points).leftCols(3).transpose() * c.coords.middleRows(base, points);
    for (int k = 0; k < 9; ++k) d_transforms(b, k) = dwt(k / 3, k % 3);
  }
  g.stn_head.w.noalias() += c.stn_pooled.transpose() * d_transforms;
  g.stn_head.b += d_transforms.colwise().sum();
  d = d_transforms * params.stn_head.w.transpose();
  d = detail::maxpool_backward<S>(d, points, c.stn_argmax);
  back_stack(c.stn, c.coords, std::move(d), params.stn_point, params.stn_bn, g.stn_point, g.stn_bn);
  return g;
}

/// Folds the batch statistics of a train-mode forward pass into the
/// running statistics used at inference.
template <class S>
void update_running_stats(EncoderParams<S>& params, const EncoderCache<S>& c) {
  const double m = params.config.bn_momentum;
  for (std::size_t i = 0; i < params.stn_bn.size(); ++i) detail::update_running(params.stn_bn[i], c.stn[i], m);
  for (std::size_t i = 0; i < params.phi_bn.size(); ++i) detail::update_running(params.phi_bn[i], c.phi[i], m);
  for (std::size_t i = 0; i < params.psi_bn.size(); ++i) detail::update_running(params.psi_bn[i], c.psi[i], m);
}

/// Embeds one frame (points x 5) as a 1 x d_out row.
template <class S>
Mat<S> encoder_forward(const Mat<S>& frame, const EncoderParams<S>& params, Mode mode = Mode::Inference,
                       std::uint64_t dropout_seed = 0) {
  return encoder_forward_batch<S>(std::span<const Mat<S>>(&frame, 1), params, mode, dropout_seed);
}

/// The 3x3 matrix the spatial transformer predicts for a points x 3
/// coordinate cloud.
template <class S>
Eigen::Matrix<S, 3, 3, Eigen::RowMajor> stn_forward(const Mat<S>& coords, const EncoderParams<S>& params,
                                                    Mode mode = Mode::Inference) {
  if (coords.cols() != 3 || coords.rows() == 0)
    throw Error(ErrorKind::ShapeMismatch, "coordinates must be a non-empty points x 3 matrix");
  Mat<S> act = coords;
  for (std::size_t i = 0; i < params.stn_point.size(); ++i)
    act = detail::dense_forward<S>(act, params.stn_point[i], params.stn_bn[i], params.config, mode, 0.0, nullptr,
                                   nullptr);
  std::vector<int> argmax;
  const Mat<S> pooled = detail::maxpool<S>(act, 1, static_cast<int>(coords.rows()), argmax);
  const Mat<S> t = detail::affine<S>(pooled, params.stn_head);
  Eigen::Matrix<S, 3, 3, Eigen::RowMajor> wt;
  for (int k = 0; k < 9; ++k) wt(k / 3, k % 3) = t(0, k);
  return wt;
}

/// Inference-mode embeddings for many frames, encoded in chunks.
template <class S>
Mat<S> embed_frames(std::span<const Mat<S>> frames, const EncoderParams<S>& params, std::size_t chunk = 256) {
  Mat<S> out(static_cast<Eigen::Index>(frames.size()), params.config.d_out);
  for (std::size_t start = 0; start < frames.size(); start += chunk) {
    const std::size_t n = std::min(chunk, frames.size() - start);
    out.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(n)) =
        encoder_forward_batch<S>(frames.subspan(start, n), params, Mode::Inference);
  }
  return out;
}

}  // namespace fmfi
