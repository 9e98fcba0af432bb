#pragma once

// Distillation losses, the embedding-correlation diagnostic, Adam, and the
// training loop that fits the student encoder to teacher embeddings.

#include "fmfi/classify.hpp"
#include "fmfi/common.hpp"
#include "fmfi/encoder.hpp"

#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

namespace fmfi {

/// dot(a, b) / (|a| |b|).
inline double cosine_sim(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw Error(ErrorKind::ShapeMismatch, "embedding lengths differ");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (!(na > 0.0) || !(nb > 0.0)) throw Error(ErrorKind::ZeroNormEmbedding, "cosine of a zero-norm embedding");
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

enum class CkdDirection { OneWay, Symmetric };

struct CKDConfig {
  double tau = 10.0;
  int batch_size = 256;
  CkdDirection direction = CkdDirection::OneWay;

  void validate() const {
    if (!(tau > 0.0)) throw Error(ErrorKind::Usage, "tau must be > 0");
    if (batch_size < 1) throw Error(ErrorKind::Usage, "batch size must be >= 1");
  }
};

template <class S>
struct LossResult {
  double value = 0.0;
  Mat<S> grad;  // d loss / d student, same shape as the student batch
};

namespace detail {

inline MatD normalized_rows(const MatD& x, Eigen::VectorXd& norms) {
  norms = x.rowwise().norm();
  for (Eigen::Index i = 0; i < norms.size(); ++i)
    if (!(norms(i) > 0.0)) throw Error(ErrorKind::ZeroNormEmbedding, "row " + std::to_string(i) + " has zero norm");
  return norms.cwiseInverse().asDiagonal() * x;
}

// Row-wise softmax cross-entropy against the diagonal. Returns the mean loss
// and writes (softmax - identity) / n into `d_logits`.
inline double diagonal_cross_entropy(const MatD& logits, MatD& d_logits) {
  const Eigen::Index n = logits.rows();
  d_logits.resize(n, n);
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mx = logits.row(i).maxCoeff();
    double sum = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      d_logits(i, j) = std::exp(logits(i, j) - mx);
      sum += d_logits(i, j);
    }
    total += (mx + std::log(sum)) - logits(i, i);
    d_logits.row(i) /= sum;
    d_logits(i, i) -= 1.0;
  }
  d_logits /= static_cast<double>(n);
  return total / static_cast<double>(n);
}

}  // namespace detail

/// Contrastive distillation loss with in-batch negatives:
///
///   L = mean_i -log( exp(cos(t_i, s_i)/tau) / sum_j exp(cos(t_i, s_j)/tau) )
///
/// Row i of `teacher` and `student` form the positive pair; every other
/// student row in the batch is a negative for anchor t_i. The symmetric
/// variant averages this with the student-anchored direction. Accumulated in
/// double precision with a max-subtracted softmax.
template <class S>
LossResult<S> ckd_loss(const MatD& teacher, const Mat<S>& student, double tau,
                       CkdDirection direction = CkdDirection::OneWay) {
  if (teacher.rows() != student.rows() || teacher.cols() != student.cols())
    throw Error(ErrorKind::ShapeMismatch, "teacher and student batches differ in shape");
  if (teacher.rows() == 0) throw Error(ErrorKind::ShapeMismatch, "empty batch");
  if (!(tau > 0.0)) throw Error(ErrorKind::Usage, "tau must be > 0");
  const MatD s = student.template cast<double>();
  Eigen::VectorXd t_norm, s_norm;
  const MatD t_hat = detail::normalized_rows(teacher, t_norm);
  const MatD s_hat = detail::normalized_rows(s, s_norm);
  const MatD cos = t_hat * s_hat.transpose();  // [teacher i][student j]
  const MatD logits = cos / tau;

  MatD d_logits;
  double value = detail::diagonal_cross_entropy(logits, d_logits);
  if (direction == CkdDirection::Symmetric) {
    MatD d_rev;
    const double rev = detail::diagonal_cross_entropy(logits.transpose(), d_rev);
    value = 0.5 * (value + rev);
    d_logits = 0.5 * (d_logits + d_rev.transpose());
  }
  // d cos(t_i, s_j) / d s_j = (t_hat_i - cos_ij s_hat_j) / |s_j|
  const MatD g = d_logits / tau;
  MatD grad = g.transpose() * t_hat;
  const Eigen::VectorXd weight = (g.array() * cos.array()).colwise().sum().transpose();
  grad -= weight.asDiagonal() * s_hat;
  grad = s_norm.cwiseInverse().asDiagonal() * grad;
  return {value, grad.template cast<S>()};
}

/// Element-wise mean squared error between teacher and student embeddings.
template <class S>
LossResult<S> mse_kd_loss(const MatD& teacher, const Mat<S>& student) {
  if (teacher.rows() != student.rows() || teacher.cols() != student.cols())
    throw Error(ErrorKind::ShapeMismatch, "teacher and student batches differ in shape");
  if (teacher.size() == 0) throw Error(ErrorKind::ShapeMismatch, "empty batch");
  const MatD diff = student.template cast<double>() - teacher;
  const double count = static_cast<double>(diff.size());
  return {diff.squaredNorm() / count, (diff * (2.0 / count)).template cast<S>()};
}

struct CorrelationReport {
  MatD r_teacher;
  MatD r_student;
  double mean_abs_diff = 0.0;
  std::vector<int> degenerate_teacher;  // zero-variance dimensions
  std::vector<int> degenerate_student;
};

/// Pearson correlation between every pair of embedding dimensions across
/// samples (rows). Zero-variance dimensions correlate 0 with everything,
/// themselves included, and are listed as degenerate.
inline MatD correlation_matrix(const MatD& x, std::vector<int>* degenerate = nullptr) {
  if (x.rows() < 2) throw Error(ErrorKind::InsufficientSamples, "correlation needs at least 2 samples");
  MatD centered = x.rowwise() - x.colwise().mean();
  Eigen::VectorXd sd = centered.colwise().norm().transpose();
  Eigen::VectorXd inv(sd.size());
  const double floor = 1e-12 * std::max(1.0, x.cwiseAbs().maxCoeff()) * std::sqrt(static_cast<double>(x.rows()));
  for (Eigen::Index i = 0; i < sd.size(); ++i) {
    if (sd(i) > floor) {
      inv(i) = 1.0 / sd(i);
    } else {
      inv(i) = 0.0;
      if (degenerate) degenerate->push_back(static_cast<int>(i));
    }
  }
  centered = centered * inv.asDiagonal();
  MatD r = centered.transpose() * centered;
  r = r.cwiseMax(-1.0).cwiseMin(1.0);
  r = 0.5 * (r + r.transpose()).eval();
  for (Eigen::Index i = 0; i < r.rows(); ++i) r(i, i) = inv(i) > 0.0 ? 1.0 : 0.0;
  return r;
}

inline CorrelationReport correlation_report(const MatD& teacher, const MatD& student) {
  if (teacher.rows() != student.rows() || teacher.cols() != student.cols())
    throw Error(ErrorKind::ShapeMismatch, "teacher and student sets differ in shape");
  CorrelationReport rep;
  rep.r_teacher = correlation_matrix(teacher, &rep.degenerate_teacher);
  rep.r_student = correlation_matrix(student, &rep.degenerate_student);
  rep.mean_abs_diff = (rep.r_teacher - rep.r_student).cwiseAbs().mean();
  return rep;
}

/// Adam with bias correction over every learnable encoder tensor.
template <class S>
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    if (!(lr >= 0.0)) throw Error(ErrorKind::Usage, "learning rate must be >= 0");
  }

  void step(EncoderParams<S>& params, const EncoderParams<S>& grads) {
    auto p = params.named_params();
    const auto g = grads.named_params();
    if (m_.empty()) {
      for (const auto& [name, t] : p) {
        m_.push_back(Mat<S>::Zero(t->rows(), t->cols()));
        v_.push_back(Mat<S>::Zero(t->rows(), t->cols()));
      }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    const S b1 = static_cast<S>(beta1_), b2 = static_cast<S>(beta2_);
    const S step_size = static_cast<S>(lr_ / c1);
    const S inv_c2 = static_cast<S>(1.0 / c2);
    const S eps = static_cast<S>(eps_);
    for (std::size_t i = 0; i < p.size(); ++i) {
      const Mat<S>& gi = *g[i].second;
      m_[i] = b1 * m_[i] + (S(1) - b1) * gi;
      v_[i] = b2 * v_[i] + (S(1) - b2) * gi.cwiseProduct(gi);
      p[i].second->array() -= step_size * m_[i].array() / ((v_[i].array() * inv_c2).sqrt() + eps);
    }
  }

  std::uint64_t steps() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::uint64_t t_ = 0;
  std::vector<Mat<S>> m_, v_;
};

enum class LossKind { CKD, MSE };

inline const char* to_string(LossKind k) { return k == LossKind::CKD ? "ckd" : "mse"; }

struct TrainConfig {
  double learning_rate = 1e-3;
  int epochs = 30;
  std::uint64_t seed = 1;
  LossKind loss = LossKind::CKD;
  int checkpoint_every = 0;  // epochs between checkpoint callbacks, 0 = never
  int validate_every = 1;

  void validate() const {
    if (!(learning_rate >= 0.0)) throw Error(ErrorKind::Usage, "learning rate must be >= 0");
    if (epochs < 0) throw Error(ErrorKind::Usage, "epochs must be >= 0");
  }
};

/// Preprocessed encoder inputs paired with teacher embeddings.
template <class S>
struct TrainSet {
  std::vector<Mat<S>> frames;
  MatD teacher;  // frames.size() x D
};

template <class S>
struct ValidationSet {
  std::vector<Mat<S>> frames;
  MatD teacher;
  std::vector<std::string> labels;
};

struct EpochRecord {
  int epoch = 0;
  LossKind loss_kind = LossKind::CKD;
  double loss = 0.0;
  std::optional<double> val_zero_shot_acc;
  std::optional<double> mean_abs_corr_diff;
  double wall_ms = 0.0;
};

template <class S>
struct TrainResult {
  EncoderParams<S> params;
  std::vector<EpochRecord> log;
};

template <class S>
struct TrainHooks {
  std::function<void(const EpochRecord&)> on_epoch;
  std::function<void(int epoch, const EncoderParams<S>&)> on_checkpoint;
};

/// Splits a shuffled index list into minibatches; a trailing batch of one
/// sample is folded into its predecessor so batch statistics stay defined.
inline std::vector<std::vector<std::size_t>> make_minibatches(std::vector<std::size_t> order, int batch_size) {
  std::vector<std::vector<std::size_t>> batches;
  const auto bs = static_cast<std::size_t>(batch_size);
  for (std::size_t start = 0; start < order.size(); start += bs)
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + bs)));
  if (batches.size() > 1 && batches.back().size() == 1) {
    batches[batches.size() - 2].push_back(batches.back().front());
    batches.pop_back();
  }
  return batches;
}

/// Fits a fresh encoder (or `initial`, when given) to the teacher
/// embeddings. Deterministic for a fixed seed.
template <class S>
TrainResult<S> train(const TrainSet<S>& data, const EncoderConfig& enc_cfg, const CKDConfig& ckd,
                     const TrainConfig& cfg, const ValidationSet<S>* validation = nullptr,
                     const AnchorMatrix* anchors = nullptr, const TrainHooks<S>& hooks = {},
                     const EncoderParams<S>* initial = nullptr) {
  ckd.validate();
  cfg.validate();
  if (data.frames.empty()) throw Error(ErrorKind::NoTrainableData, "training set is empty");
  if (static_cast<std::size_t>(data.teacher.rows()) != data.frames.size())
    throw Error(ErrorKind::ShapeMismatch, "every training frame needs a teacher embedding");
  if (data.teacher.cols() != enc_cfg.d_out)
    throw Error(ErrorKind::ShapeMismatch, "teacher width differs from the encoder output width");

  TrainResult<S> result{initial ? *initial : init_encoder<S>(enc_cfg, derive_seed(cfg.seed, 0x1417)), {}};
  EncoderParams<S>& params = result.params;
  Adam<S> adam(cfg.learning_rate);

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    std::vector<std::size_t> order(data.frames.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng(derive_seed(cfg.seed, 0x5f0f, static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[std::min(uniform_index(shuffle_rng, i), i - 1)]);

    double loss_sum = 0.0;
    std::size_t seen = 0;
    const auto batches = make_minibatches(std::move(order), ckd.batch_size);
    for (std::size_t step = 0; step < batches.size(); ++step) {
      const auto& idx = batches[step];
      std::vector<Mat<S>> frames;
      frames.reserve(idx.size());
      MatD teacher(static_cast<Eigen::Index>(idx.size()), data.teacher.cols());
      for (std::size_t i = 0; i < idx.size(); ++i) {
        frames.push_back(data.frames[idx[i]]);
        teacher.row(static_cast<Eigen::Index>(i)) = data.teacher.row(static_cast<Eigen::Index>(idx[i]));
      }
      EncoderCache<S> cache;
      const Mat<S> student = encoder_forward_batch<S>(
          frames, params, Mode::Train, derive_seed(cfg.seed, static_cast<std::uint64_t>(epoch), step), &cache);
      const LossResult<S> loss = cfg.loss == LossKind::CKD ? ckd_loss<S>(teacher, student, ckd.tau, ckd.direction)
                                                           : mse_kd_loss<S>(teacher, student);
      const EncoderParams<S> grads = encoder_backward<S>(cache, params, loss.grad);
      update_running_stats(params, cache);
      adam.step(params, grads);
      loss_sum += loss.value * static_cast<double>(idx.size());
      seen += idx.size();
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.loss_kind = cfg.loss;
    rec.loss = loss_sum / static_cast<double>(seen);
    const bool validate_now = validation && !validation->frames.empty() && cfg.validate_every > 0 &&
                              (epoch % cfg.validate_every == 0 || epoch == cfg.epochs);
    if (validate_now) {
      const MatD emb = embed_frames<S>(validation->frames, params).template cast<double>();
      if (anchors && !validation->labels.empty())
        rec.val_zero_shot_acc = evaluate({emb, validation->labels}, *anchors, EvalMode{}).accuracy;
      if (validation->teacher.rows() >= 2)
        rec.mean_abs_corr_diff = correlation_report(validation->teacher, emb).mean_abs_diff;
    }
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();
    result.log.push_back(rec);
    if (hooks.on_epoch) hooks.on_epoch(rec);
    if (hooks.on_checkpoint && cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0)
      hooks.on_checkpoint(epoch, params);
  }
  return result;
}

}  // namespace fmfi
