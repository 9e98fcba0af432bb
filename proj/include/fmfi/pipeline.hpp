#pragma once

// End-to-end glue: raw paired samples -> preprocessed encoder inputs ->
// trained checkpoint -> evaluation reports.

#include "fmfi/classify.hpp"
#include "fmfi/dataset.hpp"
#include "fmfi/distill.hpp"
#include "fmfi/encoder.hpp"
#include "fmfi/io.hpp"
#include "fmfi/pointcloud.hpp"

#include <optional>
#include <string>
#include <vector>

namespace fmfi {

inline constexpr std::uint64_t kResampleStream = 0x9e5a;

template <class S>
struct PreparedFrames {
  std::vector<Mat<S>> frames;
  std::vector<std::size_t> kept;  // dataset indices that survived filtering
  std::size_t dropped = 0;
};

/// Runs the preprocessing chain on every sample. Frames the Doppler filter
/// empties are dropped and counted.
template <class S>
PreparedFrames<S> prepare_frames(const Dataset& data, const PreprocessConfig& cfg, std::uint64_t seed) {
  PreparedFrames<S> out;
  for (std::size_t i = 0; i < data.size(); ++i) {
    auto f = preprocess_frame(data[i].frame, cfg, derive_seed(seed, kResampleStream, i));
    if (!f) {
      ++out.dropped;
      continue;
    }
    out.frames.push_back(frame_matrix<S>(*f));
    out.kept.push_back(i);
  }
  return out;
}

/// Intensity statistics of the filtered, centered training frames.
inline IntensityStats fit_preprocessing(const Dataset& train, double v_thresh) {
  std::vector<PointFrame> filtered;
  filtered.reserve(train.size());
  for (const PairedSample& s : train) filtered.push_back(doppler_filter(s.frame, v_thresh));
  return fit_intensity_stats(filtered);
}

inline MatD teacher_matrix(const Dataset& data, std::span<const std::size_t> rows) {
  if (rows.empty()) return MatD(0, 0);
  MatD t(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(data[rows[0]].teacher.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& e = data[rows[i]].teacher;
    if (static_cast<Eigen::Index>(e.size()) != t.cols()) throw Error(ErrorKind::ShapeMismatch, "teacher widths differ");
    t.row(static_cast<Eigen::Index>(i)) = Eigen::Map<const Eigen::RowVectorXd>(e.data(), t.cols());
  }
  return t;
}

inline std::vector<std::string> labels_of(const Dataset& data, std::span<const std::size_t> rows) {
  std::vector<std::string> labels;
  for (std::size_t r : rows) {
    if (!data[r].label) throw Error(ErrorKind::UnknownLabel, "sample at index " + std::to_string(r) + " has no label");
    labels.push_back(*data[r].label);
  }
  return labels;
}

struct PipelineConfig {
  EncoderConfig encoder;
  CKDConfig ckd;
  TrainConfig train;
  double v_thresh = 0.0;
};

template <class S>
struct PipelineResult {
  Checkpoint<S> checkpoint;
  std::vector<EpochRecord> log;
  std::size_t dropped_train = 0;
};

/// Trains on the (unlabeled) distillation pool. When `validation` is given,
/// its labeled samples drive per-epoch zero-shot accuracy and the
/// correlation diagnostic.
template <class S>
PipelineResult<S> run_training(const Dataset& train_pool, const PipelineConfig& cfg,
                               const Dataset* validation = nullptr, const AnchorMatrix* anchors = nullptr,
                               const TrainHooks<S>& hooks = {}) {
  PreprocessConfig pre;
  pre.v_thresh = cfg.v_thresh;
  pre.points_per_frame = cfg.encoder.points_per_frame;
  pre.intensity = fit_preprocessing(train_pool, cfg.v_thresh);

  PreparedFrames<S> prepared = prepare_frames<S>(train_pool, pre, cfg.train.seed);
  if (prepared.frames.empty())
    throw Error(ErrorKind::NoTrainableData, std::to_string(prepared.dropped) + " of " +
                                                std::to_string(train_pool.size()) + " frames emptied by filtering");
  TrainSet<S> ts{std::move(prepared.frames), teacher_matrix(train_pool, prepared.kept)};

  std::optional<ValidationSet<S>> vs;
  if (validation && !validation->empty()) {
    PreparedFrames<S> vp = prepare_frames<S>(*validation, pre, derive_seed(cfg.train.seed, 0x7a1));
    if (!vp.frames.empty()) {
      ValidationSet<S> v;
      v.teacher = teacher_matrix(*validation, vp.kept);
      v.labels = anchors ? labels_of(*validation, vp.kept) : std::vector<std::string>{};
      v.frames = std::move(vp.frames);
      vs = std::move(v);
    }
  }
  TrainResult<S> tr = train<S>(ts, cfg.encoder, cfg.ckd, cfg.train, vs ? &*vs : nullptr, anchors, hooks);
  return {Checkpoint<S>{std::move(tr.params), pre}, std::move(tr.log), prepared.dropped};
}

struct EmbeddedSet {
  LabeledEmbeddings labeled;
  MatD teacher;
  std::vector<std::size_t> kept;
  std::size_t dropped = 0;
};

/// Inference-mode student embeddings for every sample that survives the
/// checkpoint's preprocessing.
template <class S>
EmbeddedSet embed_dataset(const Dataset& data, const Checkpoint<S>& ck, std::uint64_t seed, bool need_labels) {
  PreparedFrames<S> p = prepare_frames<S>(data, ck.preprocess, seed);
  EmbeddedSet out;
  out.kept = p.kept;
  out.dropped = p.dropped;
  out.labeled.embeddings = p.frames.empty() ? MatD(0, ck.params.config.d_out)
                                            : embed_frames<S>(p.frames, ck.params).template cast<double>();
  if (need_labels) out.labeled.labels = labels_of(data, p.kept);
  out.teacher = teacher_matrix(data, p.kept);
  return out;
}

struct EvalOutcome {
  ConfusionReport report;
  std::size_t dropped = 0;
  /// Correct predictions over all queries, counting dropped frames as errors.
  double end_to_end_accuracy = 0.0;
};

template <class S>
EvalOutcome evaluate_dataset(const Dataset& queries, const Checkpoint<S>& ck, const AnchorMatrix& anchors,
                             const EvalMode& mode, std::uint64_t seed = 0, const Dataset* support_pool = nullptr) {
  for (const PairedSample& s : queries)
    if (s.label) anchors.index_of(*s.label);
  const EmbeddedSet q = embed_dataset<S>(queries, ck, derive_seed(seed, 0x9e1), true);
  std::optional<EmbeddedSet> pool;
  if (mode.shots > 0) {
    if (!support_pool) throw Error(ErrorKind::MissingSupport, "K-shot evaluation needs a support pool");
    pool = embed_dataset<S>(*support_pool, ck, derive_seed(seed, 0x9e2), true);
  }
  EvalOutcome out;
  out.report = evaluate(q.labeled, anchors, mode, pool ? &pool->labeled : nullptr, seed);
  out.dropped = q.dropped;
  const double correct = out.report.accuracy * static_cast<double>(out.report.n_queries);
  const double per_episode = mode.shots > 0 ? static_cast<double>(mode.episodes) : 1.0;
  const double total = static_cast<double>(out.report.n_queries) + per_episode * static_cast<double>(q.dropped);
  out.end_to_end_accuracy = total > 0.0 ? correct / total : 0.0;
  return out;
}

}  // namespace fmfi
