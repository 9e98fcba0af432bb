#pragma once

// Zero-shot and metric-based few-shot classification in the shared
// embedding space, plus confusion-matrix evaluation.

#include "fmfi/common.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace fmfi {

/// A class prototype: the text embedding of a prompt such as "A person walking".
struct TextAnchor {
  std::string class_name;
  std::string prompt;
  std::vector<double> embedding;

  friend bool operator==(const TextAnchor&, const TextAnchor&) = default;
};

inline std::string default_prompt(const std::string& class_name) { return "A person " + class_name; }

inline double l2_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

/// Stacked, L2-normalized anchor rows (k x D).
class AnchorMatrix {
 public:
  AnchorMatrix() = default;

  explicit AnchorMatrix(std::span<const TextAnchor> anchors) {
    if (anchors.empty()) throw Error(ErrorKind::InsufficientSamples, "anchor set is empty");
    const auto dim = anchors.front().embedding.size();
    rows_.resize(static_cast<Eigen::Index>(anchors.size()), static_cast<Eigen::Index>(dim));
    std::set<std::string> seen;
    for (std::size_t i = 0; i < anchors.size(); ++i) {
      const TextAnchor& a = anchors[i];
      if (!seen.insert(a.class_name).second) throw Error(ErrorKind::DuplicateClass, "class '" + a.class_name + "'");
      if (a.embedding.size() != dim) throw Error(ErrorKind::ShapeMismatch, "anchor widths differ");
      const double n = l2_norm(a.embedding);
      if (!(n > 0.0) || !std::isfinite(n))
        throw Error(ErrorKind::ZeroNormEmbedding, "anchor '" + a.class_name + "' has zero or non-finite norm");
      for (std::size_t j = 0; j < dim; ++j)
        rows_(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = a.embedding[j] / n;
      names_.push_back(a.class_name);
    }
  }

  std::size_t size() const { return names_.size(); }
  Eigen::Index dim() const { return rows_.cols(); }
  const MatD& rows() const { return rows_; }
  const std::vector<std::string>& names() const { return names_; }

  /// Index of `name`, or throws UnknownLabel.
  std::size_t index_of(const std::string& name) const {
    auto it = std::find(names_.begin(), names_.end(), name);
    if (it == names_.end()) throw Error(ErrorKind::UnknownLabel, "label '" + name + "' is not in the anchor set");
    return static_cast<std::size_t>(it - names_.begin());
  }

 private:
  MatD rows_;
  std::vector<std::string> names_;
};

struct Prediction {
  std::size_t index = 0;
  std::string class_name;
  std::vector<double> scores;
  bool tie = false;  // another class attained the same maximum
};

namespace detail {

inline Eigen::VectorXd normalized_query(std::span<const double> query, Eigen::Index dim) {
  if (static_cast<Eigen::Index>(query.size()) != dim)
    throw Error(ErrorKind::ShapeMismatch, "query has " + std::to_string(query.size()) + " values, expected " +
                                              std::to_string(dim));
  Eigen::VectorXd q = Eigen::Map<const Eigen::VectorXd>(query.data(), dim);
  const double n = q.norm();
  if (!(n > 0.0)) throw Error(ErrorKind::ZeroNormEmbedding, "query embedding has zero norm");
  return q / n;
}

// Lowest index wins ties.
inline Prediction argmax_prediction(std::vector<double> scores, const std::vector<std::string>& names) {
  Prediction p;
  for (std::size_t i = 1; i < scores.size(); ++i)
    if (scores[i] > scores[p.index]) p.index = i;
  for (std::size_t i = 0; i < scores.size(); ++i)
    if (i != p.index && scores[i] == scores[p.index]) p.tie = true;
  p.class_name = names[p.index];
  p.scores = std::move(scores);
  return p;
}

}  // namespace detail

/// Scores are the cosine similarities between the query and every anchor.
inline Prediction zero_shot(std::span<const double> query, const AnchorMatrix& anchors) {
  if (anchors.size() == 0) throw Error(ErrorKind::InsufficientSamples, "no anchors");
  const Eigen::VectorXd q = detail::normalized_query(query, anchors.dim());
  const Eigen::VectorXd s = anchors.rows() * q;
  return detail::argmax_prediction(std::vector<double>(s.data(), s.data() + s.size()), anchors.names());
}

struct FewShotConfig {
  double gamma = 5.5;
};

/// Labeled support embeddings, one list per anchor class (same order as the
/// anchor matrix).
struct SupportSet {
  std::vector<std::vector<std::vector<double>>> per_class;
};

/// likelihood(c) = sum over the support of class c of cos(query, s)
///               + gamma * cos(query, anchor_c)
/// The support sum is deliberately not normalized by its size.
inline Prediction few_shot(std::span<const double> query, const SupportSet& support, const AnchorMatrix& anchors,
                           const FewShotConfig& cfg = {}) {
  if (!(cfg.gamma >= 0.0)) throw Error(ErrorKind::Usage, "gamma must be >= 0");
  if (support.per_class.size() != anchors.size())
    throw Error(ErrorKind::MissingSupport, "support covers " + std::to_string(support.per_class.size()) +
                                               " classes, anchors have " + std::to_string(anchors.size()));
  const Eigen::VectorXd q = detail::normalized_query(query, anchors.dim());
  std::vector<double> likelihood(anchors.size(), 0.0);
  for (std::size_t c = 0; c < anchors.size(); ++c) {
    const auto& members = support.per_class[c];
    if (members.empty()) throw Error(ErrorKind::MissingSupport, "class '" + anchors.names()[c] + "' has no support");
    double sum = 0.0;
    for (const auto& s : members) {
      if (static_cast<Eigen::Index>(s.size()) != anchors.dim())
        throw Error(ErrorKind::ShapeMismatch, "support embedding width differs from anchors");
      const Eigen::Map<const Eigen::VectorXd> v(s.data(), anchors.dim());
      const double n = v.norm();
      if (!(n > 0.0)) throw Error(ErrorKind::ZeroNormEmbedding, "support member has zero norm");
      sum += q.dot(v) / n;
    }
    likelihood[c] = sum + cfg.gamma * anchors.rows().row(static_cast<Eigen::Index>(c)).dot(q);
  }
  return detail::argmax_prediction(std::move(likelihood), anchors.names());
}

/// Embeddings (one row each) with their class labels.
struct LabeledEmbeddings {
  MatD embeddings;
  std::vector<std::string> labels;
};

struct EvalMode {
  int shots = 0;  // 0 = zero-shot
  double gamma = 5.5;
  int episodes = 10;  // support draws averaged in K-shot mode
};

struct ConfusionReport {
  std::vector<std::string> classes;
  std::vector<std::vector<std::uint64_t>> counts;  // [true][predicted]
  std::vector<std::vector<double>> normalized;     // rows sum to 1 where the class has queries
  double accuracy = 0.0;
  std::vector<double> precision;
  std::vector<double> recall;
  std::uint64_t n_queries = 0;
};

inline ConfusionReport finalize_confusion(std::vector<std::string> classes,
                                          std::vector<std::vector<std::uint64_t>> counts) {
  ConfusionReport r;
  const std::size_t k = classes.size();
  r.classes = std::move(classes);
  r.counts = std::move(counts);
  r.normalized.assign(k, std::vector<double>(k, 0.0));
  r.precision.assign(k, 0.0);
  r.recall.assign(k, 0.0);
  std::uint64_t correct = 0, total = 0;
  for (std::size_t t = 0; t < k; ++t) {
    const std::uint64_t row = std::accumulate(r.counts[t].begin(), r.counts[t].end(), std::uint64_t{0});
    total += row;
    correct += r.counts[t][t];
    if (row > 0) {
      for (std::size_t p = 0; p < k; ++p)
        r.normalized[t][p] = static_cast<double>(r.counts[t][p]) / static_cast<double>(row);
      r.recall[t] = r.normalized[t][t];
    }
  }
  for (std::size_t p = 0; p < k; ++p) {
    std::uint64_t col = 0;
    for (std::size_t t = 0; t < k; ++t) col += r.counts[t][p];
    if (col > 0) r.precision[p] = static_cast<double>(r.counts[p][p]) / static_cast<double>(col);
  }
  r.n_queries = total;
  r.accuracy = total > 0 ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
  return r;
}

/// Draws `shots` support members per class, without replacement, from `pool`.
inline SupportSet sample_support(const LabeledEmbeddings& pool, const AnchorMatrix& anchors, int shots,
                                 std::uint64_t seed) {
  std::vector<std::vector<Eigen::Index>> by_class(anchors.size());
  for (std::size_t i = 0; i < pool.labels.size(); ++i)
    by_class[anchors.index_of(pool.labels[i])].push_back(static_cast<Eigen::Index>(i));
  Rng rng(seed);
  SupportSet s;
  s.per_class.resize(anchors.size());
  for (std::size_t c = 0; c < anchors.size(); ++c) {
    auto& idx = by_class[c];
    if (idx.size() < static_cast<std::size_t>(shots))
      throw Error(ErrorKind::MissingSupport, "class '" + anchors.names()[c] + "' has " + std::to_string(idx.size()) +
                                                 " pool samples, need " + std::to_string(shots));
    for (int k = 0; k < shots; ++k) {
      const std::size_t j = static_cast<std::size_t>(k) +
                            std::min(uniform_index(rng, idx.size() - static_cast<std::size_t>(k)),
                                     idx.size() - static_cast<std::size_t>(k) - 1);
      std::swap(idx[static_cast<std::size_t>(k)], idx[j]);
      const auto row = pool.embeddings.row(idx[static_cast<std::size_t>(k)]);
      s.per_class[c].emplace_back(row.data(), row.data() + row.size());
    }
  }
  return s;
}

/// Classifies every query and accumulates a confusion matrix. K-shot mode
/// draws `episodes` support sets from `support_pool` (disjoint from the
/// queries by construction of the caller) and pools their predictions.
inline ConfusionReport evaluate(const LabeledEmbeddings& queries, const AnchorMatrix& anchors, const EvalMode& mode,
                                const LabeledEmbeddings* support_pool = nullptr, std::uint64_t seed = 0) {
  const std::size_t k = anchors.size();
  std::vector<std::vector<std::uint64_t>> counts(k, std::vector<std::uint64_t>(k, 0));
  std::vector<std::size_t> truth;
  truth.reserve(queries.labels.size());
  for (const auto& l : queries.labels) truth.push_back(anchors.index_of(l));
  auto query_row = [&queries](std::size_t i) {
    const auto row = queries.embeddings.row(static_cast<Eigen::Index>(i));
    return std::span<const double>(row.data(), static_cast<std::size_t>(row.size()));
  };
  if (mode.shots == 0) {
    for (std::size_t i = 0; i < truth.size(); ++i) ++counts[truth[i]][zero_shot(query_row(i), anchors).index];
  } else {
    if (mode.shots < 0 || mode.episodes < 1) throw Error(ErrorKind::Usage, "shots and episodes must be positive");
    if (!support_pool) throw Error(ErrorKind::MissingSupport, "K-shot evaluation needs a support pool");
    for (int e = 0; e < mode.episodes; ++e) {
      const SupportSet support =
          sample_support(*support_pool, anchors, mode.shots, derive_seed(seed, 0x5e7, static_cast<std::uint64_t>(e)));
      for (std::size_t i = 0; i < truth.size(); ++i)
        ++counts[truth[i]][few_shot(query_row(i), support, anchors, {mode.gamma}).index];
    }
  }
  return finalize_confusion(anchors.names(), std::move(counts));
}

}  // namespace fmfi
