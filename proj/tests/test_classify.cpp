#include "fmfi/classify.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace fmfi;

namespace {

std::vector<TextAnchor> basis_anchors(int dim) {
  std::vector<TextAnchor> a;
  for (int i = 0; i < dim; ++i) {
    std::vector<double> e(static_cast<std::size_t>(dim), 0.0);
    e[static_cast<std::size_t>(i)] = 1.0;
    const std::string name = "class" + std::to_string(i + 1);
    a.push_back({name, default_prompt(name), e});
  }
  return a;
}

std::vector<double> random_vec(Rng& rng, int dim) {
  std::normal_distribution<double> n;
  std::vector<double> v(static_cast<std::size_t>(dim));
  for (double& x : v) x = n(rng);
  return v;
}

}  // namespace

TEST(ZeroShot, PicksMostSimilarAnchor) {
  const AnchorMatrix anchors(basis_anchors(3));
  const Prediction p = zero_shot(std::vector<double>{0, 1, 0}, anchors);
  EXPECT_EQ(p.index, 1u);
  EXPECT_EQ(p.class_name, "class2");
  EXPECT_EQ(p.scores, (std::vector<double>{0, 1, 0}));
  EXPECT_EQ(zero_shot(std::vector<double>{0, 5, 0}, anchors).index, 1u);
}

TEST(ZeroShot, TiesGoToLowestIndex) {
  const AnchorMatrix anchors(basis_anchors(3));
  const double h = 1.0 / std::sqrt(2.0);
  const Prediction p = zero_shot(std::vector<double>{h, h, 0}, anchors);
  EXPECT_EQ(p.index, 0u);
  EXPECT_TRUE(p.tie);
}

TEST(ZeroShot, Errors) {
  const AnchorMatrix anchors(basis_anchors(3));
  try {
    zero_shot(std::vector<double>{0, 0, 0}, anchors);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ZeroNormEmbedding);
  }
  EXPECT_THROW(zero_shot(std::vector<double>{1, 0}, anchors), Error);
}

TEST(AnchorMatrix, RejectsDuplicatesAndZeroRows) {
  auto a = basis_anchors(2);
  a.push_back(a.front());
  try {
    AnchorMatrix m(a);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::DuplicateClass);
  }
  auto z = basis_anchors(2);
  z[1].embedding = {0.0, 0.0};
  EXPECT_THROW(AnchorMatrix{z}, Error);
  EXPECT_THROW(AnchorMatrix(basis_anchors(2)).index_of("missing"), Error);
}

TEST(FewShot, WorkedExample) {
  std::vector<TextAnchor> anchors{{"A", "A person A", {0, 1}}, {"B", "A person B", {1, 0}}};
  const AnchorMatrix m(anchors);
  SupportSet s;
  s.per_class = {{{1, 0}}, {{0, 1}}};
  const Prediction p = few_shot(std::vector<double>{1, 0}, s, m, {0.5});
  EXPECT_EQ(p.class_name, "A");
  EXPECT_DOUBLE_EQ(p.scores[0], 1.0);
  EXPECT_DOUBLE_EQ(p.scores[1], 0.5);
}

TEST(FewShot, GammaZeroUsesOnlySupport) {
  const AnchorMatrix anchors(basis_anchors(3));
  SupportSet s;
  s.per_class = {{{0, 1, 0}}, {{1, 0, 0}}, {{0, 0, 1}}};
  // Anchors favour class 1 for this query; the support says class 2.
  EXPECT_EQ(few_shot(std::vector<double>{1, 0, 0}, s, anchors, {0.0}).index, 1u);
}

TEST(FewShot, LargeGammaMatchesZeroShot) {
  Rng rng(4);
  const int dim = 16;
  std::vector<TextAnchor> a;
  for (int c = 0; c < 5; ++c) a.push_back({"c" + std::to_string(c), "", random_vec(rng, dim)});
  const AnchorMatrix anchors(a);
  for (int trial = 0; trial < 200; ++trial) {
    SupportSet s;
    s.per_class.resize(5);
    for (auto& members : s.per_class)
      for (int k = 0; k < 3; ++k) members.push_back(random_vec(rng, dim));
    const auto q = random_vec(rng, dim);
    EXPECT_EQ(few_shot(q, s, anchors, {1e6}).index, zero_shot(q, anchors).index);
  }
}

TEST(FewShot, ScaleInvariant) {
  Rng rng(5);
  std::vector<TextAnchor> a;
  for (int c = 0; c < 4; ++c) a.push_back({"c" + std::to_string(c), "", random_vec(rng, 8)});
  const AnchorMatrix anchors(a);
  SupportSet s;
  s.per_class.resize(4);
  for (auto& members : s.per_class) members.push_back(random_vec(rng, 8));
  for (int trial = 0; trial < 100; ++trial) {
    auto q = random_vec(rng, 8);
    const auto base_z = zero_shot(q, anchors).index;
    const auto base_f = few_shot(q, s, anchors).index;
    for (double& x : q) x *= 7.25;
    EXPECT_EQ(zero_shot(q, anchors).index, base_z);
    EXPECT_EQ(few_shot(q, s, anchors).index, base_f);
  }
}

TEST(FewShot, Errors) {
  const AnchorMatrix anchors(basis_anchors(2));
  SupportSet s;
  s.per_class = {{{1, 0}}, {}};
  try {
    few_shot(std::vector<double>{1, 0}, s, anchors);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::MissingSupport);
  }
  s.per_class = {{{1, 0}}, {{0, 0}}};
  try {
    few_shot(std::vector<double>{1, 0}, s, anchors);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ZeroNormEmbedding);
  }
}

TEST(Evaluate, PerfectPredictorGivesIdentityConfusion) {
  const AnchorMatrix anchors(basis_anchors(3));
  LabeledEmbeddings q;
  q.embeddings = MatD(6, 3);
  q.embeddings << 1, 0, 0, 0, 2, 0, 0, 0, 3, 4, 0, 0, 0, 5, 0, 0, 0, 6;
  q.labels = {"class1", "class2", "class3", "class1", "class2", "class3"};
  const ConfusionReport r = evaluate(q, anchors, EvalMode{});
  EXPECT_EQ(r.accuracy, 1.0);
  EXPECT_EQ(r.n_queries, 6u);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(r.normalized[i][j], i == j ? 1.0 : 0.0);
}

TEST(Evaluate, AccuracyIgnoresAnchorOrder) {
  Rng rng(6);
  std::vector<TextAnchor> a;
  for (int c = 0; c < 4; ++c) a.push_back({"c" + std::to_string(c), "", random_vec(rng, 8)});
  LabeledEmbeddings q;
  q.embeddings = MatD(40, 8);
  for (int i = 0; i < 40; ++i) {
    const auto v = random_vec(rng, 8);
    q.embeddings.row(i) = Eigen::Map<const Eigen::RowVectorXd>(v.data(), 8);
    q.labels.push_back("c" + std::to_string(i % 4));
  }
  const double acc = evaluate(q, AnchorMatrix(a), EvalMode{}).accuracy;
  std::reverse(a.begin(), a.end());
  EXPECT_EQ(evaluate(q, AnchorMatrix(a), EvalMode{}).accuracy, acc);
}

TEST(Evaluate, FewShotNeedsSupportAndKnownLabels) {
  const AnchorMatrix anchors(basis_anchors(2));
  LabeledEmbeddings q{MatD::Identity(2, 2), {"class1", "class2"}};
  EXPECT_THROW(evaluate(q, anchors, EvalMode{1, 5.5, 1}), Error);
  LabeledEmbeddings unknown{MatD::Identity(1, 2), {"nope"}};
  try {
    evaluate(unknown, anchors, EvalMode{});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::UnknownLabel);
  }
  LabeledEmbeddings pool{MatD::Identity(2, 2), {"class1", "class2"}};
  EXPECT_THROW(evaluate(q, anchors, EvalMode{2, 5.5, 1}, &pool), Error);  // one member per class only
  EXPECT_EQ(evaluate(q, anchors, EvalMode{1, 5.5, 3}, &pool).n_queries, 6u);
}

TEST(SampleSupport, DeterministicPerSeedAndWithoutReplacement) {
  const AnchorMatrix anchors(basis_anchors(2));
  LabeledEmbeddings pool;
  pool.embeddings = MatD(10, 2);
  for (int i = 0; i < 10; ++i) {
    pool.embeddings.row(i) << (i % 2 == 0 ? 1.0 + i : 0.0), (i % 2 == 1 ? 1.0 + i : 0.0);
    pool.labels.push_back(i % 2 == 0 ? "class1" : "class2");
  }
  const SupportSet a = sample_support(pool, anchors, 3, 9);
  EXPECT_EQ(a.per_class, sample_support(pool, anchors, 3, 9).per_class);
  for (const auto& members : a.per_class) {
    ASSERT_EQ(members.size(), 3u);
    EXPECT_NE(members[0], members[1]);
    EXPECT_NE(members[1], members[2]);
    EXPECT_NE(members[0], members[2]);
  }
}
