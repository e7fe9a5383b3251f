// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "trainwatch/xai.hpp"

using namespace trainwatch;

namespace {

Eigen::MatrixXd random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c, double sd = 1.0) {
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal(0.0, sd);
  return m;
}

Eigen::MatrixXd random_stochastic(Rng& rng, Eigen::Index n) {
  Eigen::MatrixXd m(n, n);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform() + 1e-3;
  for (Eigen::Index i = 0; i < n; ++i) m.row(i) /= m.row(i).sum();
  return m;
}

// Central differences of KL(P || Q(Y)) with respect to every entry of Y.
Eigen::MatrixXd numeric_kl_gradient(const Eigen::MatrixXd& p, Eigen::MatrixXd y, double h = 1e-5) {
  Eigen::MatrixXd g(y.rows(), y.cols());
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    const double keep = y.data()[i];
    y.data()[i] = keep + h;
    const double up = kl_divergence(p, tsne_q_matrix(y));
    y.data()[i] = keep - h;
    const double down = kl_divergence(p, tsne_q_matrix(y));
    y.data()[i] = keep;
    g.data()[i] = (up - down) / (2.0 * h);
  }
  return g;
}

double max_relative_error(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i)
    worst = std::max(worst, std::fabs(a.data()[i] - b.data()[i]) /
                                std::max({std::fabs(a.data()[i]), std::fabs(b.data()[i]), 1e-6}));
  return worst;
}

}  // namespace

TEST(Attention, HeadMeanExamples) {
  Rng first(1);
  AttentionTensor one{{random_stochastic(first, 4)}};
  EXPECT_EQ(attention_head_mean(one), one.heads[0]);

  Eigen::MatrixXd a(2, 2), b(2, 2);
  a << 1, 0, 0, 1;
  b << 0, 1, 1, 0;
  const auto m = attention_head_mean({{a, b}});
  EXPECT_TRUE(m.isApproxToConstant(0.5));

  Rng rng(3);
  AttentionTensor many{{random_stochastic(rng, 6), random_stochastic(rng, 6), random_stochastic(rng, 6)}};
  const auto mean = attention_head_mean(many);
  for (Eigen::Index i = 0; i < 6; ++i) EXPECT_NEAR(mean.row(i).sum(), 1.0, 1e-12);
}

TEST(Attention, TokenImportance) {
  const Eigen::Index n = 7;
  const Eigen::MatrixXd uniform = Eigen::MatrixXd::Constant(n, n, 1.0 / static_cast<double>(n));
  const auto s = token_importance(attention_head_mean({{uniform}}));
  for (Eigen::Index j = 0; j < n; ++j) EXPECT_NEAR(s[j], 1.0, 1e-12);
  const auto id = token_importance(Eigen::MatrixXd::Identity(4, 4));
  EXPECT_TRUE(id.isApproxToConstant(1.0));

  // Every token attends mostly to token 2 (index 1).
  Eigen::MatrixXd focus = Eigen::MatrixXd::Constant(4, 4, 0.1);
  focus.col(1).setConstant(0.7);
  Eigen::Index arg = 0;
  token_importance(focus).maxCoeff(&arg);
  EXPECT_EQ(arg, 1);
}

TEST(Attention, PermutationEquivariant) {
  Rng rng(5);
  AttentionTensor a{{random_stochastic(rng, 5), random_stochastic(rng, 5)}};
  Eigen::PermutationMatrix<Eigen::Dynamic> perm(5);
  perm.indices() << 3, 0, 4, 1, 2;
  AttentionTensor pa;
  for (const auto& h : a.heads) pa.heads.push_back(perm * h * perm.transpose());
  const auto m = attention_head_mean(a);
  const auto pm = attention_head_mean(pa);
  EXPECT_LT((pm - perm * m * perm.transpose()).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_LT((token_importance(pm) - perm * token_importance(m)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Attention, RejectsInvalidTensors) {
  Eigen::MatrixXd bad(2, 2);
  bad << 0.5, 0.4, 0.5, 0.5;
  EXPECT_THROW(attention_head_mean({{bad}}), InvalidArgument);
  Eigen::MatrixXd neg(2, 2);
  neg << 1.5, -0.5, 0.5, 0.5;
  EXPECT_THROW(attention_head_mean({{neg}}), InvalidArgument);
  EXPECT_THROW(attention_head_mean({}), InvalidArgument);
  EXPECT_THROW(attention_head_mean({{Eigen::MatrixXd::Identity(2, 2), Eigen::MatrixXd::Identity(3, 3)}}),
               InvalidArgument);
}

TEST(Gradcam, WeightExamples) {
  Eigen::MatrixXd g(2, 2);
  g << 1, 2, 3, 4;
  EXPECT_DOUBLE_EQ(gradcam_weights({{g}, {g}})[0], 2.5);
  Eigen::MatrixXd zero(2, 3);
  zero << 1, -1, 2, -2, 0.5, -0.5;
  EXPECT_DOUBLE_EQ(gradcam_weights({{zero}, {zero}})[0], 0.0);
  for (double c : {0.1, -3.7, 1e-9, 12345.678}) {
    const Eigen::MatrixXd m = Eigen::MatrixXd::Constant(7, 13, c);
    EXPECT_EQ(gradcam_weights({{m}, {m}})[0], c);
  }
}

TEST(Gradcam, MapExamples) {
  Eigen::MatrixXd m(2, 2);
  m << 1, 2, 0, 4;
  EXPECT_EQ(gradcam_map({1.0}, {m}), m);
  EXPECT_TRUE(gradcam_map({-1.0, -2.0}, {m, m}).isZero(0.0));
  Eigen::MatrixXd a(1, 1), b(1, 1);
  a << 2;
  b << 3;
  EXPECT_EQ(gradcam_map({1.0, -1.0}, {a, b})(0, 0), 0.0);
  EXPECT_THROW(gradcam_map({1.0}, {a, b}), InvalidArgument);
  EXPECT_THROW(gradcam_map({1.0, 1.0}, {a, Eigen::MatrixXd::Zero(2, 1)}), InvalidArgument);
  EXPECT_THROW(gradcam_weights({{a}, {}}), InvalidArgument);
}

TEST(Gradcam, MapNonNegative) {
  Rng rng(8);
  for (int t = 0; t < 200; ++t) {
    std::vector<Eigen::MatrixXd> maps;
    std::vector<double> alpha;
    for (int k = 0; k < 3; ++k) {
      maps.push_back(random_matrix(rng, 4, 5));
      alpha.push_back(rng.normal());
    }
    EXPECT_GE(gradcam_map(alpha, maps).minCoeff(), 0.0);
  }
}

TEST(Tsne, HandExpandedPForCollinearPoints) {
  Eigen::MatrixXd x(3, 1);
  x << 0, 1, 3;
  const double sigma = 1.0;
  // Ordered pairs: (0,1),(1,0) d2=1; (0,2),(2,0) d2=9; (1,2),(2,1) d2=4.
  const double e1 = std::exp(-1.0 / 2.0), e9 = std::exp(-9.0 / 2.0), e4 = std::exp(-4.0 / 2.0);
  const double z = 2 * (e1 + e9 + e4);
  const auto p = tsne_p_matrix(x, sigma);
  EXPECT_NEAR(p(0, 1), e1 / z, 1e-9);
  EXPECT_NEAR(p(0, 2), e9 / z, 1e-9);
  EXPECT_NEAR(p(1, 2), e4 / z, 1e-9);
  EXPECT_NEAR(p(2, 1), e4 / z, 1e-9);
  for (int i = 0; i < 3; ++i) EXPECT_EQ(p(i, i), 0.0);
}

TEST(Tsne, PAndQAreJointDistributions) {
  Rng rng(12);
  for (int t = 0; t < 50; ++t) {
    const auto n = static_cast<Eigen::Index>(2 + rng.uniform_index(30));
    const auto x = random_matrix(rng, n, 5);
    const auto y = random_matrix(rng, n, 2, 3.0);
    for (const auto& m : {tsne_p_matrix(x, 2.0), tsne_q_matrix(y)}) {
      EXPECT_NEAR(m.sum(), 1.0, 1e-9);
      EXPECT_EQ(m, m.transpose());
      EXPECT_TRUE(m.diagonal().isZero(0.0));
      EXPECT_GE(m.minCoeff(), 0.0);
    }
  }
}

TEST(Tsne, KlConventions) {
  Rng rng(2);
  const auto x = random_matrix(rng, 6, 3);
  const auto p = tsne_p_matrix(x, 1.0);
  EXPECT_NEAR(kl_divergence(p, p), 0.0, 1e-12);
  EXPECT_GE(kl_divergence(p, tsne_q_matrix(random_matrix(rng, 6, 2))), 0.0);
  // Zero entries in P contribute nothing.
  Eigen::MatrixXd sparse = Eigen::MatrixXd::Zero(3, 3);
  sparse(0, 1) = sparse(1, 0) = 0.5;
  const auto q = tsne_q_matrix(random_matrix(rng, 3, 2));
  EXPECT_NEAR(kl_divergence(sparse, q), 0.5 * std::log(0.5 / q(0, 1)) + 0.5 * std::log(0.5 / q(1, 0)), 1e-15);
}

TEST(Tsne, TwoPointsAreAlwaysMatched) {
  Rng rng(4);
  const auto x = random_matrix(rng, 2, 4);
  const auto p = tsne_p_matrix(x, 0.7);
  EXPECT_DOUBLE_EQ(p(0, 1), 0.5);
  const auto r = tsne_embed(x, {.dims = 2, .sigma = 0.7, .iters = 10, .learning_rate = 1.0, .seed = 1});
  for (double kl : r.kl) EXPECT_NEAR(kl, 0.0, 1e-15);
}

TEST(Tsne, AnalyticGradientMatchesCentralDifferences) {
  Rng rng(21);
  for (int t = 0; t < 30; ++t) {
    const auto n = static_cast<Eigen::Index>(2 + rng.uniform_index(7));
    const auto p = tsne_p_matrix(random_matrix(rng, n, 4), 1.5);
    const auto y = random_matrix(rng, n, 2);
    EXPECT_LT(max_relative_error(tsne_gradient(p, y), numeric_kl_gradient(p, y)), 1e-4) << "N=" << n;
  }
}

TEST(Tsne, EmbeddingReducesKlOnTwoClusters) {
  Rng rng(6);
  Eigen::MatrixXd x = random_matrix(rng, 20, 5, 0.3);
  x.topRows(10).array() += 3.0;
  const auto r = tsne_embed(x, {.dims = 2, .sigma = 1.0, .iters = 300, .learning_rate = 5.0, .seed = 3});
  ASSERT_EQ(r.kl.size(), 301u);
  EXPECT_LT(r.kl.back(), r.kl.front());
  // The clusters end up apart in the embedding.
  const Eigen::RowVectorXd c1 = r.y.topRows(10).colwise().mean(), c2 = r.y.bottomRows(10).colwise().mean();
  EXPECT_GT((c1 - c2).norm(), 1.0);
  const auto again = tsne_embed(x, {.dims = 2, .sigma = 1.0, .iters = 300, .learning_rate = 5.0, .seed = 3});
  EXPECT_EQ(again.y, r.y);
}

TEST(Tsne, PerplexityExtensionIsAJointDistribution) {
  Rng rng(9);
  const auto x = random_matrix(rng, 25, 3);
  const auto p = tsne_p_matrix_perplexity(x, 5.0);
  EXPECT_NEAR(p.sum(), 1.0, 1e-9);
  EXPECT_LT((p - p.transpose()).cwiseAbs().maxCoeff(), 1e-18);
  EXPECT_THROW(tsne_p_matrix_perplexity(x, 50.0), InvalidArgument);
}

TEST(Tsne, Errors) {
  EXPECT_THROW(tsne_p_matrix(Eigen::MatrixXd::Zero(1, 2), 1.0), InvalidArgument);
  EXPECT_THROW(tsne_p_matrix(Eigen::MatrixXd::Zero(3, 2), 0.0), InvalidArgument);
  Eigen::MatrixXd far(2, 1);
  far << 0, 1e6;
  EXPECT_THROW(tsne_p_matrix(far, 1e-3), InvalidArgument);
  EXPECT_THROW(tsne_embed(Eigen::MatrixXd::Zero(3, 2), {.dims = 4}), InvalidArgument);
  EXPECT_THROW(tsne_embed(Eigen::MatrixXd::Zero(3, 2), {.iters = 0}), InvalidArgument);
}
