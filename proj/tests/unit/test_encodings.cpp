#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <random>
#include <sstream>

#include "stdemand/encodings.hpp"
#include "test_util.hpp"

using namespace stdemand;

namespace {

// Gaussian elimination with partial pivoting; solves A X = B column by column.
MatD gauss_solve(MatD a, MatD b) {
  const int n = static_cast<int>(a.rows());
  for (int col = 0; col < n; ++col) {
    int piv = col;
    for (int r = col + 1; r < n; ++r)
      if (std::abs(a(r, col)) > std::abs(a(piv, col))) piv = r;
    a.row(col).swap(a.row(piv));
    b.row(col).swap(b.row(piv));
    for (int r = col + 1; r < n; ++r) {
      const double f = a(r, col) / a(col, col);
      for (int c = col; c < n; ++c) a(r, c) -= f * a(col, c);
      for (int c = 0; c < b.cols(); ++c) b(r, c) -= f * b(col, c);
    }
  }
  MatD x(n, b.cols());
  for (int c = 0; c < b.cols(); ++c) {
    for (int r = n - 1; r >= 0; --r) {
      double s = b(r, c);
      for (int k = r + 1; k < n; ++k) s -= a(r, k) * x(k, c);
      x(r, c) = s / a(r, r);
    }
  }
  return x;
}

double leaky(double x) { return x > 0 ? x : 0.01 * x; }

}  // namespace

TEST(Probe, ZeroWeights) {
  std::mt19937_64 rng(1);
  const MatD h = testutil::random_matrix(4, 6, rng);
  EXPECT_EQ(probe<double>(h, MatD::Zero(6, 3)), MatD::Zero(4, 3));
}

TEST(Probe, IdentityEncodings) {
  std::mt19937_64 rng(2);
  const MatD w = testutil::random_matrix(4, 4, rng);
  EXPECT_EQ(probe<double>(MatD::Identity(4, 4), w), w);
}

TEST(Probe, MatchesTripleLoop) {
  std::mt19937_64 rng(3);
  const MatD h = testutil::random_matrix(3, 5, rng);
  const MatD w = testutil::random_matrix(5, 2, rng);
  const MatD v = probe(h, w);
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 2; ++j) {
      double s = 0;
      for (int k = 0; k < 5; ++k) s += h(i, k) * w(k, j);
      EXPECT_NEAR(v(i, j), s, 1e-12);
    }
  }
  EXPECT_THROW(probe<double>(h, MatD::Zero(4, 2)), ConfigError);
}

TEST(Probe, Homogeneous) {
  std::mt19937_64 rng(4);
  const MatF h = testutil::random_matrix<float>(6, 8, rng);
  const MatF w = testutil::random_matrix<float>(8, 3, rng);
  const MatF scaled = probe<float>(2.0f * h, w);
  const MatF base = probe<float>(h, w);
  EXPECT_TRUE(scaled.isApprox(2.0f * base, 1e-6f));
  EXPECT_EQ(probe<float>(4.0f * h, w), (4.0f * base).eval());  // power-of-two scaling is exact
}

TEST(Ridge, OrthonormalLimit) {
  std::mt19937_64 rng(5);
  const MatD q = Eigen::HouseholderQR<MatD>(testutil::random_matrix(8, 3, rng)).householderQ() * MatD::Identity(8, 3);
  const MatD e = testutil::random_matrix(8, 2, rng);
  const MatD w = ridge_init(q, e, 1e-9);
  EXPECT_LT(testutil::max_abs_diff(w, q.transpose() * e), 1e-8);
}

TEST(Ridge, ZeroTarget) {
  std::mt19937_64 rng(6);
  EXPECT_LT(ridge_init(testutil::random_matrix(6, 4, rng), MatD::Zero(6, 2), 0.1).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Ridge, MatchesNormalEquations) {
  std::mt19937_64 rng(7);
  const MatD h = testutil::random_matrix(6, 4, rng);
  const MatD e = testutil::random_matrix(6, 2, rng);
  MatD a = MatD::Zero(4, 4);
  MatD b = MatD::Zero(4, 2);
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 4; ++j)
      for (int r = 0; r < 6; ++r) a(i, j) += h(r, i) * h(r, j);
    a(i, i) += 0.1;
    for (int j = 0; j < 2; ++j)
      for (int r = 0; r < 6; ++r) b(i, j) += h(r, i) * e(r, j);
  }
  const MatD w = ridge_init(h, e, 0.1);
  EXPECT_LT(testutil::max_abs_diff(w, gauss_solve(a, b)), 1e-10);
  const double residual = (a * w - b).cwiseAbs().maxCoeff();
  EXPECT_LT(residual, 1e-6 * std::max(1.0, b.cwiseAbs().maxCoeff()));
}

TEST(Ridge, RejectsNonPositiveLambda) {
  EXPECT_THROW(ridge_init(MatD::Identity(2, 2), MatD::Zero(2, 1), 0.0), ConfigError);
  EXPECT_THROW(ridge_init(MatD::Identity(2, 2), MatD::Zero(2, 1), -1.0), ConfigError);
}

TEST(ProcessEmbedding, ConstantColumnNormalizesToZero) {
  MatD v(4, 2);
  v << 3, 1, 3, 2, 3, -1, 3, 5;
  const auto r = process_embedding<double>(v, RowVec<double>::Ones(2), RowVec<double>::Zero(2));
  for (int i = 0; i < 4; ++i) EXPECT_EQ(r.normalized(i, 0), 0.0);
}

TEST(ProcessEmbedding, NegativeColumnUsesLeakyBranch) {
  MatD v(3, 1);
  v << -1, -2, -4;
  const auto r = process_embedding<double>(v, RowVec<double>::Ones(1), RowVec<double>::Zero(1));
  for (int i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(r.activated(i, 0), 0.01 * v(i, 0));
  // Oracle: normalize the leaky values directly.
  double mean = 0, var = 0;
  for (int i = 0; i < 3; ++i) mean += 0.01 * v(i, 0) / 3;
  for (int i = 0; i < 3; ++i) var += std::pow(0.01 * v(i, 0) - mean, 2) / 3;
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(r.normalized(i, 0), (0.01 * v(i, 0) - mean) / std::sqrt(var + 1e-5), 1e-12);
}

TEST(ProcessEmbedding, UnitMoments) {
  std::mt19937_64 rng(8);
  for (int n : {5, 8, 40}) {
    const MatD v = testutil::random_matrix(n, 3, rng, -2.0, 6.0);
    RowVec<double> gamma(3), beta(3);
    gamma << 2.0, -1.0, 0.5;
    beta << 0.3, 0.0, -1.0;
    const auto r = process_embedding<double>(v, gamma, beta);
    for (int j = 0; j < 3; ++j) {
      double mean = 0, var = 0;
      for (int i = 0; i < n; ++i) mean += r.normalized(i, j) / n;
      for (int i = 0; i < n; ++i) var += std::pow(r.normalized(i, j) - mean, 2) / n;
      EXPECT_LT(std::abs(mean), 1e-4);
      EXPECT_NEAR(var, 1.0, 1e-3);
      for (int i = 0; i < n; ++i) EXPECT_NEAR(r.output(i, j), r.normalized(i, j) * gamma(j) + beta(j), 1e-12);
    }
  }
}

TEST(ProcessEmbedding, Errors) {
  EXPECT_THROW(process_embedding<double>(MatD::Ones(1, 2), RowVec<double>::Ones(2), RowVec<double>::Zero(2)),
               ConfigError);
  EXPECT_THROW(process_embedding<double>(MatD::Ones(3, 2), RowVec<double>::Ones(3), RowVec<double>::Zero(2)),
               ConfigError);
}

TEST(Adapt, ZeroCases) {
  std::mt19937_64 rng(9);
  const MatD v = testutil::random_matrix(4, 3, rng);
  EXPECT_EQ(adapt<double>(v, MatD::Zero(2, 3)), MatD::Zero(4, 2));
  EXPECT_EQ(adapt<double>(MatD::Zero(4, 3), testutil::random_matrix(2, 3, rng)), MatD::Zero(4, 2));
  EXPECT_THROW(adapt<double>(v, MatD::Zero(2, 4)), ConfigError);
}

TEST(Adapt, MatchesRowLoop) {
  std::mt19937_64 rng(10);
  const MatD v = testutil::random_matrix(5, 3, rng);
  const MatD d = testutil::random_matrix(2, 3, rng);
  const MatD g = adapt<double>(v, d);
  for (int i = 0; i < 5; ++i) {
    for (int r = 0; r < 2; ++r) {
      double s = 0;
      for (int k = 0; k < 3; ++k) s += d(r, k) * v(i, k);
      EXPECT_NEAR(g(i, r), leaky(s), 1e-12);
    }
  }
}

TEST(EncodingFile, BitExactRoundTrip) {
  std::mt19937_64 rng(11);
  EncodingTable t{{"r0", "region-one", "x"}, testutil::random_matrix<float>(3, 7, rng)};
  t.values(1, 2) = -0.0f;
  t.values(2, 6) = 1e-42f;  // subnormal
  std::stringstream buf;
  write_encodings(t, buf);
  const std::string bytes = buf.str();
  EXPECT_EQ(bytes.substr(0, 4), "IEMB");
  const auto back = read_encodings(buf);
  EXPECT_EQ(back.region_ids, t.region_ids);
  ASSERT_EQ(back.values.rows(), 3);
  ASSERT_EQ(back.values.cols(), 7);
  EXPECT_EQ(std::memcmp(back.values.data(), t.values.data(), sizeof(float) * 21), 0);
  std::stringstream again;
  write_encodings(back, again);
  EXPECT_EQ(again.str(), bytes);
}

TEST(EncodingFile, EmptyTable) {
  EncodingTable t{{}, MatF(0, 16)};
  testutil::TempDir dir;
  write_encodings(t, dir / "empty.iemb");
  const auto back = read_encodings(dir / "empty.iemb");
  EXPECT_EQ(back.size(), 0u);
  EXPECT_EQ(back.dim(), 16u);
  EXPECT_EQ(testutil::file_bytes(dir / "empty.iemb").size(), 16u);
}

TEST(EncodingFile, RejectsBadInput) {
  std::stringstream bogus("NOPE");
  EXPECT_THROW(read_encodings(bogus), DataError);
  EncodingTable mismatch{{"a"}, MatF::Zero(2, 3)};
  std::stringstream out;
  EXPECT_THROW(write_encodings(mismatch, out), DataError);
  EncodingTable nan{{"a"}, MatF::Constant(1, 2, std::nanf(""))};
  EXPECT_THROW(write_encodings(nan, out), DataError);
}

TEST(EncodingTable, ReorderAndSelect) {
  EncodingTable t{{"a", "b", "c"}, MatF(3, 1)};
  t.values << 1, 2, 3;
  const auto r = t.reorder({"c", "a"});
  EXPECT_EQ(r.region_ids, (std::vector<std::string>{"c", "a"}));
  EXPECT_EQ(r.values(0, 0), 3.0f);
  EXPECT_EQ(r.values(1, 0), 1.0f);
  EXPECT_THROW(t.reorder({"zz"}), DataError);
}
