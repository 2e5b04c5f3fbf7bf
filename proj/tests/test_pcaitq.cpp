#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "moc/eval.hpp"
#include "moc/pcaitq.hpp"

namespace moc {
namespace {

Eigen::MatrixXd gaussian(Eigen::Index n, const std::vector<double>& stddev, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd x(n, static_cast<Eigen::Index>(stddev.size()));
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < x.cols(); ++j) x(i, j) = stddev[static_cast<std::size_t>(j)] * normal(rng);
  }
  return x;
}

std::vector<FloatEmbedding> synthetic(std::size_t ids, std::size_t per_id, std::size_t dim, std::uint64_t seed) {
  SyntheticDatasetSpec s;
  s.n_identities = ids;
  s.images_per_identity = per_id;
  s.dim = dim;
  s.seed = seed;
  return generate_synthetic(s);
}

std::vector<std::uint8_t> naive_encode(const PcaItqModel& m, const std::vector<double>& f) {
  const auto d = static_cast<std::size_t>(m.mu.size());
  const unsigned l = m.length_bits();
  std::vector<double> y(l, 0.0);
  for (unsigned k = 0; k < l; ++k) {
    for (std::size_t i = 0; i < d; ++i) y[k] += (f[i] - m.mu(static_cast<Eigen::Index>(i))) * m.w_pca(static_cast<Eigen::Index>(i), k);
  }
  std::vector<std::uint8_t> bits(l);
  for (unsigned j = 0; j < l; ++j) {
    double z = 0.0;
    for (unsigned k = 0; k < l; ++k) z += y[k] * m.r(k, j);
    bits[j] = z > 0.0 ? 1 : 0;
  }
  return bits;
}

TEST(Pca, RecoversDominantAxis) {
  std::vector<double> sd(16, 0.5);
  sd[0] = 3.0;
  sd[1] = 2.0;
  sd[2] = 1.0;
  const PcaResult p = train_pca(gaussian(4000, sd, 1), 8);
  EXPECT_GE(std::abs(p.w_pca(0, 0)), 0.99);
  EXPECT_GE(std::abs(p.w_pca(1, 1)), 0.99);
  EXPECT_NEAR(p.eigenvalues(0), 9.0, 0.6);
  for (Eigen::Index k = 1; k < p.eigenvalues.size(); ++k) EXPECT_GE(p.eigenvalues(k - 1), p.eigenvalues(k));
}

TEST(Pca, ColumnsOrthonormalAndSignCanonical) {
  const PcaResult p = train_pca(gaussian(500, std::vector<double>(32, 1.0), 2), 16);
  EXPECT_LT(max_orthogonality_error(p.w_pca), 1e-9);
  for (Eigen::Index k = 0; k < p.w_pca.cols(); ++k) {
    Eigen::Index idx = 0;
    p.w_pca.col(k).cwiseAbs().maxCoeff(&idx);
    EXPECT_GE(p.w_pca(idx, k), 0.0);
  }
}

TEST(Pca, MeanAndDecorrelation) {
  Eigen::MatrixXd x = gaussian(300, std::vector<double>(24, 1.0), 3);
  x = x.rowwise() - x.colwise().mean();
  const PcaResult p = train_pca(x, 16);
  EXPECT_LT(p.mu.cwiseAbs().maxCoeff(), 1e-9);
  const Eigen::MatrixXd y = x * p.w_pca;
  const Eigen::MatrixXd cov = y.transpose() * y / static_cast<double>(x.rows() - 1);
  for (Eigen::Index i = 0; i < cov.rows(); ++i) {
    EXPECT_NEAR(cov(i, i), p.eigenvalues(i), 1e-6);
    for (Eigen::Index j = 0; j < cov.cols(); ++j) {
      if (i != j) {
        EXPECT_NEAR(cov(i, j), 0.0, 1e-6);
      }
    }
  }
}

TEST(Pca, DimensionErrors) {
  EXPECT_THROW(train_pca(gaussian(64, std::vector<double>(128, 1.0), 4), 64), DimensionError);
  EXPECT_THROW(train_pca(gaussian(200, std::vector<double>(32, 1.0), 4), 64), DimensionError);
  std::vector<FloatEmbedding> ragged{{0, {1.0, 2.0}}, {1, {1.0}}};
  EXPECT_THROW(to_matrix(ragged), DimensionError);
  std::vector<FloatEmbedding> nan{{0, {1.0, std::nan("")}}};
  EXPECT_THROW(to_matrix(nan), std::invalid_argument);
}

TEST(RandomOrthogonal, IsOrthogonalAndSeeded) {
  const Eigen::MatrixXd a = random_orthogonal(64, 9);
  EXPECT_LT(max_orthogonality_error(a), 1e-12);
  EXPECT_EQ(a, random_orthogonal(64, 9));
  EXPECT_NE(a, random_orthogonal(64, 10));
}

TEST(Itq, LossMonotoneAndRotationOrthogonal) {
  for (std::uint64_t seed : {11u, 12u, 13u}) {
    const auto data = synthetic(40, 8, 128, seed);
    const Eigen::MatrixXd x = to_matrix(data);
    const PcaResult p = train_pca(x, 64);
    const Eigen::MatrixXd y = (x.rowwise() - p.mu.transpose()) * p.w_pca;
    const ItqResult r = train_itq(y, 50, seed);
    ASSERT_EQ(r.loss.size(), 50u);
    for (std::size_t i = 1; i < r.loss.size(); ++i) {
      EXPECT_LE(r.loss[i], r.loss[i - 1] * (1.0 + 1e-9)) << "iteration " << i;
    }
    for (double e : r.orthogonality_error) EXPECT_LT(e, 1e-6);
  }
}

TEST(Itq, SignMatrixIsFixedPoint) {
  std::mt19937_64 rng(5);
  Eigen::MatrixXd x(200, 16);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index j = 0; j < x.cols(); ++j) x(i, j) = (rng() & 1) ? 1.0 : -1.0;
  }
  const ItqResult r = train_itq(x, 5, Eigen::MatrixXd::Identity(16, 16));
  EXPECT_LT((r.r - Eigen::MatrixXd::Identity(16, 16)).cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_NEAR(r.loss.back(), 0.0, 1e-9);
}

TEST(Itq, ReducesLossFromRandomStart) {
  const auto data = synthetic(30, 10, 64, 21);
  const Eigen::MatrixXd x = to_matrix(data);
  const PcaResult p = train_pca(x, 32);
  const Eigen::MatrixXd y = (x.rowwise() - p.mu.transpose()) * p.w_pca;
  const Eigen::MatrixXd r0 = random_orthogonal(32, 1);
  const double initial = (detail::sign_pm1(y * r0) - y * r0).squaredNorm();
  const ItqResult r = train_itq(y, 50, r0);
  EXPECT_LT(r.loss.back(), initial);
}

TEST(Itq, RejectsBadInitialRotation) {
  EXPECT_THROW(train_itq(Eigen::MatrixXd::Zero(10, 4), 3, Eigen::MatrixXd::Identity(3, 3)), DimensionError);
  EXPECT_THROW(train_itq(Eigen::MatrixXd::Zero(10, 4), 0, std::uint64_t{1}), std::invalid_argument);
}

PcaItqModel identity_model(unsigned l) {
  PcaItqModel m;
  m.mu = Eigen::VectorXd::Zero(l);
  m.w_pca = Eigen::MatrixXd::Identity(l, l);
  m.r = Eigen::MatrixXd::Identity(l, l);
  m.rotation_id = 1;
  return m;
}

TEST(Encode, SignConvention) {
  const PcaItqModel m = identity_model(16);
  EXPECT_EQ(encode(m, std::vector<double>(16, 0.5)).bytes(), (Bytes{0xFF, 0xFF}));
  EXPECT_EQ(encode(m, std::vector<double>(16, 0.0)).bytes(), (Bytes{0x00, 0x00}));
  std::vector<double> f(16, -1.0);
  f[0] = 2.0;
  f[15] = 1e-300;
  EXPECT_EQ(encode(m, f).bytes(), (Bytes{0x80, 0x01}));
}

TEST(Encode, MatchesNaiveOracle) {
  const auto data = synthetic(20, 8, 48, 31);
  TrainOptions opt;
  opt.length_bits = 32;
  opt.itq_iterations = 10;
  opt.seed = 31;
  const PcaItqModel m = train_model(data, opt);
  for (const auto& e : data) EXPECT_EQ(encode(m, e).bits(), naive_encode(m, e.values));
}

TEST(Encode, DimensionMismatch) {
  EXPECT_THROW(encode(identity_model(16), std::vector<double>(15, 0.0)), DimensionError);
}

TEST(Majority, Examples) {
  const auto t = [](Bytes b) { return BinaryTemplate::from_bytes(b); };
  std::vector<BinaryTemplate> odd{t({0xF0, 0x00}), t({0xFF, 0x00}), t({0x0F, 0x01})};
  EXPECT_EQ(majority_fuse(odd).bytes(), (Bytes{0xFF, 0x00}));
  std::vector<BinaryTemplate> even{t({0xAA, 0x00}), t({0x55, 0xFF})};
  EXPECT_EQ(majority_fuse(even).bytes(), (Bytes{0xAA, 0x00}));
  std::vector<BinaryTemplate> mixed{t({0x00, 0x00}), t({0x00, 0x00, 0x00, 0x00})};
  EXPECT_THROW(majority_fuse(mixed), std::invalid_argument);
  EXPECT_THROW(majority_fuse(std::span<const BinaryTemplate>{}), std::invalid_argument);
}

TEST(Majority, SingleTemplateIsIdentity) {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 100; ++i) {
    Bytes b(8);
    for (auto& x : b) x = static_cast<Byte>(rng());
    std::vector<BinaryTemplate> one{BinaryTemplate::from_bytes(b)};
    EXPECT_EQ(majority_fuse(one).bytes(), b);
  }
}

TEST(TrainModel, DeterministicForSeed) {
  const auto data = synthetic(30, 6, 64, 41);
  TrainOptions opt;
  opt.length_bits = 32;
  opt.seed = 41;
  const PcaItqModel a = train_model(data, opt);
  const PcaItqModel b = train_model(data, opt);
  EXPECT_EQ(model_file::serialize(a), model_file::serialize(b));
}

TEST(TrainModel, IntraDistanceBelowInter) {
  const auto data = synthetic(55, 7, 128, 7);
  for (unsigned bits : {64u, 128u}) {
    TrainOptions opt;
    opt.length_bits = bits;
    opt.seed = 7;
    const PcaItqModel m = train_model(data, opt);
    std::vector<BinaryTemplate> codes;
    for (const auto& e : data) codes.push_back(encode(m, e));
    double intra = 0, inter = 0;
    std::size_t n_intra = 0, n_inter = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
      for (std::size_t j = i + 1; j < data.size(); ++j) {
        const unsigned d = hamming_ct(codes[i].bytes(), codes[j].bytes());
        if (data[i].label == data[j].label) {
          intra += d;
          ++n_intra;
        } else {
          inter += d;
          ++n_inter;
        }
      }
    }
    EXPECT_LT(intra / n_intra, inter / n_inter) << bits;
  }
}

TEST(ModelFile, RoundTripAndCorruption) {
  const auto data = synthetic(20, 5, 40, 51);
  TrainOptions opt;
  opt.length_bits = 16;
  opt.rotation_id = 0x0102;
  const PcaItqModel m = train_model(data, opt);
  const Bytes image = model_file::serialize(m);
  const PcaItqModel back = model_file::deserialize(image);
  EXPECT_EQ(back.rotation_id, 0x0102);
  EXPECT_EQ(back.mu, m.mu);
  EXPECT_EQ(back.w_pca, m.w_pca);
  EXPECT_EQ(back.r, m.r);

  Bytes bad = image;
  bad[4] = 9;
  EXPECT_THROW(model_file::deserialize(bad), CodecError);
  bad = image;
  bad.pop_back();
  EXPECT_THROW(model_file::deserialize(bad), CodecError);
}

TEST(Registry, DistinctIdsPerTraining) {
  const auto dir = std::filesystem::temp_directory_path() / ("moc_registry_" + std::to_string(::getpid()));
  std::filesystem::remove_all(dir);
  RotationRegistry reg(dir);
  EXPECT_EQ(reg.next_id(), 1);
  const auto data = synthetic(20, 8, 40, 61);
  for (unsigned bits : {16u, 32u}) {
    TrainOptions opt;
    opt.length_bits = bits;
    opt.rotation_id = reg.next_id();
    reg.store(train_model(data, opt));
  }
  EXPECT_EQ(reg.ids(), (std::vector<std::uint16_t>{1, 2}));
  EXPECT_EQ(reg.load(2).length_bits(), 32u);
  EXPECT_EQ(reg.path_for(0xABCD).filename(), "rot_abcd.pitq");
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace moc
