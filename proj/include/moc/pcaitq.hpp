#pragma once

// Off-card template generation: PCA projection, ITQ rotation, sign
// binarization and majority-fusion enrollment.
//
//   x = (f - mu) W_pca,   z = x R,   b_i = 1[z_i > 0]

#include <Eigen/Dense>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "moc/bits.hpp"

namespace moc {

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct FloatEmbedding {
  std::uint32_t label = 0;
  std::vector<double> values;
};

struct PcaItqModel {
  Eigen::VectorXd mu;     // d
  Eigen::MatrixXd w_pca;  // d x L
  Eigen::MatrixXd r;      // L x L
  std::uint16_t rotation_id = 0;

  unsigned length_bits() const { return static_cast<unsigned>(w_pca.cols()); }
  std::size_t dim() const { return static_cast<std::size_t>(mu.size()); }
};

struct PcaResult {
  Eigen::VectorXd mu;
  Eigen::MatrixXd w_pca;
  Eigen::VectorXd eigenvalues;  // top-L, descending
};

struct ItqResult {
  Eigen::MatrixXd r;
  // Quantization loss ||B - XR||_F^2 after each iteration.
  std::vector<double> loss;
  // max |R^T R - I| after each iteration.
  std::vector<double> orthogonality_error;
};

inline Eigen::MatrixXd to_matrix(std::span<const FloatEmbedding> embeddings) {
  if (embeddings.empty()) throw DimensionError("no embeddings");
  const auto d = static_cast<Eigen::Index>(embeddings.front().values.size());
  Eigen::MatrixXd m(static_cast<Eigen::Index>(embeddings.size()), d);
  for (std::size_t i = 0; i < embeddings.size(); ++i) {
    const auto& v = embeddings[i].values;
    if (static_cast<Eigen::Index>(v.size()) != d) throw DimensionError("embeddings have mixed dimensions");
    for (Eigen::Index j = 0; j < d; ++j) {
      if (!std::isfinite(v[j])) throw DimensionError("embedding contains a non-finite value");
      m(static_cast<Eigen::Index>(i), j) = v[j];
    }
  }
  return m;
}

inline double max_orthogonality_error(const Eigen::MatrixXd& m) {
  const Eigen::MatrixXd g = m.transpose() * m;
  return (g - Eigen::MatrixXd::Identity(g.rows(), g.cols())).cwiseAbs().maxCoeff();
}

/// Top-L principal directions of the sample covariance, ordered by
/// descending eigenvalue. Each column is sign-canonicalized so that its
/// largest-magnitude entry is non-negative.
inline PcaResult train_pca(const Eigen::MatrixXd& data, unsigned length_bits) {
  const auto n = data.rows();
  const auto d = data.cols();
  if (n <= static_cast<Eigen::Index>(length_bits)) {
    throw DimensionError("need more than L=" + std::to_string(length_bits) + " samples, got " +
                         std::to_string(n));
  }
  if (d < static_cast<Eigen::Index>(length_bits)) {
    throw DimensionError("embedding dimension " + std::to_string(d) + " < L=" + std::to_string(length_bits));
  }

  PcaResult out;
  out.mu = data.colwise().mean().transpose();
  const Eigen::MatrixXd centered = data.rowwise() - out.mu.transpose();
  const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(n - 1);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) throw std::runtime_error("eigendecomposition failed");

  // Eigen returns ascending eigenvalues; take the last L in reverse.
  out.w_pca.resize(d, length_bits);
  out.eigenvalues.resize(length_bits);
  for (unsigned k = 0; k < length_bits; ++k) {
    const Eigen::Index src = d - 1 - k;
    Eigen::VectorXd col = eig.eigenvectors().col(src);
    Eigen::Index arg = 0;
    col.cwiseAbs().maxCoeff(&arg);
    if (col(arg) < 0) col = -col;
    out.w_pca.col(k) = col;
    out.eigenvalues(k) = eig.eigenvalues()(src);
  }
  return out;
}

inline PcaResult train_pca(std::span<const FloatEmbedding> embeddings, unsigned length_bits) {
  return train_pca(to_matrix(embeddings), length_bits);
}

/// Seeded random orthogonal matrix: QR of a Gaussian matrix with the
/// diagonal of R made positive.
inline Eigen::MatrixXd random_orthogonal(Eigen::Index n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd g(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    for (Eigen::Index i = 0; i < n; ++i) g(i, j) = normal(rng);
  }
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(n, n);
  const Eigen::MatrixXd upper = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Eigen::Index j = 0; j < n; ++j) {
    if (upper(j, j) < 0) q.col(j) = -q.col(j);
  }
  return q;
}

namespace detail {

// +1 where z > 0, -1 otherwise.
inline Eigen::MatrixXd sign_pm1(const Eigen::MatrixXd& z) {
  return z.unaryExpr([](double t) { return t > 0.0 ? 1.0 : -1.0; });
}

// Orthogonal Procrustes: R = argmin ||B - XR|| over orthogonal R, given
// C = B^T X = U S V^T, is R = V U^T.
inline Eigen::MatrixXd procrustes(const Eigen::MatrixXd& b, const Eigen::MatrixXd& x) {
  const Eigen::MatrixXd c = b.transpose() * x;
  Eigen::BDCSVD<Eigen::MatrixXd> svd(c, Eigen::ComputeFullU | Eigen::ComputeFullV);
  return svd.matrixV() * svd.matrixU().transpose();
}

}  // namespace detail

/// ITQ alternating minimization starting from a given orthogonal rotation.
inline ItqResult train_itq(const Eigen::MatrixXd& projected, unsigned iterations, Eigen::MatrixXd initial) {
  if (iterations < 1) throw std::invalid_argument("ITQ needs at least one iteration");
  if (initial.rows() != projected.cols() || initial.cols() != projected.cols()) {
    throw DimensionError("initial rotation must be L x L");
  }
  ItqResult out;
  out.r = std::move(initial);
  out.loss.reserve(iterations);
  out.orthogonality_error.reserve(iterations);
  for (unsigned it = 0; it < iterations; ++it) {
    const Eigen::MatrixXd b = detail::sign_pm1(projected * out.r);
    out.r = detail::procrustes(b, projected);
    out.loss.push_back((detail::sign_pm1(projected * out.r) - projected * out.r).squaredNorm());
    out.orthogonality_error.push_back(max_orthogonality_error(out.r));
  }
  return out;
}

inline ItqResult train_itq(const Eigen::MatrixXd& projected, unsigned iterations, std::uint64_t seed) {
  return train_itq(projected, iterations, random_orthogonal(projected.cols(), seed));
}

struct TrainOptions {
  unsigned length_bits = 64;
  unsigned itq_iterations = 50;
  std::uint64_t seed = 0;
  std::uint16_t rotation_id = 1;
};

inline PcaItqModel train_model(std::span<const FloatEmbedding> embeddings, const TrainOptions& opt,
                               ItqResult* itq_out = nullptr) {
  const Eigen::MatrixXd data = to_matrix(embeddings);
  PcaResult pca = train_pca(data, opt.length_bits);
  const Eigen::MatrixXd projected = (data.rowwise() - pca.mu.transpose()) * pca.w_pca;
  ItqResult itq = train_itq(projected, opt.itq_iterations, opt.seed);

  PcaItqModel model{std::move(pca.mu), std::move(pca.w_pca), itq.r, opt.rotation_id};
  if (itq_out) *itq_out = std::move(itq);
  return model;
}

inline BinaryTemplate encode(const PcaItqModel& model, std::span<const double> f) {
  if (f.size() != model.dim()) {
    throw DimensionError("embedding has dimension " + std::to_string(f.size()) + ", model expects " +
                         std::to_string(model.dim()));
  }
  const Eigen::Map<const Eigen::VectorXd> fv(f.data(), static_cast<Eigen::Index>(f.size()));
  const Eigen::RowVectorXd z = (fv - model.mu).transpose() * model.w_pca * model.r;
  std::vector<std::uint8_t> bits(static_cast<std::size_t>(z.size()));
  for (Eigen::Index i = 0; i < z.size(); ++i) bits[static_cast<std::size_t>(i)] = z(i) > 0.0 ? 1 : 0;
  return BinaryTemplate::from_bits(bits);
}

inline BinaryTemplate encode(const PcaItqModel& model, const FloatEmbedding& f) {
  return encode(model, std::span<const double>(f.values));
}

/// Per-bit majority vote. Ties (possible with an even count) take the bit
/// of the first template.
inline BinaryTemplate majority_fuse(std::span<const BinaryTemplate> templates) {
  if (templates.empty()) throw std::invalid_argument("majority_fuse: no templates");
  const unsigned len = templates.front().length_bits();
  for (const auto& t : templates) {
    if (t.length_bits() != len) throw std::invalid_argument("majority_fuse: mixed template lengths");
  }
  std::vector<std::uint8_t> out(len);
  const std::size_t n = templates.size();
  for (unsigned i = 0; i < len; ++i) {
    std::size_t ones = 0;
    for (const auto& t : templates) ones += t.bit(i);
    if (2 * ones > n) {
      out[i] = 1;
    } else if (2 * ones < n) {
      out[i] = 0;
    } else {
      out[i] = templates.front().bit(i);
    }
  }
  return BinaryTemplate::from_bits(out);
}

// Model file: "PITQ", version u8, L u32, d u32, rotation_id u16, then mu,
// W_pca, R as little-endian f64, matrices row-major.
namespace model_file {

inline constexpr std::array<char, 4> kMagic{'P', 'I', 'T', 'Q'};
inline constexpr Byte kVersion = 1;

namespace detail {
template <class T>
void put_le(Bytes& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<Byte>(v >> (8 * i)));
}
inline void put_f64(Bytes& out, double v) { put_le(out, std::bit_cast<std::uint64_t>(v)); }
}  // namespace detail

inline Bytes serialize(const PcaItqModel& m) {
  Bytes out(kMagic.begin(), kMagic.end());
  out.push_back(kVersion);
  detail::put_le<std::uint32_t>(out, m.length_bits());
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(m.dim()));
  detail::put_le<std::uint16_t>(out, m.rotation_id);
  for (Eigen::Index i = 0; i < m.mu.size(); ++i) detail::put_f64(out, m.mu(i));
  for (Eigen::Index i = 0; i < m.w_pca.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.w_pca.cols(); ++j) detail::put_f64(out, m.w_pca(i, j));
  }
  for (Eigen::Index i = 0; i < m.r.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.r.cols(); ++j) detail::put_f64(out, m.r(i, j));
  }
  return out;
}

inline PcaItqModel deserialize(std::span<const Byte> in) {
  std::size_t pos = 0;
  auto get = [&](std::size_t n) -> std::uint64_t {
    if (pos + n > in.size()) throw CodecError("model file truncated");
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(in[pos + i]) << (8 * i);
    pos += n;
    return v;
  };
  auto f64 = [&] { return std::bit_cast<double>(get(8)); };

  for (char c : kMagic) {
    if (static_cast<char>(get(1)) != c) throw CodecError("not a PITQ model file");
  }
  if (get(1) != kVersion) throw CodecError("unsupported PITQ version");
  const auto l = static_cast<Eigen::Index>(get(4));
  const auto d = static_cast<Eigen::Index>(get(4));
  if (!is_supported_length(static_cast<unsigned>(l)) || d < l) throw CodecError("PITQ header has bad L/d");
  const std::size_t expected = 4 + 1 + 4 + 4 + 2 + 8 * static_cast<std::size_t>(d + d * l + l * l);
  if (in.size() != expected) throw CodecError("PITQ file size does not match header");

  PcaItqModel m;
  m.rotation_id = static_cast<std::uint16_t>(get(2));
  m.mu.resize(d);
  for (Eigen::Index i = 0; i < d; ++i) m.mu(i) = f64();
  m.w_pca.resize(d, l);
  for (Eigen::Index i = 0; i < d; ++i) {
    for (Eigen::Index j = 0; j < l; ++j) m.w_pca(i, j) = f64();
  }
  m.r.resize(l, l);
  for (Eigen::Index i = 0; i < l; ++i) {
    for (Eigen::Index j = 0; j < l; ++j) m.r(i, j) = f64();
  }
  return m;
}

inline void save(const std::filesystem::path& path, const PcaItqModel& m) {
  const Bytes b = serialize(m);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

inline PcaItqModel load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  const Bytes b((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return deserialize(b);
}

}  // namespace model_file

/// Directory of model files, one per RotationID ("rot_XXXX.pitq").
class RotationRegistry {
 public:
  explicit RotationRegistry(std::filesystem::path dir) : dir_(std::move(dir)) {
    std::filesystem::create_directories(dir_);
  }

  std::vector<std::uint16_t> ids() const {
    std::vector<std::uint16_t> out;
    for (const auto& entry : std::filesystem::directory_iterator(dir_)) {
      const std::string name = entry.path().filename().string();
      if (name.size() == 13 && name.starts_with("rot_") && name.ends_with(".pitq")) {
        out.push_back(static_cast<std::uint16_t>(std::stoul(name.substr(4, 4), nullptr, 16)));
      }
    }
    std::sort(out.begin(), out.end());
    return out;
  }

  std::uint16_t next_id() const {
    const auto existing = ids();
    if (existing.empty()) return 1;
    if (existing.back() == 0xFFFF) throw std::runtime_error("rotation id space exhausted");
    return static_cast<std::uint16_t>(existing.back() + 1);
  }

  std::filesystem::path path_for(std::uint16_t id) const {
    static constexpr char kDigits[] = "0123456789abcdef";
    std::string hex(4, '0');
    for (int i = 0; i < 4; ++i) hex[3 - i] = kDigits[(id >> (4 * i)) & 0xF];
    return dir_ / ("rot_" + hex + ".pitq");
  }

  std::filesystem::path store(const PcaItqModel& m) const {
    auto p = path_for(m.rotation_id);
    model_file::save(p, m);
    return p;
  }

  PcaItqModel load(std::uint16_t id) const { return model_file::load(path_for(id)); }

 private:
  std::filesystem::path dir_;
};

}  // namespace moc
