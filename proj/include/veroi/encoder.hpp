#pragma once

#include "veroi/binary_io.hpp"
#include "veroi/clustering.hpp"
#include "veroi/common.hpp"
#include "veroi/features.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace veroi {

// Concatenated per-visual-word residual sums, K blocks of descriptor_dim.
// `empty` marks the zero sentinel produced by a cell without keypoints.
struct RawDescriptor {
  Vec values;
  bool empty = true;
};

// Nearest visual word of every keypoint of `fs`.
inline std::vector<std::uint32_t> assign_all(const FeatureSet& fs, const Vocabulary& vocab) {
  require(fs.descriptor_dim == vocab.dim(), Errc::kDimMismatch,
          "feature set has " + std::to_string(fs.descriptor_dim) + "-D descriptors, vocabulary expects " +
              std::to_string(vocab.dim()));
  std::vector<std::uint32_t> words(fs.size());
  for (std::size_t i = 0; i < fs.size(); ++i) words[i] = static_cast<std::uint32_t>(assign(fs.descriptor(i), vocab));
  return words;
}

// VLAD over a subset of keypoints, with word assignments precomputed by
// assign_all().
inline RawDescriptor vlad_encode(const FeatureSet& fs, const Vocabulary& vocab,
                                 std::span<const std::uint32_t> members,
                                 std::span<const std::uint32_t> words) {
  const auto dim = static_cast<Eigen::Index>(vocab.dim());
  require(fs.descriptor_dim == vocab.dim(), Errc::kDimMismatch, "vocabulary/descriptor dimension mismatch");
  require(words.size() == fs.size(), Errc::kDimMismatch, "word assignments do not match the feature set");
  RawDescriptor raw;
  raw.values = Vec::Zero(static_cast<Eigen::Index>(vocab.size()) * dim);
  for (const auto i : members) {
    require(i < fs.size(), Errc::kOutOfBounds, "member index " + std::to_string(i) + " out of range");
    const auto d = fs.descriptor(i);
    const Eigen::Map<const Eigen::VectorXf> x(d.data(), dim);
    const auto k = static_cast<Eigen::Index>(words[i]);
    raw.values.segment(k * dim, dim) += x.cast<double>() - vocab.centroids.row(k).transpose();
  }
  raw.empty = members.empty();
  return raw;
}

inline RawDescriptor vlad_encode(const FeatureSet& fs, const Vocabulary& vocab,
                                 std::span<const std::uint32_t> members) {
  return vlad_encode(fs, vocab, members, assign_all(fs, vocab));
}

// Signed square root of every component, then L2 normalization.
inline RawDescriptor ssr_normalize(const RawDescriptor& raw) {
  RawDescriptor out = raw;
  out.values = raw.values.unaryExpr([](double c) { return std::copysign(std::sqrt(std::abs(c)), c); });
  if (!normalize_or_zero(out.values)) out.empty = true;
  return out;
}

// ---------------------------------------------------------------------------
// PCA

struct PcaModel {
  Mat projection;   // U x D, orthonormal columns
  Vec eigenvalues;  // D, descending, of the training covariance
  Vec mean;         // U
  std::uint32_t training_count = 0;

  std::size_t input_dim() const { return static_cast<std::size_t>(projection.rows()); }
  std::size_t output_dim() const { return static_cast<std::size_t>(projection.cols()); }
};

enum class PcaRoute { kAuto, kCovariance, kGram };

namespace detail {

// Flip each column so its largest-magnitude entry is positive.
inline void canonical_signs(Mat& m) {
  for (Eigen::Index c = 0; c < m.cols(); ++c) {
    Eigen::Index idx = 0;
    m.col(c).cwiseAbs().maxCoeff(&idx);
    if (m(idx, c) < 0.0) m.col(c) *= -1.0;
  }
}

inline constexpr double kRankTolerance = 1e-9;

}  // namespace detail

// PCA on Y training rows of dimension U. With U > Y the eigenproblem is solved
// on the Y x Y Gram matrix and the eigenvectors are rotated back into the
// U-dimensional space (R = X^T E diag(sqrt(mu))), then column-normalized.
inline PcaModel pca_train(const RowMat& training, std::size_t out_dim, PcaRoute route = PcaRoute::kAuto) {
  const auto y = static_cast<std::size_t>(training.rows());
  const auto u = static_cast<std::size_t>(training.cols());
  require(y >= 2, Errc::kInvalidArgument, "PCA needs at least 2 training rows");
  require(out_dim >= 1 && out_dim <= std::min(y - 1, u), Errc::kInvalidArgument,
          "PCA output dimension " + std::to_string(out_dim) + " exceeds min(Y-1, U) = " +
              std::to_string(std::min(y - 1, u)));

  PcaModel model;
  model.training_count = static_cast<std::uint32_t>(y);
  model.mean = training.colwise().mean().transpose();
  const Mat centered = training.rowwise() - model.mean.transpose();
  const double scale = 1.0 / static_cast<double>(y - 1);

  if (route == PcaRoute::kAuto) route = u > y ? PcaRoute::kGram : PcaRoute::kCovariance;
  const Mat gram = route == PcaRoute::kGram ? Mat(centered * centered.transpose())
                                            : Mat(centered.transpose() * centered * scale);
  Eigen::SelfAdjointEigenSolver<Mat> eig(gram);
  require(eig.info() == Eigen::Success, Errc::kRankDeficient, "eigendecomposition failed");
  const Vec values = eig.eigenvalues().reverse();  // descending
  const Mat vectors = eig.eigenvectors().rowwise().reverse();

  const double top = std::max(values(0), 0.0);
  std::size_t rank = 0;
  for (Eigen::Index i = 0; i < values.size(); ++i)
    if (values(i) > top * detail::kRankTolerance && values(i) > 0.0) ++rank;
  if (rank < out_dim)
    throw Error(Errc::kRankDeficient, "training matrix has rank " + std::to_string(rank) + ", cannot retain " +
                                          std::to_string(out_dim) + " components (achievable rank " +
                                          std::to_string(rank) + ")");

  const auto d = static_cast<Eigen::Index>(out_dim);
  if (route == PcaRoute::kGram) {
    const Vec mu = values.head(d);
    model.projection = centered.transpose() * vectors.leftCols(d) * mu.cwiseSqrt().asDiagonal();
    model.projection.colwise().normalize();
    model.eigenvalues = mu * scale;
  } else {
    model.projection = vectors.leftCols(d);
    model.eigenvalues = values.head(d);
  }
  detail::canonical_signs(model.projection);
  return model;
}

// Unit-norm projected descriptor, or the zero sentinel.
struct ProjectedDescriptor {
  Vec values;
  bool empty = true;
};

// R^T (raw - mean) without normalization.
inline Vec project_linear(const RawDescriptor& raw, const PcaModel& model) {
  require(static_cast<std::size_t>(raw.values.size()) == model.input_dim(), Errc::kDimMismatch,
          "raw descriptor has " + std::to_string(raw.values.size()) + " dims, PCA expects " +
              std::to_string(model.input_dim()));
  return model.projection.transpose() * (raw.values - model.mean);
}

inline ProjectedDescriptor project(const RawDescriptor& raw, const PcaModel& model) {
  ProjectedDescriptor pd;
  if (raw.empty) {
    require(static_cast<std::size_t>(raw.values.size()) == model.input_dim() || raw.values.size() == 0,
            Errc::kDimMismatch, "raw descriptor dimension mismatch");
    pd.values = Vec::Zero(static_cast<Eigen::Index>(model.output_dim()));
    return pd;
  }
  pd.values = project_linear(raw, model);
  pd.empty = !normalize_or_zero(pd.values);
  return pd;
}

// Block-wise whitened and normalized descriptor: M blocks of D/M components,
// each unit-norm (or all-zero).
struct WhitenedDescriptor {
  Vec values;
  bool empty = true;
};

inline constexpr double kEigenvalueFloor = 1e-10;

// Inverse square roots of the eigenvalues, floored at kEigenvalueFloor times
// the largest one. `floored` receives the number of clamped components.
inline Vec whitening_scales(const Vec& eigenvalues, std::size_t* floored = nullptr) {
  const double floor = kEigenvalueFloor * std::max(eigenvalues.maxCoeff(), 0.0);
  std::size_t clamped = 0;
  Vec scales(eigenvalues.size());
  for (Eigen::Index i = 0; i < eigenvalues.size(); ++i) {
    double lambda = eigenvalues(i);
    if (!(lambda > floor)) {
      lambda = floor;
      ++clamped;
    }
    scales(i) = lambda > 0.0 ? 1.0 / std::sqrt(lambda) : 0.0;
  }
  if (floored) *floored = clamped;
  return scales;
}

// Normalizes each of the `blocks` equal slices of `v` to unit length.
inline void normalize_blocks(Vec& v, std::size_t blocks) {
  const auto width = v.size() / static_cast<Eigen::Index>(blocks);
  for (std::size_t m = 0; m < blocks; ++m) {
    Vec block = v.segment(static_cast<Eigen::Index>(m) * width, width);
    normalize_or_zero(block);
    v.segment(static_cast<Eigen::Index>(m) * width, width) = block;
  }
}

inline WhitenedDescriptor whiten_normalize(const ProjectedDescriptor& pd, const Vec& eigenvalues,
                                           std::size_t blocks, std::size_t* floored = nullptr) {
  const auto d = static_cast<std::size_t>(pd.values.size());
  require(blocks >= 1 && d % blocks == 0, Errc::kInvalidArgument,
          "dimension " + std::to_string(d) + " is not divisible by M = " + std::to_string(blocks));
  require(static_cast<std::size_t>(eigenvalues.size()) == d, Errc::kDimMismatch,
          "need one eigenvalue per projected component");
  WhitenedDescriptor wd;
  wd.values = pd.values.cwiseProduct(whitening_scales(eigenvalues, floored));
  normalize_blocks(wd.values, blocks);
  wd.empty = pd.empty || wd.values.isZero(0.0);
  return wd;
}

inline WhitenedDescriptor whiten_normalize(const ProjectedDescriptor& pd, const PcaModel& model,
                                           std::size_t blocks, std::size_t* floored = nullptr) {
  return whiten_normalize(pd, model.eigenvalues, blocks, floored);
}

inline constexpr std::string_view kPcaMagic = "VPCA";
inline constexpr std::uint16_t kPcaVersion = 1;

inline void save_pca(const PcaModel& model, const std::filesystem::path& path) {
  io::ByteWriter w;
  w.put_bytes(kPcaMagic);
  w.put<std::uint16_t>(kPcaVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(model.input_dim()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(model.output_dim()));
  w.put<std::uint32_t>(model.training_count);
  auto put_vec = [&](const auto& values) {
    for (Eigen::Index i = 0; i < values.size(); ++i) w.put<float>(static_cast<float>(values(i)));
  };
  put_vec(model.mean);
  put_vec(model.eigenvalues);
  const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rows = model.projection;
  put_vec(rows.reshaped<Eigen::RowMajor>());
  io::write_file(path, w.bytes());
}

inline PcaModel load_pca(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  io::ByteReader r(bytes);
  r.expect_magic(kPcaMagic);
  io::check_version(r.get<std::uint16_t>(), kPcaVersion, "PCA model");
  const auto u = r.get<std::uint32_t>();
  const auto d = r.get<std::uint32_t>();
  PcaModel model;
  model.training_count = r.get<std::uint32_t>();
  require(u >= 1 && d >= 1 && d <= u, Errc::kInvalidArgument, "invalid PCA dimensions");
  require(r.remaining() == (std::uint64_t{u} + d + std::uint64_t{u} * d) * 4, Errc::kTruncated,
          "PCA payload size mismatch");
  auto get_vec = [&](std::size_t n) {
    std::vector<float> tmp(n);
    r.get_f32(tmp);
    return Eigen::Map<Eigen::VectorXf>(tmp.data(), static_cast<Eigen::Index>(n)).cast<double>().eval();
  };
  model.mean = get_vec(u);
  model.eigenvalues = get_vec(d);
  const Vec flat = get_vec(std::size_t{u} * d);
  model.projection = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      flat.data(), u, d);
  r.expect_end();
  return model;
}

}  // namespace veroi
