#pragma once

#include "veroi/binary_io.hpp"
#include "veroi/clustering.hpp"
#include "veroi/common.hpp"
#include "veroi/encoder.hpp"

#include <Eigen/Eigenvalues>

#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace veroi {

// Product quantizer with symmetric-distance lookup tables. When `normalized`
// every subcodeword is unit length and table entries are
// <c_i, c_j> / (M |c_i| |c_j|), so a similarity summed over the M blocks of
// two codes lies in [-1, 1].
struct PQModel {
  std::size_t blocks = 0;         // M
  std::size_t block_dim = 0;      // D' = D / M
  std::size_t centroids = 0;      // Z', at most 256
  bool normalized = true;
  std::vector<double> codebooks;  // M x Z' x D'
  std::vector<double> tables;     // M x Z' x Z'
  // Code used for an all-zero block: the subcodeword of smallest norm before
  // normalization.
  std::vector<std::uint8_t> reserved;

  std::size_t dim() const { return blocks * block_dim; }

  Eigen::Map<const Vec> codeword(std::size_t m, std::size_t i) const {
    return {codebooks.data() + (m * centroids + i) * block_dim, static_cast<Eigen::Index>(block_dim)};
  }
  double table(std::size_t m, std::size_t i, std::size_t j) const {
    return tables[(m * centroids + i) * centroids + j];
  }
};

struct PQCode {
  std::vector<std::uint8_t> codes;
  bool empty = false;  // quantized from a zero sentinel

  bool operator==(const PQCode&) const = default;
};

inline void fill_tables(PQModel& model) {
  const auto z = model.centroids;
  model.tables.assign(model.blocks * z * z, 0.0);
  const double scale = model.normalized ? 1.0 / static_cast<double>(model.blocks) : 1.0;
  for (std::size_t m = 0; m < model.blocks; ++m)
    for (std::size_t i = 0; i < z; ++i)
      for (std::size_t j = i; j < z; ++j) {
        const double v = scale * model.codeword(m, i).dot(model.codeword(m, j));
        model.tables[(m * z + i) * z + j] = v;
        model.tables[(m * z + j) * z + i] = v;
      }
}

// Trains one K-means subcodebook per block over the block slices of every
// training row (cells of all levels pooled). Zero slices (empty cells) are
// skipped. A centroid that collapses to zero norm is moved to the slice
// farthest from its assigned centroid.
inline PQModel pq_train(const RowMat& training, std::size_t blocks, std::size_t centroids, std::uint64_t seed,
                        bool normalize = true, std::size_t max_iters = kDefaultKMeansIters) {
  const auto d = static_cast<std::size_t>(training.cols());
  require(blocks >= 1 && d % blocks == 0, Errc::kInvalidArgument,
          "dimension " + std::to_string(d) + " is not divisible by M = " + std::to_string(blocks));
  require(centroids >= 1 && centroids <= 256, Errc::kInvalidArgument, "Z' must be in [1, 256]");

  PQModel model;
  model.blocks = blocks;
  model.block_dim = d / blocks;
  model.centroids = centroids;
  model.normalized = normalize;
  model.codebooks.resize(blocks * centroids * model.block_dim);
  model.reserved.resize(blocks);
  const auto bd = static_cast<Eigen::Index>(model.block_dim);

  for (std::size_t m = 0; m < blocks; ++m) {
    const auto cols = training.middleCols(static_cast<Eigen::Index>(m) * bd, bd);
    std::vector<Eigen::Index> rows;
    for (Eigen::Index r = 0; r < cols.rows(); ++r)
      if (!cols.row(r).isZero(0.0)) rows.push_back(r);
    require(rows.size() >= centroids, Errc::kInvalidArgument,
            "block " + std::to_string(m) + " has " + std::to_string(rows.size()) + " non-empty training rows, need " +
                std::to_string(centroids));
    RowMat slice(static_cast<Eigen::Index>(rows.size()), bd);
    for (std::size_t r = 0; r < rows.size(); ++r) slice.row(static_cast<Eigen::Index>(r)) = cols.row(rows[r]);

    auto km = kmeans_full(slice, centroids, max_iters, derive_seed(seed, m));
    for (std::size_t c = 0; c < centroids; ++c) {
      if (km.centroids.row(c).norm() > 1e-12) continue;
      Eigen::Index far = 0;
      double far_d = -1.0;
      for (Eigen::Index r = 0; r < slice.rows(); ++r) {
        const double dist = (slice.row(r) - km.centroids.row(km.labels[r])).squaredNorm();
        if (dist > far_d) {
          far_d = dist;
          far = r;
        }
      }
      km.centroids.row(c) = slice.row(far);
    }

    double min_norm = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < centroids; ++c) {
      Vec cw = km.centroids.row(c).transpose();
      const double n = cw.norm();
      if (n < min_norm) {
        min_norm = n;
        model.reserved[m] = static_cast<std::uint8_t>(c);
      }
      if (normalize) cw /= n;
      std::copy(cw.data(), cw.data() + bd, model.codebooks.begin() + (m * centroids + c) * model.block_dim);
    }
  }
  fill_tables(model);
  return model;
}

// The M = D limit: one sign per component, codewords {-1, +1}; code 1 is
// non-negative. Zero components map to +1.
inline PQModel make_sign_model(std::size_t dim) {
  require(dim >= 1, Errc::kInvalidArgument, "dimension must be positive");
  PQModel model;
  model.blocks = dim;
  model.block_dim = 1;
  model.centroids = 2;
  model.normalized = true;
  model.codebooks.resize(dim * 2);
  for (std::size_t m = 0; m < dim; ++m) {
    model.codebooks[2 * m] = -1.0;
    model.codebooks[2 * m + 1] = 1.0;
  }
  model.reserved.assign(dim, 1);
  fill_tables(model);
  return model;
}

inline PQCode quantize(const Vec& values, const PQModel& model) {
  require(static_cast<std::size_t>(values.size()) == model.dim(), Errc::kDimMismatch,
          "vector has " + std::to_string(values.size()) + " dims, quantizer expects " + std::to_string(model.dim()));
  const auto bd = static_cast<Eigen::Index>(model.block_dim);
  PQCode code;
  code.codes.resize(model.blocks);
  code.empty = values.isZero(0.0);
  for (std::size_t m = 0; m < model.blocks; ++m) {
    const auto block = values.segment(static_cast<Eigen::Index>(m) * bd, bd);
    if (block.isZero(0.0)) {
      code.codes[m] = model.reserved[m];
      continue;
    }
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < model.centroids; ++i) {
      const double dist = (block - model.codeword(m, i)).squaredNorm();
      if (dist < best_d) {
        best_d = dist;
        best = i;
      }
    }
    code.codes[m] = static_cast<std::uint8_t>(best);
  }
  return code;
}

inline PQCode quantize(const WhitenedDescriptor& wd, const PQModel& model) {
  PQCode code = quantize(wd.values, model);
  code.empty = code.empty || wd.empty;
  return code;
}

// Concatenated subcodewords (unit blocks when normalized).
inline Vec reconstruct(const PQCode& code, const PQModel& model) {
  const auto bd = static_cast<Eigen::Index>(model.block_dim);
  Vec out(static_cast<Eigen::Index>(model.dim()));
  for (std::size_t m = 0; m < model.blocks; ++m)
    out.segment(static_cast<Eigen::Index>(m) * bd, bd) = model.codeword(m, code.codes[m]);
  return out;
}

inline double sdc_similarity(const PQCode& a, const PQCode& b, const PQModel& model) {
  double s = 0.0;
  for (std::size_t m = 0; m < model.blocks; ++m) s += model.table(m, a.codes[m], b.codes[m]);
  return s;
}

inline PQCode wnpq_encode(const ProjectedDescriptor& pd, const PcaModel& pca, const PQModel& model) {
  return quantize(whiten_normalize(pd, pca, model.blocks), model);
}

// ---------------------------------------------------------------------------
// Sign codes and Hamming similarity.

struct SignCode {
  std::vector<std::uint64_t> words;
  std::size_t bits = 0;

  bool operator==(const SignCode&) const = default;
};

inline SignCode sign_binarize(const Vec& values) {
  SignCode code;
  code.bits = static_cast<std::size_t>(values.size());
  code.words.assign((code.bits + 63) / 64, 0);
  for (std::size_t i = 0; i < code.bits; ++i)
    if (values(static_cast<Eigen::Index>(i)) >= 0.0) code.words[i / 64] |= std::uint64_t{1} << (i % 64);
  return code;
}

inline SignCode sign_binarize(const WhitenedDescriptor& wd) { return sign_binarize(wd.values); }

inline std::size_t hamming_distance(const SignCode& a, const SignCode& b) {
  require(a.bits == b.bits, Errc::kDimMismatch, "sign codes differ in length");
  std::size_t d = 0;
  for (std::size_t w = 0; w < a.words.size(); ++w) d += static_cast<std::size_t>(std::popcount(a.words[w] ^ b.words[w]));
  return d;
}

inline double hamming_similarity(const SignCode& a, const SignCode& b) {
  return 1.0 - 2.0 * static_cast<double>(hamming_distance(a, b)) / static_cast<double>(a.bits);
}

// ---------------------------------------------------------------------------
// Per-block covariance summaries.

enum class BlockPipeline { kPlain, kWhitened };

struct VarianceReport {
  std::vector<double> log_det;  // log |Sigma_m|
  std::vector<double> trace;
  double log_det_cv = 0.0;      // population std / |mean|
  double trace_cv = 0.0;
};

inline double coefficient_of_variation(const std::vector<double>& xs) {
  if (xs.empty()) return 0.0;
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double var = 0.0;
  for (double x : xs) var += (x - mean) * (x - mean);
  var /= static_cast<double>(xs.size());
  return std::abs(mean) > 0.0 ? std::sqrt(var) / std::abs(mean) : 0.0;
}

// `samples` holds projected descriptors (one per row). kPlain measures the
// blocks as given; kWhitened measures them after whiten_normalize().
inline VarianceReport subspace_variance_report(const RowMat& samples, const Vec& eigenvalues, std::size_t blocks,
                                               BlockPipeline pipeline) {
  const auto d = static_cast<std::size_t>(samples.cols());
  require(blocks >= 1 && d % blocks == 0, Errc::kInvalidArgument, "dimension not divisible by M");
  require(samples.rows() >= 2, Errc::kInvalidArgument, "need at least two samples");
  RowMat data = samples;
  if (pipeline == BlockPipeline::kWhitened) {
    for (Eigen::Index r = 0; r < data.rows(); ++r) {
      ProjectedDescriptor pd{samples.row(r).transpose(), false};
      data.row(r) = whiten_normalize(pd, eigenvalues, blocks).values.transpose();
    }
  }
  const auto bd = static_cast<Eigen::Index>(d / blocks);
  VarianceReport rep;
  for (std::size_t m = 0; m < blocks; ++m) {
    const Mat block = data.middleCols(static_cast<Eigen::Index>(m) * bd, bd);
    const Mat centered = block.rowwise() - block.colwise().mean();
    const Mat cov = centered.transpose() * centered / static_cast<double>(block.rows() - 1);
    Eigen::SelfAdjointEigenSolver<Mat> eig(cov, Eigen::EigenvaluesOnly);
    double log_det = 0.0;
    for (Eigen::Index i = 0; i < bd; ++i) log_det += std::log(std::max(eig.eigenvalues()(i), 1e-300));
    rep.log_det.push_back(log_det);
    rep.trace.push_back(cov.trace());
  }
  rep.log_det_cv = coefficient_of_variation(rep.log_det);
  rep.trace_cv = coefficient_of_variation(rep.trace);
  return rep;
}

// ---------------------------------------------------------------------------

inline constexpr std::string_view kPqMagic = "VPQM";
inline constexpr std::uint16_t kPqVersion = 1;

// Layout: header, subcodebooks f32, tables f32, then the M reserved codes.
inline void save_pq(const PQModel& model, const std::filesystem::path& path) {
  io::ByteWriter w;
  w.put_bytes(kPqMagic);
  w.put<std::uint16_t>(kPqVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(model.blocks));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(model.block_dim));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(model.centroids));
  w.put<std::uint8_t>(model.normalized ? 1 : 0);
  for (double v : model.codebooks) w.put<float>(static_cast<float>(v));
  for (double v : model.tables) w.put<float>(static_cast<float>(v));
  for (auto c : model.reserved) w.put<std::uint8_t>(c);
  io::write_file(path, w.bytes());
}

inline PQModel load_pq(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  io::ByteReader r(bytes);
  r.expect_magic(kPqMagic);
  io::check_version(r.get<std::uint16_t>(), kPqVersion, "PQ model");
  PQModel model;
  model.blocks = r.get<std::uint32_t>();
  model.block_dim = r.get<std::uint32_t>();
  model.centroids = r.get<std::uint32_t>();
  model.normalized = r.get<std::uint8_t>() != 0;
  require(model.blocks >= 1 && model.block_dim >= 1 && model.centroids >= 1 && model.centroids <= 256,
          Errc::kInvalidArgument, "invalid PQ header");
  const std::uint64_t nc = std::uint64_t{model.blocks} * model.centroids * model.block_dim;
  const std::uint64_t nt = std::uint64_t{model.blocks} * model.centroids * model.centroids;
  require(r.remaining() == (nc + nt) * 4 + model.blocks, Errc::kTruncated, "PQ payload size mismatch");
  model.codebooks.resize(nc);
  for (auto& v : model.codebooks) v = r.get<float>();
  model.tables.resize(nt);
  for (auto& v : model.tables) v = r.get<float>();
  model.reserved.resize(model.blocks);
  for (auto& c : model.reserved) {
    c = r.get<std::uint8_t>();
    require(c < model.centroids, Errc::kInvalidArgument, "reserved code out of range");
  }
  return model;
}

}  // namespace veroi
