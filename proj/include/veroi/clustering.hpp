#pragma once

#include "veroi/binary_io.hpp"
#include "veroi/common.hpp"
#include "veroi/features.hpp"

#include <algorithm>
#include <cassert>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

namespace veroi {

// Index of the nearest row of `centroids` by squared Euclidean distance;
// ties go to the lowest index.
template <typename Derived>
std::size_t nearest_row(const RowMat& centroids, const Eigen::MatrixBase<Derived>& x,
                        double* best_dist = nullptr) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (Eigen::Index k = 0; k < centroids.rows(); ++k) {
    const double d = (centroids.row(k) - x.transpose()).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = static_cast<std::size_t>(k);
    }
  }
  if (best_dist) *best_dist = best_d;
  return best;
}

struct KMeansResult {
  RowMat centroids;
  std::vector<std::uint32_t> labels;
  std::size_t iterations = 0;
  std::vector<double> objective;  // sum of squared distances after each assignment
};

namespace detail {

inline RowMat kmeanspp_init(const RowMat& points, std::size_t k, Rng& rng) {
  const auto n = static_cast<std::size_t>(points.rows());
  RowMat centroids(k, points.cols());
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  std::vector<bool> chosen(n, false);
  std::size_t pick = uniform_index(rng, n);
  for (std::size_t c = 0; c < k; ++c) {
    centroids.row(c) = points.row(pick);
    chosen[pick] = true;
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], (points.row(i) - centroids.row(c)).squaredNorm());
      total += d2[i];
    }
    if (c + 1 == k) break;
    if (total > 0.0) {
      double target = uniform01(rng) * total;
      pick = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        target -= d2[i];
        if (target < 0.0 && d2[i] > 0.0) {
          pick = i;
          break;
        }
      }
      while (d2[pick] == 0.0 && pick > 0) --pick;
    } else {
      // Fewer distinct points than clusters: take the next unused row.
      pick = static_cast<std::size_t>(std::find(chosen.begin(), chosen.end(), false) - chosen.begin());
      if (pick == n) pick = 0;
    }
  }
  return centroids;
}

}  // namespace detail

// Lloyd's algorithm from a seeded k-means++ start. Stops after `max_iters`
// updates or when assignments no longer change. An empty cluster is reseeded
// at the point farthest from its current centroid (taken from a cluster that
// keeps at least one member).
inline KMeansResult kmeans_full(const RowMat& points, std::size_t k, std::size_t max_iters,
                                std::uint64_t seed) {
  require(k >= 1, Errc::kInvalidArgument, "k-means needs K >= 1");
  require(static_cast<std::size_t>(points.rows()) >= k, Errc::kInvalidArgument,
          "k-means needs at least K rows (" + std::to_string(points.rows()) + " < " + std::to_string(k) + ")");
  const auto n = static_cast<std::size_t>(points.rows());
  Rng rng(seed);
  KMeansResult res;
  res.centroids = detail::kmeanspp_init(points, k, rng);
  res.labels.assign(n, 0);
  std::vector<double> dist(n);

  auto assign_all = [&](std::vector<std::uint32_t>& labels) {
    double obj = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      labels[i] = static_cast<std::uint32_t>(nearest_row(res.centroids, points.row(i).transpose(), &dist[i]));
      obj += dist[i];
    }
    return obj;
  };

  auto update = [&] {
    std::vector<std::size_t> counts(k, 0);
    res.centroids.setZero();
    for (std::size_t i = 0; i < n; ++i) {
      res.centroids.row(res.labels[i]) += points.row(i);
      ++counts[res.labels[i]];
    }
    for (std::size_t c = 0; c < k; ++c)
      if (counts[c] > 0) res.centroids.row(c) /= static_cast<double>(counts[c]);
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] > 0) continue;
      std::size_t far = n;
      double far_d = -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (counts[res.labels[i]] <= 1) continue;
        const double d = (points.row(i) - res.centroids.row(res.labels[i])).squaredNorm();
        if (d > far_d) {
          far_d = d;
          far = i;
        }
      }
      if (far == n || far_d <= 0.0) continue;
      --counts[res.labels[far]];
      res.labels[far] = static_cast<std::uint32_t>(c);
      counts[c] = 1;
      res.centroids.row(c) = points.row(far);
    }
  };

  res.objective.push_back(assign_all(res.labels));
  std::vector<std::uint32_t> next(n);
  while (res.iterations < max_iters) {
    update();
    ++res.iterations;
    const double obj = assign_all(next);
    assert(obj <= res.objective.back() * (1.0 + 1e-12) + 1e-9 && "k-means objective increased");
    res.objective.push_back(obj);
    if (next == res.labels) break;
    res.labels.swap(next);
  }
  return res;
}

struct Vocabulary {
  RowMat centroids;  // K x descriptor_dim

  std::size_t size() const { return static_cast<std::size_t>(centroids.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(centroids.cols()); }
};

inline Vocabulary kmeans(const RowMat& points, std::size_t k, std::size_t max_iters, std::uint64_t seed) {
  return {kmeans_full(points, k, max_iters, seed).centroids};
}

inline std::size_t assign(std::span<const float> x, const Vocabulary& vocab) {
  require(x.size() == vocab.dim(), Errc::kDimMismatch,
          "descriptor has " + std::to_string(x.size()) + " dims, vocabulary has " + std::to_string(vocab.dim()));
  const Eigen::Map<const Eigen::VectorXf> xf(x.data(), static_cast<Eigen::Index>(x.size()));
  return nearest_row(vocab.centroids, xf.cast<double>());
}

inline std::size_t assign(const Vec& x, const Vocabulary& vocab) {
  require(static_cast<std::size_t>(x.size()) == vocab.dim(), Errc::kDimMismatch, "descriptor dimension mismatch");
  return nearest_row(vocab.centroids, x);
}

inline constexpr std::string_view kVocabMagic = "VVOC";
inline constexpr std::uint16_t kVocabVersion = 1;

inline void save_vocabulary(const Vocabulary& vocab, const std::filesystem::path& path) {
  io::ByteWriter w;
  w.put_bytes(kVocabMagic);
  w.put<std::uint16_t>(kVocabVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(vocab.size()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(vocab.dim()));
  std::vector<float> data(vocab.centroids.size());
  Eigen::Map<Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      data.data(), vocab.centroids.rows(), vocab.centroids.cols()) = vocab.centroids.cast<float>();
  w.put_f32(data);
  io::write_file(path, w.bytes());
}

inline Vocabulary load_vocabulary(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  io::ByteReader r(bytes);
  r.expect_magic(kVocabMagic);
  io::check_version(r.get<std::uint16_t>(), kVocabVersion, "vocabulary");
  const auto k = r.get<std::uint32_t>();
  const auto dim = r.get<std::uint32_t>();
  require(k >= 1 && dim >= 1, Errc::kInvalidArgument, "empty vocabulary");
  require(r.remaining() == std::uint64_t{k} * dim * 4, Errc::kTruncated, "vocabulary payload size mismatch");
  std::vector<float> data(std::size_t{k} * dim);
  r.get_f32(data);
  Vocabulary v;
  v.centroids = Eigen::Map<Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
                    data.data(), k, dim).cast<double>();
  require(v.centroids.allFinite(), Errc::kInvalidArgument, "vocabulary contains non-finite values");
  return v;
}

// ---------------------------------------------------------------------------
// Spatial partition trees.

// Complete V-ary tree with L levels in breadth-first order: node i has
// children V*i+1 .. V*i+V.
struct TreeShape {
  std::uint32_t levels = 1;
  std::uint32_t branching = 2;

  std::size_t level_begin(std::uint32_t level) const {
    std::size_t begin = 0, width = 1;
    for (std::uint32_t l = 0; l < level; ++l) {
      begin += width;
      width *= branching;
    }
    return begin;
  }
  std::size_t level_size(std::uint32_t level) const {
    std::size_t width = 1;
    for (std::uint32_t l = 0; l < level; ++l) width *= branching;
    return width;
  }
  std::size_t node_count() const { return level_begin(levels); }
  std::size_t leaf_count() const { return level_size(levels - 1); }
  std::size_t first_child(std::size_t node) const { return node * branching + 1; }
  std::size_t parent(std::size_t node) const { return (node - 1) / branching; }
  std::uint32_t level_of(std::size_t node) const {
    std::uint32_t l = 0;
    while (level_begin(l + 1) <= node) ++l;
    return l;
  }
  bool operator==(const TreeShape&) const = default;
};

inline void validate(const TreeShape& s) {
  require(s.levels >= 1, Errc::kInvalidArgument, "tree needs at least one level");
  require(s.branching >= 2, Errc::kInvalidArgument, "branching factor must be >= 2");
}

struct PartitionNode {
  bool present = false;
  double cx = 0.0;
  double cy = 0.0;
  std::vector<std::uint32_t> members;  // ascending keypoint indices
};

struct PartitionTree {
  TreeShape shape;
  std::vector<PartitionNode> nodes;  // shape.node_count() slots

  std::size_t present_count() const {
    return static_cast<std::size_t>(std::count_if(nodes.begin(), nodes.end(), [](const auto& n) { return n.present; }));
  }
  bool has_children(std::size_t node) const {
    const auto level = shape.level_of(node);
    if (level + 1 >= shape.levels) return false;
    for (std::size_t c = 0; c < shape.branching; ++c)
      if (nodes[shape.first_child(node) + c].present) return true;
    return false;
  }
};

inline constexpr std::size_t kDefaultKMeansIters = 25;

// Hierarchical spatial K-means over keypoint locations. A node with fewer
// than V members is not split; its descendant slots stay absent. A child that
// ends up with no members is also absent.
inline PartitionTree spatial_hkmeans(const FeatureSet& fs, std::uint32_t levels, std::uint32_t branching,
                                     std::uint64_t seed, std::size_t max_iters = kDefaultKMeansIters) {
  PartitionTree tree;
  tree.shape = {levels, branching};
  validate(tree.shape);
  tree.nodes.resize(tree.shape.node_count());

  auto& root = tree.nodes[0];
  root.present = true;
  root.members.resize(fs.size());
  std::iota(root.members.begin(), root.members.end(), 0u);
  for (const auto& kp : fs.keypoints) {
    root.cx += kp.x;
    root.cy += kp.y;
  }
  if (fs.size() > 0) {
    root.cx /= static_cast<double>(fs.size());
    root.cy /= static_cast<double>(fs.size());
  }

  const std::size_t splittable_end = tree.shape.level_begin(levels - 1);
  for (std::size_t node = 0; node < splittable_end; ++node) {
    const auto& parent = tree.nodes[node];
    if (!parent.present || parent.members.size() < branching) continue;
    RowMat coords(parent.members.size(), 2);
    for (std::size_t i = 0; i < parent.members.size(); ++i) {
      coords(i, 0) = fs.keypoints[parent.members[i]].x;
      coords(i, 1) = fs.keypoints[parent.members[i]].y;
    }
    const auto km = kmeans_full(coords, branching, max_iters, derive_seed(seed, node));
    const std::size_t first = tree.shape.first_child(node);
    std::vector<std::vector<std::uint32_t>> groups(branching);
    for (std::size_t i = 0; i < parent.members.size(); ++i) groups[km.labels[i]].push_back(parent.members[i]);
    for (std::size_t c = 0; c < branching; ++c) {
      auto& child = tree.nodes[first + c];
      child.members = std::move(groups[c]);
      child.present = !child.members.empty();
      child.cx = km.centroids(c, 0);
      child.cy = km.centroids(c, 1);
    }
  }
  return tree;
}

// ---------------------------------------------------------------------------
// Rectangular grid partition: level l is an (l+1) x (l+1) tiling.

// Closed form of sum_{l=0}^{L-1} (l+1)^2, written with the L-1 substitution.
inline std::size_t grid_block_count(std::uint32_t levels) {
  const std::size_t top = levels - 1;
  return (top + 1) * (top + 2) * (2 * top + 3) / 6;
}

inline std::size_t grid_level_begin(std::uint32_t level) {
  return level == 0 ? 0 : grid_block_count(level);
}

struct GridPartition {
  std::uint32_t levels = 1;
  std::vector<std::vector<std::uint32_t>> blocks;  // level-then-raster order
};

// Blocks split the declared image rectangle evenly; a keypoint on a block
// boundary belongs to the higher-index block. Undeclared dimensions fall back
// to just past the largest coordinate.
inline GridPartition grid_partition(const FeatureSet& fs, std::uint32_t levels) {
  require(levels >= 1, Errc::kInvalidArgument, "grid needs at least one level");
  double w = fs.width, h = fs.height;
  if (w <= 0.0 || h <= 0.0) {
    double mx = 0.0, my = 0.0;
    for (const auto& kp : fs.keypoints) {
      mx = std::max(mx, static_cast<double>(kp.x));
      my = std::max(my, static_cast<double>(kp.y));
    }
    if (w <= 0.0) w = mx + 1.0;
    if (h <= 0.0) h = my + 1.0;
  }
  GridPartition grid;
  grid.levels = levels;
  grid.blocks.resize(grid_block_count(levels));
  for (std::uint32_t l = 0; l < levels; ++l) {
    const std::size_t side = l + 1;
    const std::size_t begin = grid_level_begin(l);
    for (std::uint32_t i = 0; i < fs.size(); ++i) {
      const auto& kp = fs.keypoints[i];
      const auto col = std::min(side - 1, static_cast<std::size_t>(kp.x * static_cast<double>(side) / w));
      const auto row = std::min(side - 1, static_cast<std::size_t>(kp.y * static_cast<double>(side) / h));
      grid.blocks[begin + row * side + col].push_back(i);
    }
  }
  return grid;
}

}  // namespace veroi
