#pragma once

#include "veroi/clustering.hpp"
#include "veroi/common.hpp"
#include "veroi/encoder.hpp"
#include "veroi/features.hpp"

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

namespace veroi {

struct CellDescriptor {
  Vec descriptor;  // unit norm, or zeros when `empty`
  std::uint32_t point_count = 0;
  bool empty = true;
};

// Cell descriptors of one image in breadth-first tree order. Every slot of
// the complete tree is stored; absent slots are flagged and empty.
struct VoronoiIndex {
  std::string image_id;
  TreeShape shape;
  std::vector<bool> present;
  std::vector<CellDescriptor> cells;

  std::size_t present_count() const {
    return static_cast<std::size_t>(std::count(present.begin(), present.end(), true));
  }
};

// Grid-partition cells in level-then-raster order.
struct MultiIndex {
  std::string image_id;
  std::uint32_t levels = 1;
  std::vector<CellDescriptor> cells;
};

struct EncodeOptions {
  // Signed square root before projection. Off gives the purely linear
  // pipeline in which level projection is exact.
  bool ssr = true;
};

inline CellDescriptor encode_cell(const FeatureSet& fs, const Vocabulary& vocab, const PcaModel& pca,
                                  std::span<const std::uint32_t> members,
                                  std::span<const std::uint32_t> words, const EncodeOptions& opt) {
  RawDescriptor raw = vlad_encode(fs, vocab, members, words);
  if (opt.ssr) raw = ssr_normalize(raw);
  const auto pd = project(raw, pca);
  return {pd.values, static_cast<std::uint32_t>(members.size()), pd.empty};
}

inline void check_models(const Vocabulary& vocab, const PcaModel& pca) {
  require(vocab.size() * vocab.dim() == pca.input_dim(), Errc::kDimMismatch,
          "PCA input dimension " + std::to_string(pca.input_dim()) + " does not match vocabulary K x dim = " +
              std::to_string(vocab.size() * vocab.dim()));
}

inline VoronoiIndex ve_encode(const FeatureSet& fs, const Vocabulary& vocab, const PartitionTree& tree,
                              const PcaModel& pca, const EncodeOptions& opt = {}) {
  check_models(vocab, pca);
  require(!tree.nodes.empty() && tree.nodes[0].members.size() == fs.size(), Errc::kInvalidArgument,
          "partition tree was not built from this feature set");
  const auto words = assign_all(fs, vocab);
  VoronoiIndex index;
  index.image_id = fs.image_id;
  index.shape = tree.shape;
  index.present.resize(tree.nodes.size());
  index.cells.resize(tree.nodes.size());
  for (std::size_t i = 0; i < tree.nodes.size(); ++i) {
    const auto& node = tree.nodes[i];
    index.present[i] = node.present;
    if (node.present) {
      index.cells[i] = encode_cell(fs, vocab, pca, node.members, words, opt);
    } else {
      index.cells[i].descriptor = Vec::Zero(static_cast<Eigen::Index>(pca.output_dim()));
    }
  }
  return index;
}

inline MultiIndex multi_encode(const FeatureSet& fs, const Vocabulary& vocab, const PcaModel& pca,
                               std::uint32_t levels, const EncodeOptions& opt = {}) {
  check_models(vocab, pca);
  const auto grid = grid_partition(fs, levels);
  const auto words = assign_all(fs, vocab);
  MultiIndex index;
  index.image_id = fs.image_id;
  index.levels = levels;
  index.cells.reserve(grid.blocks.size());
  for (const auto& block : grid.blocks) index.cells.push_back(encode_cell(fs, vocab, pca, block, words, opt));
  return index;
}

// ---------------------------------------------------------------------------
// Level projection: only terminal cells (present cells without present
// children, normally the last level) keep a projected vector; every other
// cell is rebuilt as the sum of its terminal descendants.
//
// Stored vectors are projected but neither centered nor normalized:
// R^T x. A node's vector is sum(R^T x_i) - R^T mean, which equals the
// directly projected node exactly when no SSR is applied.
struct LeafSet {
  std::string image_id;
  TreeShape shape;
  std::vector<bool> present;
  std::vector<std::uint32_t> counts;
  std::vector<Vec> vectors;  // non-empty only for terminal slots
  Vec mean_offset;           // R^T mean, shared by every image of one model
};

inline bool is_terminal(const TreeShape& shape, const std::vector<bool>& present, std::size_t node) {
  if (!present[node]) return false;
  if (shape.level_of(node) + 1 >= shape.levels) return true;
  for (std::size_t c = 0; c < shape.branching; ++c)
    if (present[shape.first_child(node) + c]) return false;
  return true;
}

inline LeafSet make_leaf_set(const FeatureSet& fs, const Vocabulary& vocab, const PartitionTree& tree,
                             const PcaModel& pca, const EncodeOptions& opt = {}) {
  check_models(vocab, pca);
  const auto words = assign_all(fs, vocab);
  LeafSet leaves;
  leaves.image_id = fs.image_id;
  leaves.shape = tree.shape;
  leaves.present.resize(tree.nodes.size());
  leaves.counts.resize(tree.nodes.size());
  leaves.vectors.resize(tree.nodes.size());
  leaves.mean_offset = pca.projection.transpose() * pca.mean;
  for (std::size_t i = 0; i < tree.nodes.size(); ++i) {
    leaves.present[i] = tree.nodes[i].present;
    leaves.counts[i] = static_cast<std::uint32_t>(tree.nodes[i].members.size());
  }
  for (std::size_t i = 0; i < tree.nodes.size(); ++i) {
    if (!is_terminal(tree.shape, leaves.present, i)) continue;
    RawDescriptor raw = vlad_encode(fs, vocab, tree.nodes[i].members, words);
    if (opt.ssr) raw = ssr_normalize(raw);
    leaves.vectors[i] = pca.projection.transpose() * raw.values;
  }
  return leaves;
}

inline VoronoiIndex level_project(const LeafSet& leaves) {
  const auto n = leaves.shape.node_count();
  require(leaves.present.size() == n && leaves.vectors.size() == n && leaves.counts.size() == n,
          Errc::kDimMismatch, "leaf set does not match its tree shape");
  Eigen::Index dim = leaves.mean_offset.size();
  for (const auto& v : leaves.vectors)
    if (v.size() > 0) dim = v.size();
  const Vec offset = leaves.mean_offset.size() > 0 ? leaves.mean_offset : Vec::Zero(dim);
  require(offset.size() == dim, Errc::kDimMismatch, "mean offset dimension mismatch");

  std::vector<Vec> sums(n, Vec::Zero(dim));
  for (std::size_t i = n; i-- > 0;) {
    if (!leaves.present[i]) continue;
    if (is_terminal(leaves.shape, leaves.present, i)) {
      require(leaves.vectors[i].size() == dim, Errc::kDimMismatch,
              "terminal cell " + std::to_string(i) + " has no stored vector");
      sums[i] = leaves.vectors[i];
    } else {
      for (std::size_t c = 0; c < leaves.shape.branching; ++c) {
        const auto child = leaves.shape.first_child(i) + c;
        if (leaves.present[child]) sums[i] += sums[child];
      }
    }
  }

  VoronoiIndex index;
  index.image_id = leaves.image_id;
  index.shape = leaves.shape;
  index.present = leaves.present;
  index.cells.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& cell = index.cells[i];
    cell.point_count = leaves.counts[i];
    cell.descriptor = leaves.present[i] ? Vec(sums[i] - offset) : Vec::Zero(dim);
    cell.empty = !leaves.present[i] || cell.point_count == 0 || !normalize_or_zero(cell.descriptor);
  }
  return index;
}

// ---------------------------------------------------------------------------

struct StorageReport {
  std::size_t cells = 0;
  std::size_t leaf_cells = 0;
  std::size_t full_bytes = 0;       // every cell, float32
  std::size_t leaf_only_bytes = 0;  // last level only, float32
  std::size_t quantized_bytes = 0;  // every cell, B bits each
  std::size_t count_bytes = 0;      // u32 point count per cell
  std::size_t table_bytes = 0;      // Z' x Z' x M float32 lookup tables, dataset-wide
};

// Per-image storage for a complete (L, V) tree with D-dimensional cells and
// product codes of `code_bits` bits.
inline StorageReport storage_report(const TreeShape& shape, std::size_t dim, std::size_t code_bits = 0,
                                    std::size_t pq_blocks = 0, std::size_t pq_centroids = 0) {
  StorageReport r;
  r.cells = shape.node_count();
  r.leaf_cells = shape.leaf_count();
  r.full_bytes = r.cells * dim * sizeof(float);
  r.leaf_only_bytes = r.leaf_cells * dim * sizeof(float);
  r.quantized_bytes = r.cells * code_bits / 8;
  r.count_bytes = r.cells * sizeof(std::uint32_t);
  r.table_bytes = pq_centroids * pq_centroids * pq_blocks * sizeof(float);
  return r;
}

}  // namespace veroi
