#pragma once

#include "veroi/clustering.hpp"
#include "veroi/common.hpp"
#include "veroi/encoder.hpp"
#include "veroi/pq.hpp"
#include "veroi/voronoi.hpp"

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <limits>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace veroi {

inline constexpr double kNoMatch = -std::numeric_limits<double>::infinity();

struct QueryDescriptor {
  Vec descriptor;
  bool empty = true;
  std::uint32_t point_count = 0;
};

struct QuantizedQuery {
  PQCode code;
  std::uint32_t point_count = 0;
};

// Whole-feature-set query descriptor (SSR -> project -> normalize).
inline QueryDescriptor make_query(const FeatureSet& fs, const Vocabulary& vocab, const PcaModel& pca,
                                  const EncodeOptions& opt = {}) {
  check_models(vocab, pca);
  std::vector<std::uint32_t> all(fs.size());
  std::iota(all.begin(), all.end(), 0u);
  const auto cell = encode_cell(fs, vocab, pca, all, assign_all(fs, vocab), opt);
  return {cell.descriptor, cell.empty, cell.point_count};
}

inline QuantizedQuery quantize_query(const QueryDescriptor& q, const PcaModel& pca, const PQModel& model) {
  ProjectedDescriptor pd{q.descriptor, q.empty};
  return {wnpq_encode(pd, pca, model), q.point_count};
}

struct LevelBest {
  double score = kNoMatch;   // S*_l
  std::size_t cell = 0;      // breadth-first slot of the best cell
  std::int64_t diff = 0;     // v_l = query points - cell points
  double weight = 0.0;       // L1-normalized weight
};

struct SearchResult {
  std::string image_id;
  double score = kNoMatch;
  std::uint32_t l_ph1 = 0;
  std::size_t cells_accessed = 0;
  std::size_t table_reads = 0;
  double weight_scale = 0.0;  // C
  std::vector<LevelBest> per_level;
};

inline double whole_image_score(const QueryDescriptor& q, const CellDescriptor& cell) {
  if (q.empty || cell.empty) return kNoMatch;
  return q.descriptor.dot(cell.descriptor);
}

// Order of magnitude of max(|v|, 1), computed on integers.
inline int order_of_magnitude(std::int64_t v) {
  std::uint64_t mag = static_cast<std::uint64_t>(v < 0 ? -v : v);
  if (mag < 1) mag = 1;
  int order = 0;
  while (mag >= 10) {
    mag /= 10;
    ++order;
  }
  return order;
}

// C = 10^m with m the most frequent order of magnitude among the |v_l|;
// ties go to the smallest m.
inline double modal_weight_scale(std::span<const LevelBest> levels) {
  std::map<int, int> freq;
  for (const auto& lb : levels) ++freq[order_of_magnitude(lb.diff)];
  int best_order = 0, best_count = -1;
  for (const auto& [order, count] : freq)
    if (count > best_count) {
      best_order = order;
      best_count = count;
    }
  return std::pow(10.0, best_order);
}

// Fills the normalized weights of `levels` and returns the weighted score.
inline double aggregate_levels(std::vector<LevelBest>& levels, double* scale_out = nullptr,
                               std::optional<double> scale_override = std::nullopt) {
  if (levels.empty()) return kNoMatch;
  const double c = scale_override ? *scale_override : modal_weight_scale(levels);
  if (scale_out) *scale_out = c;
  double total = 0.0;
  for (auto& lb : levels) {
    const double mag = static_cast<double>(std::max<std::int64_t>(std::llabs(lb.diff), 1));
    lb.weight = c / mag;
    total += lb.weight;
  }
  double score = 0.0;
  for (auto& lb : levels) {
    lb.weight /= total;
    score += lb.weight * lb.score;
  }
  return score;
}

struct FastSearchOptions {
  // Replaces the modal C; the score does not depend on it.
  std::optional<double> weight_scale;
};

// Two-phase adaptive tree search over any per-cell scorer.
//   usable(i) -> bool        cell i exists and is non-empty
//   count(i)  -> points      interest points in cell i
//   score(i)  -> similarity  one cell access
// Phase 1 descends from the root into the best child while some child scores
// strictly higher than its parent; Phase 2 combines the best score of every
// visited level with weights C / max(|v_l|, 1), L1-normalized.
template <typename Usable, typename Count, typename Score>
SearchResult fast_ve_core(const TreeShape& shape, std::uint32_t query_points, Usable&& usable, Count&& count,
                          Score&& score, const FastSearchOptions& opt = {}) {
  SearchResult res;
  if (!usable(std::size_t{0})) return res;
  std::size_t cur = 0;
  double cur_score = score(cur);
  res.cells_accessed = 1;
  res.per_level.push_back({cur_score, cur, 0, 0.0});
  for (std::uint32_t level = 1; level < shape.levels; ++level) {
    const std::size_t first = shape.first_child(cur);
    std::optional<std::size_t> best;
    double best_score = kNoMatch;
    for (std::size_t c = 0; c < shape.branching; ++c) {
      const std::size_t cell = first + c;
      if (!usable(cell)) continue;
      const double s = score(cell);
      ++res.cells_accessed;
      if (!best || s > best_score) {
        best = cell;
        best_score = s;
      }
    }
    if (!best || !(best_score > cur_score)) break;
    cur = *best;
    cur_score = best_score;
    res.per_level.push_back({cur_score, cur, 0, 0.0});
  }
  res.l_ph1 = static_cast<std::uint32_t>(res.per_level.size() - 1);
  for (auto& lb : res.per_level)
    lb.diff = static_cast<std::int64_t>(query_points) - static_cast<std::int64_t>(count(lb.cell));
  res.score = aggregate_levels(res.per_level, &res.weight_scale, opt.weight_scale);
  return res;
}

inline SearchResult fast_ve_search(const QueryDescriptor& q, const VoronoiIndex& index,
                                   const FastSearchOptions& opt = {}) {
  auto res = fast_ve_core(
      index.shape, q.point_count,
      [&](std::size_t i) { return !q.empty && index.present[i] && !index.cells[i].empty; },
      [&](std::size_t i) { return index.cells[i].point_count; },
      [&](std::size_t i) { return whole_image_score(q, index.cells[i]); }, opt);
  res.image_id = index.image_id;
  return res;
}

// Exhaustive maximum over every stored cell.
template <typename Cells>
SearchResult global_max_over(const QueryDescriptor& q, const Cells& cells, std::size_t accessed) {
  SearchResult res;
  res.cells_accessed = accessed;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const double s = whole_image_score(q, cells[i]);
    if (s > res.score) {
      res.score = s;
      res.per_level.assign(1, {s, i, 0, 1.0});
    }
  }
  return res;
}

inline SearchResult global_max_score(const QueryDescriptor& q, const VoronoiIndex& index) {
  auto res = global_max_over(q, index.cells, index.present_count());
  res.image_id = index.image_id;
  if (!res.per_level.empty()) res.l_ph1 = index.shape.level_of(res.per_level[0].cell);
  return res;
}

inline SearchResult global_max_score(const QueryDescriptor& q, const MultiIndex& index) {
  auto res = global_max_over(q, index.cells, index.cells.size());
  res.image_id = index.image_id;
  if (!res.per_level.empty()) {
    std::uint32_t level = 0;
    while (level + 1 < index.levels && grid_level_begin(level + 1) <= res.per_level[0].cell) ++level;
    res.l_ph1 = level;
  }
  return res;
}

// Whole-image baseline: the root cell only.
inline SearchResult root_score(const QueryDescriptor& q, const VoronoiIndex& index) {
  SearchResult res;
  res.image_id = index.image_id;
  res.cells_accessed = 1;
  res.score = whole_image_score(q, index.cells[0]);
  return res;
}

// ---------------------------------------------------------------------------
// Quantized indexes.

struct QuantizedIndex {
  std::string image_id;
  TreeShape shape;
  std::vector<bool> present;
  std::vector<std::uint32_t> counts;
  std::vector<PQCode> codes;
};

inline QuantizedIndex quantize_index(const VoronoiIndex& index, const PcaModel& pca, const PQModel& model) {
  QuantizedIndex out;
  out.image_id = index.image_id;
  out.shape = index.shape;
  out.present = index.present;
  for (const auto& cell : index.cells) {
    out.counts.push_back(cell.point_count);
    out.codes.push_back(wnpq_encode({cell.descriptor, cell.empty}, pca, model));
  }
  return out;
}

inline SearchResult quantized_fast_ve_search(const QuantizedQuery& q, const QuantizedIndex& index,
                                             const PQModel& model, const FastSearchOptions& opt = {}) {
  auto res = fast_ve_core(
      index.shape, q.point_count,
      [&](std::size_t i) { return !q.code.empty && index.present[i] && !index.codes[i].empty; },
      [&](std::size_t i) { return index.counts[i]; },
      [&](std::size_t i) { return sdc_similarity(q.code, index.codes[i], model); }, opt);
  res.image_id = index.image_id;
  res.table_reads = model.blocks * res.cells_accessed;
  return res;
}

inline SearchResult quantized_global_max_score(const QuantizedQuery& q, const QuantizedIndex& index,
                                               const PQModel& model) {
  SearchResult res;
  res.image_id = index.image_id;
  for (std::size_t i = 0; i < index.codes.size(); ++i) {
    if (!index.present[i]) continue;
    ++res.cells_accessed;
    if (q.code.empty || index.codes[i].empty) continue;
    const double s = sdc_similarity(q.code, index.codes[i], model);
    if (s > res.score) {
      res.score = s;
      res.l_ph1 = index.shape.level_of(i);
    }
  }
  res.table_reads = model.blocks * res.cells_accessed;
  return res;
}

// Sign-code index for the M = D limit; similarity via Hamming distance, no
// table reads.
struct SignIndex {
  std::string image_id;
  TreeShape shape;
  std::vector<bool> present;
  std::vector<std::uint32_t> counts;
  std::vector<bool> empty;
  std::vector<SignCode> codes;
};

inline SignCode sign_code_of(const PQCode& code) {
  SignCode out;
  out.bits = code.codes.size();
  out.words.assign((out.bits + 63) / 64, 0);
  for (std::size_t i = 0; i < out.bits; ++i)
    if (code.codes[i] == 1) out.words[i / 64] |= std::uint64_t{1} << (i % 64);
  return out;
}

inline SignIndex to_sign_index(const QuantizedIndex& index) {
  SignIndex out{index.image_id, index.shape, index.present, index.counts, {}, {}};
  for (const auto& code : index.codes) {
    out.empty.push_back(code.empty);
    out.codes.push_back(sign_code_of(code));
  }
  return out;
}

inline SearchResult hamming_fast_ve_search(const SignCode& q, std::uint32_t query_points, bool query_empty,
                                           const SignIndex& index, const FastSearchOptions& opt = {}) {
  auto res = fast_ve_core(
      index.shape, query_points,
      [&](std::size_t i) { return !query_empty && index.present[i] && !index.empty[i]; },
      [&](std::size_t i) { return index.counts[i]; },
      [&](std::size_t i) { return hamming_similarity(q, index.codes[i]); }, opt);
  res.image_id = index.image_id;
  return res;
}

// Parent-cell score approximated from its leaf codes: the mean of the leaf
// similarities. `reads` (optional) accumulates table accesses.
inline double quantized_level_projection_score(const PQCode& q, std::span<const PQCode> leaves,
                                               const PQModel& model, std::size_t* reads = nullptr) {
  if (leaves.empty()) return kNoMatch;
  double sum = 0.0;
  for (const auto& leaf : leaves) sum += sdc_similarity(q, leaf, model);
  if (reads) *reads += model.blocks * leaves.size();
  return sum / static_cast<double>(leaves.size());
}

// Fast search over an index that keeps codes for terminal cells only. A
// non-terminal cell scores as the mean of its present children, applied
// recursively down to the stored leaves.
inline SearchResult quantized_leaf_fast_ve_search(const QuantizedQuery& q, const QuantizedIndex& index,
                                                  const PQModel& model, const FastSearchOptions& opt = {}) {
  std::vector<std::optional<double>> memo(index.codes.size());
  std::size_t reads = 0;
  auto usable = [&](std::size_t i) { return !q.code.empty && index.present[i] && index.counts[i] > 0; };
  auto score = [&](auto&& self, std::size_t i) -> double {
    if (memo[i]) return *memo[i];
    double s = kNoMatch;
    if (is_terminal(index.shape, index.present, i)) {
      if (!index.codes[i].empty) {
        s = sdc_similarity(q.code, index.codes[i], model);
        reads += model.blocks;
      }
    } else {
      double sum = 0.0;
      std::size_t n = 0;
      for (std::size_t c = 0; c < index.shape.branching; ++c) {
        const auto child = index.shape.first_child(i) + c;
        if (!usable(child)) continue;
        const double cs = self(self, child);
        if (cs == kNoMatch) continue;
        sum += cs;
        ++n;
      }
      if (n > 0) s = sum / static_cast<double>(n);
    }
    memo[i] = s;
    return s;
  };
  auto res = fast_ve_core(
      index.shape, q.point_count, usable, [&](std::size_t i) { return index.counts[i]; },
      [&](std::size_t i) { return score(score, i); }, opt);
  res.image_id = index.image_id;
  res.table_reads = reads;
  return res;
}

// ---------------------------------------------------------------------------
// Ranking.

struct RankedEntry {
  std::string image_id;
  double score = kNoMatch;
  std::size_t cells_accessed = 0;
  std::size_t table_reads = 0;
  std::uint32_t l_ph1 = 0;
};

struct RankedResult {
  std::vector<RankedEntry> entries;
  std::size_t total_cells_accessed = 0;
  std::size_t total_table_reads = 0;
};

// Descending score; equal scores by ascending image id.
inline RankedResult rank_dataset(std::span<const SearchResult> results) {
  RankedResult out;
  for (const auto& r : results) {
    out.entries.push_back({r.image_id, r.score, r.cells_accessed, r.table_reads, r.l_ph1});
    out.total_cells_accessed += r.cells_accessed;
    out.total_table_reads += r.table_reads;
  }
  std::stable_sort(out.entries.begin(), out.entries.end(), [](const RankedEntry& a, const RankedEntry& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.image_id < b.image_id;
  });
  return out;
}

enum class Method { kGlobal, kFast, kSubquery, kRoot };

inline RankedResult rank_voronoi(const QueryDescriptor& q, std::span<const VoronoiIndex> indexes, Method method,
                                 const FastSearchOptions& opt = {}) {
  require(method != Method::kSubquery, Errc::kInvalidArgument, "subquery ranking needs the query feature set");
  std::vector<SearchResult> results;
  results.reserve(indexes.size());
  for (const auto& index : indexes) {
    switch (method) {
      case Method::kGlobal: results.push_back(global_max_score(q, index)); break;
      case Method::kFast: results.push_back(fast_ve_search(q, index, opt)); break;
      case Method::kRoot: results.push_back(root_score(q, index)); break;
      case Method::kSubquery: break;
    }
  }
  return rank_dataset(results);
}

struct SubqueryOptions {
  std::uint32_t levels = 3;
  std::uint32_t branching = 2;
  std::uint64_t seed = 0;
  EncodeOptions encode;
};

// Partitions the query itself, runs the fast search once per subquery cell
// and scores each image by the mean over subqueries.
inline RankedResult subquery_search(const FeatureSet& query, std::span<const VoronoiIndex> indexes,
                                    const Vocabulary& vocab, const PcaModel& pca,
                                    const SubqueryOptions& opt = {}) {
  const auto tree = spatial_hkmeans(query, opt.levels, opt.branching, opt.seed);
  const auto qindex = ve_encode(query, vocab, tree, pca, opt.encode);
  std::vector<QueryDescriptor> subqueries;
  for (std::size_t i = 0; i < qindex.cells.size(); ++i)
    if (qindex.present[i] && !qindex.cells[i].empty)
      subqueries.push_back({qindex.cells[i].descriptor, false, qindex.cells[i].point_count});

  std::vector<SearchResult> results;
  for (const auto& index : indexes) {
    SearchResult agg;
    agg.image_id = index.image_id;
    if (!subqueries.empty()) {
      double sum = 0.0;
      for (const auto& sq : subqueries) {
        const auto r = fast_ve_search(sq, index);
        sum += r.score;
        agg.cells_accessed += r.cells_accessed;
      }
      agg.score = sum / static_cast<double>(subqueries.size());
    }
    results.push_back(std::move(agg));
  }
  return rank_dataset(results);
}

}  // namespace veroi
