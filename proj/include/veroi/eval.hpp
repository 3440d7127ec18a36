#pragma once

#include "veroi/common.hpp"
#include "veroi/encoder.hpp"
#include "veroi/features.hpp"
#include "veroi/pq.hpp"
#include "veroi/search.hpp"
#include "veroi/voronoi.hpp"

#include <cstdint>
#include <locale>
#include <ostream>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

namespace veroi {

// Unsmoothed average precision: junk images (and the query's own source
// image) are dropped from the ranking, then AP is the mean of hits/rank over
// the ranks of the good images.
inline double average_precision(std::span<const std::string> ranked_ids, const QueryRecord& rec) {
  require(!rec.good.empty(), Errc::kInvalidArgument, "query '" + rec.query_id + "' has no good images");
  std::set<std::string> seen;
  std::size_t rank = 0, hits = 0;
  double sum = 0.0;
  for (const auto& id : ranked_ids) {
    require(seen.insert(id).second, Errc::kInvalidArgument, "image '" + id + "' ranked twice");
    if (rec.junk.count(id) || id == rec.source_image) continue;
    ++rank;
    if (rec.good.count(id)) {
      ++hits;
      sum += static_cast<double>(hits) / static_cast<double>(rank);
    }
  }
  return sum / static_cast<double>(rec.good.size());
}

inline double average_precision(const RankedResult& ranked, const QueryRecord& rec) {
  std::vector<std::string> ids;
  ids.reserve(ranked.entries.size());
  for (const auto& e : ranked.entries) ids.push_back(e.image_id);
  return average_precision(ids, rec);
}

inline double mean_average_precision(std::span<const double> aps) {
  if (aps.empty()) return 0.0;
  double s = 0.0;
  for (double ap : aps) s += ap;
  return s / static_cast<double>(aps.size());
}

// Matching cost per (query, dataset image), averaged per query over images
// and then over queries. One unit is a 128-D inner product, M table reads
// (one quantized cell), or one Hamming comparison.
enum class CostModel { kInnerProducts, kTableReads, kHamming };

struct ComplexityConfig {
  CostModel model = CostModel::kInnerProducts;
  std::size_t dim = 128;
  std::size_t blocks = 0;  // M, for kTableReads
};

struct ComplexityReport {
  double macs_or_reads = 0.0;  // per image: MACs, table reads, or Hamming comparisons
  double normalized = 0.0;     // in baseline units
};

inline constexpr double kBaselineDim = 128.0;

inline ComplexityReport complexity_accounting(std::span<const RankedResult> per_query, const ComplexityConfig& cfg) {
  ComplexityReport rep;
  if (per_query.empty()) return rep;
  for (const auto& ranked : per_query) {
    const double images = static_cast<double>(std::max<std::size_t>(ranked.entries.size(), 1));
    switch (cfg.model) {
      case CostModel::kInnerProducts: {
        const double macs = static_cast<double>(ranked.total_cells_accessed) * static_cast<double>(cfg.dim) / images;
        rep.macs_or_reads += macs;
        rep.normalized += macs / kBaselineDim;
        break;
      }
      case CostModel::kTableReads: {
        require(cfg.blocks > 0, Errc::kInvalidArgument, "table-read accounting needs M");
        const double reads = static_cast<double>(ranked.total_table_reads) / images;
        rep.macs_or_reads += reads;
        rep.normalized += reads / static_cast<double>(cfg.blocks);
        break;
      }
      case CostModel::kHamming: {
        const double cmp = static_cast<double>(ranked.total_cells_accessed) / images;
        rep.macs_or_reads += cmp;
        rep.normalized += cmp;
        break;
      }
    }
  }
  rep.macs_or_reads /= static_cast<double>(per_query.size());
  rep.normalized /= static_cast<double>(per_query.size());
  return rep;
}

// ---------------------------------------------------------------------------
// M sweep.

struct BenchRow {
  std::size_t blocks = 0;
  double map = 0.0;
  double distortion = 0.0;       // mean squared error of the unit-norm whitened cells
  double reads_per_query = 0.0;  // table reads summed over the dataset
};

struct BenchInputs {
  RowMat training_cells;  // projected training cell descriptors, one per row
  const PcaModel* pca = nullptr;
  std::span<const VoronoiIndex> dataset;
  std::vector<QueryDescriptor> queries;
  std::vector<QueryRecord> records;
};

// Whitens and subspace-normalizes every row.
inline RowMat whiten_rows(const RowMat& rows, const PcaModel& pca, std::size_t blocks) {
  RowMat out(rows.rows(), rows.cols());
  for (Eigen::Index r = 0; r < rows.rows(); ++r) {
    const bool empty = rows.row(r).isZero(0.0);
    out.row(r) = whiten_normalize({rows.row(r).transpose(), empty}, pca, blocks).values.transpose();
  }
  return out;
}

// Mean of |x - q(x)|^2 / M over non-empty cells, so that a whole descriptor
// has unit norm.
inline double quantization_distortion(std::span<const VoronoiIndex> dataset, const PcaModel& pca,
                                      const PQModel& model) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& index : dataset)
    for (const auto& cell : index.cells) {
      if (cell.empty) continue;
      const auto wd = whiten_normalize({cell.descriptor, false}, pca, model.blocks);
      const auto code = quantize(wd, model);
      sum += (wd.values - reconstruct(code, model)).squaredNorm() / static_cast<double>(model.blocks);
      ++n;
    }
  return n ? sum / static_cast<double>(n) : 0.0;
}

// Trains a quantizer per M and evaluates the quantized fast search. M equal
// to the descriptor dimension uses sign codes and Hamming similarity.
inline std::vector<BenchRow> bench_m_sweep(const BenchInputs& in, std::span<const std::size_t> block_counts,
                                           std::size_t centroids, std::uint64_t seed) {
  require(in.pca != nullptr, Errc::kInvalidArgument, "bench needs a PCA model");
  require(in.queries.size() == in.records.size(), Errc::kInvalidArgument, "one record per query required");
  const auto& pca = *in.pca;
  const std::size_t dim = pca.output_dim();
  std::vector<BenchRow> rows;
  for (const auto m : block_counts) {
    require(m >= 1 && dim % m == 0, Errc::kInvalidArgument,
            "M = " + std::to_string(m) + " does not divide D = " + std::to_string(dim));
    const bool sign = m == dim;
    const PQModel model = sign ? make_sign_model(dim)
                               : pq_train(whiten_rows(in.training_cells, pca, m), m, centroids, derive_seed(seed, m));
    std::vector<QuantizedIndex> qindexes;
    std::vector<SignIndex> sindexes;
    for (const auto& index : in.dataset) {
      qindexes.push_back(quantize_index(index, pca, model));
      if (sign) sindexes.push_back(to_sign_index(qindexes.back()));
    }
    BenchRow row;
    row.blocks = m;
    std::vector<double> aps;
    std::size_t reads = 0;
    for (std::size_t qi = 0; qi < in.queries.size(); ++qi) {
      const auto qq = quantize_query(in.queries[qi], pca, model);
      std::vector<SearchResult> results;
      if (sign) {
        const auto qs = sign_code_of(qq.code);
        for (const auto& si : sindexes) results.push_back(hamming_fast_ve_search(qs, qq.point_count, qq.code.empty, si));
      } else {
        for (const auto& qx : qindexes) results.push_back(quantized_fast_ve_search(qq, qx, model));
      }
      const auto ranked = rank_dataset(results);
      reads += ranked.total_table_reads;
      aps.push_back(average_precision(ranked, in.records[qi]));
    }
    row.map = mean_average_precision(aps);
    row.distortion = quantization_distortion(in.dataset, pca, model);
    row.reads_per_query = in.queries.empty() ? 0.0 : static_cast<double>(reads) / static_cast<double>(in.queries.size());
    rows.push_back(row);
  }
  return rows;
}

inline void write_bench_csv(std::ostream& os, std::span<const BenchRow> rows) {
  std::ostringstream out;
  out.imbue(std::locale::classic());
  out.precision(6);
  out << "M,mAP,distortion,reads_per_query\n";
  for (const auto& r : rows) out << r.blocks << ',' << r.map << ',' << r.distortion << ',' << r.reads_per_query << '\n';
  os << out.str();
}

}  // namespace veroi
