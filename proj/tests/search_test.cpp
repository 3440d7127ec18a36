#include "veroi/search.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>

namespace veroi {
namespace {

using testing::random_features;
using testing::random_unit;
using testing::small_models;

constexpr double kAbsent = std::numeric_limits<double>::quiet_NaN();

QueryDescriptor e1_query(std::uint32_t points) {
  Vec q = Vec::Zero(2);
  q(0) = 1.0;
  return {q, false, points};
}

// Index whose cell i scores exactly scores[i] against e1_query(); NaN marks
// an absent slot.
VoronoiIndex injected_index(TreeShape shape, const std::vector<double>& scores,
                            const std::vector<std::uint32_t>& counts, const std::string& id = "img") {
  VoronoiIndex index;
  index.image_id = id;
  index.shape = shape;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    CellDescriptor c;
    c.point_count = counts[i];
    c.descriptor = Vec::Zero(2);
    const bool present = !std::isnan(scores[i]);
    index.present.push_back(present);
    if (present) {
      c.descriptor << scores[i], std::sqrt(1.0 - scores[i] * scores[i]);
      c.empty = false;
    }
    index.cells.push_back(c);
  }
  return index;
}

// Quantized twin: M = 1, query code 0, cell i has code i + 1, and the table
// holds the injected scores.
struct InjectedQuantized {
  PQModel model;
  QuantizedIndex index;
  QuantizedQuery query;
};

InjectedQuantized injected_quantized(TreeShape shape, const std::vector<double>& scores,
                                     const std::vector<std::uint32_t>& counts, std::uint32_t query_points) {
  InjectedQuantized out;
  const std::size_t z = scores.size() + 1;
  out.model.blocks = 1;
  out.model.block_dim = 1;
  out.model.centroids = z;
  out.model.codebooks.assign(z, 1.0);
  out.model.reserved = {0};
  out.model.tables.assign(z * z, 0.0);
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const double s = std::isnan(scores[i]) ? 0.0 : scores[i];
    out.model.tables[i + 1] = s;
    out.model.tables[(i + 1) * z] = s;
  }
  out.index.image_id = "img";
  out.index.shape = shape;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    out.index.present.push_back(!std::isnan(scores[i]));
    out.index.counts.push_back(counts[i]);
    out.index.codes.push_back({{static_cast<std::uint8_t>(i + 1)}, std::isnan(scores[i])});
  }
  out.query = {{{0}, false}, query_points};
  return out;
}

// Independent replay of the two-phase rule on plain arrays.
struct Replay {
  std::vector<std::size_t> path;
  std::size_t accessed = 0;
  double score = 0.0;
};

Replay replay(TreeShape shape, const std::vector<double>& s, const std::vector<std::uint32_t>& counts,
              std::uint32_t qpoints) {
  Replay r;
  std::size_t cur = 0;
  r.path.push_back(0);
  r.accessed = 1;
  for (std::uint32_t l = 1; l < shape.levels; ++l) {
    std::size_t best = SIZE_MAX;
    for (std::size_t c = cur * shape.branching + 1; c <= cur * shape.branching + shape.branching; ++c) {
      if (std::isnan(s[c])) continue;
      ++r.accessed;
      if (best == SIZE_MAX || s[c] > s[best]) best = c;
    }
    if (best == SIZE_MAX || !(s[best] > s[cur])) break;
    cur = best;
    r.path.push_back(cur);
  }
  std::vector<int> orders;
  for (auto c : r.path) {
    long v = std::labs(static_cast<long>(qpoints) - static_cast<long>(counts[c]));
    orders.push_back(v < 1 ? 0 : static_cast<int>(std::floor(std::log10(static_cast<double>(v)) + 1e-12)));
  }
  int mode = 0, best_count = 0;
  for (int o = 0; o < 20; ++o) {
    const int n = static_cast<int>(std::count(orders.begin(), orders.end(), o));
    if (n > best_count) {
      best_count = n;
      mode = o;
    }
  }
  const double cscale = std::pow(10.0, mode);
  double wsum = 0, acc = 0;
  for (auto c : r.path) {
    const double w = cscale / std::max(1.0, std::abs(double(qpoints) - double(counts[c])));
    wsum += w;
    acc += w * s[c];
  }
  r.score = acc / wsum;
  return r;
}

struct RandomCase {
  std::vector<double> scores;
  std::vector<std::uint32_t> counts;
  std::uint32_t qpoints;
};

RandomCase random_case(std::uint64_t seed, TreeShape shape) {
  Rng rng(seed);
  RandomCase rc;
  const auto n = shape.node_count();
  rc.scores.resize(n);
  rc.counts.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    // Coarse grid of values so that ties occur.
    rc.scores[i] = -1.0 + 0.25 * static_cast<double>(uniform_index(rng, 9));
    rc.counts[i] = static_cast<std::uint32_t>(uniform_index(rng, 2000));
    if (i > 0 && (uniform01(rng) < 0.15 || std::isnan(rc.scores[shape.parent(i)]))) rc.scores[i] = kAbsent;
  }
  rc.qpoints = static_cast<std::uint32_t>(uniform_index(rng, 2000));
  return rc;
}

TEST(WholeImage, IdenticalOrthogonalAndOracle) {
  const Vec a = random_unit(1, 16);
  EXPECT_NEAR(whole_image_score({a, false, 1}, {a, 1, false}), 1.0, 1e-9);
  Vec x = Vec::Zero(4), y = Vec::Zero(4);
  x(0) = 1;
  y(1) = 1;
  EXPECT_EQ(whole_image_score({x, false, 1}, {y, 1, false}), 0.0);
  const Vec b = random_unit(2, 16);
  double dot = 0;
  for (int i = 0; i < 16; ++i) dot += a(i) * b(i);
  EXPECT_NEAR(whole_image_score({a, false, 1}, {b, 1, false}), dot, 1e-12);
  EXPECT_EQ(whole_image_score({a, false, 1}, {Vec::Zero(16), 0, true}), kNoMatch);
}

TEST(GlobalMax, RootEqualToQueryScoresOne) {
  const auto idx = injected_index({2, 2}, {1.0, 0.5, 0.2}, {3, 2, 1});
  const auto r = global_max_score(e1_query(3), idx);
  EXPECT_DOUBLE_EQ(r.score, 1.0);
  EXPECT_EQ(r.cells_accessed, 3u);
}

TEST(GlobalMax, GridAccessesFourteenCells) {
  const auto m = small_models(1, 8, 4, 8);
  const auto fs = random_features(2, 200, 4);
  const auto multi = multi_encode(fs, m.vocab, m.pca, 3);
  const auto q = make_query(random_features(3, 50, 4), m.vocab, m.pca);
  const auto r = global_max_score(q, multi);
  EXPECT_EQ(r.cells_accessed, 14u);
  double best = kNoMatch;
  for (const auto& c : multi.cells) best = std::max(best, c.empty ? kNoMatch : q.descriptor.dot(c.descriptor));
  EXPECT_EQ(r.score, best);
}

TEST(FastVe, RootExitMatchesWholeImageScoreExactly) {
  const std::vector<double> s{0.7, 0.3, 0.7, 0.1, kAbsent, kAbsent, kAbsent, kAbsent, kAbsent, kAbsent, kAbsent, kAbsent, kAbsent};
  std::vector<std::uint32_t> counts(13, 5);
  const auto idx = injected_index({3, 3}, s, counts);
  const auto q = e1_query(123);
  const auto r = fast_ve_search(q, idx);
  EXPECT_EQ(r.l_ph1, 0u);  // tie with the parent stops the descent
  EXPECT_EQ(r.cells_accessed, 4u);
  EXPECT_EQ(r.score, whole_image_score(q, idx.cells[0]));
  ASSERT_EQ(r.per_level.size(), 1u);
  EXPECT_EQ(r.per_level[0].weight, 1.0);
}

TEST(FastVe, HandWorkedWeights) {
  std::vector<LevelBest> levels{{0.2, 0, 50 - 500, 0}, {0.9, 1, 50 - 52, 0}};
  double c = 0;
  const double score = aggregate_levels(levels, &c);
  EXPECT_EQ(c, 1.0);  // orders {2, 0} tie; the smaller wins
  EXPECT_NEAR(levels[0].weight, 1.0 / 226.0, 1e-15);
  EXPECT_NEAR(levels[1].weight, 225.0 / 226.0, 1e-15);
  EXPECT_NEAR(score, (0.2 + 225.0 * 0.9) / 226.0, 1e-15);
  EXPECT_NEAR(score, 0.8969, 5e-5);
}

TEST(FastVe, ModalOrderOfMagnitude) {
  EXPECT_EQ(order_of_magnitude(0), 0);
  EXPECT_EQ(order_of_magnitude(9), 0);
  EXPECT_EQ(order_of_magnitude(-10), 1);
  EXPECT_EQ(order_of_magnitude(999), 2);
  std::vector<LevelBest> levels{{0, 0, 300, 0}, {0, 0, -450, 0}, {0, 0, 7, 0}};
  EXPECT_EQ(modal_weight_scale(levels), 100.0);
}

TEST(FastVe, ControlFlowMatchesReplayOracle) {
  const TreeShape shape{3, 3};
  for (std::uint64_t seed = 0; seed < 2000; ++seed) {
    const auto rc = random_case(seed, shape);
    const auto r = fast_ve_search(e1_query(rc.qpoints), injected_index(shape, rc.scores, rc.counts));
    const auto o = replay(shape, rc.scores, rc.counts, rc.qpoints);
    ASSERT_EQ(r.per_level.size(), o.path.size()) << seed;
    for (std::size_t l = 0; l < o.path.size(); ++l) EXPECT_EQ(r.per_level[l].cell, o.path[l]);
    EXPECT_EQ(r.cells_accessed, o.accessed);
    EXPECT_NEAR(r.score, o.score, 1e-12);
  }
}

TEST(FastVe, BoundAndConvexCombination) {
  for (std::uint64_t seed = 0; seed < 3000; ++seed) {
    const TreeShape shape{3, 3};
    const auto rc = random_case(seed, shape);
    const auto r = fast_ve_search(e1_query(rc.qpoints), injected_index(shape, rc.scores, rc.counts));
    std::size_t bound = 1;
    for (std::uint32_t l = 1; l <= std::min<std::uint32_t>(r.l_ph1 + 1, shape.levels - 1); ++l) bound += shape.branching;
    EXPECT_LE(r.cells_accessed, bound);
    EXPECT_LE(r.cells_accessed, 7u);
    double wsum = 0, lo = 1e9, hi = -1e9;
    for (const auto& lb : r.per_level) {
      EXPECT_GE(lb.weight, 0.0);
      wsum += lb.weight;
      lo = std::min(lo, lb.score);
      hi = std::max(hi, lb.score);
    }
    EXPECT_NEAR(wsum, 1.0, 1e-9);
    EXPECT_GE(r.score, lo - 1e-12);
    EXPECT_LE(r.score, hi + 1e-12);
  }
}

TEST(FastVe, WeightScaleDoesNotChangeScore) {
  for (std::uint64_t seed = 0; seed < 500; ++seed) {
    const auto rc = random_case(seed, {4, 2});
    const auto idx = injected_index({4, 2}, rc.scores, rc.counts);
    const auto q = e1_query(rc.qpoints);
    const double base = fast_ve_search(q, idx).score;
    for (double c : {1e-8, 0.5, 3.0, 1e6, 1e12}) EXPECT_NEAR(fast_ve_search(q, idx, {c}).score, base, 1e-12);
  }
}

TEST(FastVe, SingleLevelAgreesWithGlobalMax) {
  const auto m = small_models(1, 8, 4, 8);
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto fs = random_features(100 + s, 60, 4);
    const auto idx = ve_encode(fs, m.vocab, spatial_hkmeans(fs, 1, 3, s), m.pca);
    const auto q = make_query(random_features(200 + s, 30, 4), m.vocab, m.pca);
    EXPECT_EQ(fast_ve_search(q, idx).score, global_max_score(q, idx).score);
  }
}

TEST(FastVe, AbsentChildrenNeverSelected) {
  const std::vector<double> s{0.1, kAbsent, 0.4, kAbsent, kAbsent, 0.9, 0.95};
  const auto idx = injected_index({3, 2}, s, {10, 0, 10, 0, 0, 5, 5});
  const auto r = fast_ve_search(e1_query(5), idx);
  EXPECT_EQ(r.l_ph1, 2u);
  EXPECT_EQ(r.per_level[1].cell, 2u);
  EXPECT_EQ(r.per_level[2].cell, 6u);
  EXPECT_EQ(r.cells_accessed, 4u);
}

TEST(FastVe, EmptyQueryOrRootNeverMatches) {
  const auto idx = injected_index({2, 2}, {0.5, 0.5, 0.5}, {1, 1, 1});
  EXPECT_EQ(fast_ve_search({Vec::Zero(2), true, 0}, idx).score, kNoMatch);
}

TEST(QuantizedFastVe, SameControlFlowAsUnquantized) {
  const TreeShape shape{3, 3};
  for (std::uint64_t seed = 0; seed < 2000; ++seed) {
    const auto rc = random_case(seed, shape);
    const auto plain = fast_ve_search(e1_query(rc.qpoints), injected_index(shape, rc.scores, rc.counts));
    const auto inj = injected_quantized(shape, rc.scores, rc.counts, rc.qpoints);
    const auto quant = quantized_fast_ve_search(inj.query, inj.index, inj.model);
    ASSERT_EQ(plain.per_level.size(), quant.per_level.size());
    for (std::size_t l = 0; l < plain.per_level.size(); ++l) EXPECT_EQ(plain.per_level[l].cell, quant.per_level[l].cell);
    EXPECT_EQ(plain.cells_accessed, quant.cells_accessed);
    EXPECT_EQ(quant.table_reads, quant.cells_accessed * inj.model.blocks);
    EXPECT_NEAR(plain.score, quant.score, 1e-12);
  }
}

TEST(QuantizedFastVe, IdenticalRootCodeScoresOne) {
  std::vector<double> s{1.0, 0.2, 0.3, 0.1};
  const auto inj = injected_quantized({2, 3}, s, {4, 1, 2, 1}, 4);
  const auto r = quantized_fast_ve_search(inj.query, inj.index, inj.model);
  EXPECT_EQ(r.l_ph1, 0u);
  EXPECT_EQ(r.score, 1.0);
}

TEST(LevelProjectionScore, MeanOfLeafSimilarities) {
  const auto inj = injected_quantized({2, 2}, {0.0, 0.6, 0.2}, {2, 1, 1}, 2);
  std::vector<PQCode> leaves{inj.index.codes[1], inj.index.codes[2]};
  std::size_t reads = 0;
  EXPECT_NEAR(quantized_level_projection_score(inj.query.code, leaves, inj.model, &reads), 0.4, 1e-15);
  EXPECT_EQ(reads, 2u);
  const auto model = make_sign_model(4);
  const PQCode q{{1, 0, 1, 1}, false};
  std::vector<PQCode> same{q, q, q};
  EXPECT_NEAR(quantized_level_projection_score(q, same, model), 1.0, 1e-12);
}

TEST(LevelProjectionScore, LeafOnlySearchUsesChildMeans) {
  // Terminal codes at level 2 only; parents are means of their children.
  const TreeShape shape{3, 2};
  const std::vector<double> s{0.0, 0.0, 0.0, 0.9, 0.5, 0.1, 0.2};
  const auto inj = injected_quantized(shape, s, {4, 2, 2, 1, 1, 1, 1}, 1);
  const auto r = quantized_leaf_fast_ve_search(inj.query, inj.index, inj.model);
  // root = mean(0.7, 0.15) = 0.425; child 1 = 0.7 > root; leaf 3 = 0.9 > 0.7.
  ASSERT_EQ(r.per_level.size(), 3u);
  EXPECT_NEAR(r.per_level[0].score, 0.425, 1e-15);
  EXPECT_NEAR(r.per_level[1].score, 0.7, 1e-15);
  EXPECT_EQ(r.per_level[2].cell, 3u);
  EXPECT_EQ(r.table_reads, 4u);  // each leaf read once
}

TEST(Ranking, TiesBrokenById) {
  std::vector<SearchResult> rs(2);
  rs[0].image_id = "b";
  rs[0].score = 0.5;
  rs[1].image_id = "a";
  rs[1].score = 0.5;
  const auto ranked = rank_dataset(rs);
  EXPECT_EQ(ranked.entries[0].image_id, "a");
  EXPECT_EQ(ranked.entries[1].image_id, "b");
}

TEST(Ranking, SingletonAndSortOracle) {
  std::vector<SearchResult> one(1);
  one[0].image_id = "x";
  EXPECT_EQ(rank_dataset(one).entries.size(), 1u);
  Rng rng(3);
  std::vector<SearchResult> rs(200);
  for (std::size_t i = 0; i < rs.size(); ++i) {
    rs[i].image_id = "i" + std::to_string(1000 + i);
    rs[i].score = static_cast<double>(uniform_index(rng, 20)) / 20.0;
    rs[i].cells_accessed = 3;
  }
  const auto ranked = rank_dataset(rs);
  auto oracle = rs;
  std::sort(oracle.begin(), oracle.end(), [](const auto& a, const auto& b) {
    return std::tie(b.score, a.image_id) < std::tie(a.score, b.image_id);
  });
  for (std::size_t i = 0; i < rs.size(); ++i) EXPECT_EQ(ranked.entries[i].image_id, oracle[i].image_id);
  EXPECT_EQ(ranked.total_cells_accessed, 600u);
}

TEST(Subquery, RootOnlyQueryMatchesFastSearch) {
  const auto m = small_models(1, 8, 4, 8);
  std::vector<VoronoiIndex> indexes;
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto fs = random_features(300 + s, 120, 4, 640, 480, "d" + std::to_string(s));
    indexes.push_back(ve_encode(fs, m.vocab, spatial_hkmeans(fs, 3, 3, s), m.pca));
  }
  const auto query = random_features(400, 1, 4);  // one point: the query tree is the root alone
  const auto sub = subquery_search(query, indexes, m.vocab, m.pca);
  const auto fast = rank_voronoi(make_query(query, m.vocab, m.pca), indexes, Method::kFast);
  ASSERT_EQ(sub.entries.size(), fast.entries.size());
  for (std::size_t i = 0; i < sub.entries.size(); ++i) {
    EXPECT_EQ(sub.entries[i].image_id, fast.entries[i].image_id);
    EXPECT_NEAR(sub.entries[i].score, fast.entries[i].score, 1e-12);
  }
}

TEST(Subquery, SevenSubqueriesAveragedEqually) {
  const auto m = small_models(1, 8, 4, 8);
  std::vector<VoronoiIndex> indexes;
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto fs = random_features(500 + s, 120, 4, 640, 480, "d" + std::to_string(s));
    indexes.push_back(ve_encode(fs, m.vocab, spatial_hkmeans(fs, 3, 3, s), m.pca));
  }
  const auto query = random_features(600, 80, 4);
  const SubqueryOptions opt{3, 2, 17, {}};
  const auto qtree = spatial_hkmeans(query, 3, 2, 17);
  ASSERT_EQ(qtree.present_count(), 7u);
  const auto qindex = ve_encode(query, m.vocab, qtree, m.pca);
  const auto ranked = subquery_search(query, indexes, m.vocab, m.pca, opt);
  for (const auto& e : ranked.entries) {
    const auto& idx = *std::find_if(indexes.begin(), indexes.end(), [&](const auto& x) { return x.image_id == e.image_id; });
    double sum = 0;
    for (const auto& c : qindex.cells) sum += fast_ve_search({c.descriptor, false, c.point_count}, idx).score;
    EXPECT_NEAR(e.score, sum / 7.0, 1e-12);
  }
}

double spearman(std::vector<double> a, std::vector<double> b) {
  auto ranks = [](const std::vector<double>& v) {
    std::vector<std::size_t> order(v.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](auto i, auto j) { return v[i] < v[j]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < order.size();) {
      std::size_t j = i;
      while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
      for (std::size_t k = i; k <= j; ++k) r[order[k]] = 0.5 * static_cast<double>(i + j);
      i = j + 1;
    }
    return r;
  };
  const auto ra = ranks(a), rb = ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n, mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double num = 0, da = 0, db = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    num += (ra[i] - ma) * (rb[i] - mb);
    da += (ra[i] - ma) * (ra[i] - ma);
    db += (rb[i] - mb) * (rb[i] - mb);
  }
  return num / std::sqrt(da * db);
}

TEST(QuantizedFastVe, RankingTracksUnquantizedSearch) {
  SyntheticDatasetSpec spec;
  spec.dataset_size = 60;
  spec.planted_roi_count = 6;
  spec.background_textures = 4;
  spec.texture_noise = 0.3;
  spec.seed = 5;
  const auto ds = synth_generate(spec);
  auto train_spec = spec;
  train_spec.dataset_size = 150;
  train_spec.seed = 6;
  const auto train = synth_generate(train_spec);

  // Models trained on a disjoint synthetic set, as the pipeline does.
  RowMat descriptors(0, spec.descriptor_dim);
  for (std::size_t i = 0; i < train.images.size(); i += 4)
    for (std::size_t k = 0; k < train.images[i].size(); ++k) {
      descriptors.conservativeResize(descriptors.rows() + 1, Eigen::NoChange);
      for (std::size_t d = 0; d < spec.descriptor_dim; ++d)
        descriptors(descriptors.rows() - 1, static_cast<Eigen::Index>(d)) = train.images[i].descriptor(k)[d];
    }
  const auto vocab = kmeans(descriptors, 16, 25, 1);
  RowMat whole(static_cast<Eigen::Index>(train.images.size()), 16 * spec.descriptor_dim);
  for (std::size_t i = 0; i < train.images.size(); ++i) {
    std::vector<std::uint32_t> all(train.images[i].size());
    std::iota(all.begin(), all.end(), 0u);
    whole.row(static_cast<Eigen::Index>(i)) = ssr_normalize(vlad_encode(train.images[i], vocab, all)).values.transpose();
  }
  const auto pca = pca_train(whole, 32);
  RowMat cells(0, 32);
  for (const auto& img : train.images)
    for (const auto& c : ve_encode(img, vocab, spatial_hkmeans(img, 3, 3, 1), pca).cells) {
      if (c.empty) continue;
      cells.conservativeResize(cells.rows() + 1, Eigen::NoChange);
      cells.row(cells.rows() - 1) = c.descriptor.transpose();
    }
  RowMat white(cells.rows(), cells.cols());
  for (Eigen::Index r = 0; r < cells.rows(); ++r)
    white.row(r) = whiten_normalize({cells.row(r).transpose(), false}, pca, 8).values.transpose();
  const auto model = pq_train(white, 8, 256, 3);
  const testing::Models m{vocab, pca};

  std::vector<VoronoiIndex> indexes;
  std::vector<QuantizedIndex> qidx;
  for (const auto& img : ds.images) {
    indexes.push_back(ve_encode(img, m.vocab, spatial_hkmeans(img, 3, 3, 1), m.pca));
    qidx.push_back(quantize_index(indexes.back(), m.pca, model));
  }
  // Quantization is measured against the same search on unquantized whitened
  // cells; the raw comparison also includes the whitening change of metric.
  double vs_whitened = 0, vs_raw = 0;
  for (const auto& qs : ds.queries) {
    const auto& img = *std::find_if(ds.images.begin(), ds.images.end(), [&](const auto& f) { return f.image_id == qs.image_id; });
    const auto q = make_query(crop(img, qs.roi), m.vocab, m.pca);
    const auto qq = quantize_query(q, m.pca, model);
    const auto wq = whiten_normalize({q.descriptor, q.empty}, m.pca, 8);
    std::vector<double> raw, white_scores, quant;
    for (std::size_t i = 0; i < indexes.size(); ++i) {
      const auto& idx = indexes[i];
      raw.push_back(fast_ve_search(q, idx).score);
      white_scores.push_back(
          fast_ve_core(
              idx.shape, q.point_count, [&](std::size_t j) { return idx.present[j] && !idx.cells[j].empty; },
              [&](std::size_t j) { return idx.cells[j].point_count; },
              [&](std::size_t j) {
                return wq.values.dot(whiten_normalize({idx.cells[j].descriptor, false}, m.pca, 8).values) / 8.0;
              })
              .score);
      quant.push_back(quantized_fast_ve_search(qq, qidx[i], model).score);
    }
    vs_whitened += spearman(white_scores, quant);
    vs_raw += spearman(raw, quant);
  }
  const double n = static_cast<double>(ds.queries.size());
  vs_whitened /= n;
  vs_raw /= n;
  std::ifstream fixture(std::filesystem::path(VEROI_FIXTURE_DIR) / "search" / "spearman.txt");
  std::map<std::string, double> kv;
  std::string key;
  double v = 0;
  while (fixture >> key >> v) kv[key] = v;
  ASSERT_TRUE(kv.count("raw_floor"));
  RecordProperty("spearman_whitened", std::to_string(vs_whitened));
  RecordProperty("spearman_raw", std::to_string(vs_raw));
  EXPECT_GE(vs_whitened, 0.9);
  EXPECT_GE(vs_raw, kv["raw_floor"]);
  EXPECT_NEAR(vs_raw, kv["raw_measured"], 1e-6);
}

}  // namespace
}  // namespace veroi
