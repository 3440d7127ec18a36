#pragma once

// Command implementations behind the `veroi` tool. Every command is a pure
// function of its configuration (including the seed) and input files.

#include "veroi/clustering.hpp"
#include "veroi/common.hpp"
#include "veroi/encoder.hpp"
#include "veroi/eval.hpp"
#include "veroi/features.hpp"
#include "veroi/index_io.hpp"
#include "veroi/pq.hpp"
#include "veroi/search.hpp"
#include "veroi/voronoi.hpp"

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <locale>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace veroi {

struct PipelineConfig {
  // Model sizes.
  std::uint32_t vocab_k = 64;
  std::uint32_t levels = 3;
  std::uint32_t branching = 3;
  std::uint32_t pca_dim = 128;
  std::uint32_t pq_m = 32;
  std::uint32_t pq_zp = 256;
  std::uint64_t seed = 1;
  std::uint32_t kmeans_iters = 25;
  std::uint32_t min_keypoints = 0;
  std::uint32_t vocab_sample = 100000;  // max descriptors for vocabulary training, 0 = all
  bool ssr = true;

  // Paths.
  std::string train_manifest;
  std::string test_manifest;
  std::string vocab_path = "vocab.vvoc";
  std::string pca_path = "pca.vpca";
  std::string pq_path = "pq.vpqm";
  std::string index_path = "index.vidx";
  std::string ground_truth;
  std::string queries;

  // Modes.
  bool quantized = false;
  bool level_projection = false;
  bool sign_limit = false;
  bool allow_overlap = false;
  std::string method = "fast";        // global | fast | subquery | root
  std::string partition = "voronoi";  // voronoi | grid
  std::uint32_t subquery_levels = 3;
  std::uint32_t subquery_branching = 2;
  std::string bench_m = "8,16,32,64";

  // Synthetic data.
  std::uint32_t synth_size = 200;
  std::uint32_t synth_train_size = 300;
  std::uint32_t synth_objects = 20;
  std::uint32_t synth_images_per_object = 8;
  std::uint32_t synth_junk_per_object = 1;
  std::uint32_t synth_dim = 32;
  std::uint32_t synth_roi_min = 15;
  std::uint32_t synth_roi_max = 20;
  std::uint32_t synth_background_min = 400;
  std::uint32_t synth_background_max = 500;
  std::uint32_t synth_textures = 4;
  double synth_texture_noise = 0.3;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw Error(Errc::kParse, key + ": expected a boolean, got '" + v + "'");
}

template <typename T>
T parse_uint(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const auto x = std::stoull(v, &pos);
    if (pos != v.size() || v[0] == '-') throw std::invalid_argument(v);
    return static_cast<T>(x);
  } catch (const std::exception&) {
    throw Error(Errc::kParse, key + ": expected a non-negative integer, got '" + v + "'");
  }
}

inline double parse_double(const std::string& key, const std::string& v) {
  std::istringstream in(v);
  in.imbue(std::locale::classic());
  double x = 0.0;
  if (!(in >> x) || !in.eof()) throw Error(Errc::kParse, key + ": expected a number, got '" + v + "'");
  return x;
}

}  // namespace detail

// Sets one `key = value` entry; unknown keys are errors.
inline void set_config(PipelineConfig& c, const std::string& key, const std::string& value) {
  using detail::parse_bool;
  using detail::parse_uint;
  const std::map<std::string, std::function<void(const std::string&)>> setters = {
      {"vocab_k", [&](auto& v) { c.vocab_k = parse_uint<std::uint32_t>(key, v); }},
      {"levels", [&](auto& v) { c.levels = parse_uint<std::uint32_t>(key, v); }},
      {"branching", [&](auto& v) { c.branching = parse_uint<std::uint32_t>(key, v); }},
      {"pca_dim", [&](auto& v) { c.pca_dim = parse_uint<std::uint32_t>(key, v); }},
      {"pq_m", [&](auto& v) { c.pq_m = parse_uint<std::uint32_t>(key, v); }},
      {"pq_zp", [&](auto& v) { c.pq_zp = parse_uint<std::uint32_t>(key, v); }},
      {"seed", [&](auto& v) { c.seed = parse_uint<std::uint64_t>(key, v); }},
      {"kmeans_iters", [&](auto& v) { c.kmeans_iters = parse_uint<std::uint32_t>(key, v); }},
      {"min_keypoints", [&](auto& v) { c.min_keypoints = parse_uint<std::uint32_t>(key, v); }},
      {"vocab_sample", [&](auto& v) { c.vocab_sample = parse_uint<std::uint32_t>(key, v); }},
      {"ssr", [&](auto& v) { c.ssr = parse_bool(key, v); }},
      {"train_manifest", [&](auto& v) { c.train_manifest = v; }},
      {"test_manifest", [&](auto& v) { c.test_manifest = v; }},
      {"vocab_path", [&](auto& v) { c.vocab_path = v; }},
      {"pca_path", [&](auto& v) { c.pca_path = v; }},
      {"pq_path", [&](auto& v) { c.pq_path = v; }},
      {"index_path", [&](auto& v) { c.index_path = v; }},
      {"ground_truth", [&](auto& v) { c.ground_truth = v; }},
      {"queries", [&](auto& v) { c.queries = v; }},
      {"quantized", [&](auto& v) { c.quantized = parse_bool(key, v); }},
      {"level_projection", [&](auto& v) { c.level_projection = parse_bool(key, v); }},
      {"sign_limit", [&](auto& v) { c.sign_limit = parse_bool(key, v); }},
      {"allow_overlap", [&](auto& v) { c.allow_overlap = parse_bool(key, v); }},
      {"method", [&](auto& v) { c.method = v; }},
      {"partition", [&](auto& v) { c.partition = v; }},
      {"subquery", [&](auto& v) { if (parse_bool(key, v)) c.method = "subquery"; }},
      {"subquery_levels", [&](auto& v) { c.subquery_levels = parse_uint<std::uint32_t>(key, v); }},
      {"subquery_branching", [&](auto& v) { c.subquery_branching = parse_uint<std::uint32_t>(key, v); }},
      {"bench_m", [&](auto& v) { c.bench_m = v; }},
      {"synth_size", [&](auto& v) { c.synth_size = parse_uint<std::uint32_t>(key, v); }},
      {"synth_train_size", [&](auto& v) { c.synth_train_size = parse_uint<std::uint32_t>(key, v); }},
      {"synth_objects", [&](auto& v) { c.synth_objects = parse_uint<std::uint32_t>(key, v); }},
      {"synth_images_per_object", [&](auto& v) { c.synth_images_per_object = parse_uint<std::uint32_t>(key, v); }},
      {"synth_junk_per_object", [&](auto& v) { c.synth_junk_per_object = parse_uint<std::uint32_t>(key, v); }},
      {"synth_dim", [&](auto& v) { c.synth_dim = parse_uint<std::uint32_t>(key, v); }},
      {"synth_roi_min", [&](auto& v) { c.synth_roi_min = parse_uint<std::uint32_t>(key, v); }},
      {"synth_roi_max", [&](auto& v) { c.synth_roi_max = parse_uint<std::uint32_t>(key, v); }},
      {"synth_background_min", [&](auto& v) { c.synth_background_min = parse_uint<std::uint32_t>(key, v); }},
      {"synth_textures", [&](auto& v) { c.synth_textures = parse_uint<std::uint32_t>(key, v); }},
      {"synth_texture_noise", [&](auto& v) { c.synth_texture_noise = detail::parse_double(key, v); }},
      {"synth_background_max", [&](auto& v) { c.synth_background_max = parse_uint<std::uint32_t>(key, v); }},
  };
  const auto it = setters.find(key);
  if (it == setters.end()) throw Error(Errc::kParse, "unknown config key '" + key + "'");
  it->second(value);
}

inline void read_config(PipelineConfig& c, std::istream& in, const std::string& origin = "config") {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw Error(Errc::kParse, origin + ":" + std::to_string(lineno) + ": expected key = value");
    set_config(c, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
}

inline PipelineConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::kIo, "cannot open config " + path.string());
  PipelineConfig c;
  read_config(c, in, path.string());
  return c;
}

inline void validate(const PipelineConfig& c) {
  require(c.vocab_k >= 1, Errc::kInvalidArgument, "vocab_k must be >= 1");
  require(c.levels >= 1 && c.branching >= 2, Errc::kInvalidArgument, "need levels >= 1 and branching >= 2");
  require(c.pca_dim >= 1, Errc::kInvalidArgument, "pca_dim must be >= 1");
  require(c.method == "global" || c.method == "fast" || c.method == "subquery" || c.method == "root",
          Errc::kInvalidArgument, "method must be global, fast, subquery or root");
  require(c.partition == "voronoi" || c.partition == "grid", Errc::kInvalidArgument,
          "partition must be voronoi or grid");
  if (c.quantized && !c.sign_limit)
    require(c.pq_m >= 1 && c.pca_dim % c.pq_m == 0, Errc::kInvalidArgument,
            "pca_dim " + std::to_string(c.pca_dim) + " is not divisible by pq_m " + std::to_string(c.pq_m));
  require(c.pq_zp >= 1 && c.pq_zp <= 256, Errc::kInvalidArgument, "pq_zp must be in [1, 256]");
  require(!(c.partition == "grid" && (c.quantized || c.level_projection)), Errc::kInvalidArgument,
          "grid partition supports unquantized full storage only");
}

// Method constraints that depend on how the index was stored.
inline void validate_search(Method method, bool quantized, bool grid, bool leaves_only) {
  require(!grid || method == Method::kGlobal || method == Method::kRoot, Errc::kInvalidArgument,
          "grid indexes support the global and root methods only");
  require(method != Method::kSubquery || (!quantized && !grid), Errc::kInvalidArgument,
          "subquery search needs an unquantized Voronoi index");
  require(!(quantized && leaves_only && method == Method::kGlobal), Errc::kInvalidArgument,
          "global search needs every cell stored");
}

inline std::vector<std::size_t> parse_block_list(const std::string& list) {
  std::vector<std::size_t> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!detail::trim(item).empty()) out.push_back(detail::parse_uint<std::size_t>("bench_m", detail::trim(item)));
  require(!out.empty(), Errc::kParse, "bench_m is empty");
  return out;
}

inline Method parse_method(const std::string& m) {
  if (m == "global") return Method::kGlobal;
  if (m == "fast") return Method::kFast;
  if (m == "subquery") return Method::kSubquery;
  if (m == "root") return Method::kRoot;
  throw Error(Errc::kInvalidArgument, "unknown method '" + m + "'");
}

// ---------------------------------------------------------------------------
// Shared helpers.

struct Diagnostics {
  std::ostream* err = nullptr;
  void warn(const std::string& msg) const {
    if (err) *err << "warning: " << msg << '\n';
  }
};

inline constexpr std::uint64_t kVocabStream = 1;
inline constexpr std::uint64_t kTreeStream = 2;
inline constexpr std::uint64_t kPqStream = 3;
inline constexpr std::uint64_t kSampleStream = 4;
inline constexpr std::uint64_t kTrainSynthStream = 5;

inline std::vector<FeatureSet> load_manifest_features(const std::string& manifest) {
  require(!manifest.empty(), Errc::kInvalidArgument, "manifest path not set");
  std::vector<FeatureSet> out;
  std::uint16_t dim = 0;
  for (const auto& e : read_manifest(manifest)) {
    out.push_back(load_features(e.path, dim));
    dim = out.back().descriptor_dim;
    require(out.back().image_id == e.image_id, Errc::kInvalidArgument,
            e.path.string() + " holds image '" + out.back().image_id + "', manifest says '" + e.image_id + "'");
  }
  return out;
}

inline void check_disjoint(const PipelineConfig& c, const Diagnostics& diag) {
  if (c.test_manifest.empty() || !std::filesystem::exists(c.test_manifest)) return;
  std::set<std::string> ids, paths;
  for (const auto& e : read_manifest(c.train_manifest)) {
    ids.insert(e.image_id);
    paths.insert(std::filesystem::weakly_canonical(e.path).string());
  }
  std::size_t overlap = 0;
  for (const auto& e : read_manifest(c.test_manifest))
    if (ids.count(e.image_id) || paths.count(std::filesystem::weakly_canonical(e.path).string())) ++overlap;
  if (overlap == 0) return;
  const auto msg = std::to_string(overlap) + " test images also appear in the training manifest";
  if (!c.allow_overlap) throw Error(Errc::kInvalidArgument, msg + " (set allow_overlap to proceed)");
  diag.warn(msg);
}

inline PartitionTree build_tree(const FeatureSet& fs, const PipelineConfig& c) {
  return spatial_hkmeans(fs, c.levels, c.branching, derive_seed(c.seed, kTreeStream), c.kmeans_iters);
}

inline EncodeOptions encode_options(const PipelineConfig& c) { return {c.ssr}; }

// ---------------------------------------------------------------------------
// Commands.

struct SynthOutput {
  std::filesystem::path config;
  std::size_t test_images = 0;
  std::size_t train_images = 0;
};

inline SyntheticDatasetSpec synth_spec(const PipelineConfig& c) {
  SyntheticDatasetSpec s;
  s.dataset_size = c.synth_size;
  s.planted_roi_count = c.synth_objects;
  s.images_per_object = c.synth_images_per_object;
  s.junk_per_object = c.synth_junk_per_object;
  s.descriptor_dim = static_cast<std::uint16_t>(c.synth_dim);
  s.roi_points_range = {c.synth_roi_min, c.synth_roi_max};
  s.background_points_range = {c.synth_background_min, c.synth_background_max};
  s.background_textures = c.synth_textures;
  s.texture_noise = c.synth_texture_noise;
  s.seed = c.seed;
  return s;
}

// Writes test and training datasets, ground truth, queries, and a config
// file wired to them.
inline SynthOutput cmd_synth(const PipelineConfig& c, const std::filesystem::path& out_dir) {
  namespace fs = std::filesystem;
  auto test_spec = synth_spec(c);
  auto train_spec = test_spec;
  train_spec.dataset_size = c.synth_train_size;
  train_spec.planted_roi_count =
      std::min<std::uint32_t>(c.synth_objects, c.synth_train_size / std::max<std::uint32_t>(1, c.synth_images_per_object + c.synth_junk_per_object));
  train_spec.seed = derive_seed(c.seed, kTrainSynthStream);
  train_spec.id_prefix = "train";

  const auto test = synth_generate(test_spec);
  const auto train = synth_generate(train_spec);
  fs::create_directories(out_dir / "test");
  fs::create_directories(out_dir / "train");
  auto dump = [&](const std::vector<FeatureSet>& images, const std::string& sub, const std::string& manifest) {
    std::vector<ManifestEntry> entries;
    for (const auto& img : images) {
      const fs::path rel = fs::path(sub) / (img.image_id + ".vfea");
      save_features(img, out_dir / rel);
      entries.push_back({img.image_id, rel});
    }
    write_manifest(out_dir / manifest, entries);
  };
  dump(test.images, "test", "test.tsv");
  dump(train.images, "train", "train.tsv");
  write_ground_truth(out_dir / "groundtruth.tsv", test.records);
  write_queries(out_dir / "queries.tsv", test.queries);

  const auto p = [&](const std::string& name) { return fs::absolute(out_dir / name).lexically_normal().generic_string(); };
  std::ostringstream conf;
  conf << "# generated by veroi synth\n"
       << "seed = " << c.seed << "\n"
       << "vocab_k = " << c.vocab_k << "\nlevels = " << c.levels << "\nbranching = " << c.branching << "\n"
       << "pca_dim = " << c.pca_dim << "\npq_m = " << c.pq_m << "\npq_zp = " << c.pq_zp << "\n"
       << "train_manifest = " << p("train.tsv") << "\ntest_manifest = " << p("test.tsv") << "\n"
       << "ground_truth = " << p("groundtruth.tsv") << "\nqueries = " << p("queries.tsv") << "\n"
       << "vocab_path = " << p("vocab.vvoc") << "\npca_path = " << p("pca.vpca") << "\n"
       << "pq_path = " << p("pq.vpqm") << "\nindex_path = " << p("index.vidx") << "\n";
  io::write_file(out_dir / "pipeline.conf", conf.str());
  return {out_dir / "pipeline.conf", test.images.size(), train.images.size()};
}

inline Vocabulary cmd_train_vocab(const PipelineConfig& c, const Diagnostics& diag = {}) {
  validate(c);
  check_disjoint(c, diag);
  const auto images = load_manifest_features(c.train_manifest);
  std::size_t total = 0;
  std::uint16_t dim = 0;
  for (const auto& img : images) {
    total += img.size();
    dim = img.descriptor_dim;
  }
  require(total >= c.vocab_k, Errc::kInvalidArgument,
          "training set has " + std::to_string(total) + " descriptors, fewer than vocab_k");
  // Deterministic subsample: the first `vocab_sample` of a seeded permutation.
  std::vector<std::pair<std::uint32_t, std::uint32_t>> refs;
  for (std::uint32_t i = 0; i < images.size(); ++i)
    for (std::uint32_t k = 0; k < images[i].size(); ++k) refs.emplace_back(i, k);
  std::size_t take = refs.size();
  if (c.vocab_sample > 0 && refs.size() > c.vocab_sample) {
    Rng rng(derive_seed(c.seed, kSampleStream));
    for (std::size_t i = 0; i < c.vocab_sample; ++i) std::swap(refs[i], refs[i + uniform_index(rng, refs.size() - i)]);
    take = c.vocab_sample;
  }
  RowMat points(static_cast<Eigen::Index>(take), dim);
  for (std::size_t r = 0; r < take; ++r) {
    const auto d = images[refs[r].first].descriptor(refs[r].second);
    for (std::size_t j = 0; j < dim; ++j) points(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j)) = d[j];
  }
  auto vocab = kmeans(points, c.vocab_k, c.kmeans_iters, derive_seed(c.seed, kVocabStream));
  save_vocabulary(vocab, c.vocab_path);
  return load_vocabulary(c.vocab_path);
}

// Whole-image raw descriptors of the training set, one per row.
inline RowMat whole_image_rows(const std::vector<FeatureSet>& images, const Vocabulary& vocab, bool ssr) {
  RowMat rows(static_cast<Eigen::Index>(images.size()), static_cast<Eigen::Index>(vocab.size() * vocab.dim()));
  for (std::size_t i = 0; i < images.size(); ++i) {
    std::vector<std::uint32_t> all(images[i].size());
    std::iota(all.begin(), all.end(), 0u);
    auto raw = vlad_encode(images[i], vocab, all);
    if (ssr) raw = ssr_normalize(raw);
    rows.row(static_cast<Eigen::Index>(i)) = raw.values.transpose();
  }
  return rows;
}

inline PcaModel cmd_train_pca(const PipelineConfig& c, const Diagnostics& diag = {}) {
  validate(c);
  check_disjoint(c, diag);
  const auto vocab = load_vocabulary(c.vocab_path);
  const auto images = load_manifest_features(c.train_manifest);
  const auto model = pca_train(whole_image_rows(images, vocab, c.ssr), c.pca_dim);
  save_pca(model, c.pca_path);
  return load_pca(c.pca_path);
}

// Projected descriptors of every non-empty cell of every training image.
inline RowMat training_cells(const std::vector<FeatureSet>& images, const Vocabulary& vocab, const PcaModel& pca,
                             const PipelineConfig& c) {
  std::vector<Vec> cells;
  for (const auto& img : images) {
    const auto index = ve_encode(img, vocab, build_tree(img, c), pca, encode_options(c));
    for (const auto& cell : index.cells)
      if (!cell.empty) cells.push_back(cell.descriptor);
  }
  RowMat rows(static_cast<Eigen::Index>(cells.size()), static_cast<Eigen::Index>(pca.output_dim()));
  for (std::size_t i = 0; i < cells.size(); ++i) rows.row(static_cast<Eigen::Index>(i)) = cells[i].transpose();
  return rows;
}

inline PQModel cmd_train_pq(const PipelineConfig& c, const Diagnostics& diag = {}) {
  validate(c);
  check_disjoint(c, diag);
  require(c.pca_dim % c.pq_m == 0, Errc::kInvalidArgument, "pca_dim is not divisible by pq_m");
  const auto vocab = load_vocabulary(c.vocab_path);
  const auto pca = load_pca(c.pca_path);
  const auto images = load_manifest_features(c.train_manifest);
  const auto rows = whiten_rows(training_cells(images, vocab, pca, c), pca, c.pq_m);
  const auto model = pq_train(rows, c.pq_m, c.pq_zp, derive_seed(c.seed, kPqStream), true, c.kmeans_iters);
  save_pq(model, c.pq_path);
  return load_pq(c.pq_path);
}

inline PQModel quantizer_for(const PipelineConfig& c, const PcaModel& pca) {
  return c.sign_limit ? make_sign_model(pca.output_dim()) : load_pq(c.pq_path);
}

inline IndexFile cmd_encode(const PipelineConfig& c, const Diagnostics& diag = {}) {
  validate(c);
  const auto vocab = load_vocabulary(c.vocab_path);
  const auto pca = load_pca(c.pca_path);
  check_models(vocab, pca);
  const auto images = load_manifest_features(c.test_manifest);
  std::optional<PQModel> pq;
  if (c.quantized) pq = quantizer_for(c, pca);

  IndexFile f;
  f.dim = static_cast<std::uint32_t>(pca.output_dim());
  f.levels = c.levels;
  f.quantized = c.quantized;
  f.blocks = pq ? static_cast<std::uint32_t>(pq->blocks) : 0;
  if (c.partition == "grid") {
    f.kind = IndexKind::kGrid;
    f.branching = 0;
  } else {
    f.kind = c.level_projection ? IndexKind::kLeaves : IndexKind::kVoronoi;
    f.branching = c.branching;
  }
  const auto opt = encode_options(c);
  if (f.kind == IndexKind::kLeaves && !c.quantized) f.mean_offset = pca.projection.transpose() * pca.mean;

  for (const auto& img : images) {
    if (img.size() < c.min_keypoints) {
      diag.warn("skipping '" + img.image_id + "': " + std::to_string(img.size()) + " keypoints < min_keypoints");
      continue;
    }
    if (f.kind == IndexKind::kGrid) {
      f.grid.push_back(multi_encode(img, vocab, pca, c.levels, opt));
      continue;
    }
    const auto tree = build_tree(img, c);
    if (c.quantized) {
      f.codes.push_back(quantize_index(ve_encode(img, vocab, tree, pca, opt), pca, *pq));
    } else if (f.kind == IndexKind::kLeaves) {
      f.leaves.push_back(make_leaf_set(img, vocab, tree, pca, opt));
      f.voronoi.push_back(level_project(f.leaves.back()));
    } else {
      f.voronoi.push_back(ve_encode(img, vocab, tree, pca, opt));
    }
  }
  save_index(f, c.index_path);
  return f;
}

// Loaded models and index; answers queries with the configured method.
class Engine {
 public:
  explicit Engine(const PipelineConfig& c)
      : cfg_(c), vocab_(load_vocabulary(c.vocab_path)), pca_(load_pca(c.pca_path)), index_(load_index(c.index_path)) {
    validate(c);
    check_models(vocab_, pca_);
    require(index_.dim == pca_.output_dim(), Errc::kDimMismatch, "index dimension does not match the PCA model");
    require(index_.quantized == c.quantized, Errc::kInvalidArgument,
            std::string("index is ") + (index_.quantized ? "quantized" : "unquantized") + " but config says otherwise");
    if (index_.quantized) {
      pq_ = quantizer_for(c, pca_);
      require(pq_->blocks == index_.blocks, Errc::kDimMismatch, "index M does not match the quantizer");
      if (c.sign_limit)
        for (const auto& img : index_.codes) signs_.push_back(to_sign_index(img));
    }
    method_ = parse_method(c.method);
    validate_search(method_, index_.quantized, index_.kind == IndexKind::kGrid, index_.kind == IndexKind::kLeaves);
  }

  RankedResult search(const FeatureSet& query) const {
    const auto opt = encode_options(cfg_);
    if (method_ == Method::kSubquery) {
      return subquery_search(query, index_.voronoi, vocab_, pca_,
                             {cfg_.subquery_levels, cfg_.subquery_branching, derive_seed(cfg_.seed, kTreeStream), opt});
    }
    const auto q = make_query(query, vocab_, pca_, opt);
    if (!index_.quantized) {
      if (index_.kind == IndexKind::kGrid) {
        std::vector<SearchResult> results;
        for (const auto& img : index_.grid) {
          if (method_ == Method::kRoot) {
            SearchResult r;
            r.image_id = img.image_id;
            r.cells_accessed = 1;
            r.score = whole_image_score(q, img.cells[0]);
            results.push_back(r);
          } else {
            results.push_back(global_max_score(q, img));
          }
        }
        return rank_dataset(results);
      }
      return rank_voronoi(q, index_.voronoi, method_);
    }
    const auto qq = quantize_query(q, pca_, *pq_);
    std::vector<SearchResult> results;
    if (cfg_.sign_limit && method_ == Method::kFast) {
      const auto qs = sign_code_of(qq.code);
      for (const auto& si : signs_) results.push_back(hamming_fast_ve_search(qs, qq.point_count, qq.code.empty, si));
      return rank_dataset(results);
    }
    for (const auto& img : index_.codes) {
      switch (method_) {
        case Method::kFast:
          results.push_back(index_.kind == IndexKind::kLeaves ? quantized_leaf_fast_ve_search(qq, img, *pq_)
                                                              : quantized_fast_ve_search(qq, img, *pq_));
          break;
        case Method::kGlobal:
          results.push_back(quantized_global_max_score(qq, img, *pq_));
          break;
        default: {
          SearchResult r;
          r.image_id = img.image_id;
          r.cells_accessed = 1;
          r.table_reads = pq_->blocks;
          if (!qq.code.empty && !img.codes[0].empty) r.score = sdc_similarity(qq.code, img.codes[0], *pq_);
          results.push_back(r);
        }
      }
    }
    return rank_dataset(results);
  }

  ComplexityConfig complexity_config() const {
    if (!index_.quantized) return {CostModel::kInnerProducts, index_.dim, 0};
    if (cfg_.sign_limit && method_ == Method::kFast) return {CostModel::kHamming, index_.dim, 0};
    return {CostModel::kTableReads, index_.dim, index_.blocks};
  }

  const IndexFile& index() const { return index_; }

 private:
  PipelineConfig cfg_;
  Vocabulary vocab_;
  PcaModel pca_;
  IndexFile index_;
  std::optional<PQModel> pq_;
  std::vector<SignIndex> signs_;
  Method method_ = Method::kFast;
};

inline void print_ranking(std::ostream& os, const RankedResult& ranked) {
  std::ostringstream out;
  out.imbue(std::locale::classic());
  out << std::setprecision(9);
  out << "rank\timage_id\tscore\tcells_accessed\ttable_reads\n";
  for (std::size_t i = 0; i < ranked.entries.size(); ++i) {
    const auto& e = ranked.entries[i];
    out << i + 1 << '\t' << e.image_id << '\t' << e.score << '\t' << e.cells_accessed << '\t' << e.table_reads << '\n';
  }
  os << out.str();
}

inline RankedResult cmd_query(const PipelineConfig& c, const std::filesystem::path& feature_file,
                              const std::optional<Rect>& roi, std::ostream& out) {
  const Engine engine(c);
  auto fs = load_features(feature_file);
  if (roi) fs = crop(fs, *roi);
  const auto ranked = engine.search(fs);
  print_ranking(out, ranked);
  return ranked;
}

struct EvalReport {
  std::vector<std::pair<std::string, double>> ap;
  double map = 0.0;
  ComplexityReport complexity;
};

inline EvalReport cmd_eval(const PipelineConfig& c, std::ostream& out) {
  const Engine engine(c);
  require(!c.queries.empty() && !c.ground_truth.empty(), Errc::kInvalidArgument,
          "eval needs queries and ground_truth paths");
  const auto queries = read_queries(c.queries);
  auto records = read_ground_truth(c.ground_truth);
  std::map<std::string, std::filesystem::path> paths;
  for (const auto& e : read_manifest(c.test_manifest)) paths[e.image_id] = e.path;

  EvalReport rep;
  std::vector<RankedResult> rankings;
  std::vector<double> aps;
  for (const auto& q : queries) {
    auto rec = std::find_if(records.begin(), records.end(), [&](const auto& r) { return r.query_id == q.query_id; });
    require(rec != records.end(), Errc::kInvalidArgument, "query '" + q.query_id + "' has no ground truth");
    rec->source_image = q.image_id;
    const auto path = paths.find(q.image_id);
    require(path != paths.end(), Errc::kInvalidArgument, "query image '" + q.image_id + "' not in the test manifest");
    const auto ranked = engine.search(crop(load_features(path->second), q.roi));
    const double ap = average_precision(ranked, *rec);
    rep.ap.emplace_back(q.query_id, ap);
    aps.push_back(ap);
    rankings.push_back(ranked);
  }
  rep.map = mean_average_precision(aps);
  rep.complexity = complexity_accounting(rankings, engine.complexity_config());

  std::ostringstream os;
  os.imbue(std::locale::classic());
  os << std::setprecision(6);
  for (const auto& [id, ap] : rep.ap) os << "AP\t" << id << '\t' << ap << '\n';
  os << "mAP\t" << rep.map << '\n';
  os << "complexity\t" << rep.complexity.normalized << "\tper_image_cost\t" << rep.complexity.macs_or_reads << '\n';
  out << os.str();
  return rep;
}

inline std::vector<BenchRow> cmd_bench(const PipelineConfig& c, std::ostream& out) {
  validate(c);
  const auto vocab = load_vocabulary(c.vocab_path);
  const auto pca = load_pca(c.pca_path);
  const auto train = load_manifest_features(c.train_manifest);
  const auto test = load_manifest_features(c.test_manifest);
  const auto opt = encode_options(c);

  std::vector<VoronoiIndex> dataset;
  std::map<std::string, const FeatureSet*> by_id;
  for (const auto& img : test) {
    dataset.push_back(ve_encode(img, vocab, build_tree(img, c), pca, opt));
    by_id[img.image_id] = &img;
  }
  BenchInputs in;
  in.training_cells = training_cells(train, vocab, pca, c);
  in.pca = &pca;
  in.dataset = dataset;
  auto records = read_ground_truth(c.ground_truth);
  for (const auto& q : read_queries(c.queries)) {
    auto rec = std::find_if(records.begin(), records.end(), [&](const auto& r) { return r.query_id == q.query_id; });
    require(rec != records.end(), Errc::kInvalidArgument, "query '" + q.query_id + "' has no ground truth");
    require(by_id.count(q.image_id) > 0, Errc::kInvalidArgument, "query image '" + q.image_id + "' not in test set");
    rec->source_image = q.image_id;
    in.queries.push_back(make_query(crop(*by_id[q.image_id], q.roi), vocab, pca, opt));
    in.records.push_back(*rec);
  }
  const auto blocks = parse_block_list(c.bench_m);
  const auto rows = bench_m_sweep(in, blocks, c.pq_zp, derive_seed(c.seed, kPqStream));
  write_bench_csv(out, rows);
  return rows;
}

}  // namespace veroi
