#pragma once

#include "veroi/binary_io.hpp"
#include "veroi/common.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace veroi {

struct Keypoint {
  float x = 0.0f;
  float y = 0.0f;

  bool operator==(const Keypoint&) const = default;
};

// Local features of one image. Width/height of 0 mean "not declared", in
// which case keypoints are only required to be finite and non-negative.
struct FeatureSet {
  std::string image_id;
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  std::uint16_t descriptor_dim = 0;
  std::vector<Keypoint> keypoints;
  std::vector<float> descriptors;  // size() x descriptor_dim, row-major

  std::size_t size() const { return keypoints.size(); }

  std::span<const float> descriptor(std::size_t i) const {
    return {descriptors.data() + i * descriptor_dim, descriptor_dim};
  }

  bool operator==(const FeatureSet&) const = default;
};

inline bool keypoint_in_bounds(const FeatureSet& fs, const Keypoint& kp) {
  if (!std::isfinite(kp.x) || !std::isfinite(kp.y) || kp.x < 0.0f || kp.y < 0.0f) return false;
  if (fs.width > 0 && !(kp.x < static_cast<float>(fs.width))) return false;
  if (fs.height > 0 && !(kp.y < static_cast<float>(fs.height))) return false;
  return true;
}

inline void validate(const FeatureSet& fs) {
  require(fs.descriptor_dim > 0, Errc::kDimMismatch, "descriptor_dim must be positive");
  require(fs.descriptors.size() == fs.keypoints.size() * fs.descriptor_dim, Errc::kDimMismatch,
          "descriptor matrix does not match keypoint count x descriptor_dim");
  for (std::size_t i = 0; i < fs.keypoints.size(); ++i) {
    if (!keypoint_in_bounds(fs, fs.keypoints[i]))
      throw Error(Errc::kOutOfBounds, "keypoint " + std::to_string(i) + " of '" + fs.image_id +
                                          "' lies outside the declared image bounds");
  }
}

inline constexpr std::string_view kFeatureMagic = "VFEA";
inline constexpr std::uint16_t kFeatureVersion = 1;

inline std::string encode_features(const FeatureSet& fs) {
  validate(fs);
  io::ByteWriter w;
  w.put_bytes(kFeatureMagic);
  w.put<std::uint16_t>(kFeatureVersion);
  w.put_string16(fs.image_id);
  w.put<std::uint32_t>(fs.width);
  w.put<std::uint32_t>(fs.height);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(fs.size()));
  w.put<std::uint16_t>(fs.descriptor_dim);
  for (const auto& kp : fs.keypoints) {
    w.put<float>(kp.x);
    w.put<float>(kp.y);
  }
  w.put_f32(fs.descriptors);
  return w.bytes();
}

// `expected_dim` of 0 accepts any dimension.
inline FeatureSet decode_features(std::string_view data, std::uint16_t expected_dim = 0) {
  io::ByteReader r(data);
  r.expect_magic(kFeatureMagic);
  io::check_version(r.get<std::uint16_t>(), kFeatureVersion, "feature file");
  FeatureSet fs;
  fs.image_id = r.get_string16();
  fs.width = r.get<std::uint32_t>();
  fs.height = r.get<std::uint32_t>();
  const auto n = r.get<std::uint32_t>();
  fs.descriptor_dim = r.get<std::uint16_t>();
  require(fs.descriptor_dim > 0, Errc::kDimMismatch, "descriptor_dim is zero");
  if (expected_dim != 0 && fs.descriptor_dim != expected_dim)
    throw Error(Errc::kDimMismatch, "descriptor_dim " + std::to_string(fs.descriptor_dim) +
                                        ", expected " + std::to_string(expected_dim));
  // Check the payload size before allocating so a corrupt count cannot
  // trigger a huge allocation.
  const std::uint64_t payload =
      std::uint64_t{n} * 8u + std::uint64_t{n} * fs.descriptor_dim * 4u;
  if (r.remaining() < payload) throw Error(Errc::kTruncated, "feature payload ends early");
  fs.keypoints.resize(n);
  for (auto& kp : fs.keypoints) {
    kp.x = r.get<float>();
    kp.y = r.get<float>();
  }
  fs.descriptors.resize(std::size_t{n} * fs.descriptor_dim);
  r.get_f32(fs.descriptors);
  r.expect_end();
  validate(fs);
  return fs;
}

inline void save_features(const FeatureSet& fs, const std::filesystem::path& path) {
  io::write_file(path, encode_features(fs));
}

inline FeatureSet load_features(const std::filesystem::path& path, std::uint16_t expected_dim = 0) {
  return decode_features(io::read_file(path), expected_dim);
}

// ---------------------------------------------------------------------------
// Manifest, ground truth and query files (UTF-8 text, tab separated).

struct ManifestEntry {
  std::string image_id;
  std::filesystem::path path;
};

namespace detail {

inline std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto tab = line.find('\t', start);
    out.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  return out;
}

template <typename Fn>
void for_each_line(const std::filesystem::path& path, Fn&& fn) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::kIo, "cannot open " + path.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    fn(split_tabs(line), lineno);
  }
}

inline std::string where(const std::filesystem::path& path, std::size_t lineno) {
  return path.string() + ":" + std::to_string(lineno);
}

}  // namespace detail

// Relative paths are resolved against the manifest's directory.
inline std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  std::vector<ManifestEntry> out;
  detail::for_each_line(path, [&](const std::vector<std::string>& f, std::size_t lineno) {
    require(f.size() == 2, Errc::kParse, detail::where(path, lineno) + ": expected image_id<TAB>path");
    std::filesystem::path p(f[1]);
    if (p.is_relative()) p = path.parent_path() / p;
    out.push_back({f[0], p});
  });
  return out;
}

inline void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries) {
  std::ostringstream os;
  for (const auto& e : entries) os << e.image_id << '\t' << e.path.generic_string() << '\n';
  io::write_file(path, os.str());
}

struct Rect {
  float x = 0.0f;
  float y = 0.0f;
  float w = 0.0f;
  float h = 0.0f;

  bool contains(const Keypoint& kp) const {
    return kp.x >= x && kp.x <= x + w && kp.y >= y && kp.y <= y + h;
  }
  bool operator==(const Rect&) const = default;
};

// Per-query relevance judgements. The query's source image is in neither
// set; evaluation ignores it like a junk image.
struct QueryRecord {
  std::string query_id;
  std::string source_image;
  std::set<std::string> good;
  std::set<std::string> junk;
};

struct QuerySpec {
  std::string query_id;
  std::string image_id;
  Rect roi;
};

inline void write_ground_truth(const std::filesystem::path& path, const std::vector<QueryRecord>& records) {
  std::ostringstream os;
  for (const auto& rec : records) {
    for (const auto& id : rec.good) os << rec.query_id << "\tgood\t" << id << '\n';
    for (const auto& id : rec.junk) os << rec.query_id << "\tjunk\t" << id << '\n';
  }
  io::write_file(path, os.str());
}

// Records come back in order of first appearance; source_image is left empty
// (it lives in the query file).
inline std::vector<QueryRecord> read_ground_truth(const std::filesystem::path& path) {
  std::vector<QueryRecord> out;
  std::map<std::string, std::size_t> slot;
  detail::for_each_line(path, [&](const std::vector<std::string>& f, std::size_t lineno) {
    require(f.size() == 3 && (f[1] == "good" || f[1] == "junk"), Errc::kParse,
            detail::where(path, lineno) + ": expected query_id<TAB>good|junk<TAB>image_id");
    auto [it, inserted] = slot.try_emplace(f[0], out.size());
    if (inserted) out.push_back({f[0], {}, {}, {}});
    auto& rec = out[it->second];
    (f[1] == "good" ? rec.good : rec.junk).insert(f[2]);
    require(!(rec.good.count(f[2]) && rec.junk.count(f[2])), Errc::kParse,
            detail::where(path, lineno) + ": image is both good and junk");
  });
  return out;
}

inline std::string format_float(float v) {
  std::ostringstream os;
  os.imbue(std::locale::classic());
  os.precision(9);
  os << v;
  return os.str();
}

inline void write_queries(const std::filesystem::path& path, const std::vector<QuerySpec>& queries) {
  std::ostringstream os;
  for (const auto& q : queries)
    os << q.query_id << '\t' << q.image_id << '\t' << format_float(q.roi.x) << '\t'
       << format_float(q.roi.y) << '\t' << format_float(q.roi.w) << '\t' << format_float(q.roi.h) << '\n';
  io::write_file(path, os.str());
}

inline std::vector<QuerySpec> read_queries(const std::filesystem::path& path) {
  std::vector<QuerySpec> out;
  detail::for_each_line(path, [&](const std::vector<std::string>& f, std::size_t lineno) {
    require(f.size() == 6, Errc::kParse, detail::where(path, lineno) + ": expected 6 fields");
    try {
      out.push_back({f[0], f[1], {std::stof(f[2]), std::stof(f[3]), std::stof(f[4]), std::stof(f[5])}});
    } catch (const std::exception&) {
      throw Error(Errc::kParse, detail::where(path, lineno) + ": bad rectangle");
    }
  });
  return out;
}

// Keeps only keypoints (and their descriptors) inside the rectangle.
inline FeatureSet crop(const FeatureSet& fs, const Rect& roi) {
  FeatureSet out;
  out.image_id = fs.image_id;
  out.width = fs.width;
  out.height = fs.height;
  out.descriptor_dim = fs.descriptor_dim;
  for (std::size_t i = 0; i < fs.size(); ++i) {
    if (!roi.contains(fs.keypoints[i])) continue;
    out.keypoints.push_back(fs.keypoints[i]);
    auto d = fs.descriptor(i);
    out.descriptors.insert(out.descriptors.end(), d.begin(), d.end());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic datasets with planted objects.

struct CountRange {
  std::uint32_t min = 0;
  std::uint32_t max = 0;
};

struct SyntheticDatasetSpec {
  std::uint32_t dataset_size = 50;
  std::uint32_t planted_roi_count = 5;
  std::uint32_t images_per_object = 8;
  std::uint32_t junk_per_object = 1;
  CountRange roi_points_range{30, 40};
  CountRange junk_points_range{1, 3};
  CountRange background_points_range{260, 340};
  std::uint16_t descriptor_dim = 32;
  std::uint32_t image_width = 640;
  std::uint32_t image_height = 480;
  double cluster_spread = 12.0;
  double signature_noise = 0.25;
  // Background clutter: 0 draws every descriptor from N(0, I); T > 0 gives
  // each image T random texture centres and draws each point around one.
  std::uint32_t background_textures = 0;
  double texture_noise = 0.5;
  std::uint64_t seed = 1;
  std::string id_prefix = "img";
};

inline void validate(const SyntheticDatasetSpec& s) {
  auto range_ok = [](CountRange r) { return r.min <= r.max; };
  require(s.dataset_size > 0, Errc::kInvalidArgument, "dataset_size must be positive");
  require(range_ok(s.roi_points_range) && range_ok(s.junk_points_range) &&
              range_ok(s.background_points_range),
          Errc::kInvalidArgument, "empty point-count range");
  require(s.roi_points_range.min >= 4, Errc::kInvalidArgument,
          "planted objects need at least 4 keypoints to count as good");
  require(s.junk_points_range.max < 4 && s.junk_points_range.min >= 1, Errc::kInvalidArgument,
          "junk plants must have 1..3 keypoints");
  require(s.descriptor_dim > 0, Errc::kInvalidArgument, "descriptor_dim must be positive");
  require(s.image_width > 0 && s.image_height > 0, Errc::kInvalidArgument, "image size must be positive");
  require(s.cluster_spread > 0.0 && s.signature_noise > 0.0 && s.texture_noise > 0.0, Errc::kInvalidArgument,
          "spreads must be positive");
  require(s.planted_roi_count == 0 ||
              s.images_per_object + s.junk_per_object <= s.dataset_size,
          Errc::kInvalidArgument, "object occurrences exceed dataset_size");
  require(s.planted_roi_count == 0 || s.images_per_object >= 1, Errc::kInvalidArgument,
          "each object needs at least one good image");
}

struct PlantedObject {
  std::string object_id;
  std::vector<std::string> good_images;
  std::vector<Rect> regions;  // bounding box of the plant in each good image
  std::vector<std::string> junk_images;
};

struct SyntheticDataset {
  std::vector<FeatureSet> images;
  std::vector<PlantedObject> objects;
  // One ROI query per object, cut from its first good image.
  std::vector<QuerySpec> queries;
  std::vector<QueryRecord> records;
};

inline SyntheticDataset synth_generate(const SyntheticDatasetSpec& spec) {
  validate(spec);
  Rng rng(spec.seed);
  const std::size_t dim = spec.descriptor_dim;
  const float max_x = std::nextafter(static_cast<float>(spec.image_width), 0.0f);
  const float max_y = std::nextafter(static_cast<float>(spec.image_height), 0.0f);

  auto draw_count = [&](CountRange r) {
    return r.min + static_cast<std::uint32_t>(uniform_index(rng, r.max - r.min + 1));
  };

  SyntheticDataset ds;
  ds.images.resize(spec.dataset_size);
  const int width = static_cast<int>(std::to_string(spec.dataset_size).size());
  for (std::uint32_t i = 0; i < spec.dataset_size; ++i) {
    auto& fs = ds.images[i];
    std::string num = std::to_string(i);
    fs.image_id = spec.id_prefix + std::string(std::max(0, width - static_cast<int>(num.size())), '0') + num;
    fs.width = spec.image_width;
    fs.height = spec.image_height;
    fs.descriptor_dim = spec.descriptor_dim;
  }

  auto add_point = [&](FeatureSet& fs, float x, float y, const std::vector<double>& center, double noise) {
    fs.keypoints.push_back({x, y});
    for (std::size_t d = 0; d < dim; ++d)
      fs.descriptors.push_back(static_cast<float>(center[d] + noise * standard_normal(rng)));
  };

  std::vector<std::vector<double>> textures(std::max<std::uint32_t>(spec.background_textures, 1),
                                           std::vector<double>(dim, 0.0));
  for (auto& fs : ds.images) {
    if (spec.background_textures > 0)
      for (auto& t : textures)
        for (auto& v : t) v = standard_normal(rng);
    const double noise = spec.background_textures > 0 ? spec.texture_noise : 1.0;
    const auto n = draw_count(spec.background_points_range);
    for (std::uint32_t k = 0; k < n; ++k) {
      const float x = static_cast<float>(uniform01(rng) * spec.image_width);
      const float y = static_cast<float>(uniform01(rng) * spec.image_height);
      const auto& centre = textures[uniform_index(rng, textures.size())];
      add_point(fs, std::min(x, max_x), std::min(y, max_y), centre, noise);
    }
  }

  const double margin_x = std::min(3.0 * spec.cluster_spread, spec.image_width / 2.0);
  const double margin_y = std::min(3.0 * spec.cluster_spread, spec.image_height / 2.0);
  auto plant = [&](FeatureSet& fs, const std::vector<double>& signature, std::uint32_t count) {
    const double cx = margin_x + uniform01(rng) * (spec.image_width - 2.0 * margin_x);
    const double cy = margin_y + uniform01(rng) * (spec.image_height - 2.0 * margin_y);
    Rect box{max_x, max_y, 0.0f, 0.0f};
    float x1 = 0.0f, y1 = 0.0f;
    for (std::uint32_t k = 0; k < count; ++k) {
      const float x = std::clamp(static_cast<float>(cx + spec.cluster_spread * standard_normal(rng)), 0.0f, max_x);
      const float y = std::clamp(static_cast<float>(cy + spec.cluster_spread * standard_normal(rng)), 0.0f, max_y);
      add_point(fs, x, y, signature, spec.signature_noise);
      box.x = std::min(box.x, x);
      box.y = std::min(box.y, y);
      x1 = std::max(x1, x);
      y1 = std::max(y1, y);
    }
    box.w = x1 - box.x;
    box.h = y1 - box.y;
    return box;
  };

  const int obj_width = static_cast<int>(std::to_string(spec.planted_roi_count).size());
  for (std::uint32_t o = 0; o < spec.planted_roi_count; ++o) {
    PlantedObject obj;
    std::string num = std::to_string(o);
    obj.object_id = "obj" + std::string(std::max(0, obj_width - static_cast<int>(num.size())), '0') + num;
    std::vector<double> signature(dim);
    for (auto& v : signature) v = standard_normal(rng);

    // Partial Fisher-Yates draw of distinct host images.
    std::vector<std::uint32_t> order(spec.dataset_size);
    for (std::uint32_t i = 0; i < spec.dataset_size; ++i) order[i] = i;
    const std::uint32_t hosts = spec.images_per_object + spec.junk_per_object;
    for (std::uint32_t i = 0; i < hosts; ++i)
      std::swap(order[i], order[i + uniform_index(rng, spec.dataset_size - i)]);

    for (std::uint32_t i = 0; i < hosts; ++i) {
      auto& fs = ds.images[order[i]];
      if (i < spec.images_per_object) {
        obj.regions.push_back(plant(fs, signature, draw_count(spec.roi_points_range)));
        obj.good_images.push_back(fs.image_id);
      } else {
        plant(fs, signature, draw_count(spec.junk_points_range));
        obj.junk_images.push_back(fs.image_id);
      }
    }

    QuerySpec q{obj.object_id, obj.good_images.front(), obj.regions.front()};
    QueryRecord rec{obj.object_id, q.image_id,
                    {obj.good_images.begin() + 1, obj.good_images.end()},
                    {obj.junk_images.begin(), obj.junk_images.end()}};
    ds.queries.push_back(q);
    ds.records.push_back(std::move(rec));
    ds.objects.push_back(std::move(obj));
  }
  return ds;
}

}  // namespace veroi
