#pragma once

#include "veroi/binary_io.hpp"
#include "veroi/common.hpp"
#include "veroi/search.hpp"
#include "veroi/voronoi.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace veroi {

enum class IndexKind : std::uint8_t {
  kVoronoi = 0,  // every cell stored
  kGrid = 1,     // rectangular multi-level grid
  kLeaves = 2,   // terminal Voronoi cells only, rebuilt by level projection
};

// Dataset index as stored on disk. Exactly one of the image vectors is used:
// `voronoi` for kVoronoi and kLeaves (after reconstruction), `grid` for kGrid,
// `quantized` when codes are stored.
struct IndexFile {
  IndexKind kind = IndexKind::kVoronoi;
  std::uint32_t levels = 1;
  std::uint32_t branching = 0;
  std::uint32_t dim = 0;
  std::uint32_t blocks = 0;  // M when quantized, else 0
  bool quantized = false;
  Vec mean_offset;           // kLeaves, unquantized: R^T mean
  std::vector<VoronoiIndex> voronoi;
  std::vector<LeafSet> leaves;  // kLeaves, unquantized
  std::vector<MultiIndex> grid;
  std::vector<QuantizedIndex> codes;

  std::size_t image_count() const {
    if (quantized) return codes.size();
    switch (kind) {
      case IndexKind::kGrid: return grid.size();
      case IndexKind::kLeaves: return leaves.size();
      default: return voronoi.size();
    }
  }
  std::size_t cells_per_image() const {
    return kind == IndexKind::kGrid ? grid_block_count(levels) : TreeShape{levels, branching}.node_count();
  }
};

inline constexpr std::string_view kIndexMagic = "VIDX";
inline constexpr std::uint16_t kIndexVersion = 1;

namespace detail {

inline void put_bits(io::ByteWriter& w, const std::vector<bool>& bits) {
  std::vector<std::uint8_t> bytes((bits.size() + 7) / 8, 0);
  for (std::size_t i = 0; i < bits.size(); ++i)
    if (bits[i]) bytes[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
  for (auto b : bytes) w.put<std::uint8_t>(b);
}

inline std::vector<bool> get_bits(io::ByteReader& r, std::size_t n) {
  std::vector<bool> bits(n);
  for (std::size_t byte = 0; byte < (n + 7) / 8; ++byte) {
    const auto b = r.get<std::uint8_t>();
    for (std::size_t k = 0; k < 8 && byte * 8 + k < n; ++k) bits[byte * 8 + k] = (b >> k) & 1u;
  }
  return bits;
}

inline void put_vec(io::ByteWriter& w, const Vec& v) {
  for (Eigen::Index i = 0; i < v.size(); ++i) w.put<float>(static_cast<float>(v(i)));
}

inline Vec get_vec(io::ByteReader& r, std::size_t n) {
  Vec v(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) v(static_cast<Eigen::Index>(i)) = r.get<float>();
  return v;
}

inline std::vector<bool> cell_empty_flags(const std::vector<CellDescriptor>& cells) {
  std::vector<bool> e;
  for (const auto& c : cells) e.push_back(c.empty);
  return e;
}

}  // namespace detail

// Header: magic, version u16, kind u8, quantized u8, L u32, V u32, D u32,
// M u32, image count u32, then (kLeaves, unquantized) the D-float mean
// offset. Per image: id, present bitmap, empty bitmap, u32 counts, then
// f32 descriptors (or M code bytes) for every present cell, or only for
// terminal cells with kLeaves.
inline std::string encode_index(const IndexFile& f) {
  io::ByteWriter w;
  w.put_bytes(kIndexMagic);
  w.put<std::uint16_t>(kIndexVersion);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(f.kind));
  w.put<std::uint8_t>(f.quantized ? 1 : 0);
  w.put<std::uint32_t>(f.levels);
  w.put<std::uint32_t>(f.branching);
  w.put<std::uint32_t>(f.dim);
  w.put<std::uint32_t>(f.blocks);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(f.image_count()));
  const auto n = f.cells_per_image();
  const TreeShape shape{f.levels, f.branching};

  if (f.quantized) {
    for (const auto& img : f.codes) {
      require(img.codes.size() == n, Errc::kDimMismatch, "code count does not match the index shape");
      w.put_string16(img.image_id);
      detail::put_bits(w, img.present);
      std::vector<bool> empty;
      for (const auto& c : img.codes) empty.push_back(c.empty);
      detail::put_bits(w, empty);
      for (auto c : img.counts) w.put<std::uint32_t>(c);
      for (std::size_t i = 0; i < n; ++i) {
        if (!img.present[i]) continue;
        if (f.kind == IndexKind::kLeaves && !is_terminal(shape, img.present, i)) continue;
        for (auto b : img.codes[i].codes) w.put<std::uint8_t>(b);
      }
    }
    return w.bytes();
  }

  switch (f.kind) {
    case IndexKind::kVoronoi:
      for (const auto& img : f.voronoi) {
        w.put_string16(img.image_id);
        detail::put_bits(w, img.present);
        detail::put_bits(w, detail::cell_empty_flags(img.cells));
        for (const auto& c : img.cells) w.put<std::uint32_t>(c.point_count);
        for (std::size_t i = 0; i < n; ++i)
          if (img.present[i]) detail::put_vec(w, img.cells[i].descriptor);
      }
      break;
    case IndexKind::kGrid:
      for (const auto& img : f.grid) {
        w.put_string16(img.image_id);
        detail::put_bits(w, std::vector<bool>(n, true));
        detail::put_bits(w, detail::cell_empty_flags(img.cells));
        for (const auto& c : img.cells) w.put<std::uint32_t>(c.point_count);
        for (const auto& c : img.cells) detail::put_vec(w, c.descriptor);
      }
      break;
    case IndexKind::kLeaves:
      detail::put_vec(w, f.mean_offset);
      for (const auto& img : f.leaves) {
        w.put_string16(img.image_id);
        detail::put_bits(w, img.present);
        std::vector<bool> empty(n);
        for (std::size_t i = 0; i < n; ++i) empty[i] = !img.present[i] || img.counts[i] == 0;
        detail::put_bits(w, empty);
        for (auto c : img.counts) w.put<std::uint32_t>(c);
        for (std::size_t i = 0; i < n; ++i)
          if (is_terminal(shape, img.present, i)) detail::put_vec(w, img.vectors[i]);
      }
      break;
  }
  return w.bytes();
}

inline IndexFile decode_index(std::string_view bytes) {
  io::ByteReader r(bytes);
  r.expect_magic(kIndexMagic);
  io::check_version(r.get<std::uint16_t>(), kIndexVersion, "index");
  IndexFile f;
  const auto kind = r.get<std::uint8_t>();
  require(kind <= 2, Errc::kInvalidArgument, "unknown index kind " + std::to_string(kind));
  f.kind = static_cast<IndexKind>(kind);
  f.quantized = r.get<std::uint8_t>() != 0;
  f.levels = r.get<std::uint32_t>();
  f.branching = r.get<std::uint32_t>();
  f.dim = r.get<std::uint32_t>();
  f.blocks = r.get<std::uint32_t>();
  const auto count = r.get<std::uint32_t>();
  require(f.levels >= 1 && f.levels <= 16, Errc::kInvalidArgument, "implausible level count");
  require(f.kind == IndexKind::kGrid || f.branching >= 2, Errc::kInvalidArgument, "tree index needs V >= 2");
  require(!f.quantized || f.blocks >= 1, Errc::kInvalidArgument, "quantized index needs M >= 1");
  const auto n = f.cells_per_image();
  const TreeShape shape{f.levels, f.branching};

  if (f.kind == IndexKind::kLeaves && !f.quantized) f.mean_offset = detail::get_vec(r, f.dim);
  for (std::uint32_t img = 0; img < count; ++img) {
    const auto id = r.get_string16();
    auto present = detail::get_bits(r, n);
    const auto empty = detail::get_bits(r, n);
    std::vector<std::uint32_t> counts(n);
    for (auto& c : counts) c = r.get<std::uint32_t>();
    if (f.quantized) {
      QuantizedIndex q{id, shape, present, counts, std::vector<PQCode>(n)};
      for (std::size_t i = 0; i < n; ++i) {
        q.codes[i].empty = empty[i];
        const bool stored = present[i] && (f.kind != IndexKind::kLeaves || is_terminal(shape, present, i));
        if (!stored) {
          q.codes[i].empty = true;
          continue;
        }
        const auto raw = r.get_bytes(f.blocks);
        q.codes[i].codes.assign(raw.begin(), raw.end());
      }
      f.codes.push_back(std::move(q));
      continue;
    }
    switch (f.kind) {
      case IndexKind::kVoronoi:
      case IndexKind::kGrid: {
        std::vector<CellDescriptor> cells(n);
        for (std::size_t i = 0; i < n; ++i) {
          cells[i].point_count = counts[i];
          cells[i].empty = empty[i];
          cells[i].descriptor = present[i] ? detail::get_vec(r, f.dim) : Vec::Zero(f.dim);
        }
        if (f.kind == IndexKind::kGrid)
          f.grid.push_back({id, f.levels, std::move(cells)});
        else
          f.voronoi.push_back({id, shape, std::move(present), std::move(cells)});
        break;
      }
      case IndexKind::kLeaves: {
        LeafSet leaves{id, shape, present, counts, std::vector<Vec>(n), f.mean_offset};
        for (std::size_t i = 0; i < n; ++i)
          if (is_terminal(shape, present, i)) leaves.vectors[i] = detail::get_vec(r, f.dim);
        f.voronoi.push_back(level_project(leaves));
        f.leaves.push_back(std::move(leaves));
        break;
      }
    }
  }
  r.expect_end();
  return f;
}

inline void save_index(const IndexFile& f, const std::filesystem::path& path) { io::write_file(path, encode_index(f)); }

inline IndexFile load_index(const std::filesystem::path& path) { return decode_index(io::read_file(path)); }

}  // namespace veroi
