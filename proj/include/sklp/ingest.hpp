#pragma once

// Scene ingestion: dynamic-range compression to 8 bits, resolution
// consistent tiling, affine pixel/geo mapping, texture statistics and the
// low-information filter.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

namespace sklp::ingest {

/// X = c + a·col + b·row,  Y = f + d·col + e·row
struct GeoTransform {
  double c = 0, a = 1, b = 0, f = 0, d = 0, e = -1;

  double determinant() const { return a * e - b * d; }
  bool operator==(const GeoTransform&) const = default;
};

template <class T>
struct Raster {
  int width = 0;
  int height = 0;
  std::vector<T> pixels;  // row-major
  GeoTransform geotransform;
  double resolution_m = 1.0;
  std::string crs = "EPSG:4326";

  T at(int row, int col) const { return pixels[static_cast<std::size_t>(row) * width + col]; }
  /// Throws GeometryError for a singular transform, ConfigError for a bad
  /// resolution and DataError when the payload size is wrong.
  void validate() const;
};

using GeoRaster = Raster<float>;
using ByteRaster = Raster<std::uint8_t>;

struct GeoTile {
  ByteRaster raster;
  std::string parent_id;
  int ti = 0;
  int tj = 0;
};

struct GlcmFeatures {
  double contrast = 0;
  double energy = 0;
  double homogeneity = 0;
  double entropy = 0;
};

struct TileFeatures {
  double glcm_contrast = 0;
  double glcm_energy = 0;
  double glcm_homogeneity = 0;
  double glcm_entropy = 0;
  double mean = 0;
  double stddev = 0;

  std::vector<double> as_vector() const {
    return {glcm_contrast, glcm_energy, glcm_homogeneity, glcm_entropy, mean, stddev};
  }
  bool operator==(const TileFeatures&) const = default;
};

struct FilterDecision {
  TileFeatures features;
  std::optional<double> knn_score;
  bool kept = true;
  std::optional<std::string> reason;  // "low_information" | "structural_outlier"
};

struct FilterReport {
  std::vector<FilterDecision> tiles;
  bool knn_stage_skipped = false;

  std::size_t kept_count() const;
};

struct KnnFilterOptions {
  int k = 5;
  double entropy_floor = 0.5;
  double outlier_percentile = 99.0;
};

/// (row offset, column offset)
using Offset = std::pair<int, int>;
inline const std::vector<Offset> kDefaultOffsets{{0, 1}, {1, 0}};

/// Linear-interpolated empirical percentile of `values` (p in [0,100]).
double percentile(std::vector<double> values, double p);

ByteRaster compress_to_u8(const GeoRaster& raster, double p_low = 1.0, double p_high = 99.0);
int src_window_px(double resolution_m, double target_extent_m = 1024.0, int patch_size = 16);
std::vector<GeoTile> tile_scene(const ByteRaster& raster, int window_px, const std::string& parent_id,
                                int patch_size = 16);

std::pair<double, double> pixel_to_geo(const GeoTransform& gt, double col, double row);
std::pair<double, double> geo_to_pixel(const GeoTransform& gt, double x, double y);

GlcmFeatures glcm_features(std::span<const std::uint8_t> pixels, int width, int height, int levels = 32,
                           std::span<const Offset> offsets = kDefaultOffsets);
TileFeatures tile_features(const ByteRaster& tile, int levels = 32, std::span<const Offset> offsets = kDefaultOffsets);

FilterReport knn_filter(std::span<const TileFeatures> features, const KnnFilterOptions& options = {});

// ---- files ----------------------------------------------------------------

nlohmann::json sidecar_json(const GeoTransform& gt, int width, int height, double resolution_m, const std::string& crs);
/// Raw little-endian f32 payload plus JSON sidecar.
GeoRaster read_scene(const std::filesystem::path& payload, const std::filesystem::path& sidecar);
void write_scene(const GeoRaster& raster, const std::filesystem::path& payload, const std::filesystem::path& sidecar);
void write_pgm(const ByteRaster& raster, const std::filesystem::path& path);
ByteRaster read_pgm(const std::filesystem::path& path);

struct IngestOptions {
  std::filesystem::path scene;
  std::filesystem::path sidecar;
  std::filesystem::path out_dir;
  double extent_m = 1024.0;
  double p_low = 1.0;
  double p_high = 99.0;
  int levels = 32;
  int patch_size = 16;
  KnnFilterOptions filter;
  unsigned threads = 1;
};

struct IngestSummary {
  std::size_t tiles = 0;
  std::size_t kept = 0;
  int window_px = 0;
  bool knn_stage_skipped = false;
};

/// Full pipeline. Writes one PGM per tile and `manifest.jsonl` into out_dir.
IngestSummary run_ingest(const IngestOptions& options);

}  // namespace sklp::ingest
