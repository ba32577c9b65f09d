#include "sklp/ingest.hpp"

#include "sklp/errors.hpp"
#include "sklp/parallel.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

namespace sklp::ingest {

template <class T>
void Raster<T>::validate() const {
  if (width < 0 || height < 0 || pixels.size() != static_cast<std::size_t>(width) * height) {
    throw DataError("raster payload holds " + std::to_string(pixels.size()) + " values, expected " +
                    std::to_string(width) + "x" + std::to_string(height));
  }
  if (geotransform.determinant() == 0.0 || !std::isfinite(geotransform.determinant())) {
    throw GeometryError("geotransform is singular (a*e - b*d == 0)");
  }
  if (!(resolution_m > 0.0)) throw ConfigError("resolution_m must be positive");
}

template struct Raster<float>;
template struct Raster<std::uint8_t>;

std::size_t FilterReport::kept_count() const {
  return static_cast<std::size_t>(std::count_if(tiles.begin(), tiles.end(), [](const auto& t) { return t.kept; }));
}

double percentile(std::vector<double> values, double p) {
  if (values.empty()) throw DataError("percentile of an empty set");
  std::sort(values.begin(), values.end());
  const double pos = std::clamp(p, 0.0, 100.0) / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + (values[hi] - values[lo]) * frac;
}

ByteRaster compress_to_u8(const GeoRaster& raster, double p_low, double p_high) {
  if (!(p_low < p_high)) throw ConfigError("p_low must be below p_high");
  if (raster.pixels.empty()) throw DataError("cannot compress an empty raster");
  std::vector<double> finite;
  finite.reserve(raster.pixels.size());
  for (float v : raster.pixels) {
    if (std::isfinite(v)) finite.push_back(v);
  }
  if (finite.empty()) throw DataError("raster holds no finite values");
  const double lo = percentile(finite, p_low);
  const double hi = percentile(finite, p_high);

  ByteRaster out;
  out.width = raster.width;
  out.height = raster.height;
  out.geotransform = raster.geotransform;
  out.resolution_m = raster.resolution_m;
  out.crs = raster.crs;
  out.pixels.resize(raster.pixels.size(), 0);
  if (!(hi > lo)) return out;
  for (std::size_t i = 0; i < raster.pixels.size(); ++i) {
    const double v = raster.pixels[i];
    if (!std::isfinite(v)) continue;
    const double scaled = (std::clamp(v, lo, hi) - lo) / (hi - lo) * 255.0;
    out.pixels[i] = static_cast<std::uint8_t>(std::min(255.0, std::floor(scaled + 0.5)));
  }
  return out;
}

int src_window_px(double resolution_m, double target_extent_m, int patch_size) {
  if (!(resolution_m > 0.0) || !(target_extent_m > 0.0)) {
    throw ConfigError("resolution and target extent must be positive");
  }
  if (patch_size <= 0) throw ConfigError("patch_size must be positive");
  const double px = std::round(target_extent_m / resolution_m);
  const double rounded = std::ceil(px / patch_size) * patch_size;
  if (rounded < patch_size) {
    throw ConfigError("window of " + std::to_string(rounded) + " px is smaller than patch size " +
                      std::to_string(patch_size));
  }
  return static_cast<int>(rounded);
}

std::vector<GeoTile> tile_scene(const ByteRaster& raster, int window_px, const std::string& parent_id, int patch_size) {
  if (window_px < patch_size) {
    throw ConfigError("tile window " + std::to_string(window_px) + " is smaller than patch size " +
                      std::to_string(patch_size));
  }
  raster.validate();
  std::vector<GeoTile> tiles;
  const int rows = raster.height / window_px;
  const int cols = raster.width / window_px;
  const GeoTransform& g = raster.geotransform;
  for (int ti = 0; ti < rows; ++ti) {
    for (int tj = 0; tj < cols; ++tj) {
      GeoTile t;
      t.parent_id = parent_id;
      t.ti = ti;
      t.tj = tj;
      t.raster.width = window_px;
      t.raster.height = window_px;
      t.raster.resolution_m = raster.resolution_m;
      t.raster.crs = raster.crs;
      const double dc = static_cast<double>(tj) * window_px;
      const double dr = static_cast<double>(ti) * window_px;
      t.raster.geotransform = {g.c + g.a * dc + g.b * dr, g.a, g.b, g.f + g.d * dc + g.e * dr, g.d, g.e};
      t.raster.pixels.resize(static_cast<std::size_t>(window_px) * window_px);
      for (int r = 0; r < window_px; ++r) {
        const auto* src = raster.pixels.data() + static_cast<std::size_t>(ti * window_px + r) * raster.width +
                          static_cast<std::size_t>(tj) * window_px;
        std::copy(src, src + window_px, t.raster.pixels.begin() + static_cast<std::ptrdiff_t>(r) * window_px);
      }
      tiles.push_back(std::move(t));
    }
  }
  return tiles;
}

std::pair<double, double> pixel_to_geo(const GeoTransform& gt, double col, double row) {
  return {gt.c + gt.a * col + gt.b * row, gt.f + gt.d * col + gt.e * row};
}

std::pair<double, double> geo_to_pixel(const GeoTransform& gt, double x, double y) {
  const double det = gt.determinant();
  if (det == 0.0 || !std::isfinite(det)) throw GeometryError("geotransform is singular");
  const double dx = x - gt.c;
  const double dy = y - gt.f;
  return {(gt.e * dx - gt.b * dy) / det, (gt.a * dy - gt.d * dx) / det};
}

GlcmFeatures glcm_features(std::span<const std::uint8_t> pixels, int width, int height, int levels,
                           std::span<const Offset> offsets) {
  if (levels < 2) throw ConfigError("GLCM needs at least 2 levels");
  if (width < 2 || height < 2) throw DataError("GLCM needs a tile of at least 2x2");
  if (pixels.size() != static_cast<std::size_t>(width) * height) throw DataError("tile payload size mismatch");
  if (offsets.empty()) throw ConfigError("GLCM needs at least one offset");
  const auto L = static_cast<std::size_t>(levels);
  std::vector<int> q(pixels.size());
  for (std::size_t i = 0; i < pixels.size(); ++i) q[i] = pixels[i] * levels / 256;

  GlcmFeatures avg;
  std::vector<double> m(L * L);
  for (const auto& [dr, dc] : offsets) {
    std::fill(m.begin(), m.end(), 0.0);
    double pairs = 0.0;
    for (int r = std::max(0, -dr); r < std::min(height, height - dr); ++r) {
      for (int c = std::max(0, -dc); c < std::min(width, width - dc); ++c) {
        const auto a = static_cast<std::size_t>(q[static_cast<std::size_t>(r) * width + c]);
        const auto b = static_cast<std::size_t>(q[static_cast<std::size_t>(r + dr) * width + c + dc]);
        m[a * L + b] += 1.0;
        m[b * L + a] += 1.0;
        pairs += 2.0;
      }
    }
    if (pairs == 0.0) throw DataError("GLCM offset produces no pixel pairs on this tile");
    GlcmFeatures f;
    for (std::size_t i = 0; i < L; ++i) {
      for (std::size_t j = 0; j < L; ++j) {
        const double p = m[i * L + j] / pairs;
        if (p == 0.0) continue;
        const double diff = static_cast<double>(i) - static_cast<double>(j);
        f.contrast += p * diff * diff;
        f.energy += p * p;
        f.homogeneity += p / (1.0 + std::abs(diff));
        f.entropy -= p * std::log(p);
      }
    }
    avg.contrast += f.contrast;
    avg.energy += f.energy;
    avg.homogeneity += f.homogeneity;
    avg.entropy += f.entropy;
  }
  const auto n = static_cast<double>(offsets.size());
  avg.contrast /= n;
  avg.energy /= n;
  avg.homogeneity /= n;
  avg.entropy /= n;
  return avg;
}

TileFeatures tile_features(const ByteRaster& tile, int levels, std::span<const Offset> offsets) {
  const GlcmFeatures g = glcm_features(tile.pixels, tile.width, tile.height, levels, offsets);
  TileFeatures f{g.contrast, g.energy, g.homogeneity, g.entropy, 0.0, 0.0};
  double sum = 0.0;
  for (std::uint8_t v : tile.pixels) sum += v;
  f.mean = sum / static_cast<double>(tile.pixels.size());
  double ss = 0.0;
  for (std::uint8_t v : tile.pixels) ss += (v - f.mean) * (v - f.mean);
  f.stddev = std::sqrt(ss / static_cast<double>(tile.pixels.size()));
  return f;
}

namespace {

// Sum in sorted order so the result does not depend on input order.
double ordered_mean(std::vector<double> xs) {
  std::sort(xs.begin(), xs.end());
  return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
}

}  // namespace

FilterReport knn_filter(std::span<const TileFeatures> features, const KnnFilterOptions& options) {
  if (options.k < 1) throw ConfigError("knn k must be at least 1");
  FilterReport report;
  std::vector<std::size_t> survivors;
  for (std::size_t i = 0; i < features.size(); ++i) {
    FilterDecision d;
    d.features = features[i];
    if (features[i].glcm_entropy < options.entropy_floor) {
      d.kept = false;
      d.reason = "low_information";
    } else {
      survivors.push_back(i);
    }
    report.tiles.push_back(std::move(d));
  }
  if (survivors.size() < static_cast<std::size_t>(options.k) + 1) {
    report.knn_stage_skipped = true;
    return report;
  }

  constexpr std::size_t kDims = 6;
  std::vector<std::vector<double>> z(survivors.size());
  for (std::size_t s = 0; s < survivors.size(); ++s) z[s] = features[survivors[s]].as_vector();
  for (std::size_t dim = 0; dim < kDims; ++dim) {
    std::vector<double> col(survivors.size());
    for (std::size_t s = 0; s < survivors.size(); ++s) col[s] = z[s][dim];
    const double mean = ordered_mean(col);
    std::vector<double> sq(col.size());
    for (std::size_t s = 0; s < col.size(); ++s) sq[s] = (col[s] - mean) * (col[s] - mean);
    const double sd = std::sqrt(ordered_mean(sq));
    for (std::size_t s = 0; s < survivors.size(); ++s) z[s][dim] = sd > 0.0 ? (col[s] - mean) / sd : 0.0;
  }

  std::vector<double> scores(survivors.size());
  std::vector<double> dist;
  for (std::size_t s = 0; s < survivors.size(); ++s) {
    dist.clear();
    for (std::size_t o = 0; o < survivors.size(); ++o) {
      if (o == s) continue;
      double acc = 0.0;
      for (std::size_t dim = 0; dim < kDims; ++dim) acc += (z[s][dim] - z[o][dim]) * (z[s][dim] - z[o][dim]);
      dist.push_back(std::sqrt(acc));
    }
    std::partial_sort(dist.begin(), dist.begin() + options.k, dist.end());
    double sum = 0.0;
    for (int i = 0; i < options.k; ++i) sum += dist[static_cast<std::size_t>(i)];
    scores[s] = sum / options.k;
  }
  const double cut = percentile(scores, options.outlier_percentile);
  for (std::size_t s = 0; s < survivors.size(); ++s) {
    FilterDecision& d = report.tiles[survivors[s]];
    d.knn_score = scores[s];
    if (scores[s] > cut) {
      d.kept = false;
      d.reason = "structural_outlier";
    }
  }
  return report;
}

// ---- files ------------------------------------------------------------------------

nlohmann::json sidecar_json(const GeoTransform& gt, int width, int height, double resolution_m, const std::string& crs) {
  return {{"width", width},
          {"height", height},
          {"geotransform", {gt.c, gt.a, gt.b, gt.f, gt.d, gt.e}},
          {"resolution_m", resolution_m},
          {"crs", crs}};
}

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw IoError("cannot open " + p.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

static_assert(std::endian::native == std::endian::little, "raw payload I/O assumes a little-endian host");

}  // namespace

GeoRaster read_scene(const std::filesystem::path& payload, const std::filesystem::path& sidecar) {
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(slurp(sidecar));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("sidecar " + sidecar.string() + ": " + e.what());
  }
  GeoRaster r;
  try {
    r.width = meta.at("width").get<int>();
    r.height = meta.at("height").get<int>();
    const auto gt = meta.at("geotransform").get<std::vector<double>>();
    if (gt.size() != 6) throw FormatError("geotransform must hold 6 numbers");
    r.geotransform = {gt[0], gt[1], gt[2], gt[3], gt[4], gt[5]};
    r.resolution_m = meta.at("resolution_m").get<double>();
    r.crs = meta.at("crs").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("sidecar " + sidecar.string() + ": " + e.what());
  }
  if (r.crs != "EPSG:4326") throw DataError("scene CRS must be EPSG:4326, got " + r.crs);
  const std::string bytes = slurp(payload);
  if (bytes.size() != static_cast<std::size_t>(r.width) * r.height * 4) {
    throw DataError("payload size " + std::to_string(bytes.size()) + " does not match " +
                    std::to_string(r.width) + "x" + std::to_string(r.height) + " f32");
  }
  r.pixels.resize(static_cast<std::size_t>(r.width) * r.height);
  std::memcpy(r.pixels.data(), bytes.data(), bytes.size());
  r.validate();
  return r;
}

void write_scene(const GeoRaster& raster, const std::filesystem::path& payload, const std::filesystem::path& sidecar) {
  raster.validate();
  std::ofstream f(payload, std::ios::binary);
  if (!f) throw IoError("cannot write " + payload.string());
  f.write(reinterpret_cast<const char*>(raster.pixels.data()),
          static_cast<std::streamsize>(raster.pixels.size() * sizeof(float)));
  std::ofstream s(sidecar, std::ios::binary);
  if (!s) throw IoError("cannot write " + sidecar.string());
  s << sidecar_json(raster.geotransform, raster.width, raster.height, raster.resolution_m, raster.crs).dump() << '\n';
}

void write_pgm(const ByteRaster& raster, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << "P5\n" << raster.width << ' ' << raster.height << "\n255\n";
  f.write(reinterpret_cast<const char*>(raster.pixels.data()), static_cast<std::streamsize>(raster.pixels.size()));
}

ByteRaster read_pgm(const std::filesystem::path& path) {
  const std::string bytes = slurp(path);
  std::istringstream in(bytes);
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (magic != "P5" || maxval != 255 || w <= 0 || h <= 0) throw FormatError("not an 8-bit binary PGM: " + path.string());
  in.get();
  ByteRaster r;
  r.width = w;
  r.height = h;
  r.pixels.resize(static_cast<std::size_t>(w) * h);
  in.read(reinterpret_cast<char*>(r.pixels.data()), static_cast<std::streamsize>(r.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(r.pixels.size())) throw FormatError("PGM payload truncated");
  return r;
}

IngestSummary run_ingest(const IngestOptions& o) {
  const GeoRaster scene = read_scene(o.scene, o.sidecar);
  const ByteRaster bytes = compress_to_u8(scene, o.p_low, o.p_high);
  const int window = src_window_px(scene.resolution_m, o.extent_m, o.patch_size);
  const std::string parent_id = o.scene.stem().string();
  const std::vector<GeoTile> tiles = tile_scene(bytes, window, parent_id, o.patch_size);

  std::vector<TileFeatures> feats(tiles.size());
  parallel_for(tiles.size(), o.threads, [&](std::size_t i) { feats[i] = tile_features(tiles[i].raster, o.levels); });
  const FilterReport report = knn_filter(feats, o.filter);

  std::filesystem::create_directories(o.out_dir);
  std::ofstream manifest(o.out_dir / "manifest.jsonl", std::ios::binary);
  if (!manifest) throw IoError("cannot write manifest in " + o.out_dir.string());
  for (std::size_t i = 0; i < tiles.size(); ++i) {
    const GeoTile& t = tiles[i];
    const std::string name = parent_id + "_" + std::to_string(t.ti) + "_" + std::to_string(t.tj) + ".pgm";
    write_pgm(t.raster, o.out_dir / name);
    const FilterDecision& d = report.tiles[i];
    const GeoTransform& g = t.raster.geotransform;
    nlohmann::json line{
        {"tile_path", name},
        {"parent_id", t.parent_id},
        {"ti", t.ti},
        {"tj", t.tj},
        {"geotransform", {g.c, g.a, g.b, g.f, g.d, g.e}},
        {"resolution_m", t.raster.resolution_m},
        {"features",
         {{"glcm_contrast", d.features.glcm_contrast},
          {"glcm_energy", d.features.glcm_energy},
          {"glcm_homogeneity", d.features.glcm_homogeneity},
          {"glcm_entropy", d.features.glcm_entropy},
          {"mean", d.features.mean},
          {"stddev", d.features.stddev}}},
        {"knn_score", d.knn_score ? nlohmann::json(*d.knn_score) : nlohmann::json(nullptr)},
        {"kept", d.kept},
        {"reason", d.reason ? nlohmann::json(*d.reason) : nlohmann::json(nullptr)}};
    manifest << line.dump() << '\n';
  }
  return {tiles.size(), report.kept_count(), window, report.knn_stage_skipped};
}

}  // namespace sklp::ingest
