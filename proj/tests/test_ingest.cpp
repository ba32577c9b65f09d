#include "glcm_oracle.hpp"

#include "doctest.h"

#include "sklp/errors.hpp"
#include "sklp/ingest.hpp"
#include "sklp/rng.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

using namespace sklp;
using namespace sklp::ingest;

namespace {

GeoRaster ramp_raster(int w, int h) {
  GeoRaster r;
  r.width = w;
  r.height = h;
  r.pixels.resize(static_cast<std::size_t>(w) * h);
  for (std::size_t i = 0; i < r.pixels.size(); ++i) r.pixels[i] = static_cast<float>(i);
  return r;
}

ByteRaster byte_raster(int w, int h, std::uint8_t fill = 0) {
  ByteRaster r;
  r.width = w;
  r.height = h;
  r.pixels.assign(static_cast<std::size_t>(w) * h, fill);
  return r;
}

}  // namespace

TEST_CASE("compress_to_u8 examples") {
  GeoRaster r;
  r.width = 101;
  r.height = 1;
  for (int v = 0; v <= 100; ++v) r.pixels.push_back(static_cast<float>(v));
  const ByteRaster out = compress_to_u8(r, 0.0, 100.0);
  CHECK(out.pixels[50] == 128);
  CHECK(out.pixels[0] == 0);
  CHECK(out.pixels[100] == 255);

  GeoRaster flat = ramp_raster(4, 4);
  std::fill(flat.pixels.begin(), flat.pixels.end(), 7.5f);
  for (auto v : compress_to_u8(flat).pixels) CHECK(v == 0);

  GeoRaster nan = ramp_raster(2, 2);
  std::fill(nan.pixels.begin(), nan.pixels.end(), std::nanf(""));
  CHECK_THROWS_AS(compress_to_u8(nan), DataError);
  CHECK_THROWS_AS(compress_to_u8(r, 50.0, 50.0), ConfigError);
}

TEST_CASE("compress_to_u8 is monotone and in range") {
  Rng rng(11);
  GeoRaster r = ramp_raster(64, 64);
  for (auto& v : r.pixels) v = static_cast<float>(std::exp(3.0 * rng.normal()));
  const ByteRaster out = compress_to_u8(r);
  for (std::size_t i = 0; i < r.pixels.size(); ++i) {
    for (std::size_t j = i + 1; j < std::min(r.pixels.size(), i + 40); ++j) {
      if (r.pixels[i] <= r.pixels[j]) {
        CHECK(out.pixels[i] <= out.pixels[j]);
      } else {
        CHECK(out.pixels[i] >= out.pixels[j]);
      }
    }
  }
}

TEST_CASE("src_window_px") {
  CHECK(src_window_px(1.0, 1024.0) == 1024);
  CHECK(src_window_px(0.2, 1024.0) == 5120);
  CHECK(src_window_px(3.0, 1024.0) == 352);
  CHECK(src_window_px(3.0, 1024.0) % 16 == 0);
  CHECK_THROWS_AS(src_window_px(0.0, 1024.0), ConfigError);
  CHECK_THROWS_AS(src_window_px(1.0, -5.0), ConfigError);
  CHECK(src_window_px(1000.0, 1024.0) == 16);
  CHECK_THROWS_AS(src_window_px(5000.0, 1024.0), ConfigError);
}

TEST_CASE("tile_scene examples") {
  ByteRaster big = byte_raster(2048, 2048);
  big.geotransform = {100.0, 0.5, 0.0, 40.0, 0.0, -0.5};
  const auto tiles = tile_scene(big, 1024, "scene");
  REQUIRE(tiles.size() == 4);
  CHECK(tiles[1].ti == 0);
  CHECK(tiles[1].tj == 1);
  CHECK(tiles[1].raster.geotransform.c == doctest::Approx(100.0 + 0.5 * 1024));
  CHECK(tiles[1].raster.geotransform.f == doctest::Approx(40.0));
  CHECK(tiles[2].raster.geotransform.f == doctest::Approx(40.0 - 0.5 * 1024));

  CHECK(tile_scene(byte_raster(1000, 1000), 1024, "small").empty());
  CHECK_THROWS_AS(tile_scene(big, 8, "x"), ConfigError);
}

TEST_CASE("tiling is a partition with consistent corners") {
  Rng rng(3);
  ByteRaster r = byte_raster(150, 97);
  for (auto& v : r.pixels) v = static_cast<std::uint8_t>(rng.below(256));
  r.geotransform = {12.5, 0.001, 0.0002, 41.0, -0.0003, -0.001};
  const int window = 32;
  const auto tiles = tile_scene(r, window, "p");
  CHECK(tiles.size() == static_cast<std::size_t>((150 / window) * (97 / window)));

  std::vector<int> covered(r.pixels.size(), 0);
  for (const auto& t : tiles) {
    for (int row = 0; row < window; ++row) {
      for (int col = 0; col < window; ++col) {
        const int pr = t.ti * window + row;
        const int pc = t.tj * window + col;
        covered[static_cast<std::size_t>(pr) * r.width + pc] += 1;
        CHECK(t.raster.at(row, col) == r.at(pr, pc));
      }
    }
    for (auto [col, row] : {std::pair{0, 0}, {window, 0}, {0, window}, {window, window}}) {
      const auto child = pixel_to_geo(t.raster.geotransform, col, row);
      const auto parent = pixel_to_geo(r.geotransform, t.tj * window + col, t.ti * window + row);
      CHECK(std::abs(child.first - parent.first) <= 1e-9);
      CHECK(std::abs(child.second - parent.second) <= 1e-9);
    }
  }
  const int crop_h = (97 / window) * window;
  const int crop_w = (150 / window) * window;
  for (int row = 0; row < r.height; ++row) {
    for (int col = 0; col < r.width; ++col) {
      CHECK(covered[static_cast<std::size_t>(row) * r.width + col] == ((row < crop_h && col < crop_w) ? 1 : 0));
    }
  }
}

TEST_CASE("pixel and geo mapping") {
  const GeoTransform gt{100, 1, 0, 200, 0, -1};
  CHECK(pixel_to_geo(gt, 0, 0) == std::pair{100.0, 200.0});
  CHECK(pixel_to_geo(gt, 10, 5) == std::pair{110.0, 195.0});
  CHECK(geo_to_pixel(gt, 100, 200) == std::pair{0.0, 0.0});
  CHECK(geo_to_pixel(gt, 110, 195) == std::pair{10.0, 5.0});
  CHECK_THROWS_AS(geo_to_pixel({0, 1, 2, 0, 2, 4}, 1, 1), GeometryError);

  Rng rng(5);
  for (int i = 0; i < 1000; ++i) {
    GeoTransform g{rng.uniform(-180, 180), rng.uniform(-1, 1), rng.uniform(-1, 1),
                   rng.uniform(-90, 90),   rng.uniform(-1, 1), rng.uniform(-1, 1)};
    if (std::abs(g.determinant()) < 1e-3) continue;
    const double col = rng.uniform(0, 5000), row = rng.uniform(0, 5000);
    const auto [x, y] = pixel_to_geo(g, col, row);
    const auto [c2, r2] = geo_to_pixel(g, x, y);
    CHECK(std::abs(c2 - col) <= 1e-9 * std::max(1.0, std::abs(col)));
    CHECK(std::abs(r2 - row) <= 1e-9 * std::max(1.0, std::abs(row)));
  }
}

TEST_CASE("glcm closed forms") {
  const std::vector<std::uint8_t> flat(16, 77);
  const auto f = glcm_features(flat, 4, 4);
  CHECK(f.contrast == 0.0);
  CHECK(f.energy == doctest::Approx(1.0));
  CHECK(f.homogeneity == doctest::Approx(1.0));
  CHECK(f.entropy == 0.0);

  const std::vector<std::uint8_t> split{0, 0, 255, 255};
  const std::vector<Offset> horizontal{{0, 1}};
  const auto g = glcm_features(split, 2, 2, 2, horizontal);
  CHECK(g.contrast == 0.0);
  CHECK(g.energy == doctest::Approx(0.5));
  CHECK(g.entropy == doctest::Approx(std::log(2.0)));

  CHECK_THROWS_AS(glcm_features(std::vector<std::uint8_t>{1}, 1, 1), DataError);
  CHECK_THROWS_AS(glcm_features(std::vector<std::uint8_t>{1, 2}, 2, 1), DataError);
}

TEST_CASE("glcm matches brute-force oracle on random tiles") {
  Rng rng(21);
  for (int trial = 0; trial < 200; ++trial) {
    const int w = 2 + static_cast<int>(rng.below(7));
    const int h = 2 + static_cast<int>(rng.below(7));
    const int levels = 2 + static_cast<int>(rng.below(3));
    std::vector<std::uint8_t> px(static_cast<std::size_t>(w) * h);
    for (auto& v : px) v = static_cast<std::uint8_t>(rng.below(256));
    const auto got = glcm_features(px, w, h, levels);
    const auto want = oracle::glcm(px, w, h, levels, kDefaultOffsets);
    CHECK(std::abs(got.contrast - want.contrast) <= 1e-12);
    CHECK(std::abs(got.energy - want.energy) <= 1e-12);
    CHECK(std::abs(got.homogeneity - want.homogeneity) <= 1e-12);
    CHECK(std::abs(got.entropy - want.entropy) <= 1e-12);
  }
}

TEST_CASE("glcm is invariant to feature-extraction order") {
  Rng rng(8);
  std::vector<ByteRaster> tiles;
  for (int i = 0; i < 12; ++i) {
    ByteRaster t = byte_raster(16, 16);
    for (auto& v : t.pixels) v = static_cast<std::uint8_t>(rng.below(256));
    tiles.push_back(t);
  }
  std::vector<TileFeatures> forward, backward(tiles.size());
  for (const auto& t : tiles) forward.push_back(tile_features(t));
  for (std::size_t i = tiles.size(); i-- > 0;) backward[i] = tile_features(tiles[i]);
  CHECK(forward == backward);
}

TEST_CASE("knn filter") {
  TileFeatures textured{3.0, 0.1, 0.5, 2.0, 120.0, 30.0};
  std::vector<TileFeatures> same(10, textured);
  const auto all_kept = knn_filter(same);
  CHECK_FALSE(all_kept.knn_stage_skipped);
  CHECK(all_kept.kept_count() == 10);
  for (const auto& d : all_kept.tiles) CHECK(*d.knn_score == 0.0);

  std::vector<TileFeatures> mixed(8, textured);
  for (std::size_t i = 0; i < mixed.size(); ++i) mixed[i].mean += static_cast<double>(i);
  mixed.push_back({0.0, 1.0, 1.0, 0.0, 50.0, 0.0});
  const auto r = knn_filter(mixed);
  CHECK_FALSE(r.tiles.back().kept);
  CHECK(*r.tiles.back().reason == "low_information");
  CHECK_FALSE(r.tiles.back().knn_score.has_value());

  std::vector<TileFeatures> few(3, textured);
  const auto skipped = knn_filter(few);
  CHECK(skipped.knn_stage_skipped);
  CHECK(skipped.kept_count() == 3);

  std::vector<TileFeatures> outlier(20, textured);
  for (std::size_t i = 0; i < outlier.size(); ++i) outlier[i].glcm_contrast += 0.01 * static_cast<double>(i);
  outlier[7] = {90.0, 0.01, 0.05, 4.5, 10.0, 90.0};
  const auto o = knn_filter(outlier);
  CHECK_FALSE(o.tiles[7].kept);
  CHECK(*o.tiles[7].reason == "structural_outlier");
  CHECK(o.kept_count() == 19);
}

TEST_CASE("knn filter does not depend on input order") {
  Rng rng(4);
  std::vector<TileFeatures> feats;
  for (int i = 0; i < 30; ++i) {
    feats.push_back({rng.uniform(0, 5), rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0, 3),
                     rng.uniform(0, 255), rng.uniform(0, 60)});
  }
  std::vector<std::size_t> perm(feats.size());
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(perm);
  std::vector<TileFeatures> shuffled;
  for (auto p : perm) shuffled.push_back(feats[p]);
  const auto a = knn_filter(feats);
  const auto b = knn_filter(shuffled);
  for (std::size_t i = 0; i < perm.size(); ++i) {
    CHECK(a.tiles[perm[i]].kept == b.tiles[i].kept);
    CHECK(*a.tiles[perm[i]].knn_score == doctest::Approx(*b.tiles[i].knn_score).epsilon(1e-12));
  }
}

TEST_CASE("scene files and ingest pipeline") {
  const auto dir = std::filesystem::temp_directory_path() / "sklp_test_ingest";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);

  Rng rng(2);
  GeoRaster scene = ramp_raster(96, 64);
  for (auto& v : scene.pixels) v = static_cast<float>(rng.uniform(0, 1000));
  scene.geotransform = {116.3, 1e-5, 0.0, 39.9, 0.0, -1e-5};
  scene.resolution_m = 1.0;
  write_scene(scene, dir / "s.f32", dir / "s.json");
  const GeoRaster back = read_scene(dir / "s.f32", dir / "s.json");
  CHECK(back.pixels == scene.pixels);
  CHECK(back.geotransform == scene.geotransform);

  ByteRaster b = compress_to_u8(scene);
  write_pgm(b, dir / "b.pgm");
  CHECK(read_pgm(dir / "b.pgm").pixels == b.pixels);

  IngestOptions opt;
  opt.scene = dir / "s.f32";
  opt.sidecar = dir / "s.json";
  opt.out_dir = dir / "tiles";
  opt.extent_m = 32.0;
  const IngestSummary sum = run_ingest(opt);
  CHECK(sum.window_px == 32);
  CHECK(sum.tiles == 6);
  std::ifstream manifest(dir / "tiles" / "manifest.jsonl");
  std::string line;
  int n = 0;
  while (std::getline(manifest, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.contains("features"));
    CHECK(std::filesystem::exists(dir / "tiles" / j["tile_path"].get<std::string>()));
    ++n;
  }
  CHECK(n == 6);

  std::ofstream(dir / "bad.json") << R"({"width": 3})";
  CHECK_THROWS_AS(read_scene(dir / "s.f32", dir / "bad.json"), FormatError);
  std::filesystem::remove_all(dir);
}
