#include "sklp/synth.hpp"

#include "sklp/errors.hpp"
#include "sklp/parallel.hpp"
#include "sklp/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace sklp::synth {

namespace {

struct ClassSpec {
  ObjectClass cls;
  double presence;
  int max_count;
};

constexpr ClassSpec kSpecs[] = {{ObjectClass::building, 0.6, 4},
                                {ObjectClass::road, 0.45, 2},
                                {ObjectClass::water, 0.4, 1},
                                {ObjectClass::vessel, 0.35, 3},
                                {ObjectClass::aircraft, 0.35, 3}};

const char* kCities[] = {"Beijing", "Shanghai", "Tianjin", "Qingdao", "Xiamen", "Wuhan", "Dalian", "Ningbo"};

}  // namespace

SyntheticScene random_scene(std::uint64_t seed, int side) {
  if (side < 16) throw ConfigError("synthetic scenes need a side of at least 16 pixels");
  Rng rng(seed);
  SyntheticScene s;
  s.side = side;
  s.noise_seed = rng.next();
  s.landform = kLandforms[rng.below(kLandforms.size())];
  const int half = side / 2;
  const int unit = std::max(1, side / 32);
  for (const ClassSpec& spec : kSpecs) {
    if (!rng.bernoulli(spec.presence)) continue;
    const int count = rng.range(1, spec.max_count);
    const int qx = static_cast<int>(rng.below(2)) * half;
    const int qy = static_cast<int>(rng.below(2)) * half;
    for (int k = 0; k < count; ++k) {
      SceneObject o{spec.cls};
      switch (spec.cls) {
        case ObjectClass::building:
          o.w = rng.range(3 * unit, 6 * unit);
          o.h = rng.range(3 * unit, 6 * unit);
          break;
        case ObjectClass::road:
          o.w = half;
          o.h = 2 * unit + 1;
          break;
        case ObjectClass::water:
          o.w = rng.range(side / 4, side / 2);
          o.h = rng.range(side / 4, side / 2);
          break;
        case ObjectClass::vessel:
          if (rng.bernoulli(0.5)) {
            o.w = 6 * unit;
            o.h = 2 * unit;
          } else {
            o.w = 2 * unit;
            o.h = 6 * unit;
          }
          break;
        case ObjectClass::aircraft:
          o.w = 6 * unit + 1;
          o.h = 6 * unit + 1;
          break;
      }
      o.w = std::min(o.w, half);
      o.h = std::min(o.h, half);
      o.x = qx + static_cast<int>(rng.below(static_cast<std::uint64_t>(half - o.w + 1)));
      o.y = qy + static_cast<int>(rng.below(static_cast<std::uint64_t>(half - o.h + 1)));
      s.objects.push_back(o);
    }
  }
  s.validate();
  return s;
}

ad::Matrix render_scene(const SyntheticScene& s) {
  s.validate();
  const int n = s.side;
  ad::Matrix base(n, n);
  constexpr double kTwoPi = 6.283185307179586;
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      double v = 0.3;
      switch (s.landform) {
        case Landform::plain: v = 0.3; break;
        case Landform::hills: v = 0.3 + 0.12 * std::sin(kTwoPi * 1.5 * x / n) * std::cos(kTwoPi * y / n); break;
        case Landform::farmland: v = 0.24 + 0.12 * ((y / std::max(2, n / 16)) % 2); break;
        case Landform::wetland: v = 0.2 + 0.08 * std::sin(x / 3.0) * std::sin(y / 4.0); break;
      }
      base(y, x) = v;
    }
  }
  auto fill = [&](const SceneObject& o, auto&& f) {
    for (int y = o.y; y < o.y + o.h; ++y) {
      for (int x = o.x; x < o.x + o.w; ++x) f(base(y, x), x - o.x, y - o.y);
    }
  };
  for (ObjectClass cls : {ObjectClass::water, ObjectClass::road, ObjectClass::building, ObjectClass::vessel,
                          ObjectClass::aircraft}) {
    for (const SceneObject& o : s.objects) {
      if (o.cls != cls) continue;
      switch (cls) {
        case ObjectClass::water: fill(o, [](double& v, int, int) { v *= 0.15; }); break;
        case ObjectClass::road: fill(o, [](double& v, int, int) { v = 0.6; }); break;
        case ObjectClass::building: fill(o, [](double& v, int, int) { v = 0.85; }); break;
        case ObjectClass::vessel: fill(o, [](double& v, int, int) { v = 0.95; }); break;
        case ObjectClass::aircraft: {
          const int cx = o.w / 2, cy = o.h / 2, arm = std::max(0, o.w / 8);
          fill(o, [&](double& v, int dx, int dy) {
            if (std::abs(dx - cx) <= arm || std::abs(dy - cy) <= arm) v = 0.95;
          });
          break;
        }
      }
    }
  }
  Rng rng(s.noise_seed);
  for (Eigen::Index i = 0; i < base.size(); ++i) {
    base.data()[i] = std::clamp(base.data()[i] * rng.unit_gamma(16), 0.0, 1.0);
  }
  return base;
}

ingest::ByteRaster to_bytes(const ad::Matrix& image) {
  ingest::ByteRaster r;
  r.width = static_cast<int>(image.cols());
  r.height = static_cast<int>(image.rows());
  r.pixels.resize(static_cast<std::size_t>(image.size()));
  for (int y = 0; y < r.height; ++y) {
    for (int x = 0; x < r.width; ++x) {
      r.pixels[static_cast<std::size_t>(y) * r.width + x] =
          static_cast<std::uint8_t>(std::floor(std::clamp(image(y, x), 0.0, 1.0) * 255.0 + 0.5));
    }
  }
  return r;
}

SyntheticPair gen_synthetic_pair(std::uint64_t seed, double noise_rate, std::int64_t pair_id, int side,
                                 const std::vector<hcot::PromptLayer>& layers) {
  if (!(noise_rate >= 0.0 && noise_rate <= 1.0)) throw ConfigError("noise_rate must lie in [0, 1]");
  SyntheticPair p;
  p.scene = random_scene(mix_seed(seed, 1), side);
  p.image = to_bytes(render_scene(p.scene));

  Rng rng(mix_seed(seed, 2));
  hcot::GeoContext ctx;
  ctx.city = kCities[rng.below(std::size(kCities))];
  ctx.lon_min = rng.uniform(100.0, 125.0);
  ctx.lat_min = rng.uniform(20.0, 45.0);
  ctx.resolution_m = 1.0;
  const double extent_deg = side * ctx.resolution_m / 111320.0;
  ctx.lon_max = ctx.lon_min + extent_deg;
  ctx.lat_max = ctx.lat_min + extent_deg;
  ctx.tier = hcot::Tier::L;

  hcot::MockGenerator gen(p.scene);
  const std::string prompt = "image: images/" + std::to_string(pair_id) + ".pgm\n\n" +
                             hcot::assemble_prompt(layers, ctx, std::nullopt);
  p.record.segments = hcot::parse_segments(gen.generate(prompt, mix_seed(seed, 3)));

  std::vector<int> planted;
  for (int j = 0; j < kSegmentsPerText; ++j) {
    if (!rng.bernoulli(noise_rate)) continue;
    p.record.segments[static_cast<std::size_t>(j)] =
        hcot::contradiction_segment(p.scene, mix_seed(seed, 100 + static_cast<std::uint64_t>(j)));
    planted.push_back(j);
  }
  p.record.pair_id = pair_id;
  p.record.image_path = "images/" + std::to_string(pair_id) + ".pgm";
  p.record.tier = "L";
  p.record.planted = planted;
  const double px = extent_deg / side;
  p.record.geo = ingest::sidecar_json({ctx.lon_min, px, 0.0, ctx.lat_max, 0.0, -px}, side, side, ctx.resolution_m,
                                      "EPSG:4326");
  p.record.geo["city"] = ctx.city;
  p.image.geotransform = {ctx.lon_min, px, 0.0, ctx.lat_max, 0.0, -px};
  return p;
}

std::vector<CorpusRecord> write_synthetic_corpus(const SynthOptions& o) {
  if (o.n <= 0) throw ConfigError("corpus size must be positive");
  const auto layers = hcot::load_layers(o.templates);
  std::filesystem::create_directories(o.out_dir / "images");
  std::vector<CorpusRecord> records(static_cast<std::size_t>(o.n));
  parallel_for(records.size(), o.threads, [&](std::size_t i) {
    SyntheticPair p = gen_synthetic_pair(mix_seed(o.seed, i), o.noise_rate, static_cast<std::int64_t>(i), o.side, layers);
    ingest::write_pgm(p.image, o.out_dir / p.record.image_path);
    records[i] = std::move(p.record);
  });
  write_corpus(o.out_dir / "corpus.jsonl", records);
  return records;
}

}  // namespace sklp::synth
