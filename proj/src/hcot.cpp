#include "sklp/hcot.hpp"

#include "sklp/errors.hpp"
#include "sklp/rng.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <set>
#include <sstream>

namespace sklp::hcot {

namespace {

const std::set<std::string> kAllowedPlaceholders{"city", "lon", "lat", "resolution_m", "scale", "prior_text"};

// Calls fn(name, begin, end) for every "{name}" in text.
template <class Fn>
void for_each_placeholder(const std::string& text, Fn&& fn) {
  std::size_t pos = 0;
  while ((pos = text.find('{', pos)) != std::string::npos) {
    const std::size_t close = text.find('}', pos);
    if (close == std::string::npos) throw TemplateError("unterminated placeholder in template");
    fn(text.substr(pos + 1, close - pos - 1), pos, close + 1);
    pos = close + 1;
  }
}

std::string fmt(const char* f, double a, double b) {
  char buf[96];
  std::snprintf(buf, sizeof buf, f, a, b);
  return buf;
}

std::string scale_word(Tier t) {
  switch (t) {
    case Tier::L: return "large";
    case Tier::M: return "medium";
    case Tier::S: return "small";
  }
  return "large";
}

}  // namespace

std::string layer_name(LayerKind k) {
  switch (k) {
    case LayerKind::earth_cognition: return "earth_cognition";
    case LayerKind::social_prior: return "social_prior";
    case LayerKind::sar_theory: return "sar_theory";
    case LayerKind::instance_discrimination: return "instance_discrimination";
    case LayerKind::calibration: return "calibration";
  }
  return "unknown";
}

std::string tier_name(Tier t) {
  switch (t) {
    case Tier::L: return "L";
    case Tier::M: return "M";
    case Tier::S: return "S";
  }
  return "L";
}

Tier tier_from_name(const std::string& s) {
  if (s == "L") return Tier::L;
  if (s == "M") return Tier::M;
  if (s == "S") return Tier::S;
  throw FormatError("unknown scale tier '" + s + "'");
}

void check_placeholders(const PromptLayer& layer) {
  for_each_placeholder(layer.text, [&](const std::string& name, std::size_t, std::size_t) {
    if (!kAllowedPlaceholders.count(name)) {
      throw TemplateError("unknown placeholder {" + name + "} in layer " + layer_name(layer.kind));
    }
  });
  std::istringstream in(layer.text);
  for (std::string line; std::getline(in, line);) {
    if (line.rfind("### ", 0) == 0) throw TemplateError("layer " + layer_name(layer.kind) + " contains a block header");
  }
}

std::vector<PromptLayer> load_layers(const std::filesystem::path& dir) {
  std::vector<PromptLayer> layers;
  for (LayerKind k : kLayerOrder) {
    const auto path = dir / (layer_name(k) + ".txt");
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("missing prompt layer " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    PromptLayer layer{k, ss.str()};
    check_placeholders(layer);
    layers.push_back(std::move(layer));
  }
  return layers;
}

void GeoContext::validate() const {
  if (lon_min < -180 || lon_max > 180 || lon_min > lon_max) throw GeometryError("longitude bounds outside [-180, 180]");
  if (lat_min < -90 || lat_max > 90 || lat_min > lat_max) throw GeometryError("latitude bounds outside [-90, 90]");
  if (!(resolution_m > 0.0)) throw ConfigError("resolution_m must be positive");
}

std::string assemble_prompt(const std::vector<PromptLayer>& layers, const GeoContext& ctx,
                            const std::optional<std::string>& prior_text) {
  ctx.validate();
  if (!prior_text && ctx.tier != Tier::L) {
    throw UsageError("tier " + tier_name(ctx.tier) + " prompt requires the prior text of the coarser scale");
  }
  std::string out;
  for (LayerKind kind : kLayerOrder) {
    const PromptLayer* layer = nullptr;
    for (const PromptLayer& l : layers) {
      if (l.kind != kind) continue;
      if (layer) throw UsageError("duplicate prompt layer " + layer_name(kind));
      layer = &l;
    }
    if (!layer) throw UsageError("missing prompt layer " + layer_name(kind));
    check_placeholders(*layer);

    out += "### " + layer_name(kind) + "\n";
    std::istringstream in(layer->text);
    for (std::string line; std::getline(in, line);) {
      if (!prior_text && line.find("{prior_text}") != std::string::npos) continue;
      std::string filled;
      std::size_t last = 0;
      for_each_placeholder(line, [&](const std::string& name, std::size_t begin, std::size_t end) {
        filled += line.substr(last, begin - last);
        if (name == "city") {
          if (ctx.city.empty()) throw TemplateError("unfilled placeholder {city}");
          filled += ctx.city;
        } else if (name == "lon") {
          filled += fmt("%.6f to %.6f", ctx.lon_min, ctx.lon_max);
        } else if (name == "lat") {
          filled += fmt("%.6f to %.6f", ctx.lat_min, ctx.lat_max);
        } else if (name == "resolution_m") {
          filled += fmt("%g", ctx.resolution_m, 0.0);
        } else if (name == "scale") {
          filled += scale_word(ctx.tier);
        } else {
          filled += *prior_text;
        }
        last = end;
      });
      filled += line.substr(last);
      out += filled + "\n";
    }
    out += "\n";
  }
  return out;
}

// ---- mock generator ----------------------------------------------------------------

namespace {

const char* kCountWords[] = {"zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine"};

std::string count_word(int n) { return n >= 0 && n < 10 ? kCountWords[n] : std::to_string(n); }

std::string noun(ObjectClass c, int n) {
  switch (c) {
    case ObjectClass::building: return n == 1 ? "building" : "buildings";
    case ObjectClass::road: return n == 1 ? "road" : "roads";
    case ObjectClass::water: return n == 1 ? "water patch" : "water patches";
    case ObjectClass::vessel: return n == 1 ? "vessel" : "vessels";
    case ObjectClass::aircraft: return "aircraft";
  }
  return "object";
}

std::string pick(Rng& rng, std::initializer_list<const char*> options) {
  return *(options.begin() + rng.below(options.size()));
}

std::string class_segment(Rng& rng, ObjectClass c, int n, Quadrant q) {
  const std::string cw = count_word(n);
  const std::string nn = noun(c, n);
  const std::string qn(quadrant_name(q));
  switch (rng.below(3)) {
    case 0: return cw + " " + nn + " in the " + qn;
    case 1: return "the " + qn + " holds " + cw + " " + nn;
    default: return cw + " " + nn + " near the " + qn + " corner";
  }
}

std::string scene_word(const SyntheticScene& s) {
  if (s.has(ObjectClass::aircraft)) return "airport";
  if (s.has(ObjectClass::vessel)) return "harbor";
  if (s.count(ObjectClass::building) >= 3) return "urban";
  if (s.has(ObjectClass::water)) return "lakeside";
  return "rural";
}

std::string direction(const SyntheticScene& s, ObjectClass a, ObjectClass b) {
  auto centroid = [&](ObjectClass c) {
    double x = 0, y = 0;
    int n = 0;
    for (const SceneObject& o : s.objects) {
      if (o.cls != c) continue;
      x += o.cx();
      y += o.cy();
      ++n;
    }
    return std::pair{x / n, y / n};
  };
  const auto [ax, ay] = centroid(a);
  const auto [bx, by] = centroid(b);
  if (std::abs(ax - bx) >= std::abs(ay - by)) return ax < bx ? "west" : "east";
  return ay < by ? "north" : "south";
}

}  // namespace

std::vector<std::string> describe_scene(const SyntheticScene& scene, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::string> seg;
  const std::string sw = scene_word(scene);
  const std::string article = sw == "airport" || sw == "urban" ? "an " : "a ";
  switch (rng.below(3)) {
    case 0: seg.push_back(sw + " scene overview"); break;
    case 1: seg.push_back("an image of " + article + sw + " area"); break;
    default: seg.push_back("radar view of " + article + sw + " zone"); break;
  }
  std::vector<ObjectClass> present;
  for (ObjectClass c : kObjectClasses) {
    if (scene.has(c)) {
      present.push_back(c);
      seg.push_back(class_segment(rng, c, scene.count(c), scene.quadrant_of(c)));
    } else {
      seg.push_back(pick(rng, {"open ground with speckle", "quiet background clutter", "nothing else of note"}));
    }
  }
  if (present.size() >= 2) {
    const std::size_t i = rng.below(present.size());
    std::size_t j = rng.below(present.size() - 1);
    if (j >= i) ++j;
    const ObjectClass a = present[i], b = present[j];
    seg.push_back("the " + noun(a, scene.count(a)) + (scene.count(a) == 1 ? " lies " : " lie ") + direction(scene, a, b) + " of the " +
                  noun(b, scene.count(b)));
  } else {
    seg.push_back(pick(rng, {"a sparse layout", "few structures overall", "little spatial structure"}));
  }
  const std::string lf(landform_name(scene.landform));
  switch (rng.below(3)) {
    case 0: seg.push_back("terrain is mostly " + lf); break;
    case 1: seg.push_back(lf + " terrain dominates"); break;
    default: seg.push_back("landform of " + lf); break;
  }
  return seg;
}

std::string contradiction_segment(const SyntheticScene& scene, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<ObjectClass> absent;
  for (ObjectClass c : kObjectClasses) {
    if (!scene.has(c)) absent.push_back(c);
  }
  const auto quadrant = static_cast<Quadrant>(rng.below(4));
  if (!absent.empty()) {
    const ObjectClass c = absent[rng.below(absent.size())];
    return class_segment(rng, c, rng.range(1, 3), quadrant);
  }
  const ObjectClass c = kObjectClasses[rng.below(kObjectClasses.size())];
  int wrong = rng.range(1, 4);
  if (wrong >= scene.count(c)) ++wrong;
  return class_segment(rng, c, wrong, scene.quadrant_of(c));
}

MockGenerator::MockGenerator(SyntheticScene scene) : scene_(std::move(scene)) { scene_.validate(); }

std::string MockGenerator::generate(const std::string& prompt, std::uint64_t seed) {
  return nlohmann::json(describe_scene(scene_, mix_seed(seed, fnv1a(prompt)))).dump();
}

std::vector<std::string> parse_segments(const std::string& output) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(output);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("generator output is not JSON: ") + e.what());
  }
  if (!j.is_array() || j.size() != 8) throw FormatError("generator output must be a JSON array of 8 strings");
  std::vector<std::string> out;
  for (const auto& s : j) {
    if (!s.is_string()) throw FormatError("generator output must be a JSON array of 8 strings");
    out.push_back(s.get<std::string>());
  }
  return out;
}

Clock logical_clock() {
  auto counter = std::make_shared<std::int64_t>(0);
  return [counter] { return (*counter)++; };
}

nlohmann::json ChainResult::to_json() const {
  return {{"t_l", t_l},
          {"t_m", t_m},
          {"t_s", t_s},
          {"prompts", prompts},
          {"image_refs", image_refs},
          {"generator_id", generator_id},
          {"seed", seed},
          {"timestamps", timestamps}};
}

ChainResult run_chain(const std::array<std::string, 3>& image_refs, const std::array<GeoContext, 3>& contexts,
                      const std::vector<PromptLayer>& layers, Generator& gen, std::uint64_t seed, const Clock& clock) {
  constexpr std::array<Tier, 3> tiers{Tier::L, Tier::M, Tier::S};
  for (std::size_t k = 0; k < 3; ++k) {
    if (contexts[k].tier != tiers[k]) throw UsageError("chain contexts must be ordered L, M, S");
    if (contexts[k].city != contexts[0].city) throw UsageError("chain contexts must share one parent region");
  }
  ChainResult r;
  r.image_refs = image_refs;
  r.generator_id = gen.id();
  r.seed = seed;
  std::array<std::string*, 3> outputs{&r.t_l, &r.t_m, &r.t_s};
  std::optional<std::string> prior;
  for (std::size_t k = 0; k < 3; ++k) {
    r.prompts[k] = "image: " + image_refs[k] + "\n\n" + assemble_prompt(layers, contexts[k], prior);
    try {
      *outputs[k] = gen.generate(r.prompts[k], seed);
    } catch (const std::exception& e) {
      throw ChainError("stage " + tier_name(tiers[k]) + " generation failed: " + e.what());
    }
    if (outputs[k]->empty()) throw ChainError("stage " + tier_name(tiers[k]) + " produced empty text");
    r.timestamps[k] = clock();
    prior = *outputs[k];
  }
  return r;
}

}  // namespace sklp::hcot
