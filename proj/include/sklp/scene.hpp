#pragma once

// Ground truth for a synthetic radar scene. Shared by the scene renderer and
// the mock caption generator.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace sklp {

enum class ObjectClass { building, road, water, vessel, aircraft };
inline constexpr std::array<ObjectClass, 5> kObjectClasses{ObjectClass::building, ObjectClass::road,
                                                           ObjectClass::water, ObjectClass::vessel,
                                                           ObjectClass::aircraft};

enum class Landform { plain, hills, farmland, wetland };
inline constexpr std::array<Landform, 4> kLandforms{Landform::plain, Landform::hills, Landform::farmland,
                                                    Landform::wetland};

std::string_view class_name(ObjectClass c);
std::string_view landform_name(Landform l);
std::optional<ObjectClass> class_from_name(std::string_view name);

enum class Quadrant { north_west, north_east, south_west, south_east };
std::string_view quadrant_name(Quadrant q);

struct SceneObject {
  ObjectClass cls;
  int x = 0;  // left column
  int y = 0;  // top row
  int w = 1;
  int h = 1;

  double cx() const { return x + w / 2.0; }
  double cy() const { return y + h / 2.0; }
};

struct SyntheticScene {
  int side = 64;
  std::uint64_t noise_seed = 0;
  Landform landform = Landform::plain;
  std::vector<SceneObject> objects;

  int count(ObjectClass c) const;
  bool has(ObjectClass c) const { return count(c) > 0; }
  /// Quadrant holding the centroid of all objects of class c.
  Quadrant quadrant_of(ObjectClass c) const;
  /// Throws DataError when an object leaves the canvas.
  void validate() const;
};

}  // namespace sklp
