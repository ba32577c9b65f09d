#include "sklp/scene.hpp"

#include "sklp/errors.hpp"

namespace sklp {

std::string_view class_name(ObjectClass c) {
  switch (c) {
    case ObjectClass::building: return "building";
    case ObjectClass::road: return "road";
    case ObjectClass::water: return "water";
    case ObjectClass::vessel: return "vessel";
    case ObjectClass::aircraft: return "aircraft";
  }
  return "unknown";
}

std::string_view landform_name(Landform l) {
  switch (l) {
    case Landform::plain: return "plain";
    case Landform::hills: return "hills";
    case Landform::farmland: return "farmland";
    case Landform::wetland: return "wetland";
  }
  return "unknown";
}

std::optional<ObjectClass> class_from_name(std::string_view name) {
  for (ObjectClass c : kObjectClasses) {
    if (class_name(c) == name) return c;
  }
  return std::nullopt;
}

std::string_view quadrant_name(Quadrant q) {
  switch (q) {
    case Quadrant::north_west: return "north west";
    case Quadrant::north_east: return "north east";
    case Quadrant::south_west: return "south west";
    case Quadrant::south_east: return "south east";
  }
  return "unknown";
}

int SyntheticScene::count(ObjectClass c) const {
  int n = 0;
  for (const SceneObject& o : objects) n += o.cls == c ? 1 : 0;
  return n;
}

Quadrant SyntheticScene::quadrant_of(ObjectClass c) const {
  double sx = 0, sy = 0;
  int n = 0;
  for (const SceneObject& o : objects) {
    if (o.cls != c) continue;
    sx += o.cx();
    sy += o.cy();
    ++n;
  }
  if (n == 0) throw UsageError("no " + std::string(class_name(c)) + " in scene");
  const bool east = sx / n >= side / 2.0;
  const bool south = sy / n >= side / 2.0;
  if (south) return east ? Quadrant::south_east : Quadrant::south_west;
  return east ? Quadrant::north_east : Quadrant::north_west;
}

void SyntheticScene::validate() const {
  if (side <= 0) throw DataError("scene side must be positive");
  for (const SceneObject& o : objects) {
    if (o.w <= 0 || o.h <= 0 || o.x < 0 || o.y < 0 || o.x + o.w > side || o.y + o.h > side) {
      throw DataError(std::string(class_name(o.cls)) + " object leaves the canvas");
    }
  }
}

}  // namespace sklp
