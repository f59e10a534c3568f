#include "vinesim/geometry.hpp"

namespace vinesim {

Scene make_free_space_scene() {
  Scene s;
  s.bounds = {-0.3, -0.8, 1.6, 0.8};
  s.base_pose = {0.0, 0.0, 0.0};
  return s;
}

Scene make_single_wall_scene() {
  Scene s;
  s.bounds = {-0.3, -0.8, 1.6, 0.8};
  s.base_pose = {0.0, 0.0, 0.0};
  s.obstacles.push_back(make_box(0.35, -0.35, 0.50, 0.35));
  return s;
}

Scene make_cluttered_scene() {
  Scene s;
  s.bounds = {-0.3, -0.9, 1.8, 0.9};
  s.base_pose = {0.0, 0.0, 0.0};
  s.obstacles.push_back(make_box(0.28, 0.10, 0.45, 0.45));
  s.obstacles.push_back(make_box(0.30, -0.50, 0.50, -0.18));
  s.obstacles.push_back(make_box(0.62, -0.10, 0.80, 0.30));
  s.obstacles.push_back(make_box(0.70, -0.60, 0.95, -0.30));
  s.obstacles.push_back(make_box(1.00, 0.15, 1.25, 0.50));
  s.obstacles.push_back(make_box(1.05, -0.35, 1.30, -0.05));
  return s;
}

}  // namespace vinesim
