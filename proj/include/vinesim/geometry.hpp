#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

namespace vinesim {

struct VineState;

/// Convex polygon obstacle, counter-clockwise vertex order, SI units.
struct Obstacle {
  std::vector<Eigen::Vector2d> vertices;

  /// Throws std::invalid_argument unless the polygon has at least 3
  /// vertices, is strictly convex and has no near-duplicate vertices.
  void validate() const;
};

/// Axis-aligned rectangle obstacle helper (vertices emitted CCW).
Obstacle make_box(double xmin, double ymin, double xmax, double ymax);

struct Scene {
  std::vector<Obstacle> obstacles;
  Eigen::Vector3d base_pose = Eigen::Vector3d::Zero();  // x, y, theta
  Eigen::Vector4d bounds = {-1.0, -1.0, 1.0, 1.0};      // xmin, ymin, xmax, ymax

  void validate() const;
};

Scene load_scene(const std::string& path);
void save_scene(const Scene& scene, const std::string& path);

/// Result of a point/obstacle distance query. `gradient` is the unit outward
/// normal of the closest feature; `hessian` is the second derivative of the
/// signed distance (zero on faces and inside, curvature term at vertices).
/// `feature` identifies the closest feature deterministically: edge i -> 2i,
/// vertex i -> 2i+1; ties resolve to the lowest feature index.
struct DistanceResult {
  double distance = 0.0;
  Eigen::Vector2d gradient = Eigen::Vector2d::Zero();
  Eigen::Matrix2d hessian = Eigen::Matrix2d::Zero();
  int feature = -1;
};

/// Signed distance from a point to a convex polygon: positive outside,
/// negative penetration depth inside, zero on the boundary.
double signed_distance(const Eigen::Vector2d& point, const Obstacle& obstacle);

/// Unit outward normal of the closest feature (see DistanceResult::feature
/// for the tie-break rule).
Eigen::Vector2d distance_gradient(const Eigen::Vector2d& point, const Obstacle& obstacle);

/// Full query: distance, gradient and Hessian in one pass.
DistanceResult distance_query(const Eigen::Vector2d& point, const Obstacle& obstacle);

/// One candidate contact between a vine collision sphere and an obstacle.
/// gap = signed_distance(center) - radius, so gap < 0 means penetration.
struct Contact {
  int link = -1;
  int obstacle = -1;
  double gap = 0.0;
  Eigen::Vector2d normal = Eigen::Vector2d::Zero();
  Eigen::Matrix2d normal_jacobian = Eigen::Matrix2d::Zero();  // d(normal)/d(center)
};

/// All (link, obstacle) pairs whose sphere gap is below the activation
/// window. Pure function of the inputs; output order is (link, obstacle)
/// lexicographic.
std::vector<Contact> vine_contacts(const VineState& state, const Scene& scene,
                                   double radius, double activation);

std::vector<Contact> vine_contacts(const std::vector<Eigen::Vector2d>& centers,
                                   const Scene& scene, double radius, double activation);

// Scripted scenes shared by the CLI benchmark and the test suites.
Scene make_free_space_scene();
Scene make_single_wall_scene();
Scene make_cluttered_scene();

}  // namespace vinesim
