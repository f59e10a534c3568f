#include "vinesim/geometry.hpp"

#include <fstream>
#include <limits>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "vinesim/state.hpp"

namespace vinesim {

namespace {

constexpr double kMinVertexSpacing = 1e-9;

Eigen::Vector2d edge_outward_normal(const Eigen::Vector2d& a, const Eigen::Vector2d& b) {
  // CCW polygon: the outward normal of edge a->b points to its right.
  Eigen::Vector2d t = (b - a).normalized();
  return {t.y(), -t.x()};
}

}  // namespace

void Obstacle::validate() const {
  const std::size_t m = vertices.size();
  if (m < 3) throw std::invalid_argument("obstacle needs at least 3 vertices");
  for (std::size_t i = 0; i < m; ++i) {
    const Eigen::Vector2d& a = vertices[i];
    const Eigen::Vector2d& b = vertices[(i + 1) % m];
    const Eigen::Vector2d& c = vertices[(i + 2) % m];
    if ((b - a).norm() < kMinVertexSpacing)
      throw std::invalid_argument("obstacle has near-duplicate consecutive vertices");
    const double cross = (b.x() - a.x()) * (c.y() - b.y()) - (b.y() - a.y()) * (c.x() - b.x());
    if (cross <= 0.0)
      throw std::invalid_argument("obstacle must be strictly convex with CCW vertex order");
  }
}

Obstacle make_box(double xmin, double ymin, double xmax, double ymax) {
  Obstacle o;
  o.vertices = {{xmin, ymin}, {xmax, ymin}, {xmax, ymax}, {xmin, ymax}};
  return o;
}

void Scene::validate() const {
  if (!(bounds[0] < bounds[2] && bounds[1] < bounds[3]))
    throw std::invalid_argument("scene bounds must be a nonempty rectangle");
  if (base_pose.x() < bounds[0] || base_pose.x() > bounds[2] || base_pose.y() < bounds[1] ||
      base_pose.y() > bounds[3])
    throw std::invalid_argument("base pose must lie inside the scene bounds");
  for (const Obstacle& o : obstacles) {
    o.validate();
    if (signed_distance(base_pose.head<2>(), o) < 0.0)
      throw std::invalid_argument("an obstacle contains the base pose");
  }
}

DistanceResult distance_query(const Eigen::Vector2d& point, const Obstacle& obstacle) {
  const std::size_t m = obstacle.vertices.size();

  // Inside test: for a convex CCW polygon the point is inside iff it lies on
  // the non-outward side of every edge line.
  bool inside = true;
  double depth_best = -std::numeric_limits<double>::infinity();  // max of negative margins
  int depth_edge = -1;
  for (std::size_t i = 0; i < m && inside; ++i) {
    const Eigen::Vector2d& a = obstacle.vertices[i];
    const Eigen::Vector2d& b = obstacle.vertices[(i + 1) % m];
    const double margin = edge_outward_normal(a, b).dot(point - a);
    if (margin > 0.0) inside = false;
  }
  if (inside) {
    for (std::size_t i = 0; i < m; ++i) {
      const Eigen::Vector2d& a = obstacle.vertices[i];
      const Eigen::Vector2d& b = obstacle.vertices[(i + 1) % m];
      const double margin = edge_outward_normal(a, b).dot(point - a);
      if (margin > depth_best) {
        depth_best = margin;
        depth_edge = static_cast<int>(i);
      }
    }
    DistanceResult r;
    r.distance = depth_best;  // negative depth to the nearest edge
    r.gradient = edge_outward_normal(obstacle.vertices[depth_edge],
                                     obstacle.vertices[(depth_edge + 1) % m]);
    r.hessian.setZero();
    r.feature = 2 * depth_edge;
    return r;
  }

  // Outside: nearest feature over edges (interior) and vertices. Strict
  // improvement keeps the lowest feature index on exact ties.
  double best = std::numeric_limits<double>::infinity();
  int best_feature = -1;
  Eigen::Vector2d best_normal = Eigen::Vector2d::Zero();
  Eigen::Vector2d best_vertex = Eigen::Vector2d::Zero();
  bool best_is_vertex = false;

  auto consider = [&](double dist, int feature, const Eigen::Vector2d& normal, bool is_vertex,
                      const Eigen::Vector2d& vertex) {
    if (dist < best || (dist == best && feature < best_feature)) {
      best = dist;
      best_feature = feature;
      best_normal = normal;
      best_is_vertex = is_vertex;
      best_vertex = vertex;
    }
  };

  for (std::size_t i = 0; i < m; ++i) {
    const Eigen::Vector2d& a = obstacle.vertices[i];
    const Eigen::Vector2d& b = obstacle.vertices[(i + 1) % m];
    const Eigen::Vector2d ab = b - a;
    const double t = ab.dot(point - a) / ab.squaredNorm();
    if (t <= 0.0) {
      const double dist = (point - a).norm();
      const Eigen::Vector2d n = dist > 0.0 ? ((point - a) / dist).eval() : edge_outward_normal(a, b);
      consider(dist, 2 * static_cast<int>(i) + 1, n, true, a);  // vertex i -> feature 2i+1
    } else if (t >= 1.0) {
      const std::size_t j = (i + 1) % m;
      const double dist = (point - b).norm();
      const Eigen::Vector2d n = dist > 0.0 ? ((point - b) / dist).eval() : edge_outward_normal(a, b);
      consider(dist, 2 * static_cast<int>(j) + 1, n, true, b);
    } else {
      const Eigen::Vector2d proj = a + t * ab;
      const double dist = (point - proj).norm();
      consider(dist, 2 * static_cast<int>(i), edge_outward_normal(a, b), false, proj);
    }
  }

  DistanceResult r;
  r.distance = best;
  r.gradient = best_normal;
  r.feature = best_feature;
  if (best_is_vertex && best > 0.0) {
    r.hessian = (Eigen::Matrix2d::Identity() - best_normal * best_normal.transpose()) / best;
  } else {
    r.hessian.setZero();
  }
  return r;
}

double signed_distance(const Eigen::Vector2d& point, const Obstacle& obstacle) {
  return distance_query(point, obstacle).distance;
}

Eigen::Vector2d distance_gradient(const Eigen::Vector2d& point, const Obstacle& obstacle) {
  return distance_query(point, obstacle).gradient;
}

std::vector<Contact> vine_contacts(const std::vector<Eigen::Vector2d>& centers, const Scene& scene,
                                   double radius, double activation) {
  if (radius <= 0.0) throw std::invalid_argument("contact radius must be positive");
  if (activation < 0.0) throw std::invalid_argument("contact activation must be nonnegative");
  std::vector<Contact> out;
  for (std::size_t link = 0; link < centers.size(); ++link) {
    for (std::size_t obs = 0; obs < scene.obstacles.size(); ++obs) {
      const DistanceResult q = distance_query(centers[link], scene.obstacles[obs]);
      const double gap = q.distance - radius;
      if (gap < activation) {
        Contact c;
        c.link = static_cast<int>(link);
        c.obstacle = static_cast<int>(obs);
        c.gap = gap;
        c.normal = q.gradient;
        c.normal_jacobian = q.hessian;
        out.push_back(c);
      }
    }
  }
  return out;
}

std::vector<Contact> vine_contacts(const VineState& state, const Scene& scene, double radius,
                                   double activation) {
  std::vector<Eigen::Vector2d> centers(state.n);
  for (int i = 0; i < state.n; ++i) centers[i] = state.link_position(i);
  return vine_contacts(centers, scene, radius, activation);
}

Scene load_scene(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open scene file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument("scene file " + path + ": " + e.what());
  }
  Scene s;
  try {
    const auto& b = j.at("bounds");
    s.bounds = {b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(),
                b.at(3).get<double>()};
    const auto& base = j.at("base");
    s.base_pose = {base.at(0).get<double>(), base.at(1).get<double>(), base.at(2).get<double>()};
    for (const auto& poly : j.at("obstacles")) {
      Obstacle o;
      for (const auto& v : poly) o.vertices.emplace_back(v.at(0).get<double>(), v.at(1).get<double>());
      s.obstacles.push_back(std::move(o));
    }
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("scene file " + path + ": " + e.what());
  }
  s.validate();
  return s;
}

void save_scene(const Scene& scene, const std::string& path) {
  nlohmann::json j;
  j["bounds"] = {scene.bounds[0], scene.bounds[1], scene.bounds[2], scene.bounds[3]};
  j["base"] = {scene.base_pose.x(), scene.base_pose.y(), scene.base_pose.z()};
  auto obstacles = nlohmann::json::array();
  for (const Obstacle& o : scene.obstacles) {
    auto poly = nlohmann::json::array();
    for (const auto& v : o.vertices) poly.push_back({v.x(), v.y()});
    obstacles.push_back(poly);
  }
  j["obstacles"] = obstacles;
  std::ofstream out(path);
  if (!out) throw std::invalid_argument("cannot write scene file: " + path);
  out << j.dump(2) << "\n";
}

}  // namespace vinesim
