#include "splattrack/anchors.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <utility>

#include "splattrack/errors.hpp"

namespace splattrack {

namespace {

struct IcoMesh {
  std::vector<Vec3> verts;
  std::vector<std::array<int, 3>> faces;
};

IcoMesh icosahedron() {
  const double phi = (1.0 + std::sqrt(5.0)) / 2.0;
  IcoMesh m;
  m.verts = {{-1, phi, 0}, {1, phi, 0},  {-1, -phi, 0}, {1, -phi, 0},
             {0, -1, phi}, {0, 1, phi},  {0, -1, -phi}, {0, 1, -phi},
             {phi, 0, -1}, {phi, 0, 1},  {-phi, 0, -1}, {-phi, 0, 1}};
  for (auto& v : m.verts) v.normalize();
  m.faces = {{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11},
             {1, 5, 9},  {5, 11, 4}, {11, 10, 2}, {10, 7, 6}, {7, 1, 8},
             {3, 9, 4},  {3, 4, 2},  {3, 2, 6},   {3, 6, 8},  {3, 8, 9},
             {4, 9, 5},  {2, 4, 11}, {6, 2, 10},  {8, 6, 7},  {9, 8, 1}};
  return m;
}

IcoMesh subdivide(const IcoMesh& in) {
  IcoMesh out;
  out.verts = in.verts;
  std::map<std::pair<int, int>, int> midpoint;
  auto mid = [&](int a, int b) {
    auto key = std::minmax(a, b);
    auto it = midpoint.find(key);
    if (it != midpoint.end()) return it->second;
    Vec3 v = (out.verts[a] + out.verts[b]).normalized();
    out.verts.push_back(v);
    int idx = static_cast<int>(out.verts.size()) - 1;
    midpoint.emplace(key, idx);
    return idx;
  };
  for (const auto& f : in.faces) {
    int ab = mid(f[0], f[1]);
    int bc = mid(f[1], f[2]);
    int ca = mid(f[2], f[0]);
    out.faces.push_back({f[0], ab, ca});
    out.faces.push_back({f[1], bc, ab});
    out.faces.push_back({f[2], ca, bc});
    out.faces.push_back({ab, bc, ca});
  }
  return out;
}

}  // namespace

AnchorSet icosphere_anchors(int level) {
  if (level < 0 || level > 2) {
    throw UnsupportedLevel("icosphere_anchors: level must be 0, 1, or 2");
  }
  IcoMesh m = icosahedron();
  for (int l = 0; l < level; ++l) m = subdivide(m);
  AnchorSet set;
  set.level = level;
  set.directions = std::move(m.verts);
  return set;
}

int assign_to_anchor(const Pose& object_to_camera, const Vec3& object_center,
                     const AnchorSet& anchors) {
  const Vec3 cam = object_to_camera.center();
  const Vec3 dir = (cam - object_center).normalized();
  int best = 0;
  double best_dot = -2.0;
  for (size_t i = 0; i < anchors.directions.size(); ++i) {
    const double d = dir.dot(anchors.directions[i]);
    if (d > best_dot + 1e-15) {
      best_dot = d;
      best = static_cast<int>(i);
    }
  }
  return best;
}

}  // namespace splattrack
