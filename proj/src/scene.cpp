#include "splattrack/scene.hpp"

#include <cmath>
#include <limits>
#include <random>

#include "splattrack/errors.hpp"

namespace splattrack {

namespace {

constexpr double kPi = 3.14159265358979323846;

double intersect_sphere(const Vec3& center, double r, const Vec3& o, const Vec3& d,
                        Vec3* normal) {
  const Vec3 oc = o - center;
  const double b = oc.dot(d);
  const double c = oc.squaredNorm() - r * r;
  const double disc = b * b - c;
  if (disc < 0) return -1.0;
  const double sq = std::sqrt(disc);
  double t = -b - sq;
  if (t <= 1e-9) t = -b + sq;
  if (t <= 1e-9) return -1.0;
  if (normal) *normal = (o + t * d - center) / r;
  return t;
}

double intersect_cube(double h, const Vec3& o, const Vec3& d, Vec3* normal) {
  double tmin = -std::numeric_limits<double>::infinity();
  double tmax = std::numeric_limits<double>::infinity();
  int enter_axis = -1;
  for (int a = 0; a < 3; ++a) {
    if (std::abs(d[a]) < 1e-15) {
      if (std::abs(o[a]) > h) return -1.0;
      continue;
    }
    double t0 = (-h - o[a]) / d[a];
    double t1 = (h - o[a]) / d[a];
    if (t0 > t1) std::swap(t0, t1);
    if (t0 > tmin) {
      tmin = t0;
      enter_axis = a;
    }
    tmax = std::min(tmax, t1);
    if (tmin > tmax) return -1.0;
  }
  if (tmin <= 1e-9 || enter_axis < 0) return -1.0;
  if (normal) {
    Vec3 n = Vec3::Zero();
    n[enter_axis] = d[enter_axis] > 0 ? -1.0 : 1.0;
    *normal = n;
  }
  return tmin;
}

double intersect_cylinder(double r, double hh, const Vec3& o, const Vec3& d,
                          Vec3* normal) {
  double best = -1.0;
  Vec3 best_n = Vec3::Zero();
  // side
  const double a = d.x() * d.x() + d.y() * d.y();
  if (a > 1e-15) {
    const double b = o.x() * d.x() + o.y() * d.y();
    const double c = o.x() * o.x() + o.y() * o.y() - r * r;
    const double disc = b * b - a * c;
    if (disc >= 0) {
      const double sq = std::sqrt(disc);
      for (double t : {(-b - sq) / a, (-b + sq) / a}) {
        if (t <= 1e-9) continue;
        const Vec3 p = o + t * d;
        if (std::abs(p.z()) > hh) continue;
        if (best < 0 || t < best) {
          best = t;
          best_n = Vec3(p.x() / r, p.y() / r, 0.0);
        }
        break;
      }
    }
  }
  // caps
  for (double zc : {hh, -hh}) {
    if (std::abs(d.z()) < 1e-15) continue;
    const double t = (zc - o.z()) / d.z();
    if (t <= 1e-9) continue;
    const Vec3 p = o + t * d;
    if (p.x() * p.x() + p.y() * p.y() > r * r) continue;
    if (best < 0 || t < best) {
      best = t;
      best_n = Vec3(0, 0, zc > 0 ? 1.0 : -1.0);
    }
  }
  if (normal && best > 0) *normal = best_n;
  return best;
}

struct BlobGeom {
  Vec3 ca, cb;
  double ra, rb;
};

BlobGeom blob_geom(double size) {
  return {Vec3(0.45 * size, 0, 0), Vec3(-0.55 * size, 0, 0), size, 0.75 * size};
}

double intersect_blob(double size, const Vec3& o, const Vec3& d, Vec3* normal) {
  const BlobGeom g = blob_geom(size);
  // union of two spheres: nearest hit that lies outside the other sphere
  double best = -1.0;
  Vec3 best_n = Vec3::Zero();
  struct Cand {
    Vec3 c;
    double r;
    const Vec3* other_c;
    double other_r;
  };
  const Cand cands[2] = {{g.ca, g.ra, &g.cb, g.rb}, {g.cb, g.rb, &g.ca, g.ra}};
  for (const Cand& cd : cands) {
    const Vec3 oc = o - cd.c;
    const double b = oc.dot(d);
    const double c = oc.squaredNorm() - cd.r * cd.r;
    const double disc = b * b - c;
    if (disc < 0) continue;
    const double sq = std::sqrt(disc);
    for (double t : {-b - sq, -b + sq}) {
      if (t <= 1e-9) continue;
      const Vec3 p = o + t * d;
      if ((p - *cd.other_c).norm() < cd.other_r - 1e-12) continue;  // inside the union
      if (best < 0 || t < best) {
        best = t;
        best_n = (p - cd.c) / cd.r;
      }
      break;
    }
  }
  if (normal && best > 0) *normal = best_n;
  return best;
}

Vec3 procedural_color(const Vec3& p, double size) {
  const double s = 18.0 / size;
  Vec3 c(0.55 + 0.35 * std::sin(s * p.x()) * std::sin(0.7 * s * p.y() + 0.9),
         0.55 + 0.35 * std::sin(s * p.y() + 1.7) * std::sin(0.6 * s * p.z() + 0.3),
         0.55 + 0.35 * std::sin(s * p.z() + 3.1) * std::sin(0.8 * s * p.x() + 2.2));
  // coarse checker to break symmetry
  const double q = 2.5 / size;
  const int checker = (static_cast<int>(std::floor(p.x() * q)) +
                       static_cast<int>(std::floor(p.y() * q)) +
                       static_cast<int>(std::floor(p.z() * q))) & 1;
  if (checker) c *= 0.72;
  return c.cwiseMax(0.0).cwiseMin(1.0);
}

Pose look_at_object(const Vec3& cam_center_world) {
  // world == object frame; camera looks at the origin, z forward, y down.
  const Vec3 fwd = (-cam_center_world).normalized();
  Vec3 up_hint(0, 0, 1);
  if (std::abs(fwd.dot(up_hint)) > 0.98) up_hint = Vec3(0, 1, 0);
  const Vec3 right = fwd.cross(up_hint).normalized();
  const Vec3 down = fwd.cross(right);
  Mat3 r_wc;  // world-to-camera rows
  r_wc.row(0) = right.transpose();
  r_wc.row(1) = down.transpose();
  r_wc.row(2) = fwd.transpose();
  Pose p;
  p.R = r_wc;
  p.t = -r_wc * cam_center_world;
  return p;
}

void sample_model_points(const SceneSpec& spec, ModelPoints& out) {
  const double sz = spec.size;
  const int target = spec.model_samples;
  switch (spec.shape) {
    case SceneShape::Cube: {
      const int per_side = std::max(2, static_cast<int>(std::sqrt(target / 6.0)));
      for (int face = 0; face < 6; ++face) {
        const int axis = face / 2;
        const double sign = face % 2 ? -1.0 : 1.0;
        for (int i = 0; i < per_side; ++i) {
          for (int j = 0; j < per_side; ++j) {
            const double u = (-1.0 + 2.0 * (i + 0.5) / per_side) * sz;
            const double v = (-1.0 + 2.0 * (j + 0.5) / per_side) * sz;
            Vec3 p;
            p[axis] = sign * sz;
            p[(axis + 1) % 3] = u;
            p[(axis + 2) % 3] = v;
            out.push_back(p);
          }
        }
      }
      break;
    }
    case SceneShape::Sphere: {
      const double ga = kPi * (3.0 - std::sqrt(5.0));
      for (int i = 0; i < target; ++i) {
        const double z = 1.0 - 2.0 * (i + 0.5) / target;
        const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
        const double th = ga * i;
        out.push_back(sz * Vec3(r * std::cos(th), r * std::sin(th), z));
      }
      break;
    }
    case SceneShape::Cylinder: {
      const double hh = 1.2 * sz;
      const int n_side = target * 2 / 3;
      const int rings = std::max(2, static_cast<int>(std::sqrt(n_side / 4.0)));
      const int per_ring = std::max(4, n_side / rings);
      for (int i = 0; i < rings; ++i) {
        const double z = -hh + 2.0 * hh * (i + 0.5) / rings;
        for (int j = 0; j < per_ring; ++j) {
          const double th = 2.0 * kPi * j / per_ring;
          out.push_back(Vec3(sz * std::cos(th), sz * std::sin(th), z));
        }
      }
      const int cap_rings = 4;
      for (double zc : {hh, -hh}) {
        for (int i = 1; i <= cap_rings; ++i) {
          const double r = sz * i / cap_rings;
          const int per = std::max(4, static_cast<int>(2 * kPi * i));
          for (int j = 0; j < per; ++j) {
            const double th = 2.0 * kPi * j / per;
            out.push_back(Vec3(r * std::cos(th), r * std::sin(th), zc));
          }
        }
      }
      break;
    }
    case SceneShape::Blob: {
      const BlobGeom g = blob_geom(sz);
      const double ga = kPi * (3.0 - std::sqrt(5.0));
      const int per_lobe = target;
      for (int lobe = 0; lobe < 2; ++lobe) {
        const Vec3 c = lobe ? g.cb : g.ca;
        const double r = lobe ? g.rb : g.ra;
        const Vec3 oc = lobe ? g.ca : g.cb;
        const double orr = lobe ? g.ra : g.rb;
        for (int i = 0; i < per_lobe; ++i) {
          const double z = 1.0 - 2.0 * (i + 0.5) / per_lobe;
          const double rr = std::sqrt(std::max(0.0, 1.0 - z * z));
          const double th = ga * i;
          const Vec3 p = c + r * Vec3(rr * std::cos(th), rr * std::sin(th), z);
          if ((p - oc).norm() >= orr) out.push_back(p);
        }
      }
      break;
    }
  }
}

}  // namespace

SceneShape shape_from_string(const std::string& s) {
  if (s == "cube") return SceneShape::Cube;
  if (s == "sphere") return SceneShape::Sphere;
  if (s == "cylinder") return SceneShape::Cylinder;
  if (s == "blob") return SceneShape::Blob;
  throw IoError("unknown shape: " + s);
}

TrajectoryKind trajectory_from_string(const std::string& s) {
  if (s == "orbit") return TrajectoryKind::Orbit;
  if (s == "handheld") return TrajectoryKind::Handheld;
  throw IoError("unknown trajectory: " + s);
}

double intersect_shape(SceneShape shape, double size, const Vec3& origin,
                       const Vec3& dir, Vec3* normal) {
  switch (shape) {
    case SceneShape::Cube:
      return intersect_cube(size, origin, dir, normal);
    case SceneShape::Sphere:
      return intersect_sphere(Vec3::Zero(), size, origin, dir, normal);
    case SceneShape::Cylinder:
      return intersect_cylinder(size, 1.2 * size, origin, dir, normal);
    case SceneShape::Blob:
      return intersect_blob(size, origin, dir, normal);
  }
  return -1.0;
}

SyntheticScene generate_scene(const SceneSpec& spec) {
  if (spec.n_frames < 2) throw IoError("generate_scene: need >= 2 frames");
  SyntheticScene scene;
  scene.intrinsics = Camera{spec.focal, spec.focal, (spec.width - 1) / 2.0,
                            (spec.height - 1) / 2.0, spec.width, spec.height};
  std::mt19937_64 rng(spec.seed * 0x9e3779b97f4a7c15ULL + 0x2545f4914f6cdd1dULL);
  std::normal_distribution<double> gauss(0.0, 1.0);

  const Vec3 light = Vec3(0.4, 0.25, 0.88).normalized();  // object frame

  for (int f = 0; f < spec.n_frames; ++f) {
    const double az = spec.sweep_rad * f / spec.n_frames;
    // Elevation oscillates so the whole surface (top and bottom) is seen
    // while the camera stays on the sphere of radius orbit_radius.
    const double el = spec.elevation_rad * std::sin(3.0 * az + 0.4);
    const Vec3 c = spec.orbit_radius *
                   Vec3(std::cos(el) * std::cos(az), std::cos(el) * std::sin(az),
                        std::sin(el));
    Pose pose = look_at_object(c);
    if (spec.trajectory == TrajectoryKind::Handheld) {
      PoseTangent jitter;
      jitter.trans = 0.004 * Vec3(gauss(rng), gauss(rng), gauss(rng));
      jitter.rot = 0.02 * Vec3(gauss(rng), gauss(rng), gauss(rng));
      pose = compose(se3_exp(jitter), pose);
    }

    auto frame = std::make_shared<Frame>();
    frame->intrinsics = scene.intrinsics;
    frame->timestamp = f;
    frame->rgb = ImageF3(spec.width, spec.height);
    frame->depth = ImageF(spec.width, spec.height);
    frame->mask = ImageU8(spec.width, spec.height);

    const Pose inv = pose.inverse();
    const Vec3 o_obj = pose.center();
    for (int y = 0; y < spec.height; ++y) {
      for (int x = 0; x < spec.width; ++x) {
        const Vec3 dir_cam = scene.intrinsics.ray(x, y).normalized();
        const Vec3 dir_obj = inv.R * dir_cam;
        Vec3 n_obj;
        const double t = intersect_shape(spec.shape, spec.size, o_obj, dir_obj, &n_obj);
        if (t <= 0) continue;
        const Vec3 p_obj = o_obj + t * dir_obj;
        frame->depth.at(x, y) = static_cast<float>(t * dir_cam.z());
        frame->mask.at(x, y) = 255;
        const double lambert = 0.35 + 0.65 * std::max(0.0, n_obj.dot(light));
        const Vec3 col = (procedural_color(p_obj, spec.size) * lambert)
                             .cwiseMax(0.0)
                             .cwiseMin(1.0);
        for (int ch = 0; ch < 3; ++ch)
          frame->rgb.at(x, y, ch) = static_cast<float>(col[ch]);
      }
    }
    scene.frames.push_back(std::move(frame));
    scene.gt.push_back(pose);
  }
  sample_model_points(spec, scene.model_points);
  return scene;
}

}  // namespace splattrack
