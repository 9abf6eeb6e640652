#include "g3dk/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace g3dk {

double Vec3::norm() const { return std::sqrt(x * x + y * y + z * z); }

Vec3 Vec3::normalized() const {
  const double n = norm();
  if (n == 0.0) throw std::domain_error("cannot normalize a zero vector");
  return *this / n;
}

Mat3 Mat3::from_columns(const Vec3& c0, const Vec3& c1, const Vec3& c2) {
  Mat3 r;
  r.m = {c0.x, c1.x, c2.x, c0.y, c1.y, c2.y, c0.z, c1.z, c2.z};
  return r;
}

Vec3 Mat3::operator*(const Vec3& v) const {
  return {m[0] * v.x + m[1] * v.y + m[2] * v.z,
          m[3] * v.x + m[4] * v.y + m[5] * v.z,
          m[6] * v.x + m[7] * v.y + m[8] * v.z};
}

Mat3 Mat3::operator*(const Mat3& o) const {
  Mat3 r;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      double s = 0.0;
      for (int k = 0; k < 3; ++k) s += m[i * 3 + k] * o.m[k * 3 + j];
      r.m[i * 3 + j] = s;
    }
  }
  return r;
}

Mat3 Mat3::transposed() const {
  Mat3 r;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) r.m[i * 3 + j] = m[j * 3 + i];
  }
  return r;
}

double Mat3::det() const {
  return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
         m[2] * (m[3] * m[7] - m[4] * m[6]);
}

bool Mat3::is_rotation(double tol) const {
  const Mat3 should_be_identity = *this * transposed();
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      const double want = (i == j) ? 1.0 : 0.0;
      if (std::fabs(should_be_identity.m[i * 3 + j] - want) > tol) return false;
    }
  }
  return std::fabs(det() - 1.0) <= tol;
}

Mat3 axis_rotation(int axis, double angle) {
  const double c = std::cos(angle);
  const double s = std::sin(angle);
  Mat3 r;
  switch (axis) {
    case 0: r.m = {1, 0, 0, 0, c, -s, 0, s, c}; break;
    case 1: r.m = {c, 0, s, 0, 1, 0, -s, 0, c}; break;
    case 2: r.m = {c, -s, 0, s, c, 0, 0, 0, 1}; break;
    default: throw std::invalid_argument("axis_rotation axis must be 0, 1 or 2");
  }
  return r;
}

void Intrinsics::validate() const {
  if (!(fx > 0.0) || !(fy > 0.0)) throw std::invalid_argument("focal lengths must be positive");
  if (width <= 0 || height <= 0) throw std::invalid_argument("image extents must be positive");
  if (cx < 0.0 || cx >= width || cy < 0.0 || cy >= height) {
    throw std::invalid_argument("principal point outside the image");
  }
}

void Extrinsics::validate() const {
  if (!rotation.is_rotation()) throw std::invalid_argument("extrinsic rotation is not orthonormal with det +1");
}

void CameraFrame::validate() const {
  intrinsics.validate();
  extrinsics.validate();
  const auto n = static_cast<std::size_t>(width()) * static_cast<std::size_t>(height());
  if (depth.size() != n) throw std::invalid_argument("depth extents disagree with intrinsics");
  if (color.size() != n * 3) throw std::invalid_argument("color extents disagree with intrinsics");
  for (double d : depth) {
    if (d < 0.0) throw std::invalid_argument("negative depth value");
  }
}

Vec3 backproject_at(const Intrinsics& intr, const Extrinsics& extr, double u, double v, double depth) {
  // d * K^-1 (u,v,1)^T, then camera-to-world
  const Vec3 p_cam{depth * (u - intr.cx) / intr.fx, depth * (v - intr.cy) / intr.fy, depth};
  return extr.to_world(p_cam);
}

std::optional<Vec3> backproject_pixel(const CameraFrame& frame, int u, int v) {
  if (u < 0 || u >= frame.width() || v < 0 || v >= frame.height()) {
    throw std::out_of_range("pixel (" + std::to_string(u) + "," + std::to_string(v) + ") out of bounds");
  }
  const double d = frame.depth_at(u, v);
  if (d <= 0.0) return std::nullopt;
  return backproject_at(frame.intrinsics, frame.extrinsics, u, v, d);
}

std::optional<PixelDepth> project_world_to_pixel(const CameraFrame& frame, const Vec3& p_world) {
  const Vec3 p_cam = frame.extrinsics.to_camera(p_world);
  if (p_cam.z <= 0.0) return std::nullopt;
  PixelDepth out;
  out.u = frame.intrinsics.fx * p_cam.x / p_cam.z + frame.intrinsics.cx;
  out.v = frame.intrinsics.fy * p_cam.y / p_cam.z + frame.intrinsics.cy;
  out.depth = p_cam.z;
  return out;
}

Ray ray_through(const Intrinsics& intr, const Extrinsics& extr, double u, double v, double depth) {
  if (!(depth > 0.0)) throw std::invalid_argument("ray_through requires positive depth");
  Ray r;
  r.origin = extr.translation;
  r.point = backproject_at(intr, extr, u, v, depth);
  const Vec3 diff = r.point - r.origin;
  const double n = diff.norm();
  if (n == 0.0) throw std::domain_error("degenerate ray: point coincides with camera center");
  r.direction = diff / n;
  return r;
}

Ray ray_for_pixel(const CameraFrame& frame, int u, int v) {
  const double d = frame.depth_at(u, v);
  if (d <= 0.0) throw std::invalid_argument("ray_for_pixel at invalid-depth pixel");
  return ray_through(frame.intrinsics, frame.extrinsics, u, v, d);
}

namespace {

inline int ceil_div(int a, int b) { return (a + b - 1) / b; }

}  // namespace

PatchGridPoints patch_mean_world(const CameraFrame& frame, int patch_size) {
  if (patch_size <= 0) throw std::invalid_argument("patch_size must be positive");
  PatchGridPoints out;
  out.grid_h = ceil_div(frame.height(), patch_size);
  out.grid_w = ceil_div(frame.width(), patch_size);
  out.points.resize(static_cast<std::size_t>(out.grid_h) * out.grid_w);
  out.valid.assign(out.points.size(), 0);
  for (int ph = 0; ph < out.grid_h; ++ph) {
    for (int pw = 0; pw < out.grid_w; ++pw) {
      Vec3 acc{};
      int count = 0;
      for (int dv = 0; dv < patch_size; ++dv) {
        const int v = ph * patch_size + dv;
        if (v >= frame.height()) break;
        for (int du = 0; du < patch_size; ++du) {
          const int u = pw * patch_size + du;
          if (u >= frame.width()) break;
          if (auto p = backproject_pixel(frame, u, v)) {
            acc = acc + *p;
            ++count;
          }
        }
      }
      const auto idx = static_cast<std::size_t>(ph) * out.grid_w + pw;
      if (count > 0) {
        out.points[idx] = acc / static_cast<double>(count);
        out.valid[idx] = 1;
      }
    }
  }
  return out;
}

PatchGridRays patch_center_ray(const CameraFrame& frame, int patch_size) {
  if (patch_size <= 0) throw std::invalid_argument("patch_size must be positive");
  PatchGridRays out;
  out.grid_h = ceil_div(frame.height(), patch_size);
  out.grid_w = ceil_div(frame.width(), patch_size);
  out.rays.resize(static_cast<std::size_t>(out.grid_h) * out.grid_w);
  out.valid.assign(out.rays.size(), 0);
  for (int ph = 0; ph < out.grid_h; ++ph) {
    for (int pw = 0; pw < out.grid_w; ++pw) {
      double depth_acc = 0.0;
      int count = 0;
      double u_acc = 0.0, v_acc = 0.0;
      for (int dv = 0; dv < patch_size; ++dv) {
        const int v = ph * patch_size + dv;
        if (v >= frame.height()) break;
        for (int du = 0; du < patch_size; ++du) {
          const int u = pw * patch_size + du;
          if (u >= frame.width()) break;
          u_acc += u;
          v_acc += v;
          const double d = frame.depth_at(u, v);
          if (d > 0.0) {
            depth_acc += d;
            ++count;
          }
        }
      }
      if (count == 0) continue;  // masked
      // Center pixel = mean in-image pixel coordinate of the patch; the
      // representative depth is the patch mean (the center pixel itself
      // may be invalid).
      const int h_span = std::min(patch_size, frame.height() - ph * patch_size);
      const int w_span = std::min(patch_size, frame.width() - pw * patch_size);
      const double n_px = static_cast<double>(h_span) * w_span;
      const auto idx = static_cast<std::size_t>(ph) * out.grid_w + pw;
      out.rays[idx] = ray_through(frame.intrinsics, frame.extrinsics, u_acc / n_px, v_acc / n_px,
                                  depth_acc / static_cast<double>(count));
      out.valid[idx] = 1;
    }
  }
  return out;
}

double Aabb::volume() const {
  if (!valid()) return 0.0;
  const Vec3 e = extent();
  return e.x * e.y * e.z;
}

double aabb_iou(const Aabb& a, const Aabb& b) {
  if (!a.valid() || !b.valid()) throw std::invalid_argument("aabb_iou requires valid boxes");
  Aabb inter{{std::max(a.min.x, b.min.x), std::max(a.min.y, b.min.y), std::max(a.min.z, b.min.z)},
             {std::min(a.max.x, b.max.x), std::min(a.max.y, b.max.y), std::min(a.max.z, b.max.z)}};
  double iv = 0.0;
  if (inter.valid()) iv = inter.volume();
  const double uv = a.volume() + b.volume() - iv;
  if (uv <= 0.0) return 0.0;  // two degenerate boxes
  return iv / uv;
}

CoverageResult patch_box_coverage(std::span<const Vec3> patch_points, const Aabb& box) {
  CoverageResult res;
  if (patch_points.empty()) {
    res.degenerate = true;
    return res;
  }
  std::size_t inside = 0;
  for (const Vec3& p : patch_points) {
    if (box.contains(p)) ++inside;
  }
  res.fraction = static_cast<double>(inside) / static_cast<double>(patch_points.size());
  res.eligible = res.fraction > 0.5;  // strictly over 50%
  return res;
}

std::optional<std::pair<double, double>> ray_aabb_intersect(const Vec3& origin, const Vec3& dir, const Aabb& box) {
  double t_near = -std::numeric_limits<double>::infinity();
  double t_far = std::numeric_limits<double>::infinity();
  const double o[3] = {origin.x, origin.y, origin.z};
  const double d[3] = {dir.x, dir.y, dir.z};
  const double lo[3] = {box.min.x, box.min.y, box.min.z};
  const double hi[3] = {box.max.x, box.max.y, box.max.z};
  for (int i = 0; i < 3; ++i) {
    if (d[i] == 0.0) {
      if (o[i] < lo[i] || o[i] > hi[i]) return std::nullopt;
      continue;
    }
    double t0 = (lo[i] - o[i]) / d[i];
    double t1 = (hi[i] - o[i]) / d[i];
    if (t0 > t1) std::swap(t0, t1);
    t_near = std::max(t_near, t0);
    t_far = std::min(t_far, t1);
    if (t_near > t_far) return std::nullopt;
  }
  return std::make_pair(t_near, t_far);
}

}  // namespace g3dk
