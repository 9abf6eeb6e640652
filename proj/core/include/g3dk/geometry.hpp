#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace g3dk {

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  Vec3 operator/(double s) const { return {x / s, y / s, z / s}; }
  double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  double norm() const;
  Vec3 normalized() const;
  Vec3 cross(const Vec3& o) const { return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x}; }
  double operator[](int i) const { return i == 0 ? x : i == 1 ? y : z; }
};

/// Row-major 3x3 matrix, just enough for camera math.
struct Mat3 {
  std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

  static Mat3 identity() { return Mat3{}; }
  static Mat3 from_columns(const Vec3& c0, const Vec3& c1, const Vec3& c2);
  Vec3 operator*(const Vec3& v) const;
  Mat3 operator*(const Mat3& o) const;
  Mat3 transposed() const;
  double det() const;
  bool is_rotation(double tol = 1e-6) const;  // orthonormal, det +1
};

/// Rotation about an axis-aligned unit axis (0=x, 1=y, 2=z).
Mat3 axis_rotation(int axis, double angle);

struct Intrinsics {
  double fx = 1.0, fy = 1.0;
  double cx = 0.0, cy = 0.0;
  int width = 1, height = 1;

  void validate() const;
};

/// Camera-to-world pose.
struct Extrinsics {
  Mat3 rotation;
  Vec3 translation;

  void validate() const;  // rotation must be orthonormal with det +1
  Vec3 to_world(const Vec3& p_cam) const { return rotation * p_cam + translation; }
  Vec3 to_camera(const Vec3& p_world) const { return rotation.transposed() * (p_world - translation); }
};

/// One posed RGB-D observation. Depth 0 marks an invalid pixel.
struct CameraFrame {
  std::vector<double> color;  // H*W*3, values in [0,1]
  std::vector<double> depth;  // H*W, meters
  Intrinsics intrinsics;
  Extrinsics extrinsics;

  int width() const { return intrinsics.width; }
  int height() const { return intrinsics.height; }
  double depth_at(int u, int v) const { return depth[static_cast<std::size_t>(v) * width() + u]; }
  void validate() const;
};

struct Aabb {
  Vec3 min;
  Vec3 max;

  bool valid() const { return min.x <= max.x && min.y <= max.y && min.z <= max.z; }
  double volume() const;
  Vec3 center() const { return (min + max) * 0.5; }
  Vec3 extent() const { return max - min; }
  bool contains(const Vec3& p) const {  // closed bounds
    return p.x >= min.x && p.x <= max.x && p.y >= min.y && p.y <= max.y && p.z >= min.z && p.z <= max.z;
  }
};

struct Ray {
  Vec3 origin;
  Vec3 point;
  Vec3 direction;  // unit
};

/// World point for pixel (u,v) with its recorded depth: p = T [d K^-1 (u,v,1); 1].
/// Returns nullopt when the depth is invalid (zero), never a fabricated point.
std::optional<Vec3> backproject_pixel(const CameraFrame& frame, int u, int v);

/// Back-projection at a continuous pixel coordinate with an explicit depth.
Vec3 backproject_at(const Intrinsics& intr, const Extrinsics& extr, double u, double v, double depth);

struct PixelDepth {
  double u = 0.0, v = 0.0;
  double depth = 0.0;
};

/// Exact algebraic inverse of backproject_pixel; nullopt when the point is
/// not in front of the camera.
std::optional<PixelDepth> project_world_to_pixel(const CameraFrame& frame, const Vec3& p_world);

/// Ray through pixel (u,v): origin is the camera center, point is the
/// back-projected depth sample, direction is unit. Throws on invalid depth.
Ray ray_for_pixel(const CameraFrame& frame, int u, int v);

/// Ray through a continuous pixel coordinate with an explicit depth.
Ray ray_through(const Intrinsics& intr, const Extrinsics& extr, double u, double v, double depth);

struct PatchGridPoints {
  int grid_h = 0, grid_w = 0;
  std::vector<Vec3> points;        // grid_h*grid_w, mean world point over valid pixels
  std::vector<std::uint8_t> valid; // zero when a patch has no valid pixel
};

/// Mean world coordinate of each patch_size x patch_size block of pixels,
/// over valid-depth pixels only. Image extents that patch_size does not
/// divide are padded with invalid pixels.
PatchGridPoints patch_mean_world(const CameraFrame& frame, int patch_size);

struct PatchGridRays {
  int grid_h = 0, grid_w = 0;
  std::vector<Ray> rays;
  std::vector<std::uint8_t> valid;
};

/// Ray of each patch's center pixel, using the patch mean depth; patches
/// with no valid pixel are masked.
PatchGridRays patch_center_ray(const CameraFrame& frame, int patch_size);

/// Intersection volume / union volume; 0 for disjoint boxes and for a
/// zero-volume union.
double aabb_iou(const Aabb& a, const Aabb& b);

struct CoverageResult {
  double fraction = 0.0;
  bool eligible = false;   // strictly more than half the points inside
  bool degenerate = false; // no points were supplied
};

/// Fraction of the given world points inside the box (closed bounds).
CoverageResult patch_box_coverage(std::span<const Vec3> patch_points, const Aabb& box);

/// Slab-method ray/box intersection; returns entry and exit parameters
/// (t_near may be negative when the origin is inside the box).
std::optional<std::pair<double, double>> ray_aabb_intersect(const Vec3& origin, const Vec3& dir, const Aabb& box);

}  // namespace g3dk
