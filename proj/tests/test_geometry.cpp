#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "g3dk/geometry.hpp"
#include "g3dk/rng.hpp"

using namespace g3dk;

namespace {

CameraFrame identity_frame(int w, int h, double depth_fill) {
  CameraFrame f;
  f.intrinsics = {1.0, 1.0, 0.0, 0.0, w, h};
  f.extrinsics = {};
  f.color.assign(static_cast<std::size_t>(w) * h * 3, 0.5);
  f.depth.assign(static_cast<std::size_t>(w) * h, depth_fill);
  return f;
}

Extrinsics random_pose(Rng& rng) {
  Extrinsics e;
  e.rotation = axis_rotation(0, rng.uniform(-1.5, 1.5)) * axis_rotation(1, rng.uniform(-1.5, 1.5)) *
               axis_rotation(2, rng.uniform(-3.1, 3.1));
  e.translation = {rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-5, 5)};
  return e;
}

}  // namespace

TEST_CASE("backproject_pixel identity and translated cameras") {
  CameraFrame f = identity_frame(6, 4, 1.0);
  auto p = backproject_pixel(f, 3, 2);
  REQUIRE(p.has_value());
  CHECK(p->x == 3.0);
  CHECK(p->y == 2.0);
  CHECK(p->z == 1.0);

  f.extrinsics.translation = {0, 0, 5};
  p = backproject_pixel(f, 3, 2);
  REQUIRE(p.has_value());
  CHECK(p->x == doctest::Approx(3.0));
  CHECK(p->y == doctest::Approx(2.0));
  CHECK(p->z == doctest::Approx(6.0));

  f.depth[2 * 6 + 3] = 0.0;  // invalid depth gives a sentinel, never a point
  CHECK_FALSE(backproject_pixel(f, 3, 2).has_value());
  CHECK_THROWS_AS(backproject_pixel(f, 99, 0), std::out_of_range);
}

TEST_CASE("project_world_to_pixel basics") {
  CameraFrame f = identity_frame(4, 4, 1.0);
  auto pd = project_world_to_pixel(f, {0, 0, 2});
  REQUIRE(pd.has_value());
  CHECK(pd->u == doctest::Approx(0.0));
  CHECK(pd->v == doctest::Approx(0.0));
  CHECK(pd->depth == doctest::Approx(2.0));
  CHECK_FALSE(project_world_to_pixel(f, {0, 0, -1}).has_value());
}

TEST_CASE("round trip on random posed cameras") {
  Rng rng(31);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    CameraFrame f;
    f.intrinsics = {rng.uniform(50, 200), rng.uniform(50, 200), rng.uniform(10, 50), rng.uniform(10, 50), 64, 64};
    f.extrinsics = random_pose(rng);
    f.color.assign(64 * 64 * 3, 0.0);
    f.depth.assign(64 * 64, 0.0);
    const int u = static_cast<int>(rng.uniform_int(0, 63));
    const int v = static_cast<int>(rng.uniform_int(0, 63));
    const double d = rng.uniform(0.2, 9.0);
    f.depth[static_cast<std::size_t>(v) * 64 + u] = d;
    const auto p = backproject_pixel(f, u, v);
    REQUIRE(p.has_value());
    const auto pd = project_world_to_pixel(f, *p);
    REQUIRE(pd.has_value());
    worst = std::max({worst, std::fabs(pd->u - u), std::fabs(pd->v - v), std::fabs(pd->depth - d)});
    // and back again, in meters
    const Vec3 again = backproject_at(f.intrinsics, f.extrinsics, pd->u, pd->v, pd->depth);
    worst = std::max(worst, (again - *p).norm());
  }
  CHECK(worst < 1e-9);
}

TEST_CASE("rigid invariance of projections") {
  Rng rng(32);
  for (int trial = 0; trial < 50; ++trial) {
    CameraFrame f = identity_frame(32, 32, 1.0);
    f.intrinsics = {80, 90, 15, 16, 32, 32};
    f.extrinsics = random_pose(rng);
    const Vec3 p{rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2)};
    if (f.extrinsics.to_camera(p).z < 0.3) continue;  // keep the mapping well-conditioned
    const auto before = project_world_to_pixel(f, p);

    const Extrinsics rigid = random_pose(rng);
    CameraFrame g = f;
    g.extrinsics.rotation = rigid.rotation * f.extrinsics.rotation;
    g.extrinsics.translation = rigid.rotation * f.extrinsics.translation + rigid.translation;
    const Vec3 p2 = rigid.rotation * p + rigid.translation;
    const auto after = project_world_to_pixel(g, p2);
    if (!before.has_value()) {
      CHECK_FALSE(after.has_value());
      continue;
    }
    REQUIRE(after.has_value());
    CHECK(std::fabs(before->u - after->u) < 1e-9);
    CHECK(std::fabs(before->v - after->v) < 1e-9);
    CHECK(std::fabs(before->depth - after->depth) < 1e-9);
  }
}

TEST_CASE("ray_for_pixel hand cases and invariants") {
  CameraFrame f = identity_frame(4, 4, 1.0);
  Ray r = ray_for_pixel(f, 0, 0);
  CHECK(r.direction.x == doctest::Approx(0.0));
  CHECK(r.direction.y == doctest::Approx(0.0));
  CHECK(r.direction.z == doctest::Approx(1.0));

  r = ray_for_pixel(f, 1, 0);
  const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
  CHECK(r.direction.x == doctest::Approx(inv_sqrt2).epsilon(1e-12));
  CHECK(r.direction.y == doctest::Approx(0.0));
  CHECK(r.direction.z == doctest::Approx(inv_sqrt2).epsilon(1e-12));

  Rng rng(33);
  for (int trial = 0; trial < 200; ++trial) {
    CameraFrame g;
    g.intrinsics = {rng.uniform(40, 120), rng.uniform(40, 120), rng.uniform(5, 25), rng.uniform(5, 25), 32, 32};
    g.extrinsics = random_pose(rng);
    g.color.assign(32 * 32 * 3, 0.0);
    g.depth.assign(32 * 32, rng.uniform(0.5, 4.0));
    const int u = static_cast<int>(rng.uniform_int(0, 31));
    const int v = static_cast<int>(rng.uniform_int(0, 31));
    const Ray a = ray_for_pixel(g, u, v);
    CHECK(std::fabs(a.direction.norm() - 1.0) < 1e-9);
    CHECK(std::fabs((a.point - a.origin).normalized().dot(a.direction) - 1.0) < 1e-9);

    // direction depends only on pixel and pose, not on the depth scale
    CameraFrame scaled = g;
    const double c = rng.uniform(0.1, 10.0);
    for (auto& d : scaled.depth) d *= c;
    const Ray b = ray_for_pixel(scaled, u, v);
    CHECK((a.direction - b.direction).norm() < 1e-9);
  }
}

TEST_CASE("patch_mean_world") {
  SUBCASE("constant depth plane matches the brute-force average") {
    CameraFrame f = identity_frame(4, 4, 2.0);
    const auto grid = patch_mean_world(f, 2);
    REQUIRE(grid.grid_h == 2);
    REQUIRE(grid.grid_w == 2);
    for (int gi = 0; gi < 2; ++gi) {
      for (int gj = 0; gj < 2; ++gj) {
        Vec3 acc{};
        for (int dv = 0; dv < 2; ++dv) {
          for (int du = 0; du < 2; ++du) {
            acc = acc + *backproject_pixel(f, gj * 2 + du, gi * 2 + dv);
          }
        }
        const Vec3 expect = acc / 4.0;
        const Vec3 got = grid.points[static_cast<std::size_t>(gi * 2 + gj)];
        CHECK((got - expect).norm() < 1e-12);
        CHECK(grid.valid[static_cast<std::size_t>(gi * 2 + gj)] == 1);
      }
    }
  }

  SUBCASE("all-zero depth masks everything") {
    CameraFrame f = identity_frame(4, 4, 0.0);
    const auto grid = patch_mean_world(f, 2);
    for (auto v : grid.valid) CHECK(v == 0);
  }

  SUBCASE("half-valid patch averages the valid half only") {
    CameraFrame f = identity_frame(2, 2, 1.0);
    f.depth[2] = 0.0;
    f.depth[3] = 0.0;  // bottom row invalid
    const auto grid = patch_mean_world(f, 2);
    REQUIRE(grid.valid[0] == 1);
    Vec3 expect = (*backproject_pixel(f, 0, 0) + *backproject_pixel(f, 1, 0)) / 2.0;
    CHECK((grid.points[0] - expect).norm() < 1e-12);
  }
}

TEST_CASE("patch_center_ray") {
  SUBCASE("1x1 patch reduces to ray_for_pixel") {
    CameraFrame f = identity_frame(2, 2, 1.5);
    const auto rays = patch_center_ray(f, 1);
    for (int v = 0; v < 2; ++v) {
      for (int u = 0; u < 2; ++u) {
        const Ray expect = ray_for_pixel(f, u, v);
        const Ray got = rays.rays[static_cast<std::size_t>(v * 2 + u)];
        CHECK((got.direction - expect.direction).norm() < 1e-12);
      }
    }
  }

  SUBCASE("patch centered on the principal point looks along +z") {
    CameraFrame f = identity_frame(4, 4, 1.0);
    f.intrinsics.cx = 1.5;  // mean pixel coordinate of a 4x4 patch
    f.intrinsics.cy = 1.5;
    const auto rays = patch_center_ray(f, 4);
    REQUIRE(rays.valid[0] == 1);
    CHECK((rays.rays[0].direction - Vec3{0, 0, 1}).norm() < 1e-12);
  }

  SUBCASE("all rays unit norm, invalid patches masked") {
    CameraFrame f = identity_frame(6, 6, 2.0);
    for (int i = 0; i < 6; ++i) f.depth[static_cast<std::size_t>(i)] = 0.0;
    const auto rays = patch_center_ray(f, 3);
    for (std::size_t i = 0; i < rays.rays.size(); ++i) {
      if (rays.valid[i]) CHECK(std::fabs(rays.rays[i].direction.norm() - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("aabb_iou hand cases") {
  const Aabb unit{{0, 0, 0}, {1, 1, 1}};
  CHECK(aabb_iou(unit, unit) == 1.0);

  const Aabb shifted{{0.5, 0, 0}, {1.5, 1, 1}};
  CHECK(aabb_iou(unit, shifted) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

  const Aabb far_box{{5, 5, 5}, {6, 6, 6}};
  CHECK(aabb_iou(unit, far_box) == 0.0);

  const Aabb degenerate{{0, 0, 0}, {0, 1, 1}};
  CHECK(aabb_iou(degenerate, degenerate) == 0.0);  // zero-volume union
}

TEST_CASE("aabb_iou against the Monte Carlo volume oracle") {
  Rng rng(44);
  auto random_box = [&rng]() {
    const Vec3 a{rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2)};
    const Vec3 e{rng.uniform(0.3, 2.5), rng.uniform(0.3, 2.5), rng.uniform(0.3, 2.5)};
    return Aabb{a, a + e};
  };
  auto mc_iou = [&rng](const Aabb& x, const Aabb& y, int samples) {
    const Aabb hull{{std::min(x.min.x, y.min.x), std::min(x.min.y, y.min.y), std::min(x.min.z, y.min.z)},
                    {std::max(x.max.x, y.max.x), std::max(x.max.y, y.max.y), std::max(x.max.z, y.max.z)}};
    int inter = 0, uni = 0;
    for (int s = 0; s < samples; ++s) {
      const Vec3 p{rng.uniform(hull.min.x, hull.max.x), rng.uniform(hull.min.y, hull.max.y),
                   rng.uniform(hull.min.z, hull.max.z)};
      const bool in_x = x.contains(p);
      const bool in_y = y.contains(p);
      if (in_x && in_y) ++inter;
      if (in_x || in_y) ++uni;
    }
    return uni == 0 ? 0.0 : static_cast<double>(inter) / uni;
  };

  // the spec's single-pair case at a million samples
  {
    const Aabb a = random_box();
    Aabb b = a;
    b.min.x += 0.4;
    b.max.x += 0.4;
    CHECK(std::fabs(aabb_iou(a, b) - mc_iou(a, b, 1000000)) < 0.02);
  }

  for (int pair = 0; pair < 200; ++pair) {
    Aabb a = random_box();
    Aabb b = random_box();
    if (pair % 3 == 0) {  // force some overlap so the oracle sees both regimes
      b = a;
      b.min.x += rng.uniform(-0.5, 0.5);
      b.max.x += rng.uniform(-0.5, 0.5);
      if (b.min.x > b.max.x) std::swap(b.min.x, b.max.x);
    }
    const double exact = aabb_iou(a, b);
    const double approx = mc_iou(a, b, 50000);
    CHECK(std::fabs(exact - approx) < 0.02);
    CHECK(exact == aabb_iou(b, a));  // symmetric
    CHECK(exact >= 0.0);
    CHECK(exact <= 1.0);
  }
}

TEST_CASE("patch_box_coverage") {
  const Aabb box{{0, 0, 0}, {1, 1, 1}};
  std::vector<Vec3> inside(8, Vec3{0.5, 0.5, 0.5});
  auto all_in = patch_box_coverage(inside, box);
  CHECK(all_in.fraction == 1.0);
  CHECK(all_in.eligible);

  std::vector<Vec3> half = {{0.5, 0.5, 0.5}, {0.2, 0.2, 0.2}, {5, 5, 5}, {9, 9, 9}};
  auto h = patch_box_coverage(half, box);
  CHECK(h.fraction == 0.5);
  CHECK_FALSE(h.eligible);  // strictly over 50%

  auto d = patch_box_coverage(std::span<const Vec3>{}, box);
  CHECK(d.degenerate);
  CHECK_FALSE(d.eligible);

  // boundary points count as inside (closed bounds)
  std::vector<Vec3> boundary = {{0, 0, 0}, {1, 1, 1}, {0.5, 1, 0.5}};
  CHECK(patch_box_coverage(boundary, box).fraction == 1.0);

  Rng rng(55);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Vec3> pts;
    for (int i = 0; i < 37; ++i) pts.push_back({rng.uniform(-1, 2), rng.uniform(-1, 2), rng.uniform(-1, 2)});
    int count = 0;
    for (const auto& p : pts) {
      if (p.x >= 0 && p.x <= 1 && p.y >= 0 && p.y <= 1 && p.z >= 0 && p.z <= 1) ++count;
    }
    const auto cov = patch_box_coverage(pts, box);
    CHECK(cov.fraction == static_cast<double>(count) / 37.0);
    CHECK(cov.eligible == (cov.fraction > 0.5));
  }
}

TEST_CASE("ray_aabb_intersect slab method") {
  const Aabb box{{-1, -1, -1}, {1, 1, 1}};
  auto hit = ray_aabb_intersect({-5, 0, 0}, {1, 0, 0}, box);
  REQUIRE(hit.has_value());
  CHECK(hit->first == doctest::Approx(4.0));
  CHECK(hit->second == doctest::Approx(6.0));

  CHECK_FALSE(ray_aabb_intersect({-5, 3, 0}, {1, 0, 0}, box).has_value());

  // origin inside: negative entry, positive exit
  hit = ray_aabb_intersect({0, 0, 0}, {0, 0, 1}, box);
  REQUIRE(hit.has_value());
  CHECK(hit->first == doctest::Approx(-1.0));
  CHECK(hit->second == doctest::Approx(1.0));
}

TEST_CASE("extrinsics validation") {
  Extrinsics e;
  e.rotation.m = {1, 0, 0, 0, 1, 0, 0, 0, 2};
  CHECK_THROWS_AS(e.validate(), std::invalid_argument);
  Extrinsics ok;
  ok.rotation = axis_rotation(2, 0.7);
  CHECK_NOTHROW(ok.validate());
}
