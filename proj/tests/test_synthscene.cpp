#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "g3dk/rng.hpp"
#include "g3dk/synthscene.hpp"

using namespace g3dk;

namespace {

double overlap_volume(const Aabb& a, const Aabb& b) {
  const double dx = std::min(a.max.x, b.max.x) - std::max(a.min.x, b.min.x);
  const double dy = std::min(a.max.y, b.max.y) - std::max(a.min.y, b.min.y);
  const double dz = std::min(a.max.z, b.max.z) - std::max(a.min.z, b.min.z);
  if (dx <= 0 || dy <= 0 || dz <= 0) return 0.0;
  return dx * dy * dz;
}

// margin-free re-statement of the relation semantics, independent of the
// generator's checker
bool relation_holds(const SceneSpec& scene, const Query& q, const SceneObject& obj) {
  const Vec3 c = obj.box.center();
  switch (q.relation) {
    case Relation::left_of: return c.x < scene.object_by_id(q.anchor_ids[0]).box.center().x;
    case Relation::right_of: return c.x > scene.object_by_id(q.anchor_ids[0]).box.center().x;
    case Relation::in_front_of: return c.y < scene.object_by_id(q.anchor_ids[0]).box.center().y;
    case Relation::behind: return c.y > scene.object_by_id(q.anchor_ids[0]).box.center().y;
    case Relation::nearest_to: {
      const Vec3 a = scene.object_by_id(q.anchor_ids[0]).box.center();
      for (const auto& o : scene.objects) {
        if (o.category == obj.category && o.id != obj.id && (o.box.center() - a).norm() < (c - a).norm()) return false;
      }
      return true;
    }
    case Relation::farthest_from: {
      const Vec3 a = scene.object_by_id(q.anchor_ids[0]).box.center();
      for (const auto& o : scene.objects) {
        if (o.category == obj.category && o.id != obj.id && (o.box.center() - a).norm() > (c - a).norm()) return false;
      }
      return true;
    }
    case Relation::between: {
      const Vec3 a = scene.object_by_id(q.anchor_ids[0]).box.center();
      const Vec3 b = scene.object_by_id(q.anchor_ids[1]).box.center();
      return c.x >= std::min(a.x, b.x) - 0.06 && c.x <= std::max(a.x, b.x) + 0.06 &&
             c.y >= std::min(a.y, b.y) - 0.06 && c.y <= std::max(a.y, b.y) + 0.06;
    }
    case Relation::closest_to_wall: {
      const Aabb rb = scene.room_box();
      auto wd = [&](const Vec3& p) {
        return std::min(std::min(p.x - rb.min.x, rb.max.x - p.x), std::min(p.y - rb.min.y, rb.max.y - p.y));
      };
      for (const auto& o : scene.objects) {
        if (o.category == obj.category && o.id != obj.id && wd(o.box.center()) < wd(c)) return false;
      }
      return true;
    }
  }
  return false;
}

}  // namespace

TEST_CASE("generate_scene determinism and invariants") {
  const SceneSpec a = generate_scene(123, 8, {6, 6, 3});
  const SceneSpec b = generate_scene(123, 8, {6, 6, 3});
  REQUIRE(a.objects.size() == 8);
  REQUIRE(b.objects.size() == 8);
  for (std::size_t i = 0; i < 8; ++i) {
    CHECK(a.objects[i].category == b.objects[i].category);
    CHECK((a.objects[i].box.min - b.objects[i].box.min).norm() == 0.0);
    CHECK((a.objects[i].box.max - b.objects[i].box.max).norm() == 0.0);
  }

  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const SceneSpec s = generate_scene(seed, 8, {6, 6, 3});
    const Aabb rb = s.room_box();
    for (std::size_t i = 0; i < s.objects.size(); ++i) {
      CHECK(rb.contains(s.objects[i].box.min));
      CHECK(rb.contains(s.objects[i].box.max));
      for (std::size_t j = i + 1; j < s.objects.size(); ++j) {
        CHECK(overlap_volume(s.objects[i].box, s.objects[j].box) == 0.0);
      }
    }
  }
}

TEST_CASE("make_query soundness over many seeds") {
  int emitted = 0;
  for (std::uint64_t seed = 0; seed < 300; ++seed) {
    const SceneSpec s = generate_scene(seed, 8, {6, 6, 3});
    const auto q = make_query(s, mix_seed(seed, "q"));
    if (!q) continue;
    ++emitted;
    // exactly one same-category object satisfies the relation
    int holders = 0;
    for (const auto& o : s.objects) {
      if (o.category != s.object_by_id(q->target_id).category) continue;
      if (relation_holds(s, *q, o)) ++holders;
    }
    CHECK(holders == 1);
    // the unique flag matches the category census
    CHECK(q->unique == (s.category_count(s.object_by_id(q->target_id).category) == 1));
    // anchors are uniquely named categories, distinct from the target's
    for (int aid : q->anchor_ids) {
      CHECK(s.category_count(s.object_by_id(aid).category) == 1);
      CHECK(s.object_by_id(aid).category != s.object_by_id(q->target_id).category);
    }
  }
  CHECK(emitted > 250);  // queries should almost always exist
}

TEST_CASE("unique/multiple mix sits near half over 1000 seeds") {
  int unique = 0, multiple = 0;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const SceneSpec s = generate_scene(seed, 8, {6, 6, 3});
    const auto q = make_query(s, mix_seed(seed, "mix"));
    if (!q) continue;
    (q->unique ? unique : multiple) += 1;
  }
  const double frac = static_cast<double>(unique) / (unique + multiple);
  INFO("unique fraction ", frac);
  CHECK(frac > 0.40);
  CHECK(frac < 0.60);
}

TEST_CASE("two-object scene yields the left-of style query by construction") {
  SceneSpec s;
  s.room = {6, 6, 3};
  s.objects.push_back({0, category_id("chair"), {{-2.2, -0.3, 0}, {-1.7, 0.2, 0.9}}, {0.5, 0, 0}});
  s.objects.push_back({1, category_id("table"), {{1.0, -0.4, 0}, {2.2, 0.4, 0.75}}, {0.5, 0.3, 0}});
  const auto q = make_query(s, 5);
  REQUIRE(q.has_value());
  CHECK(q->unique);
  int holders = 0;
  for (const auto& o : s.objects) {
    if (o.category == s.object_by_id(q->target_id).category && relation_holds(s, *q, o)) ++holders;
  }
  CHECK(holders == 1);
  // tokens render from the closed vocabulary with the target category second
  REQUIRE(q->tokens.size() >= 2);
  CHECK(q->tokens[0] == "the");
  CHECK(q->tokens[1] == category_names()[static_cast<std::size_t>(s.object_by_id(q->target_id).category)]);
}

TEST_CASE("ambiguous relations are rejected") {
  // two chairs both left of the table and equidistant from it: no left-of
  // or nearest-to query can name either chair
  SceneSpec s;
  s.room = {6, 6, 3};
  s.objects.push_back({0, category_id("chair"), {{-2.0, 1.0, 0}, {-1.5, 1.5, 0.9}}, {0.5, 0, 0}});
  s.objects.push_back({1, category_id("chair"), {{-2.0, -1.5, 0}, {-1.5, -1.0, 0.9}}, {0.5, 0, 0}});
  s.objects.push_back({2, category_id("table"), {{1.0, -0.25, 0}, {2.0, 0.25, 0.75}}, {0.5, 0.3, 0}});
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto q = make_query(s, seed);
    if (!q) continue;
    if (s.object_by_id(q->target_id).category == category_id("chair")) {
      CHECK(q->relation != Relation::left_of);  // both chairs are left of the table
      int holders = 0;
      for (const auto& o : s.objects) {
        if (o.category == category_id("chair") && relation_holds(s, *q, o)) ++holders;
      }
      CHECK(holders == 1);
    }
  }
}

TEST_CASE("renderer: box filling the view gives constant color and an analytic depth plane") {
  SceneSpec s;
  s.room = {6, 6, 3};
  // a slab spanning the whole room in y and z, face at x = 1
  s.objects.push_back({0, category_id("box"), {{1.0, -2.8, 0.05}, {1.6, 2.8, 2.9}}, {170.0 / 255, 170.0 / 255, 100.0 / 255}});
  s.objects.push_back({1, category_id("lamp"), {{-2.5, -2.5, 0}, {-2.2, -2.2, 1.0}}, {250.0 / 255, 220.0 / 255, 60.0 / 255}});

  Extrinsics cam;
  // camera at the origin-ish looking straight down +x
  cam.rotation = Mat3::from_columns({0, -1, 0}, {0, 0, -1}, {1, 0, 0});
  cam.translation = {-1.0, 0.0, 1.5};
  cam.validate();
  const std::vector<Extrinsics> path = {cam};
  const auto frames = render_views(s, path, 16, 16);
  REQUIRE(frames.size() == 1);
  const CameraFrame& f = frames[0];
  const auto& intr = f.intrinsics;
  for (int v = 0; v < 16; ++v) {
    for (int u = 0; u < 16; ++u) {
      const auto pix = static_cast<std::size_t>(v) * 16 + u;
      CHECK(f.color[pix * 3] == doctest::Approx(170.0 / 255).epsilon(1e-12));
      // the hit plane is x = 1, 2m in front of the camera along +x; the
      // ray parameter equals that distance since dir_cam has unit z
      const double expect_t = (1.0 - cam.translation.x) / 1.0;
      CHECK(f.depth[pix] == doctest::Approx(expect_t).epsilon(1e-12));
      (void)intr;
    }
  }
}

TEST_CASE("renderer vs geometry keystone: backprojected depth equals the analytic hit point") {
  const SceneSpec s = generate_scene(77, 8, {6, 6, 3});
  Rng rng(mix_seed(77, "cams"));
  const auto path = ring_camera_path(s, 2, rng);
  const auto frames = render_views(s, path, 32, 32);
  Rng pick(99);
  double worst = 0.0;
  for (int trial = 0; trial < 2000; ++trial) {
    const int vi = static_cast<int>(pick.uniform_int(0, 1));
    const int u = static_cast<int>(pick.uniform_int(0, 31));
    const int v = static_cast<int>(pick.uniform_int(0, 31));
    const CameraFrame& f = frames[static_cast<std::size_t>(vi)];
    const RayHit hit = trace_pixel(s, f.intrinsics, f.extrinsics, u, v);
    const auto p = backproject_pixel(f, u, v);
    REQUIRE(p.has_value());
    worst = std::max(worst, (*p - hit.point).norm());
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("empty room: wall depths match the hand-computed slab exit") {
  SceneSpec s;
  s.room = {6, 6, 3};
  Extrinsics cam;
  cam.rotation = Mat3::from_columns({0, -1, 0}, {0, 0, -1}, {1, 0, 0});  // +x forward
  cam.translation = {0.0, 0.0, 1.5};
  const auto frames = render_views(s, std::vector<Extrinsics>{cam}, 8, 8);
  const CameraFrame& f = frames[0];
  for (int v = 0; v < 8; ++v) {
    for (int u = 0; u < 8; ++u) {
      // independent exit computation: smallest positive boundary crossing
      const Vec3 dir_cam{(u - f.intrinsics.cx) / f.intrinsics.fx, (v - f.intrinsics.cy) / f.intrinsics.fy, 1.0};
      const Vec3 d = cam.rotation * dir_cam;
      const Vec3 o = cam.translation;
      double t_exit = 1e300;
      const double lo[3] = {-3, -3, 0}, hi[3] = {3, 3, 3};
      const double dv[3] = {d.x, d.y, d.z}, ov[3] = {o.x, o.y, o.z};
      for (int axis = 0; axis < 3; ++axis) {
        if (dv[axis] > 0) t_exit = std::min(t_exit, (hi[axis] - ov[axis]) / dv[axis]);
        if (dv[axis] < 0) t_exit = std::min(t_exit, (lo[axis] - ov[axis]) / dv[axis]);
      }
      CHECK(f.depth[static_cast<std::size_t>(v) * 8 + u] == doctest::Approx(t_exit).epsilon(1e-12));
    }
  }
}

TEST_CASE("jitter_proposals") {
  const SceneSpec s = generate_scene(5, 8, {6, 6, 3});
  std::vector<ObjectProposal> props;
  for (const auto& o : s.objects) props.push_back({o.id, o.box, o.category});

  SUBCASE("zero sigmas are the identity") {
    const auto out = jitter_proposals(props, 9, 0.0, 0.0, s.room_box());
    for (std::size_t i = 0; i < props.size(); ++i) {
      CHECK((out[i].box.min - props[i].box.min).norm() == 0.0);
      CHECK((out[i].box.max - props[i].box.max).norm() == 0.0);
    }
  }

  SUBCASE("same seed gives identical jitter; different seeds differ") {
    const auto a = jitter_proposals(props, 9, 0.1, 0.05, s.room_box());
    const auto b = jitter_proposals(props, 9, 0.1, 0.05, s.room_box());
    const auto c = jitter_proposals(props, 10, 0.1, 0.05, s.room_box());
    double same = 0, diff = 0;
    for (std::size_t i = 0; i < props.size(); ++i) {
      same += (a[i].box.min - b[i].box.min).norm();
      diff += (a[i].box.min - c[i].box.min).norm();
    }
    CHECK(same == 0.0);
    CHECK(diff > 0.0);
  }

  SUBCASE("mean IoU with the defaults lands in the documented band") {
    double acc = 0;
    int count = 0;
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
      const SceneSpec sc = generate_scene(seed, 8, {6, 6, 3});
      std::vector<ObjectProposal> ps;
      for (const auto& o : sc.objects) ps.push_back({o.id, o.box, o.category});
      const auto js = jitter_proposals(ps, seed, 0.10, 0.05, sc.room_box());
      for (std::size_t i = 0; i < ps.size(); ++i) {
        acc += aabb_iou(ps[i].box, js[i].box);
        ++count;
      }
    }
    const double mean_iou = acc / count;
    INFO("mean IoU ", mean_iou);
    CHECK(mean_iou > 0.6);
    CHECK(mean_iou < 0.95);
  }

  SUBCASE("boxes stay inside the room") {
    const auto out = jitter_proposals(props, 3, 0.5, 0.5, s.room_box());
    const Aabb rb = s.room_box();
    for (const auto& p : out) {
      CHECK(rb.contains(p.box.min));
      CHECK(rb.contains(p.box.max));
      CHECK(p.box.valid());
    }
  }
}

TEST_CASE("dataset write/read round trip") {
  namespace fs = std::filesystem;
  DatasetGenParams params;
  params.views = 2;
  params.image_size = 16;
  params.num_objects = 4;
  DatasetSummary summary;
  const auto episodes = generate_dataset(21, 3, params, "unit", &summary);
  CHECK(summary.episodes == 3);
  CHECK(summary.unique_count + summary.multiple_count == 3);

  const std::string path = "/tmp/g3dk_test_ds/episodes.jsonl";
  fs::create_directories("/tmp/g3dk_test_ds");
  write_dataset(path, episodes);
  const auto loaded = read_dataset(path);
  REQUIRE(loaded.size() == episodes.size());
  for (std::size_t i = 0; i < episodes.size(); ++i) {
    const auto& a = episodes[i];
    const auto& b = loaded[i];
    CHECK(a.scene.id == b.scene.id);
    CHECK(a.scene.objects.size() == b.scene.objects.size());
    for (std::size_t j = 0; j < a.scene.objects.size(); ++j) {
      CHECK(a.scene.objects[j].category == b.scene.objects[j].category);
      CHECK((a.scene.objects[j].box.min - b.scene.objects[j].box.min).norm() == 0.0);
      CHECK(a.scene.objects[j].albedo == b.scene.objects[j].albedo);
    }
    CHECK(a.query.tokens == b.query.tokens);
    CHECK(a.query.relation == b.query.relation);
    CHECK(a.query.unique == b.query.unique);
    CHECK(a.target_id == b.target_id);
    REQUIRE(a.frames.size() == b.frames.size());
    for (std::size_t v = 0; v < a.frames.size(); ++v) {
      CHECK(a.frames[v].color == b.frames[v].color);  // bit-exact round trip
      CHECK(a.frames[v].depth == b.frames[v].depth);
      CHECK(a.frames[v].intrinsics.fx == b.frames[v].intrinsics.fx);
      CHECK((a.frames[v].extrinsics.translation - b.frames[v].extrinsics.translation).norm() == 0.0);
    }
  }
}

TEST_CASE("malformed dataset lines report the line number") {
  namespace fs = std::filesystem;
  fs::create_directories("/tmp/g3dk_test_ds");
  const std::string path = "/tmp/g3dk_test_ds/bad.jsonl";
  {
    DatasetGenParams params;
    params.views = 1;
    params.image_size = 16;
    params.num_objects = 3;
    const auto episodes = generate_dataset(4, 1, params, "bad");
    write_dataset(path, episodes);
    std::ofstream os(path, std::ios::app);
    os << "{\"scene\": 42}\n";
  }
  CHECK_THROWS_WITH_AS(read_dataset(path), doctest::Contains("line 2"), std::runtime_error);
}

TEST_CASE("dataset generation is a pure function of the seed") {
  DatasetGenParams params;
  params.views = 1;
  params.image_size = 16;
  params.num_objects = 4;
  const auto a = generate_dataset(99, 2, params, "pure");
  const auto b = generate_dataset(99, 2, params, "pure");
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].frames[0].depth == b[i].frames[0].depth);
    CHECK(a[i].query.tokens == b[i].query.tokens);
  }
  const auto c = generate_dataset(99, 2, params, "other-salt");
  CHECK(a[0].frames[0].depth != c[0].frames[0].depth);
}
