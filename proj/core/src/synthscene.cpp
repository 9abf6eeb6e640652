#include "g3dk/synthscene.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "g3dk/rng.hpp"

#include <json.hpp>

namespace g3dk {

namespace {

using nlohmann::json;

constexpr const char* kCategoryNames[kNumCategories] = {
    "chair", "table", "sofa", "bed", "cabinet", "lamp", "desk", "shelf", "stool", "plant", "monitor", "box",
};

// one base extent (x,y,z) per category, meters
constexpr double kBaseSize[kNumCategories][3] = {
    {0.65, 0.65, 1.05},  // chair
    {1.45, 1.00, 0.80},  // table
    {2.00, 0.95, 0.90},  // sofa
    {1.70, 2.10, 0.65},  // bed
    {1.05, 0.55, 1.30},  // cabinet
    {0.45, 0.45, 1.45},  // lamp
    {1.50, 0.75, 0.80},  // desk
    {1.05, 0.40, 1.35},  // shelf
    {0.50, 0.50, 0.55},  // stool
    {0.60, 0.60, 1.15},  // plant
    {0.75, 0.25, 0.55},  // monitor
    {0.65, 0.65, 0.65},  // box
};

// byte-exact albedos so blob color bytes round-trip losslessly
constexpr int kAlbedo255[kNumCategories][3] = {
    {200, 40, 40}, {140, 90, 40}, {40, 90, 200},  {240, 200, 220}, {90, 60, 20},  {250, 220, 60},
    {160, 120, 200}, {60, 160, 60}, {220, 120, 40}, {30, 120, 50},   {30, 30, 40},  {170, 170, 100},
};

constexpr double kWallMargin = 0.2;
constexpr double kObjectGap = 0.05;
constexpr double kRelationMargin = 0.05;
constexpr double kHFovDeg = 70.0;

double wall_gray(int face) {
  static constexpr int kGray[6] = {110, 120, 130, 140, 100, 150};  // x-,x+,y-,y+,floor,ceiling
  return kGray[face] / 255.0;
}

template <typename T>
void shuffle_vec(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
    std::swap(v[i - 1], v[j]);
  }
}

Intrinsics make_intrinsics(int width, int height) {
  Intrinsics intr;
  intr.width = width;
  intr.height = height;
  const double half_fov = kHFovDeg * 0.5 * 3.14159265358979323846 / 180.0;
  intr.fx = intr.fy = 0.5 * width / std::tan(half_fov);
  intr.cx = (width - 1) / 2.0;
  intr.cy = (height - 1) / 2.0;
  return intr;
}

Extrinsics look_at(const Vec3& position, const Vec3& target) {
  const Vec3 forward = (target - position).normalized();
  const Vec3 up{0.0, 0.0, 1.0};
  const Vec3 right = forward.cross(up).normalized();
  const Vec3 down = forward.cross(right);
  Extrinsics extr;
  extr.rotation = Mat3::from_columns(right, down, forward);
  extr.translation = position;
  extr.validate();
  return extr;
}

bool boxes_separated(const Aabb& a, const Aabb& b, double gap) {
  return a.max.x + gap <= b.min.x || b.max.x + gap <= a.min.x || a.max.y + gap <= b.min.y ||
         b.max.y + gap <= a.min.y || a.max.z + gap <= b.min.z || b.max.z + gap <= a.min.z;
}

}  // namespace

std::span<const char* const> category_names() { return {kCategoryNames, kNumCategories}; }

int category_id(std::string_view name) {
  for (int i = 0; i < kNumCategories; ++i) {
    if (name == kCategoryNames[i]) return i;
  }
  throw std::invalid_argument("unknown category '" + std::string(name) + "'");
}

const SceneObject& SceneSpec::object_by_id(int id) const {
  for (const auto& o : objects) {
    if (o.id == id) return o;
  }
  throw std::out_of_range("no object with id " + std::to_string(id));
}

int SceneSpec::category_count(int category) const {
  int n = 0;
  for (const auto& o : objects) {
    if (o.category == category) ++n;
  }
  return n;
}

std::string_view relation_name(Relation r) {
  switch (r) {
    case Relation::left_of: return "left-of";
    case Relation::right_of: return "right-of";
    case Relation::in_front_of: return "in-front-of";
    case Relation::behind: return "behind";
    case Relation::nearest_to: return "nearest-to";
    case Relation::farthest_from: return "farthest-from";
    case Relation::between: return "between";
    case Relation::closest_to_wall: return "closest-to-wall";
  }
  throw std::logic_error("bad relation");
}

Relation relation_from_name(std::string_view name) {
  for (const Relation r : {Relation::left_of, Relation::right_of, Relation::in_front_of, Relation::behind,
                           Relation::nearest_to, Relation::farthest_from, Relation::between,
                           Relation::closest_to_wall}) {
    if (relation_name(r) == name) return r;
  }
  throw std::invalid_argument("unknown relation '" + std::string(name) + "'");
}

SceneSpec generate_scene(std::uint64_t seed, int num_objects, const Vec3& room_extents) {
  if (num_objects < 2) throw std::invalid_argument("a scene needs at least 2 objects");
  if (num_objects > kNumCategories) {
    throw std::invalid_argument("num_objects must not exceed the category vocabulary size");
  }
  SceneSpec scene;
  scene.seed = seed;
  scene.room = room_extents;
  Rng rng(mix_seed(seed, "scene"));

  std::vector<int> all_cats(kNumCategories);
  for (int i = 0; i < kNumCategories; ++i) all_cats[static_cast<std::size_t>(i)] = i;

  std::vector<int> cats;
  const bool with_distractors = rng.uniform() < 0.55;
  if (with_distractors) {
    const int dup = static_cast<int>(rng.uniform_int(0, kNumCategories - 1));
    cats.push_back(dup);
    cats.push_back(dup);
    std::vector<int> rest;
    for (int c : all_cats) {
      if (c != dup) rest.push_back(c);
    }
    shuffle_vec(rest, rng);
    for (int i = 0; i < num_objects - 2; ++i) cats.push_back(rest[static_cast<std::size_t>(i)]);
  } else {
    shuffle_vec(all_cats, rng);
    cats.assign(all_cats.begin(), all_cats.begin() + num_objects);
  }
  shuffle_vec(cats, rng);
  // place the big footprints first; packing almost never backs itself
  // into a corner that way
  std::stable_sort(cats.begin(), cats.end(), [](int a, int b) {
    return kBaseSize[a][0] * kBaseSize[a][1] > kBaseSize[b][0] * kBaseSize[b][1];
  });

  int attempts = 0;
  for (int i = 0; i < num_objects; ++i) {
    const int cat = cats[static_cast<std::size_t>(i)];
    while (true) {
      if (++attempts > 10000) {
        throw std::runtime_error("scene generation failed: placement rejected 10k times (room too small?)");
      }
      const double sx = kBaseSize[cat][0] * rng.uniform(0.85, 1.15);
      const double sy = kBaseSize[cat][1] * rng.uniform(0.85, 1.15);
      const double sz = kBaseSize[cat][2] * rng.uniform(0.85, 1.15);
      const double lo_x = -room_extents.x / 2 + kWallMargin + sx / 2;
      const double hi_x = room_extents.x / 2 - kWallMargin - sx / 2;
      const double lo_y = -room_extents.y / 2 + kWallMargin + sy / 2;
      const double hi_y = room_extents.y / 2 - kWallMargin - sy / 2;
      if (lo_x >= hi_x || lo_y >= hi_y) {
        throw std::runtime_error("scene generation failed: room too small for category " +
                                 std::string(kCategoryNames[cat]));
      }
      const double cx = rng.uniform(lo_x, hi_x);
      const double cy = rng.uniform(lo_y, hi_y);
      const Aabb box{{cx - sx / 2, cy - sy / 2, 0.0}, {cx + sx / 2, cy + sy / 2, sz}};
      bool ok = true;
      for (const auto& other : scene.objects) {
        if (!boxes_separated(box, other.box, kObjectGap)) {
          ok = false;
          break;
        }
      }
      if (!ok) continue;
      SceneObject obj;
      obj.id = i;
      obj.category = cat;
      obj.box = box;
      obj.albedo = {kAlbedo255[cat][0] / 255.0, kAlbedo255[cat][1] / 255.0, kAlbedo255[cat][2] / 255.0};
      scene.objects.push_back(obj);
      break;
    }
  }
  return scene;
}

std::vector<Extrinsics> ring_camera_path(const SceneSpec& scene, int num_views, Rng& rng) {
  if (num_views < 1) throw std::invalid_argument("need at least one view");
  const double radius = 0.34 * std::min(scene.room.x, scene.room.y);
  const double height = 0.8 * scene.room.z;
  const double phase = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
  std::vector<Extrinsics> path;
  for (int i = 0; i < num_views; ++i) {
    const double angle = phase + 2.0 * 3.14159265358979323846 * i / num_views + 0.03 * rng.normal();
    const Vec3 pos{radius * std::cos(angle) + 0.04 * rng.normal(), radius * std::sin(angle) + 0.04 * rng.normal(),
                   height + 0.04 * rng.normal()};
    const Vec3 target{0.05 * rng.normal(), 0.05 * rng.normal(), 0.8 + 0.05 * rng.normal()};
    path.push_back(look_at(pos, target));
  }
  return path;
}

RayHit trace_pixel(const SceneSpec& scene, const Intrinsics& intr, const Extrinsics& extr, int u, int v) {
  const Vec3 dir_cam{(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0};
  const Vec3 dir = extr.rotation * dir_cam;
  const Vec3 origin = extr.translation;

  const auto room_hit = ray_aabb_intersect(origin, dir, scene.room_box());
  if (!room_hit || room_hit->second <= 0.0) {
    throw std::runtime_error("render ray does not exit the room; is the camera inside?");
  }
  double best_t = room_hit->second;  // wall hit
  int best_id = -1;
  for (const auto& obj : scene.objects) {
    const auto hit = ray_aabb_intersect(origin, dir, obj.box);
    if (!hit) continue;
    const double t = hit->first;
    if (t > 1e-9 && t < best_t) {
      best_t = t;
      best_id = obj.id;
    }
  }
  RayHit out;
  out.t = best_t;
  out.point = origin + dir * best_t;
  out.object_id = best_id;
  return out;
}

namespace {

int room_face(const SceneSpec& scene, const Vec3& p) {
  const Aabb rb = scene.room_box();
  const double d[6] = {std::fabs(p.x - rb.min.x), std::fabs(p.x - rb.max.x), std::fabs(p.y - rb.min.y),
                       std::fabs(p.y - rb.max.y), std::fabs(p.z - rb.min.z), std::fabs(p.z - rb.max.z)};
  int face = 0;
  for (int i = 1; i < 6; ++i) {
    if (d[i] < d[face]) face = i;
  }
  return face;
}

}  // namespace

std::vector<CameraFrame> render_views(const SceneSpec& scene, std::span<const Extrinsics> path, int width,
                                      int height) {
  const Intrinsics intr = make_intrinsics(width, height);
  const Aabb rb = scene.room_box();
  std::vector<CameraFrame> frames;
  for (const Extrinsics& extr : path) {
    if (!rb.contains(extr.translation)) throw std::invalid_argument("camera outside the room");
    for (const auto& obj : scene.objects) {
      if (obj.box.contains(extr.translation)) throw std::invalid_argument("camera inside an object");
    }
    CameraFrame frame;
    frame.intrinsics = intr;
    frame.extrinsics = extr;
    frame.color.assign(static_cast<std::size_t>(width) * height * 3, 0.0);
    frame.depth.assign(static_cast<std::size_t>(width) * height, 0.0);
    for (int v = 0; v < height; ++v) {
      for (int u = 0; u < width; ++u) {
        const RayHit hit = trace_pixel(scene, intr, extr, u, v);
        const auto pix = static_cast<std::size_t>(v) * width + u;
        frame.depth[pix] = hit.t;
        double r, g, b;
        if (hit.object_id >= 0) {
          const auto& alb = scene.object_by_id(hit.object_id).albedo;
          r = alb[0];
          g = alb[1];
          b = alb[2];
        } else {
          r = g = b = wall_gray(room_face(scene, hit.point));
        }
        frame.color[pix * 3] = r;
        frame.color[pix * 3 + 1] = g;
        frame.color[pix * 3 + 2] = b;
      }
    }
    frames.push_back(std::move(frame));
  }
  return frames;
}

namespace {

struct Candidate {
  Relation rel;
  int target;
  std::vector<int> anchors;
};

double center_dist(const SceneObject& a, const SceneObject& b) { return (a.box.center() - b.box.center()).norm(); }

double wall_distance(const SceneSpec& scene, const SceneObject& o) {
  const Aabb rb = scene.room_box();
  const Vec3 c = o.box.center();
  return std::min(std::min(c.x - rb.min.x, rb.max.x - c.x), std::min(c.y - rb.min.y, rb.max.y - c.y));
}

// Does `rel` pick out exactly `target` among the same-category objects?
// Both sides of the test carry a margin so near-ties are rejected as
// ambiguous rather than decided by floating-point luck.
bool relation_selects(const SceneSpec& scene, Relation rel, const SceneObject& target,
                      std::span<const SceneObject* const> rivals, std::span<const int> anchors) {
  auto axis_test = [&](int axis, double sign) {
    const auto& a = scene.object_by_id(anchors[0]);
    const double av = a.box.center()[axis];
    const double tv = target.box.center()[axis];
    if (!(sign * (av - tv) > kRelationMargin)) return false;
    for (const SceneObject* o : rivals) {
      if (!(sign * (av - o->box.center()[axis]) < -kRelationMargin)) return false;
    }
    return true;
  };
  switch (rel) {
    case Relation::left_of: return axis_test(0, 1.0);    // target.x < anchor.x
    case Relation::right_of: return axis_test(0, -1.0);
    case Relation::in_front_of: return axis_test(1, 1.0);  // target.y < anchor.y
    case Relation::behind: return axis_test(1, -1.0);
    case Relation::nearest_to: {
      const auto& a = scene.object_by_id(anchors[0]);
      const double dt = center_dist(target, a);
      for (const SceneObject* o : rivals) {
        if (!(center_dist(*o, a) > dt + kRelationMargin)) return false;
      }
      return true;
    }
    case Relation::farthest_from: {
      const auto& a = scene.object_by_id(anchors[0]);
      const double dt = center_dist(target, a);
      for (const SceneObject* o : rivals) {
        if (!(center_dist(*o, a) < dt - kRelationMargin)) return false;
      }
      return true;
    }
    case Relation::between: {
      const Vec3 c1 = scene.object_by_id(anchors[0]).box.center();
      const Vec3 c2 = scene.object_by_id(anchors[1]).box.center();
      const Aabb hull{{std::min(c1.x, c2.x), std::min(c1.y, c2.y), 0.0},
                      {std::max(c1.x, c2.x), std::max(c1.y, c2.y), scene.room.z}};
      const Aabb inner{{hull.min.x - kRelationMargin, hull.min.y - kRelationMargin, hull.min.z},
                       {hull.max.x + kRelationMargin, hull.max.y + kRelationMargin, hull.max.z}};
      const Aabb outer{{hull.min.x - 0.30, hull.min.y - 0.30, hull.min.z},
                       {hull.max.x + 0.30, hull.max.y + 0.30, hull.max.z}};
      if (!inner.contains(target.box.center())) return false;
      for (const SceneObject* o : rivals) {
        if (outer.contains(o->box.center())) return false;
      }
      return true;
    }
    case Relation::closest_to_wall: {
      const double wt = wall_distance(scene, target);
      for (const SceneObject* o : rivals) {
        if (!(wall_distance(scene, *o) > wt + kRelationMargin)) return false;
      }
      return true;
    }
  }
  return false;
}

std::vector<std::string> query_tokens(const SceneSpec& scene, const Candidate& c) {
  const auto cat = [&](int id) { return std::string(kCategoryNames[scene.object_by_id(id).category]); };
  const std::string tcat = std::string(kCategoryNames[scene.object_by_id(c.target).category]);
  switch (c.rel) {
    case Relation::left_of: return {"the", tcat, "left", "of", "the", cat(c.anchors[0])};
    case Relation::right_of: return {"the", tcat, "right", "of", "the", cat(c.anchors[0])};
    case Relation::in_front_of: return {"the", tcat, "in", "front", "of", "the", cat(c.anchors[0])};
    case Relation::behind: return {"the", tcat, "behind", "the", cat(c.anchors[0])};
    case Relation::nearest_to: return {"the", tcat, "nearest", "to", "the", cat(c.anchors[0])};
    case Relation::farthest_from: return {"the", tcat, "farthest", "from", "the", cat(c.anchors[0])};
    case Relation::between:
      return {"the", tcat, "between", "the", cat(c.anchors[0]), "and", "the", cat(c.anchors[1])};
    case Relation::closest_to_wall: return {"the", tcat, "closest", "to", "the", "wall"};
  }
  throw std::logic_error("bad relation");
}

}  // namespace

std::vector<Query> make_queries(const SceneSpec& scene, std::uint64_t seed, int max_queries) {
  Rng rng(mix_seed(seed, "query"));

  std::vector<int> unique_cat_ids;  // usable anchors: category appears once
  for (const auto& o : scene.objects) {
    if (scene.category_count(o.category) == 1) unique_cat_ids.push_back(o.id);
  }

  std::vector<Candidate> cands;
  for (const auto& target : scene.objects) {
    for (const Relation rel : {Relation::left_of, Relation::right_of, Relation::in_front_of, Relation::behind,
                               Relation::nearest_to, Relation::farthest_from}) {
      for (int anchor : unique_cat_ids) {
        const auto& a = scene.object_by_id(anchor);
        if (anchor == target.id || a.category == target.category) continue;
        cands.push_back({rel, target.id, {anchor}});
      }
    }
    for (std::size_t i = 0; i < unique_cat_ids.size(); ++i) {
      for (std::size_t j = i + 1; j < unique_cat_ids.size(); ++j) {
        const auto& a1 = scene.object_by_id(unique_cat_ids[i]);
        const auto& a2 = scene.object_by_id(unique_cat_ids[j]);
        if (a1.id == target.id || a2.id == target.id) continue;
        if (a1.category == target.category || a2.category == target.category) continue;
        cands.push_back({Relation::between, target.id, {a1.id, a2.id}});
      }
    }
    cands.push_back({Relation::closest_to_wall, target.id, {}});
  }
  shuffle_vec(cands, rng);

  // prefer distractor-category targets so roughly half the emitted
  // episodes land in the Multiple stratum
  std::stable_partition(cands.begin(), cands.end(), [&](const Candidate& c) {
    return scene.category_count(scene.object_by_id(c.target).category) >= 2;
  });

  std::vector<Query> out;
  std::vector<int> taken_targets;
  for (const Candidate& c : cands) {
    if (static_cast<int>(out.size()) >= max_queries) break;
    bool seen = false;
    for (int t : taken_targets) seen = seen || t == c.target;
    if (seen) continue;  // distinct targets across a scene's queries
    const auto& target = scene.object_by_id(c.target);
    std::vector<const SceneObject*> rivals;
    for (const auto& o : scene.objects) {
      if (o.id != target.id && o.category == target.category) rivals.push_back(&o);
    }
    if (!relation_selects(scene, c.rel, target, rivals, c.anchors)) continue;
    Query q;
    q.relation = c.rel;
    q.target_id = c.target;
    q.anchor_ids = c.anchors;
    q.unique = rivals.empty();
    q.tokens = query_tokens(scene, c);
    out.push_back(std::move(q));
    taken_targets.push_back(c.target);
  }
  return out;
}

std::optional<Query> make_query(const SceneSpec& scene, std::uint64_t seed) {
  auto qs = make_queries(scene, seed, 1);
  if (qs.empty()) return std::nullopt;
  return qs.front();
}

std::vector<ObjectProposal> jitter_proposals(std::span<const ObjectProposal> proposals, std::uint64_t seed,
                                             double sigma_scale, double sigma_center, const Aabb& room) {
  if (sigma_scale < 0.0 || sigma_center < 0.0) throw std::invalid_argument("jitter sigmas must be >= 0");
  std::vector<ObjectProposal> out;
  out.reserve(proposals.size());
  if (sigma_scale == 0.0 && sigma_center == 0.0) {  // exact identity
    return {proposals.begin(), proposals.end()};
  }
  for (std::size_t i = 0; i < proposals.size(); ++i) {
    Rng rng(mix_seed(seed, "jitter", i));
    ObjectProposal p = proposals[i];
    const Vec3 c = p.box.center();
    const Vec3 half = p.box.extent() * 0.5;
    const Vec3 nc{c.x + sigma_center * rng.normal(), c.y + sigma_center * rng.normal(),
                  c.z + sigma_center * rng.normal()};
    const Vec3 nh{half.x * std::exp(sigma_scale * rng.normal()), half.y * std::exp(sigma_scale * rng.normal()),
                  half.z * std::exp(sigma_scale * rng.normal())};
    Aabb box{nc - nh, nc + nh};
    // clip to the room, keeping at least a centimeter of box
    box.min.x = std::clamp(box.min.x, room.min.x, room.max.x - 0.01);
    box.min.y = std::clamp(box.min.y, room.min.y, room.max.y - 0.01);
    box.min.z = std::clamp(box.min.z, room.min.z, room.max.z - 0.01);
    box.max.x = std::clamp(box.max.x, box.min.x + 0.01, room.max.x);
    box.max.y = std::clamp(box.max.y, box.min.y + 0.01, room.max.y);
    box.max.z = std::clamp(box.max.z, box.min.z + 0.01, room.max.z);
    p.box = box;
    out.push_back(p);
  }
  return out;
}

std::vector<GroundingEpisode> generate_dataset(std::uint64_t seed, int count, const DatasetGenParams& params,
                                               std::string_view salt, DatasetSummary* summary) {
  if (count < 0) throw std::invalid_argument("episode count must be >= 0");
  const std::string tag(salt);
  std::vector<GroundingEpisode> episodes;
  DatasetSummary local;
  std::uint64_t attempt = 0;
  while (static_cast<int>(episodes.size()) < count) {
    const std::uint64_t ep_seed = mix_seed(seed, tag + "#episode", attempt);
    ++attempt;
    SceneSpec scene;
    try {
      scene = generate_scene(ep_seed, params.num_objects, {params.room_extent, params.room_extent, 3.0});
    } catch (const std::runtime_error&) {  // crowded layout ran out of placement attempts
      ++local.skipped;
      continue;
    }
    scene.id = attempt - 1;
    const auto queries = make_queries(scene, mix_seed(ep_seed, "query"), params.queries_per_scene);
    if (queries.empty()) {
      ++local.skipped;
      continue;
    }
    Rng cam_rng(mix_seed(ep_seed, "cameras"));
    const auto path = ring_camera_path(scene, params.views, cam_rng);
    const auto frames = render_views(scene, path, params.image_size, params.image_size);
    for (const Query& query : queries) {
      if (static_cast<int>(episodes.size()) >= count) break;
      GroundingEpisode ep;
      ep.frames = frames;
      ep.query = query;
      ep.target_id = query.target_id;
      for (const auto& o : scene.objects) ep.proposals.push_back({o.id, o.box, o.category});
      ep.scene = scene;
      if (ep.query.unique) {
        ++local.unique_count;
      } else {
        ++local.multiple_count;
      }
      episodes.push_back(std::move(ep));
    }
  }
  local.episodes = static_cast<int>(episodes.size());
  if (summary) *summary = local;
  return episodes;
}

namespace {

json box_to_json(const Aabb& b) {
  return json::array({b.min.x, b.min.y, b.min.z, b.max.x, b.max.y, b.max.z});
}

Aabb box_from_json(const json& j) {
  if (!j.is_array() || j.size() != 6) throw std::runtime_error("box must be an array of 6 numbers");
  return Aabb{{j[0].get<double>(), j[1].get<double>(), j[2].get<double>()},
              {j[3].get<double>(), j[4].get<double>(), j[5].get<double>()}};
}

void write_frame_blob(const std::string& path, const CameraFrame& f) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write frame blob: " + path);
  auto put_u32 = [&](std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); };
  auto put_f64 = [&](double v) { os.write(reinterpret_cast<const char*>(&v), 8); };
  put_u32(static_cast<std::uint32_t>(f.width()));
  put_u32(static_cast<std::uint32_t>(f.height()));
  put_f64(f.intrinsics.fx);
  put_f64(f.intrinsics.fy);
  put_f64(f.intrinsics.cx);
  put_f64(f.intrinsics.cy);
  for (double v : f.extrinsics.rotation.m) put_f64(v);
  put_f64(f.extrinsics.translation.x);
  put_f64(f.extrinsics.translation.y);
  put_f64(f.extrinsics.translation.z);
  std::vector<std::uint8_t> bytes(f.color.size());
  for (std::size_t i = 0; i < f.color.size(); ++i) {
    bytes[i] = static_cast<std::uint8_t>(std::lround(f.color[i] * 255.0));
  }
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  os.write(reinterpret_cast<const char*>(f.depth.data()), static_cast<std::streamsize>(f.depth.size() * 8));
  if (!os) throw std::runtime_error("write failed for frame blob: " + path);
}

CameraFrame read_frame_blob(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open frame blob: " + path);
  auto get_u32 = [&]() {
    std::uint32_t v;
    if (!is.read(reinterpret_cast<char*>(&v), 4)) throw std::runtime_error("truncated frame blob: " + path);
    return v;
  };
  auto get_f64 = [&]() {
    double v;
    if (!is.read(reinterpret_cast<char*>(&v), 8)) throw std::runtime_error("truncated frame blob: " + path);
    return v;
  };
  CameraFrame f;
  const int w = static_cast<int>(get_u32());
  const int h = static_cast<int>(get_u32());
  f.intrinsics.width = w;
  f.intrinsics.height = h;
  f.intrinsics.fx = get_f64();
  f.intrinsics.fy = get_f64();
  f.intrinsics.cx = get_f64();
  f.intrinsics.cy = get_f64();
  for (double& v : f.extrinsics.rotation.m) v = get_f64();
  f.extrinsics.translation.x = get_f64();
  f.extrinsics.translation.y = get_f64();
  f.extrinsics.translation.z = get_f64();
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(w) * h * 3);
  if (!is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()))) {
    throw std::runtime_error("truncated frame blob: " + path);
  }
  f.color.resize(bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) f.color[i] = bytes[i] / 255.0;
  f.depth.resize(static_cast<std::size_t>(w) * h);
  if (!is.read(reinterpret_cast<char*>(f.depth.data()), static_cast<std::streamsize>(f.depth.size() * 8))) {
    throw std::runtime_error("truncated frame blob: " + path);
  }
  return f;
}

}  // namespace

void write_dataset(const std::string& path, std::span<const GroundingEpisode> episodes) {
  namespace fs = std::filesystem;
  const fs::path blob_dir = fs::path(path).concat(".blobs");
  fs::create_directories(blob_dir);
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open dataset for writing: " + path);
  char name[64];
  for (std::size_t i = 0; i < episodes.size(); ++i) {
    const auto& ep = episodes[i];
    json j;
    json scene;
    scene["id"] = ep.scene.id;
    scene["seed"] = ep.scene.seed;
    scene["room"] = json::array({ep.scene.room.x, ep.scene.room.y, ep.scene.room.z});
    json objs = json::array();
    for (const auto& o : ep.scene.objects) {
      json jo;
      jo["id"] = o.id;
      jo["category"] = kCategoryNames[o.category];
      jo["box"] = box_to_json(o.box);
      jo["albedo"] = json::array({o.albedo[0], o.albedo[1], o.albedo[2]});
      objs.push_back(jo);
    }
    scene["objects"] = objs;
    j["scene"] = scene;

    json frames = json::array();
    for (std::size_t vi = 0; vi < ep.frames.size(); ++vi) {
      std::snprintf(name, sizeof(name), "ep%06zu_v%02zu.bin", i, vi);
      const fs::path rel = fs::path(path).filename().concat(".blobs") / name;
      write_frame_blob((blob_dir / name).string(), ep.frames[vi]);
      frames.push_back({{"path", rel.generic_string()}});
    }
    j["frames"] = frames;

    json q;
    q["tokens"] = ep.query.tokens;
    q["relation"] = std::string(relation_name(ep.query.relation));
    q["anchor_ids"] = ep.query.anchor_ids;
    q["target_id"] = ep.query.target_id;
    q["uniqueness"] = ep.query.unique ? "unique" : "multiple";
    j["query"] = q;

    json props = json::array();
    for (const auto& p : ep.proposals) {
      props.push_back({{"id", p.id}, {"category", kCategoryNames[p.gt_category]}, {"box", box_to_json(p.box)}});
    }
    j["proposals"] = props;
    j["target_id"] = ep.target_id;
    os << j.dump() << "\n";
  }
  if (!os) throw std::runtime_error("write failed for dataset: " + path);
}

std::vector<GroundingEpisode> read_dataset(const std::string& path) {
  namespace fs = std::filesystem;
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open dataset: " + path);
  const fs::path base = fs::path(path).parent_path();
  std::vector<GroundingEpisode> episodes;
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      GroundingEpisode ep;
      const json& scene = j.at("scene");
      ep.scene.id = scene.at("id").get<std::uint64_t>();
      ep.scene.seed = scene.at("seed").get<std::uint64_t>();
      const json& room = scene.at("room");
      ep.scene.room = {room.at(0).get<double>(), room.at(1).get<double>(), room.at(2).get<double>()};
      for (const json& jo : scene.at("objects")) {
        SceneObject o;
        o.id = jo.at("id").get<int>();
        o.category = category_id(jo.at("category").get<std::string>());
        o.box = box_from_json(jo.at("box"));
        const json& alb = jo.at("albedo");
        o.albedo = {alb.at(0).get<double>(), alb.at(1).get<double>(), alb.at(2).get<double>()};
        ep.scene.objects.push_back(o);
      }
      for (const json& jf : j.at("frames")) {
        const std::string rel = jf.at("path").get<std::string>();
        ep.frames.push_back(read_frame_blob((base / rel).string()));
      }
      const json& q = j.at("query");
      ep.query.tokens = q.at("tokens").get<std::vector<std::string>>();
      ep.query.relation = relation_from_name(q.at("relation").get<std::string>());
      ep.query.anchor_ids = q.at("anchor_ids").get<std::vector<int>>();
      ep.query.target_id = q.at("target_id").get<int>();
      const std::string uniq = q.at("uniqueness").get<std::string>();
      if (uniq != "unique" && uniq != "multiple") throw std::runtime_error("bad uniqueness value '" + uniq + "'");
      ep.query.unique = uniq == "unique";
      for (const json& jp : j.at("proposals")) {
        ObjectProposal p;
        p.id = jp.at("id").get<int>();
        p.gt_category = category_id(jp.at("category").get<std::string>());
        p.box = box_from_json(jp.at("box"));
        ep.proposals.push_back(p);
      }
      ep.target_id = j.at("target_id").get<int>();
      bool target_in_proposals = false;
      for (const auto& p : ep.proposals) target_in_proposals |= p.id == ep.target_id;
      if (!target_in_proposals) throw std::runtime_error("target_id missing from proposals");
      episodes.push_back(std::move(ep));
    } catch (const std::exception& e) {
      throw std::runtime_error("dataset " + path + " line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return episodes;
}

}  // namespace g3dk
