#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "g3dk/geometry.hpp"
#include "g3dk/grounding.hpp"

namespace g3dk {

class Rng;

inline constexpr int kNumCategories = 12;
/// Category vocabulary; each category also has a fixed byte-exact albedo.
std::span<const char* const> category_names();
int category_id(std::string_view name);  // throws on unknown category

struct SceneObject {
  int id = 0;
  int category = 0;
  Aabb box;
  std::array<double, 3> albedo{};  // multiples of 1/255, so blob color bytes round-trip
};

/// Room spans [-x/2,x/2] x [-y/2,y/2] x [0,z]; objects sit on the floor
/// with pairwise zero overlap.
struct SceneSpec {
  std::uint64_t id = 0;
  std::uint64_t seed = 0;
  Vec3 room{6.0, 6.0, 3.0};
  std::vector<SceneObject> objects;

  Aabb room_box() const { return Aabb{{-room.x / 2, -room.y / 2, 0.0}, {room.x / 2, room.y / 2, room.z}}; }
  const SceneObject& object_by_id(int id) const;
  int category_count(int category) const;
};

/// Relation semantics are world-frame and fixed: left = -x, right = +x,
/// front = -y, behind = +y.
enum class Relation {
  left_of,
  right_of,
  in_front_of,
  behind,
  nearest_to,
  farthest_from,
  between,
  closest_to_wall,
};
std::string_view relation_name(Relation r);
Relation relation_from_name(std::string_view name);

struct Query {
  std::vector<std::string> tokens;
  Relation relation = Relation::left_of;
  std::vector<int> anchor_ids;
  int target_id = 0;
  bool unique = true;  // target category appears once in the scene
};

struct GroundingEpisode {
  SceneSpec scene;
  std::vector<CameraFrame> frames;
  Query query;
  std::vector<ObjectProposal> proposals;
  int target_id = 0;
};

/// Non-overlapping categorized boxes, deterministic per seed; roughly half
/// of the scenes carry a same-category distractor pair. Throws after 10k
/// failed placement attempts.
SceneSpec generate_scene(std::uint64_t seed, int num_objects, const Vec3& room_extents);

/// Ring of poses at fixed height facing the room center, with small
/// seeded pose noise.
std::vector<Extrinsics> ring_camera_path(const SceneSpec& scene, int num_views, Rng& rng);

/// Per-pixel ray vs AABB-set renderer (slab method). Depth is the ray
/// parameter along the optical-axis convention, so back-projecting the
/// rendered depth returns the hit point exactly. Walls render as
/// face-coded grays, objects as their albedo.
std::vector<CameraFrame> render_views(const SceneSpec& scene, std::span<const Extrinsics> path, int width,
                                      int height);

/// Analytic first-hit for one pixel's ray; the renderer oracle.
struct RayHit {
  Vec3 point;
  double t = 0.0;
  int object_id = -1;  // -1 for a wall hit
};
RayHit trace_pixel(const SceneSpec& scene, const Intrinsics& intr, const Extrinsics& extr, int u, int v);

/// Builds a referring expression whose relation provably identifies the
/// target among same-category objects; nullopt when no unambiguous query
/// exists for this scene.
std::optional<Query> make_query(const SceneSpec& scene, std::uint64_t seed);

/// Up to max_queries sound queries with pairwise-distinct targets. Several
/// queries against one scene force the model to condition on the query
/// instead of memorizing a per-scene answer.
std::vector<Query> make_queries(const SceneSpec& scene, std::uint64_t seed, int max_queries);

/// Gaussian center shifts and log-normal per-axis scale factors, clipped
/// to the room.
std::vector<ObjectProposal> jitter_proposals(std::span<const ObjectProposal> proposals, std::uint64_t seed,
                                             double sigma_scale, double sigma_center, const Aabb& room);

struct DatasetGenParams {
  int views = 4;
  int image_size = 96;
  int num_objects = 8;
  double room_extent = 6.0;
  int queries_per_scene = 1;  // episodes share the scene's rendered frames
};

struct DatasetSummary {
  int episodes = 0;
  int unique_count = 0;
  int multiple_count = 0;
  int skipped = 0;
};

/// Pure function of (seed, salt): episode i draws its streams from
/// mix_seed(seed, salt, attempt_index).
std::vector<GroundingEpisode> generate_dataset(std::uint64_t seed, int count, const DatasetGenParams& params,
                                               std::string_view salt = "", DatasetSummary* summary = nullptr);

/// JSON-Lines episodes; frames live in sidecar blobs under
/// "<path>.blobs/". Round-trip is lossless.
void write_dataset(const std::string& path, std::span<const GroundingEpisode> episodes);
std::vector<GroundingEpisode> read_dataset(const std::string& path);

}  // namespace g3dk
