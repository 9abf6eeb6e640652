#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "g3dk/geometry.hpp"
#include "g3dk/ops.hpp"
#include "g3dk/tensor.hpp"

namespace g3dk {

struct PosEncConfig {
  std::int64_t dim = 64;
  int num_freqs = 4;        // sinusoid frequencies per axis
  double coord_scale = 10.0;  // meters mapped to unit range
  int pool_kernel = 2;
  std::int64_t ray_mlp_hidden = 32;

  void validate() const;  // dim >= 6*num_freqs, pool_kernel >= 1
};

struct ViewCamera {
  Intrinsics intrinsics;
  Extrinsics extrinsics;
};

/// Per-view dense world-point maps kept alongside the patch grid so that
/// object pooling can evaluate the pixel-level coverage rule later.
struct PixelPointMaps {
  int width = 0, height = 0;
  std::vector<std::vector<Vec3>> points;        // [V][H*W]
  std::vector<std::vector<std::uint8_t>> valid; // [V][H*W]
};

/// Multi-view patch features with their geometry. Masked entries carry
/// zero features; ray_dirs are unit where valid.
struct PatchGrid {
  Tensor features;      // [B,V,N,dim]
  Tensor world_coords;  // [B,V,N,3], constant
  Tensor ray_dirs;      // [B,V,N,3], constant
  std::vector<std::uint8_t> valid;  // B*V*N
  int grid_h = 0, grid_w = 0;       // N = grid_h * grid_w

  // Camera-path extras (present when built from frames, B == 1): cameras
  // per view and the continuous center-pixel coordinate of each patch,
  // so pooled patches can get the exact ray of their region center.
  std::vector<ViewCamera> cameras;            // size V or empty
  std::vector<double> center_u, center_v;     // size V*N or empty
  std::shared_ptr<const PixelPointMaps> pixel_points;
  int patch_size = 1;  // pixel span of one patch edge

  std::int64_t batch() const { return features.extent(0); }
  std::int64_t views() const { return features.extent(1); }
  std::int64_t patches() const { return features.extent(2); }
  std::int64_t feat_dim() const { return features.extent(3); }

  void check_invariants() const;
};

/// Interleaved sin/cos ladder per coordinate axis with frequencies
/// 2^k / coord_scale, concatenated over x,y,z and zero-padded to dim.
/// coords may have any leading shape; the last axis must be 3.
Tensor sinusoidal_encode_3d(const Tensor& coords, const PosEncConfig& cfg);

struct RayMlpParams {
  Tensor w1, b1;  // [3, hidden], [hidden]
  Tensor w2, b2;  // [hidden, dim], [dim]
};

RayMlpParams init_ray_mlp(class Rng& rng, const PosEncConfig& cfg);

/// Two-layer MLP over unit ray directions (3 -> hidden -> dim, gelu
/// between). Entries with valid == 0 output zero. `valid` may be null.
Tensor ray_mlp_encode(Tape& tape, const Tensor& ray_dirs, const RayMlpParams& params,
                      const std::vector<std::uint8_t>* valid = nullptr);

/// Non-overlapping kernel x kernel mean over a grid_h x grid_w patch grid
/// laid out row-major along the N axis of [B,V,N,dim]. Edges that the
/// kernel does not divide are averaged over the in-grid cells only.
Tensor avg_pool_grid(Tape& tape, const Tensor& x, int grid_h, int grid_w, int kernel);

std::vector<std::uint8_t> pool_valid_any(const std::vector<std::uint8_t>& valid, std::int64_t batch,
                                         std::int64_t views, int grid_h, int grid_w, int kernel);

/// Position-aware representation: AvgPool(f + phi(p_world)) + psi(r), with
/// phi added before pooling and psi applied to the pooled patches' center
/// rays. The result carries pooled coordinates, rays and validity.
PatchGrid fuse_multilevel(Tape& tape, const PatchGrid& grid, const PosEncConfig& cfg, const RayMlpParams& psi);

/// 0/1 constant tensor from a validity mask (shape must multiply out to
/// valid.size()).
Tensor mask_tensor(const std::vector<std::uint8_t>& valid, Shape shape);

}  // namespace g3dk
