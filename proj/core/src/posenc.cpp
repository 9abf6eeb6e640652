#include "g3dk/posenc.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "g3dk/rng.hpp"

namespace g3dk {

void PosEncConfig::validate() const {
  if (dim <= 0) throw std::invalid_argument("posenc.dim must be positive");
  if (num_freqs < 0) throw std::invalid_argument("posenc.num_freqs must be non-negative");
  if (dim < 6 * num_freqs) {
    throw std::invalid_argument("posenc.dim must be at least 6*num_freqs, got dim=" + std::to_string(dim) +
                                " num_freqs=" + std::to_string(num_freqs));
  }
  if (!(coord_scale > 0.0)) throw std::invalid_argument("posenc.coord_scale must be positive");
  if (pool_kernel < 1) throw std::invalid_argument("posenc.pool_kernel must be >= 1");
  if (ray_mlp_hidden <= 0) throw std::invalid_argument("posenc.ray_mlp_hidden must be positive");
}

void PatchGrid::check_invariants() const {
  if (features.rank() != 4) throw std::invalid_argument("PatchGrid features must be rank 4");
  const auto b = batch();
  const auto v = views();
  const auto n = patches();
  if (static_cast<std::int64_t>(grid_h) * grid_w != n) {
    throw std::invalid_argument("PatchGrid extents disagree: N=" + std::to_string(n) + " vs " +
                                std::to_string(grid_h) + "x" + std::to_string(grid_w));
  }
  if (world_coords.shape != Shape{b, v, n, 3} || ray_dirs.shape != Shape{b, v, n, 3}) {
    throw std::invalid_argument("PatchGrid coordinate tensors must be [B,V,N,3]");
  }
  if (static_cast<std::int64_t>(valid.size()) != b * v * n) {
    throw std::invalid_argument("PatchGrid mask size mismatch");
  }
}

Tensor sinusoidal_encode_3d(const Tensor& coords, const PosEncConfig& cfg) {
  cfg.validate();
  if (coords.rank() < 1 || coords.extent(-1) != 3) {
    throw std::invalid_argument("sinusoidal_encode_3d expects a trailing axis of 3, got " + shape_str(coords.shape));
  }
  if (!coords.all_finite()) throw std::invalid_argument("sinusoidal_encode_3d requires finite coordinates");
  const std::int64_t rows = coords.size() / 3;
  Shape out_shape(coords.shape.begin(), coords.shape.end() - 1);
  out_shape.push_back(cfg.dim);
  Tensor out{out_shape};
  const int f = cfg.num_freqs;
  for (std::int64_t r = 0; r < rows; ++r) {
    double* dst = out.data.data() + r * cfg.dim;
    const double* src = coords.data.data() + r * 3;
    std::int64_t o = 0;
    for (int axis = 0; axis < 3; ++axis) {
      for (int k = 0; k < f; ++k) {
        const double w = std::ldexp(1.0, k) / cfg.coord_scale;  // 2^k / scale
        dst[o++] = std::sin(src[axis] * w);
        dst[o++] = std::cos(src[axis] * w);
      }
    }
    // remaining entries stay zero-padded
  }
  return out;
}

RayMlpParams init_ray_mlp(Rng& rng, const PosEncConfig& cfg) {
  RayMlpParams p;
  p.w1 = randn(rng, {3, cfg.ray_mlp_hidden}, 0.0, 0.02);
  p.b1 = zeros({cfg.ray_mlp_hidden});
  p.w2 = randn(rng, {cfg.ray_mlp_hidden, cfg.dim}, 0.0, 0.02);
  p.b2 = zeros({cfg.dim});
  return p;
}

Tensor ray_mlp_encode(Tape& tape, const Tensor& ray_dirs, const RayMlpParams& params,
                      const std::vector<std::uint8_t>* valid) {
  if (ray_dirs.rank() < 2 || ray_dirs.extent(-1) != 3) {
    throw std::invalid_argument("ray_mlp_encode expects [..,3] directions, got " + shape_str(ray_dirs.shape));
  }
  if (!params.w1.all_finite() || !params.b1.all_finite() || !params.w2.all_finite() || !params.b2.all_finite()) {
    throw std::invalid_argument("ray_mlp_encode given non-finite parameters");
  }
  const std::int64_t rows = ray_dirs.size() / 3;
  const std::int64_t dim = params.w2.extent(1);
  Tensor flat = reshape(tape, ray_dirs, {rows, 3});
  Tensor h = gelu(tape, add(tape, matmul(tape, flat, params.w1), params.b1));
  Tensor o = add(tape, matmul(tape, h, params.w2), params.b2);
  Shape out_shape(ray_dirs.shape.begin(), ray_dirs.shape.end() - 1);
  out_shape.push_back(dim);
  Tensor out = reshape(tape, o, out_shape);
  if (valid != nullptr) {
    if (static_cast<std::int64_t>(valid->size()) != rows) {
      throw std::invalid_argument("ray_mlp_encode mask size mismatch");
    }
    Shape prefix(ray_dirs.shape.begin(), ray_dirs.shape.end() - 1);
    out = mul(tape, out, expand_from_prefix(tape, mask_tensor(*valid, prefix), out_shape));
  }
  return out;
}

Tensor avg_pool_grid(Tape& tape, const Tensor& x, int grid_h, int grid_w, int kernel) {
  if (x.rank() != 4) throw std::invalid_argument("avg_pool_grid expects [B,V,N,dim]");
  if (kernel < 1) throw std::invalid_argument("pool kernel must be >= 1");
  const std::int64_t n = x.extent(2);
  if (static_cast<std::int64_t>(grid_h) * grid_w != n) {
    throw std::invalid_argument("avg_pool_grid extents disagree with N");
  }
  const std::int64_t bv = x.extent(0) * x.extent(1);
  const std::int64_t dim = x.extent(3);
  const int ph = (grid_h + kernel - 1) / kernel;
  const int pw = (grid_w + kernel - 1) / kernel;
  const std::int64_t np = static_cast<std::int64_t>(ph) * pw;
  Tensor out{Shape{x.extent(0), x.extent(1), np, dim}};

  // member cell indices per pooled cell; shared by forward and backward
  std::vector<std::vector<std::int64_t>> members(static_cast<std::size_t>(np));
  for (int i = 0; i < ph; ++i) {
    for (int j = 0; j < pw; ++j) {
      auto& m = members[static_cast<std::size_t>(i) * pw + j];
      for (int di = 0; di < kernel; ++di) {
        const int gi = i * kernel + di;
        if (gi >= grid_h) break;
        for (int dj = 0; dj < kernel; ++dj) {
          const int gj = j * kernel + dj;
          if (gj >= grid_w) break;
          m.push_back(static_cast<std::int64_t>(gi) * grid_w + gj);
        }
      }
    }
  }

  for (std::int64_t g = 0; g < bv; ++g) {
    const double* src = x.data.data() + g * n * dim;
    double* dst = out.data.data() + g * np * dim;
    for (std::int64_t p = 0; p < np; ++p) {
      const auto& m = members[static_cast<std::size_t>(p)];
      const double inv = 1.0 / static_cast<double>(m.size());
      double* cell = dst + p * dim;
      for (const auto src_cell : m) {
        const double* s = src + src_cell * dim;
        for (std::int64_t d = 0; d < dim; ++d) cell[d] += s[d];
      }
      for (std::int64_t d = 0; d < dim; ++d) cell[d] *= inv;
    }
  }

  const bool tracked = tape.recording() && x.node >= 0;
  if (tracked) {
    out.requires_grad = true;
    out.node = tape.alloc_node(out.size());
    tape.push_op([xn = x.node, on = out.node, members, bv, n, np, dim](Tape& t) {
      const auto& go = t.grad_buf(on);
      auto& gx = t.grad_buf(xn);
      for (std::int64_t g = 0; g < bv; ++g) {
        const double* gdst = go.data() + g * np * dim;
        double* gsrc = gx.data() + g * n * dim;
        for (std::int64_t p = 0; p < np; ++p) {
          const auto& m = members[static_cast<std::size_t>(p)];
          const double inv = 1.0 / static_cast<double>(m.size());
          const double* cell = gdst + p * dim;
          for (const auto src_cell : m) {
            double* s = gsrc + src_cell * dim;
            for (std::int64_t d = 0; d < dim; ++d) s[d] += cell[d] * inv;
          }
        }
      }
    });
  }
  return out;
}

std::vector<std::uint8_t> pool_valid_any(const std::vector<std::uint8_t>& valid, std::int64_t batch,
                                         std::int64_t views, int grid_h, int grid_w, int kernel) {
  const int ph = (grid_h + kernel - 1) / kernel;
  const int pw = (grid_w + kernel - 1) / kernel;
  const std::int64_t n = static_cast<std::int64_t>(grid_h) * grid_w;
  const std::int64_t np = static_cast<std::int64_t>(ph) * pw;
  std::vector<std::uint8_t> out(static_cast<std::size_t>(batch * views * np), 0);
  for (std::int64_t g = 0; g < batch * views; ++g) {
    for (int i = 0; i < ph; ++i) {
      for (int j = 0; j < pw; ++j) {
        std::uint8_t any = 0;
        for (int di = 0; di < kernel && !any; ++di) {
          const int gi = i * kernel + di;
          if (gi >= grid_h) break;
          for (int dj = 0; dj < kernel; ++dj) {
            const int gj = j * kernel + dj;
            if (gj >= grid_w) break;
            if (valid[static_cast<std::size_t>(g * n + gi * grid_w + gj)]) {
              any = 1;
              break;
            }
          }
        }
        out[static_cast<std::size_t>(g * np + i * pw + j)] = any;
      }
    }
  }
  return out;
}

Tensor mask_tensor(const std::vector<std::uint8_t>& valid, Shape shape) {
  if (shape_size(shape) != static_cast<std::int64_t>(valid.size())) {
    throw std::invalid_argument("mask_tensor shape does not match mask size");
  }
  Tensor t{std::move(shape)};
  for (std::size_t i = 0; i < valid.size(); ++i) t.data[i] = valid[i] ? 1.0 : 0.0;
  return t;
}

PatchGrid fuse_multilevel(Tape& tape, const PatchGrid& grid, const PosEncConfig& cfg, const RayMlpParams& psi) {
  cfg.validate();
  grid.check_invariants();
  const std::int64_t b = grid.batch();
  const std::int64_t v = grid.views();
  const std::int64_t n = grid.patches();
  const std::int64_t dim = grid.feat_dim();
  if (cfg.dim != dim) throw std::invalid_argument("posenc.dim disagrees with the grid's feature width");
  const int k = cfg.pool_kernel;

  // phi on the mean world coordinate, masked so invalid patches stay zero
  Tensor phi = sinusoidal_encode_3d(grid.world_coords, cfg);
  Tensor mask = expand_from_prefix(tape, mask_tensor(grid.valid, {b, v, n}), phi.shape);
  Tensor with_phi = add(tape, grid.features, mul(tape, phi, mask));

  Tensor pooled = avg_pool_grid(tape, with_phi, grid.grid_h, grid.grid_w, k);

  PatchGrid out;
  out.grid_h = (grid.grid_h + k - 1) / k;
  out.grid_w = (grid.grid_w + k - 1) / k;
  const std::int64_t np = static_cast<std::int64_t>(out.grid_h) * out.grid_w;
  out.valid = pool_valid_any(grid.valid, b, v, grid.grid_h, grid.grid_w, k);
  out.cameras = grid.cameras;
  out.pixel_points = grid.pixel_points;
  out.patch_size = grid.patch_size * k;

  // pooled geometry: coords averaged over valid members, ray through the
  // pooled region's center pixel when cameras are known
  out.world_coords = Tensor{Shape{b, v, np, 3}};
  out.ray_dirs = Tensor{Shape{b, v, np, 3}};
  const bool have_cams = grid.cameras.size() == static_cast<std::size_t>(v) && b == 1 &&
                         grid.center_u.size() == static_cast<std::size_t>(v * n);
  if (have_cams) {
    out.center_u.assign(static_cast<std::size_t>(v * np), 0.0);
    out.center_v.assign(static_cast<std::size_t>(v * np), 0.0);
  }
  for (std::int64_t bi = 0; bi < b; ++bi) {
    for (std::int64_t vi = 0; vi < v; ++vi) {
      for (int i = 0; i < out.grid_h; ++i) {
        for (int j = 0; j < out.grid_w; ++j) {
          const std::int64_t p = static_cast<std::int64_t>(i) * out.grid_w + j;
          Vec3 coord_acc{};
          Vec3 ray_acc{};
          double cu = 0.0, cv = 0.0;
          int valid_count = 0, member_count = 0;
          for (int di = 0; di < k; ++di) {
            const int gi = i * k + di;
            if (gi >= grid.grid_h) break;
            for (int dj = 0; dj < k; ++dj) {
              const int gj = j * k + dj;
              if (gj >= grid.grid_w) break;
              const std::int64_t src = static_cast<std::int64_t>(gi) * grid.grid_w + gj;
              const std::int64_t flat = (bi * v + vi) * n + src;
              ++member_count;
              if (have_cams) {
                cu += grid.center_u[static_cast<std::size_t>(vi * n + src)];
                cv += grid.center_v[static_cast<std::size_t>(vi * n + src)];
              }
              if (grid.valid[static_cast<std::size_t>(flat)]) {
                ++valid_count;
                const double* wc = grid.world_coords.data.data() + flat * 3;
                const double* rd = grid.ray_dirs.data.data() + flat * 3;
                coord_acc = coord_acc + Vec3{wc[0], wc[1], wc[2]};
                ray_acc = ray_acc + Vec3{rd[0], rd[1], rd[2]};
              }
            }
          }
          const std::int64_t dst = ((bi * v + vi) * np + p) * 3;
          if (valid_count > 0) {
            const Vec3 c = coord_acc / static_cast<double>(valid_count);
            out.world_coords.data[static_cast<std::size_t>(dst)] = c.x;
            out.world_coords.data[static_cast<std::size_t>(dst) + 1] = c.y;
            out.world_coords.data[static_cast<std::size_t>(dst) + 2] = c.z;
          }
          Vec3 dir{};
          if (have_cams) {
            const double u_c = cu / member_count;
            const double v_c = cv / member_count;
            out.center_u[static_cast<std::size_t>(vi * np + p)] = u_c;
            out.center_v[static_cast<std::size_t>(vi * np + p)] = v_c;
            if (valid_count > 0) {
              dir = ray_through(grid.cameras[static_cast<std::size_t>(vi)].intrinsics,
                                grid.cameras[static_cast<std::size_t>(vi)].extrinsics, u_c, v_c, 1.0)
                        .direction;
            }
          } else if (valid_count > 0 && ray_acc.norm() > 0.0) {
            dir = ray_acc.normalized();
          }
          out.ray_dirs.data[static_cast<std::size_t>(dst)] = dir.x;
          out.ray_dirs.data[static_cast<std::size_t>(dst) + 1] = dir.y;
          out.ray_dirs.data[static_cast<std::size_t>(dst) + 2] = dir.z;
        }
      }
    }
  }

  Tensor psi_out = ray_mlp_encode(tape, out.ray_dirs, psi, &out.valid);
  out.features = add(tape, pooled, psi_out);
  return out;
}

}  // namespace g3dk
