#include "g3dk/recon.hpp"

#include <stdexcept>
#include <string>

#include "g3dk/ops.hpp"
#include "g3dk/posenc.hpp"
#include "g3dk/rng.hpp"

namespace g3dk {

void ReconConfig::validate() const {
  if (alpha < 0.0) throw std::invalid_argument("recon alpha must be >= 0");
  if (decoder_blocks < 0) throw std::invalid_argument("recon decoder_blocks must be >= 0");
}

ReconDecoderParams init_recon_decoder(Rng& rng, std::int64_t dim, int blocks, int num_heads) {
  ReconDecoderParams p;
  p.proj_w = randn(rng, {dim, dim}, 0.0, 0.02);
  p.proj_b = zeros({dim});
  for (int i = 0; i < blocks; ++i) p.blocks.push_back(init_se_block(rng, dim, num_heads));
  p.head_local_w = randn(rng, {dim, 4}, 0.0, 0.02);
  // z-channel biases start at a rough scene prior; an all-zero pointmap
  // would sit right at the 1/z normalization's singularity
  p.head_local_b = Tensor{Shape{4}, std::vector<double>{0.0, 0.0, 2.5, 0.0}};
  p.head_global_w = randn(rng, {dim, 4}, 0.0, 0.02);
  p.head_global_b = Tensor{Shape{4}, std::vector<double>{0.0, 0.0, 1.0, 0.0}};
  return p;
}

PointMapPrediction recon_decoder(Tape& tape, const Tensor& features, const std::vector<std::uint8_t>& valid,
                                 const ReconDecoderParams& params) {
  if (features.rank() != 4) throw std::invalid_argument("recon_decoder expects [B,V,N,dim] features");
  if (!features.all_finite()) throw std::invalid_argument("recon_decoder given non-finite features");
  const std::int64_t b = features.extent(0);
  const std::int64_t v = features.extent(1);
  const std::int64_t n = features.extent(2);

  Tensor x = add(tape, matmul(tape, features, params.proj_w), params.proj_b);
  for (const auto& block : params.blocks) x = se_block(tape, x, valid, block);

  auto head = [&](const Tensor& w, const Tensor& bias) {
    Tensor out4 = add(tape, matmul(tape, x, w), bias);  // [B,V,N,4]
    Tensor xyz = slice(tape, out4, 3, 0, 3);
    Tensor conf = reshape(tape, slice(tape, out4, 3, 3, 1), {b, v, n});
    return std::make_pair(xyz, conf);
  };
  PointMapPrediction pred;
  auto [lx, lc] = head(params.head_local_w, params.head_local_b);
  auto [gx, gc] = head(params.head_global_w, params.head_global_b);
  pred.local = lx;
  pred.conf_local = lc;
  pred.global = gx;
  pred.conf_global = gc;
  return pred;
}

namespace {

struct ScopeView {
  std::int64_t groups;      // number of normalization groups
  std::int64_t group_size;  // points per group
};

ScopeView scope_view(const Tensor& points, NormScope scope) {
  const std::int64_t b = points.extent(0);
  const std::int64_t v = points.extent(1);
  const std::int64_t n = points.extent(2);
  if (scope == NormScope::per_view) return {b * v, n};
  return {b, v * n};
}

// Valid-point counts per group; throws if any group is empty.
std::vector<double> group_counts(const std::vector<std::uint8_t>& valid, const ScopeView& sv) {
  std::vector<double> counts(static_cast<std::size_t>(sv.groups), 0.0);
  for (std::int64_t g = 0; g < sv.groups; ++g) {
    for (std::int64_t i = 0; i < sv.group_size; ++i) {
      if (valid[static_cast<std::size_t>(g * sv.group_size + i)]) counts[static_cast<std::size_t>(g)] += 1.0;
    }
    if (counts[static_cast<std::size_t>(g)] == 0.0) {
      throw std::runtime_error("regr_loss: normalization group " + std::to_string(g) + " has no valid points");
    }
  }
  return counts;
}

// z per group = mean norm over valid points, differentiable through `points`.
Tensor mean_norm(Tape& tape, const Tensor& points, const std::vector<std::uint8_t>& valid, const ScopeView& sv,
                 const std::vector<double>& counts, const Shape& group_shape) {
  Tensor norms = l2_norm(tape, points, -1);  // [B,V,N]
  Tensor masked = mul(tape, norms, mask_tensor(valid, norms.shape));
  Tensor flat = reshape(tape, masked, {sv.groups, sv.group_size});
  Tensor sums = sum(tape, flat, 1);  // [groups]
  Tensor recip_counts{Shape{sv.groups}};
  for (std::int64_t g = 0; g < sv.groups; ++g) recip_counts.data[static_cast<std::size_t>(g)] = 1.0 / counts[static_cast<std::size_t>(g)];
  return reshape(tape, mul(tape, sums, recip_counts), group_shape);
}

}  // namespace

Tensor regr_loss(Tape& tape, const Tensor& pred, const Tensor& gt, const std::vector<std::uint8_t>& valid,
                 NormScope scope) {
  if (pred.rank() != 4 || pred.extent(-1) != 3) throw std::invalid_argument("regr_loss expects [B,V,N,3] points");
  if (pred.shape != gt.shape) {
    throw std::invalid_argument("regr_loss shape mismatch: " + shape_str(pred.shape) + " vs " + shape_str(gt.shape));
  }
  const std::int64_t rows = pred.size() / 3;
  if (static_cast<std::int64_t>(valid.size()) != rows) throw std::invalid_argument("regr_loss mask size mismatch");
  const ScopeView sv = scope_view(pred, scope);
  const auto counts = group_counts(valid, sv);

  Shape group_shape = (scope == NormScope::per_view) ? Shape{pred.extent(0), pred.extent(1)} : Shape{pred.extent(0)};
  Tensor z_pred = mean_norm(tape, pred, valid, sv, counts, group_shape);
  Tensor z_gt = mean_norm(tape, gt, valid, sv, counts, group_shape);
  for (double z : z_pred.data) {
    if (!(z > 0.0)) throw std::runtime_error("regr_loss: degenerate scene, predicted mean norm is zero");
  }
  for (double z : z_gt.data) {
    if (!(z > 0.0)) throw std::runtime_error("regr_loss: degenerate scene, ground-truth mean norm is zero");
  }

  Tensor inv_zp = div(tape, full(group_shape, 1.0), z_pred);
  Tensor inv_zg = div(tape, full(group_shape, 1.0), z_gt);
  Tensor pn = mul(tape, pred, expand_from_prefix(tape, inv_zp, pred.shape));
  Tensor gn = mul(tape, gt, expand_from_prefix(tape, inv_zg, gt.shape));
  Tensor dist = l2_norm(tape, sub(tape, pn, gn), -1);  // [B,V,N]
  return mul(tape, dist, mask_tensor(valid, dist.shape));
}

Tensor conf_weighted_loss(Tape& tape, const Tensor& pred_points, const Tensor& conf_raw, const Tensor& gt,
                          const std::vector<std::uint8_t>& valid, double alpha, bool reward_sign, NormScope scope) {
  Tensor point_loss = regr_loss(tape, pred_points, gt, valid, scope);
  Tensor conf_plus = add_scalar(tape, exp(tape, conf_raw), 1.0);
  Tensor weighted = mul(tape, conf_plus, point_loss);
  Tensor reg = mul_scalar(tape, log(tape, conf_plus), reward_sign ? -alpha : alpha);
  Tensor per_point = add(tape, weighted, reg);
  Tensor masked = mul(tape, per_point, mask_tensor(valid, per_point.shape));
  double count = 0.0;
  for (auto m : valid) count += m ? 1.0 : 0.0;
  if (count == 0.0) throw std::runtime_error("conf_weighted_loss: empty mask");
  return mul_scalar(tape, sum_all(tape, masked), 1.0 / count);
}

GtPointMaps gt_pointmaps_from_frames(const std::vector<CameraFrame>& frames, int patch_size) {
  if (frames.empty()) throw std::invalid_argument("gt_pointmaps_from_frames: no frames");
  GtPointMaps out;
  const std::int64_t v = static_cast<std::int64_t>(frames.size());
  std::vector<PatchGridPoints> grids;
  grids.reserve(frames.size());
  for (const auto& f : frames) grids.push_back(patch_mean_world(f, patch_size));
  out.grid_h = grids[0].grid_h;
  out.grid_w = grids[0].grid_w;
  const std::int64_t n = static_cast<std::int64_t>(out.grid_h) * out.grid_w;
  out.local = Tensor{Shape{1, v, n, 3}};
  out.global = Tensor{Shape{1, v, n, 3}};
  out.valid.assign(static_cast<std::size_t>(v * n), 0);
  for (std::int64_t vi = 0; vi < v; ++vi) {
    if (grids[static_cast<std::size_t>(vi)].grid_h != out.grid_h ||
        grids[static_cast<std::size_t>(vi)].grid_w != out.grid_w) {
      throw std::invalid_argument("gt_pointmaps_from_frames: views disagree on patch grid extents");
    }
    for (std::int64_t ni = 0; ni < n; ++ni) {
      const auto& g = grids[static_cast<std::size_t>(vi)];
      if (!g.valid[static_cast<std::size_t>(ni)]) continue;
      out.valid[static_cast<std::size_t>(vi * n + ni)] = 1;
      const Vec3 pw = g.points[static_cast<std::size_t>(ni)];
      const Vec3 pl = frames[static_cast<std::size_t>(vi)].extrinsics.to_camera(pw);
      const auto base = static_cast<std::size_t>((vi * n + ni) * 3);
      out.global.data[base] = pw.x;
      out.global.data[base + 1] = pw.y;
      out.global.data[base + 2] = pw.z;
      out.local.data[base] = pl.x;
      out.local.data[base + 1] = pl.y;
      out.local.data[base + 2] = pl.z;
    }
  }
  return out;
}

Tensor recon_loss_total(Tape& tape, const PointMapPrediction& pred, const GtPointMaps& gt, const ReconConfig& cfg) {
  cfg.validate();
  Tensor lg = conf_weighted_loss(tape, pred.global, pred.conf_global, gt.global, gt.valid, cfg.alpha,
                                 cfg.reward_sign, NormScope::whole_set);
  Tensor ll = conf_weighted_loss(tape, pred.local, pred.conf_local, gt.local, gt.valid, cfg.alpha, cfg.reward_sign,
                                 NormScope::per_view);
  return add(tape, lg, ll);
}

}  // namespace g3dk
