#pragma once

#include <cstdint>
#include <vector>

#include "g3dk/attention.hpp"
#include "g3dk/geometry.hpp"
#include "g3dk/tensor.hpp"

namespace g3dk {

class Rng;

struct ReconConfig {
  double alpha = 0.2;       // confidence regularizer weight
  bool reward_sign = true;  // true: -alpha*log(conf_plus); false: the printed +alpha variant
  int decoder_blocks = 1;

  void validate() const;
};

/// Local (camera-frame) and global (world) pointmaps with raw confidence
/// channels; conf_plus = 1 + exp(conf) stays > 1.
struct PointMapPrediction {
  Tensor local;        // [B,V,N,3]
  Tensor global;       // [B,V,N,3]
  Tensor conf_local;   // [B,V,N]
  Tensor conf_global;  // [B,V,N]
};

/// Projection layer + a small divided-attention transformer + two linear
/// heads emitting xyz and a confidence channel per patch.
struct ReconDecoderParams {
  Tensor proj_w, proj_b;
  std::vector<SeBlockParams> blocks;
  Tensor head_local_w, head_local_b;    // [dim,4],[4]
  Tensor head_global_w, head_global_b;  // [dim,4],[4]
};

ReconDecoderParams init_recon_decoder(Rng& rng, std::int64_t dim, int blocks, int num_heads);

PointMapPrediction recon_decoder(Tape& tape, const Tensor& features, const std::vector<std::uint8_t>& valid,
                                 const ReconDecoderParams& params);

enum class NormScope { per_view, whole_set };

/// Per-point loss grid || pred/z_pred - gt/z_gt ||_2, each side normalized
/// by its own mean point norm over the valid entries of the scope group
/// (per view for local maps, whole multi-view set for global maps).
/// Invalid points contribute zero. Throws on an all-origin group.
Tensor regr_loss(Tape& tape, const Tensor& pred, const Tensor& gt, const std::vector<std::uint8_t>& valid,
                 NormScope scope);

/// Mean over valid points of conf_plus * regr -/+ alpha * log(conf_plus).
Tensor conf_weighted_loss(Tape& tape, const Tensor& pred_points, const Tensor& conf_raw, const Tensor& gt,
                          const std::vector<std::uint8_t>& valid, double alpha, bool reward_sign, NormScope scope);

struct GtPointMaps {
  Tensor local;   // [1,V,N,3]
  Tensor global;  // [1,V,N,3]
  std::vector<std::uint8_t> valid;
  int grid_h = 0, grid_w = 0;
};

/// Supervision targets from depth: global map is the patch mean world
/// point, local map expresses the same point in each view's camera frame.
GtPointMaps gt_pointmaps_from_frames(const std::vector<CameraFrame>& frames, int patch_size);

/// Sum of the confidence-weighted losses of the global and local branches.
Tensor recon_loss_total(Tape& tape, const PointMapPrediction& pred, const GtPointMaps& gt,
                        const ReconConfig& cfg);

}  // namespace g3dk
