#include "g3dk/grounding.hpp"

#include <cstdio>
#include <stdexcept>
#include <string>

#include "g3dk/ops.hpp"

namespace g3dk {

void LossWeights::validate() const {
  if (lambda_g < 0.0 || lambda_r < 0.0 || lambda_l < 0.0) {
    throw std::invalid_argument("loss weights must be non-negative");
  }
}

PooledObjectFeature pool_object_feature(Tape& tape, const PatchGrid& grid, const Aabb& box,
                                        const PosEncConfig& cfg) {
  grid.check_invariants();
  if (!box.valid()) throw std::invalid_argument("pool_object_feature: invalid box");
  if (!grid.pixel_points || grid.batch() != 1) {
    throw std::invalid_argument("pool_object_feature needs a grid with pixel point maps (B=1)");
  }
  const auto& maps = *grid.pixel_points;
  const std::int64_t v = grid.views();
  const std::int64_t n = grid.patches();
  const int ps = grid.patch_size;

  // coverage of each patch from its own pixels' world points
  std::vector<double> coverage(static_cast<std::size_t>(v * n), 0.0);
  std::vector<std::int64_t> eligible;
  for (std::int64_t vi = 0; vi < v; ++vi) {
    const auto& pts = maps.points[static_cast<std::size_t>(vi)];
    const auto& pvalid = maps.valid[static_cast<std::size_t>(vi)];
    for (int gi = 0; gi < grid.grid_h; ++gi) {
      for (int gj = 0; gj < grid.grid_w; ++gj) {
        std::vector<Vec3> inside_pts;
        for (int r = gi * ps; r < std::min((gi + 1) * ps, maps.height); ++r) {
          for (int c = gj * ps; c < std::min((gj + 1) * ps, maps.width); ++c) {
            const auto pix = static_cast<std::size_t>(r) * maps.width + c;
            if (pvalid[pix]) inside_pts.push_back(pts[pix]);
          }
        }
        const std::int64_t flat = vi * n + gi * grid.grid_w + gj;
        const CoverageResult cov = patch_box_coverage(inside_pts, box);
        if (cov.degenerate) continue;  // patch has no valid pixels
        coverage[static_cast<std::size_t>(flat)] = cov.fraction;
        if (cov.eligible) eligible.push_back(flat);
      }
    }
  }

  PooledObjectFeature out;
  out.num_eligible = static_cast<int>(eligible.size());
  if (eligible.empty()) {
    out.used_fallback = true;
    std::int64_t best = -1;
    double best_cov = -1.0;
    for (std::int64_t i = 0; i < v * n; ++i) {
      if (!grid.valid[static_cast<std::size_t>(i)]) continue;
      if (coverage[static_cast<std::size_t>(i)] > best_cov) {
        best_cov = coverage[static_cast<std::size_t>(i)];
        best = i;
      }
    }
    if (best < 0) throw std::runtime_error("pool_object_feature: no valid patch in the grid");
    eligible.push_back(best);
  }

  Tensor flat_feats = reshape(tape, grid.features, {v * n, grid.feat_dim()});
  Tensor selected = gather(tape, flat_feats, eligible);
  Tensor pooled = mean(tape, selected, 0);  // [dim]

  const Vec3 c = box.center();
  Tensor center{Shape{1, 3}, std::vector<double>{c.x, c.y, c.z}};
  Tensor center_code = reshape(tape, sinusoidal_encode_3d(center, cfg), {cfg.dim});
  out.feature = add(tape, pooled, center_code);
  return out;
}

Tensor cosine_similarities(Tape& tape, const Tensor& h, std::span<const Tensor> object_features) {
  if (h.rank() != 1) throw std::invalid_argument("cosine_similarities expects h as a rank-1 vector");
  if (object_features.empty()) throw std::invalid_argument("cosine_similarities with no proposals");
  Tensor h_norm = l2_norm(tape, h, 0);
  std::vector<Tensor> sims;
  sims.reserve(object_features.size());
  for (std::size_t i = 0; i < object_features.size(); ++i) {
    const Tensor& f = object_features[i];
    if (f.shape != h.shape) throw std::invalid_argument("object feature " + std::to_string(i) + " width mismatch");
    Tensor f_norm = l2_norm(tape, f, 0);
    if (h_norm.item() == 0.0 || f_norm.item() == 0.0) {
      std::fprintf(stderr, "warning: zero-norm embedding, similarity for proposal %zu set to 0\n", i);
      sims.push_back(scalar_tensor(0.0));
      continue;
    }
    Tensor dot = sum_all(tape, mul(tape, h, f));
    sims.push_back(div(tape, dot, mul(tape, h_norm, f_norm)));
  }
  return stack_scalars(tape, sims);
}

InfoNceResult infonce_ground(Tape& tape, const Tensor& h, std::span<const Tensor> object_features,
                             std::int64_t target, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("infonce temperature must be positive");
  const auto p = static_cast<std::int64_t>(object_features.size());
  if (p < 1) throw std::invalid_argument("infonce_ground requires at least one proposal");
  if (target < 0 || target >= p) throw std::out_of_range("infonce target index out of range");
  InfoNceResult res;
  res.similarities = cosine_similarities(tape, h, object_features);
  Tensor logits = mul_scalar(tape, res.similarities, 1.0 / tau);
  const std::int64_t targets[1] = {target};
  res.loss = cross_entropy_logits(tape, logits, targets);
  return res;
}

Tensor language_loss(Tape& tape, const Tensor& category_logits, std::int64_t gt_category) {
  if (category_logits.rank() != 1) throw std::invalid_argument("language_loss expects rank-1 logits");
  if (gt_category < 0 || gt_category >= category_logits.size()) {
    throw std::out_of_range("gt category " + std::to_string(gt_category) + " outside the vocabulary");
  }
  const std::int64_t targets[1] = {gt_category};
  return cross_entropy_logits(tape, category_logits, targets);
}

Tensor total_loss(Tape& tape, const Tensor& l_ground, const Tensor* l_recon, const Tensor& l_lang,
                  const LossWeights& weights) {
  weights.validate();
  auto check = [](const Tensor& t, const char* name) {
    if (!t.all_finite()) throw std::runtime_error(std::string("non-finite loss component: ") + name);
  };
  check(l_ground, "L_ground");
  check(l_lang, "L_lang");
  Tensor total = add(tape, mul_scalar(tape, l_ground, weights.lambda_g), mul_scalar(tape, l_lang, weights.lambda_l));
  if (l_recon != nullptr) {
    check(*l_recon, "L_recon");
    total = add(tape, total, mul_scalar(tape, *l_recon, weights.lambda_r));
  }
  return total;
}

int predict_target(std::span<const double> similarities, std::span<const int> proposal_ids) {
  if (similarities.empty() || similarities.size() != proposal_ids.size()) {
    throw std::invalid_argument("predict_target: similarity/id count mismatch");
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < similarities.size(); ++i) {
    if (similarities[i] > similarities[best] ||
        (similarities[i] == similarities[best] && proposal_ids[i] < proposal_ids[best])) {
      best = i;
    }
  }
  return proposal_ids[best];
}

std::string render_grounding_sentence(const std::string& category_name) {
  return "The " + category_name + " is located at <ground> in the global coordinates";
}

}  // namespace g3dk
