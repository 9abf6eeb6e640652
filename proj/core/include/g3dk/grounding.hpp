#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "g3dk/geometry.hpp"
#include "g3dk/posenc.hpp"
#include "g3dk/tensor.hpp"

namespace g3dk {

struct ObjectProposal {
  int id = 0;
  Aabb box;
  int gt_category = 0;
};

struct LossWeights {
  double lambda_g = 1.0;
  double lambda_r = 0.3;
  double lambda_l = 1.0;

  void validate() const;
};

struct PooledObjectFeature {
  Tensor feature;  // [dim]
  int num_eligible = 0;     // patches passing the >50% coverage rule
  bool used_fallback = false;  // fell back to the single best-covered patch
};

/// Mean of the features of patches whose pixel points lie inside the box
/// with over 50% coverage, plus the sinusoidal embedding of the box
/// center. With no qualifying patch, falls back to the single
/// highest-coverage patch and flags it. Requires grid.pixel_points.
PooledObjectFeature pool_object_feature(Tape& tape, const PatchGrid& grid, const Aabb& box,
                                        const PosEncConfig& cfg);

/// Cosine similarity of h against each object feature. Zero-norm pairs get
/// similarity 0 (with a stderr warning).
Tensor cosine_similarities(Tape& tape, const Tensor& h, std::span<const Tensor> object_features);

struct InfoNceResult {
  Tensor loss;          // scalar
  Tensor similarities;  // [P], pre-temperature cosine values
};

/// Cross-entropy of softmax over sim(h, f_i)/tau against the target index;
/// negatives are the scene's other proposals.
InfoNceResult infonce_ground(Tape& tape, const Tensor& h, std::span<const Tensor> object_features,
                             std::int64_t target, double tau);

/// Softmax cross-entropy over the category vocabulary.
Tensor language_loss(Tape& tape, const Tensor& category_logits, std::int64_t gt_category);

/// lambda_g * L_ground + lambda_r * L_recon + lambda_l * L_lang. Pass
/// l_recon = nullptr when spatial guidance is disabled; the term is then
/// omitted entirely. Throws naming the first non-finite component.
Tensor total_loss(Tape& tape, const Tensor& l_ground, const Tensor* l_recon, const Tensor& l_lang,
                  const LossWeights& weights);

/// Argmax similarity; exact ties break toward the lowest proposal id.
int predict_target(std::span<const double> similarities, std::span<const int> proposal_ids);

/// The template sentence rendered from a predicted category.
std::string render_grounding_sentence(const std::string& category_name);

}  // namespace g3dk
