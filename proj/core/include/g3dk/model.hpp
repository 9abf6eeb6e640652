#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "g3dk/checkpoint.hpp"
#include "g3dk/config.hpp"
#include "g3dk/grounding.hpp"
#include "g3dk/recon.hpp"
#include "g3dk/synthscene.hpp"

namespace g3dk {

enum class Ablation { full, no_sg, no_mpe, no_attn, no_lg };
std::string ablation_name(Ablation a);
Ablation ablation_from_flag(const std::string& flag);  // "", "sg", "mpe", "attn", "lg"

/// Closed template vocabulary: the 12 categories, the query function
/// words, and the <ground> token.
struct TokenVocab {
  std::vector<std::string> tokens;

  static const TokenVocab& standard();
  std::int64_t size() const { return static_cast<std::int64_t>(tokens.size()); }
  std::int64_t id(const std::string& token) const;  // throws on unknown tokens
  std::int64_t ground_id() const { return size() - 1; }
};

struct GroundingOutput {
  std::vector<double> ground_state;       // h, [dim]
  std::vector<double> object_features;    // P*dim row-major
  std::vector<double> similarities;       // P
  std::vector<int> proposal_ids;          // P
  std::vector<double> category_logits;    // num categories
  int predicted_id = -1;
  int predicted_category = -1;
  int fallback_pools = 0;  // proposals that needed the best-coverage fallback
};

struct CheckpointMismatchError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// The micro multi-view grounding transformer: patch embed, Eq.-style
/// position fusion, SE stack, joint fusion over [visual; query; <ground>]
/// tokens, grounding/category heads, and (in training builds) the
/// reconstruction branch.
class ToyGrounder {
 public:
  /// `training` controls whether the reconstruction branch is allocated
  /// at all; inference builds never carry it.
  ToyGrounder(const RunConfig& cfg, Ablation ablation, bool training);

  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  const RunConfig& config() const { return cfg_; }
  Ablation ablation() const { return ablation_; }
  bool has_recon_branch() const { return has_recon_; }
  std::int64_t recon_forward_count() const { return recon_forwards_; }
  std::int64_t parameter_count() const { return params_.total_scalars(); }

  PatchGrid encode_views(Tape& tape, const std::vector<CameraFrame>& frames) const;

  struct ForwardResult {
    GroundingOutput output;
    Tensor loss_ground;
    Tensor loss_lang;
    Tensor loss_recon;
    bool has_recon = false;
    Tensor loss_total;
  };

  ForwardResult forward(Tape& tape, const GroundingEpisode& episode, bool train_mode);

  /// Inference path: non-recording tape, reconstruction branch untouched.
  GroundingOutput infer(const GroundingEpisode& episode);

  /// Re-registers every parameter as a leaf on a fresh tape.
  void watch_params(Tape& tape);

  /// Copies matching tensors from a checkpoint; missing names or shape
  /// conflicts raise CheckpointMismatchError. Extra checkpoint entries
  /// (e.g. recon.* for an inference build) are ignored.
  void load_params(const ParamStore& ckpt);

 private:
  RunConfig cfg_;
  Ablation ablation_;
  bool has_recon_ = false;
  ParamStore params_;
  mutable std::int64_t recon_forwards_ = 0;
};

struct StepLog {
  std::int64_t step = 0;
  double l_ground = 0.0;
  double l_recon = 0.0;
  double l_lang = 0.0;
  double total = 0.0;
  bool has_recon = false;
};

struct TrainResult {
  std::vector<StepLog> log;
};

/// AdamW with linear warmup then cosine decay; gradients accumulate over
/// the batch in fixed episode order, so runs are bit-reproducible.
/// workers > 1 fans episode forwards out to threads; the fixed-order
/// reduction keeps the result bit-identical to the sequential path.
TrainResult train_model(ToyGrounder& model, const std::vector<GroundingEpisode>& dataset, const RunConfig& cfg,
                        int workers = 1);

enum class ErrorType { correct, spatial, semantic, detection, other };
std::string error_type_name(ErrorType e);

/// Rule-based error taxonomy: correct when IoU >= 0.25; detection when the
/// right proposal was chosen but its (jittered) box is too loose; semantic
/// when the predicted proposal's category differs from the target's;
/// spatial when the category matches but the instance is wrong.
ErrorType classify_error(const GroundingEpisode& episode, const GroundingOutput& output);

struct MetricsReport {
  std::vector<double> thresholds;
  struct Bucket {
    int episodes = 0;
    std::vector<int> hits;  // aligned with thresholds
    int category_correct = 0;
  };
  Bucket overall, unique, multiple;
  std::array<int, 5> error_counts{};  // indexed by ErrorType

  double accuracy(const Bucket& b, std::size_t t_idx) const;
  std::vector<std::array<std::string, 3>> rows() const;  // subset, metric, value
};

MetricsReport evaluate_model(ToyGrounder& model, const std::vector<GroundingEpisode>& dataset,
                             std::span<const double> thresholds);

using PredictFn = std::function<GroundingOutput(const GroundingEpisode&)>;

MetricsReport evaluate_with(const std::vector<GroundingEpisode>& dataset, const PredictFn& predict,
                            std::span<const double> thresholds);

/// Harness stubs that bracket any real checkpoint: the oracle always picks
/// the target, the random stub draws uniformly among proposals.
GroundingOutput oracle_stub_predict(const GroundingEpisode& episode);
GroundingOutput random_stub_predict(const GroundingEpisode& episode, std::uint64_t seed);

}  // namespace g3dk
