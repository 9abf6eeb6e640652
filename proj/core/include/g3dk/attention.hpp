#pragma once

#include <cstdint>
#include <vector>

#include "g3dk/ops.hpp"
#include "g3dk/tensor.hpp"

namespace g3dk {

class Rng;

/// One attention instance: pre-LayerNorm, multi-head QKV/output
/// projections, residual handled by the callers below.
struct AttentionParams {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln_gamma, ln_beta;
  int num_heads = 4;

  void validate(std::int64_t dim) const;
};

struct FeedForwardParams {
  Tensor w1, b1, w2, b2;
  Tensor ln_gamma, ln_beta;
};

/// intra-view attention, then inter-view attention, then a residual
/// feed-forward.
struct SeBlockParams {
  AttentionParams intra;
  AttentionParams inter;
  FeedForwardParams ffn;
};

AttentionParams init_attention(Rng& rng, std::int64_t dim, int num_heads, double stddev = 0.02);
FeedForwardParams init_feed_forward(Rng& rng, std::int64_t dim, std::int64_t hidden, double stddev = 0.02);
SeBlockParams init_se_block(Rng& rng, std::int64_t dim, int num_heads, double stddev = 0.02);

/// Residual multi-head self-attention over the S axis of [R,S,dim].
/// Slots with valid == 0 are excluded from the softmax and contribute
/// nothing; fully masked groups return the residual input unchanged.
Tensor attention_over_slots(Tape& tape, const Tensor& x, const std::vector<std::uint8_t>& valid,
                            const AttentionParams& params);

/// Attention across the V view slots for each patch index.
Tensor inter_view_attention(Tape& tape, const Tensor& f, const std::vector<std::uint8_t>& valid,
                            const AttentionParams& params);

/// Attention across the N patch slots within each view.
Tensor intra_view_attention(Tape& tape, const Tensor& f, const std::vector<std::uint8_t>& valid,
                            const AttentionParams& params);

/// Residual two-layer feed-forward over the last axis; masked entries
/// contribute nothing.
Tensor feed_forward(Tape& tape, const Tensor& x, const std::vector<std::uint8_t>& valid,
                    const FeedForwardParams& params);

Tensor se_block(Tape& tape, const Tensor& f, const std::vector<std::uint8_t>& valid, const SeBlockParams& params);

/// Attention over all V*N tokens jointly (the unfactorized baseline the
/// divided design is benchmarked against).
Tensor joint_attention(Tape& tape, const Tensor& f, const std::vector<std::uint8_t>& valid,
                       const AttentionParams& params);

enum class AttentionMode { divided, joint };

/// Closed-form multiply-accumulate count of the score and mix stages.
/// Degenerate single-slot stages cost nothing (their softmax is the
/// identity, no score matrix is formed).
double flops_estimate(std::int64_t views, std::int64_t patches, std::int64_t dim, AttentionMode mode);

}  // namespace g3dk
