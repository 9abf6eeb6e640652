#include "g3dk/attention.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "g3dk/posenc.hpp"
#include "g3dk/rng.hpp"

namespace g3dk {

void AttentionParams::validate(std::int64_t dim) const {
  if (num_heads <= 0 || dim % num_heads != 0) {
    throw std::invalid_argument("dim " + std::to_string(dim) + " must be divisible by num_heads " +
                                std::to_string(num_heads));
  }
  for (const Tensor* w : {&wq, &wk, &wv, &wo}) {
    if (w->shape != Shape{dim, dim}) throw std::invalid_argument("attention projection must be dim x dim");
  }
}

AttentionParams init_attention(Rng& rng, std::int64_t dim, int num_heads, double stddev) {
  AttentionParams p;
  p.wq = randn(rng, {dim, dim}, 0.0, stddev);
  p.wk = randn(rng, {dim, dim}, 0.0, stddev);
  p.wv = randn(rng, {dim, dim}, 0.0, stddev);
  p.wo = randn(rng, {dim, dim}, 0.0, stddev);
  p.bq = zeros({dim});
  p.bk = zeros({dim});
  p.bv = zeros({dim});
  p.bo = zeros({dim});
  p.ln_gamma = ones({dim});
  p.ln_beta = zeros({dim});
  p.num_heads = num_heads;
  return p;
}

FeedForwardParams init_feed_forward(Rng& rng, std::int64_t dim, std::int64_t hidden, double stddev) {
  FeedForwardParams p;
  p.w1 = randn(rng, {dim, hidden}, 0.0, stddev);
  p.b1 = zeros({hidden});
  p.w2 = randn(rng, {hidden, dim}, 0.0, stddev);
  p.b2 = zeros({dim});
  p.ln_gamma = ones({dim});
  p.ln_beta = zeros({dim});
  return p;
}

SeBlockParams init_se_block(Rng& rng, std::int64_t dim, int num_heads, double stddev) {
  SeBlockParams b;
  b.intra = init_attention(rng, dim, num_heads, stddev);
  b.inter = init_attention(rng, dim, num_heads, stddev);
  b.ffn = init_feed_forward(rng, dim, 2 * dim, stddev);
  return b;
}

namespace {

// key-validity mask replicated over heads and query slots: [R,S] -> [R,H,S,S]
std::vector<std::uint8_t> expand_key_mask(const std::vector<std::uint8_t>& valid, std::int64_t r,
                                          std::int64_t heads, std::int64_t s) {
  std::vector<std::uint8_t> out(static_cast<std::size_t>(r * heads * s * s));
  std::size_t o = 0;
  for (std::int64_t ri = 0; ri < r; ++ri) {
    const std::uint8_t* row = valid.data() + ri * s;
    for (std::int64_t rep = 0; rep < heads * s; ++rep) {
      for (std::int64_t k = 0; k < s; ++k) out[o++] = row[k];
    }
  }
  return out;
}

}  // namespace

Tensor attention_over_slots(Tape& tape, const Tensor& x, const std::vector<std::uint8_t>& valid,
                            const AttentionParams& params) {
  if (x.rank() != 3) throw std::invalid_argument("attention_over_slots expects [R,S,dim]");
  const std::int64_t r = x.extent(0);
  const std::int64_t s = x.extent(1);
  const std::int64_t dim = x.extent(2);
  params.validate(dim);
  if (static_cast<std::int64_t>(valid.size()) != r * s) {
    throw std::invalid_argument("attention mask must have one entry per slot");
  }
  const std::int64_t heads = params.num_heads;
  const std::int64_t hd = dim / heads;

  Tensor ln = layer_norm(tape, x, params.ln_gamma, params.ln_beta);
  auto split_heads = [&](const Tensor& t) {
    return transpose(tape, reshape(tape, t, {r, s, heads, hd}), 1, 2);  // [R,H,S,hd]
  };
  Tensor q = split_heads(add(tape, matmul(tape, ln, params.wq), params.bq));
  Tensor k = split_heads(add(tape, matmul(tape, ln, params.wk), params.bk));
  Tensor v = split_heads(add(tape, matmul(tape, ln, params.wv), params.bv));

  Tensor scores = mul_scalar(tape, matmul(tape, q, transpose(tape, k, 2, 3)), 1.0 / std::sqrt(static_cast<double>(hd)));
  Tensor probs = masked_softmax_last(tape, scores, expand_key_mask(valid, r, heads, s));
  Tensor ctx = reshape(tape, transpose(tape, matmul(tape, probs, v), 1, 2), {r, s, dim});
  Tensor proj = add(tape, matmul(tape, ctx, params.wo), params.bo);

  // invalid query slots contribute nothing; with every slot of a group
  // masked this reduces the whole group to the residual input
  Tensor qmask = expand_from_prefix(tape, mask_tensor(valid, {r, s}), {r, s, dim});
  return add(tape, x, mul(tape, proj, qmask));
}

Tensor intra_view_attention(Tape& tape, const Tensor& f, const std::vector<std::uint8_t>& valid,
                            const AttentionParams& params) {
  if (f.rank() != 4) throw std::invalid_argument("intra_view_attention expects [B,V,N,dim]");
  const std::int64_t b = f.extent(0);
  const std::int64_t v = f.extent(1);
  const std::int64_t n = f.extent(2);
  const std::int64_t dim = f.extent(3);
  Tensor flat = reshape(tape, f, {b * v, n, dim});
  Tensor out = attention_over_slots(tape, flat, valid, params);
  return reshape(tape, out, f.shape);
}

Tensor inter_view_attention(Tape& tape, const Tensor& f, const std::vector<std::uint8_t>& valid,
                            const AttentionParams& params) {
  if (f.rank() != 4) throw std::invalid_argument("inter_view_attention expects [B,V,N,dim]");
  const std::int64_t b = f.extent(0);
  const std::int64_t v = f.extent(1);
  const std::int64_t n = f.extent(2);
  const std::int64_t dim = f.extent(3);
  if (static_cast<std::int64_t>(valid.size()) != b * v * n) {
    throw std::invalid_argument("inter_view_attention mask size mismatch");
  }
  // group across views per patch index
  Tensor grouped = reshape(tape, transpose(tape, f, 1, 2), {b * n, v, dim});
  std::vector<std::uint8_t> gmask(valid.size());
  for (std::int64_t bi = 0; bi < b; ++bi) {
    for (std::int64_t ni = 0; ni < n; ++ni) {
      for (std::int64_t vi = 0; vi < v; ++vi) {
        gmask[static_cast<std::size_t>((bi * n + ni) * v + vi)] =
            valid[static_cast<std::size_t>((bi * v + vi) * n + ni)];
      }
    }
  }
  Tensor out = attention_over_slots(tape, grouped, gmask, params);
  return transpose(tape, reshape(tape, out, {b, n, v, dim}), 1, 2);
}

Tensor feed_forward(Tape& tape, const Tensor& x, const std::vector<std::uint8_t>& valid,
                    const FeedForwardParams& params) {
  const std::int64_t dim = x.extent(-1);
  const std::int64_t rows = x.size() / dim;
  if (static_cast<std::int64_t>(valid.size()) != rows) {
    throw std::invalid_argument("feed_forward mask size mismatch");
  }
  Tensor ln = layer_norm(tape, x, params.ln_gamma, params.ln_beta);
  Tensor h = gelu(tape, add(tape, matmul(tape, reshape(tape, ln, {rows, dim}), params.w1), params.b1));
  Tensor o = reshape(tape, add(tape, matmul(tape, h, params.w2), params.b2), x.shape);
  Shape prefix(x.shape.begin(), x.shape.end() - 1);
  Tensor mask = expand_from_prefix(tape, mask_tensor(valid, prefix), x.shape);
  return add(tape, x, mul(tape, o, mask));
}

Tensor se_block(Tape& tape, const Tensor& f, const std::vector<std::uint8_t>& valid, const SeBlockParams& params) {
  Tensor x = intra_view_attention(tape, f, valid, params.intra);
  x = inter_view_attention(tape, x, valid, params.inter);
  return feed_forward(tape, x, valid, params.ffn);
}

Tensor joint_attention(Tape& tape, const Tensor& f, const std::vector<std::uint8_t>& valid,
                       const AttentionParams& params) {
  if (f.rank() != 4) throw std::invalid_argument("joint_attention expects [B,V,N,dim]");
  const std::int64_t b = f.extent(0);
  const std::int64_t vn = f.extent(1) * f.extent(2);
  const std::int64_t dim = f.extent(3);
  Tensor flat = reshape(tape, f, {b, vn, dim});
  Tensor out = attention_over_slots(tape, flat, valid, params);
  return reshape(tape, out, f.shape);
}

double flops_estimate(std::int64_t views, std::int64_t patches, std::int64_t dim, AttentionMode mode) {
  if (views <= 0 || patches <= 0 || dim <= 0) throw std::invalid_argument("flops_estimate extents must be positive");
  auto score_entries = [](std::int64_t slots, std::int64_t groups) -> double {
    if (slots <= 1) return 0.0;  // single-slot softmax is the identity
    return static_cast<double>(groups) * static_cast<double>(slots) * static_cast<double>(slots);
  };
  double entries = 0.0;
  switch (mode) {
    case AttentionMode::divided:
      entries = score_entries(patches, views) + score_entries(views, patches);
      break;
    case AttentionMode::joint:
      entries = score_entries(views * patches, 1);
      break;
  }
  return 2.0 * entries * static_cast<double>(dim);  // score stage + mix stage
}

}  // namespace g3dk
