#include "g3dk/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <thread>

#include "g3dk/attention.hpp"
#include "g3dk/ops.hpp"
#include "g3dk/optim.hpp"
#include "g3dk/rng.hpp"

namespace g3dk {

std::string ablation_name(Ablation a) {
  switch (a) {
    case Ablation::full: return "full";
    case Ablation::no_sg: return "no-sg";
    case Ablation::no_mpe: return "no-mpe";
    case Ablation::no_attn: return "no-attn";
    case Ablation::no_lg: return "no-lg";
  }
  throw std::logic_error("bad ablation");
}

Ablation ablation_from_flag(const std::string& flag) {
  if (flag.empty() || flag == "none" || flag == "full") return Ablation::full;
  if (flag == "sg" || flag == "no-sg") return Ablation::no_sg;
  if (flag == "mpe" || flag == "no-mpe") return Ablation::no_mpe;
  if (flag == "attn" || flag == "no-attn") return Ablation::no_attn;
  if (flag == "lg" || flag == "no-lg") return Ablation::no_lg;
  throw std::invalid_argument("unknown ablation '" + flag + "' (expected sg|mpe|attn|lg)");
}

const TokenVocab& TokenVocab::standard() {
  static const TokenVocab vocab = [] {
    TokenVocab v;
    for (const char* c : category_names()) v.tokens.emplace_back(c);
    for (const char* w : {"the", "of", "to", "from", "and", "in", "front", "behind", "left", "right", "nearest",
                          "farthest", "between", "closest", "wall"}) {
      v.tokens.emplace_back(w);
    }
    v.tokens.emplace_back("<ground>");
    return v;
  }();
  return vocab;
}

std::int64_t TokenVocab::id(const std::string& token) const {
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] == token) return static_cast<std::int64_t>(i);
  }
  throw std::runtime_error("query token '" + token + "' is not in the vocabulary");
}

namespace {

constexpr double kInitStd = 0.05;
constexpr std::int64_t kMaxQueryTokens = 16;  // query words plus the <ground> slot

void add_attention_params(ParamStore& ps, const std::string& p, Rng& rng, std::int64_t dim) {
  ps.add(p + ".wq", randn(rng, {dim, dim}, 0.0, kInitStd));
  ps.add(p + ".bq", zeros({dim}));
  ps.add(p + ".wk", randn(rng, {dim, dim}, 0.0, kInitStd));
  ps.add(p + ".bk", zeros({dim}));
  ps.add(p + ".wv", randn(rng, {dim, dim}, 0.0, kInitStd));
  ps.add(p + ".bv", zeros({dim}));
  ps.add(p + ".wo", randn(rng, {dim, dim}, 0.0, kInitStd));
  ps.add(p + ".bo", zeros({dim}));
  ps.add(p + ".ln_g", ones({dim}));
  ps.add(p + ".ln_b", zeros({dim}));
}

void add_ffn_params(ParamStore& ps, const std::string& p, Rng& rng, std::int64_t dim) {
  const std::int64_t hidden = 2 * dim;
  ps.add(p + ".w1", randn(rng, {dim, hidden}, 0.0, kInitStd));
  ps.add(p + ".b1", zeros({hidden}));
  ps.add(p + ".w2", randn(rng, {hidden, dim}, 0.0, kInitStd));
  ps.add(p + ".b2", zeros({dim}));
  ps.add(p + ".ln_g", ones({dim}));
  ps.add(p + ".ln_b", zeros({dim}));
}

AttentionParams attention_view(const ParamStore& ps, const std::string& p, int heads) {
  AttentionParams a;
  a.wq = *ps.find(p + ".wq");
  a.bq = *ps.find(p + ".bq");
  a.wk = *ps.find(p + ".wk");
  a.bk = *ps.find(p + ".bk");
  a.wv = *ps.find(p + ".wv");
  a.bv = *ps.find(p + ".bv");
  a.wo = *ps.find(p + ".wo");
  a.bo = *ps.find(p + ".bo");
  a.ln_gamma = *ps.find(p + ".ln_g");
  a.ln_beta = *ps.find(p + ".ln_b");
  a.num_heads = heads;
  return a;
}

FeedForwardParams ffn_view(const ParamStore& ps, const std::string& p) {
  FeedForwardParams f;
  f.w1 = *ps.find(p + ".w1");
  f.b1 = *ps.find(p + ".b1");
  f.w2 = *ps.find(p + ".w2");
  f.b2 = *ps.find(p + ".b2");
  f.ln_gamma = *ps.find(p + ".ln_g");
  f.ln_beta = *ps.find(p + ".ln_b");
  return f;
}

SeBlockParams se_view(const ParamStore& ps, const std::string& p, int heads) {
  SeBlockParams b;
  b.intra = attention_view(ps, p + ".intra", heads);
  b.inter = attention_view(ps, p + ".inter", heads);
  b.ffn = ffn_view(ps, p + ".ffn");
  return b;
}

template <typename T>
void shuffle_indices(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace

ToyGrounder::ToyGrounder(const RunConfig& cfg, Ablation ablation, bool training)
    : cfg_(cfg), ablation_(ablation) {
  cfg_.validate();
  const std::int64_t dim = cfg_.posenc.dim;
  Rng rng(mix_seed(cfg_.seed, "init"));

  const std::int64_t patch_in = static_cast<std::int64_t>(cfg_.patch_size) * cfg_.patch_size * 3;
  params_.add("embed.patch.w", randn(rng, {patch_in, dim}, 0.0, kInitStd));
  params_.add("embed.patch.b", zeros({dim}));

  params_.add("posenc.psi.w1", randn(rng, {3, cfg_.posenc.ray_mlp_hidden}, 0.0, kInitStd));
  params_.add("posenc.psi.b1", zeros({cfg_.posenc.ray_mlp_hidden}));
  params_.add("posenc.psi.w2", randn(rng, {cfg_.posenc.ray_mlp_hidden, dim}, 0.0, kInitStd));
  params_.add("posenc.psi.b2", zeros({dim}));

  for (int i = 0; i < cfg_.se_blocks; ++i) {
    const std::string p = "se." + std::to_string(i);
    add_attention_params(params_, p + ".intra", rng, dim);
    add_attention_params(params_, p + ".inter", rng, dim);
    add_ffn_params(params_, p + ".ffn", rng, dim);
  }

  params_.add("tokens.embed", randn(rng, {TokenVocab::standard().size(), dim}, 0.0, kInitStd));
  params_.add("tokens.pos", randn(rng, {kMaxQueryTokens, dim}, 0.0, kInitStd));

  for (int i = 0; i < cfg_.fusion_blocks; ++i) {
    const std::string p = "fusion." + std::to_string(i);
    add_attention_params(params_, p + ".attn", rng, dim);
    add_ffn_params(params_, p + ".ffn", rng, dim);
  }

  params_.add("final.ln_g", ones({dim}));
  params_.add("final.ln_b", zeros({dim}));
  params_.add("head.category.w", randn(rng, {dim, kNumCategories}, 0.0, kInitStd));
  params_.add("head.category.b", zeros({kNumCategories}));

  has_recon_ = training && ablation_ != Ablation::no_sg;
  if (has_recon_) {
    params_.add("recon.proj.w", randn(rng, {dim, dim}, 0.0, kInitStd));
    params_.add("recon.proj.b", zeros({dim}));
    for (int i = 0; i < cfg_.recon_decoder_blocks; ++i) {
      const std::string p = "recon." + std::to_string(i);
      add_attention_params(params_, p + ".intra", rng, dim);
      add_attention_params(params_, p + ".inter", rng, dim);
      add_ffn_params(params_, p + ".ffn", rng, dim);
    }
    // z-channel biases start at a scene prior so the 1/z-normalized
    // pointmap loss is well conditioned from the first step
    params_.add("recon.head.local.w", randn(rng, {dim, 4}, 0.0, kInitStd));
    params_.add("recon.head.local.b", Tensor{Shape{4}, std::vector<double>{0.0, 0.0, 2.5, 0.0}});
    params_.add("recon.head.global.w", randn(rng, {dim, 4}, 0.0, kInitStd));
    params_.add("recon.head.global.b", Tensor{Shape{4}, std::vector<double>{0.0, 0.0, 1.0, 0.0}});
  }
}

void ToyGrounder::watch_params(Tape& tape) {
  for (auto& [name, t] : params_.items()) {
    t.node = -1;
    tape.watch(t);
  }
}

void ToyGrounder::load_params(const ParamStore& ckpt) {
  for (auto& [name, t] : params_.items()) {
    const Tensor* src = ckpt.find(name);
    if (!src) throw CheckpointMismatchError("checkpoint is missing parameter '" + name + "'");
    if (src->shape != t.shape) {
      throw CheckpointMismatchError("checkpoint parameter '" + name + "' has shape " + shape_str(src->shape) +
                                    ", model expects " + shape_str(t.shape));
    }
    t.data = src->data;
  }
}

PatchGrid ToyGrounder::encode_views(Tape& tape, const std::vector<CameraFrame>& frames) const {
  if (frames.empty()) throw std::invalid_argument("encode_views: no frames");
  const int ps = cfg_.patch_size;
  const std::int64_t v = static_cast<std::int64_t>(frames.size());
  for (const auto& f : frames) f.validate();
  const int width = frames[0].width();
  const int height = frames[0].height();
  for (const auto& f : frames) {
    if (f.width() != width || f.height() != height) {
      throw std::invalid_argument("encode_views: frames disagree on extents");
    }
  }

  PatchGrid grid;
  grid.patch_size = ps;
  grid.grid_h = (height + ps - 1) / ps;
  grid.grid_w = (width + ps - 1) / ps;
  const std::int64_t n = static_cast<std::int64_t>(grid.grid_h) * grid.grid_w;
  const std::int64_t dim = cfg_.posenc.dim;
  grid.world_coords = Tensor{Shape{1, v, n, 3}};
  grid.ray_dirs = Tensor{Shape{1, v, n, 3}};
  grid.valid.assign(static_cast<std::size_t>(v * n), 0);
  grid.center_u.assign(static_cast<std::size_t>(v * n), 0.0);
  grid.center_v.assign(static_cast<std::size_t>(v * n), 0.0);

  auto maps = std::make_shared<PixelPointMaps>();
  maps->width = width;
  maps->height = height;
  maps->points.resize(static_cast<std::size_t>(v));
  maps->valid.resize(static_cast<std::size_t>(v));

  const std::int64_t patch_in = static_cast<std::int64_t>(ps) * ps * 3;
  Tensor patches{Shape{v * n, patch_in}};

  for (std::int64_t vi = 0; vi < v; ++vi) {
    const CameraFrame& frame = frames[static_cast<std::size_t>(vi)];
    grid.cameras.push_back({frame.intrinsics, frame.extrinsics});

    auto& pix_pts = maps->points[static_cast<std::size_t>(vi)];
    auto& pix_valid = maps->valid[static_cast<std::size_t>(vi)];
    pix_pts.resize(static_cast<std::size_t>(width) * height);
    pix_valid.assign(static_cast<std::size_t>(width) * height, 0);
    for (int y = 0; y < height; ++y) {
      for (int x = 0; x < width; ++x) {
        if (auto p = backproject_pixel(frame, x, y)) {
          pix_pts[static_cast<std::size_t>(y) * width + x] = *p;
          pix_valid[static_cast<std::size_t>(y) * width + x] = 1;
        }
      }
    }

    const PatchGridPoints pmw = patch_mean_world(frame, ps);
    const PatchGridRays pcr = patch_center_ray(frame, ps);
    int view_valid = 0;
    for (std::int64_t ni = 0; ni < n; ++ni) {
      const std::int64_t flat = vi * n + ni;
      if (pmw.valid[static_cast<std::size_t>(ni)]) {
        grid.valid[static_cast<std::size_t>(flat)] = 1;
        ++view_valid;
        const Vec3 p = pmw.points[static_cast<std::size_t>(ni)];
        const Vec3 r = pcr.rays[static_cast<std::size_t>(ni)].direction;
        grid.world_coords.data[static_cast<std::size_t>(flat * 3)] = p.x;
        grid.world_coords.data[static_cast<std::size_t>(flat * 3 + 1)] = p.y;
        grid.world_coords.data[static_cast<std::size_t>(flat * 3 + 2)] = p.z;
        grid.ray_dirs.data[static_cast<std::size_t>(flat * 3)] = r.x;
        grid.ray_dirs.data[static_cast<std::size_t>(flat * 3 + 1)] = r.y;
        grid.ray_dirs.data[static_cast<std::size_t>(flat * 3 + 2)] = r.z;
      }
      // patch center pixel coordinate = mean in-image pixel index
      const int gi = static_cast<int>(ni) / grid.grid_w;
      const int gj = static_cast<int>(ni) % grid.grid_w;
      const int h_span = std::min(ps, height - gi * ps);
      const int w_span = std::min(ps, width - gj * ps);
      grid.center_u[static_cast<std::size_t>(flat)] = gj * ps + (w_span - 1) / 2.0;
      grid.center_v[static_cast<std::size_t>(flat)] = gi * ps + (h_span - 1) / 2.0;

      // patch pixels, zero-padded outside the image
      double* dst = patches.data.data() + flat * patch_in;
      for (int dy = 0; dy < ps; ++dy) {
        const int y = gi * ps + dy;
        for (int dx = 0; dx < ps; ++dx) {
          const int x = gj * ps + dx;
          if (y < height && x < width) {
            const auto pix = static_cast<std::size_t>(y) * width + x;
            dst[(dy * ps + dx) * 3] = frame.color[pix * 3];
            dst[(dy * ps + dx) * 3 + 1] = frame.color[pix * 3 + 1];
            dst[(dy * ps + dx) * 3 + 2] = frame.color[pix * 3 + 2];
          }
        }
      }
    }
    if (view_valid == 0) {
      throw std::runtime_error("encode_views: view " + std::to_string(vi) + " has no valid patches");
    }
  }
  grid.pixel_points = maps;

  Tensor flat_feats = add(tape, matmul(tape, patches, *params_.find("embed.patch.w")), *params_.find("embed.patch.b"));
  Tensor masked = mul(tape, flat_feats,
                      expand_from_prefix(tape, mask_tensor(grid.valid, {v * n}), {v * n, dim}));
  grid.features = reshape(tape, masked, {1, v, n, dim});
  return grid;
}

ToyGrounder::ForwardResult ToyGrounder::forward(Tape& tape, const GroundingEpisode& episode, bool train_mode) {
  const std::int64_t dim = cfg_.posenc.dim;
  const auto& vocab = TokenVocab::standard();

  PatchGrid grid = encode_views(tape, episode.frames);
  Tensor pre_fusion = grid.features;
  std::vector<std::uint8_t> pre_fusion_valid = grid.valid;

  // multi-level position encoding (Eq. 4 fusion); the ablation keeps the
  // pooling but strips both position codes
  PatchGrid fused;
  if (ablation_ == Ablation::no_mpe) {
    PosEncConfig stripped = cfg_.posenc;
    stripped.num_freqs = 0;
    RayMlpParams zero_psi;
    zero_psi.w1 = zeros({3, cfg_.posenc.ray_mlp_hidden});
    zero_psi.b1 = zeros({cfg_.posenc.ray_mlp_hidden});
    zero_psi.w2 = zeros({cfg_.posenc.ray_mlp_hidden, dim});
    zero_psi.b2 = zeros({dim});
    fused = fuse_multilevel(tape, grid, stripped, zero_psi);
  } else {
    RayMlpParams psi;
    psi.w1 = *params_.find("posenc.psi.w1");
    psi.b1 = *params_.find("posenc.psi.b1");
    psi.w2 = *params_.find("posenc.psi.w2");
    psi.b2 = *params_.find("posenc.psi.b2");
    fused = fuse_multilevel(tape, grid, cfg_.posenc, psi);
  }

  if (ablation_ != Ablation::no_attn) {
    for (int i = 0; i < cfg_.se_blocks; ++i) {
      fused.features = se_block(tape, fused.features, fused.valid, se_view(params_, "se." + std::to_string(i), cfg_.se_heads));
    }
  }

  // sequence = [visual tokens; query tokens; <ground>]
  const std::int64_t vn = fused.views() * fused.patches();
  Tensor visual = reshape(tape, fused.features, {1, vn, dim});
  std::vector<std::int64_t> token_ids;
  for (const auto& tok : episode.query.tokens) token_ids.push_back(vocab.id(tok));
  token_ids.push_back(vocab.ground_id());
  const auto n_tok = static_cast<std::int64_t>(token_ids.size());
  if (n_tok > kMaxQueryTokens) throw std::runtime_error("query exceeds the maximum token count");
  // word order matters ("the chair left of the table" vs its converse), so
  // token embeddings carry learned position codes
  std::vector<std::int64_t> positions(token_ids.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<std::int64_t>(i);
  Tensor tok_embed = add(tape, gather(tape, *params_.find("tokens.embed"), token_ids),
                         gather(tape, *params_.find("tokens.pos"), positions));
  Tensor tokens3 = reshape(tape, tok_embed, {1, n_tok, dim});
  const Tensor parts[2] = {visual, tokens3};
  Tensor seq = concat(tape, parts, 1);
  const std::int64_t s_len = seq.extent(1);
  std::vector<std::uint8_t> seq_valid(static_cast<std::size_t>(s_len), 1);
  std::copy(fused.valid.begin(), fused.valid.end(), seq_valid.begin());

  for (int i = 0; i < cfg_.fusion_blocks; ++i) {
    const std::string p = "fusion." + std::to_string(i);
    seq = attention_over_slots(tape, seq, seq_valid, attention_view(params_, p + ".attn", cfg_.se_heads));
    seq = feed_forward(tape, seq, seq_valid, ffn_view(params_, p + ".ffn"));
  }
  Tensor h = reshape(tape, slice(tape, seq, 1, s_len - 1, 1), {dim});
  h = layer_norm(tape, h, *params_.find("final.ln_g"), *params_.find("final.ln_b"));

  // pooled object features from the post-SE grid
  ForwardResult res;
  std::vector<Tensor> obj_feats;
  std::int64_t target_index = -1;
  for (std::size_t i = 0; i < episode.proposals.size(); ++i) {
    const auto& prop = episode.proposals[i];
    PooledObjectFeature pooled = pool_object_feature(tape, fused, prop.box, cfg_.posenc);
    if (pooled.used_fallback) ++res.output.fallback_pools;
    obj_feats.push_back(pooled.feature);
    res.output.proposal_ids.push_back(prop.id);
    if (prop.id == episode.target_id) target_index = static_cast<std::int64_t>(i);
  }
  if (target_index < 0) throw std::runtime_error("episode target is not among the proposals");

  Tensor cat_logits = reshape(
      tape,
      add(tape, matmul(tape, reshape(tape, h, {1, dim}), *params_.find("head.category.w")),
          *params_.find("head.category.b")),
      {kNumCategories});

  Tensor sims;
  if (train_mode) {
    InfoNceResult nce = infonce_ground(tape, h, obj_feats, target_index, cfg_.tau);
    sims = nce.similarities;
    res.loss_ground = nce.loss;
    const int gt_category = episode.proposals[static_cast<std::size_t>(target_index)].gt_category;
    res.loss_lang = language_loss(tape, cat_logits, gt_category);

    if (has_recon_ && ablation_ != Ablation::no_sg) {
      ReconDecoderParams rp;
      rp.proj_w = *params_.find("recon.proj.w");
      rp.proj_b = *params_.find("recon.proj.b");
      for (int i = 0; i < cfg_.recon_decoder_blocks; ++i) {
        rp.blocks.push_back(se_view(params_, "recon." + std::to_string(i), cfg_.se_heads));
      }
      rp.head_local_w = *params_.find("recon.head.local.w");
      rp.head_local_b = *params_.find("recon.head.local.b");
      rp.head_global_w = *params_.find("recon.head.global.w");
      rp.head_global_b = *params_.find("recon.head.global.b");
      ++recon_forwards_;
      PointMapPrediction pred = recon_decoder(tape, pre_fusion, pre_fusion_valid, rp);
      GtPointMaps gt = gt_pointmaps_from_frames(episode.frames, cfg_.patch_size);
      ReconConfig rc;
      rc.alpha = cfg_.recon_alpha;
      rc.reward_sign = cfg_.recon_reg_sign == "reward";
      rc.decoder_blocks = cfg_.recon_decoder_blocks;
      res.loss_recon = recon_loss_total(tape, pred, gt, rc);
      res.has_recon = true;
    }

    LossWeights w;
    w.lambda_g = cfg_.lambda_g;
    w.lambda_r = cfg_.lambda_r;
    w.lambda_l = ablation_ == Ablation::no_lg ? 0.0 : cfg_.lambda_l;
    res.loss_total = total_loss(tape, res.loss_ground, res.has_recon ? &res.loss_recon : nullptr, res.loss_lang, w);
  } else {
    sims = cosine_similarities(tape, h, obj_feats);
  }

  res.output.ground_state = h.data;
  res.output.similarities = sims.data;
  res.output.category_logits = cat_logits.data;
  res.output.object_features.reserve(obj_feats.size() * static_cast<std::size_t>(dim));
  for (const auto& f : obj_feats) {
    res.output.object_features.insert(res.output.object_features.end(), f.data.begin(), f.data.end());
  }
  res.output.predicted_id = predict_target(res.output.similarities, res.output.proposal_ids);
  res.output.predicted_category = 0;
  for (int c = 1; c < kNumCategories; ++c) {
    if (res.output.category_logits[static_cast<std::size_t>(c)] >
        res.output.category_logits[static_cast<std::size_t>(res.output.predicted_category)]) {
      res.output.predicted_category = c;
    }
  }
  return res;
}

GroundingOutput ToyGrounder::infer(const GroundingEpisode& episode) {
  Tape tape(false);
  return forward(tape, episode, false).output;
}

namespace {

struct EpisodeGrads {
  std::vector<std::vector<double>> grads;  // aligned with the param store
  double l_ground = 0.0, l_recon = 0.0, l_lang = 0.0, total = 0.0;
  bool has_recon = false;
};

EpisodeGrads run_training_episode(ToyGrounder& model, const GroundingEpisode& ep) {
  Tape tape;
  model.watch_params(tape);
  auto fw = model.forward(tape, ep, true);
  tape.backward(fw.loss_total);
  EpisodeGrads out;
  out.grads.reserve(model.params().count());
  for (auto& [name, t] : model.params().items()) out.grads.push_back(tape.grad(t));
  out.l_ground = fw.loss_ground.item();
  out.l_lang = fw.loss_lang.item();
  if (fw.has_recon) {
    out.l_recon = fw.loss_recon.item();
    out.has_recon = true;
  }
  out.total = fw.loss_total.item();
  return out;
}

}  // namespace

TrainResult train_model(ToyGrounder& model, const std::vector<GroundingEpisode>& dataset, const RunConfig& cfg,
                        int workers) {
  if (dataset.empty()) throw std::invalid_argument("train_model: empty dataset");
  if (workers < 1) throw std::invalid_argument("train_model: workers must be >= 1");
  workers = std::min(workers, cfg.batch_size);
  TrainResult result;
  auto& store = model.params();

  AdamConfig adam;
  adam.lr = cfg.lr;
  adam.weight_decay = cfg.weight_decay;
  AdamState state;

  std::vector<Tensor*> param_ptrs;
  for (auto& [name, t] : store.items()) param_ptrs.push_back(&t);
  std::vector<std::vector<double>> accum(param_ptrs.size());
  for (std::size_t i = 0; i < param_ptrs.size(); ++i) accum[i].assign(param_ptrs[i]->data.size(), 0.0);

  // worker clones share nothing; parameters are copied in before each step
  std::vector<std::unique_ptr<ToyGrounder>> clones;
  for (int w = 1; w < workers; ++w) {
    // the training flag only controls recon-branch allocation, so cloning
    // with has_recon_branch() reproduces the master's parameter layout
    clones.push_back(std::make_unique<ToyGrounder>(model.config(), model.ablation(), model.has_recon_branch()));
  }

  Rng order_rng(mix_seed(cfg.seed, "order"));
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();  // trigger a shuffle at the first step

  for (std::int64_t step = 0; step < cfg.steps; ++step) {
    for (auto& a : accum) std::fill(a.begin(), a.end(), 0.0);
    StepLog log;
    log.step = step;

    try {
      std::vector<const GroundingEpisode*> batch;
      for (int b = 0; b < cfg.batch_size; ++b) {
        if (cursor >= order.size()) {
          shuffle_indices(order, order_rng);
          cursor = 0;
        }
        batch.push_back(&dataset[order[cursor++]]);
      }

      std::vector<EpisodeGrads> results(batch.size());
      if (workers == 1) {
        for (std::size_t b = 0; b < batch.size(); ++b) results[b] = run_training_episode(model, *batch[b]);
      } else {
        for (auto& clone : clones) {
          for (std::size_t i = 0; i < param_ptrs.size(); ++i) {
            clone->params().items()[i].second.data = param_ptrs[i]->data;
          }
        }
        std::vector<std::thread> threads;
        std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
        for (int w = 0; w < workers; ++w) {
          threads.emplace_back([&, w]() {
            ToyGrounder& m = w == 0 ? model : *clones[static_cast<std::size_t>(w - 1)];
            try {
              for (std::size_t b = static_cast<std::size_t>(w); b < batch.size(); b += static_cast<std::size_t>(workers)) {
                results[b] = run_training_episode(m, *batch[b]);
              }
            } catch (...) {
              errors[static_cast<std::size_t>(w)] = std::current_exception();
            }
          });
        }
        for (auto& t : threads) t.join();
        for (auto& e : errors) {
          if (e) std::rethrow_exception(e);
        }
      }

      // fixed-order reduction keeps multi-worker runs bit-identical to
      // the sequential path
      for (const auto& r : results) {
        for (std::size_t i = 0; i < accum.size(); ++i) {
          for (std::size_t j = 0; j < accum[i].size(); ++j) accum[i][j] += r.grads[i][j];
        }
        log.l_ground += r.l_ground;
        log.l_lang += r.l_lang;
        if (r.has_recon) {
          log.l_recon += r.l_recon;
          log.has_recon = true;
        }
        log.total += r.total;
      }

      const double inv_batch = 1.0 / cfg.batch_size;
      for (auto& a : accum) {
        for (auto& g : a) g *= inv_batch;
      }
      std::vector<const std::vector<double>*> grad_ptrs;
      for (const auto& a : accum) grad_ptrs.push_back(&a);
      adam_step(state, adam, param_ptrs, grad_ptrs, warmup_cosine_lr(step, cfg.steps, cfg.warmup_ratio));
    } catch (const std::exception& e) {
      throw std::runtime_error("training aborted at step " + std::to_string(step) + ": " + e.what());
    }

    log.l_ground /= cfg.batch_size;
    log.l_recon /= cfg.batch_size;
    log.l_lang /= cfg.batch_size;
    log.total /= cfg.batch_size;
    result.log.push_back(log);
  }
  return result;
}

std::string error_type_name(ErrorType e) {
  switch (e) {
    case ErrorType::correct: return "correct";
    case ErrorType::spatial: return "spatial";
    case ErrorType::semantic: return "semantic";
    case ErrorType::detection: return "detection";
    case ErrorType::other: return "other";
  }
  throw std::logic_error("bad error type");
}

ErrorType classify_error(const GroundingEpisode& episode, const GroundingOutput& output) {
  const Aabb gt_box = episode.scene.object_by_id(episode.target_id).box;
  const ObjectProposal* pred = nullptr;
  for (const auto& p : episode.proposals) {
    if (p.id == output.predicted_id) pred = &p;
  }
  if (!pred) return ErrorType::other;
  const double iou = aabb_iou(pred->box, gt_box);
  if (iou >= 0.25) return ErrorType::correct;
  if (pred->id == episode.target_id) return ErrorType::detection;
  const int target_cat = episode.scene.object_by_id(episode.target_id).category;
  if (pred->gt_category != target_cat) return ErrorType::semantic;
  return ErrorType::spatial;
}

double MetricsReport::accuracy(const Bucket& b, std::size_t t_idx) const {
  if (b.episodes == 0) return 0.0;
  return static_cast<double>(b.hits[t_idx]) / b.episodes;
}

std::vector<std::array<std::string, 3>> MetricsReport::rows() const {
  std::vector<std::array<std::string, 3>> out;
  char buf[64];
  auto emit = [&](const std::string& subset, const Bucket& b) {
    for (std::size_t t = 0; t < thresholds.size(); ++t) {
      std::snprintf(buf, sizeof(buf), "acc@%g", thresholds[t]);
      const std::string metric = buf;
      std::snprintf(buf, sizeof(buf), "%.6f", accuracy(b, t));
      out.push_back({subset, metric, buf});
    }
    std::snprintf(buf, sizeof(buf), "%.6f", b.episodes ? static_cast<double>(b.category_correct) / b.episodes : 0.0);
    out.push_back({subset, "category_acc", buf});
    out.push_back({subset, "episodes", std::to_string(b.episodes)});
  };
  emit("Overall", overall);
  emit("Unique", unique);
  emit("Multiple", multiple);
  for (int e = 0; e < 5; ++e) {
    out.push_back({"Overall", "errors." + error_type_name(static_cast<ErrorType>(e)),
                   std::to_string(error_counts[static_cast<std::size_t>(e)])});
  }
  return out;
}

MetricsReport evaluate_model(ToyGrounder& model, const std::vector<GroundingEpisode>& dataset,
                             std::span<const double> thresholds) {
  return evaluate_with(
      dataset, [&model](const GroundingEpisode& ep) { return model.infer(ep); }, thresholds);
}

GroundingOutput oracle_stub_predict(const GroundingEpisode& episode) {
  GroundingOutput out;
  for (const auto& p : episode.proposals) {
    out.proposal_ids.push_back(p.id);
    out.similarities.push_back(p.id == episode.target_id ? 1.0 : 0.0);
  }
  out.predicted_id = episode.target_id;
  out.predicted_category = episode.scene.object_by_id(episode.target_id).category;
  out.category_logits.assign(kNumCategories, 0.0);
  out.category_logits[static_cast<std::size_t>(out.predicted_category)] = 1.0;
  return out;
}

GroundingOutput random_stub_predict(const GroundingEpisode& episode, std::uint64_t seed) {
  Rng rng(mix_seed(seed, "random-stub", episode.scene.id));
  GroundingOutput out;
  for (const auto& p : episode.proposals) {
    out.proposal_ids.push_back(p.id);
    out.similarities.push_back(0.0);
  }
  const auto pick = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(episode.proposals.size()) - 1));
  out.similarities[pick] = 1.0;
  out.predicted_id = episode.proposals[pick].id;
  out.predicted_category = static_cast<int>(rng.uniform_int(0, kNumCategories - 1));
  out.category_logits.assign(kNumCategories, 0.0);
  out.category_logits[static_cast<std::size_t>(out.predicted_category)] = 1.0;
  return out;
}

MetricsReport evaluate_with(const std::vector<GroundingEpisode>& dataset, const PredictFn& predict,
                            std::span<const double> thresholds) {
  for (double t : thresholds) {
    if (!(t > 0.0) || t > 1.0) throw std::invalid_argument("IoU thresholds must lie in (0,1]");
  }
  MetricsReport report;
  report.thresholds.assign(thresholds.begin(), thresholds.end());
  report.overall.hits.assign(thresholds.size(), 0);
  report.unique.hits.assign(thresholds.size(), 0);
  report.multiple.hits.assign(thresholds.size(), 0);

  for (const auto& ep : dataset) {
    const GroundingOutput out = predict(ep);
    const Aabb gt_box = ep.scene.object_by_id(ep.target_id).box;
    const ObjectProposal* pred = nullptr;
    for (const auto& p : ep.proposals) {
      if (p.id == out.predicted_id) pred = &p;
    }
    const double iou = pred ? aabb_iou(pred->box, gt_box) : 0.0;
    const int target_cat = ep.scene.object_by_id(ep.target_id).category;
    const bool is_unique = ep.scene.category_count(target_cat) == 1;
    const bool cat_ok = out.predicted_category == target_cat;

    auto tally = [&](MetricsReport::Bucket& b) {
      ++b.episodes;
      for (std::size_t t = 0; t < report.thresholds.size(); ++t) {
        if (iou >= report.thresholds[t]) ++b.hits[t];
      }
      if (cat_ok) ++b.category_correct;
    };
    tally(report.overall);
    tally(is_unique ? report.unique : report.multiple);
    ++report.error_counts[static_cast<std::size_t>(classify_error(ep, out))];
  }
  return report;
}

}  // namespace g3dk
