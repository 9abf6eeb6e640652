#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "g3dk/posenc.hpp"

namespace g3dk {

/// Flat key=value run configuration. Every key has a default; unknown keys
/// are errors, so a file either yields a full config or a keyed error.
struct RunConfig {
  PosEncConfig posenc;  // posenc.dim/.num_freqs/.coord_scale/.pool_kernel/.ray_mlp_hidden

  int se_blocks = 2;  // se.blocks
  int se_heads = 4;   // se.heads

  double recon_alpha = 0.2;              // recon.alpha
  std::string recon_reg_sign = "reward"; // recon.reg_sign: reward|paper
  int recon_decoder_blocks = 1;          // recon.decoder_blocks

  double lambda_g = 1.0;  // loss.lambda_g
  double lambda_r = 0.3;  // loss.lambda_r
  double lambda_l = 1.0;  // loss.lambda_l
  double tau = 0.07;      // loss.tau

  int patch_size = 8;     // model.patch_size
  int fusion_blocks = 2;  // model.fusion_blocks

  double lr = 3e-3;            // train.lr
  std::int64_t steps = 1600;   // train.steps
  int batch_size = 4;          // train.batch_size
  double warmup_ratio = 0.05;  // train.warmup_ratio
  double weight_decay = 0.0;   // train.weight_decay
  std::uint64_t seed = 7;      // train.seed

  int views = 4;                // data.views
  int image_size = 96;          // data.image_size
  int num_objects = 8;          // data.num_objects
  double room_extent = 6.0;     // data.room_extent
  double jitter_sigma_c = 0.05; // data.jitter_sigma_c (meters)
  double jitter_sigma_s = 0.10; // data.jitter_sigma_s (log-scale)

  void validate() const;
};

/// Parses config text; throws std::runtime_error naming the offending key
/// and line for unknown keys or unparseable values.
RunConfig parse_run_config(const std::string& text);

RunConfig load_run_config(const std::string& path);

/// G3DK_SEED, when set, overrides the configured seed.
void apply_env_seed(RunConfig& cfg);

/// All known keys with their compiled-in defaults, for docs and --help.
std::vector<std::pair<std::string, std::string>> config_defaults();

}  // namespace g3dk
