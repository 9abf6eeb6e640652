#include "g3dk/config.hpp"

#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

namespace g3dk {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

double parse_double(const std::string& v) {
  std::size_t pos = 0;
  const double d = std::stod(v, &pos);
  if (pos != v.size()) throw std::invalid_argument("trailing characters");
  return d;
}

std::int64_t parse_int(const std::string& v) {
  std::size_t pos = 0;
  const std::int64_t i = std::stoll(v, &pos);
  if (pos != v.size()) throw std::invalid_argument("trailing characters");
  return i;
}

std::uint64_t parse_uint(const std::string& v) {
  std::size_t pos = 0;
  const std::uint64_t i = std::stoull(v, &pos);
  if (pos != v.size()) throw std::invalid_argument("trailing characters");
  return i;
}

using Setter = std::function<void(RunConfig&, const std::string&)>;

const std::unordered_map<std::string, Setter>& setters() {
  static const std::unordered_map<std::string, Setter> table = {
      {"posenc.dim", [](RunConfig& c, const std::string& v) { c.posenc.dim = parse_int(v); }},
      {"posenc.num_freqs", [](RunConfig& c, const std::string& v) { c.posenc.num_freqs = static_cast<int>(parse_int(v)); }},
      {"posenc.coord_scale", [](RunConfig& c, const std::string& v) { c.posenc.coord_scale = parse_double(v); }},
      {"posenc.pool_kernel", [](RunConfig& c, const std::string& v) { c.posenc.pool_kernel = static_cast<int>(parse_int(v)); }},
      {"posenc.ray_mlp_hidden", [](RunConfig& c, const std::string& v) { c.posenc.ray_mlp_hidden = parse_int(v); }},
      {"se.blocks", [](RunConfig& c, const std::string& v) { c.se_blocks = static_cast<int>(parse_int(v)); }},
      {"se.heads", [](RunConfig& c, const std::string& v) { c.se_heads = static_cast<int>(parse_int(v)); }},
      {"recon.alpha", [](RunConfig& c, const std::string& v) { c.recon_alpha = parse_double(v); }},
      {"recon.reg_sign",
       [](RunConfig& c, const std::string& v) {
         if (v != "reward" && v != "paper") throw std::invalid_argument("must be 'reward' or 'paper'");
         c.recon_reg_sign = v;
       }},
      {"recon.decoder_blocks", [](RunConfig& c, const std::string& v) { c.recon_decoder_blocks = static_cast<int>(parse_int(v)); }},
      {"loss.lambda_g", [](RunConfig& c, const std::string& v) { c.lambda_g = parse_double(v); }},
      {"loss.lambda_r", [](RunConfig& c, const std::string& v) { c.lambda_r = parse_double(v); }},
      {"loss.lambda_l", [](RunConfig& c, const std::string& v) { c.lambda_l = parse_double(v); }},
      {"loss.tau", [](RunConfig& c, const std::string& v) { c.tau = parse_double(v); }},
      {"model.patch_size", [](RunConfig& c, const std::string& v) { c.patch_size = static_cast<int>(parse_int(v)); }},
      {"model.fusion_blocks", [](RunConfig& c, const std::string& v) { c.fusion_blocks = static_cast<int>(parse_int(v)); }},
      {"train.lr", [](RunConfig& c, const std::string& v) { c.lr = parse_double(v); }},
      {"train.steps", [](RunConfig& c, const std::string& v) { c.steps = parse_int(v); }},
      {"train.batch_size", [](RunConfig& c, const std::string& v) { c.batch_size = static_cast<int>(parse_int(v)); }},
      {"train.warmup_ratio", [](RunConfig& c, const std::string& v) { c.warmup_ratio = parse_double(v); }},
      {"train.weight_decay", [](RunConfig& c, const std::string& v) { c.weight_decay = parse_double(v); }},
      {"train.seed", [](RunConfig& c, const std::string& v) { c.seed = parse_uint(v); }},
      {"data.views", [](RunConfig& c, const std::string& v) { c.views = static_cast<int>(parse_int(v)); }},
      {"data.image_size", [](RunConfig& c, const std::string& v) { c.image_size = static_cast<int>(parse_int(v)); }},
      {"data.num_objects", [](RunConfig& c, const std::string& v) { c.num_objects = static_cast<int>(parse_int(v)); }},
      {"data.room_extent", [](RunConfig& c, const std::string& v) { c.room_extent = parse_double(v); }},
      {"data.jitter_sigma_c", [](RunConfig& c, const std::string& v) { c.jitter_sigma_c = parse_double(v); }},
      {"data.jitter_sigma_s", [](RunConfig& c, const std::string& v) { c.jitter_sigma_s = parse_double(v); }},
  };
  return table;
}

}  // namespace

void RunConfig::validate() const {
  posenc.validate();
  if (se_blocks < 0 || se_heads <= 0) throw std::invalid_argument("se.blocks/se.heads out of range");
  if (posenc.dim % se_heads != 0) throw std::invalid_argument("posenc.dim must be divisible by se.heads");
  if (recon_alpha < 0.0) throw std::invalid_argument("recon.alpha must be >= 0");
  if (recon_decoder_blocks < 0) throw std::invalid_argument("recon.decoder_blocks must be >= 0");
  if (lambda_g < 0.0 || lambda_r < 0.0 || lambda_l < 0.0) throw std::invalid_argument("loss weights must be >= 0");
  if (!(tau > 0.0)) throw std::invalid_argument("loss.tau must be positive");
  if (patch_size <= 0 || fusion_blocks < 0) throw std::invalid_argument("model.patch_size/fusion_blocks out of range");
  if (!(lr > 0.0) || steps <= 0 || batch_size <= 0) throw std::invalid_argument("train.lr/steps/batch_size out of range");
  if (warmup_ratio < 0.0 || warmup_ratio > 1.0) throw std::invalid_argument("train.warmup_ratio must be in [0,1]");
  if (weight_decay < 0.0) throw std::invalid_argument("train.weight_decay must be >= 0");
  if (views <= 0 || image_size <= 0 || num_objects < 2) throw std::invalid_argument("data.views/image_size/num_objects out of range");
  if (!(room_extent > 1.0)) throw std::invalid_argument("data.room_extent must exceed 1 meter");
  if (jitter_sigma_c < 0.0 || jitter_sigma_s < 0.0) throw std::invalid_argument("jitter sigmas must be >= 0");
}

RunConfig parse_run_config(const std::string& text) {
  RunConfig cfg;
  std::istringstream is(text);
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::runtime_error("config line " + std::to_string(line_no) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const auto it = setters().find(key);
    if (it == setters().end()) {
      throw std::runtime_error("config line " + std::to_string(line_no) + ": unknown key '" + key + "'");
    }
    try {
      it->second(cfg, value);
    } catch (const std::exception& e) {
      throw std::runtime_error("config line " + std::to_string(line_no) + ": invalid value for '" + key +
                               "': " + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config file: " + path);
  std::ostringstream buf;
  buf << is.rdbuf();
  return parse_run_config(buf.str());
}

void apply_env_seed(RunConfig& cfg) {
  if (const char* env = std::getenv("G3DK_SEED")) {
    cfg.seed = parse_uint(env);
  }
}

std::vector<std::pair<std::string, std::string>> config_defaults() {
  const RunConfig d;
  auto num = [](double v) {
    std::ostringstream os;
    os << v;
    return os.str();
  };
  return {
      {"posenc.dim", std::to_string(d.posenc.dim)},
      {"posenc.num_freqs", std::to_string(d.posenc.num_freqs)},
      {"posenc.coord_scale", num(d.posenc.coord_scale)},
      {"posenc.pool_kernel", std::to_string(d.posenc.pool_kernel)},
      {"posenc.ray_mlp_hidden", std::to_string(d.posenc.ray_mlp_hidden)},
      {"se.blocks", std::to_string(d.se_blocks)},
      {"se.heads", std::to_string(d.se_heads)},
      {"recon.alpha", num(d.recon_alpha)},
      {"recon.reg_sign", d.recon_reg_sign},
      {"recon.decoder_blocks", std::to_string(d.recon_decoder_blocks)},
      {"loss.lambda_g", num(d.lambda_g)},
      {"loss.lambda_r", num(d.lambda_r)},
      {"loss.lambda_l", num(d.lambda_l)},
      {"loss.tau", num(d.tau)},
      {"model.patch_size", std::to_string(d.patch_size)},
      {"model.fusion_blocks", std::to_string(d.fusion_blocks)},
      {"train.lr", num(d.lr)},
      {"train.steps", std::to_string(d.steps)},
      {"train.batch_size", std::to_string(d.batch_size)},
      {"train.warmup_ratio", num(d.warmup_ratio)},
      {"train.weight_decay", num(d.weight_decay)},
      {"train.seed", std::to_string(d.seed)},
      {"data.views", std::to_string(d.views)},
      {"data.image_size", std::to_string(d.image_size)},
      {"data.num_objects", std::to_string(d.num_objects)},
      {"data.room_extent", num(d.room_extent)},
      {"data.jitter_sigma_c", num(d.jitter_sigma_c)},
      {"data.jitter_sigma_s", num(d.jitter_sigma_s)},
  };
}

}  // namespace g3dk
