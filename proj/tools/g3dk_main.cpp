// g3dk command line: dataset generation, training, evaluation, ablations,
// gradient checks and attention benchmarks.
//
// Exit codes: 0 success, 2 I/O failure, 3 numeric failure, 4 config or
// checkpoint mismatch.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <memory>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "g3dk/attention.hpp"
#include "g3dk/checkpoint.hpp"
#include "g3dk/config.hpp"
#include "g3dk/gradcheck.hpp"
#include "g3dk/model.hpp"
#include "g3dk/ops.hpp"
#include "g3dk/rng.hpp"
#include "g3dk/synthscene.hpp"

namespace {

using namespace g3dk;

constexpr int kExitIo = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitConfig = 4;

RunConfig load_config_or_default(const std::string& path) {
  RunConfig cfg;
  if (!path.empty()) cfg = load_run_config(path);
  apply_env_seed(cfg);
  return cfg;
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  os << content;
  if (!os) throw std::runtime_error("write failed: " + path);
}

std::string train_log_csv(const TrainResult& result, bool with_recon) {
  std::string csv = with_recon ? "step,L_ground,L_recon,L_lang,total\n" : "step,L_ground,L_lang,total\n";
  char line[256];
  for (const auto& row : result.log) {
    if (with_recon) {
      std::snprintf(line, sizeof(line), "%lld,%.17g,%.17g,%.17g,%.17g\n", static_cast<long long>(row.step),
                    row.l_ground, row.l_recon, row.l_lang, row.total);
    } else {
      std::snprintf(line, sizeof(line), "%lld,%.17g,%.17g,%.17g\n", static_cast<long long>(row.step), row.l_ground,
                    row.l_lang, row.total);
    }
    csv += line;
  }
  return csv;
}

std::string metrics_csv(const MetricsReport& report, const std::string& split) {
  std::string csv = "split,subset,metric,value\n";
  for (const auto& row : report.rows()) {
    csv += split + "," + row[0] + "," + row[1] + "," + row[2] + "\n";
  }
  return csv;
}

int cmd_gen(std::uint64_t seed, int count, const std::string& out, const std::string& salt, const RunConfig& cfg) {
  DatasetGenParams params;
  params.views = cfg.views;
  params.image_size = cfg.image_size;
  params.num_objects = cfg.num_objects;
  params.room_extent = cfg.room_extent;
  DatasetSummary summary;
  const auto episodes = generate_dataset(seed, count, params, salt, &summary);
  write_dataset(out, episodes);
  std::printf("wrote %d episodes to %s (unique %d, multiple %d, skipped %d)\n", summary.episodes, out.c_str(),
              summary.unique_count, summary.multiple_count, summary.skipped);
  return 0;
}

int cmd_train(const RunConfig& cfg, const std::string& data_path, const std::string& out_ckpt,
              const std::string& log_path, const std::string& ablate_flag, int workers) {
  const Ablation ablation = ablation_from_flag(ablate_flag);
  const auto dataset = read_dataset(data_path);
  ToyGrounder model(cfg, ablation, /*training=*/true);
  std::printf("model '%s' with %lld parameters, %zu episodes\n", ablation_name(ablation).c_str(),
              static_cast<long long>(model.parameter_count()), dataset.size());
  const TrainResult result = train_model(model, dataset, cfg, workers);
  save_checkpoint(out_ckpt, model.params());
  if (!log_path.empty()) write_text_file(log_path, train_log_csv(result, model.has_recon_branch()));
  if (!result.log.empty()) {
    const auto& last = result.log.back();
    std::printf("final step %lld: L_ground %.4f L_lang %.4f total %.4f\n", static_cast<long long>(last.step),
                last.l_ground, last.l_lang, last.total);
  }
  std::printf("checkpoint written to %s\n", out_ckpt.c_str());
  return 0;
}

int cmd_eval(const RunConfig& cfg, const std::string& ckpt_path, const std::string& data_path,
             const std::string& proposals_mode, const std::string& csv_path, const std::string& ablate_flag) {
  auto dataset = read_dataset(data_path);
  if (proposals_mode == "jitter") {
    for (auto& ep : dataset) {
      ep.proposals = jitter_proposals(ep.proposals, mix_seed(cfg.seed, "eval-jitter", ep.scene.id),
                                      cfg.jitter_sigma_s, cfg.jitter_sigma_c, ep.scene.room_box());
    }
  } else if (proposals_mode != "gt") {
    throw std::invalid_argument("--proposals must be gt or jitter");
  }
  const double thresholds[2] = {0.25, 0.5};
  std::unique_ptr<ToyGrounder> model;
  PredictFn predict;
  if (ckpt_path == "oracle") {  // harness stubs bracket real checkpoints
    predict = oracle_stub_predict;
  } else if (ckpt_path == "random") {
    predict = [&cfg](const GroundingEpisode& ep) { return random_stub_predict(ep, cfg.seed); };
  } else {
    model = std::make_unique<ToyGrounder>(cfg, ablation_from_flag(ablate_flag), /*training=*/false);
    model->load_params(load_checkpoint(ckpt_path));
    predict = [&model](const GroundingEpisode& ep) { return model->infer(ep); };
  }
  const MetricsReport report = evaluate_with(dataset, predict, thresholds);
  const std::string csv = metrics_csv(report, "test");
  if (!csv_path.empty()) write_text_file(csv_path, csv);
  std::fputs(csv.c_str(), stdout);
  if (!dataset.empty()) {
    // the language head's template rendering, shown for the first episode
    const GroundingOutput sample = predict(dataset.front());
    const char* cat = category_names()[static_cast<std::size_t>(sample.predicted_category)];
    std::printf("# sample response: %s\n", render_grounding_sentence(cat).c_str());
  }
  std::printf("# error types:");
  for (int e = 0; e < 5; ++e) {
    std::printf(" %s=%d", error_type_name(static_cast<ErrorType>(e)).c_str(),
                report.error_counts[static_cast<std::size_t>(e)]);
  }
  std::printf("\n");
  return 0;
}

int cmd_ablate(const RunConfig& cfg, const std::string& data_path, const std::string& test_path,
               const std::string& csv_path) {
  const auto train_set = read_dataset(data_path);
  const auto test_set = read_dataset(test_path.empty() ? data_path : test_path);
  std::string csv = "variant,acc@0.25,acc@0.5,unique@0.25,multiple@0.25,category_acc\n";
  const double thresholds[2] = {0.25, 0.5};
  for (const Ablation a : {Ablation::full, Ablation::no_sg, Ablation::no_mpe, Ablation::no_attn, Ablation::no_lg}) {
    ToyGrounder model(cfg, a, /*training=*/true);
    train_model(model, train_set, cfg);
    ToyGrounder eval_model(cfg, a, /*training=*/false);
    eval_model.load_params(model.params());
    const MetricsReport r = evaluate_model(eval_model, test_set, thresholds);
    char line[256];
    std::snprintf(line, sizeof(line), "%s,%.6f,%.6f,%.6f,%.6f,%.6f\n", ablation_name(a).c_str(),
                  r.accuracy(r.overall, 0), r.accuracy(r.overall, 1), r.accuracy(r.unique, 0),
                  r.accuracy(r.multiple, 0),
                  r.overall.episodes ? static_cast<double>(r.overall.category_correct) / r.overall.episodes : 0.0);
    csv += line;
    std::fputs(line, stdout);
  }
  if (!csv_path.empty()) write_text_file(csv_path, csv);
  return 0;
}

int cmd_gradcheck(const std::string& scope, std::uint64_t seed) {
  double worst = 0.0;
  double threshold = 1e-4;
  if (scope == "op") {
    struct Case {
      const char* name;
      Shape shape;
      ScalarFn fn;
    };
    Rng wr(mix_seed(seed, "weights"));
    const Tensor w = randn(wr, {2, 3, 4});
    const Tensor gamma = randn(wr, {4}, 1.0, 0.1);
    const Tensor beta = randn(wr, {4}, 0.0, 0.1);
    const Tensor mat = randn(wr, {4, 5});
    const Tensor w5 = randn(wr, {2, 3, 5});
    std::vector<Case> cases;
    cases.push_back({"matmul", {2, 3, 4}, [&](Tape& t, const Tensor& x) {
                       return sum_all(t, mul(t, matmul(t, x, mat), w5));
                     }});
    cases.push_back({"softmax", {2, 3, 4}, [&](Tape& t, const Tensor& x) {
                       return sum_all(t, mul(t, softmax(t, x, 2), w));
                     }});
    cases.push_back({"layer_norm", {2, 3, 4}, [&](Tape& t, const Tensor& x) {
                       return sum_all(t, mul(t, layer_norm(t, x, gamma, beta, 1e-5), w));
                     }});
    cases.push_back({"gelu", {2, 3, 4}, [&](Tape& t, const Tensor& x) { return sum_all(t, mul(t, gelu(t, x), w)); }});
    cases.push_back({"exp_log", {2, 3, 4}, [&](Tape& t, const Tensor& x) {
                       return sum_all(t, mul(t, log(t, add_scalar(t, mul(t, x, x), 0.5)), w));
                     }});
    for (const auto& c : cases) {
      double op_worst = 0.0;
      for (std::uint64_t s = 0; s < 20; ++s) {
        Rng rng(mix_seed(seed, c.name, s));
        Tensor x = randn(rng, c.shape);
        op_worst = std::max(op_worst, finite_diff_check(c.fn, x, 1e-5).max_rel_err);
      }
      worst = std::max(worst, op_worst);
      std::printf("op %-12s worst rel err %.3e\n", c.name, op_worst);
    }
  } else if (scope == "block") {
    Rng rng(mix_seed(seed, "block"));
    SeBlockParams block = init_se_block(rng, 16, 4);
    std::vector<std::uint8_t> valid(2 * 3, 1);
    Tensor w = randn(rng, {1, 2, 3, 16});
    Tensor x0 = randn(rng, {1, 2, 3, 16});
    auto fn = [&](Tape& t, const Tensor& x) { return sum_all(t, mul(t, se_block(t, x, valid, block), w)); };
    worst = finite_diff_check(fn, x0, 1e-5).max_rel_err;
    std::printf("se_block worst rel err %.3e\n", worst);
  } else if (scope == "model") {
    threshold = 1e-3;
    RunConfig cfg;
    cfg.posenc.dim = 16;
    cfg.posenc.num_freqs = 2;
    cfg.posenc.ray_mlp_hidden = 8;
    cfg.se_blocks = 1;
    cfg.se_heads = 2;
    cfg.fusion_blocks = 1;
    cfg.recon_decoder_blocks = 1;
    cfg.patch_size = 8;
    cfg.views = 2;
    cfg.image_size = 16;
    cfg.num_objects = 2;
    cfg.seed = seed;
    DatasetGenParams gen;
    gen.views = 2;
    gen.image_size = 16;
    gen.num_objects = 2;
    gen.room_extent = 6.0;
    const auto episodes = generate_dataset(seed, 1, gen, "gradcheck");
    ToyGrounder model(cfg, Ablation::full, true);
    // check every parameter tensor end to end through the full loss
    for (auto& [name, tensor] : model.params().items()) {
      auto fn = [&, pname = name](Tape& t, const Tensor& x) {
        Tensor& slot = model.params().at(pname);
        const Tensor saved = slot;
        slot = x;  // carries the watched node during the analytic pass
        auto fw = model.forward(t, episodes[0], true);
        slot = saved;
        return fw.loss_total;
      };
      Tensor x0 = tensor;
      x0.node = -1;
      const auto res = finite_diff_check(fn, x0, 1e-5);
      worst = std::max(worst, res.max_rel_err);
      std::printf("param %-24s rel err %.3e\n", name.c_str(), res.max_rel_err);
    }
  } else {
    throw std::invalid_argument("gradcheck scope must be op, block or model");
  }
  std::printf("gradcheck %s: worst rel err %.3e (threshold %.1e)\n", scope.c_str(), worst, threshold);
  if (worst >= threshold) {
    std::fprintf(stderr, "gradient check failed\n");
    return kExitNumeric;
  }
  return 0;
}

int cmd_bench(const std::vector<std::int64_t>& v_list, const std::vector<std::int64_t>& n_list, std::int64_t dim,
              const std::string& csv_path) {
  std::string csv = "V,N,dim,divided_macs,joint_macs,mac_ratio,divided_ms,joint_ms,time_ratio\n";
  std::fputs(csv.c_str(), stdout);
  for (auto v : v_list) {
    for (auto n : n_list) {
      const double divided = flops_estimate(v, n, dim, AttentionMode::divided);
      const double joint = flops_estimate(v, n, dim, AttentionMode::joint);
      Rng rng(1234);
      Tensor f = randn(rng, {1, v, n, dim});
      std::vector<std::uint8_t> valid(static_cast<std::size_t>(v * n), 1);
      AttentionParams attn = init_attention(rng, dim, 4);
      auto time_ms = [&](auto&& fn) {
        fn();  // warm up
        const auto start = std::chrono::steady_clock::now();
        int reps = 0;
        do {
          fn();
          ++reps;
        } while (std::chrono::steady_clock::now() - start < std::chrono::milliseconds(200) && reps < 5);
        return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count() / reps;
      };
      Tape t(false);
      const double divided_ms = time_ms([&] {
        intra_view_attention(t, f, valid, attn);
        inter_view_attention(t, f, valid, attn);
      });
      const double joint_ms = time_ms([&] { joint_attention(t, f, valid, attn); });
      char line[256];
      std::snprintf(line, sizeof(line), "%lld,%lld,%lld,%.0f,%.0f,%.8f,%.3f,%.3f,%.4f\n", static_cast<long long>(v),
                    static_cast<long long>(n), static_cast<long long>(dim), divided, joint, divided / joint,
                    divided_ms, joint_ms, divided_ms / joint_ms);
      csv += line;
      std::fputs(line, stdout);
    }
  }
  if (!csv_path.empty()) write_text_file(csv_path, csv);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"g3dk: synthetic multi-view 3D grounding toolkit"};
  app.require_subcommand(1);

  std::string config_path, data_path, test_path, out_path, ckpt_path, log_path, csv_path;
  std::string salt, ablate_flag, proposals_mode = "gt", scope = "op";
  std::uint64_t seed = 7;
  int count = 100;
  int workers = 1;
  std::vector<std::int64_t> v_list{1, 2, 4, 8};
  std::vector<std::int64_t> n_list{16, 64, 256};
  std::int64_t dim = 64;

  auto* gen = app.add_subcommand("gen", "generate a synthetic episode dataset");
  gen->add_option("--seed", seed, "top-level seed");
  gen->add_option("--count", count, "number of episodes")->required();
  gen->add_option("--out", out_path, "output JSONL path")->required();
  gen->add_option("--salt", salt, "stream salt (e.g. train/test)");
  gen->add_option("--config", config_path, "run config file");

  auto* train = app.add_subcommand("train", "train the grounding model");
  train->add_option("--config", config_path, "run config file");
  train->add_option("--data", data_path, "training dataset JSONL")->required();
  train->add_option("--out", ckpt_path, "output checkpoint path")->required();
  train->add_option("--log", log_path, "output training log CSV");
  train->add_option("--ablate", ablate_flag, "drop one component: sg|mpe|attn|lg");
  train->add_option("--seed", seed, "override config seed");
  train->add_option("--workers", workers, "deterministic episode fan-out (default 1)");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--config", config_path, "run config file");
  eval->add_option("--checkpoint", ckpt_path, "checkpoint path")->required();
  eval->add_option("--data", data_path, "evaluation dataset JSONL")->required();
  eval->add_option("--proposals", proposals_mode, "gt|jitter");
  eval->add_option("--out", csv_path, "metrics CSV path");
  eval->add_option("--ablate", ablate_flag, "evaluate an ablated architecture");
  eval->add_option("--seed", seed, "override config seed");

  auto* ablate = app.add_subcommand("ablate", "train and evaluate all ablation variants");
  ablate->add_option("--config", config_path, "run config file");
  ablate->add_option("--data", data_path, "training dataset JSONL")->required();
  ablate->add_option("--test", test_path, "evaluation dataset JSONL (defaults to --data)");
  ablate->add_option("--out", csv_path, "comparison CSV path");
  ablate->add_option("--seed", seed, "override config seed");

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  gradcheck->add_option("--scope", scope, "op|block|model");
  gradcheck->add_option("--seed", seed, "seed");

  auto* bench = app.add_subcommand("bench", "divided vs joint attention cost");
  bench->add_option("--views", v_list, "view counts");
  bench->add_option("--patches", n_list, "patch counts");
  bench->add_option("--dim", dim, "feature width");
  bench->add_option("--out", csv_path, "CSV output path");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      RunConfig cfg = load_config_or_default(config_path);
      if (gen->count("--seed") == 0) seed = cfg.seed;  // config/env seed unless given explicitly
      return cmd_gen(seed, count, out_path, salt, cfg);
    }
    if (train->parsed()) {
      RunConfig cfg = load_config_or_default(config_path);
      if (train->count("--seed")) cfg.seed = seed;
      return cmd_train(cfg, data_path, ckpt_path, log_path, ablate_flag, workers);
    }
    if (eval->parsed()) {
      RunConfig cfg = load_config_or_default(config_path);
      if (eval->count("--seed")) cfg.seed = seed;
      return cmd_eval(cfg, ckpt_path, data_path, proposals_mode, csv_path, ablate_flag);
    }
    if (ablate->parsed()) {
      RunConfig cfg = load_config_or_default(config_path);
      if (ablate->count("--seed")) cfg.seed = seed;
      return cmd_ablate(cfg, data_path, test_path, csv_path);
    }
    if (gradcheck->parsed()) return cmd_gradcheck(scope, seed);
    if (bench->parsed()) return cmd_bench(v_list, n_list, dim, csv_path);
  } catch (const g3dk::CheckpointMismatchError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitConfig;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitConfig;
  } catch (const std::domain_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitNumeric;
  } catch (const std::runtime_error& e) {
    const std::string msg = e.what();
    std::fprintf(stderr, "error: %s\n", msg.c_str());
    if (msg.find("non-finite") != std::string::npos || msg.find("aborted at step") != std::string::npos ||
        msg.find("degenerate") != std::string::npos) {
      return kExitNumeric;
    }
    if (msg.find("config") != std::string::npos || msg.find("checkpoint") != std::string::npos) return kExitConfig;
    return kExitIo;
  }
  return 0;
}
