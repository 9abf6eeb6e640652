#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>

#include "g3dk/config.hpp"

using namespace g3dk;

TEST_CASE("defaults carry the published hyperparameters") {
  const RunConfig d;
  CHECK(d.tau == 0.07);
  CHECK(d.lambda_g == 1.0);
  CHECK(d.lambda_r == 0.3);
  CHECK(d.lambda_l == 1.0);
  CHECK(d.warmup_ratio == 0.05);
  CHECK(d.weight_decay == 0.0);
  CHECK(d.recon_alpha == 0.2);
  CHECK(d.recon_reg_sign == "reward");
  CHECK_NOTHROW(d.validate());
}

TEST_CASE("parse_run_config") {
  SUBCASE("well-formed text with comments") {
    const RunConfig cfg = parse_run_config(
        "# a comment\n"
        "posenc.dim = 32\n"
        "se.heads=4\n"
        "loss.tau = 0.05   # inline comment\n"
        "\n"
        "recon.reg_sign = paper\n");
    CHECK(cfg.posenc.dim == 32);
    CHECK(cfg.se_heads == 4);
    CHECK(cfg.tau == 0.05);
    CHECK(cfg.recon_reg_sign == "paper");
    CHECK(cfg.lambda_r == 0.3);  // untouched defaults survive
  }

  SUBCASE("unknown keys are keyed errors with the line number") {
    CHECK_THROWS_WITH_AS(parse_run_config("posenc.dim = 32\nnot.a.key = 1\n"),
                         doctest::Contains("line 2"), std::runtime_error);
    CHECK_THROWS_WITH_AS(parse_run_config("not.a.key = 1\n"), doctest::Contains("not.a.key"), std::runtime_error);
  }

  SUBCASE("bad values name the key") {
    CHECK_THROWS_WITH_AS(parse_run_config("loss.tau = banana\n"), doctest::Contains("loss.tau"), std::runtime_error);
    CHECK_THROWS_AS(parse_run_config("recon.reg_sign = maybe\n"), std::runtime_error);
    CHECK_THROWS_AS(parse_run_config("loss.tau 0.07\n"), std::runtime_error);
  }

  SUBCASE("validation catches inconsistent combinations") {
    CHECK_THROWS_AS(parse_run_config("posenc.dim = 30\nse.heads = 4\n"), std::invalid_argument);
    CHECK_THROWS_AS(parse_run_config("posenc.dim = 16\nposenc.num_freqs = 4\n"), std::invalid_argument);
    CHECK_THROWS_AS(parse_run_config("loss.tau = 0\n"), std::invalid_argument);
  }
}

TEST_CASE("G3DK_SEED overrides the configured seed") {
  RunConfig cfg;
  cfg.seed = 7;
  setenv("G3DK_SEED", "1234", 1);
  apply_env_seed(cfg);
  CHECK(cfg.seed == 1234);
  unsetenv("G3DK_SEED");
  apply_env_seed(cfg);
  CHECK(cfg.seed == 1234);  // unchanged without the env var
}

TEST_CASE("every documented key parses with its printed default") {
  std::string text;
  for (const auto& [key, value] : config_defaults()) text += key + " = " + value + "\n";
  const RunConfig cfg = parse_run_config(text);
  const RunConfig d;
  CHECK(cfg.posenc.dim == d.posenc.dim);
  CHECK(cfg.tau == d.tau);
  CHECK(cfg.steps == d.steps);
  CHECK(cfg.jitter_sigma_s == d.jitter_sigma_s);
}
