#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>

#include "g3dk/checkpoint.hpp"
#include "g3dk/gradcheck.hpp"
#include "g3dk/ops.hpp"
#include "g3dk/optim.hpp"
#include "g3dk/rng.hpp"
#include "g3dk/tensor.hpp"

using namespace g3dk;

namespace {

Tensor make(Shape s, std::vector<double> d) { return Tensor{std::move(s), std::move(d)}; }

}  // namespace

TEST_CASE("matmul hand cases") {
  Tape t(false);
  Tensor id2 = make({2, 2}, {1, 0, 0, 1});
  Tensor b = make({2, 2}, {3, 4, 5, 6});
  CHECK(matmul(t, id2, b).data == std::vector<double>{3, 4, 5, 6});

  Tensor row = make({1, 2}, {1, 2});
  Tensor col = make({2, 1}, {3, 4});
  CHECK(matmul(t, row, col).item() == 11.0);

  CHECK_THROWS_AS(matmul(t, make({2, 3}, std::vector<double>(6, 0.0)), make({2, 2}, {1, 2, 3, 4})),
                  std::invalid_argument);
}

TEST_CASE("matmul gradients vs central differences") {
  Rng rng(11);
  Tensor a = randn(rng, {4, 5});
  Tensor b = randn(rng, {5, 3});
  Tensor w = randn(rng, {4, 3});
  auto f_a = [&](Tape& tape, const Tensor& x) { return sum_all(tape, mul(tape, matmul(tape, x, b), w)); };
  auto f_b = [&](Tape& tape, const Tensor& x) { return sum_all(tape, mul(tape, matmul(tape, a, x), w)); };
  CHECK(finite_diff_check(f_a, a, 1e-5).max_rel_err < 1e-6);
  CHECK(finite_diff_check(f_b, b, 1e-5).max_rel_err < 1e-6);
}

TEST_CASE("batched matmul matches per-slice products") {
  Rng rng(5);
  Tensor a = randn(rng, {2, 3, 4, 5});
  Tensor b = randn(rng, {2, 3, 5, 2});
  Tape t(false);
  Tensor out = matmul(t, a, b);
  REQUIRE(out.shape == Shape{2, 3, 4, 2});
  for (int batch = 0; batch < 6; ++batch) {
    Tensor as{Shape{4, 5}, std::vector<double>(a.data.begin() + batch * 20, a.data.begin() + (batch + 1) * 20)};
    Tensor bs{Shape{5, 2}, std::vector<double>(b.data.begin() + batch * 10, b.data.begin() + (batch + 1) * 10)};
    Tensor os = matmul(t, as, bs);
    for (int i = 0; i < 8; ++i) {
      CHECK(out.data[static_cast<std::size_t>(batch * 8 + i)] == doctest::Approx(os.data[static_cast<std::size_t>(i)]).epsilon(1e-15));
    }
  }
}

TEST_CASE("softmax hand cases and invariants") {
  Tape t(false);
  Tensor u = softmax(t, make({3}, {0, 0, 0}), 0);
  for (double v : u.data) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-15));

  Tensor big = softmax(t, make({2}, {1000, 1000}), 0);
  CHECK(big.data[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(std::isfinite(big.data[1]));

  Tensor x = make({3}, {1, 2, 3});
  Tensor s = softmax(t, x, 0);
  double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  for (int i = 0; i < 3; ++i) CHECK(std::fabs(s.data[static_cast<std::size_t>(i)] - std::exp(1.0 + i) / z) < 1e-12);

  // rows sum to 1 and shift invariance
  Rng rng(3);
  Tensor r = randn(rng, {4, 7});
  Tensor sr = softmax(t, r, 1);
  for (int row = 0; row < 4; ++row) {
    double sum = 0;
    for (int c = 0; c < 7; ++c) sum += sr.data[static_cast<std::size_t>(row * 7 + c)];
    CHECK(std::fabs(sum - 1.0) < 1e-12);
  }
  Tensor shifted = r;
  for (int row = 0; row < 4; ++row) {
    for (int c = 0; c < 7; ++c) shifted.data[static_cast<std::size_t>(row * 7 + c)] += 5.25;
  }
  Tensor ss = softmax(t, shifted, 1);
  for (std::size_t i = 0; i < ss.data.size(); ++i) CHECK(std::fabs(ss.data[i] - sr.data[i]) < 1e-12);
}

TEST_CASE("layer_norm hand cases") {
  Tape t(false);
  Tensor gamma = ones({4});
  Tensor beta = zeros({4});
  Tensor c = layer_norm(t, make({1, 4}, {2, 2, 2, 2}), gamma, beta, 1e-5);
  for (double v : c.data) CHECK(std::fabs(v) < 1e-12);

  Tensor two = layer_norm(t, make({1, 2}, {1, 3}), ones({2}), zeros({2}), 0.0);
  CHECK(two.data[0] == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(two.data[1] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("layer_norm gradients") {
  Rng rng(7);
  Tensor x = randn(rng, {3, 8});
  Tensor gamma = randn(rng, {8}, 1.0, 0.1);
  Tensor beta = randn(rng, {8}, 0.0, 0.1);
  Tensor w = randn(rng, {3, 8});
  auto wrap = [&](const Tensor& out, Tape& tape) { return sum_all(tape, mul(tape, out, w)); };
  auto f_x = [&](Tape& tape, const Tensor& v) { return wrap(layer_norm(tape, v, gamma, beta, 1e-5), tape); };
  auto f_g = [&](Tape& tape, const Tensor& v) { return wrap(layer_norm(tape, x, v, beta, 1e-5), tape); };
  auto f_b = [&](Tape& tape, const Tensor& v) { return wrap(layer_norm(tape, x, gamma, v, 1e-5), tape); };
  CHECK(finite_diff_check(f_x, x, 1e-5).max_rel_err < 1e-5);
  CHECK(finite_diff_check(f_g, gamma, 1e-5).max_rel_err < 1e-5);
  CHECK(finite_diff_check(f_b, beta, 1e-5).max_rel_err < 1e-5);
}

TEST_CASE("elementwise hand cases") {
  Tape t(false);
  for (double v : {-2.0, 0.0, 5.0}) {
    Tensor x = scalar_tensor(v);
    CHECK(log(t, exp(t, x)).item() == doctest::Approx(v).epsilon(1e-12));
  }
  CHECK(mean_all(t, make({3}, {2, 4, 6})).item() == 4.0);
  CHECK_THROWS_AS(log(t, scalar_tensor(-1.0)), std::domain_error);
  CHECK_THROWS_AS(log(t, scalar_tensor(0.0)), std::domain_error);

  // suffix broadcast: bias over leading batch axes
  Tensor b = add(t, make({2, 3}, {1, 2, 3, 4, 5, 6}), make({3}, {10, 20, 30}));
  CHECK(b.data == std::vector<double>{11, 22, 33, 14, 25, 36});
}

TEST_CASE("every registered op passes the finite-difference property over 100 seeds") {
  struct OpCase {
    const char* name;
    Shape shape;
    ScalarFn fn;
  };
  // each op is reduced to a scalar through a fixed random weighting so the
  // upstream gradient is non-uniform
  auto weighted = [](Tape& tape, const Tensor& y, const Tensor& w) { return sum_all(tape, mul(tape, y, w)); };

  std::vector<OpCase> cases;
  Rng wr(99);
  const Tensor w234 = randn(wr, {2, 3, 4});
  const Tensor w23 = randn(wr, {2, 3});
  const Tensor w24 = randn(wr, {2, 4});
  const Tensor w34 = randn(wr, {3, 4});
  const Tensor wb = randn(wr, {4});
  const Tensor other = randn(wr, {2, 3, 4});
  const Tensor mat = randn(wr, {4, 5});
  const Tensor w25 = randn(wr, {2, 3, 5});
  const Tensor gam = randn(wr, {4}, 1.0, 0.2);
  const Tensor bet = randn(wr, {4}, 0.0, 0.2);
  std::vector<std::uint8_t> msk(24, 1);
  msk[3] = msk[7] = msk[20] = 0;

  cases.push_back({"add", {2, 3, 4}, [&](Tape& t, const Tensor& x) { return weighted(t, add(t, x, other), w234); }});
  cases.push_back({"add_bias", {2, 3, 4}, [&](Tape& t, const Tensor& x) { return weighted(t, add(t, x, wb), w234); }});
  cases.push_back({"sub", {2, 3, 4}, [&](Tape& t, const Tensor& x) { return weighted(t, sub(t, other, x), w234); }});
  cases.push_back({"mul", {2, 3, 4}, [&](Tape& t, const Tensor& x) { return weighted(t, mul(t, x, other), w234); }});
  cases.push_back({"div", {2, 3, 4}, [&](Tape& t, const Tensor& x) {
                     return weighted(t, div(t, other, add_scalar(t, mul(t, x, x), 1.5)), w234);
                   }});
  cases.push_back({"exp", {2, 3, 4}, [&](Tape& t, const Tensor& x) { return weighted(t, exp(t, x), w234); }});
  cases.push_back({"log", {2, 3, 4}, [&](Tape& t, const Tensor& x) {
                     return weighted(t, log(t, add_scalar(t, mul(t, x, x), 0.5)), w234);
                   }});
  cases.push_back({"relu", {2, 3, 4}, [&](Tape& t, const Tensor& x) {
                     return weighted(t, relu(t, add_scalar(t, x, 0.05)), w234);
                   }});
  cases.push_back({"gelu", {2, 3, 4}, [&](Tape& t, const Tensor& x) { return weighted(t, gelu(t, x), w234); }});
  cases.push_back({"mean_axis", {2, 3, 4}, [&](Tape& t, const Tensor& x) { return weighted(t, mean(t, x, 1), w24); }});
  cases.push_back({"sum_axis", {2, 3, 4}, [&](Tape& t, const Tensor& x) { return weighted(t, sum(t, x, 2), w23); }});
  cases.push_back({"concat", {2, 3, 4}, [&](Tape& t, const Tensor& x) {
                     const Tensor parts[2] = {x, exp(t, x)};
                     Tensor y = concat(t, parts, 1);
                     return mean_all(t, mul(t, y, y));
                   }});
  cases.push_back({"slice", {2, 3, 4}, [&](Tape& t, const Tensor& x) {
                     return weighted(t, concat(t, std::vector<Tensor>{slice(t, x, 1, 1, 2), slice(t, x, 1, 0, 1)}, 1), w234);
                   }});
  cases.push_back({"gather", {2, 3, 4}, [&](Tape& t, const Tensor& x) {
                     const std::int64_t idx[3] = {1, 0, 1};  // duplicate index accumulates
                     Tensor flat = reshape(t, x, {2, 12});
                     Tensor g = gather(t, flat, idx);
                     return mean_all(t, mul(t, g, g));
                   }});
  cases.push_back({"l2_norm", {2, 3, 4}, [&](Tape& t, const Tensor& x) { return weighted(t, l2_norm(t, x, 2), w23); }});
  cases.push_back({"softmax", {2, 3, 4}, [&](Tape& t, const Tensor& x) { return weighted(t, softmax(t, x, 2), w234); }});
  cases.push_back({"masked_softmax", {2, 3, 4}, [&](Tape& t, const Tensor& x) {
                     return weighted(t, masked_softmax_last(t, x, msk), w234);
                   }});
  cases.push_back({"layer_norm", {2, 3, 4}, [&](Tape& t, const Tensor& x) {
                     return weighted(t, layer_norm(t, x, gam, bet, 1e-5), w234);
                   }});
  cases.push_back({"matmul", {2, 3, 4}, [&](Tape& t, const Tensor& x) { return weighted(t, matmul(t, x, mat), w25); }});
  const Tensor w243 = randn(wr, {2, 4, 3});
  cases.push_back({"transpose", {2, 3, 4}, [&](Tape& t, const Tensor& x) {
                     return weighted(t, transpose(t, x, 1, 2), w243); }});
  cases.push_back({"expand_prefix", {2, 3}, [&](Tape& t, const Tensor& x) {
                     return weighted(t, expand_from_prefix(t, x, {2, 3, 4}), w234);
                   }});
  cases.push_back({"cross_entropy", {4}, [&](Tape& t, const Tensor& x) {
                     const std::int64_t tgt[1] = {2};
                     return cross_entropy_logits(t, x, tgt);
                   }});

  for (const auto& c : cases) {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      Rng rng(mix_seed(seed, c.name));
      Tensor x = randn(rng, c.shape);
      worst = std::max(worst, finite_diff_check(c.fn, x, 1e-5).max_rel_err);
    }
    INFO(std::string(c.name), " worst rel err ", worst);
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("DAG with shared input accumulates gradients") {
  // s = sum(x*x + x); ds/dx = 2x + 1, from the hand-expanded expression
  Tensor x = make({3}, {1.5, -2.0, 0.25});
  Tape tape;
  tape.watch(x);
  Tensor z = mul(tape, x, x);
  Tensor w = add(tape, z, x);
  Tensor s = sum_all(tape, w);
  tape.backward(s);
  const auto& g = tape.grad(x);
  for (int i = 0; i < 3; ++i) {
    CHECK(g[static_cast<std::size_t>(i)] == doctest::Approx(2 * x.data[static_cast<std::size_t>(i)] + 1).epsilon(1e-14));
  }
}

TEST_CASE("backward requires a recorded scalar root") {
  Tensor x = make({2}, {1, 2});
  Tape tape;
  tape.watch(x);
  Tensor y = mul(tape, x, x);
  CHECK_THROWS_AS(tape.backward(y), std::logic_error);
  Tensor c = make({1}, {3});  // not on the tape
  CHECK_THROWS_AS(tape.backward(c), std::logic_error);
}

TEST_CASE("finite_diff_check reference examples") {
  auto f = [](Tape& tape, const Tensor& x) { return sum_all(tape, mul(tape, x, x)); };
  Tensor x = make({2}, {1, 2});
  {
    Tape tape;
    Tensor xx = x;
    tape.watch(xx);
    Tensor y = f(tape, xx);
    tape.backward(y);
    CHECK(tape.grad(xx) == std::vector<double>{2, 4});
  }
  CHECK(finite_diff_check(f, x, 1e-5).max_rel_err < 1e-8);

  Rng rng(21);
  Tensor logits = randn(rng, {6});
  auto ce = [](Tape& tape, const Tensor& v) {
    const std::int64_t tgt[1] = {3};
    return cross_entropy_logits(tape, v, tgt);
  };
  CHECK(finite_diff_check(ce, logits, 1e-5).max_rel_err < 1e-5);
}

TEST_CASE("adam_step") {
  AdamConfig cfg;
  CHECK(cfg.weight_decay == 0.0);  // decoupled decay defaults off

  SUBCASE("zero grads leave params unchanged") {
    Tensor p = make({3}, {1, -2, 3});
    const std::vector<double> before = p.data;
    std::vector<double> g(3, 0.0);
    AdamState st;
    Tensor* ps[1] = {&p};
    const std::vector<double>* gs[1] = {&g};
    adam_step(st, cfg, ps, gs);
    CHECK(p.data == before);
  }

  SUBCASE("single scalar step matches the hand formula") {
    cfg.lr = 0.1;
    Tensor p = make({1}, {1.0});
    std::vector<double> g = {0.5};
    AdamState st;
    Tensor* ps[1] = {&p};
    const std::vector<double>* gs[1] = {&g};
    adam_step(st, cfg, ps, gs);
    const double m = (1 - cfg.beta1) * 0.5;
    const double v = (1 - cfg.beta2) * 0.25;
    const double mhat = m / (1 - cfg.beta1);
    const double vhat = v / (1 - cfg.beta2);
    const double expect = 1.0 - cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    CHECK(p.data[0] == doctest::Approx(expect).epsilon(1e-12));
  }

  SUBCASE("NaN gradient aborts with the step index") {
    Tensor p = make({1}, {1.0});
    std::vector<double> g = {std::nan("")};
    AdamState st;
    Tensor* ps[1] = {&p};
    const std::vector<double>* gs[1] = {&g};
    CHECK_THROWS_WITH_AS(adam_step(st, cfg, ps, gs), doctest::Contains("step 1"), std::runtime_error);
  }
}

TEST_CASE("warmup cosine schedule") {
  const double w = warmup_cosine_lr(0, 100, 0.05);
  CHECK(w == doctest::Approx(1.0 / 5));  // 5 warmup steps
  CHECK(warmup_cosine_lr(4, 100, 0.05) == doctest::Approx(1.0));
  CHECK(warmup_cosine_lr(5, 100, 0.05) == doctest::Approx(1.0));
  CHECK(warmup_cosine_lr(99, 100, 0.05) < 0.01);
}

TEST_CASE("checkpoint round trip and corruption") {
  ParamStore store;
  Rng rng(17);
  store.add("w", randn(rng, {3, 4}));
  store.add("b", randn(rng, {4}));
  store.add("scalar", scalar_tensor(0.25));
  const std::string path = "/tmp/g3dk_test_ckpt.bin";
  save_checkpoint(path, store);
  ParamStore loaded = load_checkpoint(path);
  REQUIRE(loaded.count() == 3);
  CHECK(loaded.at("w").shape == Shape{3, 4});
  CHECK(loaded.at("w").data == store.at("w").data);
  CHECK(loaded.at("scalar").data == store.at("scalar").data);

  // magic bytes
  FILE* f = std::fopen(path.c_str(), "rb");
  char magic[4];
  REQUIRE(std::fread(magic, 1, 4, f) == 4);
  std::fclose(f);
  CHECK(std::string(magic, 4) == "G3DK");

  // truncated payload
  f = std::fopen(path.c_str(), "rb");
  std::fseek(f, 0, SEEK_END);
  const long sz = std::ftell(f);
  std::fclose(f);
  std::vector<char> bytes(static_cast<std::size_t>(sz - 9));
  f = std::fopen(path.c_str(), "rb");
  REQUIRE(std::fread(bytes.data(), 1, bytes.size(), f) == bytes.size());
  std::fclose(f);
  f = std::fopen(path.c_str(), "wb");
  std::fwrite(bytes.data(), 1, bytes.size(), f);
  std::fclose(f);
  CHECK_THROWS_AS(load_checkpoint(path), std::runtime_error);
}

TEST_CASE("rng determinism") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.normal() == b.normal());
  CHECK(mix_seed(7, "x", 1) != mix_seed(7, "x", 2));
  CHECK(mix_seed(7, "x", 1) == mix_seed(7, "x", 1));
}
