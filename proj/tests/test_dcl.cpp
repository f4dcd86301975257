#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "oracles.hpp"
#include "tilevlm/dataset.hpp"
#include "tilevlm/dcl.hpp"

using tvlm::Branch;
using tvlm::Tensor;

namespace {

Tensor random_logits(std::size_t n, std::size_t v, std::uint64_t seed) {
  Tensor t = Tensor::zeros({n, v});
  tvlm::Rng rng = tvlm::derive_rng(seed, "test.dcl.logits");
  for (auto& x : t.mutable_value()) x = rng.uniform(-2.0, 2.0);
  return t;
}

}  // namespace

TEST_CASE("distillation divergence of identical logits is exactly zero") {
  Tensor x = random_logits(3, 5, 301);
  std::vector<bool> mask{true, true, true};
  REQUIRE(tvlm::kd_divergence(x, x, mask).item() == 0.0);
  REQUIRE(tvlm::kd_divergence(x, x, mask, 2.5).item() == 0.0);
}

TEST_CASE("distillation divergence matches the closed form for a 2-way row") {
  // softmax([ln 2, 0]) = (2/3, 1/3) against the uniform pair:
  // KL = 2/3 ln(4/3) + 1/3 ln(2/3).
  Tensor s = Tensor::from({1, 2}, {std::log(2.0), 0.0});
  Tensor t = Tensor::from({1, 2}, {0.0, 0.0});
  double got = tvlm::kd_divergence(s, t, {true}).item();
  REQUIRE_THAT(got, Catch::Matchers::WithinAbs(0.0566330122651325, 1e-12));

  // Only masked rows contribute: prepending an ignored row changes nothing.
  Tensor s2 = Tensor::from({2, 2}, {5.0, -3.0, std::log(2.0), 0.0});
  Tensor t2 = Tensor::from({2, 2}, {1.0, 1.0, 0.0, 0.0});
  double got2 = tvlm::kd_divergence(s2, t2, {false, true}).item();
  REQUIRE(got2 == got);
}

TEST_CASE("temperature divides logits before the softmax") {
  Tensor s1 = Tensor::from({1, 2}, {std::log(2.0), 0.0});
  Tensor s2 = Tensor::from({1, 2}, {2.0 * std::log(2.0), 0.0});
  Tensor t = Tensor::from({1, 2}, {0.0, 0.0});
  double at_t1 = tvlm::kd_divergence(s1, t, {true}, 1.0).item();
  double at_t2 = tvlm::kd_divergence(s2, t, {true}, 2.0).item();
  REQUIRE_THAT(at_t2, Catch::Matchers::WithinAbs(at_t1, 1e-12));
}

TEST_CASE("distillation divergence is non-negative on random inputs") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Tensor s = random_logits(4, 7, 400 + seed);
    Tensor t = random_logits(4, 7, 500 + seed);
    REQUIRE(tvlm::kd_divergence(s, t, {true, true, false, true}).item() >= 0.0);
  }
}

TEST_CASE("distillation gradient reaches the student and matches finite differences") {
  Tensor s = random_logits(3, 6, 601).set_requires_grad();
  Tensor t = random_logits(3, 6, 602).set_requires_grad();
  std::vector<bool> mask{true, false, true};
  double temperature = 1.7;

  Tensor kd = tvlm::kd_divergence(s, t, mask, temperature);
  tvlm::backward(kd);

  REQUIRE(s.has_grad());
  // The teacher is a constant: no gradient flows to it even when flagged.
  REQUIRE_FALSE(t.has_grad());

  std::vector<double> analytic = s.grad();
  // The unmasked row must receive exactly zero.
  for (std::size_t j = 0; j < 6; ++j) REQUIRE(analytic[1 * 6 + j] == 0.0);

  tvlm::tape().clear();
  double err = oracle::fd_max_rel_error(s, analytic, [&]() {
    tvlm::NoGradGuard ng;
    return tvlm::kd_divergence(s, t, mask, temperature).item();
  });
  REQUIRE(err <= 1e-3);
}

TEST_CASE("distillation divergence validates its inputs") {
  Tensor s = random_logits(2, 4, 701);
  Tensor t = random_logits(2, 4, 702);
  REQUIRE_THROWS_AS(tvlm::kd_divergence(s, t, {true, true}, 0.0), tvlm::ParameterError);
  REQUIRE_THROWS_AS(tvlm::kd_divergence(s, t, {true}), tvlm::DimensionError);
  REQUIRE_THROWS_AS(tvlm::kd_divergence(s, t, {false, false}), tvlm::ContractError);
  REQUIRE_THROWS_AS(tvlm::kd_divergence(s, random_logits(2, 5, 703), {true, true}),
                    tvlm::DimensionError);
}

TEST_CASE("branch alternation starts large and respects the period") {
  using tvlm::active_branch;
  REQUIRE(active_branch(0, 1) == Branch::kLarge);
  REQUIRE(active_branch(1, 1) == Branch::kSmall);
  REQUIRE(active_branch(2, 1) == Branch::kLarge);
  REQUIRE(active_branch(0, 2) == Branch::kLarge);
  REQUIRE(active_branch(1, 2) == Branch::kLarge);
  REQUIRE(active_branch(2, 2) == Branch::kSmall);
  REQUIRE(active_branch(3, 2) == Branch::kSmall);
  REQUIRE(active_branch(4, 2) == Branch::kLarge);
  REQUIRE_THROWS_AS(active_branch(3, 0), tvlm::ParameterError);
}

TEST_CASE("alternating training distills only on small-branch steps") {
  tvlm::Engine engine{tvlm::EngineConfig{}};
  auto samples = tvlm::make_caption_set(2, 11);

  tvlm::DclOptions opt;
  opt.period = 1;
  auto log = tvlm::run_dcl_training(engine, samples, 4, opt);
  REQUIRE(log.size() == 4);
  REQUIRE(log[0].branch == Branch::kLarge);
  REQUIRE(log[1].branch == Branch::kSmall);
  REQUIRE(log[0].kd == 0.0);
  REQUIRE(log[2].kd == 0.0);
  REQUIRE(log[1].kd > 0.0);
  REQUIRE(log[3].kd > 0.0);
  for (const auto& row : log) REQUIRE(row.ce > 0.0);
}

TEST_CASE("a zero distillation weight turns the pull off entirely") {
  tvlm::Engine engine{tvlm::EngineConfig{}};
  auto samples = tvlm::make_caption_set(2, 11);

  tvlm::DclOptions opt;
  opt.lambda = 0.0;
  auto log = tvlm::run_dcl_training(engine, samples, 2, opt);
  REQUIRE(log[1].branch == Branch::kSmall);
  REQUIRE(log[1].kd == 0.0);
}

TEST_CASE("plain supervised training lowers the evaluation loss") {
  tvlm::Engine engine{tvlm::EngineConfig{}};
  auto samples = tvlm::make_caption_set(2, 19);

  double before = tvlm::eval_mean_ce(engine, samples, Branch::kLarge);
  auto losses = tvlm::ce_train(engine, samples, Branch::kLarge, 16, 0.05);
  double after = tvlm::eval_mean_ce(engine, samples, Branch::kLarge);
  REQUIRE(losses.size() == 16);
  REQUIRE(after < before);
}

TEST_CASE("branch agreement averages the per-sample divergences") {
  tvlm::Engine engine{tvlm::EngineConfig{}};
  auto samples = tvlm::make_caption_set(2, 23);

  double agree = tvlm::branch_agreement_kl(engine, samples);
  REQUIRE(agree > 0.0);

  tvlm::NoGradGuard ng;
  double acc = 0.0;
  for (const auto& s : samples) {
    auto [small_logits, sb] = engine.sample_logits(s.image, s.prompt, s.answer, Branch::kSmall);
    Tensor large_logits = engine.sample_logits(s.image, s.prompt, s.answer, Branch::kLarge).first;
    acc += tvlm::kd_divergence(small_logits, large_logits, sb.loss_mask).item();
  }
  REQUIRE_THAT(agree, Catch::Matchers::WithinAbs(acc / 2.0, 1e-12));
}

TEST_CASE("training entry points reject empty sample sets") {
  tvlm::Engine engine{tvlm::EngineConfig{}};
  std::vector<tvlm::CaptionSample> none;
  REQUIRE_THROWS_AS(tvlm::run_dcl_training(engine, none, 3, tvlm::DclOptions{}),
                    tvlm::ContractError);
  REQUIRE_THROWS_AS(tvlm::ce_train(engine, none, Branch::kLarge, 3, 0.05), tvlm::ContractError);
  REQUIRE_THROWS_AS(tvlm::eval_mean_ce(engine, none, Branch::kLarge), tvlm::ContractError);
  REQUIRE_THROWS_AS(tvlm::branch_agreement_kl(engine, none), tvlm::ContractError);
}
